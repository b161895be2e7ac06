#include "scord/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

namespace scord {

using nlohmann::json;

namespace {

json box_to_json(const BoxPixels& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

BoxPixels box_from_json(const json& j) {
  return BoxPixels{j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(),
                   j.at(3).get<double>()};
}

}  // namespace

std::string record_to_json_line(const SampleRecord& r) {
  json j;
  j["id"] = r.id;
  j["image"] = {{"kind", r.image.kind},
                {"ref", r.image.ref},
                {"width", r.image.width},
                {"height", r.image.height}};
  j["subject"] = r.subject;
  j["subject_box"] = box_to_json(r.subject_box);
  j["relation"] = r.relation;
  j["object"] = r.object;
  j["object_box"] = r.object_box ? box_to_json(*r.object_box) : json(nullptr);
  j["grounded"] = r.grounded;
  j["source"] = r.source;
  return j.dump();
}

SampleRecord record_from_json_line(const std::string& line) {
  json j = json::parse(line);
  SampleRecord r;
  r.id = j.at("id").get<std::string>();
  r.image.kind = j.at("image").at("kind").get<std::string>();
  r.image.ref = j.at("image").at("ref").get<std::string>();
  r.image.width = j.at("image").at("width").get<double>();
  r.image.height = j.at("image").at("height").get<double>();
  r.subject = j.at("subject").get<std::string>();
  r.subject_box = box_from_json(j.at("subject_box"));
  r.relation = j.at("relation").get<std::string>();
  r.object = j.at("object").get<std::string>();
  if (!j.at("object_box").is_null()) r.object_box = box_from_json(j.at("object_box"));
  r.grounded = j.at("grounded").get<bool>();
  r.source = j.at("source").get<std::string>();
  if (r.grounded != r.object_box.has_value())
    throw ValidationError("record " + r.id + ": grounded flag inconsistent with object_box");
  return r;
}

std::vector<SampleRecord> read_records(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read records: " + path);
  std::vector<SampleRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out.push_back(record_from_json_line(line));
  }
  return out;
}

void write_records(const std::vector<SampleRecord>& records, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write records: " + path);
  for (const auto& r : records) os << record_to_json_line(r) << "\n";
}

Lexicon Lexicon::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read lexicon: " + path);
  Lexicon lex;
  std::set<std::string>* current = nullptr;
  std::string line;
  while (std::getline(is, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (line == "[verbs]")
      current = &lex.verbs;
    else if (line == "[prepositions]")
      current = &lex.prepositions;
    else if (line == "[ignorable]")
      current = &lex.ignorable;
    else if (line == "[nouns]")
      current = &lex.nouns;
    else if (current)
      current->insert(line);
    else
      throw ValidationError("lexicon: term before any section header: " + line);
  }
  return lex;
}

void Lexicon::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write lexicon: " + path);
  auto dump = [&](const char* header, const std::set<std::string>& terms) {
    os << header << "\n";
    for (const auto& t : terms) os << t << "\n";
  };
  dump("[verbs]", verbs);
  dump("[prepositions]", prepositions);
  dump("[ignorable]", ignorable);
  dump("[nouns]", nouns);
}

std::set<std::string> Lexicon::noun_words() const {
  std::set<std::string> words;
  for (const auto& n : nouns)
    for (const auto& w : split_words(n)) words.insert(w);
  return words;
}

namespace {

std::vector<std::string> caption_tokens(const std::string& caption) {
  std::string cleaned;
  for (char c : caption)
    cleaned.push_back(std::isalnum(static_cast<unsigned char>(c)) ? c : ' ');
  return split_words(cleaned);
}

// Longest noun-phrase match at position i, in words; 0 if none.
size_t noun_match(const std::vector<std::string>& toks, size_t i, const Lexicon& lex,
                  size_t max_noun_words, std::string* out) {
  for (size_t len = std::min(max_noun_words, toks.size() - i); len >= 1; --len) {
    std::string phrase;
    for (size_t k = 0; k < len; ++k) phrase += (k ? " " : "") + toks[i + k];
    if (lex.nouns.count(phrase)) {
      *out = phrase;
      return len;
    }
  }
  return 0;
}

// NP = ignorable* noun. Returns one-past-end of the NP, or i on failure.
size_t np_match(const std::vector<std::string>& toks, size_t i, const Lexicon& lex,
                size_t max_noun_words, std::string* noun) {
  size_t j = i;
  while (j < toks.size()) {
    if (size_t len = noun_match(toks, j, lex, max_noun_words, noun)) return j + len;
    if (lex.ignorable.count(toks[j]))
      ++j;
    else
      return i;
  }
  return i;
}

}  // namespace

std::vector<Triplet> extract_triplets(const std::string& caption, const Lexicon& lex) {
  auto toks = caption_tokens(caption);
  size_t max_noun_words = 1;
  for (const auto& n : lex.nouns)
    max_noun_words = std::max(max_noun_words, split_words(n).size());

  std::vector<Triplet> out;
  size_t i = 0;
  while (i < toks.size()) {
    std::string subject;
    size_t after_np1 = np_match(toks, i, lex, max_noun_words, &subject);
    if (after_np1 == i || after_np1 >= toks.size() || !lex.verbs.count(toks[after_np1])) {
      ++i;
      continue;
    }
    std::string verb = toks[after_np1];
    size_t j = after_np1 + 1;

    // Prefer "V P NP2"; fall back to "V NP2".
    std::string object;
    size_t end = 0;
    std::string relation = verb;
    if (j < toks.size() && lex.prepositions.count(toks[j])) {
      end = np_match(toks, j + 1, lex, max_noun_words, &object);
      if (end > j + 1) relation = verb + " " + toks[j];
    }
    if (end == 0 || end <= j) {
      end = np_match(toks, j, lex, max_noun_words, &object);
      relation = verb;
    }
    if (end <= j) {
      ++i;
      continue;
    }
    out.push_back(Triplet{subject, relation, object});
    i = end;  // non-overlapping, left to right
  }
  return out;
}

std::map<RelObjPair, long> build_pair_statistics(const std::vector<SampleRecord>& records,
                                                 const std::vector<Triplet>& caption_triplets,
                                                 long min_count, long max_count) {
  if (min_count > max_count) throw ConfigError("build_pair_statistics: min_count > max_count");
  std::map<RelObjPair, long> counts;
  for (const auto& r : records) ++counts[r.rel_obj_pair()];
  for (const auto& t : caption_triplets) ++counts[{t.relation, t.object}];
  std::map<RelObjPair, long> filtered;
  for (const auto& [pair, n] : counts)
    if (n >= min_count && n <= max_count) filtered[pair] = n;
  return filtered;
}

std::pair<std::set<RelObjPair>, std::set<RelObjPair>> partition_rel_obj_sets(
    const std::set<RelObjPair>& pairs, uint64_t seed) {
  if (pairs.size() < 2) throw ConfigError("partition_rel_obj_sets: need at least 2 pairs");
  std::vector<RelObjPair> shuffled(pairs.begin(), pairs.end());
  std::mt19937_64 rng(seed);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  size_t size_a = (shuffled.size() + 1) / 2;  // odd cardinality favors A
  std::set<RelObjPair> a(shuffled.begin(), shuffled.begin() + size_a);
  std::set<RelObjPair> b(shuffled.begin() + size_a, shuffled.end());
  return {a, b};
}

BenchmarkSplits build_splits(const std::vector<SampleRecord>& grounded,
                             const std::vector<SampleRecord>& ungrounded, const SplitSpec& spec,
                             const std::set<RelObjPair>& set_a,
                             const std::set<RelObjPair>& set_b,
                             const std::vector<SampleRecord>& test_pool) {
  if (spec.setA_removal_fraction < 0 || spec.setA_removal_fraction > 1)
    throw ConfigError("build_splits: removal fraction out of [0,1]");
  for (const auto& p : set_a)
    if (set_b.count(p)) throw ConfigError("build_splits: Set A and Set B overlap");

  std::vector<SampleRecord> sorted = grounded;
  std::sort(sorted.begin(), sorted.end(),
            [](const SampleRecord& a, const SampleRecord& b) { return a.id < b.id; });

  // Indices per Set-A pair, in id order.
  std::map<RelObjPair, std::vector<size_t>> by_pair;
  for (size_t i = 0; i < sorted.size(); ++i) {
    auto pair = sorted[i].rel_obj_pair();
    if (set_a.count(pair)) by_pair[pair].push_back(i);
  }
  std::vector<bool> removed(sorted.size(), false);
  std::mt19937_64 rng(spec.seed);
  for (auto& [pair, indices] : by_pair) {
    size_t n_remove = static_cast<size_t>(
        std::ceil(spec.setA_removal_fraction * static_cast<double>(indices.size())));
    std::shuffle(indices.begin(), indices.end(), rng);
    for (size_t k = 0; k < n_remove; ++k) removed[indices[k]] = true;
  }

  BenchmarkSplits out;
  out.set_a = set_a;
  out.set_b = set_b;
  for (size_t i = 0; i < sorted.size(); ++i) {
    if (removed[i]) continue;
    if (set_b.count(sorted[i].rel_obj_pair())) continue;  // Set-B samples: all removed
    out.base_train.push_back(sorted[i]);
  }
  out.text_aug_train = out.base_train;
  std::vector<SampleRecord> extra;
  for (const auto& r : ungrounded) {
    auto pair = r.rel_obj_pair();
    if (set_a.count(pair) || set_b.count(pair)) extra.push_back(r);
  }
  std::sort(extra.begin(), extra.end(),
            [](const SampleRecord& a, const SampleRecord& b) { return a.id < b.id; });
  out.text_aug_train.insert(out.text_aug_train.end(), extra.begin(), extra.end());

  for (const auto& r : test_pool) {
    auto pair = r.rel_obj_pair();
    if (set_a.count(pair)) out.test_a.push_back(r);
    if (set_b.count(pair)) out.test_b.push_back(r);
  }
  out.full_test = test_pool;
  return out;
}

void RgbImage::fill(uint8_t r, uint8_t g, uint8_t b) {
  px.assign(static_cast<size_t>(w) * h * 3, 0);
  for (size_t i = 0; i < px.size(); i += 3) {
    px[i] = r;
    px[i + 1] = g;
    px[i + 2] = b;
  }
}

void RgbImage::fill_rect(int x1, int y1, int x2, int y2, uint8_t r, uint8_t g, uint8_t b) {
  for (int y = std::max(0, y1); y < std::min(h, y2); ++y)
    for (int x = std::max(0, x1); x < std::min(w, x2); ++x) {
      size_t i = (static_cast<size_t>(y) * w + x) * 3;
      px[i] = r;
      px[i + 1] = g;
      px[i + 2] = b;
    }
}

void write_ppm(const RgbImage& img, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write image: " + path);
  os << "P6\n" << img.w << " " << img.h << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.px.data()),
           static_cast<std::streamsize>(img.px.size()));
}

RgbImage read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read image: " + path);
  std::string magic;
  int w, h, maxval;
  is >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255) throw std::runtime_error("unsupported image format: " + path);
  is.get();  // single whitespace after header
  RgbImage img;
  img.w = w;
  img.h = h;
  img.px.resize(static_cast<size_t>(w) * h * 3);
  is.read(reinterpret_cast<char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
  if (!is) throw std::runtime_error("truncated image: " + path);
  return img;
}

ImageTensor to_image_tensor(const RgbImage& img, double native_w, double native_h) {
  if (img.w != img.h) throw ValidationError("to_image_tensor: image must be square");
  ImageTensor t;
  t.side = img.w;
  t.native_w = native_w;
  t.native_h = native_h;
  t.data.resize(img.px.size());
  for (size_t i = 0; i < img.px.size(); ++i) t.data[i] = img.px[i] / 255.0;
  return t;
}

namespace {

struct SceneClass {
  const char* name;
  uint8_t r, g, b;
};

// Each class has a unique color so pixels identify the class word.
const SceneClass kPalette[] = {
    {"red square", 220, 40, 40},     {"blue square", 40, 60, 220},
    {"green circle", 40, 180, 60},   {"yellow circle", 230, 210, 50},
    {"purple triangle", 150, 60, 200}, {"orange triangle", 240, 140, 30},
    {"cyan disk", 60, 210, 220},     {"pink block", 240, 120, 180},
};
constexpr int kPaletteSize = static_cast<int>(sizeof(kPalette) / sizeof(kPalette[0]));

struct PlacedObject {
  int cls;
  BoxPixels box;
};

std::vector<std::string> relation_predicates(const BoxPixels& a, const BoxPixels& b) {
  std::vector<std::string> rels;
  if (a.y2 <= b.y1) rels.push_back("above");
  if (a.y1 >= b.y2) rels.push_back("below");
  if (a.x2 <= b.x1) rels.push_back("left of");
  if (a.x1 >= b.x2) rels.push_back("right of");
  bool a_in_b = b.x1 < a.x1 && a.x2 < b.x2 && b.y1 < a.y1 && a.y2 < b.y2;
  bool b_in_a = a.x1 < b.x1 && b.x2 < a.x2 && a.y1 < b.y1 && b.y2 < a.y2;
  double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (a_in_b) rels.push_back("inside");
  if (ix > 0 && iy > 0 && !a_in_b && !b_in_a) rels.push_back("overlapping");
  return rels;
}

}  // namespace

Lexicon synthetic_lexicon() {
  Lexicon lex;
  lex.nouns = {};
  for (const auto& c : kPalette) lex.nouns.insert(c.name);
  lex.verbs = {"above", "below", "inside", "overlapping", "left", "right"};
  lex.prepositions = {"of"};
  lex.ignorable = {"a", "an", "the"};
  return lex;
}

SyntheticDataset generate_synthetic_dataset(const SceneSpec& spec) {
  if (spec.num_scenes < 1) throw ConfigError("generate_synthetic_dataset: num_scenes >= 1");
  if (spec.min_objects < 2 || spec.max_objects < spec.min_objects ||
      spec.max_objects > kPaletteSize)
    throw ConfigError("generate_synthetic_dataset: bad objects-per-scene range");
  const int S = spec.image_side;
  if (S < 16) throw std::runtime_error("generate_synthetic_dataset: canvas too small");

  std::mt19937_64 rng(spec.seed);
  SyntheticDataset ds;

  for (int scene = 0; scene < spec.num_scenes; ++scene) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%05d", scene);
    std::string image_id = buf;

    int n_objects =
        spec.min_objects + static_cast<int>(rng() % (spec.max_objects - spec.min_objects + 1));
    std::vector<int> classes(kPaletteSize);
    for (int i = 0; i < kPaletteSize; ++i) classes[i] = i;
    std::shuffle(classes.begin(), classes.end(), rng);  // unique class per instance

    std::vector<PlacedObject> objects;
    for (int i = 0; i < n_objects; ++i) {
      BoxPixels box;
      bool nested = !objects.empty() && rng() % 4 == 0;
      if (nested) {
        // Strictly inside an existing object when it is large enough.
        const BoxPixels& outer = objects[rng() % objects.size()].box;
        double ow = outer.x2 - outer.x1, oh = outer.y2 - outer.y1;
        if (ow > 8 && oh > 8) {
          double w = 2 + static_cast<double>(rng() % static_cast<uint64_t>(ow - 6));
          double h = 2 + static_cast<double>(rng() % static_cast<uint64_t>(oh - 6));
          double x = outer.x1 + 2 + static_cast<double>(rng() % static_cast<uint64_t>(ow - w - 3));
          double y = outer.y1 + 2 + static_cast<double>(rng() % static_cast<uint64_t>(oh - h - 3));
          box = {x, y, x + w, y + h};
        } else {
          nested = false;
        }
      }
      if (!nested) {
        int min_side = S / 8, max_side = S / 3;
        double w = min_side + static_cast<double>(rng() % static_cast<uint64_t>(max_side - min_side + 1));
        double h = min_side + static_cast<double>(rng() % static_cast<uint64_t>(max_side - min_side + 1));
        double x = static_cast<double>(rng() % static_cast<uint64_t>(S - static_cast<int>(w)));
        double y = static_cast<double>(rng() % static_cast<uint64_t>(S - static_cast<int>(h)));
        box = {x, y, x + w, y + h};
      }
      objects.push_back({classes[i], box});
    }

    RgbImage img;
    img.w = img.h = S;
    img.fill(30, 30, 30);
    for (const auto& o : objects) {
      const SceneClass& c = kPalette[o.cls];
      img.fill_rect(static_cast<int>(o.box.x1), static_cast<int>(o.box.y1),
                    static_cast<int>(o.box.x2), static_cast<int>(o.box.y2), c.r, c.g, c.b);
    }
    ds.images[image_id] = img;

    ImageRef ref{"synthetic", image_id, static_cast<double>(S), static_cast<double>(S)};
    int triplet_idx = 0;
    std::bernoulli_distribution keep_grounded(spec.grounded_fraction);
    for (size_t i = 0; i < objects.size(); ++i)
      for (size_t j = 0; j < objects.size(); ++j) {
        if (i == j) continue;
        for (const auto& rel : relation_predicates(objects[i].box, objects[j].box)) {
          SampleRecord rec;
          rec.id = image_id + ":t" + std::to_string(triplet_idx++);
          rec.image = ref;
          rec.subject = kPalette[objects[i].cls].name;
          rec.subject_box = objects[i].box;
          rec.relation = rel;
          rec.object = kPalette[objects[j].cls].name;
          rec.object_box = objects[j].box;
          rec.grounded = true;
          rec.source = "synthetic";
          ds.ground_truth[image_id].push_back(rec);
          if (keep_grounded(rng)) ds.grounded.push_back(rec);

          SampleRecord ung = rec;
          ung.id += ":u";
          ung.object_box.reset();
          ung.grounded = false;
          ung.source = "synthetic-caption";
          ds.ungrounded.push_back(ung);

          ds.captions.emplace_back(image_id,
                                   "a " + rec.subject + " " + rel + " a " + rec.object);
        }
      }
  }
  return ds;
}

std::vector<std::string> SyntheticDataset::class_terms() const {
  std::set<std::string> terms;
  for (const auto& [id, recs] : ground_truth)
    for (const auto& r : recs) {
      terms.insert(r.subject);
      terms.insert(r.relation);
      terms.insert(r.object);
    }
  return {terms.begin(), terms.end()};
}

std::vector<std::string> collect_terms(const std::vector<SampleRecord>& records,
                                       const std::vector<Triplet>& triplets) {
  std::set<std::string> terms;
  for (const auto& r : records) {
    terms.insert(r.subject);
    terms.insert(r.relation);
    terms.insert(r.object);
  }
  for (const auto& t : triplets) {
    terms.insert(t.subject);
    terms.insert(t.relation);
    terms.insert(t.object);
  }
  return {terms.begin(), terms.end()};
}

SequenceExample make_sequence_example(const SampleRecord& r, const Vocabulary& v) {
  SequenceExample ex;
  ex.input_ids = encode_input(r.subject, r.subject_box, r.image.width, r.image.height, v);
  TargetEncoding t = encode_target(r.relation, r.object, r.object_box, r.image.width,
                                   r.image.height, v);
  ex.target_ids = std::move(t.ids);
  ex.loss_mask = std::move(t.loss_mask);
  return ex;
}

TrainingSample make_training_sample(const SampleRecord& r, const RgbImage& img,
                                    const Vocabulary& v) {
  TrainingSample s;
  s.image = to_image_tensor(img, r.image.width, r.image.height);
  SequenceExample ex = make_sequence_example(r, v);
  s.input_ids = std::move(ex.input_ids);
  s.target_ids = std::move(ex.target_ids);
  s.loss_mask = std::move(ex.loss_mask);
  return s;
}

}  // namespace scord
