#include "scord/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace scord {

namespace {

const char* kSentinelNames[kNumSentinels] = {
    "[SUB]", "[BOX_OPEN]", "[BOX_CLOSE]", "[@]", "[SEP]", "[PAD]", "[UNK]"};

}  // namespace

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& terms, int num_position_tokens) {
  if (num_position_tokens < 2) throw ConfigError("vocabulary needs P >= 2 position tokens");
  if (terms.empty()) throw ConfigError("vocabulary needs a non-empty term set");

  std::vector<std::string> words;
  for (const auto& t : terms)
    for (auto& w : split_words(t)) words.push_back(std::move(w));
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  if (words.empty()) throw ConfigError("vocabulary needs a non-empty term set");

  Vocabulary v;
  v.words_ = std::move(words);
  v.num_positions_ = num_position_tokens;
  for (int i = 0; i < static_cast<int>(v.words_.size()); ++i)
    v.word_to_id_[v.words_[i]] = kNumSentinels + i;
  return v;
}

TokenId Vocabulary::word_id(const std::string& word) const {
  auto it = word_to_id_.find(word);
  return it == word_to_id_.end() ? kUnk : it->second;
}

TokenId Vocabulary::position_id(int bin) const {
  if (bin < 0 || bin >= num_positions_) throw ValidationError("position bin out of range");
  return kNumSentinels + num_words() + bin;
}

int Vocabulary::position_bin(TokenId id) const {
  if (!is_position(id)) throw ValidationError("token id is not a position token");
  return id - kNumSentinels - num_words();
}

const std::string& Vocabulary::word(TokenId id) const {
  if (!is_word(id)) throw ValidationError("token id is not a word");
  return words_[id - kNumSentinels];
}

std::string Vocabulary::token_string(TokenId id) const {
  if (is_sentinel(id)) return kSentinelNames[id];
  if (is_word(id)) return word(id);
  if (is_position(id)) return "pos_" + std::to_string(position_bin(id));
  throw ValidationError("token id out of range");
}

std::string Vocabulary::serialize() const {
  std::ostringstream os;
  os << "P=" << num_positions_ << "\n";
  for (int id = 0; id < size(); ++id) os << token_string(id) << "\n";
  return os.str();
}

Vocabulary Vocabulary::parse(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line.rfind("P=", 0) != 0)
    throw ValidationError("vocabulary file: missing P= header");
  int P = std::stoi(line.substr(2));

  Vocabulary v;
  v.num_positions_ = P;
  int id = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (id < kNumSentinels) {
      if (line != kSentinelNames[id])
        throw ValidationError("vocabulary file: unexpected sentinel " + line);
    } else if (line.rfind("pos_", 0) == 0) {
      // position tokens are regenerated from P; just sanity-check order
      if (line != "pos_" + std::to_string(id - kNumSentinels - static_cast<int>(v.words_.size())))
        throw ValidationError("vocabulary file: position token out of order");
    } else {
      v.word_to_id_[line] = id;
      v.words_.push_back(line);
    }
    ++id;
  }
  if (id != v.size()) throw ValidationError("vocabulary file: token count mismatch");
  return v;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write vocabulary: " + path);
  os << serialize();
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read vocabulary: " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return parse(os.str());
}

BoxBins quantize_box(const BoxPixels& b, double w, double h, int P) {
  if (P < 2) throw ConfigError("quantize_box: P must be >= 2");
  if (w <= 0 || h <= 0) throw ValidationError("quantize_box: non-positive image extent");
  if (!(b.x1 < b.x2) || !(b.y1 < b.y2)) throw ValidationError("quantize_box: degenerate box");
  if (b.x1 < 0 || b.y1 < 0 || b.x2 > w || b.y2 > h)
    throw ValidationError("quantize_box: box outside image");
  auto bin = [&](double coord, double extent) {
    int v = static_cast<int>(std::floor(static_cast<double>(P) * coord / extent));
    return std::clamp(v, 0, P - 1);
  };
  return BoxBins{bin(b.x1, w), bin(b.y1, h), bin(b.x2, w), bin(b.y2, h)};
}

BoxPixels dequantize_bins(const BoxBins& b, double w, double h, int P) {
  if (P < 2) throw ConfigError("dequantize_bins: P must be >= 2");
  auto check = [&](int v) {
    if (v < 0 || v >= P) throw ValidationError("dequantize_bins: bin out of range");
  };
  check(b.x1), check(b.y1), check(b.x2), check(b.y2);

  auto center = [&](int bin, double extent) { return (bin + 0.5) * extent / P; };
  BoxPixels out{center(b.x1, w), center(b.y1, h), center(b.x2, w), center(b.y2, h)};
  // Repair degenerate axes: widen symmetrically by half a bin.
  if (b.x1 == b.x2) {
    double half = 0.5 * w / P;
    out.x1 -= half;
    out.x2 += half;
  }
  if (b.y1 == b.y2) {
    double half = 0.5 * h / P;
    out.y1 -= half;
    out.y2 += half;
  }
  out.x1 = std::max(0.0, out.x1);
  out.y1 = std::max(0.0, out.y1);
  out.x2 = std::min(w, out.x2);
  out.y2 = std::min(h, out.y2);
  return out;
}

std::vector<TokenId> encode_input(const std::string& subject, const BoxPixels& subject_box,
                                  double w, double h, const Vocabulary& v) {
  auto words = split_words(subject);
  if (words.empty()) throw ValidationError("encode_input: empty subject");
  BoxBins bins = quantize_box(subject_box, w, h, v.num_positions());

  std::vector<TokenId> ids;
  ids.push_back(kSub);
  for (const auto& word : words) ids.push_back(v.word_id(word));
  ids.push_back(kBoxOpen);
  ids.push_back(v.position_id(bins.x1));
  ids.push_back(v.position_id(bins.y1));
  ids.push_back(v.position_id(bins.x2));
  ids.push_back(v.position_id(bins.y2));
  ids.push_back(kBoxClose);
  return ids;
}

TargetEncoding encode_target(const std::string& relation, const std::string& object,
                             const std::optional<BoxPixels>& object_box, double w, double h,
                             const Vocabulary& v) {
  auto rel_words = split_words(relation);
  auto obj_words = split_words(object);
  if (rel_words.empty() || obj_words.empty())
    throw ValidationError("encode_target: empty relation or object");

  TargetEncoding enc;
  for (const auto& word : rel_words) enc.ids.push_back(v.word_id(word));
  for (const auto& word : obj_words) enc.ids.push_back(v.word_id(word));
  enc.ids.push_back(kAt);
  if (object_box) {
    BoxBins bins = quantize_box(*object_box, w, h, v.num_positions());
    enc.ids.push_back(v.position_id(bins.x1));
    enc.ids.push_back(v.position_id(bins.y1));
    enc.ids.push_back(v.position_id(bins.x2));
    enc.ids.push_back(v.position_id(bins.y2));
    enc.ids.push_back(kSep);
  }
  enc.loss_mask.assign(enc.ids.size(), 1);
  return enc;
}

DecodedPrediction decode_prediction(std::span<const TokenId> ids, double w, double h,
                                    const Vocabulary& v,
                                    const std::set<std::string>& object_lexicon) {
  DecodedPrediction out;
  out.well_formed = true;

  size_t at_pos = ids.size();
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == kAt) {
      at_pos = i;
      break;
    }
  }

  std::vector<std::string> words;
  for (size_t i = 0; i < at_pos; ++i) {
    if (v.is_word(ids[i]))
      words.push_back(v.word(ids[i]));
    else if (ids[i] == kUnk)
      words.push_back("[UNK]"), out.well_formed = false;
    else
      out.well_formed = false;  // sentinel or position token in the text part
  }

  if (at_pos == ids.size()) {
    // No [@]: best effort is all text as object-less joined string.
    out.well_formed = false;
    std::string joined;
    for (const auto& word : words) joined += (joined.empty() ? "" : " ") + word;
    out.object = joined;
    return out;
  }

  // Object = maximal trailing span of object-lexicon words.
  size_t split = words.size();
  while (split > 0 && object_lexicon.count(words[split - 1])) --split;
  std::string relation, object;
  for (size_t i = 0; i < split; ++i) relation += (relation.empty() ? "" : " ") + words[i];
  for (size_t i = split; i < words.size(); ++i) object += (object.empty() ? "" : " ") + words[i];
  out.relation = relation;
  out.object = object;
  if (relation.empty() || object.empty()) out.well_formed = false;

  // After [@]: exactly 4 position tokens then [SEP].
  std::span<const TokenId> tail = ids.subspan(at_pos + 1);
  bool box_ok = tail.size() == 5 && kSep == tail[4];
  for (size_t i = 0; box_ok && i < 4; ++i) box_ok = v.is_position(tail[i]);
  if (box_ok && out.well_formed) {
    BoxBins bins{v.position_bin(tail[0]), v.position_bin(tail[1]), v.position_bin(tail[2]),
                 v.position_bin(tail[3])};
    if (bins.x1 <= bins.x2 && bins.y1 <= bins.y2) {
      out.box = dequantize_bins(bins, w, h, v.num_positions());
    } else {
      out.well_formed = false;
    }
  } else {
    out.well_formed = false;
  }
  return out;
}

}  // namespace scord
