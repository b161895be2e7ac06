#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>

#include "scord/corpus.hpp"

using namespace scord;

namespace {

Lexicon english_lexicon() {
  Lexicon lex;
  lex.verbs = {"riding", "sits", "wearing"};
  lex.prepositions = {"on", "of"};
  lex.ignorable = {"a", "an", "the", "big", "small"};
  lex.nouns = {"man", "horse", "dog", "chair", "hat"};
  return lex;
}

SampleRecord grounded_record(const std::string& id, const std::string& rel,
                             const std::string& obj) {
  SampleRecord r;
  r.id = id;
  r.image = {"synthetic", "img_" + id, 64, 64};
  r.subject = "red square";
  r.subject_box = {1, 1, 10, 10};
  r.relation = rel;
  r.object = obj;
  r.object_box = BoxPixels{20, 20, 40, 40};
  r.grounded = true;
  r.source = "test";
  return r;
}

}  // namespace

TEST_CASE("caption extraction finds verb and verb+preposition patterns") {
  auto lex = english_lexicon();
  auto t1 = extract_triplets("a man riding a horse", lex);
  REQUIRE(t1.size() == 1);
  CHECK(t1[0] == Triplet{"man", "riding", "horse"});

  auto t2 = extract_triplets("The dog sits on the chair.", lex);
  REQUIRE(t2.size() == 1);
  CHECK(t2[0] == Triplet{"dog", "sits on", "chair"});

  CHECK(extract_triplets("a man and a horse", lex).empty());
  CHECK(extract_triplets("", lex).empty());
}

TEST_CASE("caption extraction skips ignorable words and is non-overlapping") {
  auto lex = english_lexicon();
  auto t = extract_triplets("the big man wearing a small hat riding the horse", lex);
  // left-to-right, non-overlapping: "man wearing hat" consumes through "hat"
  REQUIRE(t.size() == 1);
  CHECK(t[0] == Triplet{"man", "wearing", "hat"});
}

TEST_CASE("multi-word lexicon nouns match as units") {
  Lexicon lex;
  lex.verbs = {"above"};
  lex.ignorable = {"a"};
  lex.nouns = {"red square", "blue circle"};
  auto t = extract_triplets("a red square above a blue circle", lex);
  REQUIRE(t.size() == 1);
  CHECK(t[0] == Triplet{"red square", "above", "blue circle"});
}

TEST_CASE("pair statistics honour the frequency window") {
  std::vector<SampleRecord> recs;
  for (int i = 0; i < 5; ++i) recs.push_back(grounded_record("a" + std::to_string(i), "riding", "horse"));
  for (int i = 0; i < 2; ++i) recs.push_back(grounded_record("b" + std::to_string(i), "wearing", "hat"));
  recs.push_back(grounded_record("c", "sits on", "chair"));

  std::vector<Triplet> caps{{"man", "riding", "horse"}};  // counts toward riding/horse

  auto stats = build_pair_statistics(recs, caps, 2, 5);
  CHECK(stats.count({"wearing", "hat"}) == 1);
  CHECK(stats.at({"wearing", "hat"}) == 2);
  CHECK(stats.count({"riding", "horse"}) == 0);  // 6 > max
  CHECK(stats.count({"sits on", "chair"}) == 0);  // 1 < min
  CHECK_THROWS_AS(build_pair_statistics(recs, caps, 5, 2), ConfigError);
}

TEST_CASE("pair partition is even, exhaustive and seed-deterministic") {
  std::set<RelObjPair> pairs;
  for (int i = 0; i < 7; ++i) pairs.insert({"rel" + std::to_string(i), "obj"});
  auto [a1, b1] = partition_rel_obj_sets(pairs, 13);
  auto [a2, b2] = partition_rel_obj_sets(pairs, 13);
  auto [a3, b3] = partition_rel_obj_sets(pairs, 14);
  CHECK(a1.size() == 4);  // odd count -> extra goes to A
  CHECK(b1.size() == 3);
  CHECK(a1 == a2);
  CHECK(b1 == b2);
  CHECK((a1 != a3 || b1 != b3));
  std::set<RelObjPair> merged = a1;
  merged.insert(b1.begin(), b1.end());
  CHECK(merged == pairs);
}

TEST_CASE("split construction removes the right counts") {
  std::vector<SampleRecord> grounded;
  for (int i = 0; i < 5; ++i) grounded.push_back(grounded_record("a" + std::to_string(i), "riding", "horse"));
  for (int i = 0; i < 4; ++i) grounded.push_back(grounded_record("b" + std::to_string(i), "wearing", "hat"));
  for (int i = 0; i < 3; ++i) grounded.push_back(grounded_record("c" + std::to_string(i), "sits on", "chair"));

  std::vector<SampleRecord> ungrounded;
  for (const auto& g : grounded) {
    SampleRecord u = g;
    u.id += ":u";
    u.object_box.reset();
    u.grounded = false;
    ungrounded.push_back(u);
  }
  SampleRecord extra = ungrounded[0];
  extra.id = "x:u";
  extra.relation = "unseen";
  ungrounded.push_back(extra);  // pair outside A and B -> must be filtered out

  std::set<RelObjPair> set_a{{"riding", "horse"}, {"sits on", "chair"}};
  std::set<RelObjPair> set_b{{"wearing", "hat"}};

  SplitSpec spec;
  spec.setA_removal_fraction = 0.5;
  spec.seed = 3;
  auto splits = build_splits(grounded, ungrounded, spec, set_a, set_b, grounded);

  auto count_pair = [](const std::vector<SampleRecord>& v, const RelObjPair& p) {
    long n = 0;
    for (const auto& r : v)
      if (r.rel_obj_pair() == p) ++n;
    return n;
  };
  // ceil(0.5*5)=3 removed -> 2 remain; ceil(0.5*3)=2 removed -> 1 remains
  CHECK(count_pair(splits.base_train, {"riding", "horse"}) == 2);
  CHECK(count_pair(splits.base_train, {"sits on", "chair"}) == 1);
  CHECK(count_pair(splits.base_train, {"wearing", "hat"}) == 0);
  for (const auto& r : splits.base_train) CHECK(r.grounded);

  // text augmentation adds only ungrounded records whose pair is in A or B
  CHECK(splits.text_aug_train.size() == splits.base_train.size() + 12);
  bool unseen_present = false;
  for (const auto& r : splits.text_aug_train)
    if (r.relation == "unseen") unseen_present = true;
  CHECK_FALSE(unseen_present);

  CHECK(splits.test_a.size() == 8);   // riding/horse + sits on/chair
  CHECK(splits.test_b.size() == 4);   // wearing/hat
  CHECK(splits.full_test.size() == 12);

  // determinism
  auto again = build_splits(grounded, ungrounded, spec, set_a, set_b, grounded);
  REQUIRE(again.base_train.size() == splits.base_train.size());
  for (size_t i = 0; i < again.base_train.size(); ++i)
    CHECK(again.base_train[i].id == splits.base_train[i].id);
}

TEST_CASE("record files round-trip including optional boxes") {
  std::vector<SampleRecord> recs;
  recs.push_back(grounded_record("g1", "riding", "horse"));
  SampleRecord u = grounded_record("u1", "wearing", "hat");
  u.object_box.reset();
  u.grounded = false;
  recs.push_back(u);

  std::string path = "/tmp/scord_test_records.jsonl";
  write_records(recs, path);
  auto loaded = read_records(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].id == "g1");
  CHECK(loaded[0].grounded);
  REQUIRE(loaded[0].object_box.has_value());
  CHECK(loaded[0].object_box->x2 == doctest::Approx(40.0));
  CHECK(loaded[0].image.width == doctest::Approx(64.0));
  CHECK_FALSE(loaded[1].grounded);
  CHECK_FALSE(loaded[1].object_box.has_value());

  // grounded flag and box presence must agree
  SampleRecord bad = grounded_record("bad", "riding", "horse");
  bad.grounded = false;
  CHECK_THROWS_AS(record_from_json_line(record_to_json_line(bad)), ValidationError);
}

TEST_CASE("lexicon files round-trip") {
  auto lex = english_lexicon();
  lex.nouns.insert("red square");
  std::string path = "/tmp/scord_test_lexicon.txt";
  lex.save(path);
  auto loaded = Lexicon::load(path);
  CHECK(loaded.verbs == lex.verbs);
  CHECK(loaded.prepositions == lex.prepositions);
  CHECK(loaded.ignorable == lex.ignorable);
  CHECK(loaded.nouns == lex.nouns);
  CHECK(loaded.noun_words().count("red") == 1);
  CHECK(loaded.noun_words().count("square") == 1);
}

TEST_CASE("ppm images round-trip byte for byte") {
  RgbImage img;
  img.w = 7;
  img.h = 7;
  img.px.assign(7 * 7 * 3, 0);
  img.fill(10, 20, 30);
  img.fill_rect(1, 1, 4, 3, 200, 100, 50);
  std::string path = "/tmp/scord_test_image.ppm";
  write_ppm(img, path);
  auto loaded = read_ppm(path);
  CHECK(loaded.w == img.w);
  CHECK(loaded.h == img.h);
  CHECK(loaded.px == img.px);

  auto t = to_image_tensor(loaded, 7, 7);
  CHECK(t.side == 7);
  CHECK(t.data.size() == size_t(7) * 7 * 3);
}

TEST_CASE("synthetic generation is deterministic in the seed") {
  SceneSpec spec{.num_scenes = 4, .image_side = 32, .grounded_fraction = 0.6, .seed = 11};
  auto a = generate_synthetic_dataset(spec);
  auto b = generate_synthetic_dataset(spec);
  spec.seed = 12;
  auto c = generate_synthetic_dataset(spec);

  REQUIRE(a.images.size() == 4);
  CHECK(a.grounded.size() == b.grounded.size());
  for (size_t i = 0; i < a.grounded.size(); ++i)
    CHECK(record_to_json_line(a.grounded[i]) == record_to_json_line(b.grounded[i]));
  for (const auto& [id, img] : a.images) CHECK(img.px == b.images.at(id).px);
  CHECK(a.captions == b.captions);

  bool differs = a.grounded.size() != c.grounded.size();
  if (!differs)
    for (size_t i = 0; i < a.grounded.size(); ++i)
      if (record_to_json_line(a.grounded[i]) != record_to_json_line(c.grounded[i])) differs = true;
  CHECK(differs);
}

TEST_CASE("synthetic relations agree with the geometry") {
  auto ds = generate_synthetic_dataset({.num_scenes = 6, .image_side = 48, .seed = 2});
  long checked = 0;
  for (const auto& [img_id, recs] : ds.ground_truth) {
    for (const auto& r : recs) {
      REQUIRE(r.object_box.has_value());
      const auto& s = r.subject_box;
      const auto& o = *r.object_box;
      if (r.relation == "above") CHECK(s.y2 <= o.y1);
      else if (r.relation == "below") CHECK(s.y1 >= o.y2);
      else if (r.relation == "left of") CHECK(s.x2 <= o.x1);
      else if (r.relation == "right of") CHECK(s.x1 >= o.x2);
      else if (r.relation == "inside") {
        CHECK(s.x1 > o.x1);
        CHECK(s.x2 < o.x2);
        CHECK(s.y1 > o.y1);
        CHECK(s.y2 < o.y2);
      } else if (r.relation == "overlapping") {
        CHECK(std::min(s.x2, o.x2) > std::max(s.x1, o.x1));
        CHECK(std::min(s.y2, o.y2) > std::max(s.y1, o.y1));
      } else {
        FAIL("unexpected relation: ", r.relation);
      }
      ++checked;
    }
  }
  CHECK(checked > 0);
}

TEST_CASE("synthetic captions re-extract to the emitted triplets") {
  auto ds = generate_synthetic_dataset({.num_scenes = 4, .image_side = 48, .seed = 9});
  auto lex = synthetic_lexicon();
  long caption_triplets = 0;
  for (const auto& [img_id, text] : ds.captions) {
    auto ts = extract_triplets(text, lex);
    REQUIRE(ts.size() == 1);
    // the extracted triplet matches some ground-truth record for that image
    bool found = false;
    for (const auto& r : ds.ground_truth.at(img_id))
      if (r.subject == ts[0].subject && r.relation == ts[0].relation &&
          r.object == ts[0].object)
        found = true;
    CHECK(found);
    ++caption_triplets;
  }
  CHECK(caption_triplets > 0);
  // one ungrounded record per caption triplet
  CHECK(ds.ungrounded.size() == static_cast<size_t>(caption_triplets));
  for (const auto& r : ds.ungrounded) {
    CHECK_FALSE(r.grounded);
    CHECK_FALSE(r.object_box.has_value());
  }
}

TEST_CASE("grounded fraction bounds the grounded record count") {
  auto full = generate_synthetic_dataset({.num_scenes = 6, .image_side = 48, .grounded_fraction = 1.0, .seed = 3});
  auto half = generate_synthetic_dataset({.num_scenes = 6, .image_side = 48, .grounded_fraction = 0.5, .seed = 3});
  auto none = generate_synthetic_dataset({.num_scenes = 6, .image_side = 48, .grounded_fraction = 0.0, .seed = 3});
  long total = 0;
  for (const auto& [id, recs] : full.ground_truth) total += static_cast<long>(recs.size());
  CHECK(static_cast<long>(full.grounded.size()) == total);
  CHECK(none.grounded.empty());
  CHECK(half.grounded.size() < full.grounded.size());
  CHECK(!half.grounded.empty());
}

TEST_CASE("sequence examples built from records have consistent masks") {
  auto ds = generate_synthetic_dataset({.num_scenes = 2, .image_side = 32, .seed = 6});
  auto terms = collect_terms(ds.grounded, {});
  auto v = Vocabulary::build(terms, 32);

  const auto& g = ds.grounded.front();
  auto ex = make_sequence_example(g, v);
  CHECK(ex.input_ids.front() == kSub);
  CHECK(ex.input_ids.back() == kBoxClose);
  CHECK(ex.target_ids.back() == kSep);
  CHECK(ex.loss_mask.size() == ex.target_ids.size());

  const auto& u = ds.ungrounded.front();
  auto exu = make_sequence_example(u, v);
  CHECK(exu.target_ids.back() == kAt);

  auto ts = make_training_sample(g, ds.images.at(g.image.ref), v);
  CHECK(ts.image.side == 32);
  CHECK(ts.input_ids == ex.input_ids);
}
