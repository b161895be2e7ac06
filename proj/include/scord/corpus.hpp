#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "scord/model.hpp"
#include "scord/vocab.hpp"

namespace scord {

struct ImageRef {
  std::string kind = "synthetic";  // "file" | "synthetic"
  std::string ref;                 // path or image id
  double width = 0, height = 0;
};

// One grounded or ungrounded training/test instance.
struct SampleRecord {
  std::string id;
  ImageRef image;
  std::string subject;
  BoxPixels subject_box;
  std::string relation;
  std::string object;
  std::optional<BoxPixels> object_box;
  bool grounded = false;  // invariant: grounded <=> object_box present
  std::string source;

  std::pair<std::string, std::string> rel_obj_pair() const { return {relation, object}; }
};

std::vector<SampleRecord> read_records(const std::string& path);
void write_records(const std::vector<SampleRecord>& records, const std::string& path);
std::string record_to_json_line(const SampleRecord& r);
SampleRecord record_from_json_line(const std::string& line);

using RelObjPair = std::pair<std::string, std::string>;

// image id -> grounded records for that image
using GroundTruthIndex = std::map<std::string, std::vector<SampleRecord>>;

struct Lexicon {
  std::set<std::string> verbs;
  std::set<std::string> prepositions;
  std::set<std::string> ignorable;  // determiners, adjectives, ...
  std::set<std::string> nouns;      // entries may be multi-word phrases

  static Lexicon load(const std::string& path);
  void save(const std::string& path) const;
  // All single words appearing in noun entries (object-lexicon for decoding).
  std::set<std::string> noun_words() const;
};

struct Triplet {
  std::string subject, relation, object;
  bool operator==(const Triplet&) const = default;
};

// Rule-based caption parsing: scan for NP1 V [P] NP2, where an NP is optional
// ignorable words followed by one (possibly multi-word) lexicon noun, V is a
// lexicon verb and P an optional preposition. Emits non-overlapping matches
// left to right; captions are lowercased and stripped of punctuation first.
std::vector<Triplet> extract_triplets(const std::string& caption, const Lexicon& lex);

// Exact (relation, object) counts over grounded records plus caption
// triplets, restricted to the [min_count, max_count] frequency window.
std::map<RelObjPair, long> build_pair_statistics(const std::vector<SampleRecord>& records,
                                                 const std::vector<Triplet>& caption_triplets,
                                                 long min_count, long max_count);

// Seeded shuffle then even split; odd cardinality gives Set A the extra pair.
std::pair<std::set<RelObjPair>, std::set<RelObjPair>> partition_rel_obj_sets(
    const std::set<RelObjPair>& pairs, uint64_t seed);

struct SplitSpec {
  long min_count = 1;
  long max_count = 1000000;
  double setA_removal_fraction = 0.5;
  uint64_t seed = 0;
};

struct BenchmarkSplits {
  std::set<RelObjPair> set_a, set_b;
  std::vector<SampleRecord> base_train;
  std::vector<SampleRecord> text_aug_train;
  std::vector<SampleRecord> test_a, test_b, full_test;
};

// Base split: grounded minus ceil(fraction*n) seeded-random samples per Set-A
// pair and minus every Set-B sample. Text-augmented split: base plus all
// ungrounded records whose pair is in A or B.
BenchmarkSplits build_splits(const std::vector<SampleRecord>& grounded,
                             const std::vector<SampleRecord>& ungrounded, const SplitSpec& spec,
                             const std::set<RelObjPair>& set_a,
                             const std::set<RelObjPair>& set_b,
                             const std::vector<SampleRecord>& test_pool);

struct RgbImage {
  int w = 0, h = 0;
  std::vector<uint8_t> px;  // w*h*3

  void fill(uint8_t r, uint8_t g, uint8_t b);
  void fill_rect(int x1, int y1, int x2, int y2, uint8_t r, uint8_t g, uint8_t b);
};

void write_ppm(const RgbImage& img, const std::string& path);
RgbImage read_ppm(const std::string& path);
ImageTensor to_image_tensor(const RgbImage& img, double native_w, double native_h);

struct SceneSpec {
  int num_scenes = 1;
  int min_objects = 2, max_objects = 5;
  int image_side = 64;
  // Fraction of triplets emitted as grounded training records; all triplets
  // always appear in the ground-truth index and as captions.
  double grounded_fraction = 1.0;
  uint64_t seed = 0;
};

struct SyntheticDataset {
  std::map<std::string, RgbImage> images;  // image id -> pixels
  GroundTruthIndex ground_truth;           // every geometric triplet, grounded
  std::vector<SampleRecord> grounded;      // training subset (grounded_fraction)
  std::vector<SampleRecord> ungrounded;    // caption-derived form of every triplet
  std::vector<std::pair<std::string, std::string>> captions;  // (image id, text)

  std::vector<std::string> class_terms() const;  // all subject/object/relation words
};

// Deterministic scenes of axis-aligned colored rectangles; relations are the
// geometric predicates above/below/left of/right of/inside/overlapping, so
// every emitted triplet is verifiable from coordinates alone.
SyntheticDataset generate_synthetic_dataset(const SceneSpec& spec);

// Lexicon covering the synthetic generator's classes and relations.
Lexicon synthetic_lexicon();

// Collects subject/relation/object surface terms for vocabulary building.
std::vector<std::string> collect_terms(const std::vector<SampleRecord>& records,
                                       const std::vector<Triplet>& triplets);

SequenceExample make_sequence_example(const SampleRecord& r, const Vocabulary& v);
TrainingSample make_training_sample(const SampleRecord& r, const RgbImage& img,
                                    const Vocabulary& v);

}  // namespace scord
