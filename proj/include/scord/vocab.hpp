#pragma once

#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace scord {

using TokenId = int;

// Axis-aligned box in pixel space of a w x h image.
struct BoxPixels {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  bool valid(double w, double h) const {
    return 0 <= x1 && x1 < x2 && x2 <= w && 0 <= y1 && y1 < y2 && y2 <= h;
  }
};

// Quantized box, each coordinate an integer bin in [0, P-1].
struct BoxBins {
  int x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

// Fixed sentinel ids. Sentinels occupy [0, kNumSentinels); word ids follow,
// then position tokens.
enum Sentinel : TokenId {
  kSub = 0,
  kBoxOpen = 1,
  kBoxClose = 2,
  kAt = 3,
  kSep = 4,
  kPad = 5,
  kUnk = 6,
};
inline constexpr int kNumSentinels = 7;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Closed word-level vocabulary: 7 sentinels, then lexicographically sorted
// text terms, then P position tokens. Id assignment is deterministic in the
// term set alone, so shuffled inputs serialize identically.
class Vocabulary {
 public:
  Vocabulary() = default;

  static Vocabulary build(const std::vector<std::string>& terms, int num_position_tokens);

  int size() const { return kNumSentinels + static_cast<int>(words_.size()) + num_positions_; }
  int num_words() const { return static_cast<int>(words_.size()); }
  int num_positions() const { return num_positions_; }

  // Surface word -> id, kUnk when out of vocabulary.
  TokenId word_id(const std::string& word) const;
  bool has_word(const std::string& word) const { return word_to_id_.count(word) > 0; }
  TokenId position_id(int bin) const;

  bool is_sentinel(TokenId id) const { return id >= 0 && id < kNumSentinels; }
  bool is_word(TokenId id) const {
    return id >= kNumSentinels && id < kNumSentinels + num_words();
  }
  bool is_position(TokenId id) const {
    return id >= kNumSentinels + num_words() && id < size();
  }
  int position_bin(TokenId id) const;
  const std::string& word(TokenId id) const;

  // Printable form for any id ("[SUB]", "man", "pos_25", ...).
  std::string token_string(TokenId id) const;

  std::string serialize() const;
  static Vocabulary parse(const std::string& text);
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> word_to_id_;
  int num_positions_ = 0;
};

// Discretize pixel coordinates into P bins: floor(P * coord / extent),
// clamped into [0, P-1] so coord == extent stays in range.
BoxBins quantize_box(const BoxPixels& b, double w, double h, int P);

// Bin-center inverse of quantize_box. Degenerate axes (equal bins) are
// widened symmetrically by half a bin so the result is always a valid box.
BoxPixels dequantize_bins(const BoxBins& b, double w, double h, int P);

// [SUB] subject-words [BOX_OPEN] 4 position tokens [BOX_CLOSE]
std::vector<TokenId> encode_input(const std::string& subject, const BoxPixels& subject_box,
                                  double w, double h, const Vocabulary& v);

struct TargetEncoding {
  std::vector<TokenId> ids;
  std::vector<uint8_t> loss_mask;  // one flag per target position
};

// Grounded: rel-words obj-words [@] 4 position tokens [SEP], mask all true.
// Ungrounded (no box): rel-words obj-words [@], mask all true; the sequence
// ends at [@] so box positions never exist to be supervised.
TargetEncoding encode_target(const std::string& relation, const std::string& object,
                             const std::optional<BoxPixels>& object_box, double w, double h,
                             const Vocabulary& v);

struct SequenceExample {
  std::vector<TokenId> input_ids;
  std::vector<TokenId> target_ids;
  std::vector<uint8_t> loss_mask;
};

struct DecodedPrediction {
  std::string relation;
  std::string object;
  std::optional<BoxPixels> box;
  bool well_formed = false;
};

// Inverse of encode_target for arbitrary (possibly malformed) sequences.
// Splits at the first [@]; the object is the maximal trailing span of words
// found in object_lexicon, the relation is the remainder. Malformed shapes
// (missing [@], wrong position-token count, stray text after [@]) are
// reported through well_formed, never thrown.
DecodedPrediction decode_prediction(std::span<const TokenId> ids, double w, double h,
                                    const Vocabulary& v,
                                    const std::set<std::string>& object_lexicon);

// Whitespace word split after lowercasing; shared by encode and corpus code.
std::vector<std::string> split_words(const std::string& text);

}  // namespace scord
