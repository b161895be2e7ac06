#pragma once

#include <Eigen/Dense>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "scord/model.hpp"
#include "scord/vocab.hpp"

namespace scord {

// Log-probabilities over the vocabulary for the next token after `prefix`.
using StepScorer = std::function<Eigen::VectorXd(const std::vector<TokenId>& prefix)>;

struct ScoredSequence {
  std::vector<TokenId> ids;   // includes the supplied prefix
  double score = 0;           // summed log-prob of generated tokens
  bool complete = false;      // ends with the requested end token
};

struct BeamResult {
  std::vector<ScoredSequence> sequences;  // score desc, ties by lexicographic ids
  bool shortfall = false;                 // fewer than K finalized within max_len
};

// Standard beam search with beam width K. Finalized hypotheses are ranked by
// raw summed log-probability (no length normalization), ties broken by the
// lexicographically smaller token-id sequence. If fewer than K finalize
// within max_len total tokens, the best incomplete hypotheses fill the tail,
// flagged via `complete`.
BeamResult beam_search(const StepScorer& scorer, const std::vector<TokenId>& prefix, int K,
                       TokenId end_token, int max_len, int vocab_size);

struct Prediction {
  std::string relation;
  std::string object;
  std::optional<BoxPixels> box;
  double score = 0;
  bool well_formed = false;
};

struct DecodeOptions {
  int max_rel_obj_tokens = 8;  // step-1 total length budget
  int max_box_tokens = 6;      // step-2 budget beyond the prefix (4 bins + [SEP] + slack)
};

// Step scorer backed by the model decoder over a fixed context, with the
// segment support mask applied (position tokens only after [@], etc.).
StepScorer model_step_scorer(const Model& m, Eigen::MatrixXd z, const DecodeSupport& support);

// Two-step decoding: beam to [@] for K diverse relation-object prefixes, then
// a width-1 search per prefix to [SEP] for the box. A prediction's score is
// its step-1 prefix score.
std::vector<Prediction> two_step_decode(const ImageTensor& img, const std::string& subject,
                                        const BoxPixels& subject_box, int K, const Model& m,
                                        const Vocabulary& v,
                                        const std::set<std::string>& object_lexicon,
                                        const DecodeOptions& opts = {});

// Rejected-baseline decoding: one beam of width K straight to [SEP].
std::vector<Prediction> single_pass_decode(const ImageTensor& img, const std::string& subject,
                                           const BoxPixels& subject_box, int K, const Model& m,
                                           const Vocabulary& v,
                                           const std::set<std::string>& object_lexicon,
                                           const DecodeOptions& opts = {});

// Line-delimited serialization of ranked predictions per sample.
struct PredictionRecord {
  std::string sample_id;
  int rank = 0;
  Prediction prediction;
};

void write_predictions(const std::vector<PredictionRecord>& records, const std::string& path);
std::map<std::string, std::vector<Prediction>> read_predictions(const std::string& path);

}  // namespace scord
