#include "scord/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace scord {

namespace {

struct Hypothesis {
  std::vector<TokenId> ids;
  double score = 0;
};

bool better(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.ids < b.ids;
}

Eigen::VectorXd log_softmax(Eigen::VectorXd v) {
  double m = v.maxCoeff();
  double lse = m + std::log((v.array() - m).exp().sum());
  return v.array() - lse;
}

}  // namespace

BeamResult beam_search(const StepScorer& scorer, const std::vector<TokenId>& prefix, int K,
                       TokenId end_token, int max_len, int vocab_size) {
  if (K < 1) throw ValidationError("beam_search: K must be >= 1");
  if (max_len <= static_cast<int>(prefix.size()))
    throw ValidationError("beam_search: max_len must exceed prefix length");

  std::vector<Hypothesis> active{{prefix, 0.0}};
  std::vector<Hypothesis> finalized;
  std::vector<Hypothesis> dead;  // hit max_len without finalizing

  while (!active.empty()) {
    std::vector<Hypothesis> expansions;
    for (const auto& hyp : active) {
      Eigen::VectorXd lp = scorer(hyp.ids);
      if (lp.size() != vocab_size) throw ValidationError("beam_search: scorer size mismatch");
      for (TokenId tok = 0; tok < vocab_size; ++tok) {
        if (lp(tok) < -1e29) continue;  // masked out
        Hypothesis next{hyp.ids, hyp.score + lp(tok)};
        next.ids.push_back(tok);
        expansions.push_back(std::move(next));
      }
    }
    std::sort(expansions.begin(), expansions.end(), better);

    active.clear();
    for (auto& hyp : expansions) {
      if (hyp.ids.back() == end_token) {
        finalized.push_back(std::move(hyp));
      } else if (static_cast<int>(hyp.ids.size()) >= max_len) {
        dead.push_back(std::move(hyp));
      } else if (static_cast<int>(active.size()) < K) {
        active.push_back(std::move(hyp));
      }
    }
    // Per-token log-probs are <= 0, so an active score bounds any completion:
    // once the K-th finalized hypothesis strictly beats the best active one,
    // nothing left in the beam can enter the top K.
    if (static_cast<int>(finalized.size()) >= K && !active.empty()) {
      std::sort(finalized.begin(), finalized.end(), better);
      if (finalized[K - 1].score > active.front().score) break;
    }
  }

  std::sort(finalized.begin(), finalized.end(), better);
  BeamResult result;
  for (const auto& hyp : finalized) {
    if (static_cast<int>(result.sequences.size()) == K) break;
    result.sequences.push_back({hyp.ids, hyp.score, true});
  }
  if (static_cast<int>(result.sequences.size()) < K) {
    result.shortfall = true;
    std::sort(dead.begin(), dead.end(), better);
    for (const auto& hyp : dead) {
      if (static_cast<int>(result.sequences.size()) == K) break;
      result.sequences.push_back({hyp.ids, hyp.score, false});
    }
  }
  return result;
}

StepScorer model_step_scorer(const Model& m, Eigen::MatrixXd z, const DecodeSupport& support) {
  auto zp = std::make_shared<Eigen::MatrixXd>(std::move(z));
  return [&m, zp, support](const std::vector<TokenId>& prefix) {
    Eigen::MatrixXd logits = m.decoder_logits(*zp, prefix);
    Eigen::VectorXd last = logits.row(logits.rows() - 1).transpose();
    bool after_at = std::find(prefix.begin(), prefix.end(), kAt) != prefix.end();
    last += support.logit_mask(after_at).transpose();
    return log_softmax(std::move(last));
  };
}

namespace {

Prediction parse_sequence(const std::vector<TokenId>& ids, double score, double w, double h,
                          const Vocabulary& v, const std::set<std::string>& object_lexicon) {
  DecodedPrediction d = decode_prediction(ids, w, h, v, object_lexicon);
  return Prediction{d.relation, d.object, d.box, score, d.well_formed};
}

}  // namespace

std::vector<Prediction> two_step_decode(const ImageTensor& img, const std::string& subject,
                                        const BoxPixels& subject_box, int K, const Model& m,
                                        const Vocabulary& v,
                                        const std::set<std::string>& object_lexicon,
                                        const DecodeOptions& opts) {
  if (K < 1) throw ValidationError("two_step_decode: K must be >= 1");
  auto input_ids = encode_input(subject, subject_box, img.native_w, img.native_h, v);
  Eigen::MatrixXd z = m.fuse_context(img, input_ids);
  auto support = DecodeSupport::from_vocab(v);
  StepScorer scorer = model_step_scorer(m, z, support);

  BeamResult step1 = beam_search(scorer, {}, K, kAt, opts.max_rel_obj_tokens, v.size());
  std::vector<Prediction> preds;
  for (const auto& seq : step1.sequences) {
    std::vector<TokenId> full = seq.ids;
    if (seq.complete) {
      BeamResult step2 =
          beam_search(scorer, seq.ids, 1, kSep,
                      static_cast<int>(seq.ids.size()) + opts.max_box_tokens, v.size());
      if (!step2.sequences.empty()) full = step2.sequences.front().ids;
    }
    preds.push_back(parse_sequence(full, seq.score, img.native_w, img.native_h, v, object_lexicon));
  }
  return preds;  // step-1 order == score descending
}

std::vector<Prediction> single_pass_decode(const ImageTensor& img, const std::string& subject,
                                           const BoxPixels& subject_box, int K, const Model& m,
                                           const Vocabulary& v,
                                           const std::set<std::string>& object_lexicon,
                                           const DecodeOptions& opts) {
  if (K < 1) throw ValidationError("single_pass_decode: K must be >= 1");
  auto input_ids = encode_input(subject, subject_box, img.native_w, img.native_h, v);
  Eigen::MatrixXd z = m.fuse_context(img, input_ids);
  auto support = DecodeSupport::from_vocab(v);
  StepScorer scorer = model_step_scorer(m, z, support);

  BeamResult beam = beam_search(scorer, {}, K, kSep,
                                opts.max_rel_obj_tokens + opts.max_box_tokens, v.size());
  std::vector<Prediction> preds;
  for (const auto& seq : beam.sequences)
    preds.push_back(parse_sequence(seq.ids, seq.score, img.native_w, img.native_h, v, object_lexicon));
  return preds;
}

void write_predictions(const std::vector<PredictionRecord>& records, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write predictions: " + path);
  for (const auto& rec : records) {
    nlohmann::json j;
    j["sample_id"] = rec.sample_id;
    j["rank"] = rec.rank;
    j["relation"] = rec.prediction.relation;
    j["object"] = rec.prediction.object;
    if (rec.prediction.box) {
      const auto& b = *rec.prediction.box;
      j["box"] = {b.x1, b.y1, b.x2, b.y2};
    } else {
      j["box"] = nullptr;
    }
    j["score"] = rec.prediction.score;
    j["well_formed"] = rec.prediction.well_formed;
    os << j.dump() << "\n";
  }
}

std::map<std::string, std::vector<Prediction>> read_predictions(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read predictions: " + path);
  std::map<std::string, std::vector<Prediction>> out;
  std::map<std::string, std::vector<std::pair<int, Prediction>>> ranked;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    Prediction p;
    p.relation = j.at("relation").get<std::string>();
    p.object = j.at("object").get<std::string>();
    if (!j.at("box").is_null()) {
      auto b = j.at("box");
      p.box = BoxPixels{b[0], b[1], b[2], b[3]};
    }
    p.score = j.at("score").get<double>();
    p.well_formed = j.at("well_formed").get<bool>();
    ranked[j.at("sample_id").get<std::string>()].emplace_back(j.at("rank").get<int>(), p);
  }
  for (auto& [id, list] : ranked) {
    std::sort(list.begin(), list.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (auto& [rank, p] : list) out[id].push_back(std::move(p));
  }
  return out;
}

}  // namespace scord
