#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "scord/corpus.hpp"
#include "scord/decoding.hpp"

namespace scord {

// Symmetric-closure synonym groups; every term is its own synonym.
class SynonymMap {
 public:
  SynonymMap() = default;
  static SynonymMap from_groups(const std::vector<std::vector<std::string>>& groups);
  static SynonymMap load(const std::string& path);  // one comma-separated group per line
  void save(const std::string& path) const;

  bool related(const std::string& a, const std::string& b) const;

 private:
  std::map<std::string, std::set<std::string>> syn_;
};

double iou(const BoxPixels& a, const BoxPixels& b);

// Normalized comparison (lowercase, collapsed whitespace): relation must
// match exactly, object may match through the synonym map.
bool match_rel_obj(const std::pair<std::string, std::string>& pred,
                   const std::pair<std::string, std::string>& gt, const SynonymMap& syn);

struct EvalCell {
  int k = 0;
  double iou_threshold = 0;
  double rel_object_recall = 0;
  double object_loc_recall = 0;
  long n = 0;
};

struct PairBreakdown {
  long n = 0;
  long text_positive = 0;
  long box_positive = 0;
};

struct EvalReport {
  std::string split;
  std::vector<EvalCell> cells;  // one per (K, threshold)
  // Per relation-object pair, counted at the largest K and smallest threshold.
  std::map<RelObjPair, PairBreakdown> per_pair;
};

// Per-sample Recall@K: a gt record is text-positive at K if any of its top-K
// predictions matches per match_rel_obj, and box-positive if some matching
// top-K prediction also carries a well-formed box with IoU >= threshold
// against the gt object box. Repeated predicted strings are not deduplicated.
// Missing prediction lists count as negatives.
EvalReport evaluate_recall(const std::map<std::string, std::vector<Prediction>>& predictions,
                           const std::vector<SampleRecord>& ground_truth,
                           const std::vector<int>& ks, const std::vector<double>& thresholds,
                           const SynonymMap& syn, const std::string& split_name = "test");

// Column-aligned table plus machine-readable line-delimited rows.
std::string format_report_table(const std::vector<EvalReport>& reports);
void write_report(const std::vector<EvalReport>& reports, const std::string& table_path,
                  const std::string& jsonl_path);
std::vector<EvalReport> read_report_jsonl(const std::string& path);

}  // namespace scord
