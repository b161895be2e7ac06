#include "scord/eval.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace scord {

namespace {

std::string normalize(const std::string& s) {
  auto words = split_words(s);
  std::string out;
  for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
  return out;
}

}  // namespace

SynonymMap SynonymMap::from_groups(const std::vector<std::vector<std::string>>& groups) {
  SynonymMap m;
  for (const auto& group : groups) {
    std::vector<std::string> terms;
    for (const auto& t : group) terms.push_back(normalize(t));
    for (const auto& a : terms)
      for (const auto& b : terms) m.syn_[a].insert(b);
  }
  return m;
}

SynonymMap SynonymMap::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read synonym map: " + path);
  std::vector<std::vector<std::string>> groups;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> group;
    std::stringstream ss(line);
    std::string term;
    while (std::getline(ss, term, ',')) {
      term = normalize(term);
      if (!term.empty()) group.push_back(term);
    }
    if (!group.empty()) groups.push_back(std::move(group));
  }
  return from_groups(groups);
}

void SynonymMap::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write synonym map: " + path);
  std::set<std::string> done;
  for (const auto& [term, group] : syn_) {
    if (done.count(term)) continue;
    std::string line;
    for (const auto& t : group) {
      line += (line.empty() ? "" : ",") + t;
      done.insert(t);
    }
    os << line << "\n";
  }
}

bool SynonymMap::related(const std::string& a, const std::string& b) const {
  std::string na = normalize(a), nb = normalize(b);
  if (na == nb) return true;  // every term is its own synonym
  auto it = syn_.find(na);
  return it != syn_.end() && it->second.count(nb) > 0;
}

double iou(const BoxPixels& a, const BoxPixels& b) {
  double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0 || iy <= 0) return 0.0;
  double inter = ix * iy;
  double area_a = (a.x2 - a.x1) * (a.y2 - a.y1);
  double area_b = (b.x2 - b.x1) * (b.y2 - b.y1);
  return inter / (area_a + area_b - inter);
}

bool match_rel_obj(const std::pair<std::string, std::string>& pred,
                   const std::pair<std::string, std::string>& gt, const SynonymMap& syn) {
  if (normalize(pred.first) != normalize(gt.first)) return false;
  return syn.related(pred.second, gt.second);
}

EvalReport evaluate_recall(const std::map<std::string, std::vector<Prediction>>& predictions,
                           const std::vector<SampleRecord>& ground_truth,
                           const std::vector<int>& ks, const std::vector<double>& thresholds,
                           const SynonymMap& syn, const std::string& split_name) {
  EvalReport report;
  report.split = split_name;
  if (ks.empty() || thresholds.empty())
    throw ConfigError("evaluate_recall: empty K or threshold list");
  for (const auto& gt : ground_truth)
    if (!gt.grounded || !gt.object_box)
      throw ValidationError("evaluate_recall: ground truth must be grounded");

  int max_k = *std::max_element(ks.begin(), ks.end());
  double min_thr = *std::min_element(thresholds.begin(), thresholds.end());

  static const std::vector<Prediction> kEmpty;
  for (int k : ks) {
    for (double thr : thresholds) {
      long text_pos = 0, box_pos = 0;
      for (const auto& gt : ground_truth) {
        auto it = predictions.find(gt.id);
        const auto& preds = it == predictions.end() ? kEmpty : it->second;
        bool text = false, box = false;
        for (int r = 0; r < std::min<int>(k, static_cast<int>(preds.size())); ++r) {
          const Prediction& p = preds[r];
          if (!match_rel_obj({p.relation, p.object}, gt.rel_obj_pair(), syn)) continue;
          text = true;
          if (p.well_formed && p.box && iou(*p.box, *gt.object_box) >= thr) box = true;
        }
        text_pos += text;
        box_pos += box;

        if (k == max_k && thr == min_thr) {
          auto& pb = report.per_pair[gt.rel_obj_pair()];
          ++pb.n;
          pb.text_positive += text;
          pb.box_positive += box;
        }
      }
      EvalCell cell;
      cell.k = k;
      cell.iou_threshold = thr;
      cell.n = static_cast<long>(ground_truth.size());
      if (cell.n > 0) {
        cell.rel_object_recall = static_cast<double>(text_pos) / static_cast<double>(cell.n);
        cell.object_loc_recall = static_cast<double>(box_pos) / static_cast<double>(cell.n);
      }
      report.cells.push_back(cell);
    }
  }
  return report;
}

std::string format_report_table(const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  os << std::left << std::setw(12) << "split" << std::right << std::setw(4) << "K"
     << std::setw(8) << "iou" << std::setw(14) << "rel_object" << std::setw(14) << "object_loc"
     << std::setw(8) << "n" << "\n";
  os << std::string(60, '-') << "\n";
  os << std::fixed;
  for (const auto& rep : reports)
    for (const auto& c : rep.cells)
      os << std::left << std::setw(12) << rep.split << std::right << std::setw(4) << c.k
         << std::setw(8) << std::setprecision(2) << c.iou_threshold << std::setw(14)
         << std::setprecision(4) << c.rel_object_recall << std::setw(14) << c.object_loc_recall
         << std::setw(8) << c.n << "\n";
  return os.str();
}

void write_report(const std::vector<EvalReport>& reports, const std::string& table_path,
                  const std::string& jsonl_path) {
  {
    std::ofstream os(table_path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write report: " + table_path);
    os << format_report_table(reports);
  }
  std::ofstream os(jsonl_path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write report: " + jsonl_path);
  for (const auto& rep : reports)
    for (const auto& c : rep.cells) {
      nlohmann::json j;
      j["split"] = rep.split;
      j["K"] = c.k;
      j["iou_threshold"] = c.iou_threshold;
      j["rel_object_recall"] = c.rel_object_recall;
      j["object_loc_recall"] = c.object_loc_recall;
      j["n"] = c.n;
      os << j.dump() << "\n";
    }
}

std::vector<EvalReport> read_report_jsonl(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read report: " + path);
  std::map<std::string, EvalReport> by_split;
  std::vector<std::string> order;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    std::string split = j.at("split").get<std::string>();
    if (!by_split.count(split)) {
      order.push_back(split);
      by_split[split].split = split;
    }
    EvalCell c;
    c.k = j.at("K").get<int>();
    c.iou_threshold = j.at("iou_threshold").get<double>();
    c.rel_object_recall = j.at("rel_object_recall").get<double>();
    c.object_loc_recall = j.at("object_loc_recall").get<double>();
    c.n = j.at("n").get<long>();
    by_split[split].cells.push_back(c);
  }
  std::vector<EvalReport> out;
  for (const auto& s : order) out.push_back(by_split[s]);
  return out;
}

}  // namespace scord
