// Command-line pipeline driver: synthetic data generation, caption triplet
// extraction, benchmark split construction, training, beam-decoding and
// recall evaluation, all reproducible from a single seed.
#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include "scord/corpus.hpp"
#include "scord/decoding.hpp"
#include "scord/eval.hpp"
#include "scord/model.hpp"

namespace fs = std::filesystem;
using namespace scord;

namespace {

// Flat key = value file, '#' comments. Flags override config values.
struct RunConfig {
  std::map<std::string, std::string> kv;

  static RunConfig load(const std::string& path) {
    RunConfig c;
    if (path.empty()) return c;
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config: " + path);
    std::string line;
    while (std::getline(is, line)) {
      auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      auto trim = [](std::string s) {
        size_t a = s.find_first_not_of(" \t\r");
        size_t b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string{} : s.substr(a, b - a + 1);
      };
      std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
      if (!key.empty()) c.kv[key] = value;
    }
    return c;
  }

  std::string str(const std::string& key, const std::string& fallback = "") const {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : it->second;
  }
  long num(const std::string& key, long fallback) const {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : std::stol(it->second);
  }
  double real(const std::string& key, double fallback) const {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : std::stod(it->second);
  }
};

uint64_t stage_seed(uint64_t global, const std::string& stage) {
  return global ^ fnv1a_hash(stage);
}

ModelConfig model_config(const RunConfig& c, int vocab_size, uint64_t seed) {
  ModelConfig m;
  m.hidden_dim = static_cast<int>(c.num("model.hidden_dim", 32));
  m.num_heads = static_cast<int>(c.num("model.num_heads", 4));
  m.n_v = static_cast<int>(c.num("model.image_layers", 1));
  m.n_t = static_cast<int>(c.num("model.text_layers", 1));
  m.n_m = static_cast<int>(c.num("model.fusion_layers", 1));
  m.n_d = static_cast<int>(c.num("model.decoder_layers", 1));
  m.image_size = static_cast<int>(c.num("model.image_size", 32));
  m.patch_size = static_cast<int>(c.num("model.patch_size", 8));
  m.max_input_len = static_cast<int>(c.num("model.max_input_len", 16));
  m.max_target_len = static_cast<int>(c.num("model.max_target_len", 16));
  m.vocab_size = vocab_size;
  m.seed = stage_seed(seed, "init");
  return m;
}

std::string image_path(const std::string& images_dir, const ImageRef& ref) {
  if (ref.kind == "file") return ref.ref;
  return (fs::path(images_dir) / (ref.ref + ".ppm")).string();
}

ImageTensor load_image(const std::string& images_dir, const ImageRef& ref) {
  auto img = read_ppm(image_path(images_dir, ref));
  return to_image_tensor(img, ref.width, ref.height);
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(std::stoi(tok));
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(std::stod(tok));
  }
  return out;
}

int cmd_gen_synthetic(const RunConfig& c, uint64_t seed, const std::string& out_dir) {
  SceneSpec spec;
  spec.num_scenes = static_cast<int>(c.num("synthetic.num_scenes", 50));
  spec.min_objects = static_cast<int>(c.num("synthetic.min_objects", 2));
  spec.max_objects = static_cast<int>(c.num("synthetic.max_objects", 5));
  spec.image_side = static_cast<int>(c.num("synthetic.image_side", 32));
  spec.grounded_fraction = c.real("synthetic.grounded_fraction", 1.0);
  spec.seed = stage_seed(seed, "gen");
  auto ds = generate_synthetic_dataset(spec);

  fs::create_directories(fs::path(out_dir) / "images");
  for (const auto& [id, img] : ds.images)
    write_ppm(img, (fs::path(out_dir) / "images" / (id + ".ppm")).string());
  write_records(ds.grounded, (fs::path(out_dir) / "grounded.jsonl").string());
  write_records(ds.ungrounded, (fs::path(out_dir) / "ungrounded.jsonl").string());
  std::vector<SampleRecord> gt;
  for (const auto& [id, recs] : ds.ground_truth) gt.insert(gt.end(), recs.begin(), recs.end());
  write_records(gt, (fs::path(out_dir) / "ground_truth.jsonl").string());
  {
    std::ofstream os((fs::path(out_dir) / "captions.tsv").string(), std::ios::binary);
    for (const auto& [id, text] : ds.captions) os << id << "\t" << text << "\n";
  }
  synthetic_lexicon().save((fs::path(out_dir) / "lexicon.txt").string());

  std::cout << "scenes=" << ds.images.size() << " grounded=" << ds.grounded.size()
            << " ungrounded=" << ds.ungrounded.size() << " ground_truth=" << gt.size() << "\n";
  return 0;
}

int cmd_extract_triplets(const std::string& captions_path, const std::string& lexicon_path,
                         const std::string& out_path) {
  auto lex = Lexicon::load(lexicon_path);
  std::ifstream is(captions_path);
  if (!is) throw ConfigError("cannot read captions: " + captions_path);
  std::ofstream os(out_path, std::ios::binary);
  if (!os) throw ConfigError("cannot write triplets: " + out_path);
  std::string line;
  long n = 0;
  while (std::getline(is, line)) {
    auto tab = line.find('\t');
    std::string id = tab == std::string::npos ? "" : line.substr(0, tab);
    std::string text = tab == std::string::npos ? line : line.substr(tab + 1);
    for (const auto& t : extract_triplets(text, lex)) {
      os << id << "\t" << t.subject << "\t" << t.relation << "\t" << t.object << "\n";
      ++n;
    }
  }
  std::cout << "triplets=" << n << "\n";
  return 0;
}

int cmd_build_splits(const RunConfig& c, uint64_t seed, const std::string& data_dir,
                     const std::string& out_dir) {
  auto grounded = read_records((fs::path(data_dir) / "grounded.jsonl").string());
  auto ungrounded = read_records((fs::path(data_dir) / "ungrounded.jsonl").string());
  auto test_pool = read_records((fs::path(data_dir) / "ground_truth.jsonl").string());
  auto lex = Lexicon::load((fs::path(data_dir) / "lexicon.txt").string());

  std::vector<Triplet> caption_triplets;
  for (const auto& u : ungrounded)
    caption_triplets.push_back({u.subject, u.relation, u.object});

  SplitSpec spec;
  spec.min_count = c.num("split.min_count", 1);
  spec.max_count = c.num("split.max_count", 1000000);
  spec.setA_removal_fraction = c.real("split.removal_fraction", 0.5);
  spec.seed = stage_seed(seed, "split");

  auto stats = build_pair_statistics(grounded, caption_triplets, spec.min_count, spec.max_count);
  std::set<RelObjPair> pairs;
  for (const auto& [p, n] : stats) pairs.insert(p);
  auto [set_a, set_b] = partition_rel_obj_sets(pairs, spec.seed);
  auto splits = build_splits(grounded, ungrounded, spec, set_a, set_b, test_pool);

  fs::create_directories(out_dir);
  write_records(splits.base_train, (fs::path(out_dir) / "base_train.jsonl").string());
  write_records(splits.text_aug_train, (fs::path(out_dir) / "text_aug_train.jsonl").string());
  write_records(splits.test_a, (fs::path(out_dir) / "test_a.jsonl").string());
  write_records(splits.test_b, (fs::path(out_dir) / "test_b.jsonl").string());
  write_records(splits.full_test, (fs::path(out_dir) / "full_test.jsonl").string());
  {
    std::ofstream os((fs::path(out_dir) / "pair_sets.tsv").string(), std::ios::binary);
    for (const auto& p : set_a) os << "A\t" << p.first << "\t" << p.second << "\n";
    for (const auto& p : set_b) os << "B\t" << p.first << "\t" << p.second << "\n";
  }
  std::cout << "pairs=" << pairs.size() << " setA=" << set_a.size() << " setB=" << set_b.size()
            << " base_train=" << splits.base_train.size()
            << " text_aug_train=" << splits.text_aug_train.size() << "\n";
  return 0;
}

int cmd_train(const RunConfig& c, uint64_t seed, const std::string& train_path,
              const std::string& data_dir, const std::string& checkpoint_path) {
  auto records = read_records(train_path);
  if (records.empty()) throw ValidationError("train: empty record file");

  std::vector<Triplet> trips;
  auto terms = collect_terms(records, trips);
  int positions = static_cast<int>(c.num("model.position_tokens", 32));
  auto v = Vocabulary::build(terms, positions);
  auto support = DecodeSupport::from_vocab(v);

  std::string images_dir = (fs::path(data_dir) / "images").string();
  std::vector<TrainingSample> samples;
  for (const auto& r : records) {
    TrainingSample s;
    s.image = load_image(images_dir, r.image);
    auto ex = make_sequence_example(r, v);
    s.input_ids = ex.input_ids;
    s.target_ids = ex.target_ids;
    s.loss_mask = ex.loss_mask;
    samples.push_back(std::move(s));
  }

  auto cfg = model_config(c, v.size(), seed);
  Hyperparams hp;
  hp.lr = c.real("train.lr", 3e-3);
  hp.epochs = static_cast<int>(c.num("train.epochs", 20));
  hp.batch_size = static_cast<int>(c.num("train.batch_size", 16));
  hp.seed = stage_seed(seed, "train");

  auto out = train(samples, cfg, hp, support);
  fs::create_directories(fs::path(checkpoint_path).parent_path().empty()
                             ? fs::path(".")
                             : fs::path(checkpoint_path).parent_path());
  out.model.save(checkpoint_path, fnv1a_hash(v.serialize()));
  v.save(checkpoint_path + ".vocab");

  for (size_t e = 0; e < out.loss_history.size(); ++e)
    std::cout << "epoch=" << e << " loss=" << out.loss_history[e] << "\n";
  return 0;
}

int cmd_predict(const RunConfig& c, const std::string& checkpoint_path,
                const std::string& test_path, const std::string& data_dir, int K,
                const std::string& out_path) {
  auto [m, stored_hash] = Model::load(checkpoint_path);
  auto v = Vocabulary::load(checkpoint_path + ".vocab");
  if (stored_hash != fnv1a_hash(v.serialize()))
    throw ValidationError("predict: checkpoint/vocabulary mismatch");

  auto records = read_records(test_path);
  auto lex = Lexicon::load((fs::path(data_dir) / "lexicon.txt").string());
  auto object_words = lex.noun_words();
  std::string images_dir = (fs::path(data_dir) / "images").string();

  // one prediction list per distinct (image, subject, subject box) query
  std::map<std::string, std::vector<PredictionRecord>> by_id;
  for (const auto& r : records) {
    if (by_id.count(r.id)) continue;
    auto img = load_image(images_dir, r.image);
    auto preds = two_step_decode(img, r.subject, r.subject_box, K, m, v, object_words);
    std::vector<PredictionRecord> out;
    for (size_t i = 0; i < preds.size(); ++i)
      out.push_back({r.id, static_cast<int>(i), preds[i]});
    by_id[r.id] = std::move(out);
  }
  (void)c;
  std::vector<PredictionRecord> flat;
  for (const auto& [id, recs] : by_id) flat.insert(flat.end(), recs.begin(), recs.end());
  write_predictions(flat, out_path);
  std::cout << "queries=" << by_id.size() << " predictions=" << flat.size() << "\n";
  return 0;
}

int cmd_evaluate(const RunConfig& c, const std::string& predictions_path,
                 const std::string& truth_path, const std::string& ks_flag,
                 const std::string& ious_flag, const std::string& out_prefix) {
  auto preds = read_predictions(predictions_path);
  auto truth = read_records(truth_path);
  auto ks = parse_int_list(ks_flag.empty() ? c.str("eval.k", "1,3") : ks_flag);
  auto ious = parse_double_list(ious_flag.empty() ? c.str("eval.iou", "0.5") : ious_flag);

  SynonymMap syn;
  std::string syn_path = c.str("eval.synonyms");
  if (!syn_path.empty()) syn = SynonymMap::load(syn_path);

  long unmatched = 0;
  {
    std::set<std::string> truth_ids;
    for (const auto& t : truth) truth_ids.insert(t.id);
    for (const auto& [id, p] : preds)
      if (!truth_ids.count(id)) ++unmatched;
  }
  if (unmatched > 0) {
    std::cerr << "error: " << unmatched << " prediction ids have no ground-truth record\n";
    return 1;
  }

  auto rep = evaluate_recall(preds, truth, ks, ious, syn, c.str("eval.split_name", "test"));
  write_report({rep}, out_prefix + ".txt", out_prefix + ".jsonl");
  std::cout << format_report_table({rep});
  return 0;
}

int cmd_inspect(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read file: " + path);
  std::string line;
  std::string first;
  std::getline(is, first);
  is.clear();
  is.seekg(0);

  if (first.find("\"rank\"") != std::string::npos) {
    auto preds = read_predictions(path);
    for (const auto& [id, list] : preds)
      for (size_t i = 0; i < list.size(); ++i) {
        const auto& p = list[i];
        std::cout << id << "\t#" << i << "\t" << p.relation << "\t" << p.object << "\t";
        if (p.box)
          std::cout << "[" << p.box->x1 << "," << p.box->y1 << "," << p.box->x2 << ","
                    << p.box->y2 << "]";
        else
          std::cout << "-";
        std::cout << "\tscore=" << p.score << (p.well_formed ? "" : "\t(malformed)") << "\n";
      }
    return 0;
  }
  if (first.find("\"subject\"") != std::string::npos) {
    for (const auto& r : read_records(path)) {
      std::cout << r.id << "\t" << r.subject << "\t" << r.relation << "\t" << r.object << "\t"
                << (r.grounded ? "grounded" : "ungrounded") << "\n";
    }
    return 0;
  }
  while (std::getline(is, line)) std::cout << line << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"subject-conditional relation detection pipeline"};
  app.require_subcommand(1);
  app.fallthrough();  // --config/--seed/--jobs are accepted after any subcommand

  std::string config_path;
  int64_t seed_flag = -1;
  int jobs = 1;
  app.add_option("--config", config_path, "key=value config file")->capture_default_str();
  app.add_option("--seed", seed_flag, "global seed override");
  app.add_option("--jobs", jobs, "worker count (output order is always by sample id)");

  // gen-synthetic
  auto* gen = app.add_subcommand("gen-synthetic", "generate a synthetic shape corpus");
  std::string gen_out = "data";
  gen->add_option("--out", gen_out, "output directory");

  // extract-triplets
  auto* ext = app.add_subcommand("extract-triplets", "rule-based triplets from captions");
  std::string ext_captions, ext_lexicon, ext_out = "triplets.tsv";
  ext->add_option("--captions", ext_captions)->required();
  ext->add_option("--lexicon", ext_lexicon)->required();
  ext->add_option("--out", ext_out);

  // build-splits
  auto* spl = app.add_subcommand("build-splits", "benchmark splits with held-out pair sets");
  std::string spl_data = "data", spl_out = "splits";
  spl->add_option("--data", spl_data, "directory produced by gen-synthetic");
  spl->add_option("--out", spl_out);

  // train
  auto* trn = app.add_subcommand("train", "train a model on a record file");
  std::string trn_records, trn_data = "data", trn_ckpt = "model.ckpt";
  trn->add_option("--records", trn_records)->required();
  trn->add_option("--data", trn_data, "directory holding images/");
  trn->add_option("--out", trn_ckpt, "checkpoint path");

  // predict
  auto* prd = app.add_subcommand("predict", "two-step beam decoding over a test file");
  std::string prd_ckpt = "model.ckpt", prd_records, prd_data = "data", prd_out = "predictions.jsonl";
  int prd_k = 3;
  prd->add_option("--checkpoint", prd_ckpt);
  prd->add_option("--records", prd_records)->required();
  prd->add_option("--data", prd_data);
  prd->add_option("--k", prd_k, "beam width / predictions per query");
  prd->add_option("--out", prd_out);

  // evaluate
  auto* evl = app.add_subcommand("evaluate", "recall@K against grounded ground truth");
  std::string evl_preds, evl_truth, evl_ks, evl_ious, evl_out = "report";
  evl->add_option("--predictions", evl_preds)->required();
  evl->add_option("--truth", evl_truth)->required();
  evl->add_option("--k", evl_ks, "comma-separated K list");
  evl->add_option("--iou", evl_ious, "comma-separated IoU thresholds");
  evl->add_option("--out", evl_out, "report path prefix");

  // inspect
  auto* ins = app.add_subcommand("inspect", "pretty-print a record or prediction file");
  std::string ins_path;
  ins->add_option("file", ins_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    RunConfig cfg = RunConfig::load(config_path);
    uint64_t seed =
        seed_flag >= 0 ? static_cast<uint64_t>(seed_flag) : static_cast<uint64_t>(cfg.num("seed", 0));
    if (gen->parsed()) return cmd_gen_synthetic(cfg, seed, gen_out);
    if (ext->parsed()) return cmd_extract_triplets(ext_captions, ext_lexicon, ext_out);
    if (spl->parsed()) return cmd_build_splits(cfg, seed, spl_data, spl_out);
    if (trn->parsed()) return cmd_train(cfg, seed, trn_records, trn_data, trn_ckpt);
    if (prd->parsed()) return cmd_predict(cfg, prd_ckpt, prd_records, prd_data, prd_k, prd_out);
    if (evl->parsed()) return cmd_evaluate(cfg, evl_preds, evl_truth, evl_ks, evl_ious, evl_out);
    if (ins->parsed()) return cmd_inspect(ins_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
