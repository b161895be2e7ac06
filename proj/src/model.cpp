#include "scord/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

namespace scord {

using ag::Matrix;
using ag::Var;

namespace {

constexpr double kNegInf = -1e30;

Var linear(const Model::Linear& p, const Var& x) {
  return ag::add_rowwise(ag::matmul(x, p.W), p.b);
}

Var layer_norm(const Model::LayerNorm& p, const Var& x) {
  return ag::layer_norm_rows(x, p.g, p.b);
}

Var multihead_attention(const Model::Attention& p, const Var& x_q, const Var& x_kv,
                        const Matrix* additive_mask, int num_heads) {
  Var q = linear(p.q, x_q);
  Var k = linear(p.k, x_kv);
  Var v = linear(p.v, x_kv);
  int d = static_cast<int>(q->value.cols());
  int dh = d / num_heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> heads;
  heads.reserve(num_heads);
  for (int h = 0; h < num_heads; ++h) {
    Var qh = ag::slice_cols(q, h * dh, dh);
    Var kh = ag::slice_cols(k, h * dh, dh);
    Var vh = ag::slice_cols(v, h * dh, dh);
    Var scores = ag::scale(ag::matmul(qh, ag::transpose(kh)), scale);
    if (additive_mask) scores = ag::add_constant(scores, *additive_mask);
    heads.push_back(ag::matmul(ag::softmax_rows(scores), vh));
  }
  return linear(p.o, ag::concat_cols(heads));
}

Var feed_forward(const Model::Linear& ff1, const Model::Linear& ff2, const Var& x) {
  return linear(ff2, ag::gelu(linear(ff1, x)));
}

Var encoder_layer(const Model::EncoderLayer& l, Var x, int heads) {
  Var n1 = layer_norm(l.ln1, x);
  x = ag::add(x, multihead_attention(l.self, n1, n1, nullptr, heads));
  x = ag::add(x, feed_forward(l.ff1, l.ff2, layer_norm(l.ln2, x)));
  return x;
}

Var cross_layer(const Model::CrossLayer& l, Var x, const Var& context,
                const Matrix* self_mask, int heads) {
  Var n1 = layer_norm(l.ln1, x);
  x = ag::add(x, multihead_attention(l.self, n1, n1, self_mask, heads));
  x = ag::add(x, multihead_attention(l.cross, layer_norm(l.ln_x, x), context, nullptr, heads));
  x = ag::add(x, feed_forward(l.ff1, l.ff2, layer_norm(l.ln2, x)));
  return x;
}

Matrix causal_mask(int n) {
  Matrix m = Matrix::Zero(n, n);
  for (int r = 0; r < n; ++r)
    for (int c = r + 1; c < n; ++c) m(r, c) = kNegInf;
  return m;
}

struct ParamFiller {
  std::mt19937_64 rng;
  std::normal_distribution<double> dist{0.0, 0.02};

  Matrix normal(int rows, int cols) {
    Matrix m(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) m(r, c) = dist(rng);
    return m;
  }
};

}  // namespace

void ModelConfig::validate() const {
  if (hidden_dim < 1 || num_heads < 1 || hidden_dim % num_heads != 0)
    throw ConfigError("hidden_dim must be a positive multiple of num_heads");
  if (n_v < 1 || n_t < 1 || n_m < 1 || n_d < 1)
    throw ConfigError("all layer counts must be >= 1");
  if (image_size < 1 || patch_size < 1 || image_size % patch_size != 0)
    throw ConfigError("image_size must be a positive multiple of patch_size");
  if (vocab_size < kNumSentinels + 3) throw ConfigError("vocab_size too small");
  if (max_input_len < 1) throw ConfigError("max_input_len must be >= 1");
  if (max_target_len < 8) throw ConfigError("max_target_len must be >= 8");
}

bool DecodeSupport::allowed(TokenId id, bool after_at) const {
  if (after_at) return id >= first_position_id || id == kSep;
  return (id >= kNumSentinels && id < first_position_id) || id == kUnk || id == kAt;
}

Eigen::RowVectorXd DecodeSupport::logit_mask(bool after_at) const {
  Eigen::RowVectorXd m(vocab_size);
  for (int id = 0; id < vocab_size; ++id) m(id) = allowed(id, after_at) ? 0.0 : kNegInf;
  return m;
}

uint64_t fnv1a_hash(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

Model Model::init(const ModelConfig& config) {
  config.validate();
  Model m;
  m.cfg_ = config;
  const int d = config.hidden_dim;
  const int ff = config.ffn();
  const int V = config.vocab_size;

  ParamFiller fill{std::mt19937_64(config.seed)};
  auto lin = [&](int in, int out) {
    return Linear{ag::parameter(fill.normal(in, out)), ag::parameter(Matrix::Zero(1, out))};
  };
  auto ln = [&] {
    return LayerNorm{ag::parameter(Matrix::Ones(1, d)), ag::parameter(Matrix::Zero(1, d))};
  };
  auto attn = [&] { return Attention{lin(d, d), lin(d, d), lin(d, d), lin(d, d)}; };
  auto enc_layer = [&] { return EncoderLayer{ln(), attn(), ln(), lin(d, ff), lin(ff, d)}; };
  auto crs_layer = [&] {
    return CrossLayer{ln(), attn(), ln(), attn(), ln(), lin(d, ff), lin(ff, d)};
  };

  m.patch_embed_ = lin(config.patch_size * config.patch_size * 3, d);
  m.img_pos_ = ag::parameter(fill.normal(config.num_patches(), d));
  for (int i = 0; i < config.n_v; ++i) m.img_layers_.push_back(enc_layer());
  m.img_ln_f_ = ln();

  m.tok_embed_ = ag::parameter(fill.normal(V, d));
  m.text_pos_ = ag::parameter(fill.normal(config.max_input_len, d));
  for (int i = 0; i < config.n_t; ++i) m.text_layers_.push_back(enc_layer());
  m.text_ln_f_ = ln();

  for (int i = 0; i < config.n_m; ++i) m.fusion_layers_.push_back(crs_layer());
  m.fusion_ln_f_ = ln();

  m.dec_embed_ = ag::parameter(fill.normal(V, d));
  m.dec_pos_ = ag::parameter(fill.normal(config.max_target_len, d));
  m.bos_ = ag::parameter(fill.normal(1, d));
  for (int i = 0; i < config.n_d; ++i) m.dec_layers_.push_back(crs_layer());
  m.dec_ln_f_ = ln();
  m.out_proj_ = lin(d, V);

  // Decoder layers start as copies of the fusion encoder layers.
  int shared = std::min(config.n_d, config.n_m);
  for (int i = 0; i < shared; ++i) {
    const CrossLayer& src = m.fusion_layers_[i];
    CrossLayer& dst = m.dec_layers_[i];
    auto copy_lin = [](const Linear& a, Linear& b) {
      b.W->value = a.W->value;
      b.b->value = a.b->value;
    };
    auto copy_ln = [](const LayerNorm& a, LayerNorm& b) {
      b.g->value = a.g->value;
      b.b->value = a.b->value;
    };
    auto copy_attn = [&](const Attention& a, Attention& b) {
      copy_lin(a.q, b.q), copy_lin(a.k, b.k), copy_lin(a.v, b.v), copy_lin(a.o, b.o);
    };
    copy_ln(src.ln1, dst.ln1);
    copy_attn(src.self, dst.self);
    copy_ln(src.ln_x, dst.ln_x);
    copy_attn(src.cross, dst.cross);
    copy_ln(src.ln2, dst.ln2);
    copy_lin(src.ff1, dst.ff1);
    copy_lin(src.ff2, dst.ff2);
  }

  m.register_params();
  return m;
}

void Model::register_params() {
  params_.clear();
  auto add = [&](const std::string& name, const Var& v) { params_.emplace_back(name, v); };
  auto add_lin = [&](const std::string& name, const Linear& l) {
    add(name + ".W", l.W);
    add(name + ".b", l.b);
  };
  auto add_ln = [&](const std::string& name, const LayerNorm& l) {
    add(name + ".g", l.g);
    add(name + ".b", l.b);
  };
  auto add_attn = [&](const std::string& name, const Attention& a) {
    add_lin(name + ".q", a.q);
    add_lin(name + ".k", a.k);
    add_lin(name + ".v", a.v);
    add_lin(name + ".o", a.o);
  };
  auto add_enc = [&](const std::string& name, const EncoderLayer& l) {
    add_ln(name + ".ln1", l.ln1);
    add_attn(name + ".self", l.self);
    add_ln(name + ".ln2", l.ln2);
    add_lin(name + ".ff1", l.ff1);
    add_lin(name + ".ff2", l.ff2);
  };
  auto add_crs = [&](const std::string& name, const CrossLayer& l) {
    add_ln(name + ".ln1", l.ln1);
    add_attn(name + ".self", l.self);
    add_ln(name + ".ln_x", l.ln_x);
    add_attn(name + ".cross", l.cross);
    add_ln(name + ".ln2", l.ln2);
    add_lin(name + ".ff1", l.ff1);
    add_lin(name + ".ff2", l.ff2);
  };

  add_lin("fv.patch_embed", patch_embed_);
  add("fv.pos", img_pos_);
  for (size_t i = 0; i < img_layers_.size(); ++i)
    add_enc("fv.layer" + std::to_string(i), img_layers_[i]);
  add_ln("fv.ln_f", img_ln_f_);

  add("ft.tok_embed", tok_embed_);
  add("ft.pos", text_pos_);
  for (size_t i = 0; i < text_layers_.size(); ++i)
    add_enc("ft.layer" + std::to_string(i), text_layers_[i]);
  add_ln("ft.ln_f", text_ln_f_);

  for (size_t i = 0; i < fusion_layers_.size(); ++i)
    add_crs("fm.layer" + std::to_string(i), fusion_layers_[i]);
  add_ln("fm.ln_f", fusion_ln_f_);

  add("fd.tok_embed", dec_embed_);
  add("fd.pos", dec_pos_);
  add("fd.bos", bos_);
  for (size_t i = 0; i < dec_layers_.size(); ++i)
    add_crs("fd.layer" + std::to_string(i), dec_layers_[i]);
  add_ln("fd.ln_f", dec_ln_f_);
  add_lin("fd.out_proj", out_proj_);
}

Var Model::param(const std::string& name) const {
  for (const auto& [n, v] : params_)
    if (n == name) return v;
  throw std::invalid_argument("unknown parameter: " + name);
}

Var Model::encode_image_g(const ImageTensor& img) const {
  if (img.side != cfg_.image_size ||
      img.data.size() != static_cast<size_t>(img.side) * img.side * 3)
    throw ValidationError("encode_image: image shape does not match config");
  const int p = cfg_.patch_size;
  const int grid = cfg_.image_size / p;
  Matrix patches(grid * grid, p * p * 3);
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx) {
      int row = gy * grid + gx;
      int col = 0;
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x)
          for (int c = 0; c < 3; ++c)
            patches(row, col++) = img.at(gy * p + y, gx * p + x, c);
    }
  Var x = ag::add_rowwise(ag::matmul(ag::constant(std::move(patches)), patch_embed_.W),
                          patch_embed_.b);
  x = ag::add(x, img_pos_);
  for (const auto& l : img_layers_) x = encoder_layer(l, x, cfg_.num_heads);
  return layer_norm(img_ln_f_, x);
}

Var Model::encode_text_g(const std::vector<TokenId>& input_ids) const {
  if (input_ids.empty() || static_cast<int>(input_ids.size()) > cfg_.max_input_len)
    throw ValidationError("encode_text: bad input length");
  for (TokenId id : input_ids)
    if (id < 0 || id >= cfg_.vocab_size) throw ValidationError("encode_text: id out of range");
  Var x = ag::gather_rows(tok_embed_, input_ids);
  x = ag::add(x, ag::slice_rows(text_pos_, 0, static_cast<int>(input_ids.size())));
  for (const auto& l : text_layers_) x = encoder_layer(l, x, cfg_.num_heads);
  return layer_norm(text_ln_f_, x);
}

Var Model::fuse_g(const Var& img_feats, const Var& txt_feats) const {
  if (img_feats->value.cols() != cfg_.hidden_dim || txt_feats->value.cols() != cfg_.hidden_dim)
    throw ValidationError("fuse: feature dimension mismatch");
  Var x = txt_feats;
  for (const auto& l : fusion_layers_) x = cross_layer(l, x, img_feats, nullptr, cfg_.num_heads);
  return layer_norm(fusion_ln_f_, x);
}

Var Model::decoder_hidden_g(const Var& z, const std::vector<TokenId>& prefix) const {
  if (static_cast<int>(prefix.size()) >= cfg_.max_target_len)
    throw ValidationError("decoder: prefix too long");
  for (TokenId id : prefix)
    if (id < 0 || id >= cfg_.vocab_size) throw ValidationError("decoder: id out of range");
  const int len = static_cast<int>(prefix.size()) + 1;
  Var x = prefix.empty() ? bos_ : ag::concat_rows({bos_, ag::gather_rows(dec_embed_, prefix)});
  x = ag::add(x, ag::slice_rows(dec_pos_, 0, len));
  Matrix mask = causal_mask(len);
  for (const auto& l : dec_layers_) x = cross_layer(l, x, z, &mask, cfg_.num_heads);
  return layer_norm(dec_ln_f_, x);
}

Var Model::decoder_logits_g(const Var& z, const std::vector<TokenId>& prefix) const {
  return linear(out_proj_, decoder_hidden_g(z, prefix));
}

Eigen::MatrixXd Model::encode_image(const ImageTensor& img) const {
  ag::NoGrad guard;
  return encode_image_g(img)->value;
}

Eigen::MatrixXd Model::encode_text(const std::vector<TokenId>& input_ids) const {
  ag::NoGrad guard;
  return encode_text_g(input_ids)->value;
}

Eigen::MatrixXd Model::fuse_context(const ImageTensor& img,
                                    const std::vector<TokenId>& input_ids) const {
  ag::NoGrad guard;
  return fuse_g(encode_image_g(img), encode_text_g(input_ids))->value;
}

Eigen::MatrixXd Model::decoder_logits(const Eigen::MatrixXd& z,
                                      const std::vector<TokenId>& prefix) const {
  ag::NoGrad guard;
  return decoder_logits_g(ag::constant(z), prefix)->value;
}

namespace {

// Per-sample masked negative log-likelihood graph; returns (nll_sum, count).
std::pair<Var, long> sample_nll(const TrainingSample& s, const Model& m,
                                const DecodeSupport& support) {
  Var z = m.fuse_g(m.encode_image_g(s.image), m.encode_text_g(s.input_ids));
  std::vector<TokenId> prefix(s.target_ids.begin(), s.target_ids.end() - 1);
  Var logits = m.decoder_logits_g(z, prefix);

  const int T = static_cast<int>(s.target_ids.size());
  Matrix support_mask(T, support.vocab_size);
  bool after_at = false;
  for (int k = 0; k < T; ++k) {
    support_mask.row(k) = support.logit_mask(after_at);
    if (s.target_ids[k] == kAt) after_at = true;
  }
  Var lp = ag::log_softmax_rows(ag::add_constant(logits, support_mask));
  long count = 0;
  for (uint8_t f : s.loss_mask) count += f ? 1 : 0;
  return {ag::masked_nll(lp, s.target_ids, s.loss_mask), count};
}

std::pair<Var, LossResult> loss_graph(const std::vector<TrainingSample>& batch, const Model& m,
                                      const DecodeSupport& support) {
  if (batch.empty()) throw ValidationError("compute_loss: empty batch");
  std::vector<Var> terms;
  long total = 0;
  for (const auto& s : batch) {
    if (s.target_ids.empty() || s.target_ids.size() != s.loss_mask.size())
      throw ValidationError("compute_loss: malformed sample");
    auto [nll, count] = sample_nll(s, m, support);
    terms.push_back(nll);
    total += count;
  }
  LossResult res;
  res.unmasked_positions = total;
  if (total == 0) {
    res.empty_mask_warning = true;
    return {nullptr, res};
  }
  Var loss = ag::scale_scalar(ag::add_scalar_list(terms), 1.0 / static_cast<double>(total));
  res.loss = loss->value(0, 0);
  return {loss, res};
}

}  // namespace

LossResult compute_loss(const std::vector<TrainingSample>& batch, const Model& m,
                        const DecodeSupport& support) {
  ag::NoGrad guard;
  return loss_graph(batch, m, support).second;
}

std::pair<LossResult, GradientSet> compute_gradients(const std::vector<TrainingSample>& batch,
                                                     const Model& m,
                                                     const DecodeSupport& support) {
  for (const auto& [name, p] : m.parameters()) p->grad.resize(0, 0);
  auto [loss, res] = loss_graph(batch, m, support);
  if (!res.empty_mask_warning) {
    if (!std::isfinite(res.loss)) throw NumericError("compute_gradients: non-finite loss");
    ag::backward(loss);
  }
  GradientSet grads;
  grads.reserve(m.parameters().size());
  for (const auto& [name, p] : m.parameters()) {
    if (p->grad.size() == 0)
      grads.emplace_back(name, Matrix::Zero(p->value.rows(), p->value.cols()));
    else
      grads.emplace_back(name, p->grad);
  }
  return {res, grads};
}

std::vector<double> fit(Model& m, const std::vector<TrainingSample>& dataset,
                        const Hyperparams& hp, const DecodeSupport& support) {
  if (dataset.empty()) throw ValidationError("train: empty dataset");
  const auto& params = m.parameters();
  std::vector<Matrix> m1(params.size()), m2(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    m1[i] = Matrix::Zero(params[i].second->value.rows(), params[i].second->value.cols());
    m2[i] = m1[i];
  }

  std::mt19937_64 rng(hp.seed);
  std::vector<size_t> order(dataset.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<double> history;
  long step = 0;
  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_nll = 0;
    long epoch_count = 0;
    for (size_t start = 0; start < order.size(); start += hp.batch_size) {
      std::vector<TrainingSample> batch;
      for (size_t i = start; i < std::min(order.size(), start + hp.batch_size); ++i)
        batch.push_back(dataset[order[i]]);
      auto [res, grads] = compute_gradients(batch, m, support);
      if (!std::isfinite(res.loss)) throw NumericError("train: diverged (non-finite loss)");
      epoch_nll += res.loss * static_cast<double>(res.unmasked_positions);
      epoch_count += res.unmasked_positions;
      ++step;
      double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(step));
      double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(step));
      for (size_t i = 0; i < params.size(); ++i) {
        const Matrix& g = grads[i].second;
        m1[i] = hp.beta1 * m1[i] + (1.0 - hp.beta1) * g;
        m2[i] = hp.beta2 * m2[i] + (1.0 - hp.beta2) * g.cwiseProduct(g);
        Matrix mhat = m1[i] / bc1;
        Matrix vhat = m2[i] / bc2;
        params[i].second->value.array() -=
            hp.lr * mhat.array() / (vhat.array().sqrt() + hp.eps);
      }
    }
    history.push_back(epoch_count > 0 ? epoch_nll / static_cast<double>(epoch_count) : 0.0);
  }
  return history;
}

TrainOutcome train(const std::vector<TrainingSample>& dataset, const ModelConfig& config,
                   const Hyperparams& hp, const DecodeSupport& support) {
  TrainOutcome out{Model::init(config), {}};
  out.loss_history = fit(out.model, dataset, hp, support);
  return out;
}

namespace {

void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<char*>(&v), 8); }
uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
void write_i32(std::ostream& os, int32_t v) { os.write(reinterpret_cast<char*>(&v), 4); }
int32_t read_i32(std::istream& is) {
  int32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

}  // namespace

void Model::save(const std::string& path, uint64_t vocab_hash) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
  os.write("SCRD", 4);
  write_i32(os, 1);  // format version
  const int32_t fields[] = {cfg_.hidden_dim, cfg_.num_heads, cfg_.n_v,        cfg_.n_t,
                            cfg_.n_m,        cfg_.n_d,       cfg_.image_size, cfg_.patch_size,
                            cfg_.vocab_size, cfg_.max_input_len, cfg_.max_target_len,
                            cfg_.ffn_dim};
  for (int32_t f : fields) write_i32(os, f);
  write_u64(os, cfg_.seed);
  write_u64(os, vocab_hash);
  write_u64(os, params_.size());
  for (const auto& [name, p] : params_) {
    write_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_i32(os, static_cast<int32_t>(p->value.rows()));
    write_i32(os, static_cast<int32_t>(p->value.cols()));
    os.write(reinterpret_cast<const char*>(p->value.data()),
             static_cast<std::streamsize>(p->value.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

std::pair<Model, uint64_t> Model::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (std::string(magic, 4) != "SCRD") throw std::runtime_error("bad checkpoint magic");
  if (read_i32(is) != 1) throw std::runtime_error("unsupported checkpoint version");
  ModelConfig cfg;
  cfg.hidden_dim = read_i32(is);
  cfg.num_heads = read_i32(is);
  cfg.n_v = read_i32(is);
  cfg.n_t = read_i32(is);
  cfg.n_m = read_i32(is);
  cfg.n_d = read_i32(is);
  cfg.image_size = read_i32(is);
  cfg.patch_size = read_i32(is);
  cfg.vocab_size = read_i32(is);
  cfg.max_input_len = read_i32(is);
  cfg.max_target_len = read_i32(is);
  cfg.ffn_dim = read_i32(is);
  cfg.seed = read_u64(is);
  uint64_t vocab_hash = read_u64(is);
  uint64_t count = read_u64(is);

  Model m = Model::init(cfg);
  if (count != m.params_.size()) throw std::runtime_error("checkpoint parameter count mismatch");
  for (auto& [name, p] : m.params_) {
    uint64_t len = read_u64(is);
    std::string stored(len, '\0');
    is.read(stored.data(), static_cast<std::streamsize>(len));
    if (stored != name) throw std::runtime_error("checkpoint parameter order mismatch");
    int32_t rows = read_i32(is), cols = read_i32(is);
    if (rows != p->value.rows() || cols != p->value.cols())
      throw std::runtime_error("checkpoint parameter shape mismatch");
    is.read(reinterpret_cast<char*>(p->value.data()),
            static_cast<std::streamsize>(p->value.size() * sizeof(double)));
  }
  if (!is) throw std::runtime_error("checkpoint read failed: " + path);
  return {std::move(m), vocab_hash};
}

}  // namespace scord
