#include "rticket/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "rticket/errors.hpp"
#include "rticket/rng.hpp"

namespace rticket {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr int kQuery = 0, kKey = 1, kValue = 2, kOutput = 3, kMlpIn = 4, kMlpOut = 5;

using ConstMap = Eigen::Map<const Matrix>;
using MutMap = Eigen::Map<Matrix>;
using ConstVecMap = Eigen::Map<const Eigen::RowVectorXd>;
using MutVecMap = Eigen::Map<Eigen::RowVectorXd>;

std::string layer_name(int l, std::string_view rest) {
  return "layer" + std::to_string(l) + "." + std::string(rest);
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 1 || embed_dim < 1 || num_layers < 1 || num_heads < 1 || mlp_dim < 1 ||
      max_seq_len < 1 || num_classes < 1) {
    throw ConfigError("model dimensions must all be >= 1");
  }
  if (embed_dim % num_heads != 0) {
    throw ConfigError("embed_dim (" + std::to_string(embed_dim) + ") must be divisible by num_heads (" +
                      std::to_string(num_heads) + ")");
  }
}

std::string_view to_string(MatrixKind kind) {
  switch (kind) {
    case MatrixKind::query: return "query";
    case MatrixKind::key: return "key";
    case MatrixKind::value: return "value";
    case MatrixKind::output: return "output";
    case MatrixKind::mlp_in: return "mlp_in";
    case MatrixKind::mlp_out: return "mlp_out";
    case MatrixKind::other: return "other";
  }
  return "other";
}

ParamLayout::ParamLayout(const ModelConfig& cfg) {
  cfg.validate();
  const int d = cfg.embed_dim;
  auto add = [this](std::string name, int rows, int cols, int layer = -1,
                    MatrixKind kind = MatrixKind::other, bool task = true) {
    TensorSlot s;
    s.name = std::move(name);
    s.rows = rows;
    s.cols = cols;
    s.offset = total_;
    s.layer = layer;
    s.kind = kind;
    s.maskable = kind != MatrixKind::other;
    s.task_parameter = task;
    total_ += s.size();
    if (s.maskable) {
      blocks_.push_back({slots_.size(), s.offset, maskable_count_, s.size(), layer, kind});
      maskable_count_ += s.size();
    }
    slots_.push_back(std::move(s));
  };
  add("embed.token", cfg.vocab_size, d);
  add("embed.position", cfg.max_seq_len, d);
  for (int l = 0; l < cfg.num_layers; ++l) {
    add(layer_name(l, "ln1.gain"), 1, d);
    add(layer_name(l, "ln1.bias"), 1, d);
    add(layer_name(l, "attn.query.weight"), d, d, l, MatrixKind::query);
    add(layer_name(l, "attn.query.bias"), 1, d);
    add(layer_name(l, "attn.key.weight"), d, d, l, MatrixKind::key);
    add(layer_name(l, "attn.key.bias"), 1, d);
    add(layer_name(l, "attn.value.weight"), d, d, l, MatrixKind::value);
    add(layer_name(l, "attn.value.bias"), 1, d);
    add(layer_name(l, "attn.output.weight"), d, d, l, MatrixKind::output);
    add(layer_name(l, "attn.output.bias"), 1, d);
    add(layer_name(l, "ln2.gain"), 1, d);
    add(layer_name(l, "ln2.bias"), 1, d);
    add(layer_name(l, "mlp.in.weight"), d, cfg.mlp_dim, l, MatrixKind::mlp_in);
    add(layer_name(l, "mlp.in.bias"), 1, cfg.mlp_dim);
    add(layer_name(l, "mlp.out.weight"), cfg.mlp_dim, d, l, MatrixKind::mlp_out);
    add(layer_name(l, "mlp.out.bias"), 1, d);
  }
  add("final_ln.gain", 1, d);
  add("final_ln.bias", 1, d);
  add("classifier.weight", d, cfg.num_classes);
  add("classifier.bias", 1, cfg.num_classes);
  add("mlm.weight", d, cfg.vocab_size, -1, MatrixKind::other, false);
  add("mlm.bias", 1, cfg.vocab_size, -1, MatrixKind::other, false);
}

std::size_t ParamLayout::slot_index(std::string_view name) const {
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    if (slots_[i].name == name) {
      return i;
    }
  }
  throw ContractViolation("unknown parameter tensor '" + std::string(name) + "'");
}

const TensorSlot& ParamLayout::slot(std::string_view name) const { return slots_[slot_index(name)]; }

std::size_t ParamLayout::theta_offset_of_mask(std::size_t j) const {
  for (const auto& b : blocks_) {
    if (j < b.mask_offset + b.size) {
      return b.theta_offset + (j - b.mask_offset);
    }
  }
  throw ContractViolation("maskable index out of range");
}

void Batch::validate(const ModelConfig& cfg, bool need_labels) const {
  const auto cells = static_cast<std::size_t>(size) * static_cast<std::size_t>(seq_len);
  if (size < 1 || seq_len < 1 || token_ids.size() != cells || pad_mask.size() != cells) {
    throw ContractViolation("batch token/pad arrays do not match [size, seq_len]");
  }
  if (seq_len > cfg.max_seq_len) {
    throw ContractViolation("batch sequence length exceeds max_seq_len");
  }
  for (auto id : token_ids) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw ContractViolation("token id " + std::to_string(id) + " outside vocabulary");
    }
  }
  for (int b = 0; b < size; ++b) {
    if (is_pad(b, 0)) {
      throw ContractViolation("position 0 of every example must be a real token");
    }
  }
  if (need_labels) {
    if (labels.size() != static_cast<std::size_t>(size)) {
      throw ContractViolation("label count does not match batch size");
    }
    for (auto y : labels) {
      if (y < 0 || y >= cfg.num_classes) {
        throw ContractViolation("label " + std::to_string(y) + " outside class range");
      }
    }
  }
}

std::vector<double> initial_parameters(const ParamLayout& layout, int embed_dim, int mlp_dim,
                                       std::uint64_t seed) {
  std::vector<double> theta(layout.total(), 0.0);
  for (std::size_t i = 0; i < layout.slots().size(); ++i) {
    const auto& s = layout.slots()[i];
    Rng rng(derive_seed(seed, i));
    auto* p = theta.data() + s.offset;
    const bool is_gain = s.name.ends_with(".gain");
    const bool is_bias = s.name.ends_with(".bias");
    double stddev = 0.0;
    if (s.name.starts_with("embed.")) {
      stddev = 0.1;
    } else if (s.kind == MatrixKind::mlp_out) {
      stddev = 1.0 / std::sqrt(static_cast<double>(mlp_dim));
    } else if (!is_gain && !is_bias) {
      stddev = 1.0 / std::sqrt(static_cast<double>(embed_dim));
    }
    for (std::size_t k = 0; k < s.size(); ++k) {
      p[k] = is_gain ? 1.0 : (is_bias ? 0.0 : rng.normal(0.0, stddev));
    }
  }
  return theta;
}

MaskedModel::MaskedModel(ModelConfig cfg, std::uint64_t init_seed) : cfg_(cfg), layout_(cfg) {
  theta_ = initial_parameters(layout_, cfg_.embed_dim, cfg_.mlp_dim, init_seed);
}

MaskedModel::MaskedModel(ModelConfig cfg, std::vector<double> theta,
                         std::optional<std::vector<double>> theta0, std::optional<GateParams> gates)
    : cfg_(cfg), layout_(cfg), theta_(std::move(theta)), theta0_(std::move(theta0)) {
  if (theta_.size() != layout_.total()) {
    throw ContractViolation("parameter vector size does not match the model layout");
  }
  if (theta0_ && theta0_->size() != layout_.total()) {
    throw ContractViolation("pretrained snapshot size does not match the model layout");
  }
  if (gates) {
    bind_gates(std::move(*gates));
  }
}

std::span<double> MaskedModel::tensor(std::string_view name) {
  const auto& s = layout_.slot(name);
  return std::span<double>(theta_).subspan(s.offset, s.size());
}

std::span<const double> MaskedModel::tensor(std::string_view name) const {
  const auto& s = layout_.slot(name);
  return std::span<const double>(theta_).subspan(s.offset, s.size());
}

std::span<const double> MaskedModel::theta0() const {
  if (!theta0_) {
    throw StateError("no pretrained snapshot: run the pretrain stage first");
  }
  return *theta0_;
}

void MaskedModel::snapshot_pretrained() {
  if (theta0_) {
    throw StateError("pretrained snapshot already taken");
  }
  theta0_ = theta_;
}

void MaskedModel::reset_to_pretrained() {
  const auto snap = theta0();
  std::copy(snap.begin(), snap.end(), theta_.begin());
}

void MaskedModel::bind_gates(GateParams gates) {
  if (gates.size() != layout_.maskable_count()) {
    throw ContractViolation("gate count " + std::to_string(gates.size()) +
                            " does not match maskable weight count " +
                            std::to_string(layout_.maskable_count()));
  }
  gates_ = std::move(gates);
}

std::vector<double> MaskedModel::maskable_values() const {
  std::vector<double> out(layout_.maskable_count());
  for (const auto& b : layout_.maskable_blocks()) {
    std::copy_n(theta_.begin() + static_cast<std::ptrdiff_t>(b.theta_offset), b.size,
                out.begin() + static_cast<std::ptrdiff_t>(b.mask_offset));
  }
  return out;
}

void MaskedModel::reinitialize(std::span<const std::uint8_t> which, std::uint64_t seed) {
  if (which.size() != theta_.size()) {
    throw ContractViolation("reinitialize selector does not match the parameter count");
  }
  const auto fresh = initial_parameters(layout_, cfg_.embed_dim, cfg_.mlp_dim, seed);
  for (std::size_t i = 0; i < theta_.size(); ++i) {
    if (which[i] != 0) {
      theta_[i] = fresh[i];
    }
  }
}

// ---------------------------------------------------------------------------
// forward / backward

namespace {

struct Gelu {
  static constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  static constexpr double kA = 0.044715;
  static double value(double x) {
    const double t = std::tanh(kC * (x + kA * x * x * x));
    return 0.5 * x * (1.0 + t);
  }
  static double derivative(double x) {
    const double t = std::tanh(kC * (x + kA * x * x * x));
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * x * x);
  }
};

void layer_norm(const Matrix& x, ConstVecMap gain, ConstVecMap bias, Matrix& hat, Vector& rstd,
                Matrix& out) {
  const auto n = x.rows();
  const auto d = static_cast<double>(x.cols());
  hat.resize(x.rows(), x.cols());
  rstd.resize(n);
  out.resize(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mean = x.row(r).sum() / d;
    const double var = (x.row(r).array() - mean).square().sum() / d;
    const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd(r) = rs;
    hat.row(r) = (x.row(r).array() - mean) * rs;
    out.row(r) = hat.row(r).array() * gain.array() + bias.array();
  }
}

// Accumulates gain/bias gradients and returns dx.
Matrix layer_norm_backward(const Matrix& dy, const Matrix& hat, const Vector& rstd, ConstVecMap gain,
                           double* dgain, double* dbias) {
  const auto cols = dy.cols();
  if (dgain != nullptr) {
    MutVecMap(dgain, cols) += (dy.array() * hat.array()).colwise().sum().matrix();
    MutVecMap(dbias, cols) += dy.colwise().sum();
  }
  Matrix dx(dy.rows(), cols);
  const double d = static_cast<double>(cols);
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const Eigen::RowVectorXd dhat = dy.row(r).array() * gain.array();
    const double mean_dhat = dhat.sum() / d;
    const double mean_dhat_hat = dhat.dot(hat.row(r)) / d;
    dx.row(r) = rstd(r) * (dhat.array() - mean_dhat - hat.row(r).array() * mean_dhat_hat);
  }
  return dx;
}

Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  Matrix mask(rows, cols);
  const double keep = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = rng.uniform() < p ? 0.0 : keep;
  }
  return mask;
}

struct Views {
  const ModelConfig& cfg;
  const ParamLayout& layout;
  std::span<const double> theta;

  ConstMap mat(std::string_view name) const {
    const auto& s = layout.slot(name);
    return ConstMap(theta.data() + s.offset, s.rows, s.cols);
  }
  ConstVecMap vec(std::string_view name) const {
    const auto& s = layout.slot(name);
    return ConstVecMap(theta.data() + s.offset, static_cast<Eigen::Index>(s.size()));
  }
};

constexpr std::string_view kWeightNames[6] = {"attn.query.weight", "attn.key.weight",
                                              "attn.value.weight", "attn.output.weight",
                                              "mlp.in.weight",     "mlp.out.weight"};
constexpr std::string_view kBiasNames[6] = {"attn.query.bias", "attn.key.bias", "attn.value.bias",
                                            "attn.output.bias", "mlp.in.bias", "mlp.out.bias"};

}  // namespace

ForwardResult forward(const MaskedModel& model, const Batch& batch, const ForwardOptions& opts) {
  const auto& cfg = model.config();
  const auto& layout = model.layout();
  batch.validate(cfg, false);
  if (!opts.mask_values.empty() && opts.mask_values.size() != layout.maskable_count()) {
    throw ContractViolation("mask_values must hold one value per maskable weight");
  }
  const int B = batch.size;
  const int T = batch.seq_len;
  const int D = cfg.embed_dim;
  const int H = cfg.num_heads;
  const int hd = D / H;
  const Eigen::Index N = static_cast<Eigen::Index>(B) * T;
  if (!opts.perturbation.empty() && opts.perturbation.size() != static_cast<std::size_t>(N * D)) {
    throw ContractViolation("perturbation must match the embedding output shape [batch, seq, embed]");
  }
  if (opts.dropout < 0.0 || opts.dropout >= 1.0) {
    throw ContractViolation("dropout probability must lie in [0,1)");
  }
  const Views w{cfg, layout, model.theta()};
  Rng drop_rng(opts.dropout_seed);

  ForwardResult result;
  auto& cache = result.cache;
  cache.batch = B;
  cache.seq_len = T;
  cache.pad_mask = batch.pad_mask;
  cache.tokens = batch.token_ids;
  cache.masked = !opts.mask_values.empty();

  // effective weights m (.) theta
  cache.effective.reserve(static_cast<std::size_t>(cfg.num_layers) * 6);
  for (int l = 0; l < cfg.num_layers; ++l) {
    for (int k = 0; k < 6; ++k) {
      const auto name = layer_name(l, kWeightNames[k]);
      const auto& slot = layout.slot(name);
      Matrix eff = w.mat(name);
      if (cache.masked) {
        const auto idx = layout.slot_index(name);
        const auto& block = *std::find_if(layout.maskable_blocks().begin(), layout.maskable_blocks().end(),
                                          [idx](const MaskableBlock& b) { return b.slot == idx; });
        eff.array() *= ConstMap(opts.mask_values.data() + block.mask_offset, slot.rows, slot.cols).array();
      }
      cache.effective.push_back(std::move(eff));
    }
  }

  Matrix h(N, D);
  {
    const auto tok = w.mat("embed.token");
    const auto pos = w.mat("embed.position");
    for (int b = 0; b < B; ++b) {
      for (int t = 0; t < T; ++t) {
        h.row(b * T + t) = tok.row(batch.token(b, t)) + pos.row(t);
      }
    }
    if (!opts.perturbation.empty()) {
      h += ConstMap(opts.perturbation.data(), N, D);
    }
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  cache.layers.resize(static_cast<std::size_t>(cfg.num_layers));
  for (int l = 0; l < cfg.num_layers; ++l) {
    auto& lc = cache.layers[static_cast<std::size_t>(l)];
    const Matrix* eff = &cache.effective[static_cast<std::size_t>(l) * 6];
    lc.input = h;
    layer_norm(h, w.vec(layer_name(l, "ln1.gain")), w.vec(layer_name(l, "ln1.bias")), lc.ln1_hat,
               lc.ln1_rstd, lc.ln1_out);
    lc.q.noalias() = lc.ln1_out * eff[kQuery];
    lc.q.rowwise() += w.vec(layer_name(l, kBiasNames[kQuery]));
    lc.k.noalias() = lc.ln1_out * eff[kKey];
    lc.k.rowwise() += w.vec(layer_name(l, kBiasNames[kKey]));
    lc.v.noalias() = lc.ln1_out * eff[kValue];
    lc.v.rowwise() += w.vec(layer_name(l, kBiasNames[kValue]));

    lc.attn.resize(static_cast<std::size_t>(B) * H);
    lc.attn_concat.resize(N, D);
    for (int b = 0; b < B; ++b) {
      for (int hh = 0; hh < H; ++hh) {
        const auto qb = lc.q.block(b * T, hh * hd, T, hd);
        const auto kb = lc.k.block(b * T, hh * hd, T, hd);
        const auto vb = lc.v.block(b * T, hh * hd, T, hd);
        Matrix s = (qb * kb.transpose()) * scale;
        for (int i = 0; i < T; ++i) {
          double mx = -std::numeric_limits<double>::infinity();
          for (int j = 0; j < T; ++j) {
            if (!batch.is_pad(b, j)) {
              mx = std::max(mx, s(i, j));
            }
          }
          double z = 0.0;
          for (int j = 0; j < T; ++j) {
            const double e = batch.is_pad(b, j) ? 0.0 : std::exp(s(i, j) - mx);
            s(i, j) = e;
            z += e;
          }
          s.row(i) /= z;
        }
        lc.attn_concat.block(b * T, hh * hd, T, hd).noalias() = s * vb;
        lc.attn[static_cast<std::size_t>(b * H + hh)] = std::move(s);
      }
    }
    Matrix y = lc.attn_concat * eff[kOutput];
    y.rowwise() += w.vec(layer_name(l, kBiasNames[kOutput]));
    if (opts.dropout > 0.0) {
      lc.drop1 = dropout_mask(N, D, opts.dropout, drop_rng);
      y.array() *= lc.drop1.array();
    }
    lc.mid = h + y;

    layer_norm(lc.mid, w.vec(layer_name(l, "ln2.gain")), w.vec(layer_name(l, "ln2.bias")), lc.ln2_hat,
               lc.ln2_rstd, lc.ln2_out);
    lc.pre_act.noalias() = lc.ln2_out * eff[kMlpIn];
    lc.pre_act.rowwise() += w.vec(layer_name(l, kBiasNames[kMlpIn]));
    lc.act = lc.pre_act.unaryExpr([](double x) { return Gelu::value(x); });
    Matrix z = lc.act * eff[kMlpOut];
    z.rowwise() += w.vec(layer_name(l, kBiasNames[kMlpOut]));
    if (opts.dropout > 0.0) {
      lc.drop2 = dropout_mask(N, D, opts.dropout, drop_rng);
      z.array() *= lc.drop2.array();
    }
    h = lc.mid + z;
  }
  layer_norm(h, w.vec("final_ln.gain"), w.vec("final_ln.bias"), cache.final_hat, cache.final_rstd,
             cache.hidden);

  const auto head = w.mat("classifier.weight");
  const auto head_bias = w.vec("classifier.bias");
  result.logits.resize(B, cfg.num_classes);
  for (int b = 0; b < B; ++b) {
    result.logits.row(b) = cache.hidden.row(b * T) * head + head_bias;
  }
  return result;
}

Matrix predict_proba(const MaskedModel& model, const Batch& batch) {
  Matrix logits = forward(model, batch).logits;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    logits.row(r) = (logits.row(r).array() - mx).exp();
    logits.row(r) /= logits.row(r).sum();
  }
  return logits;
}

double cross_entropy(const Matrix& logits, std::span<const std::int32_t> labels, Matrix* dlogits) {
  const auto n = logits.rows();
  if (static_cast<std::size_t>(n) != labels.size()) {
    throw ContractViolation("label count does not match logits rows");
  }
  if (dlogits != nullptr) {
    dlogits->resize(logits.rows(), logits.cols());
  }
  double loss = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mx = logits.row(r).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(r).array() - mx).exp();
    const double z = e.sum();
    const auto y = labels[static_cast<std::size_t>(r)];
    loss += std::log(z) + mx - logits(r, y);
    if (dlogits != nullptr) {
      dlogits->row(r) = e / z;
      (*dlogits)(r, y) -= 1.0;
    }
  }
  if (dlogits != nullptr) {
    *dlogits /= static_cast<double>(n);
  }
  return loss / static_cast<double>(n);
}

namespace {

// Backpropagates d(hidden) through the encoder stack.
void encoder_backward(const MaskedModel& model, const ForwardCache& cache, Matrix dh,
                      std::span<const double> mask_values, GradRequest wanted, LossAndGrads& out) {
  const auto& cfg = model.config();
  const auto& layout = model.layout();
  const Views w{cfg, layout, model.theta()};
  const int B = cache.batch;
  const int T = cache.seq_len;
  const int D = cfg.embed_dim;
  const int H = cfg.num_heads;
  const int hd = D / H;
  const Eigen::Index N = static_cast<Eigen::Index>(B) * T;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  double* g = wanted.theta ? out.theta.data() : nullptr;
  auto grad_ptr = [&](std::string_view name) -> double* {
    return g == nullptr ? nullptr : g + layout.slot(name).offset;
  };

  // Routes d(effective weight) to theta and/or mask gradients.
  auto weight_grad = [&](int l, int k, const Matrix& d_eff) {
    const auto name = layer_name(l, kWeightNames[k]);
    const auto idx = layout.slot_index(name);
    const auto& slot = layout.slots()[idx];
    const MaskableBlock* block = nullptr;
    for (const auto& b : layout.maskable_blocks()) {
      if (b.slot == idx) {
        block = &b;
      }
    }
    if (g != nullptr) {
      MutMap dst(g + slot.offset, slot.rows, slot.cols);
      if (cache.masked) {
        dst.array() += d_eff.array() * ConstMap(mask_values.data() + block->mask_offset, slot.rows, slot.cols).array();
      } else {
        dst += d_eff;
      }
    }
    if (wanted.mask) {
      MutMap(out.mask.data() + block->mask_offset, slot.rows, slot.cols).array() +=
          d_eff.array() * w.mat(name).array();
    }
  };

  dh = layer_norm_backward(dh, cache.final_hat, cache.final_rstd, w.vec("final_ln.gain"),
                           grad_ptr("final_ln.gain"), grad_ptr("final_ln.bias"));

  for (int l = cfg.num_layers - 1; l >= 0; --l) {
    const auto& lc = cache.layers[static_cast<std::size_t>(l)];
    const Matrix* eff = &cache.effective[static_cast<std::size_t>(l) * 6];

    // MLP branch
    Matrix dz = dh;
    if (lc.drop2.size() != 0) {
      dz.array() *= lc.drop2.array();
    }
    weight_grad(l, kMlpOut, lc.act.transpose() * dz);
    Matrix du = (dz * eff[kMlpOut].transpose()).array() *
                lc.pre_act.unaryExpr([](double x) { return Gelu::derivative(x); }).array();
    if (g != nullptr) {
      MutVecMap(grad_ptr(layer_name(l, kBiasNames[kMlpOut])), D) += dz.colwise().sum();
      MutVecMap(grad_ptr(layer_name(l, kBiasNames[kMlpIn])), cfg.mlp_dim) += du.colwise().sum();
    }
    weight_grad(l, kMlpIn, lc.ln2_out.transpose() * du);
    Matrix dln2 = du * eff[kMlpIn].transpose();
    Matrix dmid = dh + layer_norm_backward(dln2, lc.ln2_hat, lc.ln2_rstd, w.vec(layer_name(l, "ln2.gain")),
                                           grad_ptr(layer_name(l, "ln2.gain")),
                                           grad_ptr(layer_name(l, "ln2.bias")));

    // attention branch
    Matrix dy = dmid;
    if (lc.drop1.size() != 0) {
      dy.array() *= lc.drop1.array();
    }
    if (g != nullptr) {
      MutVecMap(grad_ptr(layer_name(l, kBiasNames[kOutput])), D) += dy.colwise().sum();
    }
    weight_grad(l, kOutput, lc.attn_concat.transpose() * dy);
    const Matrix dconcat = dy * eff[kOutput].transpose();
    Matrix dq = Matrix::Zero(N, D);
    Matrix dk = Matrix::Zero(N, D);
    Matrix dv = Matrix::Zero(N, D);
    for (int b = 0; b < B; ++b) {
      for (int hh = 0; hh < H; ++hh) {
        const auto& p = lc.attn[static_cast<std::size_t>(b * H + hh)];
        const auto d_o = dconcat.block(b * T, hh * hd, T, hd);
        const auto qb = lc.q.block(b * T, hh * hd, T, hd);
        const auto kb = lc.k.block(b * T, hh * hd, T, hd);
        const auto vb = lc.v.block(b * T, hh * hd, T, hd);
        const Matrix dp = d_o * vb.transpose();
        dv.block(b * T, hh * hd, T, hd).noalias() += p.transpose() * d_o;
        Matrix ds = p.array() * (dp.colwise() - (dp.array() * p.array()).rowwise().sum().matrix()).array();
        ds *= scale;
        dq.block(b * T, hh * hd, T, hd).noalias() += ds * kb;
        dk.block(b * T, hh * hd, T, hd).noalias() += ds.transpose() * qb;
      }
    }
    if (g != nullptr) {
      MutVecMap(grad_ptr(layer_name(l, kBiasNames[kQuery])), D) += dq.colwise().sum();
      MutVecMap(grad_ptr(layer_name(l, kBiasNames[kKey])), D) += dk.colwise().sum();
      MutVecMap(grad_ptr(layer_name(l, kBiasNames[kValue])), D) += dv.colwise().sum();
    }
    const Matrix ln1t = lc.ln1_out.transpose();
    weight_grad(l, kQuery, ln1t * dq);
    weight_grad(l, kKey, ln1t * dk);
    weight_grad(l, kValue, ln1t * dv);
    Matrix dln1 = dq * eff[kQuery].transpose();
    dln1.noalias() += dk * eff[kKey].transpose();
    dln1.noalias() += dv * eff[kValue].transpose();
    dh = dmid + layer_norm_backward(dln1, lc.ln1_hat, lc.ln1_rstd, w.vec(layer_name(l, "ln1.gain")),
                                    grad_ptr(layer_name(l, "ln1.gain")), grad_ptr(layer_name(l, "ln1.bias")));
  }

  // dh is now d(embedding output) = d(delta)
  if (wanted.perturbation) {
    out.perturbation.assign(dh.data(), dh.data() + dh.size());
  }
  if (g != nullptr) {
    MutMap dtok(grad_ptr("embed.token"), cfg.vocab_size, D);
    MutMap dpos(grad_ptr("embed.position"), cfg.max_seq_len, D);
    for (int b = 0; b < B; ++b) {
      for (int t = 0; t < T; ++t) {
        const auto row = b * T + t;
        dtok.row(cache.tokens[static_cast<std::size_t>(row)]) += dh.row(row);
        dpos.row(t) += dh.row(row);
      }
    }
  }
}

void prepare_outputs(const MaskedModel& model, const ForwardOptions& opts, GradRequest wanted,
                     LossAndGrads& out) {
  if (wanted.mask && opts.mask_values.empty()) {
    throw ContractViolation("gate gradients requested but no mask values were supplied");
  }
  if (wanted.theta) {
    out.theta.assign(model.layout().total(), 0.0);
  }
  if (wanted.mask) {
    out.mask.assign(model.layout().maskable_count(), 0.0);
  }
}

}  // namespace

LossAndGrads loss_and_grads(const MaskedModel& model, const Batch& batch, const ForwardOptions& opts,
                            GradRequest wanted) {
  batch.validate(model.config(), true);
  LossAndGrads out;
  prepare_outputs(model, opts, wanted, out);
  auto fw = forward(model, batch, opts);
  Matrix dlogits;
  out.loss = cross_entropy(fw.logits, batch.labels, &dlogits);
  out.logits = std::move(fw.logits);
  if (!wanted.theta && !wanted.mask && !wanted.perturbation) {
    return out;
  }
  const auto& cfg = model.config();
  const Views w{cfg, model.layout(), model.theta()};
  const int T = batch.seq_len;
  const auto head = w.mat("classifier.weight");
  Matrix dh = Matrix::Zero(static_cast<Eigen::Index>(batch.size) * T, cfg.embed_dim);
  for (int b = 0; b < batch.size; ++b) {
    dh.row(b * T) = dlogits.row(b) * head.transpose();
  }
  if (wanted.theta) {
    const auto& ws = model.layout().slot("classifier.weight");
    MutMap dw(out.theta.data() + ws.offset, ws.rows, ws.cols);
    for (int b = 0; b < batch.size; ++b) {
      dw.noalias() += fw.cache.hidden.row(b * T).transpose() * dlogits.row(b);
    }
    MutVecMap(out.theta.data() + model.layout().slot("classifier.bias").offset, cfg.num_classes) +=
        dlogits.colwise().sum();
  }
  encoder_backward(model, fw.cache, std::move(dh), opts.mask_values, wanted, out);
  return out;
}

LossAndGrads masked_lm_loss_and_grads(const MaskedModel& model, const Batch& inputs,
                                      std::span<const std::int32_t> targets, const ForwardOptions& opts) {
  const auto& cfg = model.config();
  inputs.validate(cfg, false);
  if (targets.size() != inputs.token_ids.size()) {
    throw ContractViolation("masked-LM targets must cover every position");
  }
  LossAndGrads out;
  GradRequest wanted{.theta = true};
  prepare_outputs(model, opts, wanted, out);
  auto fw = forward(model, inputs, opts);
  const Views w{cfg, model.layout(), model.theta()};
  const auto mlm_w = w.mat("mlm.weight");
  const auto mlm_b = w.vec("mlm.bias");

  std::vector<Eigen::Index> rows;
  std::vector<std::int32_t> labels;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= 0) {
      rows.push_back(static_cast<Eigen::Index>(i));
      labels.push_back(targets[i]);
    }
  }
  const auto n = static_cast<Eigen::Index>(rows.size());
  Matrix dh = Matrix::Zero(fw.cache.hidden.rows(), cfg.embed_dim);
  if (n == 0) {
    return out;
  }
  Matrix hsel(n, cfg.embed_dim);
  for (Eigen::Index r = 0; r < n; ++r) {
    hsel.row(r) = fw.cache.hidden.row(rows[static_cast<std::size_t>(r)]);
  }
  Matrix logits = hsel * mlm_w;
  logits.rowwise() += mlm_b;
  Matrix dlogits;
  out.loss = cross_entropy(logits, labels, &dlogits);
  const auto& ws = model.layout().slot("mlm.weight");
  MutMap(out.theta.data() + ws.offset, ws.rows, ws.cols).noalias() += hsel.transpose() * dlogits;
  MutVecMap(out.theta.data() + model.layout().slot("mlm.bias").offset, cfg.vocab_size) +=
      dlogits.colwise().sum();
  const Matrix dsel = dlogits * mlm_w.transpose();
  for (Eigen::Index r = 0; r < n; ++r) {
    dh.row(rows[static_cast<std::size_t>(r)]) += dsel.row(r);
  }
  encoder_backward(model, fw.cache, std::move(dh), opts.mask_values, wanted, out);
  return out;
}

std::uint64_t checksum(std::span<const double> values) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : values) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xFFU;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace rticket
