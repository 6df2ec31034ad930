#pragma once

// A small pre-LayerNorm transformer encoder classifier whose attention and MLP
// weight matrices carry element-wise gates. The forward pass evaluates
// f(x + delta; m (.) theta) and the backward pass produces gradients for theta,
// the gate values m and the embedding perturbation delta.

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rticket/hardconcrete.hpp"

namespace rticket {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct ModelConfig {
  int vocab_size = 0;
  int embed_dim = 64;
  int num_layers = 2;
  int num_heads = 4;
  int mlp_dim = 128;
  /// Positions available, including the leading [CLS] slot.
  int max_seq_len = 32;
  int num_classes = 2;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class MatrixKind : std::uint8_t { query, key, value, output, mlp_in, mlp_out, other };

std::string_view to_string(MatrixKind kind);
inline constexpr MatrixKind kMaskableKinds[] = {MatrixKind::query,  MatrixKind::key,
                                                MatrixKind::value,  MatrixKind::output,
                                                MatrixKind::mlp_in, MatrixKind::mlp_out};

struct TensorSlot {
  std::string name;
  int rows = 0;
  int cols = 0;  ///< 1 for vectors
  std::size_t offset = 0;
  bool maskable = false;
  int layer = -1;
  MatrixKind kind = MatrixKind::other;
  /// Pretraining-only parameters (the masked-token head) are skipped by task training.
  bool task_parameter = true;

  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

/// A contiguous run of maskable weights: slot `slot` occupies mask positions
/// [mask_offset, mask_offset + size).
struct MaskableBlock {
  std::size_t slot = 0;
  std::size_t theta_offset = 0;
  std::size_t mask_offset = 0;
  std::size_t size = 0;
  int layer = 0;
  MatrixKind kind = MatrixKind::other;
};

/// Flat parameter layout. Every tensor of the model lives at a fixed offset of
/// one contiguous theta vector; the maskable index is the concatenation of the
/// attention and MLP weight matrices in layout order.
class ParamLayout {
 public:
  ParamLayout() = default;
  explicit ParamLayout(const ModelConfig& cfg);

  const std::vector<TensorSlot>& slots() const { return slots_; }
  const TensorSlot& slot(std::string_view name) const;
  std::size_t slot_index(std::string_view name) const;
  std::size_t total() const { return total_; }

  const std::vector<MaskableBlock>& maskable_blocks() const { return blocks_; }
  std::size_t maskable_count() const { return maskable_count_; }
  /// theta offset of maskable element j.
  std::size_t theta_offset_of_mask(std::size_t j) const;

 private:
  std::vector<TensorSlot> slots_;
  std::vector<MaskableBlock> blocks_;
  std::size_t total_ = 0;
  std::size_t maskable_count_ = 0;
};

struct Batch {
  int size = 0;
  int seq_len = 0;
  std::vector<std::int32_t> token_ids;  ///< [size, seq_len] row-major
  std::vector<std::int32_t> labels;     ///< [size]
  std::vector<std::uint8_t> pad_mask;   ///< [size, seq_len], 1 marks padding

  std::int32_t token(int b, int t) const { return token_ids[static_cast<std::size_t>(b * seq_len + t)]; }
  bool is_pad(int b, int t) const { return pad_mask[static_cast<std::size_t>(b * seq_len + t)] != 0; }
  void validate(const ModelConfig& cfg, bool need_labels = true) const;
};

class MaskedModel {
 public:
  MaskedModel() = default;
  /// Fresh random initialization.
  MaskedModel(ModelConfig cfg, std::uint64_t init_seed);
  /// Restore from stored tensors.
  MaskedModel(ModelConfig cfg, std::vector<double> theta, std::optional<std::vector<double>> theta0,
              std::optional<GateParams> gates);

  const ModelConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }

  std::span<double> theta() { return theta_; }
  std::span<const double> theta() const { return theta_; }
  std::span<double> tensor(std::string_view name);
  std::span<const double> tensor(std::string_view name) const;

  bool has_pretrained() const { return theta0_.has_value(); }
  /// Throws StateError when no snapshot has been taken.
  std::span<const double> theta0() const;
  /// theta0 := theta. A second call is a StateError.
  void snapshot_pretrained();
  /// theta := theta0.
  void reset_to_pretrained();

  const std::optional<GateParams>& gates() const { return gates_; }
  void bind_gates(GateParams gates);
  void clear_gates() { gates_.reset(); }

  std::size_t maskable_count() const { return layout_.maskable_count(); }
  /// Values of the maskable weights in maskable-index order.
  std::vector<double> maskable_values() const;

  /// Re-draw every entry of `which` (layout-sized 0/1 selector) from the initial distribution.
  void reinitialize(std::span<const std::uint8_t> which, std::uint64_t seed);

 private:
  ModelConfig cfg_;
  ParamLayout layout_;
  std::vector<double> theta_;
  std::optional<std::vector<double>> theta0_;
  std::optional<GateParams> gates_;
};

/// Draw a full parameter vector from the initialization distribution.
std::vector<double> initial_parameters(const ParamLayout& layout, int embed_dim, int mlp_dim,
                                       std::uint64_t seed);

struct ForwardOptions {
  /// One value in [0,1] per maskable weight; empty means the unmasked model.
  std::span<const double> mask_values;
  /// [batch, seq_len, embed_dim] added to the embedding output; empty means none.
  std::span<const double> perturbation;
  double dropout = 0.0;
  std::uint64_t dropout_seed = 0;
};

struct LayerCache {
  Matrix input;        // residual stream entering the layer
  Matrix ln1_hat;      // normalized (pre-gain) input
  Vector ln1_rstd;
  Matrix ln1_out;
  Matrix q, k, v;
  std::vector<Matrix> attn;  // [batch * heads] row-stochastic T x T
  Matrix attn_concat;
  Matrix drop1;  // keep-scale mask, empty when dropout is off
  Matrix mid;    // residual stream after attention
  Matrix ln2_hat;
  Vector ln2_rstd;
  Matrix ln2_out;
  Matrix pre_act;
  Matrix act;
  Matrix drop2;
};

struct ForwardCache {
  int batch = 0;
  int seq_len = 0;
  std::vector<std::uint8_t> pad_mask;
  std::vector<std::int32_t> tokens;
  bool masked = false;
  std::vector<Matrix> effective;  // per layer: q, k, v, o, in, out effective weights
  std::vector<LayerCache> layers;
  Matrix final_hat;
  Vector final_rstd;
  Matrix hidden;  // [batch * seq_len, embed_dim] after the final LayerNorm
};

struct ForwardResult {
  Matrix logits;  ///< [batch, num_classes]
  ForwardCache cache;
};

ForwardResult forward(const MaskedModel& model, const Batch& batch, const ForwardOptions& opts = {});

/// Class probabilities of the unmasked model; a single forward pass.
Matrix predict_proba(const MaskedModel& model, const Batch& batch);

struct GradRequest {
  bool theta = false;
  bool mask = false;          ///< dL/dm per maskable weight (chain to log alpha with gate_gradients)
  bool perturbation = false;  ///< dL/d delta, identical to dL/d(embedding output)
};

struct LossAndGrads {
  double loss = 0.0;
  Matrix logits;
  std::vector<double> theta;
  std::vector<double> mask;
  std::vector<double> perturbation;
};

/// Mean cross-entropy over the batch and the requested gradients.
LossAndGrads loss_and_grads(const MaskedModel& model, const Batch& batch, const ForwardOptions& opts,
                            GradRequest wanted);

/// Masked-token prediction loss used to produce the pretrained snapshot.
/// `targets` holds the original token id at predicted positions and -1 elsewhere.
LossAndGrads masked_lm_loss_and_grads(const MaskedModel& model, const Batch& inputs,
                                      std::span<const std::int32_t> targets, const ForwardOptions& opts);

/// Mean cross-entropy and gradient w.r.t. logits.
double cross_entropy(const Matrix& logits, std::span<const std::int32_t> labels, Matrix* dlogits);

/// 64-bit FNV-1a over the IEEE-754 bit patterns of a parameter vector.
std::uint64_t checksum(std::span<const double> values);

}  // namespace rticket
