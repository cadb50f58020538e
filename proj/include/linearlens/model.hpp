#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "linearlens/linalg.hpp"
#include "linearlens/linearity.hpp"
#include "linearlens/matrix.hpp"

namespace linearlens {

struct ModelConfig {
  std::size_t vocab_size = 259;
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_seq_len = 64;
  double dropout = 0.0;  // only 0 is supported: the decoder is deterministic
  bool pre_norm = true;
  double init_std = 0.02;

  /// Throws kInvalidArgument when counts are zero, d_model % n_heads != 0 or dropout != 0.
  void validate() const;
  std::size_t head_dim() const noexcept { return d_model / n_heads; }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

enum class BlockKind {
  kTransformer,  // attention + MLP with residual connections
  kIdentity,     // dropped block: the residual stream passes through
  kAffine,       // linear replacement: h ↦ h·W + b
};

std::string_view to_string(BlockKind kind);
BlockKind block_kind_from_string(std::string_view s);

/// A named slice of the flat parameter vector.
struct TensorSlot {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool trainable = true;
  std::size_t size() const noexcept { return rows * cols; }
};

/// Indices into DecoderModel::tensors() for one block; unused entries are kNone.
struct BlockTensors {
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);
  std::size_t ln1_g = kNone, ln1_b = kNone, qkv_w = kNone, qkv_b = kNone, out_w = kNone, out_b = kNone;
  std::size_t ln2_g = kNone, ln2_b = kNone, fc_w = kNone, fc_b = kNone, proj_w = kNone, proj_b = kNone;
  std::size_t affine_w = kNone, affine_b = kNone;
};

/// Token ids (batch × seq, row-major), a padding mask and optional class labels.
struct TrainBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> tokens;
  std::vector<unsigned char> mask;  // 1 = real token
  std::vector<int> labels;          // per sequence, classification only

  std::size_t positions() const noexcept { return batch * seq; }
  /// Token and mask sizes, mask values, sequence length and label values.
  void validate(std::size_t vocab_size, std::size_t max_seq_len) const;
  static TrainBatch from_sequences(const std::vector<std::vector<std::int32_t>>& seqs, std::int32_t pad);
};

/// Tiny decoder-only transformer. Parameters live in one flat vector so the
/// optimizer, gradient checks and checkpoints can treat them uniformly.
class DecoderModel {
 public:
  DecoderModel() = default;
  /// Random init: N(0, init_std) for weights, output projections scaled by
  /// 1/sqrt(2·n_layers), unit norms and zero biases.
  DecoderModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  std::size_t n_layers() const noexcept { return kinds_.size(); }
  BlockKind block_kind(std::size_t b) const { return kinds_.at(b); }
  const std::vector<BlockKind>& block_kinds() const noexcept { return kinds_; }

  std::span<double> parameters() noexcept { return params_; }
  std::span<const double> parameters() const noexcept { return params_; }
  std::size_t parameter_count() const noexcept { return params_.size(); }
  const std::vector<TensorSlot>& tensors() const noexcept { return tensors_; }
  std::size_t tensor_index(std::string_view name) const;
  std::span<double> tensor(std::size_t index);
  std::span<const double> tensor(std::size_t index) const;
  std::span<double> tensor(std::string_view name) { return tensor(tensor_index(name)); }
  std::span<const double> tensor(std::string_view name) const { return tensor(tensor_index(name)); }

  const BlockTensors& block_tensors(std::size_t b) const { return blocks_.at(b); }
  std::size_t wte() const noexcept { return wte_; }
  std::size_t wpe() const noexcept { return wpe_; }
  std::size_t lnf_g() const noexcept { return lnf_g_; }
  std::size_t lnf_b() const noexcept { return lnf_b_; }
  std::size_t head_w() const noexcept { return head_w_; }

  std::uint64_t step() const noexcept { return step_; }
  void set_step(std::uint64_t s) noexcept { step_ = s; }

  /// Replaces block b by the pass-through identity.
  void set_identity(std::size_t b);
  /// Replaces block b by an affine map on the residual stream.
  void set_affine(std::size_t b, const LinearMap& map);
  /// Forces the attention and MLP output projections of block b to zero, so
  /// the block adds exactly nothing to the residual stream.
  void zero_block_output(std::size_t b);
  /// Marks every tensor trainable (true) or only replacement tensors (false).
  void set_trainable_all(bool all);
  void set_trainable(std::size_t index, bool trainable) { tensors_.at(index).trainable = trainable; }
  std::size_t trainable_count() const noexcept;

  /// Rebuilds the layout for the given block kinds and copies every tensor whose
  /// name and shape survive. New affine blocks start as the identity map.
  void relayout(const std::vector<BlockKind>& kinds);

  bool all_finite() const noexcept;

 private:
  void build_layout(const std::vector<BlockKind>& kinds);
  std::size_t add(std::string name, std::size_t rows, std::size_t cols);

  ModelConfig config_;
  std::vector<BlockKind> kinds_;
  std::vector<TensorSlot> tensors_;
  std::vector<BlockTensors> blocks_;
  std::size_t wte_ = 0, wpe_ = 0, lnf_g_ = 0, lnf_b_ = 0, head_w_ = 0;
  std::vector<double> params_;
  std::uint64_t step_ = 0;
};

/// Activations kept from a forward pass for the backward pass.
struct BlockCache {
  Matrix attn_in, qkv, attn, mid_pre, mid, mlp_in, fc_pre, fc_act, out_pre;
  std::vector<double> probs;
  std::vector<double> ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;
};

struct ForwardCache {
  std::size_t batch = 0, seq = 0;
  std::vector<std::int32_t> tokens;
  std::vector<unsigned char> mask;
  std::vector<Matrix> stream;  // residual stream h_0..h_L, each (batch*seq) × d
  std::vector<BlockCache> blocks;
  Matrix lnf_out;
  std::vector<double> lnf_mean, lnf_rstd;
  Matrix logits;  // (batch*seq) × vocab; empty when the head was skipped

  std::size_t positions() const noexcept { return batch * seq; }
  /// Row indices of non-padding positions, in (sequence, position) order.
  std::vector<std::size_t> valid_rows() const;
  /// The residual stream gathered over non-padding positions.
  EmbeddingTrace trace() const;
};

struct ForwardOptions {
  bool compute_logits = true;
  bool final_norm = false;  // fill lnf_out even when logits are skipped
};

ForwardCache forward(const DecoderModel& model, const TrainBatch& batch, const ForwardOptions& options = {});

struct ForwardResult {
  Matrix logits;
  EmbeddingTrace trace;
};

/// Logits plus the post-block residual-stream states for layers 0..L over
/// non-padding positions. Throws kInvalidArgument on token ids ≥ vocab_size.
ForwardResult forward_with_trace(const DecoderModel& model, const TrainBatch& batch);

/// Accumulates gradients of the final norm and output head into `grads` and
/// returns dL/dh_L.
Matrix backward_head(const DecoderModel& model, const ForwardCache& cache, const Matrix& d_logits,
                     std::span<double> grads);

/// Gradient through the final norm only: accumulates its parameter gradients
/// and returns dL/dh_L given dL/d lnf_out.
Matrix backward_final_norm(const DecoderModel& model, const ForwardCache& cache, const Matrix& d_lnf_out,
                           std::span<double> grads);

/// Back-propagates dL/dh_L through the blocks and embeddings. `stream_grads`
/// is empty or holds L+1 matrices of extra gradients injected at each residual
/// stream boundary (regularizers, layerwise distillation). Gradients of frozen
/// tensors are not accumulated.
void backward_blocks(const DecoderModel& model, const ForwardCache& cache, Matrix d_top,
                     const std::vector<Matrix>& stream_grads, std::span<double> grads);

}  // namespace linearlens
