#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "linearlens/corpus.hpp"
#include "linearlens/linearity.hpp"
#include "linearlens/model.hpp"

namespace linearlens {

// ---------------- losses ----------------

/// Mean next-token negative log-likelihood over positions whose own token and
/// successor are both real. Throws kInvalidArgument when no such position exists.
double lm_loss(const Matrix& logits, const TrainBatch& batch);

struct LossSum {
  double sum = 0.0;        // summed NLL
  std::size_t count = 0;   // number of predicted positions
};

/// Summed NLL; when d_logits is non-null it receives scale · dSum/dlogits.
LossSum lm_loss_sum(const Matrix& logits, const TrainBatch& batch, double scale, Matrix* d_logits);
std::size_t lm_target_count(const TrainBatch& batch);

enum class RegularizerKind { kNone, kMse, kCosine };

struct RegularizerConfig {
  RegularizerKind kind = RegularizerKind::kNone;
  double lambda = 0.0;

  void validate() const;
  nlohmann::json to_json() const;
  static RegularizerConfig from_json(const nlohmann::json& j);
};

std::string_view to_string(RegularizerKind kind);
RegularizerKind regularizer_kind_from_string(std::string_view s);

/// Denominator guard for cosine similarities.
inline constexpr double kCosineEpsilon = 1e-8;

/// λ · Σ_pairs mean_t ‖h_i,t − h_{i−1},t‖².
double reg_mse(const EmbeddingTrace& trace, double lambda);
/// λ · Σ_pairs mean_t (1 − cos(h_i,t, h_{i−1},t)).
double reg_cosine(const EmbeddingTrace& trace, double lambda);

/// Regularizer value on the residual stream of a forward cache (non-padding
/// positions, mean taken over `token_count` tokens). When `stream_grads` is
/// non-null its matrices receive the gradient (allocated if empty).
double regularizer_on_stream(const ForwardCache& cache, const RegularizerConfig& reg, double token_count,
                             std::vector<Matrix>* stream_grads);

// ---------------- optimizer ----------------

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  std::size_t warmup_steps = 100;
  double weight_decay = 0.0;

  nlohmann::json to_json() const;
  static AdamConfig from_json(const nlohmann::json& j);
};

class AdamOptimizer {
 public:
  AdamOptimizer() = default;
  AdamOptimizer(const AdamConfig& config, std::size_t parameter_count);

  /// One update of the trainable tensors; throws kNumeric if a parameter
  /// becomes non-finite.
  void step(DecoderModel& model, std::span<const double> grads);
  std::uint64_t steps() const noexcept { return t_; }
  double current_lr() const noexcept;
  const AdamConfig& config() const noexcept { return config_; }

 private:
  AdamConfig config_;
  std::vector<double> m_, v_;
  std::uint64_t t_ = 0;
};

// ---------------- training ----------------

struct LossBreakdown {
  double lm = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

/// Total loss (LM + regularizer) and its gradient. With shards > 1 the batch
/// is split by sequence, shards run concurrently into private buffers, and the
/// buffers are combined by a fixed-order pairwise tree.
LossBreakdown loss_and_gradient(const DecoderModel& model, const TrainBatch& batch, const RegularizerConfig& reg,
                                std::span<double> grads, std::size_t shards = 1);

/// Forward-only total loss.
LossBreakdown evaluate_loss(const DecoderModel& model, const TrainBatch& batch, const RegularizerConfig& reg);

struct TrainStepOptions {
  std::size_t shards = 1;
};

/// Clears gradients, computes the loss, applies one optimizer update.
/// Throws kNumeric with a dump of the batch if the loss or a gradient is non-finite.
LossBreakdown train_step(DecoderModel& model, const TrainBatch& batch, const RegularizerConfig& reg,
                         AdamOptimizer& optimizer, const TrainStepOptions& options = {});

struct GradCheckOptions {
  std::size_t samples = 200;
  double step = 1e-5;
  // Denominator floor: gradients smaller than this are compared absolutely.
  double floor = 1e-4;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_tensor;
  std::size_t checked = 0;
};

/// Analytic gradient of the total loss vs central finite differences on
/// randomly sampled trainable parameters: |a − n| / max(|a|, |n|, floor).
GradCheckResult grad_check(const DecoderModel& model, const TrainBatch& batch, const RegularizerConfig& reg,
                           const GradCheckOptions& options = {});

/// exp(mean NLL) over windows of max_seq_len tokens advancing by
/// max_seq_len − 1: the predicted targets of consecutive windows do not
/// overlap and every token after the first is predicted exactly once.
/// Throws kInvalidArgument for fewer than 2 tokens.
double perplexity(const DecoderModel& model, const std::vector<std::int32_t>& tokens, std::size_t batch_size = 16);

// ---------------- pretraining loop ----------------

struct TrainConfig {
  ModelConfig model;
  RegularizerConfig reg;
  AdamConfig adam;
  std::uint64_t seed = 0;
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  std::size_t seq_len = 64;
  std::size_t corpus_stories = 4000;
  std::uint64_t corpus_seed = 1234;
  std::size_t eval_every = 500;      // profile snapshots; 0 disables
  std::size_t measure_windows = 64;  // windows of held-out text for profiles
  std::size_t shards = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct Snapshot {
  std::size_t step = 0;
  LinearityProfile profile;
  double mean_score_resid = 0.0;
  double mean_score_noresid = 0.0;
  double mean_cosine = 0.0;
};

struct TrainRun {
  DecoderModel model;
  std::vector<LossBreakdown> losses;
  std::vector<Snapshot> snapshots;
};

/// Held-out measurement batch for profiles: disjoint stories from training.
TrainBatch measurement_batch(const TrainConfig& config);
std::vector<std::int32_t> heldout_stream(const TrainConfig& config);
Snapshot take_snapshot(const DecoderModel& model, const TrainBatch& measure, std::size_t step);

TrainRun pretrain(const TrainConfig& config);

// ---------------- classification ----------------

struct ClassifierHead {
  Matrix weight;              // d × 2
  std::vector<double> bias;   // 2
};

struct FinetuneOptions {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  bool freeze_body = false;
  AdamConfig adam{.lr = 1e-3, .warmup_steps = 0};
  std::uint64_t seed = 0;
};

struct FinetuneResult {
  DecoderModel model;
  ClassifierHead head;
  double accuracy = 0.0;  // on the held-out examples
  double train_accuracy = 0.0;
};

/// Mean of residual-stream layer `layer` over non-padding tokens, one row per sequence.
Matrix pooled_representation(const ForwardCache& cache, std::size_t layer);
/// Same pooling applied to the final-norm output (what the LM head reads).
Matrix pooled_final(const ForwardCache& cache);

/// Trains a linear head (and the body unless frozen) on the mean-pooled
/// final-norm output of the last layer. Throws kInvalidArgument when the training labels are single-class.
FinetuneResult finetune_classifier(const DecoderModel& model, const std::vector<LabeledText>& train,
                                   const std::vector<LabeledText>& test, const FinetuneOptions& options = {});

double classifier_accuracy(const DecoderModel& model, const ClassifierHead& head,
                           const std::vector<LabeledText>& examples);

}  // namespace linearlens
