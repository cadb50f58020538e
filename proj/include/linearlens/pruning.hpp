#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "linearlens/corpus.hpp"
#include "linearlens/linalg.hpp"
#include "linearlens/linearity.hpp"
#include "linearlens/model.hpp"
#include "linearlens/training.hpp"

namespace linearlens {

enum class PruneMode { kDrop, kLinearReplace, kLinearReplaceDistill };

std::string_view to_string(PruneMode mode);
PruneMode prune_mode_from_string(std::string_view s);

struct RankedLayer {
  std::size_t layer = 0;
  std::optional<double> score;  // score_with_residual of (h_layer → h_layer+1); empty if degenerate
};

struct PruningPlan {
  std::vector<RankedLayer> ranked;  // most linear first
  std::size_t k = 0;
  PruneMode mode = PruneMode::kDrop;
  // Leading entries picked one at a time by re-profiling, in removal order;
  // only the entries after them are required to be sorted by score.
  std::size_t sequential = 0;

  /// The first k ranked layers, ascending.
  std::vector<std::size_t> removed() const;
  /// k < n_layers; ranked is a permutation of 0..n_layers-1 with descending scores.
  void validate(std::size_t n_layers) const;
};

/// Blocks sorted by descending score_with_residual; ties go to the lower
/// index, degenerate pairs rank last (one warning each).
PruningPlan rank_layers(const EmbeddingTrace& trace, std::size_t k, PruneMode mode = PruneMode::kDrop,
                        std::vector<std::string>* warnings = nullptr);

/// Re-profiles after every removal: entry i is the most linear block of the
/// model with entries 0..i-1 already dropped (ranked by the same rules).
PruningPlan rank_layers_reprofiled(const DecoderModel& model, const TrainBatch& calibration, std::size_t k,
                                   PruneMode mode = PruneMode::kDrop, std::vector<std::string>* warnings = nullptr);

struct StudentModel {
  DecoderModel model;
  std::vector<std::size_t> removed;
  // Layer positions are kept, so student layer i aligns with teacher layer i.
  std::vector<std::size_t> teacher_layer;
};

/// Turns the top-k blocks into identity pass-throughs. Throws
/// kInvalidArgument when k ≥ n_layers.
StudentModel drop_layers(const DecoderModel& model, const PruningPlan& plan);

struct Replacement {
  LinearMap map;  // full block map on the residual stream: h_out ≈ h_in·W + b
  double residual = 0.0;           // ‖fit − out‖² on calibration tokens
  double zero_map_residual = 0.0;  // ‖out‖²
  double identity_residual = 0.0;  // ‖in − out‖², i.e. dropping the block
  std::size_t rank = 0;
  bool rank_deficient = false;
};

/// Uncentered affine least squares from block input to block output states
/// over the non-padding calibration positions. Rank-deficient calibration
/// falls back to the minimum-norm solution and adds a warning.
Replacement fit_replacement(const DecoderModel& teacher, std::size_t layer, const TrainBatch& calibration,
                            std::vector<std::string>* warnings = nullptr);

/// Default calibration: contiguous windows covering `tokens` tokens.
TrainBatch calibration_batch(const std::vector<std::int32_t>& stream, std::size_t tokens, std::size_t seq);

enum class LmTarget {
  kTeacher,  // KL(teacher ‖ student) on next-token distributions
  kLabels,   // cross-entropy against the corpus tokens
};

struct DistillConfig {
  std::size_t steps = 300;
  std::size_t batch_size = 8;
  std::size_t seq_len = 64;
  double mse_weight = 1.0;
  double lm_weight = 1.0;
  LmTarget lm_target = LmTarget::kTeacher;
  bool train_all = false;  // false: only replacement tensors are updated
  AdamConfig adam{.lr = 1e-3, .warmup_steps = 0};
  std::uint64_t seed = 0;
  std::size_t eval_windows = 16;
  double divergence_factor = 10.0;
  std::size_t divergence_window = 100;

  nlohmann::json to_json() const;
  static DistillConfig from_json(const nlohmann::json& j);
};

struct DistillLoss {
  double mse = 0.0;  // Σ over aligned layers 0..L of mean-per-token ‖h_s − h_t‖²
  double lm = 0.0;
  double total = 0.0;
};

/// Distillation objective of `student` against precomputed teacher states on
/// the same batch; gradient added to `grads` when non-empty.
DistillLoss distill_loss(const DecoderModel& student, const ForwardCache& teacher, const TrainBatch& batch,
                         const DistillConfig& config, std::span<double> grads);

struct DistillResult {
  DecoderModel model;
  DistillLoss initial;  // on the fixed evaluation windows
  DistillLoss final;
  std::vector<double> losses;
};

/// Adam on the distillation objective with batches drawn from `stream`.
/// Throws kInvalidArgument if nothing is trainable or shapes differ, and
/// kDivergence if the loss grows divergence_factor× over divergence_window steps.
DistillResult distill(const DecoderModel& student, const DecoderModel& teacher,
                      const std::vector<std::int32_t>& stream, const DistillConfig& config);

struct PipelineConfig {
  std::vector<PruneMode> modes{PruneMode::kDrop, PruneMode::kLinearReplace, PruneMode::kLinearReplaceDistill};
  std::vector<std::size_t> ks{0, 1, 2};
  std::size_t calibration_tokens = 8192;
  std::size_t seq_len = 64;
  DistillConfig distill;
  TaskKind probe_task = TaskKind::kSentiment;
  std::size_t probe_examples = 400;
  std::uint64_t seed = 0;
  bool reprofile = false;  // rank_layers_reprofiled instead of one profile
};

struct PipelineRow {
  PruneMode mode = PruneMode::kDrop;
  std::size_t k = 0;
  std::vector<std::size_t> removed;
  std::size_t params = 0;
  double ppl = 0.0;
  double probe_acc = 0.0;
};

/// Builds the student for one (mode, k).
StudentModel prune(const DecoderModel& teacher, const PruningPlan& plan, const TrainBatch& calibration,
                   const std::vector<std::int32_t>& distill_stream, const DistillConfig& config,
                   std::vector<std::string>* warnings = nullptr);

/// One row per (mode, k): perplexity on `eval_stream`, parameter count and
/// last-layer probe accuracy. The ranking comes from one profile of the
/// teacher on the calibration batch.
/// `on_student`, when set, sees every pruned student (k > 0) with its row.
using StudentSink = std::function<void(const PipelineRow&, const StudentModel&)>;
std::vector<PipelineRow> evaluate_pipeline(const DecoderModel& teacher, const std::vector<std::int32_t>& train_stream,
                                           const std::vector<std::int32_t>& eval_stream, const PipelineConfig& config,
                                           std::vector<std::string>* warnings = nullptr,
                                           const StudentSink& on_student = {});

/// CSV columns: mode, k, removed_layers (';'-joined), params, ppl, probe_acc.
std::string pipeline_to_csv(const std::vector<PipelineRow>& rows);

}  // namespace linearlens
