#include "linearlens/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "linearlens/csv.hpp"
#include "linearlens/error.hpp"
#include "linearlens/probing.hpp"

namespace linearlens {

std::string_view to_string(PruneMode mode) {
  switch (mode) {
    case PruneMode::kDrop: return "drop";
    case PruneMode::kLinearReplace: return "linear_replace";
    case PruneMode::kLinearReplaceDistill: return "linear_replace_distill";
  }
  return "drop";
}

PruneMode prune_mode_from_string(std::string_view s) {
  if (s == "drop") return PruneMode::kDrop;
  if (s == "linear_replace") return PruneMode::kLinearReplace;
  if (s == "linear_replace_distill") return PruneMode::kLinearReplaceDistill;
  fail(ErrorCode::kInvalidArgument,
       "unknown pruning mode '" + std::string(s) + "' (expected drop, linear_replace or linear_replace_distill)");
}

// ---------------- ranking ----------------

std::vector<std::size_t> PruningPlan::removed() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) out.push_back(ranked[i].layer);
  std::sort(out.begin(), out.end());
  return out;
}

void PruningPlan::validate(std::size_t n_layers) const {
  require(k < n_layers, ErrorCode::kInvalidArgument,
          "cannot remove " + std::to_string(k) + " of " + std::to_string(n_layers) + " layers (k must be < n_layers)");
  require(ranked.size() == n_layers, ErrorCode::kInvalidArgument, "ranking must cover every layer");
  std::vector<bool> seen(n_layers, false);
  for (const auto& r : ranked) {
    require(r.layer < n_layers && !seen[r.layer], ErrorCode::kInvalidArgument, "ranking is not a permutation");
    seen[r.layer] = true;
  }
  require(sequential <= ranked.size(), ErrorCode::kInvalidArgument, "sequential prefix longer than the ranking");
  for (std::size_t i = sequential + 1; i < ranked.size(); ++i) {
    const auto& a = ranked[i - 1].score;
    const auto& b = ranked[i].score;
    require(!b || (a && *a >= *b), ErrorCode::kInvalidArgument, "ranking scores must be descending");
  }
}

PruningPlan rank_layers(const EmbeddingTrace& trace, std::size_t k, PruneMode mode,
                        std::vector<std::string>* warnings) {
  const LinearityProfile prof = profile(trace);
  PruningPlan plan;
  plan.k = k;
  plan.mode = mode;
  for (std::size_t i = 0; i < prof.pairs.size(); ++i) {
    plan.ranked.push_back({i, prof.pairs[i].score_with_residual});
    if (!prof.pairs[i].score_with_residual && warnings)
      warnings->push_back("layer " + std::to_string(i) + " has a degenerate linearity score and ranks last");
  }
  std::stable_sort(plan.ranked.begin(), plan.ranked.end(), [](const RankedLayer& a, const RankedLayer& b) {
    if (a.score.has_value() != b.score.has_value()) return a.score.has_value();
    if (!a.score) return false;
    return *a.score > *b.score;
  });
  plan.validate(prof.pairs.size());
  return plan;
}

PruningPlan rank_layers_reprofiled(const DecoderModel& model, const TrainBatch& calibration, std::size_t k,
                                   PruneMode mode, std::vector<std::string>* warnings) {
  require(k < model.n_layers(), ErrorCode::kInvalidArgument,
          "cannot remove " + std::to_string(k) + " of " + std::to_string(model.n_layers()) + " layers");
  DecoderModel m = model;
  std::vector<bool> gone(model.n_layers(), false);
  PruningPlan plan;
  plan.k = k;
  plan.mode = mode;
  plan.sequential = k;
  for (std::size_t step = 0;; ++step) {
    const PruningPlan current =
        rank_layers(forward(m, calibration, {.compute_logits = false}).trace(), 0, mode, step == 0 ? warnings : nullptr);
    if (step == k) {
      for (const auto& r : current.ranked)
        if (!gone[r.layer]) plan.ranked.push_back(r);
      break;
    }
    const auto next = std::find_if(current.ranked.begin(), current.ranked.end(),
                                   [&](const RankedLayer& r) { return !gone[r.layer]; });
    plan.ranked.push_back(*next);
    gone[next->layer] = true;
    m.set_identity(next->layer);
  }
  plan.validate(model.n_layers());
  return plan;
}

StudentModel drop_layers(const DecoderModel& model, const PruningPlan& plan) {
  plan.validate(model.n_layers());
  StudentModel s{model, plan.removed(), {}};
  s.teacher_layer.resize(model.n_layers() + 1);
  std::iota(s.teacher_layer.begin(), s.teacher_layer.end(), 0);
  for (std::size_t layer : s.removed) s.model.set_identity(layer);
  return s;
}

// ---------------- replacement ----------------

namespace {

Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(rows.size(), m.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy(m.row(rows[r]).begin(), m.row(rows[r]).end(), out.row(r).begin());
  return out;
}

double sq_norm(const Matrix& m) {
  double s = 0.0;
  for (double v : m.values()) s += v * v;
  return s;
}

}  // namespace

Replacement fit_replacement(const DecoderModel& teacher, std::size_t layer, const TrainBatch& calibration,
                            std::vector<std::string>* warnings) {
  require(layer < teacher.n_layers(), ErrorCode::kInvalidArgument, "layer index out of range");
  const ForwardCache cache = forward(teacher, calibration, {.compute_logits = false});
  const auto rows = cache.valid_rows();
  const Matrix x = gather_rows(cache.stream[layer], rows);
  const Matrix y = gather_rows(cache.stream[layer + 1], rows);
  const AffineFit fit = lstsq_affine_fit(x, y);
  Replacement r;
  r.map = fit.map;
  r.rank = fit.rank;
  r.rank_deficient = fit.rank_deficient();
  r.residual = squared_residual(x, fit.map, y);
  r.zero_map_residual = sq_norm(y);
  r.identity_residual = sq_norm(x - y);
  require(std::isfinite(r.residual) && r.map.weight.all_finite(), ErrorCode::kNumeric,
          "replacement fit for layer " + std::to_string(layer) + " is not finite");
  if (r.rank_deficient && warnings)
    warnings->push_back("calibration for layer " + std::to_string(layer) + " is rank-deficient (rank " +
                        std::to_string(fit.rank) + " of " + std::to_string(fit.columns) +
                        "); using the minimum-norm solution");
  return r;
}

TrainBatch calibration_batch(const std::vector<std::int32_t>& stream, std::size_t tokens, std::size_t seq) {
  require(seq >= 2 && tokens >= seq, ErrorCode::kInvalidArgument, "calibration needs at least one window");
  return contiguous_windows(stream, 0, tokens / seq, seq);
}

// ---------------- distillation ----------------

nlohmann::json DistillConfig::to_json() const {
  return {{"steps", steps},
          {"batch_size", batch_size},
          {"seq_len", seq_len},
          {"mse_weight", mse_weight},
          {"lm_weight", lm_weight},
          {"lm_target", lm_target == LmTarget::kTeacher ? "teacher" : "labels"},
          {"train_all", train_all},
          {"optimizer", adam.to_json()},
          {"seed", seed},
          {"eval_windows", eval_windows}};
}

DistillConfig DistillConfig::from_json(const nlohmann::json& j) {
  DistillConfig c;
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seq_len = j.value("seq_len", c.seq_len);
  c.mse_weight = j.value("mse_weight", c.mse_weight);
  c.lm_weight = j.value("lm_weight", c.lm_weight);
  const std::string target = j.value("lm_target", std::string("teacher"));
  require(target == "teacher" || target == "labels", ErrorCode::kInvalidArgument,
          "lm_target must be 'teacher' or 'labels'");
  c.lm_target = target == "teacher" ? LmTarget::kTeacher : LmTarget::kLabels;
  c.train_all = j.value("train_all", c.train_all);
  if (j.contains("optimizer")) c.adam = AdamConfig::from_json(j["optimizer"]);
  c.seed = j.value("seed", c.seed);
  c.eval_windows = j.value("eval_windows", c.eval_windows);
  require(c.mse_weight >= 0 && c.lm_weight >= 0, ErrorCode::kInvalidArgument, "loss weights must be >= 0");
  require(c.batch_size > 0 && c.seq_len >= 2 && c.eval_windows > 0, ErrorCode::kInvalidArgument,
          "invalid distillation batch settings");
  return c;
}

DistillLoss distill_loss(const DecoderModel& student, const ForwardCache& teacher, const TrainBatch& batch,
                         const DistillConfig& config, std::span<double> grads) {
  const bool need_logits = config.lm_weight > 0.0;
  const ForwardCache cache = forward(student, batch, {.compute_logits = need_logits});
  require(teacher.stream.size() == cache.stream.size() && teacher.positions() == cache.positions(),
          ErrorCode::kDimension, "teacher and student traces are not aligned");
  const auto rows = cache.valid_rows();
  const double n = static_cast<double>(rows.size());
  const std::size_t d = student.config().d_model;
  const bool want_grad = !grads.empty();

  DistillLoss out;
  std::vector<Matrix> stream_grads;
  if (want_grad) stream_grads.assign(cache.stream.size(), Matrix(cache.positions(), d));
  for (std::size_t l = 0; l < cache.stream.size(); ++l) {
    for (std::size_t r : rows) {
      const double* s = cache.stream[l].data() + r * d;
      const double* t = teacher.stream[l].data() + r * d;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = s[k] - t[k];
        out.mse += diff * diff;
        if (want_grad) stream_grads[l](r, k) = 2.0 * config.mse_weight * diff / n;
      }
    }
  }
  out.mse /= n;

  Matrix d_logits;
  if (need_logits) {
    const std::size_t count = lm_target_count(batch);
    require(count > 0, ErrorCode::kInvalidArgument, "distillation batch has no predictable positions");
    if (config.lm_target == LmTarget::kLabels) {
      const LossSum s = lm_loss_sum(cache.logits, batch, config.lm_weight / static_cast<double>(count),
                                    want_grad ? &d_logits : nullptr);
      out.lm = s.sum / static_cast<double>(count);
    } else {
      require(!teacher.logits.empty(), ErrorCode::kInvalidArgument, "teacher logits are needed for soft targets");
      const std::size_t vocab = cache.logits.cols();
      if (want_grad) d_logits = Matrix(cache.positions(), vocab);
      std::vector<double> ps(vocab), pt(vocab);
      long double kl = 0.0L;
      for (std::size_t i = 0; i < batch.batch; ++i)
        for (std::size_t t = 0; t + 1 < batch.seq; ++t) {
          const std::size_t r = i * batch.seq + t;
          if (!batch.mask[r] || !batch.mask[r + 1]) continue;
          auto log_softmax = [vocab](std::span<const double> z, std::vector<double>& p) {
            const double mx = *std::max_element(z.begin(), z.end());
            double sum = 0.0;
            for (std::size_t v = 0; v < vocab; ++v) sum += std::exp(z[v] - mx);
            const double lse = mx + std::log(sum);
            for (std::size_t v = 0; v < vocab; ++v) p[v] = z[v] - lse;
          };
          log_softmax(cache.logits.row(r), ps);
          log_softmax(teacher.logits.row(r), pt);
          for (std::size_t v = 0; v < vocab; ++v) {
            const double q = std::exp(pt[v]);
            kl += q * (pt[v] - ps[v]);
            if (want_grad)
              d_logits(r, v) = config.lm_weight * (std::exp(ps[v]) - q) / static_cast<double>(count);
          }
        }
      out.lm = static_cast<double>(kl) / static_cast<double>(count);
    }
  }
  out.total = config.mse_weight * out.mse + config.lm_weight * out.lm;

  if (want_grad) {
    Matrix d_top = need_logits ? backward_head(student, cache, d_logits, grads) : Matrix(cache.positions(), d);
    backward_blocks(student, cache, std::move(d_top), stream_grads, grads);
  }
  return out;
}

DistillResult distill(const DecoderModel& student, const DecoderModel& teacher,
                      const std::vector<std::int32_t>& stream, const DistillConfig& config) {
  const ModelConfig& sc = student.config();
  const ModelConfig& tc = teacher.config();
  require(sc.d_model == tc.d_model && sc.n_layers == tc.n_layers && sc.vocab_size == tc.vocab_size,
          ErrorCode::kDimension, "student and teacher shapes differ");
  require(config.seq_len <= sc.max_seq_len, ErrorCode::kInvalidArgument, "seq_len exceeds max_seq_len");
  DistillResult res{student, {}, {}, {}};
  res.model.set_trainable_all(config.train_all);
  require(res.model.trainable_count() > 0, ErrorCode::kInvalidArgument,
          "student has no trainable replacement layer (use train_all for full-model distillation)");

  const bool soft = config.lm_weight > 0.0 && config.lm_target == LmTarget::kTeacher;
  const ForwardOptions teacher_opts{.compute_logits = soft};
  const TrainBatch eval = contiguous_windows(stream, 0, config.eval_windows, config.seq_len);
  const ForwardCache teacher_eval = forward(teacher, eval, teacher_opts);
  res.initial = distill_loss(res.model, teacher_eval, eval, config, {});

  WindowSampler sampler(stream, config.seed);
  AdamOptimizer opt(config.adam, res.model.parameter_count());
  std::vector<double> grads(res.model.parameter_count());
  for (std::size_t step = 0; step < config.steps; ++step) {
    const TrainBatch batch = sampler.next(config.batch_size, config.seq_len);
    const ForwardCache tcache = forward(teacher, batch, teacher_opts);
    std::fill(grads.begin(), grads.end(), 0.0);
    const DistillLoss loss = distill_loss(res.model, tcache, batch, config, grads);
    require(std::isfinite(loss.total) && std::all_of(grads.begin(), grads.end(), [](double g) { return std::isfinite(g); }),
            ErrorCode::kNumeric, "non-finite distillation loss at step " + std::to_string(step));
    opt.step(res.model, grads);
    res.losses.push_back(loss.total);
    if (step >= config.divergence_window) {
      const double before = res.losses[step - config.divergence_window];
      if (loss.total > config.divergence_factor * before && before > 0.0)
        fail(ErrorCode::kDivergence, "distillation diverged at step " + std::to_string(step) + ": loss " +
                                         std::to_string(loss.total) + " vs " + std::to_string(before) + " " +
                                         std::to_string(config.divergence_window) + " steps earlier (mse " +
                                         std::to_string(loss.mse) + ", lm " + std::to_string(loss.lm) + ")");
    }
  }
  res.final = distill_loss(res.model, teacher_eval, eval, config, {});
  // Hand back a model with every tensor trainable, as a freshly built one.
  res.model.set_trainable_all(true);
  return res;
}

// ---------------- pipeline ----------------

StudentModel prune(const DecoderModel& teacher, const PruningPlan& plan, const TrainBatch& calibration,
                   const std::vector<std::int32_t>& distill_stream, const DistillConfig& config,
                   std::vector<std::string>* warnings) {
  StudentModel s = drop_layers(teacher, plan);
  if (plan.mode == PruneMode::kDrop || s.removed.empty()) return s;
  for (std::size_t layer : s.removed)
    s.model.set_affine(layer, fit_replacement(teacher, layer, calibration, warnings).map);
  if (plan.mode == PruneMode::kLinearReplaceDistill) s.model = distill(s.model, teacher, distill_stream, config).model;
  return s;
}

std::vector<PipelineRow> evaluate_pipeline(const DecoderModel& teacher, const std::vector<std::int32_t>& train_stream,
                                           const std::vector<std::int32_t>& eval_stream, const PipelineConfig& config,
                                           std::vector<std::string>* warnings, const StudentSink& on_student) {
  const TrainBatch calibration = calibration_batch(train_stream, config.calibration_tokens, config.seq_len);
  const auto examples = generate_task(config.probe_task, config.seed, config.probe_examples);
  std::vector<int> labels;
  for (const auto& e : examples) labels.push_back(e.label);

  auto measure = [&](const DecoderModel& m, PipelineRow& row) {
    row.params = m.parameter_count();
    row.ppl = perplexity(m, eval_stream);
    require(std::isfinite(row.ppl), ErrorCode::kNumeric, "perplexity is not finite");
    Matrix last = std::move(pooled_layer_features(m, examples).back());
    row.probe_acc = train_probe(make_probe_dataset(std::move(last), labels, config.seed)).accuracy;
  };

  PipelineRow baseline;
  measure(teacher, baseline);
  const std::size_t k_max = config.ks.empty() ? 0 : *std::max_element(config.ks.begin(), config.ks.end());
  const PruningPlan ranking = config.reprofile
                                  ? rank_layers_reprofiled(teacher, calibration, k_max, PruneMode::kDrop, warnings)
                                  : rank_layers(forward(teacher, calibration, {.compute_logits = false}).trace(), 0,
                                                PruneMode::kDrop, warnings);
  std::vector<PipelineRow> rows;
  for (PruneMode mode : config.modes) {
    for (std::size_t k : config.ks) {
      PipelineRow row = baseline;
      row.mode = mode;
      row.k = k;
      if (k > 0) {
        PruningPlan plan = ranking;
        plan.k = k;
        plan.mode = mode;
        const StudentModel s = prune(teacher, plan, calibration, train_stream, config.distill, warnings);
        row.removed = s.removed;
        measure(s.model, row);
        if (on_student) on_student(row, s);
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::string pipeline_to_csv(const std::vector<PipelineRow>& rows) {
  CsvWriter csv({"mode", "k", "removed_layers", "params", "ppl", "probe_acc"});
  for (const auto& r : rows) {
    std::string removed;
    for (std::size_t i = 0; i < r.removed.size(); ++i) removed += (i ? ";" : "") + std::to_string(r.removed[i]);
    csv.row({std::string(to_string(r.mode)), std::to_string(r.k), removed, std::to_string(r.params),
             format_number(r.ppl), format_number(r.probe_acc)});
  }
  return csv.str();
}

}  // namespace linearlens
