#include "linearlens/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "linearlens/error.hpp"

namespace linearlens {

// ---------------- losses ----------------

std::size_t lm_target_count(const TrainBatch& batch) {
  std::size_t count = 0;
  for (std::size_t i = 0; i < batch.batch; ++i)
    for (std::size_t t = 0; t + 1 < batch.seq; ++t)
      if (batch.mask[i * batch.seq + t] && batch.mask[i * batch.seq + t + 1]) ++count;
  return count;
}

LossSum lm_loss_sum(const Matrix& logits, const TrainBatch& batch, double scale, Matrix* d_logits) {
  require(logits.rows() == batch.positions(), ErrorCode::kDimension, "logits rows must equal batch*seq");
  const std::size_t vocab = logits.cols();
  if (d_logits) *d_logits = Matrix(logits.rows(), vocab);
  LossSum out;
  long double sum = 0.0L;
  for (std::size_t i = 0; i < batch.batch; ++i) {
    for (std::size_t t = 0; t + 1 < batch.seq; ++t) {
      const std::size_t r = i * batch.seq + t;
      if (!batch.mask[r] || !batch.mask[r + 1]) continue;
      const auto target = static_cast<std::size_t>(batch.tokens[r + 1]);
      require(target < vocab, ErrorCode::kInvalidArgument, "target token outside vocabulary");
      const auto row = logits.row(r);
      const double mx = *std::max_element(row.begin(), row.end());
      long double z = 0.0L;
      for (double v : row) z += std::exp(static_cast<long double>(v - mx));
      const double lse = mx + static_cast<double>(std::log(z));
      sum += static_cast<long double>(lse) - row[target];
      ++out.count;
      if (d_logits) {
        auto g = d_logits->row(r);
        for (std::size_t v = 0; v < vocab; ++v) g[v] = scale * std::exp(row[v] - lse);
        g[target] -= scale;
      }
    }
  }
  out.sum = static_cast<double>(sum);
  return out;
}

double lm_loss(const Matrix& logits, const TrainBatch& batch) {
  const LossSum s = lm_loss_sum(logits, batch, 0.0, nullptr);
  require(s.count > 0, ErrorCode::kInvalidArgument, "batch has no predictable (non-padding) positions");
  return s.sum / static_cast<double>(s.count);
}

void RegularizerConfig::validate() const {
  require(lambda >= 0.0 && std::isfinite(lambda), ErrorCode::kInvalidArgument, "regularizer lambda must be >= 0");
}

std::string_view to_string(RegularizerKind kind) {
  switch (kind) {
    case RegularizerKind::kNone: return "none";
    case RegularizerKind::kMse: return "mse";
    case RegularizerKind::kCosine: return "cosine";
  }
  return "none";
}

RegularizerKind regularizer_kind_from_string(std::string_view s) {
  if (s == "none") return RegularizerKind::kNone;
  if (s == "mse") return RegularizerKind::kMse;
  if (s == "cosine") return RegularizerKind::kCosine;
  fail(ErrorCode::kInvalidArgument, "unknown regularizer '" + std::string(s) + "'");
}

nlohmann::json RegularizerConfig::to_json() const { return {{"kind", to_string(kind)}, {"lambda", lambda}}; }

RegularizerConfig RegularizerConfig::from_json(const nlohmann::json& j) {
  RegularizerConfig r;
  r.kind = regularizer_kind_from_string(j.value("kind", std::string("none")));
  r.lambda = j.value("lambda", 0.0);
  r.validate();
  return r;
}

namespace {

// Shared by the trace-level and cache-level regularizers. `layers` are the
// residual stream states, `rows` the token rows to use, `norm` the token count
// the mean is taken over. Returns Σ_pairs Σ_rows term / norm, without λ.
double stream_penalty(RegularizerKind kind, const std::vector<const Matrix*>& layers,
                      const std::vector<std::size_t>& rows, double norm, double grad_scale,
                      std::vector<Matrix>* grads) {
  double total = 0.0;
  for (std::size_t i = 1; i < layers.size(); ++i) {
    const Matrix& cur = *layers[i];
    const Matrix& prev = *layers[i - 1];
    const std::size_t d = cur.cols();
    for (std::size_t r : rows) {
      const double* a = cur.data() + r * d;
      const double* b = prev.data() + r * d;
      if (kind == RegularizerKind::kMse) {
        double sq = 0.0;
        for (std::size_t k = 0; k < d; ++k) sq += (a[k] - b[k]) * (a[k] - b[k]);
        total += sq;
        if (grads) {
          double* ga = (*grads)[i].data() + r * d;
          double* gb = (*grads)[i - 1].data() + r * d;
          const double s = 2.0 * grad_scale / norm;
          for (std::size_t k = 0; k < d; ++k) {
            ga[k] += s * (a[k] - b[k]);
            gb[k] -= s * (a[k] - b[k]);
          }
        }
      } else {
        double dot = 0.0, aa = 0.0, bb = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          dot += a[k] * b[k];
          aa += a[k] * a[k];
          bb += b[k] * b[k];
        }
        const double na = std::sqrt(aa), nb = std::sqrt(bb);
        const double denom = na * nb + kCosineEpsilon;
        total += 1.0 - dot / denom;
        if (grads) {
          double* ga = (*grads)[i].data() + r * d;
          double* gb = (*grads)[i - 1].data() + r * d;
          const double s = -grad_scale / norm;  // d(1 − cos) = −d cos
          const double inv = 1.0 / denom;
          const double coef_a = na > 0.0 ? dot * nb / (na * denom * denom) : 0.0;
          const double coef_b = nb > 0.0 ? dot * na / (nb * denom * denom) : 0.0;
          for (std::size_t k = 0; k < d; ++k) {
            ga[k] += s * (b[k] * inv - coef_a * a[k]);
            gb[k] += s * (a[k] * inv - coef_b * b[k]);
          }
        }
      }
    }
  }
  return total / norm;
}

double trace_penalty(RegularizerKind kind, const EmbeddingTrace& trace, double lambda) {
  trace.validate();
  if (lambda == 0.0) return 0.0;
  std::vector<const Matrix*> layers;
  for (const auto& l : trace.layers) layers.push_back(&l.values);
  std::vector<std::size_t> rows(trace.tokens());
  std::iota(rows.begin(), rows.end(), 0);
  return lambda * stream_penalty(kind, layers, rows, static_cast<double>(trace.tokens()), 0.0, nullptr);
}

}  // namespace

double reg_mse(const EmbeddingTrace& trace, double lambda) {
  return trace_penalty(RegularizerKind::kMse, trace, lambda);
}

double reg_cosine(const EmbeddingTrace& trace, double lambda) {
  return trace_penalty(RegularizerKind::kCosine, trace, lambda);
}

double regularizer_on_stream(const ForwardCache& cache, const RegularizerConfig& reg, double token_count,
                             std::vector<Matrix>* stream_grads) {
  if (reg.kind == RegularizerKind::kNone || reg.lambda == 0.0) return 0.0;
  std::vector<const Matrix*> layers;
  for (const auto& m : cache.stream) layers.push_back(&m);
  if (stream_grads) {
    stream_grads->resize(cache.stream.size());
    for (std::size_t i = 0; i < cache.stream.size(); ++i)
      if ((*stream_grads)[i].empty()) (*stream_grads)[i] = Matrix(cache.stream[i].rows(), cache.stream[i].cols());
  }
  return reg.lambda * stream_penalty(reg.kind, layers, cache.valid_rows(), token_count, reg.lambda, stream_grads);
}

// ---------------- optimizer ----------------

nlohmann::json AdamConfig::to_json() const {
  return {{"lr", lr},       {"beta1", beta1}, {"beta2", beta2}, {"eps", eps}, {"warmup_steps", warmup_steps},
          {"weight_decay", weight_decay}};
}

AdamConfig AdamConfig::from_json(const nlohmann::json& j) {
  AdamConfig a;
  a.lr = j.value("lr", a.lr);
  a.beta1 = j.value("beta1", a.beta1);
  a.beta2 = j.value("beta2", a.beta2);
  a.eps = j.value("eps", a.eps);
  a.warmup_steps = j.value("warmup_steps", a.warmup_steps);
  a.weight_decay = j.value("weight_decay", a.weight_decay);
  require(a.lr > 0 && a.beta1 >= 0 && a.beta1 < 1 && a.beta2 >= 0 && a.beta2 < 1 && a.eps > 0,
          ErrorCode::kInvalidArgument, "invalid optimizer hyperparameters");
  return a;
}

AdamOptimizer::AdamOptimizer(const AdamConfig& config, std::size_t parameter_count)
    : config_(config), m_(parameter_count, 0.0), v_(parameter_count, 0.0) {}

double AdamOptimizer::current_lr() const noexcept {
  const std::uint64_t next = t_ + 1;
  if (config_.warmup_steps > 0 && next <= config_.warmup_steps)
    return config_.lr * static_cast<double>(next) / static_cast<double>(config_.warmup_steps);
  return config_.lr;
}

void AdamOptimizer::step(DecoderModel& model, std::span<const double> grads) {
  require(grads.size() == model.parameter_count() && m_.size() == grads.size(), ErrorCode::kDimension,
          "optimizer state does not match the model");
  const double lr = current_lr();
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  auto params = model.parameters();
  for (const TensorSlot& slot : model.tensors()) {
    if (!slot.trainable) continue;
    for (std::size_t i = slot.offset; i < slot.offset + slot.size(); ++i) {
      m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * grads[i];
      v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * grads[i] * grads[i];
      const double update = (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + config_.eps);
      params[i] -= lr * (update + config_.weight_decay * params[i]);
    }
  }
  model.set_step(model.step() + 1);
  require(model.all_finite(), ErrorCode::kNumeric, "non-finite parameter after optimizer step");
}

// ---------------- loss + gradient ----------------

namespace {

std::size_t valid_token_count(const TrainBatch& batch) {
  return static_cast<std::size_t>(std::count(batch.mask.begin(), batch.mask.end(), 1));
}

TrainBatch slice_sequences(const TrainBatch& batch, std::size_t begin, std::size_t end) {
  TrainBatch out;
  out.batch = end - begin;
  out.seq = batch.seq;
  const auto lo = static_cast<std::ptrdiff_t>(begin * batch.seq);
  const auto hi = static_cast<std::ptrdiff_t>(end * batch.seq);
  out.tokens.assign(batch.tokens.begin() + lo, batch.tokens.begin() + hi);
  out.mask.assign(batch.mask.begin() + lo, batch.mask.begin() + hi);
  if (!batch.labels.empty())
    out.labels.assign(batch.labels.begin() + static_cast<std::ptrdiff_t>(begin),
                      batch.labels.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

LossBreakdown shard_loss_and_gradient(const DecoderModel& model, const TrainBatch& shard,
                                      const RegularizerConfig& reg, double lm_norm, double token_norm,
                                      std::span<double> grads) {
  const ForwardCache cache = forward(model, shard);
  Matrix d_logits;
  const LossSum lm = lm_loss_sum(cache.logits, shard, 1.0 / lm_norm, &d_logits);
  std::vector<Matrix> stream_grads;
  const double r = regularizer_on_stream(cache, reg, token_norm, &stream_grads);
  Matrix d_top = backward_head(model, cache, d_logits, grads);
  backward_blocks(model, cache, std::move(d_top), stream_grads, grads);
  LossBreakdown out;
  out.lm = lm.sum / lm_norm;
  out.reg = r;
  out.total = out.lm + out.reg;
  return out;
}

}  // namespace

LossBreakdown loss_and_gradient(const DecoderModel& model, const TrainBatch& batch, const RegularizerConfig& reg,
                                std::span<double> grads, std::size_t shards) {
  reg.validate();
  batch.validate(model.config().vocab_size, model.config().max_seq_len);
  require(grads.size() == model.parameter_count(), ErrorCode::kDimension, "gradient buffer size mismatch");
  const std::size_t targets = lm_target_count(batch);
  require(targets > 0, ErrorCode::kInvalidArgument, "batch has no predictable (non-padding) positions");
  const double lm_norm = static_cast<double>(targets);
  const double token_norm = static_cast<double>(valid_token_count(batch));

  shards = std::clamp<std::size_t>(shards, 1, batch.batch);
  if (shards == 1) return shard_loss_and_gradient(model, batch, reg, lm_norm, token_norm, grads);

  std::vector<std::vector<double>> buffers(shards, std::vector<double>(grads.size(), 0.0));
  std::vector<LossBreakdown> parts(shards);
  std::vector<std::exception_ptr> errors(shards);
#pragma omp parallel for schedule(static, 1)
  for (std::int64_t s = 0; s < static_cast<std::int64_t>(shards); ++s) {
    try {
      const std::size_t begin = batch.batch * static_cast<std::size_t>(s) / shards;
      const std::size_t end = batch.batch * static_cast<std::size_t>(s + 1) / shards;
      parts[s] = shard_loss_and_gradient(model, slice_sequences(batch, begin, end), reg, lm_norm, token_norm,
                                         buffers[s]);
    } catch (...) {
      errors[s] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  // Fixed-order pairwise tree: (0+1)+(2+3)...
  for (std::size_t stride = 1; stride < shards; stride *= 2)
    for (std::size_t i = 0; i + stride < shards; i += 2 * stride)
      for (std::size_t k = 0; k < grads.size(); ++k) buffers[i][k] += buffers[i + stride][k];
  for (std::size_t k = 0; k < grads.size(); ++k) grads[k] += buffers[0][k];

  LossBreakdown total;
  for (const auto& p : parts) {
    total.lm += p.lm;
    total.reg += p.reg;
  }
  total.total = total.lm + total.reg;
  return total;
}

LossBreakdown evaluate_loss(const DecoderModel& model, const TrainBatch& batch, const RegularizerConfig& reg) {
  const ForwardCache cache = forward(model, batch);
  LossBreakdown out;
  out.lm = lm_loss(cache.logits, batch);
  out.reg = regularizer_on_stream(cache, reg, static_cast<double>(valid_token_count(batch)), nullptr);
  out.total = out.lm + out.reg;
  return out;
}

LossBreakdown train_step(DecoderModel& model, const TrainBatch& batch, const RegularizerConfig& reg,
                         AdamOptimizer& optimizer, const TrainStepOptions& options) {
  std::vector<double> grads(model.parameter_count(), 0.0);
  const LossBreakdown loss = loss_and_gradient(model, batch, reg, grads, options.shards);
  const bool finite = std::isfinite(loss.total) &&
                      std::all_of(grads.begin(), grads.end(), [](double g) { return std::isfinite(g); });
  if (!finite) {
    std::ostringstream msg;
    msg << "non-finite loss or gradient at step " << model.step() << " (lm=" << loss.lm << ", reg=" << loss.reg
        << "); offending batch:";
    for (std::size_t i = 0; i < batch.batch; ++i) {
      std::vector<std::int32_t> ids(batch.tokens.begin() + static_cast<std::ptrdiff_t>(i * batch.seq),
                                    batch.tokens.begin() + static_cast<std::ptrdiff_t>((i + 1) * batch.seq));
      msg << "\n  [" << i << "] " << ByteTokenizer::decode(ids);
    }
    fail(ErrorCode::kNumeric, msg.str());
  }
  optimizer.step(model, grads);
  return loss;
}

// ---------------- gradient check ----------------

GradCheckResult grad_check(const DecoderModel& model, const TrainBatch& batch, const RegularizerConfig& reg,
                           const GradCheckOptions& options) {
  std::vector<double> analytic(model.parameter_count(), 0.0);
  loss_and_gradient(model, batch, reg, analytic);

  std::vector<std::size_t> trainable;
  for (std::size_t i = 0; i < model.tensors().size(); ++i)
    if (model.tensors()[i].trainable) trainable.push_back(i);
  require(!trainable.empty(), ErrorCode::kInvalidArgument, "no trainable parameters to check");

  DecoderModel probe = model;
  std::mt19937_64 rng(options.seed);
  const std::size_t per_tensor = (options.samples + trainable.size() - 1) / trainable.size();
  GradCheckResult result;
  for (std::size_t ti : trainable) {
    const TensorSlot& slot = model.tensors()[ti];
    std::uniform_int_distribution<std::size_t> pick(0, slot.size() - 1);
    for (std::size_t s = 0; s < per_tensor; ++s) {
      const std::size_t idx = slot.offset + pick(rng);
      double& p = probe.parameters()[idx];
      const double saved = p;
      p = saved + options.step;
      const double up = evaluate_loss(probe, batch, reg).total;
      p = saved - options.step;
      const double down = evaluate_loss(probe, batch, reg).total;
      p = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[idx];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.floor});
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_tensor = slot.name;
      }
      ++result.checked;
    }
  }
  return result;
}

// ---------------- perplexity ----------------

double perplexity(const DecoderModel& model, const std::vector<std::int32_t>& tokens, std::size_t batch_size) {
  require(tokens.size() >= 2, ErrorCode::kInvalidArgument, "perplexity needs at least 2 tokens");
  const std::size_t T = model.config().max_seq_len;
  require(T >= 2, ErrorCode::kInvalidArgument, "max_seq_len must be at least 2 for perplexity");
  std::vector<std::vector<std::int32_t>> windows;
  for (std::size_t start = 0; start + 1 < tokens.size(); start += T - 1) {
    const std::size_t end = std::min(tokens.size(), start + T);
    windows.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                         tokens.begin() + static_cast<std::ptrdiff_t>(end));
  }
  double nll = 0.0;
  std::size_t count = 0;
  for (std::size_t w = 0; w < windows.size(); w += batch_size) {
    const std::vector<std::vector<std::int32_t>> chunk(
        windows.begin() + static_cast<std::ptrdiff_t>(w),
        windows.begin() + static_cast<std::ptrdiff_t>(std::min(windows.size(), w + batch_size)));
    const TrainBatch batch = TrainBatch::from_sequences(chunk, 0);
    const ForwardCache cache = forward(model, batch);
    const LossSum s = lm_loss_sum(cache.logits, batch, 0.0, nullptr);
    nll += s.sum;
    count += s.count;
  }
  return std::exp(nll / static_cast<double>(count));
}

// ---------------- pretraining loop ----------------

void TrainConfig::validate() const {
  model.validate();
  reg.validate();
  require(steps > 0 && batch_size > 0, ErrorCode::kInvalidArgument, "steps and batch_size must be positive");
  require(seq_len >= 2 && seq_len <= model.max_seq_len, ErrorCode::kInvalidArgument,
          "seq_len must be in [2, max_seq_len]");
  require(corpus_stories > 0 && measure_windows > 0, ErrorCode::kInvalidArgument, "corpus sizes must be positive");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"model", model.to_json()},
          {"regularizer", reg.to_json()},
          {"optimizer", adam.to_json()},
          {"seed", seed},
          {"steps", steps},
          {"batch_size", batch_size},
          {"seq_len", seq_len},
          {"corpus_stories", corpus_stories},
          {"corpus_seed", corpus_seed},
          {"eval_every", eval_every},
          {"measure_windows", measure_windows},
          {"shards", shards}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known{"model",          "regularizer", "optimizer",  "seed",
                                              "steps",          "batch_size",  "seq_len",    "corpus_stories",
                                              "corpus_seed",    "eval_every",  "measure_windows", "shards"};
  for (const auto& [key, _] : j.items())
    require(std::find(known.begin(), known.end(), key) != known.end(), ErrorCode::kInvalidArgument,
            "unknown training config field '" + key + "'");
  TrainConfig c;
  if (j.contains("model")) c.model = ModelConfig::from_json(j["model"]);
  if (j.contains("regularizer")) c.reg = RegularizerConfig::from_json(j["regularizer"]);
  if (j.contains("optimizer")) c.adam = AdamConfig::from_json(j["optimizer"]);
  c.seed = j.value("seed", c.seed);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seq_len = j.value("seq_len", c.seq_len);
  c.corpus_stories = j.value("corpus_stories", c.corpus_stories);
  c.corpus_seed = j.value("corpus_seed", c.corpus_seed);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.measure_windows = j.value("measure_windows", c.measure_windows);
  c.shards = j.value("shards", c.shards);
  c.validate();
  return c;
}

std::vector<std::int32_t> heldout_stream(const TrainConfig& config) {
  // A different generator seed gives stories disjoint from the training stream
  // in sampling, though they share the grammar.
  return story_token_stream(config.corpus_seed + 0x9e3779b97f4a7c15ULL, std::max<std::size_t>(200, config.measure_windows * 2));
}

TrainBatch measurement_batch(const TrainConfig& config) {
  return contiguous_windows(heldout_stream(config), 0, config.measure_windows, config.seq_len);
}

Snapshot take_snapshot(const DecoderModel& model, const TrainBatch& measure, std::size_t step) {
  const ForwardCache cache = forward(model, measure, {.compute_logits = false});
  Snapshot s;
  s.step = step;
  s.profile = profile(cache.trace());
  s.mean_score_resid = mean_linearity(s.profile, ScoreColumn::kWithResidual).mean;
  s.mean_score_noresid = mean_linearity(s.profile, ScoreColumn::kWithoutResidual).mean;
  double cos = 0.0;
  for (const auto& p : s.profile.pairs) cos += p.mean_adjacent_cosine;
  s.mean_cosine = cos / static_cast<double>(s.profile.pairs.size());
  return s;
}

TrainRun pretrain(const TrainConfig& config) {
  config.validate();
  TrainRun run{DecoderModel(config.model, config.seed), {}, {}};
  AdamOptimizer optimizer(config.adam, run.model.parameter_count());
  WindowSampler sampler(story_token_stream(config.corpus_seed, config.corpus_stories), config.seed + 1);
  const TrainBatch measure = measurement_batch(config);
  run.losses.reserve(config.steps);
  for (std::size_t step = 1; step <= config.steps; ++step) {
    const TrainBatch batch = sampler.next(config.batch_size, config.seq_len);
    run.losses.push_back(train_step(run.model, batch, config.reg, optimizer, {.shards = config.shards}));
    const bool snapshot = (config.eval_every > 0 && step % config.eval_every == 0) || step == config.steps;
    if (snapshot) run.snapshots.push_back(take_snapshot(run.model, measure, step));
  }
  return run;
}

// ---------------- classification ----------------

namespace {

Matrix mean_pool(const ForwardCache& cache, const Matrix& h) {
  Matrix pooled(cache.batch, h.cols());
  for (std::size_t i = 0; i < cache.batch; ++i) {
    std::size_t n = 0;
    for (std::size_t t = 0; t < cache.seq; ++t) {
      const std::size_t r = i * cache.seq + t;
      if (!cache.mask[r]) continue;
      for (std::size_t k = 0; k < h.cols(); ++k) pooled(i, k) += h(r, k);
      ++n;
    }
    if (n) {
      for (std::size_t k = 0; k < h.cols(); ++k) pooled(i, k) /= static_cast<double>(n);
    }
  }
  return pooled;
}

}  // namespace

Matrix pooled_representation(const ForwardCache& cache, std::size_t layer) {
  return mean_pool(cache, cache.stream.at(layer));
}

Matrix pooled_final(const ForwardCache& cache) {
  require(!cache.lnf_out.empty(), ErrorCode::kInvalidArgument, "forward pass did not compute the final norm");
  return mean_pool(cache, cache.lnf_out);
}

namespace {

Matrix head_logits(const Matrix& pooled, const ClassifierHead& head) {
  Matrix logits = matmul(pooled, head.weight);
  for (std::size_t i = 0; i < logits.rows(); ++i)
    for (std::size_t c = 0; c < 2; ++c) logits(i, c) += head.bias[c];
  return logits;
}

}  // namespace

double classifier_accuracy(const DecoderModel& model, const ClassifierHead& head,
                           const std::vector<LabeledText>& examples) {
  require(!examples.empty(), ErrorCode::kInvalidArgument, "no examples to score");
  std::size_t correct = 0;
  for (std::size_t b = 0; b < examples.size(); b += 64) {
    const std::size_t e = std::min(examples.size(), b + 64);
    const TrainBatch batch = batch_from_examples(examples, b, e, model.config().max_seq_len);
    const ForwardCache cache = forward(model, batch, {.compute_logits = false, .final_norm = true});
    const Matrix logits = head_logits(pooled_final(cache), head);
    for (std::size_t i = 0; i < batch.batch; ++i) {
      const int pred = logits(i, 1) > logits(i, 0) ? 1 : 0;
      if (pred == batch.labels[i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

FinetuneResult finetune_classifier(const DecoderModel& model, const std::vector<LabeledText>& train,
                                   const std::vector<LabeledText>& test, const FinetuneOptions& options) {
  require(!train.empty() && !test.empty(), ErrorCode::kInvalidArgument, "empty train or test set");
  const bool has0 = std::any_of(train.begin(), train.end(), [](const auto& e) { return e.label == 0; });
  const bool has1 = std::any_of(train.begin(), train.end(), [](const auto& e) { return e.label == 1; });
  require(has0 && has1, ErrorCode::kInvalidArgument, "classification data must contain both classes");
  for (const auto& e : train)
    require(e.label == 0 || e.label == 1, ErrorCode::kInvalidArgument, "labels must be binary");

  FinetuneResult out{model, {Matrix(model.config().d_model, 2), {0.0, 0.0}}, 0.0, 0.0};
  DecoderModel& body = out.model;
  ClassifierHead& head = out.head;
  AdamOptimizer body_opt(options.adam, body.parameter_count());
  // The head is optimized by a one-tensor model-free Adam.
  std::vector<double> hm(head.weight.size() + 2, 0.0), hv(head.weight.size() + 2, 0.0);
  std::uint64_t head_t = 0;

  std::mt19937_64 rng(options.seed);
  std::vector<LabeledText> shuffled = train;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    for (std::size_t b = 0; b < shuffled.size(); b += options.batch_size) {
      const std::size_t e = std::min(shuffled.size(), b + options.batch_size);
      const TrainBatch batch = batch_from_examples(shuffled, b, e, body.config().max_seq_len);
      const ForwardCache cache = forward(body, batch, {.compute_logits = false, .final_norm = true});
      const Matrix pooled = pooled_final(cache);
      const Matrix logits = head_logits(pooled, head);
      const double inv_b = 1.0 / static_cast<double>(batch.batch);
      Matrix d_logits(batch.batch, 2);
      for (std::size_t i = 0; i < batch.batch; ++i) {
        const double mx = std::max(logits(i, 0), logits(i, 1));
        const double z = std::exp(logits(i, 0) - mx) + std::exp(logits(i, 1) - mx);
        for (std::size_t c = 0; c < 2; ++c) d_logits(i, c) = std::exp(logits(i, c) - mx) / z * inv_b;
        d_logits(i, static_cast<std::size_t>(batch.labels[i])) -= inv_b;
      }
      // Head gradient.
      std::vector<double> hg(head.weight.size() + 2, 0.0);
      const Matrix dw = matmul_tn(pooled, d_logits);
      std::copy(dw.values().begin(), dw.values().end(), hg.begin());
      for (std::size_t i = 0; i < batch.batch; ++i)
        for (std::size_t c = 0; c < 2; ++c) hg[head.weight.size() + c] += d_logits(i, c);

      if (!options.freeze_body) {
        const Matrix d_pool = matmul(d_logits, head.weight.transposed());
        Matrix d_norm(batch.positions(), body.config().d_model);
        for (std::size_t i = 0; i < batch.batch; ++i) {
          std::size_t n = 0;
          for (std::size_t t = 0; t < batch.seq; ++t) n += batch.mask[i * batch.seq + t];
          for (std::size_t t = 0; t < batch.seq; ++t) {
            const std::size_t r = i * batch.seq + t;
            if (!batch.mask[r]) continue;
            for (std::size_t k = 0; k < d_norm.cols(); ++k) d_norm(r, k) = d_pool(i, k) / static_cast<double>(n);
          }
        }
        std::vector<double> grads(body.parameter_count(), 0.0);
        Matrix d_top = backward_final_norm(body, cache, d_norm, grads);
        backward_blocks(body, cache, std::move(d_top), {}, grads);
        body_opt.step(body, grads);
      }

      ++head_t;
      const AdamConfig& a = options.adam;
      const double bc1 = 1.0 - std::pow(a.beta1, static_cast<double>(head_t));
      const double bc2 = 1.0 - std::pow(a.beta2, static_cast<double>(head_t));
      for (std::size_t k = 0; k < hg.size(); ++k) {
        hm[k] = a.beta1 * hm[k] + (1.0 - a.beta1) * hg[k];
        hv[k] = a.beta2 * hv[k] + (1.0 - a.beta2) * hg[k] * hg[k];
        double& p = k < head.weight.size() ? head.weight.values()[k] : head.bias[k - head.weight.size()];
        p -= a.lr * (hm[k] / bc1) / (std::sqrt(hv[k] / bc2) + a.eps);
      }
    }
  }
  out.train_accuracy = classifier_accuracy(body, head, train);
  out.accuracy = classifier_accuracy(body, head, test);
  return out;
}

}  // namespace linearlens
