#include "linearlens/probing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "linearlens/csv.hpp"
#include "linearlens/error.hpp"
#include "linearlens/training.hpp"

namespace linearlens {

std::size_t ProbeDataset::count(Split s) const { return static_cast<std::size_t>(std::count(split.begin(), split.end(), s)); }

void ProbeDataset::validate() const {
  require(features.rows() == labels.size() && split.size() == labels.size(), ErrorCode::kDimension,
          "probe features, labels and split tags must have one entry per example");
  require(features.all_finite(), ErrorCode::kNumeric, "probe features contain non-finite values");
  std::size_t train_pos = 0, train_neg = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] == 0 || labels[i] == 1, ErrorCode::kInvalidArgument, "probe labels must be 0 or 1");
    if (split[i] == Split::kTrain) (labels[i] ? train_pos : train_neg) += 1;
  }
  require(train_pos >= 2 && train_neg >= 2, ErrorCode::kInvalidArgument,
          "probe training split needs at least 2 examples of each class");
  require(hash_split(split) == split_hash, ErrorCode::kFormat, "probe split does not match its hash");
}

std::vector<Split> make_split(const std::vector<int>& labels, std::uint64_t seed, const SplitFractions& fractions) {
  require(fractions.train > 0 && fractions.validation >= 0 && fractions.train + fractions.validation < 1,
          ErrorCode::kInvalidArgument, "split fractions must leave room for a test split");
  std::mt19937_64 rng(seed);
  std::vector<Split> split(labels.size(), Split::kTest);
  for (int cls : {0, 1}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == cls) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(fractions.train * static_cast<double>(idx.size())));
    const auto n_val = static_cast<std::size_t>(std::llround(fractions.validation * static_cast<double>(idx.size())));
    for (std::size_t r = 0; r < idx.size(); ++r)
      split[idx[r]] = r < n_train ? Split::kTrain : (r < n_train + n_val ? Split::kValidation : Split::kTest);
  }
  return split;
}

std::uint64_t hash_split(const std::vector<Split>& split) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (Split s : split) {
    h ^= static_cast<std::uint64_t>(s);
    h *= 0x100000001b3ULL;
  }
  return h;
}

ProbeDataset make_probe_dataset(Matrix features, std::vector<int> labels, std::uint64_t seed,
                                const SplitFractions& fractions) {
  ProbeDataset d;
  d.split = make_split(labels, seed, fractions);
  d.split_hash = hash_split(d.split);
  d.features = std::move(features);
  d.labels = std::move(labels);
  d.seed = seed;
  d.validate();
  return d;
}

namespace {

// Train rows standardized with train statistics.
struct Standardized {
  Matrix x;  // train rows only
  std::vector<double> sign;  // ±1 per train row
  std::vector<double> mean, scale;
};

Standardized standardize(const ProbeDataset& data) {
  const std::size_t d = data.features.cols();
  Standardized s;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < data.labels.size(); ++i)
    if (data.split[i] == Split::kTrain) rows.push_back(i);
  s.mean.assign(d, 0.0);
  s.scale.assign(d, 0.0);
  for (std::size_t i : rows)
    for (std::size_t j = 0; j < d; ++j) s.mean[j] += data.features(i, j);
  for (double& m : s.mean) m /= static_cast<double>(rows.size());
  for (std::size_t j = 0; j < d; ++j) {
    double var = 0.0;
    for (std::size_t i : rows) var += (data.features(i, j) - s.mean[j]) * (data.features(i, j) - s.mean[j]);
    const double sd = std::sqrt(var / static_cast<double>(rows.size()));
    // Rounding in the mean leaves ~1e-16 relative spread on constant columns.
    s.scale[j] = sd > 1e-12 * std::max(1.0, std::abs(s.mean[j])) ? 1.0 / sd : 0.0;
  }
  s.x = Matrix(rows.size(), d);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t j = 0; j < d; ++j) s.x(r, j) = (data.features(rows[r], j) - s.mean[j]) * s.scale[j];
    s.sign.push_back(data.labels[rows[r]] ? 1.0 : -1.0);
  }
  return s;
}

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

// Objective and gradient over theta = (w, b).
double objective(const Standardized& s, std::span<const double> theta, double l2, std::vector<double>* grad) {
  const std::size_t n = s.x.rows(), d = s.x.cols();
  const double b = theta[d];
  double loss = 0.0;
  if (grad) grad->assign(d + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double z = b;
    const double* row = s.x.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) z += row[j] * theta[j];
    const double m = s.sign[i] * z;
    loss += softplus(-m);
    if (grad) {
      const double coef = -s.sign[i] * sigmoid(-m);
      for (std::size_t j = 0; j < d; ++j) (*grad)[j] += coef * row[j];
      (*grad)[d] += coef;
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  double reg = 0.0;
  for (std::size_t j = 0; j < d; ++j) reg += theta[j] * theta[j];
  if (grad) {
    for (double& g : *grad) g *= inv_n;
    for (std::size_t j = 0; j < d; ++j) (*grad)[j] += l2 * theta[j];
  }
  return loss * inv_n + 0.5 * l2 * reg;
}

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Largest eigenvalue of [X 1]ᵀ[X 1] / n by power iteration.
double top_eigenvalue(const Standardized& s) {
  const std::size_t n = s.x.rows(), d = s.x.cols();
  std::vector<double> v(d + 1, 1.0 / std::sqrt(static_cast<double>(d + 1))), u(n), next(d + 1);
  double lambda = 0.0;
  for (int it = 0; it < 200; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double z = v[d];
      for (std::size_t j = 0; j < d; ++j) z += s.x(i, j) * v[j];
      u[i] = z;
    }
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) next[j] += s.x(i, j) * u[i];
      next[d] += u[i];
    }
    for (double& x : next) x /= static_cast<double>(n);
    const double nn = norm(next);
    if (nn == 0.0) break;
    const double prev = lambda;
    lambda = nn;
    for (std::size_t j = 0; j <= d; ++j) v[j] = next[j] / nn;
    if (std::abs(lambda - prev) <= 1e-10 * lambda) break;
  }
  return lambda;
}

}  // namespace

double probe_objective(const ProbeDataset& data, std::span<const double> w, double b, double l2) {
  const Standardized s = standardize(data);
  std::vector<double> theta(w.begin(), w.end());
  theta.push_back(b);
  return objective(s, theta, l2, nullptr);
}

ProbeResult train_probe(const ProbeDataset& data, const ProbeOptions& options) {
  data.validate();
  require(options.l2 >= 0 && options.tolerance > 0 && options.max_iterations > 0, ErrorCode::kInvalidArgument,
          "invalid probe options");
  const Standardized s = standardize(data);
  const std::size_t d = s.x.cols();
  // Per-example logistic curvature is at most 1/4.
  const double lipschitz = 0.25 * top_eigenvalue(s) * 1.02 + options.l2;
  const double step = 1.0 / lipschitz;

  std::vector<double> x(d + 1, 0.0), y = x, x_next(d + 1), g_y, g_x;
  double t = 1.0;
  ProbeResult r;
  objective(s, x, options.l2, &g_x);
  std::size_t it = 0;
  for (; it < options.max_iterations && norm(g_x) >= options.tolerance; ++it) {
    objective(s, y, options.l2, &g_y);
    for (std::size_t j = 0; j <= d; ++j) x_next[j] = y[j] - step * g_y[j];
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    double restart = 0.0;
    for (std::size_t j = 0; j <= d; ++j) restart += g_y[j] * (x_next[j] - x[j]);
    if (restart > 0.0) {
      t = 1.0;
      y = x_next;
    } else {
      const double beta = (t - 1.0) / t_next;
      for (std::size_t j = 0; j <= d; ++j) y[j] = x_next[j] + beta * (x_next[j] - x[j]);
      t = t_next;
    }
    x = x_next;
    objective(s, x, options.l2, &g_x);
  }
  r.iterations = it;
  r.converged = norm(g_x) < options.tolerance;
  r.loss = objective(s, x, options.l2, nullptr);
  r.weights.assign(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(d));
  r.bias = x[d];
  r.weight_norm = norm(r.weights);
  r.mean = s.mean;
  r.scale = s.scale;
  r.seed = data.seed;
  r.split_hash = data.split_hash;
  r.n_train = data.count(Split::kTrain);
  r.n_test = data.count(Split::kTest);

  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.labels.size(); ++i) {
    if (data.split[i] != Split::kTest) continue;
    double z = r.bias;
    for (std::size_t j = 0; j < d; ++j) z += (data.features(i, j) - r.mean[j]) * r.scale[j] * r.weights[j];
    const int pred = z >= 0.0 ? 1 : 0;  // sigmoid(z) ≥ 0.5
    if (pred == data.labels[i]) ++correct;
  }
  r.accuracy = r.n_test ? static_cast<double>(correct) / static_cast<double>(r.n_test) : 0.0;
  return r;
}

std::vector<Matrix> pooled_layer_features(const DecoderModel& model, const std::vector<LabeledText>& examples) {
  require(!examples.empty(), ErrorCode::kInvalidArgument, "no examples to embed");
  const std::size_t layers = model.n_layers() + 1;
  std::vector<Matrix> out(layers, Matrix(examples.size(), model.config().d_model));
  for (std::size_t b = 0; b < examples.size(); b += 64) {
    const std::size_t e = std::min(examples.size(), b + 64);
    const TrainBatch batch = batch_from_examples(examples, b, e, model.config().max_seq_len);
    const ForwardCache cache = forward(model, batch, {.compute_logits = false});
    for (std::size_t l = 0; l < layers; ++l) {
      const Matrix pooled = pooled_representation(cache, l);
      for (std::size_t i = 0; i < pooled.rows(); ++i)
        std::copy(pooled.row(i).begin(), pooled.row(i).end(), out[l].row(b + i).begin());
    }
  }
  return out;
}

std::vector<ProbeResult> probe_profile(const DecoderModel& model, const std::vector<LabeledText>& examples,
                                       std::uint64_t seed, const ProbeOptions& options) {
  std::vector<Matrix> features = pooled_layer_features(model, examples);
  std::vector<int> labels;
  for (const auto& e : examples) labels.push_back(e.label);
  std::vector<ProbeDataset> sets;
  for (auto& f : features) sets.push_back(make_probe_dataset(std::move(f), labels, seed));
  std::vector<ProbeResult> results(sets.size());
  std::vector<std::exception_ptr> errors(sets.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t l = 0; l < static_cast<std::int64_t>(sets.size()); ++l) {
    try {
      results[l] = train_probe(sets[l], options);
      results[l].layer = static_cast<std::size_t>(l);
    } catch (...) {
      errors[l] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  for (const auto& r : results)
    require(r.split_hash == results.front().split_hash, ErrorCode::kFormat, "probe layers saw different splits");
  return results;
}

std::string probe_to_csv(const std::vector<ProbeResult>& results) {
  CsvWriter csv({"layer", "accuracy", "n_train", "n_test", "seed"});
  for (const auto& r : results)
    csv.row({std::to_string(r.layer), format_number(r.accuracy), std::to_string(r.n_train), std::to_string(r.n_test),
             std::to_string(r.seed)});
  return csv.str();
}

}  // namespace linearlens
