#include "linearlens/linearity.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <sstream>

#include "linearlens/csv.hpp"
#include "linearlens/error.hpp"

namespace linearlens {

namespace {

// Agreement required between the residual and projection forms of the score.
constexpr double kCrossCheckTolerance = 1e-10;

Matrix normalize_centered(const Matrix& m, const char* which) {
  require(m.rows() >= 1 && m.cols() >= 1, ErrorCode::kDimension, "empty embedding matrix");
  Matrix c = center_columns(m).values;
  const double norm = frobenius_norm(c);
  if (!(norm > 0.0)) {
    fail(ErrorCode::kDegenerate,
         std::string("centered ") + which + " is identically zero; linearity score undefined");
  }
  c *= 1.0 / norm;
  return c;
}

double sum_squares(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

}  // namespace

void EmbeddingMatrix::validate() const {
  require(tokens() >= 2, ErrorCode::kDimension, "embedding matrix needs at least 2 tokens");
  require(dim() >= 1, ErrorCode::kDimension, "embedding matrix has zero width");
  require(values.all_finite(), ErrorCode::kNumeric,
          "layer " + std::to_string(layer_index) + " has non-finite values");
}

void EmbeddingTrace::validate() const {
  require(!layers.empty(), ErrorCode::kDimension, "empty trace");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].validate();
    require(layers[i].tokens() == tokens() && layers[i].dim() == dim(), ErrorCode::kDimension,
            "trace layers differ in shape at layer " + std::to_string(i));
    require(layers[i].layer_index == layers.front().layer_index + i, ErrorCode::kDimension,
            "trace layer indices are not contiguous ascending");
  }
}

LinearityFit::LinearityFit(const Matrix& x)
    : x_normalized_(normalize_centered(x, "X")), factor_(svd(x_normalized_)) {}

Matrix LinearityFit::normalized_target(const Matrix& y) const {
  require(y.rows() == x_normalized_.rows(), ErrorCode::kDimension,
          "X and Y must have the same number of tokens");
  return normalize_centered(y, "Y");
}

LinearMap LinearityFit::map(const Matrix& y) const { return lstsq(factor_, normalized_target(y)); }

ScoreDetail LinearityFit::detail(const Matrix& y) const {
  const Matrix target = normalized_target(y);
  const LinearMap best = lstsq(factor_, target);
  Matrix residual = matmul(x_normalized_, best.weight);
  residual -= target;

  const std::size_t r = factor_.rank();
  Matrix u_r(factor_.rows(), r);
  for (std::size_t i = 0; i < u_r.rows(); ++i)
    for (std::size_t k = 0; k < r; ++k) u_r(i, k) = factor_.u(i, k);
  const Matrix projected = matmul_tn(u_r, target);

  ScoreDetail out{1.0 - sum_squares(residual.values()), sum_squares(projected.values())};
  if (std::abs(out.residual_form - out.projection_form) > kCrossCheckTolerance) {
    std::ostringstream msg;
    msg << "linearity score cross-check failed: residual form " << out.residual_form
        << " vs projection form " << out.projection_form;
    fail(ErrorCode::kNumeric, msg.str());
  }
  return out;
}

double LinearityFit::score(const Matrix& y) const {
  // Rounding can push 1 − residual a few ulps below zero for orthogonal sets.
  return std::max(0.0, detail(y).residual_form);
}

std::vector<double> LinearityFit::row_errors(const Matrix& y) const {
  const Matrix target = normalized_target(y);
  Matrix residual = matmul(x_normalized_, lstsq(factor_, target).weight);
  residual -= target;
  std::vector<double> errors(residual.rows());
  for (std::size_t t = 0; t < residual.rows(); ++t) errors[t] = sum_squares(residual.row(t));
  return errors;
}

double linearity_score(const Matrix& x, const Matrix& y) {
  require(x.rows() == y.rows(), ErrorCode::kDimension, "X and Y must have the same number of tokens");
  return LinearityFit(x).score(y);
}

double linearity_score(const EmbeddingMatrix& x, const EmbeddingMatrix& y) {
  return linearity_score(x.values, y.values);
}

std::vector<double> l2_error_distribution(const EmbeddingMatrix& x, const EmbeddingMatrix& y) {
  require(x.tokens() == y.tokens(), ErrorCode::kDimension, "X and Y must have the same number of tokens");
  return LinearityFit(x.values).row_errors(y.values);
}

EmbeddingMatrix main_stream_residual(const EmbeddingMatrix& prev, const EmbeddingMatrix& cur) {
  require(prev.tokens() == cur.tokens() && prev.dim() == cur.dim(), ErrorCode::kDimension,
          "main_stream_residual: shape mismatch");
  require(cur.layer_index == prev.layer_index + 1, ErrorCode::kInvalidArgument,
          "main_stream_residual: layers are not consecutive");
  return EmbeddingMatrix{cur.layer_index, cur.values - prev.values};
}

double mean_row_norm(const Matrix& m) {
  if (m.rows() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t t = 0; t < m.rows(); ++t) total += std::sqrt(sum_squares(m.row(t)));
  return total / static_cast<double>(m.rows());
}

double mean_row_cosine(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::kDimension, "cosine: shape mismatch");
  if (a.rows() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t t = 0; t < a.rows(); ++t) {
    const auto ra = a.row(t);
    const auto rb = b.row(t);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t j = 0; j < ra.size(); ++j) {
      dot += ra[j] * rb[j];
      na += ra[j] * ra[j];
      nb += rb[j] * rb[j];
    }
    const double denom = std::sqrt(na) * std::sqrt(nb);
    if (denom > 0.0) {
      total += std::clamp(dot / denom, -1.0, 1.0);
    } else {
      total += (na == nb) ? 1.0 : 0.0;
    }
  }
  return total / static_cast<double>(a.rows());
}

namespace {

PairRecord profile_pair(const EmbeddingTrace& trace, std::size_t i) {
  const EmbeddingMatrix& prev = trace.layers[i - 1];
  const EmbeddingMatrix& cur = trace.layers[i];
  const Matrix block = cur.values - prev.values;

  PairRecord rec;
  rec.from = prev.layer_index;
  rec.to = cur.layer_index;
  rec.block_output_norm = mean_row_norm(block);
  rec.stream_norm = mean_row_norm(cur.values);
  rec.mean_adjacent_cosine = mean_row_cosine(prev.values, cur.values);

  std::optional<LinearityFit> fit;
  try {
    fit.emplace(prev.values);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kDegenerate) throw;
    return rec;
  }
  try {
    rec.score_with_residual = fit->score(cur.values);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kDegenerate) throw;
  }
  try {
    rec.score_without_residual = fit->score(block);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kDegenerate) throw;
  }
  return rec;
}

}  // namespace

LinearityProfile profile(const EmbeddingTrace& trace, const ProfileOptions& options) {
  trace.validate();
  require(trace.layers.size() >= 2, ErrorCode::kDimension, "profile needs at least 2 layers");
  const std::size_t pairs = trace.layers.size() - 1;
  LinearityProfile out;
  out.provenance = trace.provenance;
  out.pairs.resize(pairs);

  if (!options.parallel) {
    for (std::size_t p = 0; p < pairs; ++p) out.pairs[p] = profile_pair(trace, p + 1);
    return out;
  }

  std::vector<std::exception_ptr> errors(pairs);
#pragma omp parallel for schedule(dynamic, 1)
  for (std::int64_t p = 0; p < static_cast<std::int64_t>(pairs); ++p) {
    try {
      out.pairs[p] = profile_pair(trace, static_cast<std::size_t>(p) + 1);
    } catch (...) {
      errors[p] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

MeanLinearity mean_linearity(const LinearityProfile& profile, ScoreColumn column) {
  require(!profile.pairs.empty(), ErrorCode::kDimension, "mean_linearity needs at least one layer pair");
  MeanLinearity out;
  double total = 0.0;
  for (const auto& rec : profile.pairs) {
    const auto& v = column == ScoreColumn::kWithResidual ? rec.score_with_residual
                                                         : rec.score_without_residual;
    if (!v) {
      ++out.excluded;
      continue;
    }
    total += *v;
    ++out.used;
  }
  require(out.used > 0, ErrorCode::kDegenerate, "every layer pair is degenerate");
  out.mean = total / static_cast<double>(out.used);
  return out;
}

MeanLinearity mean_linearity(const EmbeddingTrace& trace, ScoreColumn column) {
  return mean_linearity(profile(trace), column);
}

std::string profile_to_csv(const LinearityProfile& profile) {
  CsvWriter csv({"layer_pair", "score_resid", "score_noresid", "block_norm", "stream_norm", "mean_cos"});
  auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string("degenerate"); };
  for (const auto& rec : profile.pairs) {
    csv.row({std::to_string(rec.from) + "-" + std::to_string(rec.to), opt(rec.score_with_residual),
             opt(rec.score_without_residual), format_number(rec.block_output_norm),
             format_number(rec.stream_norm), format_number(rec.mean_adjacent_cosine)});
  }
  return csv.str();
}

nlohmann::json profile_to_json(const LinearityProfile& profile) {
  nlohmann::json pairs = nlohmann::json::array();
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  for (const auto& rec : profile.pairs) {
    pairs.push_back({{"from", rec.from},
                     {"to", rec.to},
                     {"score_resid", opt(rec.score_with_residual)},
                     {"score_noresid", opt(rec.score_without_residual)},
                     {"block_norm", rec.block_output_norm},
                     {"stream_norm", rec.stream_norm},
                     {"mean_cos", rec.mean_adjacent_cosine}});
  }
  return {{"model_id", profile.provenance.model_id},
          {"corpus_id", profile.provenance.corpus_id},
          {"sampling_seed", profile.provenance.sampling_seed},
          {"pairs", pairs}};
}

}  // namespace linearlens
