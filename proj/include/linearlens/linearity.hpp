#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "linearlens/linalg.hpp"
#include "linearlens/matrix.hpp"

namespace linearlens {

/// Activations of one layer: n tokens × d dimensions.
struct EmbeddingMatrix {
  std::size_t layer_index = 0;
  Matrix values;

  std::size_t tokens() const noexcept { return values.rows(); }
  std::size_t dim() const noexcept { return values.cols(); }
  /// Throws kDimension for n < 2 and kNumeric for non-finite entries.
  void validate() const;
};

struct TraceProvenance {
  std::string model_id;
  std::string corpus_id;
  std::uint64_t sampling_seed = 0;
};

/// Per-layer activations for layers 0..L of one forward pass or corpus sample.
/// Layer 0 is the input embedding (token + position).
struct EmbeddingTrace {
  std::vector<EmbeddingMatrix> layers;
  TraceProvenance provenance;

  std::size_t tokens() const noexcept { return layers.empty() ? 0 : layers.front().tokens(); }
  std::size_t dim() const noexcept { return layers.empty() ? 0 : layers.front().dim(); }
  /// Number of layer transitions (blocks).
  std::size_t transitions() const noexcept { return layers.empty() ? 0 : layers.size() - 1; }
  /// Checks shared shape, contiguous ascending indices and finiteness.
  void validate() const;
};

struct ScoreDetail {
  double residual_form;    // 1 − min_A ‖X̃A − Ỹ‖²
  double projection_form;  // ‖P_X̃ Ỹ‖²
};

/// Centers and normalizes X once and factors it, so several targets can be
/// scored against the same source.
class LinearityFit {
 public:
  explicit LinearityFit(const Matrix& x);

  ScoreDetail detail(const Matrix& y) const;
  double score(const Matrix& y) const;
  /// Per-token squared errors ‖x̃_t A* − ỹ_t‖² of the optimal map.
  std::vector<double> row_errors(const Matrix& y) const;
  /// Optimal map between the normalized centered sets.
  LinearMap map(const Matrix& y) const;

  std::size_t rank() const noexcept { return factor_.rank(); }

 private:
  Matrix normalized_target(const Matrix& y) const;

  Matrix x_normalized_;
  Svd factor_;
};

/// Linearity score in [0, 1]; 1 means Y is an exact linear image of X after
/// centering and normalization. Throws kDegenerate if either centered matrix is zero.
double linearity_score(const Matrix& x, const Matrix& y);
double linearity_score(const EmbeddingMatrix& x, const EmbeddingMatrix& y);

std::vector<double> l2_error_distribution(const EmbeddingMatrix& x, const EmbeddingMatrix& y);

/// cur − prev: the block's additive contribution to the residual stream.
EmbeddingMatrix main_stream_residual(const EmbeddingMatrix& prev, const EmbeddingMatrix& cur);

struct PairRecord {
  std::size_t from = 0;
  std::size_t to = 0;
  // Empty when the pair is degenerate (a centered matrix is identically zero).
  std::optional<double> score_with_residual;
  std::optional<double> score_without_residual;
  double block_output_norm = 0.0;
  double stream_norm = 0.0;
  double mean_adjacent_cosine = 0.0;
};

struct LinearityProfile {
  std::vector<PairRecord> pairs;
  TraceProvenance provenance;
};

struct ProfileOptions {
  // Pairs are independent; the serial path is kept as the reference.
  bool parallel = true;
};

LinearityProfile profile(const EmbeddingTrace& trace, const ProfileOptions& options = {});

enum class ScoreColumn { kWithResidual, kWithoutResidual };

struct MeanLinearity {
  double mean = 0.0;
  std::size_t used = 0;
  std::size_t excluded = 0;  // degenerate pairs
};

MeanLinearity mean_linearity(const LinearityProfile& profile, ScoreColumn column);
MeanLinearity mean_linearity(const EmbeddingTrace& trace, ScoreColumn column);

/// Mean over tokens of cos(a_t, b_t); a pair of zero rows counts as 1.
double mean_row_cosine(const Matrix& a, const Matrix& b);
/// Mean over rows of the row L2 norm.
double mean_row_norm(const Matrix& m);

/// CSV columns: layer_pair,score_resid,score_noresid,block_norm,stream_norm,mean_cos.
/// Degenerate scores are written as the literal `degenerate`.
std::string profile_to_csv(const LinearityProfile& profile);
nlohmann::json profile_to_json(const LinearityProfile& profile);

}  // namespace linearlens
