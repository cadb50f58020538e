#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "linearlens/corpus.hpp"
#include "linearlens/matrix.hpp"
#include "linearlens/model.hpp"

namespace linearlens {

enum class Split : unsigned char { kTrain, kValidation, kTest };

struct SplitFractions {
  double train = 0.6;
  double validation = 0.2;  // the rest is test
};

/// Per-example features with binary labels and a split tag. The split depends
/// only on (labels, seed, fractions), never on the features, so every layer
/// and every model probed on the same task sees the same split.
struct ProbeDataset {
  Matrix features;  // examples × dim
  std::vector<int> labels;
  std::vector<Split> split;
  std::uint64_t seed = 0;
  std::uint64_t split_hash = 0;

  std::size_t count(Split s) const;
  /// Sizes, finiteness, binary labels, disjoint tags, ≥ 2 train examples per class.
  void validate() const;
};

/// Stratified seeded split: each class is shuffled and cut by the fractions.
std::vector<Split> make_split(const std::vector<int>& labels, std::uint64_t seed, const SplitFractions& fractions = {});
std::uint64_t hash_split(const std::vector<Split>& split);

ProbeDataset make_probe_dataset(Matrix features, std::vector<int> labels, std::uint64_t seed,
                                const SplitFractions& fractions = {});

struct ProbeOptions {
  double l2 = 1e-3;
  double tolerance = 1e-6;  // on the gradient norm
  std::size_t max_iterations = 10000;
};

struct ProbeResult {
  std::size_t layer = 0;
  double accuracy = 0.0;  // on the test split
  double weight_norm = 0.0;
  double loss = 0.0;      // final regularized training objective
  std::size_t iterations = 0;
  bool converged = false;
  std::size_t n_train = 0, n_test = 0;
  std::uint64_t seed = 0;
  std::uint64_t split_hash = 0;
  std::vector<double> weights;  // in standardized feature space
  double bias = 0.0;
  std::vector<double> mean, scale;  // train statistics used to standardize
};

/// Objective on standardized train features:
///   mean_i log(1 + exp(−s_i (w·x_i + b))) + (l2/2)‖w‖², s_i = ±1.
/// Features are standardized with train mean/std (zero-variance features
/// become 0). Solved by accelerated full-batch gradient descent from zero with
/// step 1/L and adaptive restart. Predicts 1 when p ≥ 0.5.
ProbeResult train_probe(const ProbeDataset& data, const ProbeOptions& options = {});

/// The objective above evaluated at (w, b) on standardized train features.
double probe_objective(const ProbeDataset& data, std::span<const double> w, double b, double l2);

/// Mean-pooled residual-stream features of every layer 0..L for the examples.
std::vector<Matrix> pooled_layer_features(const DecoderModel& model, const std::vector<LabeledText>& examples);

/// One probe per layer, all on the same split (checked by hash).
std::vector<ProbeResult> probe_profile(const DecoderModel& model, const std::vector<LabeledText>& examples,
                                       std::uint64_t seed, const ProbeOptions& options = {});

/// CSV columns: layer, accuracy, n_train, n_test, seed.
std::string probe_to_csv(const std::vector<ProbeResult>& results);

}  // namespace linearlens
