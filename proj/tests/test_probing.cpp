#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "linearlens/error.hpp"
#include "linearlens/probing.hpp"
#include "probe_oracle.hpp"

namespace linearlens {
namespace {

using testing::Blobs;
using testing::newton_oracle;
using testing::two_clusters;

TEST(Split, StratifiedDeterministicDisjoint) {
  std::vector<int> labels;
  for (int i = 0; i < 100; ++i) labels.push_back(i % 3 == 0);
  const auto a = make_split(labels, 7), b = make_split(labels, 7), c = make_split(labels, 8);
  EXPECT_EQ(a, b);
  EXPECT_NE(hash_split(a), hash_split(c));
  std::size_t train_pos = 0, train = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (a[i] == Split::kTrain) {
      ++train;
      train_pos += labels[i];
    }
  EXPECT_EQ(train, 60u);
  EXPECT_EQ(train_pos, 20u);
}

TEST(Split, IndependentOfFeatures) {
  const Blobs a = two_clusters(50, 3, 1.0, 1);
  const Blobs b = two_clusters(50, 5, 4.0, 2);
  EXPECT_EQ(make_probe_dataset(a.x, a.y, 3).split_hash, make_probe_dataset(b.x, b.y, 3).split_hash);
}

TEST(Probe, SeparableClustersAreSolved) {
  const Blobs b = two_clusters(200, 4, 6.0, 3);
  const ProbeResult r = train_probe(make_probe_dataset(b.x, b.y, 1));
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.n_train + r.n_test, 160u);
}

TEST(Probe, ShuffledLabelsAreChance) {
  double sum = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Blobs b = two_clusters(2000, 4, 3.0, 10 + seed);
    std::mt19937_64 rng(seed);
    std::shuffle(b.y.begin(), b.y.end(), rng);
    const ProbeResult r = train_probe(make_probe_dataset(b.x, b.y, seed));
    EXPECT_NEAR(r.accuracy, 0.5, 0.1);
    sum += r.accuracy;
  }
  EXPECT_NEAR(sum / 5.0, 0.5, 0.1);
}

TEST(Probe, MatchesNewtonOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Blobs b = two_clusters(120, 5, 0.7, 20 + seed);
    const ProbeDataset data = make_probe_dataset(b.x, b.y, seed);
    const ProbeResult r = train_probe(data);
    EXPECT_TRUE(r.converged);
    EXPECT_NEAR(r.loss, newton_oracle(data, 1e-3), 1e-6);
    EXPECT_NEAR(probe_objective(data, r.weights, r.bias, 1e-3), r.loss, 1e-15);
  }
}

TEST(Probe, DeterministicWeights) {
  const Blobs b = two_clusters(100, 3, 1.0, 4);
  const ProbeDataset data = make_probe_dataset(b.x, b.y, 2);
  const ProbeResult r1 = train_probe(data), r2 = train_probe(data);
  EXPECT_EQ(r1.weights, r2.weights);
  EXPECT_EQ(r1.bias, r2.bias);
}

TEST(Probe, ConstantFeaturesGiveMajorityAccuracy) {
  std::vector<int> labels;
  for (int i = 0; i < 90; ++i) labels.push_back(i % 3 != 0);  // two thirds positive
  const ProbeDataset data = make_probe_dataset(Matrix(90, 4, 0.37), labels, 5);
  const ProbeResult r = train_probe(data);
  std::size_t test_pos = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) test_pos += data.split[i] == Split::kTest && labels[i];
  EXPECT_EQ(r.accuracy, static_cast<double>(test_pos) / static_cast<double>(r.n_test));
  EXPECT_EQ(r.weight_norm, 0.0);
}

TEST(Probe, RejectsBadInput) {
  Blobs b = two_clusters(40, 2, 1.0, 5);
  b.x(3, 1) = std::nan("");
  try {
    make_probe_dataset(b.x, b.y, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNumeric);
  }
  std::vector<int> one_class(40, 1);
  EXPECT_THROW(make_probe_dataset(Matrix(40, 2, 1.0), one_class, 1), Error);
}

TEST(ProbeProfile, OneResultPerLayerOnSharedSplit) {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  const DecoderModel model(c, 3);
  const auto examples = generate_task(TaskKind::kMarker, 1, 120);
  const auto results = probe_profile(model, examples, 4);
  ASSERT_EQ(results.size(), 3u);
  for (std::size_t l = 0; l < results.size(); ++l) {
    EXPECT_EQ(results[l].layer, l);
    EXPECT_EQ(results[l].split_hash, results[0].split_hash);
    EXPECT_GE(results[l].accuracy, 0.0);
    EXPECT_LE(results[l].accuracy, 1.0);
  }
  const std::string csv = probe_to_csv(results);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "layer,accuracy,n_train,n_test,seed");
}

}  // namespace
}  // namespace linearlens
