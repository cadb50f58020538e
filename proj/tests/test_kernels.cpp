#include <gtest/gtest.h>

#include <random>
#include <vector>

#include "linearlens/kernels.hpp"
#include "oracles.hpp"

namespace linearlens {
namespace {

std::vector<double> random_values(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  std::vector<double> v(n);
  for (double& x : v) x = nd(rng);
  return v;
}

void expect_close(const std::vector<double>& a, const std::vector<double>& b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "at " << i;
}

TEST(Kernels, MatmulFamilyMatchesReference) {
  std::mt19937_64 rng(7);
  const std::size_t m = 37, k = 19, n = 23;
  const auto a = random_values(m * k, rng);
  const auto b = random_values(k * n, rng);
  const auto bt = random_values(n * k, rng);
  const auto a2 = random_values(m * n, rng);

  for (bool acc : {false, true}) {
    std::vector<double> ref(m * n, 0.5), par(m * n, 0.5);
    kernels::reference::matmul(a, b, ref, m, k, n, acc);
    kernels::parallel::matmul(a, b, par, m, k, n, acc);
    expect_close(ref, par, 1e-12);

    std::vector<double> ref_nt(m * n, 0.5), par_nt(m * n, 0.5);
    kernels::reference::matmul_nt(a, bt, ref_nt, m, k, n, acc);
    kernels::parallel::matmul_nt(a, bt, par_nt, m, k, n, acc);
    expect_close(ref_nt, par_nt, 1e-12);

    std::vector<double> ref_tn(k * n, 0.5), par_tn(k * n, 0.5);
    kernels::reference::matmul_tn(a, a2, ref_tn, m, k, n, acc);
    kernels::parallel::matmul_tn(a, a2, par_tn, m, k, n, acc);
    expect_close(ref_tn, par_tn, 1e-12);
  }
}

TEST(Kernels, ParallelResultIndependentOfThreadCount) {
  std::mt19937_64 rng(11);
  const std::size_t m = 64, k = 48, n = 40;
  const auto a = random_values(m * k, rng);
  const auto b = random_values(k * n, rng);
  std::vector<double> one(m * n), many(m * n);
  const int saved = kernels::num_threads();
  kernels::set_num_threads(1);
  kernels::parallel::matmul(a, b, one, m, k, n);
  kernels::set_num_threads(4);
  kernels::parallel::matmul(a, b, many, m, k, n);
  kernels::set_num_threads(saved);
  EXPECT_EQ(one, many);
}

class AttentionKernels : public ::testing::Test {
 protected:
  kernels::AttentionShape shape{3, 7, 2, 4};
  std::mt19937_64 rng{3};
  std::vector<double> qkv = random_values(shape.batch * shape.seq * 3 * shape.model_dim(), rng);
  std::vector<unsigned char> mask = [this] {
    std::vector<unsigned char> m(shape.batch * shape.seq, 1);
    m[1 * shape.seq + 5] = 0;  // padding tail in sequence 1
    m[1 * shape.seq + 6] = 0;
    m[2 * shape.seq + 0] = 0;  // leading pad: query 0 sees nothing
    return m;
  }();
  std::size_t probs_size() const { return shape.batch * shape.heads * shape.seq * shape.seq; }
  std::size_t out_size() const { return shape.batch * shape.seq * shape.model_dim(); }
};

TEST_F(AttentionKernels, ForwardAndBackwardMatchReference) {
  std::vector<double> p_ref(probs_size()), p_par(probs_size()), o_ref(out_size()), o_par(out_size());
  kernels::reference::attention_forward(qkv, mask, p_ref, o_ref, shape);
  kernels::parallel::attention_forward(qkv, mask, p_par, o_par, shape);
  expect_close(p_ref, p_par, 1e-14);
  expect_close(o_ref, o_par, 1e-13);

  const auto d_out = random_values(out_size(), rng);
  std::vector<double> g_ref(qkv.size()), g_par(qkv.size());
  kernels::reference::attention_backward(qkv, p_ref, d_out, g_ref, shape);
  kernels::parallel::attention_backward(qkv, p_par, d_out, g_par, shape);
  expect_close(g_ref, g_par, 1e-12);
}

TEST_F(AttentionKernels, RowsAreCausalDistributions) {
  std::vector<double> probs(probs_size()), out(out_size());
  kernels::parallel::attention_forward(qkv, mask, probs, out, shape);
  const std::size_t T = shape.seq;
  for (std::size_t bh = 0; bh < shape.batch * shape.heads; ++bh) {
    const std::size_t b = bh / shape.heads;
    for (std::size_t t = 0; t < T; ++t) {
      double sum = 0.0;
      bool any = false;
      for (std::size_t s = 0; s < T; ++s) {
        const double p = probs[bh * T * T + t * T + s];
        if (s > t || !mask[b * T + s]) EXPECT_EQ(p, 0.0);
        if (s <= t && mask[b * T + s]) any = true;
        sum += p;
      }
      EXPECT_NEAR(sum, any ? 1.0 : 0.0, 1e-12);
    }
  }
}

TEST_F(AttentionKernels, BackwardMatchesFiniteDifferences) {
  std::vector<double> probs(probs_size()), out(out_size());
  const auto weights = random_values(out_size(), rng);
  auto loss = [&](const std::vector<double>& input) {
    kernels::parallel::attention_forward(input, mask, probs, out, shape);
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += weights[i] * out[i];
    return s;
  };
  loss(qkv);
  std::vector<double> grad(qkv.size());
  kernels::parallel::attention_backward(qkv, probs, weights, grad, shape);
  const double h = 1e-6;
  for (std::size_t i = 0; i < qkv.size(); i += 5) {
    auto plus = qkv, minus = qkv;
    plus[i] += h;
    minus[i] -= h;
    const double fd = (loss(plus) - loss(minus)) / (2 * h);
    EXPECT_NEAR(grad[i], fd, 1e-7 * std::max(1.0, std::abs(fd))) << "qkv[" << i << "]";
  }
}

}  // namespace
}  // namespace linearlens
