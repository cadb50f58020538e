#include "linearlens/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace linearlens::kernels {

void set_num_threads(int n) {
#ifdef _OPENMP
  omp_set_num_threads(std::max(1, n));
#else
  (void)n;
#endif
}

int num_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

// -------------------- reference --------------------

namespace reference {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  }
}

void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = accumulate ? c[p * n + j] : 0.0;
      for (std::size_t i = 0; i < m; ++i) acc += a[i * k + p] * b[i * n + j];
      c[p * n + j] = acc;
    }
  }
}

void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
      c[i * n + j] = acc;
    }
  }
}

void attention_forward(std::span<const double> qkv, std::span<const unsigned char> key_mask,
                       std::span<double> probs, std::span<double> out, const AttentionShape& shape) {
  const std::size_t T = shape.seq, H = shape.heads, hd = shape.head_dim, D = shape.model_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> q(T * hd), k(T * hd), v(T * hd);
  for (std::size_t b = 0; b < shape.batch; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        const double* row = &qkv[(b * T + t) * 3 * D];
        for (std::size_t e = 0; e < hd; ++e) {
          q[t * hd + e] = row[h * hd + e];
          k[t * hd + e] = row[D + h * hd + e];
          v[t * hd + e] = row[2 * D + h * hd + e];
        }
      }
      double* p = &probs[(b * H + h) * T * T];
      for (std::size_t t = 0; t < T; ++t) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < T; ++s) {
          p[t * T + s] = 0.0;
          if (s > t || !key_mask[b * T + s]) continue;
          double dot = 0.0;
          for (std::size_t e = 0; e < hd; ++e) dot += q[t * hd + e] * k[s * hd + e];
          p[t * T + s] = dot * scale;
          mx = std::max(mx, dot * scale);
        }
        double z = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          if (!key_mask[b * T + s]) continue;
          p[t * T + s] = std::exp(p[t * T + s] - mx);
          z += p[t * T + s];
        }
        for (std::size_t s = 0; s <= t; ++s) {
          if (key_mask[b * T + s]) p[t * T + s] /= z;
        }
        for (std::size_t e = 0; e < hd; ++e) {
          double acc = 0.0;
          for (std::size_t s = 0; s <= t; ++s) acc += p[t * T + s] * v[s * hd + e];
          out[(b * T + t) * D + h * hd + e] = acc;
        }
      }
    }
  }
}

void attention_backward(std::span<const double> qkv, std::span<const double> probs,
                        std::span<const double> d_out, std::span<double> d_qkv,
                        const AttentionShape& shape) {
  const std::size_t T = shape.seq, H = shape.heads, hd = shape.head_dim, D = shape.model_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::fill(d_qkv.begin(), d_qkv.end(), 0.0);
  std::vector<double> dp(T);
  for (std::size_t b = 0; b < shape.batch; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      const double* p = &probs[(b * H + h) * T * T];
      auto at = [&](std::size_t t, std::size_t section, std::size_t e) {
        return (b * T + t) * 3 * D + section * D + h * hd + e;
      };
      for (std::size_t t = 0; t < T; ++t) {
        const double* g = &d_out[(b * T + t) * D + h * hd];
        for (std::size_t s = 0; s <= t; ++s) {
          double acc = 0.0;
          for (std::size_t e = 0; e < hd; ++e) acc += g[e] * qkv[at(s, 2, e)];
          dp[s] = acc;
          for (std::size_t e = 0; e < hd; ++e) d_qkv[at(s, 2, e)] += p[t * T + s] * g[e];
        }
        double inner = 0.0;
        for (std::size_t s = 0; s <= t; ++s) inner += p[t * T + s] * dp[s];
        for (std::size_t s = 0; s <= t; ++s) {
          const double ds = p[t * T + s] * (dp[s] - inner) * scale;
          for (std::size_t e = 0; e < hd; ++e) {
            d_qkv[at(t, 0, e)] += ds * qkv[at(s, 1, e)];
            d_qkv[at(s, 1, e)] += ds * qkv[at(t, 0, e)];
          }
        }
      }
    }
  }
}

}  // namespace reference

// -------------------- parallel --------------------

namespace parallel {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  const double* A = a.data();
  const double* B = b.data();
  double* C = c.data();
  // Four output rows share each streamed row of b; every element still sums over p in order.
  const std::int64_t quads = static_cast<std::int64_t>((m + 3) / 4);
#pragma omp parallel for schedule(static)
  for (std::int64_t q = 0; q < quads; ++q) {
    const std::size_t i0 = static_cast<std::size_t>(q) * 4;
    const std::size_t rows = std::min<std::size_t>(4, m - i0);
    if (!accumulate) std::fill(C + i0 * n, C + (i0 + rows) * n, 0.0);
    if (rows == 4) {
      double* c0 = C + i0 * n;
      double* c1 = c0 + n;
      double* c2 = c1 + n;
      double* c3 = c2 + n;
      for (std::size_t p = 0; p < k; ++p) {
        const double a0 = A[i0 * k + p], a1 = A[(i0 + 1) * k + p];
        const double a2 = A[(i0 + 2) * k + p], a3 = A[(i0 + 3) * k + p];
        const double* brow = B + p * n;
        for (std::size_t j = 0; j < n; ++j) {
          const double bv = brow[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    } else {
      for (std::size_t i = i0; i < i0 + rows; ++i) {
        double* crow = C + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          const double* brow = B + p * n;
          for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      }
    }
  }
}

void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  const double* A = a.data();
  const double* B = b.data();
  double* C = c.data();
  constexpr std::size_t kBlock = 64;  // rows of a/b kept hot across output rows
  if (!accumulate) std::fill(C, C + k * n, 0.0);
  for (std::size_t i0 = 0; i0 < m; i0 += kBlock) {
    const std::size_t i1 = std::min(m, i0 + kBlock);
#pragma omp parallel for schedule(static)
    for (std::int64_t p = 0; p < static_cast<std::int64_t>(k); ++p) {
      double* crow = C + p * n;
      for (std::size_t i = i0; i < i1; ++i) {
        const double av = A[i * k + p];
        if (av == 0.0) continue;
        const double* brow = B + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  // Transposing b once turns the strided dot products into contiguous axpys.
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  matmul(a, bt, c, m, k, n, accumulate);
}

void attention_forward(std::span<const double> qkv, std::span<const unsigned char> key_mask,
                       std::span<double> probs, std::span<double> out, const AttentionShape& shape) {
  const std::size_t T = shape.seq, H = shape.heads, hd = shape.head_dim, D = shape.model_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const std::int64_t jobs = static_cast<std::int64_t>(shape.batch * H);
#pragma omp parallel for schedule(static)
  for (std::int64_t job = 0; job < jobs; ++job) {
    const std::size_t b = static_cast<std::size_t>(job) / H;
    const std::size_t h = static_cast<std::size_t>(job) % H;
    double* p = probs.data() + job * T * T;
    std::fill(p, p + T * T, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      const double* q = qkv.data() + (b * T + t) * 3 * D + h * hd;
      double* prow = p + t * T;
      double mx = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (std::size_t s = 0; s <= t; ++s) {
        if (!key_mask[b * T + s]) continue;
        const double* kk = qkv.data() + (b * T + s) * 3 * D + D + h * hd;
        double dot = 0.0;
        for (std::size_t e = 0; e < hd; ++e) dot += q[e] * kk[e];
        prow[s] = dot * scale;
        mx = std::max(mx, prow[s]);
        any = true;
      }
      double* o = out.data() + (b * T + t) * D + h * hd;
      std::fill(o, o + hd, 0.0);
      if (!any) continue;
      double z = 0.0;
      for (std::size_t s = 0; s <= t; ++s) {
        if (!key_mask[b * T + s]) continue;
        prow[s] = std::exp(prow[s] - mx);
        z += prow[s];
      }
      for (std::size_t s = 0; s <= t; ++s) {
        if (!key_mask[b * T + s]) continue;
        prow[s] /= z;
        const double* vv = qkv.data() + (b * T + s) * 3 * D + 2 * D + h * hd;
        for (std::size_t e = 0; e < hd; ++e) o[e] += prow[s] * vv[e];
      }
    }
  }
}

void attention_backward(std::span<const double> qkv, std::span<const double> probs,
                        std::span<const double> d_out, std::span<double> d_qkv,
                        const AttentionShape& shape) {
  const std::size_t T = shape.seq, H = shape.heads, hd = shape.head_dim, D = shape.model_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const std::int64_t jobs = static_cast<std::int64_t>(shape.batch * H);
#pragma omp parallel for schedule(static)
  for (std::int64_t job = 0; job < jobs; ++job) {
    const std::size_t b = static_cast<std::size_t>(job) / H;
    const std::size_t h = static_cast<std::size_t>(job) % H;
    const double* p = probs.data() + job * T * T;
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t sec = 0; sec < 3; ++sec) {
        double* g = d_qkv.data() + (b * T + t) * 3 * D + sec * D + h * hd;
        std::fill(g, g + hd, 0.0);
      }
    }
    std::vector<double> dp(T);
    for (std::size_t t = 0; t < T; ++t) {
      const double* g = d_out.data() + (b * T + t) * D + h * hd;
      const double* prow = p + t * T;
      double inner = 0.0;
      for (std::size_t s = 0; s <= t; ++s) {
        if (prow[s] == 0.0) {
          dp[s] = 0.0;
          continue;
        }
        const double* vv = qkv.data() + (b * T + s) * 3 * D + 2 * D + h * hd;
        double* dv = d_qkv.data() + (b * T + s) * 3 * D + 2 * D + h * hd;
        double acc = 0.0;
        for (std::size_t e = 0; e < hd; ++e) {
          acc += g[e] * vv[e];
          dv[e] += prow[s] * g[e];
        }
        dp[s] = acc;
        inner += prow[s] * acc;
      }
      const double* q = qkv.data() + (b * T + t) * 3 * D + h * hd;
      double* dq = d_qkv.data() + (b * T + t) * 3 * D + h * hd;
      for (std::size_t s = 0; s <= t; ++s) {
        if (prow[s] == 0.0) continue;
        const double ds = prow[s] * (dp[s] - inner) * scale;
        const double* kk = qkv.data() + (b * T + s) * 3 * D + D + h * hd;
        double* dk = d_qkv.data() + (b * T + s) * 3 * D + D + h * hd;
        for (std::size_t e = 0; e < hd; ++e) {
          dq[e] += ds * kk[e];
          dk[e] += ds * q[e];
        }
      }
    }
  }
}

}  // namespace parallel

}  // namespace linearlens::kernels
