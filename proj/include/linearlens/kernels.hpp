#pragma once

#include <cstddef>
#include <span>

// Dense compute kernels used by the decoder and the linear algebra layer.
//
// `parallel` kernels split work across OpenMP threads by output row (or by
// batch*head for attention), so every output element is accumulated by one
// thread in a fixed order: results do not depend on the thread count.
// `reference` kernels are the plain serial loops the parallel ones are
// tested and benchmarked against.
//
// All matrices are row-major. `accumulate` adds into `c` instead of
// overwriting it.

namespace linearlens::kernels {

struct AttentionShape {
  std::size_t batch;
  std::size_t seq;
  std::size_t heads;
  std::size_t head_dim;
  std::size_t model_dim() const noexcept { return heads * head_dim; }
};

// Causal multi-head attention: qkv is [batch*seq × 3*model_dim] laid out q|k|v,
// key_mask is [batch*seq] with 1 for real tokens, probs receives
// [batch*heads × seq × seq] and out is [batch*seq × model_dim]. A query with no
// visible key produces zeros. attention_backward overwrites d_qkv.

namespace reference {
// c[m×n] = a[m×k] · b[k×n]
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);
// c[k×n] = a[m×k]ᵀ · b[m×n]
void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);
// c[m×n] = a[m×k] · b[n×k]ᵀ
void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);
void attention_forward(std::span<const double> qkv, std::span<const unsigned char> key_mask,
                       std::span<double> probs, std::span<double> out, const AttentionShape& shape);
void attention_backward(std::span<const double> qkv, std::span<const double> probs,
                        std::span<const double> d_out, std::span<double> d_qkv,
                        const AttentionShape& shape);
}  // namespace reference

namespace parallel {
// c[m×n] = a[m×k] · b[k×n]
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);
// c[k×n] = a[m×k]ᵀ · b[m×n]
void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);
// c[m×n] = a[m×k] · b[n×k]ᵀ
void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);
void attention_forward(std::span<const double> qkv, std::span<const unsigned char> key_mask,
                       std::span<double> probs, std::span<double> out, const AttentionShape& shape);
void attention_backward(std::span<const double> qkv, std::span<const double> probs,
                        std::span<const double> d_out, std::span<double> d_qkv,
                        const AttentionShape& shape);
}  // namespace parallel

using parallel::attention_backward;
using parallel::attention_forward;
using parallel::matmul;
using parallel::matmul_nt;
using parallel::matmul_tn;

void set_num_threads(int n);
int num_threads();

}  // namespace linearlens::kernels
