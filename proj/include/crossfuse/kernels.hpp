#pragma once

// Dense kernels behind every layer of the fusion network.
//
// Two implementations share each signature:
//   crossfuse::kernels             OpenMP-parallel, used by the model
//   crossfuse::kernels::reference  plain serial loops, kept as a test oracle
//                                  and as the benchmark baseline
//
// The parallel kernels partition work so that every output element is
// produced by exactly one thread with a fixed summation order. Results are
// therefore independent of the thread count.
//
// All matrices are row-major. Instantiated for float and double.

#include <cstddef>
#include <span>

namespace crossfuse::kernels {

/// Shape of a batched multi-head attention call. Q is [batch*q_len, heads*head_dim],
/// K and V are [batch*kv_len, heads*head_dim], probs is [batch, heads, q_len, kv_len].
struct AttentionShape {
    std::size_t batch = 1;
    std::size_t q_len = 1;
    std::size_t kv_len = 1;
    std::size_t heads = 1;
    std::size_t head_dim = 1;

    std::size_t model_dim() const noexcept { return heads * head_dim; }
    std::size_t probs_size() const noexcept { return batch * heads * q_len * kv_len; }
};

// c[m,n] (+)= a[m,k] * b[k,n]
template <typename Real>
void matmul(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
            std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);

// c[m,n] (+)= a[m,k] * b[n,k]^T
template <typename Real>
void matmul_bt(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);

// c[k,n] (+)= a[m,k]^T * b[m,n]
template <typename Real>
void matmul_at(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);

// x[r,:] += bias for every row r
template <typename Real>
void add_row_vector(std::span<Real> x, std::span<const Real> bias, std::size_t rows, std::size_t cols);

// out[c] (+)= sum_r x[r,c]
template <typename Real>
void column_sum(std::span<const Real> x, std::span<Real> out, std::size_t rows, std::size_t cols,
                bool accumulate = false);

/// Per-row layer normalization with population variance. mean and rstd
/// (one entry per row) are saved for the backward pass.
template <typename Real>
void layer_norm_forward(std::span<const Real> x, std::span<const Real> gamma,
                        std::span<const Real> beta, std::span<Real> y, std::span<Real> mean,
                        std::span<Real> rstd, std::size_t rows, std::size_t cols, Real eps);

/// dx is overwritten; dgamma and dbeta are accumulated.
template <typename Real>
void layer_norm_backward(std::span<const Real> dy, std::span<const Real> x,
                         std::span<const Real> gamma, std::span<const Real> mean,
                         std::span<const Real> rstd, std::span<Real> dx, std::span<Real> dgamma,
                         std::span<Real> dbeta, std::size_t rows, std::size_t cols);

// Exact (erf) GELU.
template <typename Real>
void gelu_forward(std::span<const Real> x, std::span<Real> y);

template <typename Real>
void gelu_backward(std::span<const Real> x, std::span<const Real> dy, std::span<Real> dx);

/// Scaled dot-product attention per (batch, head). ctx has the layout of q.
template <typename Real>
void attention_forward(std::span<const Real> q, std::span<const Real> k, std::span<const Real> v,
                       std::span<Real> probs, std::span<Real> ctx, const AttentionShape& shape);

/// dq, dk, dv are overwritten.
template <typename Real>
void attention_backward(std::span<const Real> dctx, std::span<const Real> q,
                        std::span<const Real> k, std::span<const Real> v,
                        std::span<const Real> probs, std::span<Real> dq, std::span<Real> dk,
                        std::span<Real> dv, const AttentionShape& shape);

// Numerically stable row softmax.
template <typename Real>
void softmax_rows(std::span<const Real> logits, std::span<Real> probs, std::size_t rows,
                  std::size_t cols);

/// Number of OpenMP threads the parallel kernels will use (1 without OpenMP).
int max_threads();
void set_num_threads(int n);

}  // namespace crossfuse::kernels

namespace crossfuse::kernels::reference {

template <typename Real>
void matmul(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
            std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);

template <typename Real>
void matmul_bt(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);

template <typename Real>
void matmul_at(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);

template <typename Real>
void layer_norm_forward(std::span<const Real> x, std::span<const Real> gamma,
                        std::span<const Real> beta, std::span<Real> y, std::span<Real> mean,
                        std::span<Real> rstd, std::size_t rows, std::size_t cols, Real eps);

template <typename Real>
void layer_norm_backward(std::span<const Real> dy, std::span<const Real> x,
                         std::span<const Real> gamma, std::span<const Real> mean,
                         std::span<const Real> rstd, std::span<Real> dx, std::span<Real> dgamma,
                         std::span<Real> dbeta, std::size_t rows, std::size_t cols);

template <typename Real>
void attention_forward(std::span<const Real> q, std::span<const Real> k, std::span<const Real> v,
                       std::span<Real> probs, std::span<Real> ctx, const AttentionShape& shape);

template <typename Real>
void attention_backward(std::span<const Real> dctx, std::span<const Real> q,
                        std::span<const Real> k, std::span<const Real> v,
                        std::span<const Real> probs, std::span<Real> dq, std::span<Real> dk,
                        std::span<Real> dv, const AttentionShape& shape);

}  // namespace crossfuse::kernels::reference
