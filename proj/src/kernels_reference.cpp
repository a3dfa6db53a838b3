// Serial textbook versions of the parallel kernels. They favour obviousness
// over speed: dot-product matmuls, explicit two-pass statistics, and full
// softmax Jacobian contractions in the attention backward pass.

#include "crossfuse/kernels.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace crossfuse::kernels::reference {

template <typename Real>
void matmul(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
            std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            Real sum = 0;
            for (std::size_t p = 0; p < k; ++p) sum += a[i * k + p] * b[p * n + j];
            c[i * n + j] = accumulate ? c[i * n + j] + sum : sum;
        }
}

template <typename Real>
void matmul_bt(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            Real sum = 0;
            for (std::size_t p = 0; p < k; ++p) sum += a[i * k + p] * b[j * k + p];
            c[i * n + j] = accumulate ? c[i * n + j] + sum : sum;
        }
}

template <typename Real>
void matmul_at(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            Real sum = 0;
            for (std::size_t r = 0; r < m; ++r) sum += a[r * k + i] * b[r * n + j];
            c[i * n + j] = accumulate ? c[i * n + j] + sum : sum;
        }
}

template <typename Real>
void layer_norm_forward(std::span<const Real> x, std::span<const Real> gamma,
                        std::span<const Real> beta, std::span<Real> y, std::span<Real> mean,
                        std::span<Real> rstd, std::size_t rows, std::size_t cols, Real eps) {
    for (std::size_t r = 0; r < rows; ++r) {
        Real mu = 0;
        for (std::size_t c = 0; c < cols; ++c) mu += x[r * cols + c];
        mu /= static_cast<Real>(cols);
        Real var = 0;
        for (std::size_t c = 0; c < cols; ++c) var += (x[r * cols + c] - mu) * (x[r * cols + c] - mu);
        var /= static_cast<Real>(cols);
        mean[r] = mu;
        rstd[r] = Real(1) / std::sqrt(var + eps);
        for (std::size_t c = 0; c < cols; ++c)
            y[r * cols + c] = gamma[c] * (x[r * cols + c] - mu) * rstd[r] + beta[c];
    }
}

template <typename Real>
void layer_norm_backward(std::span<const Real> dy, std::span<const Real> x,
                         std::span<const Real> gamma, std::span<const Real> mean,
                         std::span<const Real> rstd, std::span<Real> dx, std::span<Real> dgamma,
                         std::span<Real> dbeta, std::size_t rows, std::size_t cols) {
    // Full Jacobian contraction: dx_i = sum_j dy_j * gamma_j * d(xhat_j)/d(x_i),
    // d(xhat_j)/d(x_i) = rstd * (delta_ij - 1/n - xhat_i * xhat_j / n).
    const Real n = static_cast<Real>(cols);
    for (std::size_t r = 0; r < rows; ++r) {
        std::vector<Real> xhat(cols);
        for (std::size_t c = 0; c < cols; ++c) xhat[c] = (x[r * cols + c] - mean[r]) * rstd[r];
        for (std::size_t i = 0; i < cols; ++i) {
            Real sum = 0;
            for (std::size_t j = 0; j < cols; ++j) {
                const Real delta = i == j ? Real(1) : Real(0);
                sum += dy[r * cols + j] * gamma[j] * rstd[r] * (delta - Real(1) / n - xhat[i] * xhat[j] / n);
            }
            dx[r * cols + i] = sum;
        }
        for (std::size_t c = 0; c < cols; ++c) {
            dgamma[c] += dy[r * cols + c] * xhat[c];
            dbeta[c] += dy[r * cols + c];
        }
    }
}

template <typename Real>
void attention_forward(std::span<const Real> q, std::span<const Real> k, std::span<const Real> v,
                       std::span<Real> probs, std::span<Real> ctx, const AttentionShape& s) {
    const std::size_t d = s.model_dim();
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(s.head_dim));
    for (std::size_t b = 0; b < s.batch; ++b)
        for (std::size_t h = 0; h < s.heads; ++h)
            for (std::size_t i = 0; i < s.q_len; ++i) {
                std::vector<Real> score(s.kv_len);
                for (std::size_t j = 0; j < s.kv_len; ++j) {
                    Real dot = 0;
                    for (std::size_t e = 0; e < s.head_dim; ++e)
                        dot += q[(b * s.q_len + i) * d + h * s.head_dim + e] *
                               k[(b * s.kv_len + j) * d + h * s.head_dim + e];
                    score[j] = dot * scale;
                }
                Real mx = -std::numeric_limits<Real>::infinity();
                for (Real sc : score) mx = std::max(mx, sc);
                Real z = 0;
                for (Real sc : score) z += std::exp(sc - mx);
                for (std::size_t j = 0; j < s.kv_len; ++j)
                    probs[((b * s.heads + h) * s.q_len + i) * s.kv_len + j] = std::exp(score[j] - mx) / z;
                for (std::size_t e = 0; e < s.head_dim; ++e) {
                    Real acc = 0;
                    for (std::size_t j = 0; j < s.kv_len; ++j)
                        acc += probs[((b * s.heads + h) * s.q_len + i) * s.kv_len + j] *
                               v[(b * s.kv_len + j) * d + h * s.head_dim + e];
                    ctx[(b * s.q_len + i) * d + h * s.head_dim + e] = acc;
                }
            }
}

template <typename Real>
void attention_backward(std::span<const Real> dctx, std::span<const Real> q,
                        std::span<const Real> k, std::span<const Real> v,
                        std::span<const Real> probs, std::span<Real> dq, std::span<Real> dk,
                        std::span<Real> dv, const AttentionShape& s) {
    const std::size_t d = s.model_dim();
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(s.head_dim));
    auto qi = [&](std::size_t b, std::size_t i, std::size_t h, std::size_t e) {
        return (b * s.q_len + i) * d + h * s.head_dim + e;
    };
    auto kj = [&](std::size_t b, std::size_t j, std::size_t h, std::size_t e) {
        return (b * s.kv_len + j) * d + h * s.head_dim + e;
    };
    for (std::size_t b = 0; b < s.batch; ++b)
        for (std::size_t h = 0; h < s.heads; ++h) {
            auto p = [&](std::size_t i, std::size_t j) {
                return probs[((b * s.heads + h) * s.q_len + i) * s.kv_len + j];
            };
            // dP[i,j] = dctx_i . v_j
            std::vector<Real> dp(s.q_len * s.kv_len);
            for (std::size_t i = 0; i < s.q_len; ++i)
                for (std::size_t j = 0; j < s.kv_len; ++j) {
                    Real acc = 0;
                    for (std::size_t e = 0; e < s.head_dim; ++e) acc += dctx[qi(b, i, h, e)] * v[kj(b, j, h, e)];
                    dp[i * s.kv_len + j] = acc;
                }
            // dS[i,j] = sum_l dP[i,l] * P[i,l] * (delta_lj - P[i,j])
            std::vector<Real> ds(s.q_len * s.kv_len);
            for (std::size_t i = 0; i < s.q_len; ++i)
                for (std::size_t j = 0; j < s.kv_len; ++j) {
                    Real acc = 0;
                    for (std::size_t l = 0; l < s.kv_len; ++l)
                        acc += dp[i * s.kv_len + l] * p(i, l) * ((l == j ? Real(1) : Real(0)) - p(i, j));
                    ds[i * s.kv_len + j] = acc;
                }
            for (std::size_t e = 0; e < s.head_dim; ++e) {
                for (std::size_t i = 0; i < s.q_len; ++i) {
                    Real acc = 0;
                    for (std::size_t j = 0; j < s.kv_len; ++j) acc += ds[i * s.kv_len + j] * k[kj(b, j, h, e)];
                    dq[qi(b, i, h, e)] = acc * scale;
                }
                for (std::size_t j = 0; j < s.kv_len; ++j) {
                    Real acck = 0;
                    Real accv = 0;
                    for (std::size_t i = 0; i < s.q_len; ++i) {
                        acck += ds[i * s.kv_len + j] * q[qi(b, i, h, e)];
                        accv += p(i, j) * dctx[qi(b, i, h, e)];
                    }
                    dk[kj(b, j, h, e)] = acck * scale;
                    dv[kj(b, j, h, e)] = accv;
                }
            }
        }
}

#define CROSSFUSE_INSTANTIATE_REFERENCE(Real)                                                       \
    template void matmul<Real>(std::span<const Real>, std::span<const Real>, std::span<Real>,       \
                               std::size_t, std::size_t, std::size_t, bool);                        \
    template void matmul_bt<Real>(std::span<const Real>, std::span<const Real>, std::span<Real>,    \
                                  std::size_t, std::size_t, std::size_t, bool);                     \
    template void matmul_at<Real>(std::span<const Real>, std::span<const Real>, std::span<Real>,    \
                                  std::size_t, std::size_t, std::size_t, bool);                     \
    template void layer_norm_forward<Real>(std::span<const Real>, std::span<const Real>,            \
                                           std::span<const Real>, std::span<Real>,                  \
                                           std::span<Real>, std::span<Real>, std::size_t,           \
                                           std::size_t, Real);                                      \
    template void layer_norm_backward<Real>(std::span<const Real>, std::span<const Real>,           \
                                            std::span<const Real>, std::span<const Real>,           \
                                            std::span<const Real>, std::span<Real>,                 \
                                            std::span<Real>, std::span<Real>, std::size_t,          \
                                            std::size_t);                                           \
    template void attention_forward<Real>(std::span<const Real>, std::span<const Real>,             \
                                          std::span<const Real>, std::span<Real>,                   \
                                          std::span<Real>, const AttentionShape&);                  \
    template void attention_backward<Real>(std::span<const Real>, std::span<const Real>,            \
                                           std::span<const Real>, std::span<const Real>,            \
                                           std::span<const Real>, std::span<Real>,                  \
                                           std::span<Real>, std::span<Real>,                        \
                                           const AttentionShape&);

CROSSFUSE_INSTANTIATE_REFERENCE(float)
CROSSFUSE_INSTANTIATE_REFERENCE(double)

#undef CROSSFUSE_INSTANTIATE_REFERENCE

}  // namespace crossfuse::kernels::reference
