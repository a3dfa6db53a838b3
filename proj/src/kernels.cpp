#include "crossfuse/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace crossfuse::kernels {

namespace {

// Row block used when a kernel partitions output rows that are reduced
// over a long shared dimension.
constexpr std::size_t kRowBlock = 16;

template <typename Real>
void transpose(std::span<const Real> src, std::vector<Real>& dst, std::size_t rows, std::size_t cols) {
    dst.resize(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void set_num_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

template <typename Real>
void matmul(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
            std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    const Real* pa = a.data();
    const Real* pb = b.data();
    Real* pc = c.data();
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < m; ++i) {
        Real* crow = pc + i * n;
        if (!accumulate) std::fill(crow, crow + n, Real(0));
        const Real* arow = pa + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const Real aip = arow[p];
            const Real* brow = pb + p * n;
#pragma omp simd
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

template <typename Real>
void matmul_bt(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    // b is [n,k]; transposing once lets the inner loop run over contiguous columns.
    std::vector<Real> bt;
    transpose(b, bt, n, k);
    matmul<Real>(a, bt, c, m, k, n, accumulate);
}

template <typename Real>
void matmul_at(std::span<const Real> a, std::span<const Real> b, std::span<Real> c,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    const Real* pa = a.data();
    const Real* pb = b.data();
    Real* pc = c.data();
    const std::size_t blocks = (k + kRowBlock - 1) / kRowBlock;
#pragma omp parallel for schedule(static)
    for (std::size_t blk = 0; blk < blocks; ++blk) {
        const std::size_t lo = blk * kRowBlock;
        const std::size_t hi = std::min(k, lo + kRowBlock);
        if (!accumulate) std::fill(pc + lo * n, pc + hi * n, Real(0));
        for (std::size_t r = 0; r < m; ++r) {
            const Real* arow = pa + r * k;
            const Real* brow = pb + r * n;
            for (std::size_t i = lo; i < hi; ++i) {
                const Real ari = arow[i];
                Real* crow = pc + i * n;
#pragma omp simd
                for (std::size_t j = 0; j < n; ++j) crow[j] += ari * brow[j];
            }
        }
    }
}

template <typename Real>
void add_row_vector(std::span<Real> x, std::span<const Real> bias, std::size_t rows, std::size_t cols) {
    Real* px = x.data();
    const Real* pb = bias.data();
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < rows; ++r) {
        Real* row = px + r * cols;
#pragma omp simd
        for (std::size_t c = 0; c < cols; ++c) row[c] += pb[c];
    }
}

template <typename Real>
void column_sum(std::span<const Real> x, std::span<Real> out, std::size_t rows, std::size_t cols,
                bool accumulate) {
    if (!accumulate) std::fill(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(cols), Real(0));
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* row = x.data() + r * cols;
#pragma omp simd
        for (std::size_t c = 0; c < cols; ++c) out[c] += row[c];
    }
}

template <typename Real>
void layer_norm_forward(std::span<const Real> x, std::span<const Real> gamma,
                        std::span<const Real> beta, std::span<Real> y, std::span<Real> mean,
                        std::span<Real> rstd, std::size_t rows, std::size_t cols, Real eps) {
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* xr = x.data() + r * cols;
        Real* yr = y.data() + r * cols;
        Real mu = 0;
        for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
        mu /= static_cast<Real>(cols);
        Real var = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            const Real d = xr[c] - mu;
            var += d * d;
        }
        var /= static_cast<Real>(cols);
        const Real rs = Real(1) / std::sqrt(var + eps);
        for (std::size_t c = 0; c < cols; ++c) yr[c] = (xr[c] - mu) * rs * gamma[c] + beta[c];
        mean[r] = mu;
        rstd[r] = rs;
    }
}

template <typename Real>
void layer_norm_backward(std::span<const Real> dy, std::span<const Real> x,
                         std::span<const Real> gamma, std::span<const Real> mean,
                         std::span<const Real> rstd, std::span<Real> dx, std::span<Real> dgamma,
                         std::span<Real> dbeta, std::size_t rows, std::size_t cols) {
    const Real inv_n = Real(1) / static_cast<Real>(cols);
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* dyr = dy.data() + r * cols;
        const Real* xr = x.data() + r * cols;
        Real* dxr = dx.data() + r * cols;
        const Real mu = mean[r];
        const Real rs = rstd[r];
        Real sum_g = 0;
        Real sum_gx = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            const Real g = dyr[c] * gamma[c];
            sum_g += g;
            sum_gx += g * (xr[c] - mu) * rs;
        }
        sum_g *= inv_n;
        sum_gx *= inv_n;
        for (std::size_t c = 0; c < cols; ++c) {
            const Real xhat = (xr[c] - mu) * rs;
            dxr[c] = rs * (dyr[c] * gamma[c] - sum_g - xhat * sum_gx);
        }
    }
    // Column reductions: each thread owns a slice of columns.
#pragma omp parallel for schedule(static)
    for (std::size_t c = 0; c < cols; ++c) {
        Real sg = 0;
        Real sb = 0;
        for (std::size_t r = 0; r < rows; ++r) {
            const Real d = dy[r * cols + c];
            sg += d * (x[r * cols + c] - mean[r]) * rstd[r];
            sb += d;
        }
        dgamma[c] += sg;
        dbeta[c] += sb;
    }
}

template <typename Real>
void gelu_forward(std::span<const Real> x, std::span<Real> y) {
    const Real inv_sqrt2 = Real(1) / std::numbers::sqrt2_v<Real>;
    const std::size_t n = x.size();
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < n; ++i) y[i] = Real(0.5) * x[i] * (Real(1) + std::erf(x[i] * inv_sqrt2));
}

template <typename Real>
void gelu_backward(std::span<const Real> x, std::span<const Real> dy, std::span<Real> dx) {
    const Real inv_sqrt2 = Real(1) / std::numbers::sqrt2_v<Real>;
    const Real inv_sqrt2pi = std::numbers::inv_sqrtpi_v<Real> * inv_sqrt2;
    const std::size_t n = x.size();
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < n; ++i) {
        const Real xi = x[i];
        const Real cdf = Real(0.5) * (Real(1) + std::erf(xi * inv_sqrt2));
        const Real pdf = inv_sqrt2pi * std::exp(Real(-0.5) * xi * xi);
        dx[i] = dy[i] * (cdf + xi * pdf);
    }
}

template <typename Real>
void attention_forward(std::span<const Real> q, std::span<const Real> k, std::span<const Real> v,
                       std::span<Real> probs, std::span<Real> ctx, const AttentionShape& s) {
    const std::size_t d = s.model_dim();
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(s.head_dim));
    const std::size_t jobs = s.batch * s.heads;
#pragma omp parallel for schedule(static)
    for (std::size_t job = 0; job < jobs; ++job) {
        const std::size_t b = job / s.heads;
        const std::size_t h = job % s.heads;
        const std::size_t off = h * s.head_dim;
        for (std::size_t i = 0; i < s.q_len; ++i) {
            const Real* qi = q.data() + (b * s.q_len + i) * d + off;
            Real* p = probs.data() + ((b * s.heads + h) * s.q_len + i) * s.kv_len;
            Real maxval = -std::numeric_limits<Real>::infinity();
            for (std::size_t j = 0; j < s.kv_len; ++j) {
                const Real* kj = k.data() + (b * s.kv_len + j) * d + off;
                Real dot = 0;
                for (std::size_t e = 0; e < s.head_dim; ++e) dot += qi[e] * kj[e];
                p[j] = dot * scale;
                maxval = std::max(maxval, p[j]);
            }
            Real sum = 0;
            for (std::size_t j = 0; j < s.kv_len; ++j) {
                p[j] = std::exp(p[j] - maxval);
                sum += p[j];
            }
            const Real inv = Real(1) / sum;
            Real* ci = ctx.data() + (b * s.q_len + i) * d + off;
            std::fill(ci, ci + s.head_dim, Real(0));
            for (std::size_t j = 0; j < s.kv_len; ++j) {
                p[j] *= inv;
                const Real* vj = v.data() + (b * s.kv_len + j) * d + off;
#pragma omp simd
                for (std::size_t e = 0; e < s.head_dim; ++e) ci[e] += p[j] * vj[e];
            }
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
    const std::size_t jobs = s.batch * s.heads;
#pragma omp parallel for schedule(static)
    for (std::size_t job = 0; job < jobs; ++job) {
        const std::size_t b = job / s.heads;
        const std::size_t h = job % s.heads;
        const std::size_t off = h * s.head_dim;
        std::vector<Real> dp(s.kv_len);
        for (std::size_t i = 0; i < s.q_len; ++i)
            std::fill_n(dq.data() + (b * s.q_len + i) * d + off, s.head_dim, Real(0));
        for (std::size_t j = 0; j < s.kv_len; ++j) {
            std::fill_n(dk.data() + (b * s.kv_len + j) * d + off, s.head_dim, Real(0));
            std::fill_n(dv.data() + (b * s.kv_len + j) * d + off, s.head_dim, Real(0));
        }
        for (std::size_t i = 0; i < s.q_len; ++i) {
            const Real* dci = dctx.data() + (b * s.q_len + i) * d + off;
            const Real* qi = q.data() + (b * s.q_len + i) * d + off;
            Real* dqi = dq.data() + (b * s.q_len + i) * d + off;
            const Real* p = probs.data() + ((b * s.heads + h) * s.q_len + i) * s.kv_len;
            Real weighted = 0;
            for (std::size_t j = 0; j < s.kv_len; ++j) {
                const Real* vj = v.data() + (b * s.kv_len + j) * d + off;
                Real* dvj = dv.data() + (b * s.kv_len + j) * d + off;
                Real dot = 0;
                for (std::size_t e = 0; e < s.head_dim; ++e) {
                    dot += dci[e] * vj[e];
                    dvj[e] += p[j] * dci[e];
                }
                dp[j] = dot;
                weighted += p[j] * dot;
            }
            for (std::size_t j = 0; j < s.kv_len; ++j) {
                const Real ds = p[j] * (dp[j] - weighted) * scale;
                const Real* kj = k.data() + (b * s.kv_len + j) * d + off;
                Real* dkj = dk.data() + (b * s.kv_len + j) * d + off;
#pragma omp simd
                for (std::size_t e = 0; e < s.head_dim; ++e) {
                    dqi[e] += ds * kj[e];
                    dkj[e] += ds * qi[e];
                }
            }
        }
    }
}

template <typename Real>
void softmax_rows(std::span<const Real> logits, std::span<Real> probs, std::size_t rows,
                  std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* lr = logits.data() + r * cols;
        Real* pr = probs.data() + r * cols;
        const Real mx = *std::max_element(lr, lr + cols);
        Real sum = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            pr[c] = std::exp(lr[c] - mx);
            sum += pr[c];
        }
        for (std::size_t c = 0; c < cols; ++c) pr[c] /= sum;
    }
}

#define CROSSFUSE_INSTANTIATE_KERNELS(Real)                                                         \
    template void matmul<Real>(std::span<const Real>, std::span<const Real>, std::span<Real>,       \
                               std::size_t, std::size_t, std::size_t, bool);                        \
    template void matmul_bt<Real>(std::span<const Real>, std::span<const Real>, std::span<Real>,    \
                                  std::size_t, std::size_t, std::size_t, bool);                     \
    template void matmul_at<Real>(std::span<const Real>, std::span<const Real>, std::span<Real>,    \
                                  std::size_t, std::size_t, std::size_t, bool);                     \
    template void add_row_vector<Real>(std::span<Real>, std::span<const Real>, std::size_t,         \
                                       std::size_t);                                                \
    template void column_sum<Real>(std::span<const Real>, std::span<Real>, std::size_t,             \
                                   std::size_t, bool);                                              \
    template void layer_norm_forward<Real>(std::span<const Real>, std::span<const Real>,            \
                                           std::span<const Real>, std::span<Real>,                  \
                                           std::span<Real>, std::span<Real>, std::size_t,           \
                                           std::size_t, Real);                                      \
    template void layer_norm_backward<Real>(std::span<const Real>, std::span<const Real>,           \
                                            std::span<const Real>, std::span<const Real>,           \
                                            std::span<const Real>, std::span<Real>,                 \
                                            std::span<Real>, std::span<Real>, std::size_t,          \
                                            std::size_t);                                           \
    template void gelu_forward<Real>(std::span<const Real>, std::span<Real>);                       \
    template void gelu_backward<Real>(std::span<const Real>, std::span<const Real>,                 \
                                      std::span<Real>);                                             \
    template void attention_forward<Real>(std::span<const Real>, std::span<const Real>,             \
                                          std::span<const Real>, std::span<Real>,                   \
                                          std::span<Real>, const AttentionShape&);                  \
    template void attention_backward<Real>(std::span<const Real>, std::span<const Real>,            \
                                           std::span<const Real>, std::span<const Real>,            \
                                           std::span<const Real>, std::span<Real>,                  \
                                           std::span<Real>, std::span<Real>,                        \
                                           const AttentionShape&);                                  \
    template void softmax_rows<Real>(std::span<const Real>, std::span<Real>, std::size_t,           \
                                     std::size_t);

CROSSFUSE_INSTANTIATE_KERNELS(float)
CROSSFUSE_INSTANTIATE_KERNELS(double)

#undef CROSSFUSE_INSTANTIATE_KERNELS

}  // namespace crossfuse::kernels
