#pragma once

// Building blocks shared by every network variant: linear maps, dropout,
// post-norm attention/FFN blocks and the MLP head. Forward functions fill an
// optional cache that the matching backward function consumes.

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include "crossfuse/matrix.hpp"
#include "crossfuse/params.hpp"

namespace crossfuse {

/// Raised when a forward or backward pass produces NaN/Inf; names the sub-layer.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Dropout is active only when rate > 0 and an RNG is supplied.
struct Dropout {
    double rate = 0.0;
    std::mt19937_64* rng = nullptr;

    bool active() const noexcept { return rate > 0.0 && rng != nullptr; }
};

/// Inverted-dropout mask (entries 0 or 1/(1-rate)); empty when dropout is inactive.
template <typename Real>
Matrix<Real> dropout_mask(std::size_t rows, std::size_t cols, Dropout& dropout);

template <typename Real>
void apply_mask(Matrix<Real>& x, const Matrix<Real>& mask);

template <typename Real>
void check_finite(const Matrix<Real>& x, const std::string& where);

/// y = x W + b
template <typename Real>
Matrix<Real> linear_forward(const Matrix<Real>& x, const Linear<Real>& p);

/// Accumulates dW, db into grad; writes dx when requested.
template <typename Real>
void linear_backward(const Matrix<Real>& x, const Matrix<Real>& dy, const Linear<Real>& p,
                     Linear<Real>& grad, Matrix<Real>* dx = nullptr);

template <typename Real>
Matrix<Real> layer_norm(const Matrix<Real>& x, const LayerNormParams<Real>& p, Real eps,
                        Matrix<Real>* mean = nullptr, Matrix<Real>* rstd = nullptr);

template <typename Real>
struct BlockCache {
    Matrix<Real> xq, xkv;
    Matrix<Real> q, k, v, probs, ctx;
    Matrix<Real> attn_mask;
    Matrix<Real> sum1, mean1, rstd1;
    Matrix<Real> h;
    Matrix<Real> ffn_pre, ffn_act;
    Matrix<Real> ffn_mask;
    Matrix<Real> sum2, mean2, rstd2;
};

struct BlockShape {
    std::size_t batch = 1;
    std::size_t heads = 1;
    double eps = 1e-5;
};

/// y = LN2(h + FFN(h)), h = LN1(xq + MHA(Q=xq, K=V=xkv)).
/// xq is [batch*q_len, d], xkv is [batch*kv_len, d].
template <typename Real>
Matrix<Real> block_forward(const BlockParams<Real>& p, const Matrix<Real>& xq, const Matrix<Real>& xkv,
                           const BlockShape& shape, Dropout& dropout, BlockCache<Real>* cache,
                           const std::string& name);

/// Accumulates parameter gradients; overwrites dxq and dxkv.
template <typename Real>
void block_backward(const BlockParams<Real>& p, const BlockCache<Real>& cache, const Matrix<Real>& dy,
                    const BlockShape& shape, BlockParams<Real>& grad, Matrix<Real>& dxq,
                    Matrix<Real>& dxkv);

template <typename Real>
struct HeadCache {
    Matrix<Real> features;
    Matrix<Real> hidden_pre;
    Matrix<Real> hidden_act;
    Matrix<Real> mask;
};

/// logits = GELU(features W1 + b1) [dropout] W2 + b2
template <typename Real>
Matrix<Real> head_forward(const HeadParams<Real>& p, const Matrix<Real>& features, Dropout& dropout,
                          HeadCache<Real>* cache);

template <typename Real>
Matrix<Real> head_backward(const HeadParams<Real>& p, const HeadCache<Real>& cache,
                           const Matrix<Real>& dlogits, HeadParams<Real>& grad);

// Initialisers. Weights: symmetric uniform with limit sqrt(6 / (fan_in + fan_out)).
template <typename Real>
Linear<Real> init_linear(std::size_t in, std::size_t out, std::mt19937_64& rng);

template <typename Real>
LayerNormParams<Real> init_layer_norm(std::size_t d);

template <typename Real>
BlockParams<Real> init_block(std::size_t d, std::size_t ffn, std::mt19937_64& rng);

template <typename Real>
HeadParams<Real> init_head(std::size_t in, std::size_t hidden, std::size_t classes, std::mt19937_64& rng);

/// Normal(0, std) truncated to +-2 std by rejection.
template <typename Real>
Matrix<Real> init_token(std::size_t d, double std, std::mt19937_64& rng);

}  // namespace crossfuse
