#include "crossfuse/layers.hpp"

#include <cmath>

#include "crossfuse/kernels.hpp"

namespace crossfuse {

template <typename Real>
Matrix<Real> dropout_mask(std::size_t rows, std::size_t cols, Dropout& dropout) {
    if (!dropout.active()) return {};
    Matrix<Real> mask(rows, cols);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    const Real keep = static_cast<Real>(1.0 / (1.0 - dropout.rate));
    for (std::size_t i = 0; i < mask.size(); ++i)
        mask[i] = uniform(*dropout.rng) < dropout.rate ? Real(0) : keep;
    return mask;
}

template <typename Real>
void apply_mask(Matrix<Real>& x, const Matrix<Real>& mask) {
    if (mask.empty()) return;
    for (std::size_t i = 0; i < x.size(); ++i) x[i] *= mask[i];
}

template <typename Real>
void check_finite(const Matrix<Real>& x, const std::string& where) {
    for (std::size_t i = 0; i < x.size(); ++i)
        if (!std::isfinite(x[i])) throw NumericalError(where + ": non-finite value produced");
}

template <typename Real>
Matrix<Real> linear_forward(const Matrix<Real>& x, const Linear<Real>& p) {
    if (x.cols() != p.in_dim())
        throw std::invalid_argument("linear: input has " + std::to_string(x.cols()) + " columns, expected " +
                                    std::to_string(p.in_dim()));
    Matrix<Real> y(x.rows(), p.out_dim());
    kernels::matmul<Real>(x.span(), p.w.span(), y.span(), x.rows(), p.in_dim(), p.out_dim());
    kernels::add_row_vector<Real>(y.span(), p.b.span(), y.rows(), y.cols());
    return y;
}

template <typename Real>
void linear_backward(const Matrix<Real>& x, const Matrix<Real>& dy, const Linear<Real>& p,
                     Linear<Real>& grad, Matrix<Real>* dx) {
    kernels::matmul_at<Real>(x.span(), dy.span(), grad.w.span(), x.rows(), p.in_dim(), p.out_dim(), true);
    kernels::column_sum<Real>(dy.span(), grad.b.span(), dy.rows(), dy.cols(), true);
    if (dx) {
        *dx = Matrix<Real>(x.rows(), p.in_dim());
        kernels::matmul_bt<Real>(dy.span(), p.w.span(), dx->span(), dy.rows(), p.out_dim(), p.in_dim());
    }
}

template <typename Real>
Matrix<Real> layer_norm(const Matrix<Real>& x, const LayerNormParams<Real>& p, Real eps, Matrix<Real>* mean,
                        Matrix<Real>* rstd) {
    Matrix<Real> y(x.rows(), x.cols());
    Matrix<Real> mu(x.rows(), 1);
    Matrix<Real> rs(x.rows(), 1);
    kernels::layer_norm_forward<Real>(x.span(), p.gamma.span(), p.beta.span(), y.span(), mu.span(), rs.span(),
                                      x.rows(), x.cols(), eps);
    if (mean) *mean = std::move(mu);
    if (rstd) *rstd = std::move(rs);
    return y;
}

namespace {

template <typename Real>
Matrix<Real> add(const Matrix<Real>& a, const Matrix<Real>& b) {
    Matrix<Real> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

template <typename Real>
void add_into(Matrix<Real>& a, const Matrix<Real>& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

template <typename Real>
Matrix<Real> gelu(const Matrix<Real>& x) {
    Matrix<Real> y(x.rows(), x.cols());
    kernels::gelu_forward<Real>(x.span(), y.span());
    return y;
}

template <typename Real>
Matrix<Real> layer_norm_grad(const Matrix<Real>& dy, const Matrix<Real>& x, const LayerNormParams<Real>& p,
                             const Matrix<Real>& mean, const Matrix<Real>& rstd, LayerNormParams<Real>& grad) {
    Matrix<Real> dx(x.rows(), x.cols());
    kernels::layer_norm_backward<Real>(dy.span(), x.span(), p.gamma.span(), mean.span(), rstd.span(), dx.span(),
                                       grad.gamma.span(), grad.beta.span(), x.rows(), x.cols());
    return dx;
}

}  // namespace

template <typename Real>
Matrix<Real> block_forward(const BlockParams<Real>& p, const Matrix<Real>& xq, const Matrix<Real>& xkv,
                           const BlockShape& shape, Dropout& dropout, BlockCache<Real>* cache,
                           const std::string& name) {
    const std::size_t d = xq.cols();
    if (xkv.cols() != d || d % shape.heads != 0 || xq.rows() % shape.batch || xkv.rows() % shape.batch)
        throw std::invalid_argument(name + ": inconsistent block input shapes");
    const Real eps = static_cast<Real>(shape.eps);
    kernels::AttentionShape as{shape.batch, xq.rows() / shape.batch, xkv.rows() / shape.batch, shape.heads,
                               d / shape.heads};

    Matrix<Real> q = linear_forward(xq, p.attn.q);
    Matrix<Real> k = linear_forward(xkv, p.attn.k);
    Matrix<Real> v = linear_forward(xkv, p.attn.v);
    Matrix<Real> probs(1, as.probs_size());
    Matrix<Real> ctx(xq.rows(), d);
    kernels::attention_forward<Real>(q.span(), k.span(), v.span(), probs.span(), ctx.span(), as);
    Matrix<Real> a = linear_forward(ctx, p.attn.o);
    Matrix<Real> attn_mask = dropout_mask<Real>(a.rows(), a.cols(), dropout);
    apply_mask(a, attn_mask);
    check_finite(a, name + ".attn");

    Matrix<Real> sum1 = add(xq, a);
    Matrix<Real> mean1, rstd1;
    Matrix<Real> h = layer_norm(sum1, p.norm_attn, eps, &mean1, &rstd1);

    Matrix<Real> ffn_pre = linear_forward(h, p.ffn_in);
    Matrix<Real> ffn_act = gelu(ffn_pre);
    Matrix<Real> f = linear_forward(ffn_act, p.ffn_out);
    Matrix<Real> ffn_mask = dropout_mask<Real>(f.rows(), f.cols(), dropout);
    apply_mask(f, ffn_mask);
    check_finite(f, name + ".ffn");

    Matrix<Real> sum2 = add(h, f);
    Matrix<Real> mean2, rstd2;
    Matrix<Real> y = layer_norm(sum2, p.norm_ffn, eps, &mean2, &rstd2);
    check_finite(y, name + ".norm_ffn");

    if (cache) {
        cache->xq = xq;
        cache->xkv = xkv;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->probs = std::move(probs);
        cache->ctx = std::move(ctx);
        cache->attn_mask = std::move(attn_mask);
        cache->sum1 = std::move(sum1);
        cache->mean1 = std::move(mean1);
        cache->rstd1 = std::move(rstd1);
        cache->h = std::move(h);
        cache->ffn_pre = std::move(ffn_pre);
        cache->ffn_act = std::move(ffn_act);
        cache->ffn_mask = std::move(ffn_mask);
        cache->sum2 = std::move(sum2);
        cache->mean2 = std::move(mean2);
        cache->rstd2 = std::move(rstd2);
    }
    return y;
}

template <typename Real>
void block_backward(const BlockParams<Real>& p, const BlockCache<Real>& c, const Matrix<Real>& dy,
                    const BlockShape& shape, BlockParams<Real>& grad, Matrix<Real>& dxq, Matrix<Real>& dxkv) {
    const std::size_t d = c.xq.cols();
    kernels::AttentionShape as{shape.batch, c.xq.rows() / shape.batch, c.xkv.rows() / shape.batch, shape.heads,
                               d / shape.heads};

    // FFN sub-layer
    Matrix<Real> dsum2 = layer_norm_grad(dy, c.sum2, p.norm_ffn, c.mean2, c.rstd2, grad.norm_ffn);
    Matrix<Real> df = dsum2;
    apply_mask(df, c.ffn_mask);
    Matrix<Real> dact;
    linear_backward(c.ffn_act, df, p.ffn_out, grad.ffn_out, &dact);
    Matrix<Real> dpre(dact.rows(), dact.cols());
    kernels::gelu_backward<Real>(c.ffn_pre.span(), dact.span(), dpre.span());
    Matrix<Real> dh;
    linear_backward(c.h, dpre, p.ffn_in, grad.ffn_in, &dh);
    add_into(dh, dsum2);

    // Attention sub-layer
    Matrix<Real> dsum1 = layer_norm_grad(dh, c.sum1, p.norm_attn, c.mean1, c.rstd1, grad.norm_attn);
    Matrix<Real> da = dsum1;
    apply_mask(da, c.attn_mask);
    Matrix<Real> dctx;
    linear_backward(c.ctx, da, p.attn.o, grad.attn.o, &dctx);
    Matrix<Real> dq(c.q.rows(), d), dk(c.k.rows(), d), dv(c.v.rows(), d);
    kernels::attention_backward<Real>(dctx.span(), c.q.span(), c.k.span(), c.v.span(), c.probs.span(), dq.span(),
                                      dk.span(), dv.span(), as);
    linear_backward(c.xq, dq, p.attn.q, grad.attn.q, &dxq);
    add_into(dxq, dsum1);
    Matrix<Real> dxv;
    linear_backward(c.xkv, dk, p.attn.k, grad.attn.k, &dxkv);
    linear_backward(c.xkv, dv, p.attn.v, grad.attn.v, &dxv);
    add_into(dxkv, dxv);
}

template <typename Real>
Matrix<Real> head_forward(const HeadParams<Real>& p, const Matrix<Real>& features, Dropout& dropout,
                          HeadCache<Real>* cache) {
    Matrix<Real> pre = linear_forward(features, p.hidden);
    Matrix<Real> act = gelu(pre);
    Matrix<Real> mask = dropout_mask<Real>(act.rows(), act.cols(), dropout);
    Matrix<Real> dropped = act;
    apply_mask(dropped, mask);
    Matrix<Real> logits = linear_forward(dropped, p.out);
    check_finite(logits, "head");
    if (cache) {
        cache->features = features;
        cache->hidden_pre = std::move(pre);
        cache->hidden_act = std::move(dropped);
        cache->mask = std::move(mask);
    }
    return logits;
}

template <typename Real>
Matrix<Real> head_backward(const HeadParams<Real>& p, const HeadCache<Real>& c, const Matrix<Real>& dlogits,
                           HeadParams<Real>& grad) {
    Matrix<Real> dact;
    linear_backward(c.hidden_act, dlogits, p.out, grad.out, &dact);
    apply_mask(dact, c.mask);
    Matrix<Real> dpre(dact.rows(), dact.cols());
    kernels::gelu_backward<Real>(c.hidden_pre.span(), dact.span(), dpre.span());
    Matrix<Real> dfeat;
    linear_backward(c.features, dpre, p.hidden, grad.hidden, &dfeat);
    return dfeat;
}

template <typename Real>
Linear<Real> init_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    Linear<Real> l{Matrix<Real>(in, out), Matrix<Real>(1, out)};
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-limit, limit);
    for (std::size_t i = 0; i < l.w.size(); ++i) l.w[i] = static_cast<Real>(u(rng));
    return l;
}

template <typename Real>
LayerNormParams<Real> init_layer_norm(std::size_t d) {
    return {Matrix<Real>(1, d, Real(1)), Matrix<Real>(1, d, Real(0))};
}

template <typename Real>
BlockParams<Real> init_block(std::size_t d, std::size_t ffn, std::mt19937_64& rng) {
    BlockParams<Real> b;
    b.attn.q = init_linear<Real>(d, d, rng);
    b.attn.k = init_linear<Real>(d, d, rng);
    b.attn.v = init_linear<Real>(d, d, rng);
    b.attn.o = init_linear<Real>(d, d, rng);
    b.norm_attn = init_layer_norm<Real>(d);
    b.ffn_in = init_linear<Real>(d, ffn, rng);
    b.ffn_out = init_linear<Real>(ffn, d, rng);
    b.norm_ffn = init_layer_norm<Real>(d);
    return b;
}

template <typename Real>
HeadParams<Real> init_head(std::size_t in, std::size_t hidden, std::size_t classes, std::mt19937_64& rng) {
    return {init_linear<Real>(in, hidden, rng), init_linear<Real>(hidden, classes, rng)};
}

template <typename Real>
Matrix<Real> init_token(std::size_t d, double std, std::mt19937_64& rng) {
    Matrix<Real> t(1, d);
    std::normal_distribution<double> n(0.0, std);
    for (std::size_t i = 0; i < d; ++i) {
        double x = n(rng);
        while (std::abs(x) > 2.0 * std) x = n(rng);
        t[i] = static_cast<Real>(x);
    }
    return t;
}

#define CROSSFUSE_INSTANTIATE_LAYERS(Real)                                                               \
    template Matrix<Real> dropout_mask<Real>(std::size_t, std::size_t, Dropout&);                        \
    template void apply_mask<Real>(Matrix<Real>&, const Matrix<Real>&);                                  \
    template void check_finite<Real>(const Matrix<Real>&, const std::string&);                           \
    template Matrix<Real> linear_forward<Real>(const Matrix<Real>&, const Linear<Real>&);                \
    template void linear_backward<Real>(const Matrix<Real>&, const Matrix<Real>&, const Linear<Real>&,   \
                                        Linear<Real>&, Matrix<Real>*);                                   \
    template Matrix<Real> layer_norm<Real>(const Matrix<Real>&, const LayerNormParams<Real>&, Real,      \
                                           Matrix<Real>*, Matrix<Real>*);                                \
    template Matrix<Real> block_forward<Real>(const BlockParams<Real>&, const Matrix<Real>&,             \
                                              const Matrix<Real>&, const BlockShape&, Dropout&,          \
                                              BlockCache<Real>*, const std::string&);                    \
    template void block_backward<Real>(const BlockParams<Real>&, const BlockCache<Real>&,                \
                                       const Matrix<Real>&, const BlockShape&, BlockParams<Real>&,       \
                                       Matrix<Real>&, Matrix<Real>&);                                    \
    template Matrix<Real> head_forward<Real>(const HeadParams<Real>&, const Matrix<Real>&, Dropout&,     \
                                             HeadCache<Real>*);                                          \
    template Matrix<Real> head_backward<Real>(const HeadParams<Real>&, const HeadCache<Real>&,           \
                                              const Matrix<Real>&, HeadParams<Real>&);                   \
    template Linear<Real> init_linear<Real>(std::size_t, std::size_t, std::mt19937_64&);                 \
    template LayerNormParams<Real> init_layer_norm<Real>(std::size_t);                                   \
    template BlockParams<Real> init_block<Real>(std::size_t, std::size_t, std::mt19937_64&);             \
    template HeadParams<Real> init_head<Real>(std::size_t, std::size_t, std::size_t, std::mt19937_64&);  \
    template Matrix<Real> init_token<Real>(std::size_t, double, std::mt19937_64&);

CROSSFUSE_INSTANTIATE_LAYERS(float)
CROSSFUSE_INSTANTIATE_LAYERS(double)

#undef CROSSFUSE_INSTANTIATE_LAYERS

}  // namespace crossfuse
