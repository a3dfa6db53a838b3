#pragma once

// Small shared helpers for the test binaries: tiny model configs, random
// batches and a naive scalar re-implementation of the fusion layer.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "crossfuse/fusion_net.hpp"
#include "crossfuse/matrix.hpp"
#include "crossfuse/params.hpp"

namespace testing_support {

using crossfuse::Matrix;

inline crossfuse::ModelConfig tiny_config(std::size_t T = 6, std::size_t classes = 3) {
    crossfuse::ModelConfig cfg;
    cfg.d_v = 12;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.ffn_dim = 32;
    cfg.head_hidden = 16;
    cfg.dropout = 0.0;
    cfg.num_classes = classes;
    cfg.seq_len = T;
    return cfg;
}

template <typename Real>
Matrix<Real> random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n01;
    Matrix<Real> m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<Real>(scale * n01(rng));
    return m;
}

/// Random inputs shaped for `cfg`; skeleton root columns are zero as after normalisation.
template <typename Real>
crossfuse::Batch<Real> random_batch(const crossfuse::ModelConfig& cfg, std::size_t B, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    crossfuse::Batch<Real> b;
    b.size = B;
    b.seq_len = cfg.seq_len;
    b.visual = random_matrix<Real>(B * cfg.seq_len, cfg.d_v, rng);
    b.skeleton = random_matrix<Real>(B * cfg.seq_len, cfg.d_s, rng, 0.3);
    for (std::size_t r = 0; r < b.skeleton.rows(); ++r)
        for (std::size_t c = 0; c < 3; ++c) b.skeleton(r, c) = 0;
    std::uniform_int_distribution<int> label(0, static_cast<int>(cfg.num_classes) - 1);
    for (std::size_t i = 0; i < B; ++i) b.labels.push_back(label(rng));
    return b;
}

template <class Params>
void randomize(Params& p, std::uint64_t seed, double scale) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01;
    crossfuse::for_each_tensor(p, [&](const std::string&, auto& t, crossfuse::TensorRole) {
        using Real = std::remove_cvref_t<decltype(t[0])>;
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<Real>(scale * n01(rng));
    });
}

// ---------------------------------------------------------------------------
// Naive reference: scalar loops on one sequence at a time, double precision.

namespace naive {

using Seq = std::vector<std::vector<double>>;  // [len][dim]

inline Seq linear(const Seq& x, const crossfuse::Linear<double>& p) {
    Seq y(x.size(), std::vector<double>(p.w.cols(), 0.0));
    for (std::size_t t = 0; t < x.size(); ++t)
        for (std::size_t o = 0; o < p.w.cols(); ++o) {
            double acc = p.b(0, o);
            for (std::size_t i = 0; i < p.w.rows(); ++i) acc += x[t][i] * p.w(i, o);
            y[t][o] = acc;
        }
    return y;
}

inline Seq add(const Seq& a, const Seq& b) {
    Seq y = a;
    for (std::size_t t = 0; t < a.size(); ++t)
        for (std::size_t i = 0; i < a[t].size(); ++i) y[t][i] += b[t][i];
    return y;
}

inline Seq layer_norm(const Seq& x, const crossfuse::LayerNormParams<double>& p, double eps) {
    Seq y = x;
    for (std::size_t t = 0; t < x.size(); ++t) {
        const double n = static_cast<double>(x[t].size());
        double mean = 0.0;
        for (double v : x[t]) mean += v;
        mean /= n;
        double var = 0.0;
        for (double v : x[t]) var += (v - mean) * (v - mean);
        var /= n;
        for (std::size_t i = 0; i < x[t].size(); ++i)
            y[t][i] = (x[t][i] - mean) / std::sqrt(var + eps) * p.gamma(0, i) + p.beta(0, i);
    }
    return y;
}

inline Seq gelu(Seq x) {
    for (auto& row : x)
        for (double& v : row) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    return x;
}

inline Seq attention(const Seq& xq, const Seq& xkv, const crossfuse::AttentionParams<double>& p, std::size_t heads) {
    const Seq q = linear(xq, p.q), k = linear(xkv, p.k), v = linear(xkv, p.v);
    const std::size_t d = q[0].size(), hd = d / heads;
    Seq ctx(xq.size(), std::vector<double>(d, 0.0));
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < q.size(); ++i) {
            std::vector<double> s(k.size());
            double mx = -1e300;
            for (std::size_t j = 0; j < k.size(); ++j) {
                double dot = 0.0;
                for (std::size_t c = 0; c < hd; ++c) dot += q[i][h * hd + c] * k[j][h * hd + c];
                s[j] = dot / std::sqrt(static_cast<double>(hd));
                mx = std::max(mx, s[j]);
            }
            double z = 0.0;
            for (double& e : s) z += (e = std::exp(e - mx));
            for (std::size_t j = 0; j < k.size(); ++j)
                for (std::size_t c = 0; c < hd; ++c) ctx[i][h * hd + c] += s[j] / z * v[j][h * hd + c];
        }
    return linear(ctx, p.o);
}

inline Seq block(const Seq& xq, const Seq& xkv, const crossfuse::BlockParams<double>& p, std::size_t heads,
                 double eps) {
    const Seq h = layer_norm(add(xq, attention(xq, xkv, p.attn, heads)), p.norm_attn, eps);
    const Seq f = linear(gelu(linear(h, p.ffn_in)), p.ffn_out);
    return layer_norm(add(h, f), p.norm_ffn, eps);
}

inline std::pair<Seq, Seq> fusion_layer(const Seq& zv, const Seq& zs, const crossfuse::FusionLayerParams<double>& p,
                                        std::size_t heads, double eps) {
    const Seq cv = block(zv, zs, p.cross_v, heads, eps);
    const Seq cs = block(zs, zv, p.cross_s, heads, eps);
    return {block(cv, cv, p.self_v, heads, eps), block(cs, cs, p.self_s, heads, eps)};
}

inline Seq rows_of(const Matrix<double>& m, std::size_t first, std::size_t count) {
    Seq s(count, std::vector<double>(m.cols()));
    for (std::size_t t = 0; t < count; ++t)
        for (std::size_t c = 0; c < m.cols(); ++c) s[t][c] = m(first + t, c);
    return s;
}

}  // namespace naive

}  // namespace testing_support

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

namespace testing_support {

/// Fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
public:
    explicit ScratchDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("crossfuse_" + tag + "_" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~ScratchDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    ScratchDir(const ScratchDir&) = delete;
    ScratchDir& operator=(const ScratchDir&) = delete;

    const std::filesystem::path& path() const noexcept { return path_; }
    std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

private:
    std::filesystem::path path_;
};

inline std::string read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << bytes;
}

}  // namespace testing_support
