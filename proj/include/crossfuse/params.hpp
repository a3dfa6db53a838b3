#pragma once

// Learnable parameter groups of the fusion network and its ablation variants.
//
// Every group exposes a static `visit(self, name, f)` that calls
// f(qualified_name, tensor, role) for each tensor it owns; `self` may be
// const or mutable. Gradients use the same types as the parameters.

#include <cstddef>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "crossfuse/matrix.hpp"

namespace crossfuse {

/// Weight decay applies to TensorRole::Weight only.
enum class TensorRole { Weight, Bias, Norm, Token };

inline std::string join_name(const std::string& prefix, const std::string& leaf) {
    return prefix.empty() ? leaf : prefix + "." + leaf;
}

template <typename Real>
struct Linear {
    using value_type = Real;

    Matrix<Real> w;  // [in, out]
    Matrix<Real> b;  // [1, out]

    std::size_t in_dim() const noexcept { return w.rows(); }
    std::size_t out_dim() const noexcept { return w.cols(); }

    template <class Self, class F>
    static void visit(Self& self, const std::string& name, F&& f) {
        f(join_name(name, "w"), self.w, TensorRole::Weight);
        f(join_name(name, "b"), self.b, TensorRole::Bias);
    }
};

template <typename Real>
struct LayerNormParams {
    using value_type = Real;

    Matrix<Real> gamma;  // [1, d]
    Matrix<Real> beta;   // [1, d]

    template <class Self, class F>
    static void visit(Self& self, const std::string& name, F&& f) {
        f(join_name(name, "gamma"), self.gamma, TensorRole::Norm);
        f(join_name(name, "beta"), self.beta, TensorRole::Norm);
    }
};

template <typename Real>
struct AttentionParams {
    using value_type = Real;

    Linear<Real> q, k, v, o;

    template <class Self, class F>
    static void visit(Self& self, const std::string& name, F&& f) {
        Linear<Real>::visit(self.q, join_name(name, "q"), f);
        Linear<Real>::visit(self.k, join_name(name, "k"), f);
        Linear<Real>::visit(self.v, join_name(name, "v"), f);
        Linear<Real>::visit(self.o, join_name(name, "o"), f);
    }
};

/// One attention sub-layer followed by one FFN sub-layer, each wrapped as
/// LayerNorm(x + Sublayer(x)). Used for both cross- and self-attention.
template <typename Real>
struct BlockParams {
    using value_type = Real;

    AttentionParams<Real> attn;
    LayerNormParams<Real> norm_attn;
    Linear<Real> ffn_in;   // [d, ffn]
    Linear<Real> ffn_out;  // [ffn, d]
    LayerNormParams<Real> norm_ffn;

    template <class Self, class F>
    static void visit(Self& self, const std::string& name, F&& f) {
        AttentionParams<Real>::visit(self.attn, join_name(name, "attn"), f);
        LayerNormParams<Real>::visit(self.norm_attn, join_name(name, "norm_attn"), f);
        Linear<Real>::visit(self.ffn_in, join_name(name, "ffn_in"), f);
        Linear<Real>::visit(self.ffn_out, join_name(name, "ffn_out"), f);
        LayerNormParams<Real>::visit(self.norm_ffn, join_name(name, "norm_ffn"), f);
    }
};

template <typename Real>
struct FusionLayerParams {
    using value_type = Real;

    BlockParams<Real> cross_v;  // Q from visual, K/V from skeleton
    BlockParams<Real> cross_s;  // Q from skeleton, K/V from visual
    BlockParams<Real> self_v;
    BlockParams<Real> self_s;

    template <class Self, class F>
    static void visit(Self& self, const std::string& name, F&& f) {
        BlockParams<Real>::visit(self.cross_v, join_name(name, "cross_v"), f);
        BlockParams<Real>::visit(self.cross_s, join_name(name, "cross_s"), f);
        BlockParams<Real>::visit(self.self_v, join_name(name, "self_v"), f);
        BlockParams<Real>::visit(self.self_s, join_name(name, "self_s"), f);
    }
};

template <typename Real>
struct HeadParams {
    using value_type = Real;

    Linear<Real> hidden;
    Linear<Real> out;

    template <class Self, class F>
    static void visit(Self& self, const std::string& name, F&& f) {
        Linear<Real>::visit(self.hidden, join_name(name, "hidden"), f);
        Linear<Real>::visit(self.out, join_name(name, "out"), f);
    }
};

template <typename Real>
struct FusionModelParams {
    using value_type = Real;

    Linear<Real> proj_v;
    Linear<Real> proj_s;
    Matrix<Real> cls_v;  // [1, d]
    Matrix<Real> cls_s;
    std::vector<FusionLayerParams<Real>> layers;
    HeadParams<Real> head;  // 2d -> hidden -> classes

    template <class Self, class F>
    static void visit(Self& self, const std::string& name, F&& f) {
        Linear<Real>::visit(self.proj_v, join_name(name, "proj_v"), f);
        Linear<Real>::visit(self.proj_s, join_name(name, "proj_s"), f);
        f(join_name(name, "cls_v"), self.cls_v, TensorRole::Token);
        f(join_name(name, "cls_s"), self.cls_s, TensorRole::Token);
        for (std::size_t i = 0; i < self.layers.size(); ++i)
            FusionLayerParams<Real>::visit(self.layers[i], join_name(name, "layers." + std::to_string(i)), f);
        HeadParams<Real>::visit(self.head, join_name(name, "head"), f);
    }
};

/// Concatenation baseline: both projections are merged per frame into one stream.
template <typename Real>
struct EarlyFusionParams {
    using value_type = Real;

    Linear<Real> proj_v;
    Linear<Real> proj_s;
    Linear<Real> merge;  // [2d, d]
    Matrix<Real> cls;
    std::vector<BlockParams<Real>> layers;
    HeadParams<Real> head;  // d -> hidden -> classes

    template <class Self, class F>
    static void visit(Self& self, const std::string& name, F&& f) {
        Linear<Real>::visit(self.proj_v, join_name(name, "proj_v"), f);
        Linear<Real>::visit(self.proj_s, join_name(name, "proj_s"), f);
        Linear<Real>::visit(self.merge, join_name(name, "merge"), f);
        f(join_name(name, "cls"), self.cls, TensorRole::Token);
        for (std::size_t i = 0; i < self.layers.size(); ++i)
            BlockParams<Real>::visit(self.layers[i], join_name(name, "layers." + std::to_string(i)), f);
        HeadParams<Real>::visit(self.head, join_name(name, "head"), f);
    }
};

/// Single-modality attentive probe.
template <typename Real>
struct ProbeParams {
    using value_type = Real;

    Linear<Real> proj;
    Matrix<Real> cls;
    std::vector<BlockParams<Real>> layers;
    HeadParams<Real> head;

    template <class Self, class F>
    static void visit(Self& self, const std::string& name, F&& f) {
        Linear<Real>::visit(self.proj, join_name(name, "proj"), f);
        f(join_name(name, "cls"), self.cls, TensorRole::Token);
        for (std::size_t i = 0; i < self.layers.size(); ++i)
            BlockParams<Real>::visit(self.layers[i], join_name(name, "layers." + std::to_string(i)), f);
        HeadParams<Real>::visit(self.head, join_name(name, "head"), f);
    }
};

template <class P, class F>
void for_each_tensor(P& params, F&& f, const std::string& prefix = "") {
    std::remove_const_t<P>::visit(params, prefix, f);
}

template <typename Real>
struct NamedTensor {
    std::string name;
    Matrix<Real>* tensor = nullptr;
    TensorRole role = TensorRole::Weight;
};

template <typename Real>
struct ConstNamedTensor {
    std::string name;
    const Matrix<Real>* tensor = nullptr;
    TensorRole role = TensorRole::Weight;
};

/// Flat view in visiting order. Pointers stay valid while `params` is alive and unresized.
template <class P>
auto flatten(P& params, const std::string& prefix = "") {
    using Real = typename std::remove_const_t<P>::value_type;
    if constexpr (std::is_const_v<P>) {
        std::vector<ConstNamedTensor<Real>> out;
        for_each_tensor(params, [&](const std::string& n, const Matrix<Real>& t, TensorRole r) {
            out.push_back({n, &t, r});
        }, prefix);
        return out;
    } else {
        std::vector<NamedTensor<Real>> out;
        for_each_tensor(params, [&](const std::string& n, Matrix<Real>& t, TensorRole r) {
            out.push_back({n, &t, r});
        }, prefix);
        return out;
    }
}

template <class P>
P zeros_like(const P& params) {
    P out = params;
    for_each_tensor(out, [](const std::string&, auto& t, TensorRole) { t.fill(0); });
    return out;
}

template <class P>
std::size_t parameter_count(const P& params) {
    std::size_t n = 0;
    for_each_tensor(params, [&](const std::string&, const auto& t, TensorRole) { n += t.size(); });
    return n;
}

}  // namespace crossfuse
