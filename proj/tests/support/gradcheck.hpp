#pragma once

// Central finite differences over every parameter of a double-precision model.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>

#include "crossfuse/fusion_net.hpp"

namespace testing_support {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_tensor;
    std::size_t checked = 0;
};

/// rel = |numeric - analytic| / max(|numeric|, |analytic|, floor)
template <class Net>
GradCheckResult gradient_check(const Net& net, typename Net::Params params, const crossfuse::Batch<double>& batch,
                               double h = 1e-5, double floor = 1e-6) {
    auto loss = [&](const typename Net::Params& p) {
        const auto logits = net.forward(p, batch, crossfuse::Mode::Eval, nullptr);
        return crossfuse::softmax_cross_entropy(logits, std::span<const int>(batch.labels)).first;
    };
    const auto analytic = crossfuse::loss_and_gradients(net, params, batch, nullptr).grads;
    const auto grads = crossfuse::flatten(analytic);
    auto values = crossfuse::flatten(params);

    GradCheckResult out;
    for (std::size_t k = 0; k < values.size(); ++k) {
        auto& t = *values[k].tensor;
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double saved = t[i];
            t[i] = saved + h;
            const double up = loss(params);
            t[i] = saved - h;
            const double down = loss(params);
            t[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double an = (*grads[k].tensor)[i];
            const double rel = std::abs(numeric - an) / std::max({std::abs(numeric), std::abs(an), floor});
            if (rel > out.max_rel_error) {
                out.max_rel_error = rel;
                out.worst_tensor = values[k].name;
            }
            ++out.checked;
        }
    }
    return out;
}

}  // namespace testing_support
