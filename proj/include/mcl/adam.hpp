#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "mcl/error.hpp"
#include "mcl/tensor.hpp"

namespace mcl {

// Adam with bias correction. Moment buffers are plain arrays aligned with
// the parameter list so they can be checkpointed directly.
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t step_count = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    void init(const std::vector<Tensor>& params) {
        step_count = 0;
        m.clear();
        v.clear();
        m.reserve(params.size());
        v.reserve(params.size());
        for (const auto& p : params) {
            m.emplace_back(p.size(), 0.0);
            v.emplace_back(p.size(), 0.0);
        }
    }
};

inline double global_grad_norm(const std::vector<std::vector<double>>& grads) {
    double acc = 0.0;
    for (const auto& g : grads)
        for (double x : g) acc += x * x;
    return std::sqrt(acc);
}

// Scales all gradients down so the global norm is at most max_norm.
inline void clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm) {
    double norm = global_grad_norm(grads);
    if (norm <= max_norm || norm == 0.0) return;
    double scale = max_norm / norm;
    for (auto& g : grads)
        for (double& x : g) x *= scale;
}

inline void adam_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
                      AdamState& state, double lr) {
    if (params.size() != grads.size() || params.size() != state.m.size()) {
        throw contract_error("adam_step: params/grads/state sizes disagree");
    }
    state.step_count += 1;
    double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
    double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& pdata = params[i].data();
        const auto& g = grads[i];
        if (g.size() != pdata.size()) {
            throw contract_error("adam_step: gradient size mismatch at parameter " +
                                 std::to_string(i));
        }
        auto& mi = state.m[i];
        auto& vi = state.v[i];
        for (std::size_t j = 0; j < pdata.size(); ++j) {
            mi[j] = state.beta1 * mi[j] + (1.0 - state.beta1) * g[j];
            vi[j] = state.beta2 * vi[j] + (1.0 - state.beta2) * g[j] * g[j];
            double mhat = mi[j] / bc1;
            double vhat = vi[j] / bc2;
            pdata[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

} // namespace mcl
