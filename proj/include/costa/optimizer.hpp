#pragma once

#include <cmath>
#include <cstdint>

#include "costa/common.hpp"
#include "costa/encoder.hpp"
#include "costa/tensor.hpp"

namespace costa {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <class Real>
struct AdamState {
    int64_t step = 0;
    NamedTensors<Real> m;
    NamedTensors<Real> v;

    static AdamState init(const ParamStore<Real>& params) {
        AdamState s;
        s.m = params.zero_grads();
        s.v = params.zero_grads();
        return s;
    }
};

// One Adam update with bias correction. The step is rejected before touching
// any parameter if a gradient is non-finite.
template <class Real>
void adam_step(ParamStore<Real>& params, const NamedTensors<Real>& grads, AdamState<Real>& state,
               double lr, const AdamConfig& cfg = {}) {
    for (const auto& [name, t] : params.tensors) {
        auto it = grads.find(name);
        if (it == grads.end() || it->second.shape != t.shape)
            throw Error("GradientShapeMismatch", "tensor '" + name + "'");
        if (!it->second.finite()) throw Error("NonFiniteGradient", "tensor '" + name + "'");
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (auto& [name, p] : params.tensors) {
        const Tensor<Real>& g = grads.at(name);
        Tensor<Real>& m = state.m.at(name);
        Tensor<Real>& v = state.v.at(name);
        for (size_t i = 0; i < p.data.size(); ++i) {
            const double gi = static_cast<double>(g.data[i]);
            const double mi = cfg.beta1 * static_cast<double>(m.data[i]) + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * static_cast<double>(v.data[i]) + (1.0 - cfg.beta2) * gi * gi;
            m.data[i] = static_cast<Real>(mi);
            v.data[i] = static_cast<Real>(vi);
            const double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
            p.data[i] = static_cast<Real>(static_cast<double>(p.data[i]) - update);
        }
    }
}

// Linear warmup over the first warmup_fraction of steps, then linear decay
// to zero at total_steps. Steps are 1-based.
struct LrSchedule {
    double base = 5e-5;
    int64_t total_steps = 1;
    double warmup_fraction = 0.1;

    int64_t warmup_steps() const {
        return static_cast<int64_t>(std::llround(warmup_fraction * static_cast<double>(total_steps)));
    }

    double at(int64_t step) const {
        const int64_t w = warmup_steps();
        if (w > 0 && step <= w) return base * static_cast<double>(step) / static_cast<double>(w);
        if (total_steps <= w) return base;
        const double frac =
            static_cast<double>(total_steps - step) / static_cast<double>(total_steps - w);
        return base * std::max(0.0, frac);
    }
};

}  // namespace costa
