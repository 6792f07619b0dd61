#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "prediag/error.hpp"
#include "prediag/nn/tensor.hpp"

namespace prediag::nn {

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Moments of one parameter tensor; `t` counts the steps taken so far.
struct AdamState {
    Tensor m;
    Tensor v;
    std::uint64_t t = 0;
    AdamHyper hyper;

    AdamState() = default;
    explicit AdamState(const Tensor& like, AdamHyper h = {})
        : m(Tensor::zeros_like(like)), v(Tensor::zeros_like(like)), hyper(h) {}
};

/// One bias-corrected Adam update of `params` in place.
inline void adam_step(Tensor& params, const Tensor& grads, AdamState& state) {
    require_same_shape(params, grads, "adam_step gradient");
    require_same_shape(params, state.m, "adam_step state");
    grads.require_finite("adam_step gradient");

    const auto& h = state.hyper;
    ++state.t;
    const double t = static_cast<double>(state.t);
    const double c1 = 1.0 - std::pow(h.beta1, t);
    const double c2 = 1.0 - std::pow(h.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        params[i] -= h.lr * m_hat / (std::sqrt(v_hat) + h.epsilon);
    }
}

/// Adam over a fixed set of parameters, each with its own moments.
class Adam {
public:
    Adam(std::vector<Param*> params, AdamHyper hyper = {}) : params_(std::move(params)) {
        states_.reserve(params_.size());
        for (auto* p : params_) states_.emplace_back(p->value, hyper);
    }

    void step() {
        for (std::size_t i = 0; i < params_.size(); ++i) adam_step(params_[i]->value, params_[i]->grad, states_[i]);
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    const std::vector<AdamState>& states() const { return states_; }

private:
    std::vector<Param*> params_;
    std::vector<AdamState> states_;
};

}  // namespace prediag::nn
