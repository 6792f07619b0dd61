#pragma once

#include <algorithm>
#include <cmath>

#include "prediag/error.hpp"
#include "prediag/nn/tensor.hpp"

namespace prediag::nn {

/// Central-difference gradient of a scalar function at `point`, Richardson-extrapolated over
/// steps `step` and `step / 2` so the truncation error is O(step^4). A plain O(step^2) difference
/// is not accurate enough to judge relative error where a gradient entry is close to zero.
template <class F>
Tensor numeric_gradient(F&& f, const Tensor& point, double step) {
    if (!(step > 0.0)) throw InvalidArgument("numeric_gradient: step must be positive");
    Tensor probe = point;
    Tensor grad = Tensor::zeros_like(point);
    auto central = [&](std::size_t i, double h) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double up = f(static_cast<const Tensor&>(probe));
        probe[i] = orig - h;
        const double down = f(static_cast<const Tensor&>(probe));
        probe[i] = orig;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw NumericError("numeric_gradient: non-finite evaluation at index " + std::to_string(i));
        }
        return (up - down) / (2.0 * h);
    };
    for (std::size_t i = 0; i < point.size(); ++i) {
        const double coarse = central(i, step);
        const double fine = central(i, step / 2.0);
        grad[i] = (4.0 * fine - coarse) / 3.0;
    }
    return grad;
}

/// Largest elementwise |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
template <class F>
double numeric_grad_check(F&& f, const Tensor& analytic, const Tensor& point, double step = 1e-4) {
    require_same_shape(analytic, point, "numeric_grad_check");
    analytic.require_finite("numeric_grad_check analytic gradient");
    const Tensor numeric = numeric_gradient(f, point, step);
    double worst = 0.0;
    for (std::size_t i = 0; i < point.size(); ++i) {
        const double a = analytic[i], n = numeric[i];
        const double denom = std::max({std::abs(a), std::abs(n), 1e-8});
        worst = std::max(worst, std::abs(a - n) / denom);
    }
    return worst;
}

}  // namespace prediag::nn
