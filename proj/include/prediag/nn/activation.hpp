#pragma once

#include <cmath>
#include <string>

#include "prediag/nn/tensor.hpp"

namespace prediag::nn {

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// Per-channel parameters of the ACON-C activation
///     f(x) = (p1 - p2) x sigmoid(beta (p1 - p2) x) + p2 x.
struct AconCParams {
    Tensor p1;
    Tensor p2;
    Tensor beta;

    /// p1 = 1, p2 = 0, beta = 1: identical to SiLU.
    static AconCParams swish_init(std::size_t channels) {
        return {Tensor({channels}, 1.0), Tensor({channels}, 0.0), Tensor({channels}, 1.0)};
    }

    std::size_t channels() const { return p1.size(); }

    void validate() const {
        if (p1.rank() != 1 || p2.shape() != p1.shape() || beta.shape() != p1.shape()) {
            throw ShapeError("ACON-C parameters must be three vectors of equal length");
        }
    }
};

struct AconCGrads {
    Tensor dx;
    Tensor dp1;
    Tensor dp2;
    Tensor dbeta;
};

namespace detail {

inline void require_channels(const Tensor& x, std::size_t channels, const char* what) {
    if (x.empty() || x.channels() != channels) {
        throw ShapeError(std::string(what) + ": input channels " + (x.empty() ? "0" : std::to_string(x.channels())) +
                         " do not match " + std::to_string(channels));
    }
}

}  // namespace detail

inline Tensor acon_c_forward(const Tensor& x, const AconCParams& params) {
    params.validate();
    const auto C = params.channels();
    detail::require_channels(x, C, "acon_c_forward");
    Tensor y = Tensor::zeros_like(x);
    const auto xs = x.data();
    auto ys = y.data();
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const auto c = i % C;
        const double p1 = params.p1[c], p2 = params.p2[c], beta = params.beta[c];
        const double d = p1 - p2;
        ys[i] = d * xs[i] * sigmoid(beta * d * xs[i]) + p2 * xs[i];
    }
    return y;
}

/// Analytic gradients of acon_c_forward contracted with `upstream`. With d = p1 - p2 and
/// s = sigmoid(beta d x):
///     df/dx    = d s + beta d^2 x s(1-s) + p2
///     df/dp1   = x s + beta d x^2 s(1-s)
///     df/dp2   = x - x s - beta d x^2 s(1-s)
///     df/dbeta = d^2 x^2 s(1-s)
inline AconCGrads acon_c_backward(const Tensor& x, const AconCParams& params, const Tensor& upstream) {
    params.validate();
    const auto C = params.channels();
    detail::require_channels(x, C, "acon_c_backward");
    require_same_shape(x, upstream, "acon_c_backward upstream");

    AconCGrads g{Tensor::zeros_like(x), Tensor({C}), Tensor({C}), Tensor({C})};
    const auto xs = x.data();
    const auto us = upstream.data();
    auto dx = g.dx.data();
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const auto c = i % C;
        const double p1 = params.p1[c], p2 = params.p2[c], beta = params.beta[c];
        const double xi = xs[i], up = us[i];
        const double d = p1 - p2;
        const double s = sigmoid(beta * d * xi);
        const double ss = s * (1.0 - s);
        const double cross = beta * d * xi * xi * ss;
        dx[i] = up * (d * s + beta * d * d * xi * ss + p2);
        g.dp1[c] += up * (xi * s + cross);
        g.dp2[c] += up * (xi - xi * s - cross);
        g.dbeta[c] += up * (d * d * xi * xi * ss);
    }
    return g;
}

inline Tensor silu_forward(const Tensor& x) {
    Tensor y = Tensor::zeros_like(x);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * sigmoid(x[i]);
    return y;
}

inline Tensor silu_backward(const Tensor& x, const Tensor& upstream) {
    require_same_shape(x, upstream, "silu_backward upstream");
    Tensor dx = Tensor::zeros_like(x);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double s = sigmoid(x[i]);
        dx[i] = upstream[i] * (s + x[i] * s * (1.0 - s));
    }
    return dx;
}

inline Tensor relu_forward(const Tensor& x) {
    Tensor y = Tensor::zeros_like(x);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
    return y;
}

inline Tensor relu_backward(const Tensor& x, const Tensor& upstream) {
    require_same_shape(x, upstream, "relu_backward upstream");
    Tensor dx = Tensor::zeros_like(x);
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? upstream[i] : 0.0;
    return dx;
}

}  // namespace prediag::nn
