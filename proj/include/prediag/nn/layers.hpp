#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "prediag/error.hpp"
#include "prediag/nn/activation.hpp"
#include "prediag/nn/tensor.hpp"

namespace prediag::nn {

enum class Mode { Train, Infer };

// ---------------------------------------------------------------------------
// Linear / 1x1 convolution: a dense map over the channel dimension, applied at
// every leading index (batch and spatial positions alike).
// ---------------------------------------------------------------------------

struct LinearGrads {
    Tensor dx;
    Tensor dweight;
    Tensor dbias;
};

inline void check_linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (weight.rank() != 2 || bias.rank() != 1 || bias.dim(0) != weight.dim(1)) {
        throw ShapeError("linear: weight must be [in,out] and bias [out], got " + shape_string(weight.shape()) +
                         " and " + shape_string(bias.shape()));
    }
    if (x.empty() || x.channels() != weight.dim(0)) {
        throw ShapeError("linear: input " + shape_string(x.shape()) + " does not end in " +
                         std::to_string(weight.dim(0)) + " channels");
    }
}

inline Tensor linear_forward(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    check_linear(x, weight, bias);
    const auto in = weight.dim(0), out = weight.dim(1);
    const auto rows = x.size() / in;
    Shape shape = x.shape();
    shape.back() = out;
    Tensor y(shape);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t o = 0; o < out; ++o) y[r * out + o] = bias[o];
        for (std::size_t i = 0; i < in; ++i) {
            const double xv = x[r * in + i];
            if (xv == 0.0) continue;
            for (std::size_t o = 0; o < out; ++o) y[r * out + o] += xv * weight[i * out + o];
        }
    }
    return y;
}

inline LinearGrads linear_backward(const Tensor& x, const Tensor& weight, const Tensor& upstream) {
    const auto in = weight.dim(0), out = weight.dim(1);
    Shape out_shape = x.shape();
    out_shape.back() = out;
    if (upstream.shape() != out_shape) {
        throw ShapeError("linear_backward: upstream " + shape_string(upstream.shape()) + ", expected " +
                         shape_string(out_shape));
    }
    const auto rows = x.size() / in;
    LinearGrads g{Tensor::zeros_like(x), Tensor::zeros_like(weight), Tensor({out})};
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t o = 0; o < out; ++o) g.dbias[o] += upstream[r * out + o];
        for (std::size_t i = 0; i < in; ++i) {
            const double xv = x[r * in + i];
            double acc = 0.0;
            for (std::size_t o = 0; o < out; ++o) {
                const double u = upstream[r * out + o];
                acc += u * weight[i * out + o];
                g.dweight[i * out + o] += xv * u;
            }
            g.dx[r * in + i] = acc;
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Batch normalization over every leading index, per channel.
// ---------------------------------------------------------------------------

inline constexpr double kBatchNormEpsilon = 1e-5;

struct BatchNormCache {
    Tensor x_hat;
    std::vector<double> inv_std;
};

struct BatchNormTrainResult {
    Tensor y;
    BatchNormCache cache;
    std::vector<double> batch_mean;
    std::vector<double> batch_var;  // biased
};

struct BatchNormGrads {
    Tensor dx;
    Tensor dgamma;
    Tensor dbeta;
};

inline BatchNormTrainResult batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                             double eps = kBatchNormEpsilon) {
    if (x.rank() < 2 || x.dim(0) < 2) {
        throw InvalidArgument("batch_norm: training mode needs a batch of at least 2, got shape " +
                              shape_string(x.shape()));
    }
    const auto C = gamma.size();
    if (x.channels() != C || beta.size() != C) throw ShapeError("batch_norm: channel mismatch");
    const auto rows = x.size() / C;

    BatchNormTrainResult r{Tensor::zeros_like(x), {Tensor::zeros_like(x), std::vector<double>(C)},
                           std::vector<double>(C, 0.0), std::vector<double>(C, 0.0)};
    for (std::size_t i = 0; i < x.size(); ++i) r.batch_mean[i % C] += x[i];
    for (auto& m : r.batch_mean) m /= static_cast<double>(rows);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - r.batch_mean[i % C];
        r.batch_var[i % C] += d * d;
    }
    for (std::size_t c = 0; c < C; ++c) {
        r.batch_var[c] /= static_cast<double>(rows);
        r.cache.inv_std[c] = 1.0 / std::sqrt(r.batch_var[c] + eps);
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
        const auto c = i % C;
        const double xh = (x[i] - r.batch_mean[c]) * r.cache.inv_std[c];
        r.cache.x_hat[i] = xh;
        r.y[i] = gamma[c] * xh + beta[c];
    }
    return r;
}

inline BatchNormGrads batch_norm_backward(const BatchNormCache& cache, const Tensor& gamma, const Tensor& upstream) {
    require_same_shape(cache.x_hat, upstream, "batch_norm_backward upstream");
    const auto C = gamma.size();
    const auto n = static_cast<double>(upstream.size() / C);
    BatchNormGrads g{Tensor::zeros_like(upstream), Tensor({C}), Tensor({C})};
    std::vector<double> sum_dxh(C, 0.0), sum_dxh_xh(C, 0.0);
    for (std::size_t i = 0; i < upstream.size(); ++i) {
        const auto c = i % C;
        g.dbeta[c] += upstream[i];
        g.dgamma[c] += upstream[i] * cache.x_hat[i];
        const double dxh = upstream[i] * gamma[c];
        sum_dxh[c] += dxh;
        sum_dxh_xh[c] += dxh * cache.x_hat[i];
    }
    for (std::size_t i = 0; i < upstream.size(); ++i) {
        const auto c = i % C;
        const double dxh = upstream[i] * gamma[c];
        g.dx[i] = cache.inv_std[c] / n * (n * dxh - sum_dxh[c] - cache.x_hat[i] * sum_dxh_xh[c]);
    }
    return g;
}

inline Tensor batch_norm_infer(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& running_mean,
                               const Tensor& running_var, double eps = kBatchNormEpsilon) {
    const auto C = gamma.size();
    if (x.empty() || x.channels() != C) throw ShapeError("batch_norm: channel mismatch");
    Tensor y = Tensor::zeros_like(x);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const auto c = i % C;
        y[i] = gamma[c] * (x[i] - running_mean[c]) / std::sqrt(running_var[c] + eps) + beta[c];
    }
    return y;
}

// ---------------------------------------------------------------------------
// Global pooling. [H,W,C] -> [C] and [N,H,W,C] -> [N,C].
// ---------------------------------------------------------------------------

namespace detail {

struct PoolGeometry {
    std::size_t batch;
    std::size_t positions;
    std::size_t channels;
    Shape out_shape;
};

inline PoolGeometry pool_geometry(const Tensor& x) {
    if (x.rank() == 3) return {1, x.dim(0) * x.dim(1), x.dim(2), {x.dim(2)}};
    if (x.rank() == 4) return {x.dim(0), x.dim(1) * x.dim(2), x.dim(3), {x.dim(0), x.dim(3)}};
    throw ShapeError("global pooling expects [H,W,C] or [N,H,W,C], got " + shape_string(x.shape()));
}

}  // namespace detail

inline Tensor global_average_pool(const Tensor& x) {
    const auto g = detail::pool_geometry(x);
    Tensor y(g.out_shape);
    for (std::size_t n = 0; n < g.batch; ++n) {
        for (std::size_t p = 0; p < g.positions; ++p) {
            for (std::size_t c = 0; c < g.channels; ++c) {
                y[n * g.channels + c] += x[(n * g.positions + p) * g.channels + c];
            }
        }
    }
    for (std::size_t i = 0; i < y.size(); ++i) y[i] /= static_cast<double>(g.positions);
    return y;
}

inline Tensor global_average_pool_backward(const Shape& input_shape, const Tensor& upstream) {
    Tensor dx(input_shape);
    const auto g = detail::pool_geometry(dx);
    if (upstream.shape() != g.out_shape) throw ShapeError("global_average_pool_backward: upstream shape");
    for (std::size_t n = 0; n < g.batch; ++n) {
        for (std::size_t p = 0; p < g.positions; ++p) {
            for (std::size_t c = 0; c < g.channels; ++c) {
                dx[(n * g.positions + p) * g.channels + c] =
                    upstream[n * g.channels + c] / static_cast<double>(g.positions);
            }
        }
    }
    return dx;
}

/// Per-channel spatial maximum; also returns the flat input index of every winner.
inline std::pair<Tensor, std::vector<std::size_t>> global_max_pool(const Tensor& x) {
    const auto g = detail::pool_geometry(x);
    Tensor y(g.out_shape, -std::numeric_limits<double>::infinity());
    std::vector<std::size_t> argmax(y.size(), 0);
    for (std::size_t n = 0; n < g.batch; ++n) {
        for (std::size_t p = 0; p < g.positions; ++p) {
            for (std::size_t c = 0; c < g.channels; ++c) {
                const auto src = (n * g.positions + p) * g.channels + c;
                const auto dst = n * g.channels + c;
                if (x[src] > y[dst]) {
                    y[dst] = x[src];
                    argmax[dst] = src;
                }
            }
        }
    }
    return {std::move(y), std::move(argmax)};
}

// ---------------------------------------------------------------------------
// Softmax and cross-entropy.
// ---------------------------------------------------------------------------

inline std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty()) throw ShapeError("softmax: no logits");
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k) {
        p[k] = std::exp(logits[k] - mx);
        sum += p[k];
    }
    for (auto& v : p) v /= sum;
    return p;
}

struct LossAndGrad {
    double loss = 0.0;
    Tensor grad;
};

/// -log softmax(logits)[label] and its gradient softmax(logits) - onehot(label).
inline LossAndGrad softmax_cross_entropy(const Tensor& logits, std::size_t label) {
    if (logits.rank() != 1) throw ShapeError("softmax_cross_entropy: logits must be a vector");
    if (label >= logits.size()) {
        throw InvalidArgument("softmax_cross_entropy: label " + std::to_string(label) + " out of range for " +
                              std::to_string(logits.size()) + " classes");
    }
    const auto xs = logits.data();
    const double mx = *std::max_element(xs.begin(), xs.end());
    double sum = 0.0;
    for (double v : xs) sum += std::exp(v - mx);
    const double log_z = mx + std::log(sum);

    LossAndGrad r{log_z - xs[label], Tensor::zeros_like(logits)};
    for (std::size_t k = 0; k < xs.size(); ++k) r.grad[k] = std::exp(xs[k] - log_z);
    r.grad[label] -= 1.0;
    return r;
}

/// Mean cross-entropy over a [N,K] batch; the gradient is scaled by 1/N.
inline LossAndGrad softmax_cross_entropy_batch(const Tensor& logits, std::span<const std::size_t> labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
        throw ShapeError("softmax_cross_entropy_batch: logits " + shape_string(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
    }
    const auto N = logits.dim(0), K = logits.dim(1);
    LossAndGrad out{0.0, Tensor::zeros_like(logits)};
    for (std::size_t n = 0; n < N; ++n) {
        Tensor row({K}, std::vector<double>(logits.data().begin() + n * K, logits.data().begin() + (n + 1) * K));
        const auto r = softmax_cross_entropy(row, labels[n]);
        out.loss += r.loss;
        for (std::size_t k = 0; k < K; ++k) out.grad[n * K + k] = r.grad[k] / static_cast<double>(N);
    }
    out.loss /= static_cast<double>(N);
    return out;
}

// ---------------------------------------------------------------------------
// Layers. Each keeps what its backward pass needs from the last Train-mode
// forward; `infer` is const and safe to share between threads.
// ---------------------------------------------------------------------------

using NamedBuffer = std::pair<std::string, Tensor*>;

class Linear {
public:
    Linear() = default;
    Linear(std::string name, std::size_t in, std::size_t out, std::mt19937_64& rng)
        : weight_(name + ".weight", Tensor({in, out})), bias_(name + ".bias", Tensor({out})) {
        // Glorot uniform.
        const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
        std::uniform_real_distribution<double> dist(-limit, limit);
        for (auto& w : weight_.value.data()) w = dist(rng);
    }

    static constexpr std::string_view kind() { return "linear"; }
    std::size_t in_features() const { return weight_.value.dim(0); }
    std::size_t out_features() const { return weight_.value.dim(1); }

    Tensor infer(const Tensor& x) const { return linear_forward(x, weight_.value, bias_.value); }

    Tensor forward(const Tensor& x, Mode) {
        input_ = x;
        return infer(x);
    }

    Tensor backward(const Tensor& grad_out) {
        auto g = linear_backward(input_, weight_.value, grad_out);
        accumulate(weight_.grad, g.dweight);
        accumulate(bias_.grad, g.dbias);
        return std::move(g.dx);
    }

    std::vector<Param*> params() { return {&weight_, &bias_}; }
    std::vector<NamedBuffer> buffers() { return {}; }

    Param& weight() { return weight_; }
    Param& bias() { return bias_; }
    const Param& weight() const { return weight_; }
    const Param& bias() const { return bias_; }

private:
    static void accumulate(Tensor& into, const Tensor& g) {
        for (std::size_t i = 0; i < into.size(); ++i) into[i] += g[i];
    }

    Param weight_;
    Param bias_;
    Tensor input_;
};

class BatchNorm {
public:
    BatchNorm() = default;
    BatchNorm(std::string name, std::size_t channels, double momentum = 0.9, double eps = kBatchNormEpsilon)
        : gamma_(name + ".gamma", Tensor({channels}, 1.0)),
          beta_(name + ".beta", Tensor({channels}, 0.0)),
          running_mean_({channels}, 0.0),
          running_var_({channels}, 1.0),
          name_(std::move(name)),
          momentum_(momentum),
          eps_(eps) {}

    static constexpr std::string_view kind() { return "batch_norm"; }

    Tensor infer(const Tensor& x) const {
        return batch_norm_infer(x, gamma_.value, beta_.value, running_mean_, running_var_, eps_);
    }

    Tensor forward(const Tensor& x, Mode mode) {
        if (mode == Mode::Infer) return infer(x);
        auto r = batch_norm_train(x, gamma_.value, beta_.value, eps_);
        const double n = static_cast<double>(x.size() / gamma_.value.size());
        for (std::size_t c = 0; c < r.batch_mean.size(); ++c) {
            running_mean_[c] = momentum_ * running_mean_[c] + (1.0 - momentum_) * r.batch_mean[c];
            running_var_[c] = momentum_ * running_var_[c] + (1.0 - momentum_) * r.batch_var[c] * n / (n - 1.0);
        }
        cache_ = std::move(r.cache);
        return std::move(r.y);
    }

    Tensor backward(const Tensor& grad_out) {
        auto g = batch_norm_backward(cache_, gamma_.value, grad_out);
        for (std::size_t c = 0; c < g.dgamma.size(); ++c) {
            gamma_.grad[c] += g.dgamma[c];
            beta_.grad[c] += g.dbeta[c];
        }
        return std::move(g.dx);
    }

    std::vector<Param*> params() { return {&gamma_, &beta_}; }
    std::vector<NamedBuffer> buffers() {
        return {{name_ + ".running_mean", &running_mean_}, {name_ + ".running_var", &running_var_}};
    }

    Tensor& running_mean() { return running_mean_; }
    Tensor& running_var() { return running_var_; }

private:
    Param gamma_;
    Param beta_;
    Tensor running_mean_;
    Tensor running_var_;
    std::string name_;
    double momentum_ = 0.9;
    double eps_ = kBatchNormEpsilon;
    BatchNormCache cache_;
};

class AconC {
public:
    AconC() = default;
    AconC(std::string name, std::size_t channels)
        : p1_(name + ".p1", Tensor({channels}, 1.0)),
          p2_(name + ".p2", Tensor({channels}, 0.0)),
          beta_(name + ".beta", Tensor({channels}, 1.0)) {}

    static constexpr std::string_view kind() { return "acon_c"; }

    AconCParams current() const { return {p1_.value, p2_.value, beta_.value}; }

    Tensor infer(const Tensor& x) const { return acon_c_forward(x, current()); }

    Tensor forward(const Tensor& x, Mode) {
        input_ = x;
        return infer(x);
    }

    Tensor backward(const Tensor& grad_out) {
        auto g = acon_c_backward(input_, current(), grad_out);
        for (std::size_t c = 0; c < g.dp1.size(); ++c) {
            p1_.grad[c] += g.dp1[c];
            p2_.grad[c] += g.dp2[c];
            beta_.grad[c] += g.dbeta[c];
        }
        return std::move(g.dx);
    }

    std::vector<Param*> params() { return {&p1_, &p2_, &beta_}; }
    std::vector<NamedBuffer> buffers() { return {}; }

private:
    Param p1_;
    Param p2_;
    Param beta_;
    Tensor input_;
};

class SiLU {
public:
    static constexpr std::string_view kind() { return "silu"; }
    Tensor infer(const Tensor& x) const { return silu_forward(x); }
    Tensor forward(const Tensor& x, Mode) {
        input_ = x;
        return infer(x);
    }
    Tensor backward(const Tensor& grad_out) { return silu_backward(input_, grad_out); }
    std::vector<Param*> params() { return {}; }
    std::vector<NamedBuffer> buffers() { return {}; }

private:
    Tensor input_;
};

class ReLU {
public:
    static constexpr std::string_view kind() { return "relu"; }
    Tensor infer(const Tensor& x) const { return relu_forward(x); }
    Tensor forward(const Tensor& x, Mode) {
        input_ = x;
        return infer(x);
    }
    Tensor backward(const Tensor& grad_out) { return relu_backward(input_, grad_out); }
    std::vector<Param*> params() { return {}; }
    std::vector<NamedBuffer> buffers() { return {}; }

private:
    Tensor input_;
};

class GlobalAvgPool {
public:
    static constexpr std::string_view kind() { return "global_avg_pool"; }
    Tensor infer(const Tensor& x) const { return global_average_pool(x); }
    Tensor forward(const Tensor& x, Mode) {
        input_shape_ = x.shape();
        return infer(x);
    }
    Tensor backward(const Tensor& grad_out) { return global_average_pool_backward(input_shape_, grad_out); }
    std::vector<Param*> params() { return {}; }
    std::vector<NamedBuffer> buffers() { return {}; }

private:
    Shape input_shape_;
};

class GlobalMaxPool {
public:
    static constexpr std::string_view kind() { return "global_max_pool"; }
    Tensor infer(const Tensor& x) const { return global_max_pool(x).first; }
    Tensor forward(const Tensor& x, Mode) {
        input_shape_ = x.shape();
        auto [y, argmax] = global_max_pool(x);
        argmax_ = std::move(argmax);
        return std::move(y);
    }
    Tensor backward(const Tensor& grad_out) {
        Tensor dx(input_shape_);
        for (std::size_t i = 0; i < argmax_.size(); ++i) dx[argmax_[i]] += grad_out[i];
        return dx;
    }
    std::vector<Param*> params() { return {}; }
    std::vector<NamedBuffer> buffers() { return {}; }

private:
    Shape input_shape_;
    std::vector<std::size_t> argmax_;
};

/// Inverted dropout; identity at inference.
class Dropout {
public:
    Dropout() = default;
    Dropout(double rate, std::uint64_t seed) : rate_(rate), rng_(seed) {
        if (!(rate >= 0.0 && rate < 1.0)) throw InvalidArgument("dropout rate must be in [0, 1)");
    }

    static constexpr std::string_view kind() { return "dropout"; }
    double rate() const { return rate_; }

    Tensor infer(const Tensor& x) const { return x; }

    Tensor forward(const Tensor& x, Mode mode) {
        if (mode == Mode::Infer || rate_ == 0.0) {
            mask_ = Tensor(x.shape(), 1.0);
            return x;
        }
        mask_ = Tensor::zeros_like(x);
        std::bernoulli_distribution keep(1.0 - rate_);
        const double scale = 1.0 / (1.0 - rate_);
        Tensor y = Tensor::zeros_like(x);
        for (std::size_t i = 0; i < x.size(); ++i) {
            mask_[i] = keep(rng_) ? scale : 0.0;
            y[i] = x[i] * mask_[i];
        }
        return y;
    }

    Tensor backward(const Tensor& grad_out) {
        Tensor dx = Tensor::zeros_like(grad_out);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = grad_out[i] * mask_[i];
        return dx;
    }

    std::vector<Param*> params() { return {}; }
    std::vector<NamedBuffer> buffers() { return {}; }

private:
    double rate_ = 0.0;
    std::mt19937_64 rng_;
    Tensor mask_;
};

using Layer = std::variant<Linear, BatchNorm, AconC, SiLU, ReLU, GlobalAvgPool, GlobalMaxPool, Dropout>;

inline std::string_view layer_kind(const Layer& l) {
    return std::visit([](const auto& x) { return x.kind(); }, l);
}

}  // namespace prediag::nn
