#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "prediag/nn/activation.hpp"
#include "prediag/nn/adam.hpp"
#include "prediag/nn/grad_check.hpp"
#include "prediag/nn/layers.hpp"

using namespace prediag;
using namespace prediag::nn;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    for (auto& v : t.data()) v = d(rng);
    return t;
}

double dot(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

constexpr double kTol = 1e-5;
constexpr int kPoints = 20;

}  // namespace

TEST_CASE("tensor basics") {
    Tensor t({2, 3}, 1.5);
    CHECK(t.size() == 6);
    CHECK(t.channels() == 3);
    CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(t.reshaped({4}), ShapeError);
    t[0] = std::nan("");
    CHECK_FALSE(t.all_finite());
    CHECK_THROWS_AS(t.require_finite("t"), NumericError);
}

TEST_CASE("acon_c forward examples") {
    AconCParams half{Tensor({1}, 0.5), Tensor({1}, 0.5), Tensor({1}, 3.0)};
    CHECK(acon_c_forward(Tensor({1}, 2.0), half)[0] == Catch::Approx(1.0).epsilon(1e-15));
    const auto swish = AconCParams::swish_init(1);
    CHECK(acon_c_forward(Tensor({1}, 0.0), swish)[0] == 0.0);
    CHECK(acon_c_forward(Tensor({1}, 1.0), swish)[0] == Catch::Approx(0.7310585786300049).epsilon(1e-12));
    CHECK_THROWS_AS(acon_c_forward(Tensor({2, 3}), swish), ShapeError);
    CHECK(silu_forward(Tensor({1}, 0.0))[0] == 0.0);
    CHECK(silu_forward(Tensor({1}, 1.0))[0] == Catch::Approx(0.7310585786300049).epsilon(1e-12));
}

TEST_CASE("acon_c forward matches a scalar evaluation per channel") {
    std::mt19937_64 rng(11);
    const auto x = random_tensor({4, 3}, rng, -5, 5);
    AconCParams p{random_tensor({3}, rng), random_tensor({3}, rng), random_tensor({3}, rng, 0.1, 3)};
    const auto y = acon_c_forward(x, p);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const auto c = i % 3;
        CHECK(y[i] == Catch::Approx(oracle::acon_c(x[i], p.p1[c], p.p2[c], p.beta[c])).epsilon(1e-12).margin(1e-14));
    }
}

TEST_CASE("acon_c backward closed-form cases") {
    const Tensor up({1}, 1.0);
    AconCParams flat{Tensor({1}, 0.7), Tensor({1}, 0.7), Tensor({1}, 2.0)};
    auto g = acon_c_backward(Tensor({1}, 1.3), flat, up);
    CHECK(g.dx[0] == 0.7);
    CHECK(g.dbeta[0] == 0.0);

    AconCParams p{Tensor({1}, 1.4), Tensor({1}, 0.2), Tensor({1}, 1.7)};
    g = acon_c_backward(Tensor({1}, 0.0), p, up);
    CHECK(g.dx[0] == Catch::Approx(1.2 / 2 + 0.2).epsilon(1e-15));
    CHECK(g.dp1[0] == 0.0);
    CHECK(g.dp2[0] == 0.0);
    CHECK(g.dbeta[0] == 0.0);
}

TEST_CASE("acon_c equals SiLU at its swish initialisation") {
    const auto swish = AconCParams::swish_init(1);
    double worst = 0.0;
    for (int i = -1000; i <= 1000; ++i) {
        const Tensor x({1}, i * 0.01);
        worst = std::max(worst, std::abs(acon_c_forward(x, swish)[0] - silu_forward(x)[0]));
    }
    CHECK(worst <= 1e-12);
}

TEST_CASE("acon_c approaches maxout for large beta") {
    for (auto [p1, p2] : {std::pair{1.0, 0.0}, std::pair{1.0, 0.25}, std::pair{2.0, -0.5}}) {
        AconCParams p{Tensor({1}, p1), Tensor({1}, p2), Tensor({1}, 1e4)};
        double worst = 0.0;
        for (int i = -1000; i <= 1000; ++i) {
            const double x = i * 0.01;
            if (std::abs(x) < 0.1 - 1e-12) continue;
            worst = std::max(worst, std::abs(acon_c_forward(Tensor({1}, x), p)[0] - std::max(p1 * x, p2 * x)));
        }
        CHECK(worst <= 1e-3);
    }
}

TEST_CASE("gradient check: acon_c") {
    std::mt19937_64 rng(21);
    for (int point = 0; point < kPoints; ++point) {
        const auto x = random_tensor({3, 4}, rng, -3, 3);
        AconCParams p{random_tensor({4}, rng), random_tensor({4}, rng), random_tensor({4}, rng, 0.2, 2.5)};
        const auto up = random_tensor({3, 4}, rng);
        const auto g = acon_c_backward(x, p, up);
        CHECK(numeric_grad_check([&](const Tensor& v) { return dot(acon_c_forward(v, p), up); }, g.dx, x) < kTol);
        CHECK(numeric_grad_check(
                  [&](const Tensor& v) { return dot(acon_c_forward(x, {v, p.p2, p.beta}), up); }, g.dp1, p.p1) < kTol);
        CHECK(numeric_grad_check(
                  [&](const Tensor& v) { return dot(acon_c_forward(x, {p.p1, v, p.beta}), up); }, g.dp2, p.p2) < kTol);
        CHECK(numeric_grad_check(
                  [&](const Tensor& v) { return dot(acon_c_forward(x, {p.p1, p.p2, v}), up); }, g.dbeta, p.beta) < kTol);
    }
}

TEST_CASE("gradient check: linear / conv1x1") {
    std::mt19937_64 rng(22);
    for (int point = 0; point < kPoints; ++point) {
        const auto x = random_tensor({2, 2, 3, 5}, rng);
        const auto w = random_tensor({5, 4}, rng);
        const auto b = random_tensor({4}, rng);
        const auto up = random_tensor({2, 2, 3, 4}, rng);
        const auto g = linear_backward(x, w, up);
        CHECK(numeric_grad_check([&](const Tensor& v) { return dot(linear_forward(v, w, b), up); }, g.dx, x) < kTol);
        CHECK(numeric_grad_check([&](const Tensor& v) { return dot(linear_forward(x, v, b), up); }, g.dweight, w) < kTol);
        CHECK(numeric_grad_check([&](const Tensor& v) { return dot(linear_forward(x, w, v), up); }, g.dbias, b) < kTol);
    }
}

TEST_CASE("gradient check: batch norm") {
    std::mt19937_64 rng(23);
    for (int point = 0; point < kPoints; ++point) {
        const auto x = random_tensor({4, 2, 3}, rng);
        const auto gamma = random_tensor({3}, rng, 0.5, 2.0);
        const auto beta = random_tensor({3}, rng);
        const auto up = random_tensor({4, 2, 3}, rng);
        const auto r = batch_norm_train(x, gamma, beta);
        const auto g = batch_norm_backward(r.cache, gamma, up);
        CHECK(numeric_grad_check([&](const Tensor& v) { return dot(batch_norm_train(v, gamma, beta).y, up); }, g.dx, x) <
              kTol);
        CHECK(numeric_grad_check([&](const Tensor& v) { return dot(batch_norm_train(x, v, beta).y, up); }, g.dgamma,
                                 gamma) < kTol);
        CHECK(numeric_grad_check([&](const Tensor& v) { return dot(batch_norm_train(x, gamma, v).y, up); }, g.dbeta,
                                 beta) < kTol);
    }
}

TEST_CASE("gradient check: softmax cross-entropy") {
    std::mt19937_64 rng(24);
    for (int point = 0; point < kPoints; ++point) {
        const auto logits = random_tensor({5}, rng, -4, 4);
        const std::size_t label = rng() % 5;
        const auto r = softmax_cross_entropy(logits, label);
        CHECK(numeric_grad_check([&](const Tensor& v) { return softmax_cross_entropy(v, label).loss; }, r.grad, logits) <
              kTol);

        const auto batch = random_tensor({3, 4}, rng, -4, 4);
        const std::vector<std::size_t> labels{rng() % 4, rng() % 4, rng() % 4};
        const auto rb = softmax_cross_entropy_batch(batch, labels);
        CHECK(numeric_grad_check([&](const Tensor& v) { return softmax_cross_entropy_batch(v, labels).loss; }, rb.grad,
                                 batch) < kTol);
    }
}

TEST_CASE("gradient check: pooling and pointwise activations") {
    std::mt19937_64 rng(25);
    for (int point = 0; point < kPoints; ++point) {
        const auto x = random_tensor({2, 3, 2, 4}, rng);
        const auto up = random_tensor({2, 4}, rng);
        CHECK(numeric_grad_check([&](const Tensor& v) { return dot(global_average_pool(v), up); },
                                 global_average_pool_backward(x.shape(), up), x) < kTol);
        GlobalMaxPool gmp;
        gmp.forward(x, Mode::Train);
        CHECK(numeric_grad_check([&](const Tensor& v) { return dot(global_max_pool(v).first, up); }, gmp.backward(up),
                                 x) < kTol);

        const auto y = random_tensor({3, 4}, rng);
        const auto upy = random_tensor({3, 4}, rng);
        CHECK(numeric_grad_check([&](const Tensor& v) { return dot(silu_forward(v), upy); }, silu_backward(y, upy), y) <
              kTol);
    }
}

TEST_CASE("planted gradient fault is detected") {
    std::mt19937_64 rng(26);
    const auto x = random_tensor({3, 4}, rng);
    const auto p = AconCParams::swish_init(4);
    const auto up = random_tensor({3, 4}, rng);
    auto g = acon_c_backward(x, p, up);
    for (auto& v : g.dx.data()) v *= 2.0;
    const double err = numeric_grad_check([&](const Tensor& v) { return dot(acon_c_forward(v, p), up); }, g.dx, x);
    CHECK(err == Catch::Approx(0.5).margin(1e-6));
}

TEST_CASE("numeric_grad_check on a quadratic") {
    std::mt19937_64 rng(27);
    const auto w = random_tensor({6}, rng);
    Tensor analytic = w;
    for (auto& v : analytic.data()) v *= 2.0;
    CHECK(numeric_grad_check([](const Tensor& v) { return dot(v, v); }, analytic, w) < 1e-7);
    CHECK_THROWS_AS(numeric_grad_check([](const Tensor&) { return std::nan(""); }, analytic, w), NumericError);
    CHECK_THROWS_AS(numeric_gradient([](const Tensor& v) { return dot(v, v); }, w, 0.0), InvalidArgument);
}

TEST_CASE("batch norm examples") {
    const Tensor x({3, 1}, std::vector<double>{1, 2, 3});
    const auto r = batch_norm_train(x, Tensor({1}, 1.0), Tensor({1}, 0.0));
    CHECK(r.y[0] == Catch::Approx(-1.0 / std::sqrt(2.0 / 3.0 + 1e-5)).epsilon(1e-12));
    CHECK(r.y[0] == Catch::Approx(-1.2247).epsilon(1e-4));
    CHECK(r.y[1] == Catch::Approx(0.0).margin(1e-15));
    CHECK(r.y[2] == Catch::Approx(1.2247).epsilon(1e-4));

    std::mt19937_64 rng(5);
    const auto big = random_tensor({50, 2}, rng, -3, 7);
    const auto n = batch_norm_train(big, Tensor({2}, 1.0), Tensor({2}, 0.0)).y;
    for (std::size_t c = 0; c < 2; ++c) {
        double mean = 0.0, var = 0.0;
        for (std::size_t i = 0; i < 50; ++i) mean += n[i * 2 + c] / 50.0;
        for (std::size_t i = 0; i < 50; ++i) var += (n[i * 2 + c] - mean) * (n[i * 2 + c] - mean) / 50.0;
        CHECK(mean == Catch::Approx(0.0).margin(1e-12));
        CHECK(var == Catch::Approx(1.0).epsilon(1e-3));
    }

    const auto affine = batch_norm_infer(Tensor({1, 1}, 3.0), Tensor({1}, 2.0), Tensor({1}, 0.5), Tensor({1}, 0.0),
                                         Tensor({1}, 1.0));
    CHECK(affine[0] == Catch::Approx(2.0 * 3.0 / std::sqrt(1.0 + 1e-5) + 0.5).epsilon(1e-15));

    CHECK_THROWS_AS(batch_norm_train(Tensor({1, 3}), Tensor({3}, 1.0), Tensor({3})), InvalidArgument);

    BatchNorm layer("bn", 1);
    layer.forward(x, Mode::Train);
    CHECK(layer.running_mean()[0] == Catch::Approx(0.1 * 2.0).epsilon(1e-15));
    CHECK(layer.running_var()[0] == Catch::Approx(0.9 + 0.1 * 1.0).epsilon(1e-15));
    CHECK(layer.running_var()[0] > 0.0);
}

TEST_CASE("pooling examples") {
    const Tensor map({2, 2, 1}, std::vector<double>{1, 2, 3, 4});
    CHECK(global_average_pool(map)[0] == 2.5);
    CHECK(global_max_pool(map).first[0] == 4.0);
    const Tensor one({1, 1, 3}, std::vector<double>{1, -2, 5});
    CHECK(global_average_pool(one).values() == one.values());
    CHECK(global_average_pool(Tensor({3, 4, 2}, 7.0)).values() == std::vector<double>{7.0, 7.0});
}

TEST_CASE("linear examples") {
    std::mt19937_64 rng(6);
    Tensor eye({3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
    const auto x = random_tensor({4, 3}, rng);
    CHECK(linear_forward(x, eye, Tensor({3})).values() == x.values());

    const auto w = random_tensor({3, 2}, rng);
    const auto b = random_tensor({2}, rng);
    const auto spatial = linear_forward(x.reshaped({4, 1, 1, 3}), w, b);
    const auto dense = linear_forward(x, w, b);
    CHECK(spatial.shape() == Shape{4, 1, 1, 2});
    CHECK(spatial.values() == dense.values());
    CHECK_THROWS_AS(linear_forward(Tensor({2, 4}), w, b), ShapeError);
}

TEST_CASE("softmax and cross-entropy examples") {
    CHECK(softmax_cross_entropy(Tensor({2}), 0).loss == Catch::Approx(std::log(2.0)).epsilon(1e-15));
    const auto big = softmax_cross_entropy(Tensor({2}, std::vector<double>{1000, 0}), 0);
    CHECK(std::isfinite(big.loss));
    CHECK(big.loss == Catch::Approx(0.0).margin(1e-300));
    CHECK(big.grad.all_finite());
    CHECK_THROWS_AS(softmax_cross_entropy(Tensor({2}), 2), InvalidArgument);

    std::mt19937_64 rng(7);
    for (int i = 0; i < 100; ++i) {
        const auto logits = random_tensor({6}, rng, -50, 50);
        const auto p = softmax(logits.data());
        double sum = 0.0;
        for (double v : p) {
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
}

TEST_CASE("adam examples") {
    Tensor w({3}, 1.0);
    AdamState st(w);
    adam_step(w, Tensor({3}, 1.0), st);
    for (double v : w.values()) CHECK(v == Catch::Approx(1.0 - 0.001).epsilon(1e-9));
    CHECK(st.t == 1);

    Tensor z({2}, 0.5);
    AdamState sz(z);
    adam_step(z, Tensor({2}, 0.0), sz);
    CHECK(z.values() == std::vector<double>{0.5, 0.5});
    CHECK(sz.t == 1);

    Param a("a", Tensor({2}, 1.0)), b("b", Tensor({2}, 1.0));
    Adam opt({&a, &b});
    a.grad.fill(1.0);
    opt.step();
    CHECK(b.value.values() == std::vector<double>{1.0, 1.0});
    CHECK(opt.states()[1].m.values() == std::vector<double>{0.0, 0.0});
    CHECK(a.value[0] < 1.0);

    Tensor bad({3}, std::nan(""));
    CHECK_THROWS_AS(adam_step(w, bad, st), NumericError);
    CHECK_THROWS_AS(adam_step(w, Tensor({2}), st), ShapeError);
}

TEST_CASE("dropout is inverted and seeded") {
    Dropout a(0.3, 9), b(0.3, 9);
    const Tensor x({1000}, 1.0);
    const auto ya = a.forward(x, Mode::Train);
    CHECK(ya.values() == b.forward(x, Mode::Train).values());
    std::size_t kept = 0;
    for (double v : ya.values()) {
        CHECK((v == 0.0 || v == Catch::Approx(1.0 / 0.7)));
        kept += v != 0.0;
    }
    CHECK(kept > 620);
    CHECK(kept < 780);
    CHECK(a.forward(x, Mode::Infer).values() == x.values());
    CHECK_THROWS_AS(Dropout(1.0, 1), InvalidArgument);
}

TEST_CASE("a training step is deterministic") {
    auto run = [] {
        std::mt19937_64 rng(77);
        Linear lin("l", 4, 3, rng);
        AconC act("a", 3);
        Adam opt([&] {
            auto p = lin.params();
            for (auto* q : act.params()) p.push_back(q);
            return p;
        }());
        const auto x = random_tensor({8, 4}, rng);
        const std::vector<std::size_t> labels{0, 1, 2, 0, 1, 2, 0, 1};
        std::vector<double> trajectory;
        for (int step = 0; step < 5; ++step) {
            opt.zero_grad();
            const auto logits = act.forward(lin.forward(x, Mode::Train), Mode::Train);
            const auto r = softmax_cross_entropy_batch(logits, labels);
            lin.backward(act.backward(r.grad));
            opt.step();
            for (auto* p : lin.params()) trajectory.insert(trajectory.end(), p->value.values().begin(), p->value.values().end());
        }
        return trajectory;
    };
    CHECK(oracle::bitwise_equal(run(), run()));
}
