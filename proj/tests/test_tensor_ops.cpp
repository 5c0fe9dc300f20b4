#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "rescl/autograd.hpp"
#include "rescl/gradcheck.hpp"

using namespace rescl;

TEST_CASE("matmul: hand arithmetic and identity", "[tensor]") {
    Tape<double> tape;
    auto a = tape.constant(Tensor<double>(Shape{1, 2}, {1, 2}));
    auto b = tape.constant(Tensor<double>(Shape{2, 1}, {1, 1}));
    auto c = matmul(tape, a, b);
    REQUIRE(c->t.shape == Shape{1, 1});
    REQUIRE(c->t[0] == 3.0);

    SplitMix64 rng(7);
    auto m = oracle::random_tensor<double>({4, 4}, rng);
    Tensor<double> eye(Shape{4, 4});
    for (std::size_t i = 0; i < 4; ++i) eye.at2(i, i) = 1.0;
    auto prod = matmul(tape, tape.constant(eye), tape.constant(m));
    REQUIRE(oracle::max_abs_diff(prod->t, m) == 0.0);

    REQUIRE_THROWS_AS(matmul(tape, a, a), std::invalid_argument);
}

TEST_CASE("matmul: gradient of sum matches finite differences", "[tensor][grad]") {
    SplitMix64 rng(11);
    Tensor<double> a = oracle::random_tensor<double>({3, 4}, rng);
    Tensor<double> b = oracle::random_tensor<double>({4, 2}, rng);
    auto value = [&]() {
        Tape<double> tape;
        auto s = sum(tape, matmul(tape, tape.leaf(a, true), tape.leaf(b, true)));
        return s->t[0];
    };
    auto grads = [&]() {
        Tape<double> tape;
        auto va = tape.leaf(a, true);
        auto vb = tape.leaf(b, true);
        auto s = sum(tape, matmul(tape, va, vb));
        tape.backward(s);
        return std::vector<Tensor<double>>{Tensor<double>(a.shape, va->t.grad),
                                           Tensor<double>(b.shape, vb->t.grad)};
    };
    REQUIRE(grad_check<double>({&a, &b}, value, grads) <= 1e-6);
}

TEST_CASE("conv2d: all-ones 3x3 sums to 9; 1x1 kernel scales", "[tensor]") {
    Tape<double> tape;
    auto x = tape.constant(Tensor<double>::ones({1, 1, 3, 3}));
    auto w = tape.constant(Tensor<double>::ones({1, 1, 3, 3}));
    auto b = tape.constant(Tensor<double>::zeros({1}));
    auto y = conv2d(tape, x, w, b, 1, 0);
    REQUIRE(y->t.shape == Shape{1, 1, 1, 1});
    REQUIRE(y->t[0] == 9.0);

    SplitMix64 rng(3);
    auto img = oracle::random_tensor<double>({2, 1, 4, 4}, rng);
    auto two = tape.constant(Tensor<double>(Shape{1, 1, 1, 1}, {2.0}));
    auto doubled = conv2d(tape, tape.constant(img), two, b, 1, 0);
    for (std::size_t i = 0; i < img.size(); ++i) REQUIRE(doubled->t[i] == 2.0 * img[i]);
}

TEST_CASE("conv2d: non-integral output size and channel mismatch are errors", "[tensor]") {
    Tape<double> tape;
    auto x = tape.constant(Tensor<double>::ones({1, 1, 5, 5}));
    auto w = tape.constant(Tensor<double>::ones({1, 1, 2, 2}));
    auto b = tape.constant(Tensor<double>::zeros({1}));
    REQUIRE_THROWS_AS(conv2d(tape, x, w, b, 2, 0), std::invalid_argument);
    auto w2 = tape.constant(Tensor<double>::ones({1, 3, 3, 3}));
    REQUIRE_THROWS_AS(conv2d(tape, x, w2, b, 1, 1), std::invalid_argument);
}

TEST_CASE("conv2d: random cases match the direct-loop reference", "[tensor]") {
    SplitMix64 rng(17);
    for (int trial = 0; trial < 8; ++trial) {
        std::size_t n = 1 + rng.below(3), ci = 1 + rng.below(3), co = 1 + rng.below(4);
        std::size_t k = 1 + 2 * rng.below(2);  // 1 or 3
        std::size_t stride = 1 + rng.below(2), pad = rng.below(2);
        std::size_t h = k + stride * (1 + rng.below(4));
        if ((h + 2 * pad - k) % stride != 0) h += stride - (h + 2 * pad - k) % stride;
        auto x = oracle::random_tensor<double>({n, ci, h, h}, rng);
        auto w = oracle::random_tensor<double>({co, ci, k, k}, rng);
        auto b = oracle::random_tensor<double>({co}, rng);
        Tape<double> tape;
        auto y = conv2d(tape, tape.constant(x), tape.constant(w), tape.constant(b), stride, pad);
        auto ref = oracle::conv2d_ref(x, w, b, stride, pad);
        REQUIRE(y->t.shape == ref.shape);
        REQUIRE(oracle::max_abs_diff(y->t, ref) <= 1e-6);
    }
}

TEST_CASE("conv2d: full gradients pass finite differences", "[tensor][grad]") {
    SplitMix64 rng(23);
    Tensor<double> x = oracle::random_tensor<double>({2, 2, 4, 4}, rng);
    Tensor<double> w = oracle::random_tensor<double>({3, 2, 3, 3}, rng);
    Tensor<double> b = oracle::random_tensor<double>({3}, rng);
    auto build = [&](Tape<double>& tape, Var<double>& vx, Var<double>& vw, Var<double>& vb) {
        vx = tape.leaf(x, true);
        vw = tape.leaf(w, true);
        vb = tape.leaf(b, true);
        // square the output so the gradient is input-dependent
        auto y = conv2d(tape, vx, vw, vb, 1, 1);
        return sum_squares(tape, y);
    };
    auto value = [&]() {
        Tape<double> tape;
        Var<double> vx, vw, vb;
        return build(tape, vx, vw, vb)->t[0];
    };
    auto grads = [&]() {
        Tape<double> tape;
        Var<double> vx, vw, vb;
        auto loss = build(tape, vx, vw, vb);
        tape.backward(loss);
        return std::vector<Tensor<double>>{Tensor<double>(x.shape, vx->t.grad),
                                           Tensor<double>(w.shape, vw->t.grad),
                                           Tensor<double>(b.shape, vb->t.grad)};
    };
    REQUIRE(grad_check<double>({&x, &w, &b}, value, grads) <= 1e-6);
}

TEST_CASE("softmax_t: tempered rows, symmetry, large-T limit", "[tensor]") {
    Tape<double> tape;
    auto logits = tape.constant(Tensor<double>(Shape{1, 2}, {2.0, 0.0}));
    auto q = softmax_t(tape, logits, 2.0);
    double e = std::exp(1.0);
    REQUIRE(q->t[0] == Catch::Approx(e / (e + 1)).epsilon(1e-12));
    REQUIRE(q->t[1] == Catch::Approx(1 / (e + 1)).epsilon(1e-12));

    auto equal = tape.constant(Tensor<double>(Shape{1, 3}, {0.7, 0.7, 0.7}));
    auto u = softmax_t(tape, equal, 5.0);
    for (std::size_t j = 0; j < 3; ++j) REQUIRE(u->t[j] == Catch::Approx(1.0 / 3).epsilon(1e-12));

    auto flat = softmax_t(tape, logits, 1024.0);
    REQUIRE(std::abs(flat->t[0] - 0.5) <= 1e-3);
    REQUIRE(std::abs(flat->t[1] - 0.5) <= 1e-3);

    REQUIRE_THROWS_AS(softmax_t(tape, logits, 0.0), std::invalid_argument);
    auto bad = tape.constant(Tensor<double>(Shape{1, 2}, {std::nan(""), 0.0}));
    REQUIRE_THROWS_AS(softmax_t(tape, bad, 1.0), std::invalid_argument);
}

TEST_CASE("softmax_t: rows strictly positive and sum to one", "[tensor][property]") {
    SplitMix64 rng(31);
    for (int trial = 0; trial < 25; ++trial) {
        std::size_t n = 1 + rng.below(6), k = 2 + rng.below(7);
        auto logits = oracle::random_tensor<double>({n, k}, rng, -20, 20);
        Tape<double> tape;
        auto q = softmax_t(tape, tape.constant(logits), 0.5 + rng.uniform() * 4);
        for (std::size_t i = 0; i < n; ++i) {
            double row = 0;
            for (std::size_t j = 0; j < k; ++j) {
                REQUIRE(q->t[i * k + j] > 0.0);
                row += q->t[i * k + j];
            }
            REQUIRE(std::abs(row - 1.0) <= 1e-9);
        }
    }
}

TEST_CASE("scale_per_channel: identity, zero, gradient", "[tensor]") {
    SplitMix64 rng(41);
    Tensor<double> x = oracle::random_tensor<double>({2, 3, 2, 2}, rng);
    {
        Tape<double> tape;
        auto y = scale_per_channel(tape, tape.constant(x), tape.constant(Tensor<double>::ones({3})));
        REQUIRE(oracle::max_abs_diff(y->t, x) == 0.0);
        auto z = scale_per_channel(tape, tape.constant(x), tape.constant(Tensor<double>::zeros({3})));
        for (double v : z->t.data) REQUIRE(v == 0.0);
        REQUIRE_THROWS_AS(
            scale_per_channel(tape, tape.constant(x), tape.constant(Tensor<double>::ones({4}))),
            std::invalid_argument);
    }
    Tensor<double> s = oracle::random_tensor<double>({3}, rng);
    auto value = [&]() {
        Tape<double> tape;
        return sum_squares(tape, scale_per_channel(tape, tape.leaf(x, true), tape.leaf(s, true)))
            ->t[0];
    };
    auto grads = [&]() {
        Tape<double> tape;
        auto vx = tape.leaf(x, true);
        auto vs = tape.leaf(s, true);
        auto loss = sum_squares(tape, scale_per_channel(tape, vx, vs));
        tape.backward(loss);
        return std::vector<Tensor<double>>{Tensor<double>(x.shape, vx->t.grad),
                                           Tensor<double>(s.shape, vs->t.grad)};
    };
    REQUIRE(grad_check<double>({&x, &s}, value, grads) <= 1e-6);
}

TEST_CASE("grad_check: analytic square, constant loss", "[tensor]") {
    Tensor<double> w = Tensor<double>::scalar(3.0);
    auto value = [&]() {
        Tape<double> tape;
        return sum_squares(tape, tape.leaf(w, true))->t[0];
    };
    auto grads = [&]() {
        Tape<double> tape;
        auto vw = tape.leaf(w, true);
        auto loss = sum_squares(tape, vw);
        tape.backward(loss);
        REQUIRE(vw->t.grad[0] == Catch::Approx(6.0).epsilon(1e-12));
        return std::vector<Tensor<double>>{Tensor<double>(w.shape, vw->t.grad)};
    };
    REQUIRE(grad_check<double>({&w}, value, grads) <= 1e-9);

    // constant loss: both gradients are exactly zero
    auto const_value = [&]() {
        Tape<double> tape;
        return scale(tape, sum(tape, tape.leaf(w, true)), 0.0)->t[0];
    };
    auto const_grads = [&]() {
        Tape<double> tape;
        auto vw = tape.leaf(w, true);
        auto loss = scale(tape, sum(tape, vw), 0.0);
        tape.backward(loss);
        REQUIRE(vw->t.grad[0] == 0.0);
        return std::vector<Tensor<double>>{Tensor<double>(w.shape, vw->t.grad)};
    };
    REQUIRE(grad_check<double>({&w}, const_value, const_grads) == 0.0);
}

TEST_CASE("every differentiable op passes grad_check on random shapes", "[tensor][property]") {
    // randomized mixed expression: conv -> relu -> bn -> scale/bias -> pool
    // -> linear -> softmax-kl plus elementwise ops, 20+ seeds
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        SplitMix64 rng(1000 + seed);
        std::size_t n = 2 + rng.below(3), ci = 1 + rng.below(2), co = 1 + rng.below(3);
        std::size_t h = 4 + 2 * rng.below(2);
        Tensor<double> x = oracle::random_tensor<double>({n, ci, h, h}, rng);
        Tensor<double> w = oracle::random_tensor<double>({co, ci, 3, 3}, rng);
        Tensor<double> b = oracle::random_tensor<double>({co}, rng);
        Tensor<double> gamma = oracle::random_tensor<double>({co}, rng, 0.5, 1.5);
        Tensor<double> beta = oracle::random_tensor<double>({co}, rng, -0.5, 0.5);
        Tensor<double> s = oracle::random_tensor<double>({co}, rng, -1.5, 1.5);
        std::size_t k = 2 + rng.below(3);
        Tensor<double> hw = oracle::random_tensor<double>({k, co}, rng);
        Tensor<double> hb = oracle::random_tensor<double>({k}, rng);
        Tensor<double> targets(Shape{n, k});
        for (std::size_t i = 0; i < n; ++i) {
            double sum = 0;
            for (std::size_t j = 0; j < k; ++j) {
                targets[i * k + j] = rng.uniform(0.05, 1.0);
                sum += targets[i * k + j];
            }
            for (std::size_t j = 0; j < k; ++j) targets[i * k + j] /= sum;
        }
        std::vector<Tensor<double>*> params{&x, &w, &b, &gamma, &beta, &s, &hw, &hb};
        auto build = [&](Tape<double>& tape, std::vector<Var<double>>& vars) {
            vars.clear();
            for (auto* p : params) vars.push_back(tape.leaf(*p, true));
            auto y = conv2d(tape, vars[0], vars[1], vars[2], 1, 1);
            y = relu(tape, y);
            y = batchnorm_train(tape, y, vars[3], vars[4], 1e-5);
            y = scale_per_channel(tape, y, vars[5]);
            y = channel_bias(tape, y, vars[2]);
            y = global_avg_pool(tape, y);
            auto logits = linear(tape, y, vars[6], vars[7]);
            auto loss = kl_tempered(tape, targets, logits, 2.0);
            loss = add(tape, loss, scale(tape, sum_abs(tape, vars[5]), 0.01));
            loss = add(tape, loss, scale(tape, sum_squares(tape, vars[1]), 0.005));
            // small linear term so no element has a near-zero gradient;
            // central differences on O(1) losses cannot resolve those
            for (auto& v : vars) loss = add(tape, loss, scale(tape, sum(tape, v), 1e-3));
            return loss;
        };
        auto value = [&]() {
            Tape<double> tape;
            std::vector<Var<double>> vars;
            return build(tape, vars)->t[0];
        };
        auto grads = [&]() {
            Tape<double> tape;
            std::vector<Var<double>> vars;
            auto loss = build(tape, vars);
            tape.backward(loss);
            std::vector<Tensor<double>> gs;
            for (std::size_t i = 0; i < params.size(); ++i)
                gs.emplace_back(params[i]->shape, vars[i]->t.grad);
            return gs;
        };
        INFO("seed " << seed);
        REQUIRE(grad_check<double>(params, value, grads) <= 1e-4);
    }
}
