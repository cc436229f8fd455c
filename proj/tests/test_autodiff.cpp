#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "pd/fdcheck.hpp"
#include "pd/graph.hpp"

using namespace pd;

namespace {

Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1, double hi = 1) {
    Tensor<double> t(std::move(s));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// gradient of sum(op(x)) checked against central differences
using UnaryOp = std::function<int(Graph<double>&, int)>;

double check_unary(const UnaryOp& op, const Tensor<double>& x, std::uint64_t seed) {
    Graph<double> g;
    const int xi = g.input(x, true);
    const int loss = g.sum_all(op(g, xi));
    g.backward(loss);
    const auto analytic = g.grad(xi);
    auto f = [&](const std::vector<double>& v) {
        Graph<double> h;
        Tensor<double> t = x;
        t.data = v;
        return h.val(h.sum_all(op(h, h.input(t))))[0];
    };
    return fd_check_vector(f, x.data, analytic.data, 0, seed).max_rel_err;
}

}  // namespace

TEST_CASE("matmul values") {
    Graph<double> g;
    const int a = g.input(Tensor<double>({2, 2}, {1, 2, 3, 4}));
    const int eye = g.input(Tensor<double>({2, 2}, {1, 0, 0, 1}));
    CHECK(g.val(g.matmul(a, eye)).data == std::vector<double>{1, 2, 3, 4});

    const int ones = g.input(Tensor<double>({2, 1}, {1, 1}));
    CHECK(g.val(g.matmul(a, ones)).data == std::vector<double>{3, 7});

    CHECK_THROWS_AS(g.matmul(a, g.input(Tensor<double>({3, 2}))), ShapeError);
}

TEST_CASE("matmul gradient") {
    Rng rng(1);
    auto A = random_tensor({4, 5}, rng);
    auto B = random_tensor({5, 3}, rng);
    Graph<double> g;
    const int ai = g.input(A, true);
    const int bi = g.input(B, true);
    const int loss = g.sum_all(g.matmul(ai, bi));
    g.backward(loss);
    auto ga = g.grad(ai);
    auto gb = g.grad(bi);
    auto fa = [&](const std::vector<double>& v) {
        Graph<double> h;
        Tensor<double> t = A;
        t.data = v;
        return h.val(h.sum_all(h.matmul(h.input(t), h.input(B))))[0];
    };
    CHECK(fd_check_vector(fa, A.data, ga.data, 0, 1).max_rel_err < 1e-4);
    auto fb = [&](const std::vector<double>& v) {
        Graph<double> h;
        Tensor<double> t = B;
        t.data = v;
        return h.val(h.sum_all(h.matmul(h.input(A), h.input(t))))[0];
    };
    CHECK(fd_check_vector(fb, B.data, gb.data, 0, 2).max_rel_err < 1e-4);
}

TEST_CASE("softmax values and gradient") {
    Graph<double> g;
    const int c = g.input(Tensor<double>({1, 4}, {2, 2, 2, 2}));
    for (double v : g.val(g.softmax(c)).data) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

    const int x = g.input(Tensor<double>({1, 2}, {0.0, std::log(3.0)}));
    auto sm = g.val(g.softmax(x));
    CHECK(sm[0] == doctest::Approx(0.25).epsilon(1e-9));
    CHECK(sm[1] == doctest::Approx(0.75).epsilon(1e-9));

    // rows sum to 1 for large-magnitude inputs
    Rng rng(2);
    auto big = random_tensor({6, 8}, rng, -50, 50);
    Graph<double> h;
    auto y = h.val(h.softmax(h.input(big)));
    for (int r = 0; r < 6; ++r) {
        double s = 0;
        for (int i = 0; i < 8; ++i) {
            const double v = y[std::size_t(r) * 8 + std::size_t(i)];
            CHECK(v > 0.0);
            CHECK(v < 1.0);
            s += v;
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }

    auto t = random_tensor({3, 5}, rng);
    // weighted sum to get a non-trivial softmax adjoint
    auto w = random_tensor({3, 5}, rng);
    auto op = [&](Graph<double>& gg, int xi) { return gg.mul(gg.softmax(xi), gg.input(w)); };
    CHECK(check_unary(op, t, 3) < 1e-4);
}

TEST_CASE("layer_norm values and gradient") {
    Rng rng(4);
    Graph<double> g;
    const int gain = g.input(Tensor<double>::full({4}, 1.0), true);
    const int bias = g.input(Tensor<double>::zeros({4}), true);
    const int cst = g.input(Tensor<double>({1, 4}, {5, 5, 5, 5}));
    for (double v : g.val(g.layer_norm(cst, gain, bias)).data)
        CHECK(v == doctest::Approx(0.0).epsilon(1e-9));

    // full param + input gradient via the store harness
    ParamStore<double> store;
    store.add("x", random_tensor({3, 4}, rng));
    store.add("gain", random_tensor({4}, rng, 0.5, 1.5));
    store.add("bias", random_tensor({4}, rng));
    auto build = [](Graph<double>& h, ParamStore<double>& s) {
        return h.sum_all(h.mul(h.layer_norm(h.param(s, "x"), h.param(s, "gain"), h.param(s, "bias")),
                               h.input(Tensor<double>({3, 4}, {1, -2, 3, -4, 5, -6, 7, -8, 9, -10, 11, -12}))));
    };
    CHECK(fd_check_params(store, build, 0, 5).max_rel_err < 1e-4);
}

TEST_CASE("batch_norm train/eval") {
    Rng rng(6);
    SUBCASE("eval identity with unit running stats") {
        Graph<double> g;
        auto x = random_tensor({5, 3}, rng);
        Tensor<double> rm = Tensor<double>::zeros({3});
        Tensor<double> rv = Tensor<double>::full({3}, 1.0);
        const int gain = g.input(Tensor<double>::full({3}, 1.0));
        const int bias = g.input(Tensor<double>::zeros({3}));
        auto y = g.val(g.batch_norm(g.input(x), gain, bias, rm, rv, false, 0.1, 0.0));
        for (std::size_t i = 0; i < x.data.size(); ++i)
            CHECK(y[i] == doctest::Approx(x[i]).epsilon(1e-9));
    }
    SUBCASE("train mode centers each channel") {
        Graph<double> g;
        auto x = random_tensor({8, 3}, rng);
        Tensor<double> rm = Tensor<double>::zeros({3});
        Tensor<double> rv = Tensor<double>::full({3}, 1.0);
        const int gain = g.input(Tensor<double>::full({3}, 1.0));
        const int bias = g.input(Tensor<double>::zeros({3}));
        auto y = g.val(g.batch_norm(g.input(x), gain, bias, rm, rv, true));
        for (int c = 0; c < 3; ++c) {
            double mu = 0;
            for (int r = 0; r < 8; ++r) mu += y[std::size_t(r) * 3 + std::size_t(c)];
            CHECK(mu / 8 == doctest::Approx(0.0).epsilon(1e-5));
        }
        // running stats moved toward batch stats
        CHECK(rm[0] != 0.0);
    }
    SUBCASE("degenerate batch rejected") {
        Graph<double> g;
        Tensor<double> rm = Tensor<double>::zeros({3});
        Tensor<double> rv = Tensor<double>::full({3}, 1.0);
        const int gain = g.input(Tensor<double>::full({3}, 1.0));
        const int bias = g.input(Tensor<double>::zeros({3}));
        CHECK_THROWS_AS(g.batch_norm(g.input(Tensor<double>({1, 3})), gain, bias, rm, rv, true),
                        InvalidArgument);
    }
    SUBCASE("train-mode gradient") {
        ParamStore<double> store;
        store.add("x", random_tensor({6, 3}, rng));
        store.add("gain", random_tensor({3}, rng, 0.5, 1.5));
        store.add("bias", random_tensor({3}, rng));
        auto w = random_tensor({6, 3}, rng);
        auto rm = std::make_shared<Tensor<double>>(Tensor<double>::zeros({3}));
        auto rv = std::make_shared<Tensor<double>>(Tensor<double>::full({3}, 1.0));
        auto build = [w, rm, rv](Graph<double>& h, ParamStore<double>& s) {
            return h.sum_all(h.mul(h.batch_norm(h.param(s, "x"), h.param(s, "gain"),
                                                h.param(s, "bias"), *rm, *rv, true),
                                   h.input(w)));
        };
        CHECK(fd_check_params(store, build, 0, 7).max_rel_err < 1e-4);
    }
}

TEST_CASE("activations") {
    Graph<double> g;
    CHECK(g.val(g.relu(g.input(Tensor<double>({3}, {-1, 0, 2})))).data ==
          std::vector<double>{0, 0, 2});
    CHECK(g.val(g.gelu(g.input(Tensor<double>({1}, {0.0}))))[0] == 0.0);

    Rng rng(8);
    // keep relu inputs away from the kink
    Tensor<double> x({20});
    for (auto& v : x.data) {
        v = rng.uniform(-2, 2);
        if (std::fabs(v) < 1e-2) v = 0.5;
    }
    auto w = random_tensor({20}, rng);
    auto relu_op = [&](Graph<double>& h, int xi) { return h.mul(h.relu(xi), h.input(w)); };
    CHECK(check_unary(relu_op, x, 9) < 1e-4);
    auto gelu_op = [&](Graph<double>& h, int xi) { return h.mul(h.gelu(xi), h.input(w)); };
    CHECK(check_unary(gelu_op, x, 10) < 1e-4);
}

TEST_CASE("mse") {
    Rng rng(12);
    auto p = random_tensor({2, 3}, rng);
    Graph<double> g;
    CHECK(g.val(g.mse(g.input(p), g.input(p)))[0] == 0.0);
    CHECK(g.val(g.mse(g.input(Tensor<double>({2}, {0, 0})),
                      g.input(Tensor<double>({2}, {2, 0}))))[0] == doctest::Approx(2.0));

    // gradient = 2(pred - target)/N
    auto t = random_tensor({2, 3}, rng);
    Graph<double> h;
    const int pi = h.input(p, true);
    const int loss = h.mse(pi, h.input(t));
    h.backward(loss);
    auto grad = h.grad(pi);
    for (std::size_t i = 0; i < p.data.size(); ++i)
        CHECK(grad[i] == doctest::Approx(2.0 * (p[i] - t[i]) / 6.0).epsilon(1e-5));
}

TEST_CASE("backward basics") {
    SUBCASE("sum gradient is all ones") {
        Graph<double> g;
        const int x = g.input(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}), true);
        g.backward(g.sum_all(x));
        CHECK(g.grad(x).data == std::vector<double>(6, 1.0));
    }
    SUBCASE("non-scalar loss rejected") {
        Graph<double> g;
        const int x = g.input(Tensor<double>({2}), true);
        CHECK_THROWS_AS(g.backward(x), InvalidArgument);
    }
    SUBCASE("mse(Wx, y) matches the hand-derived gradient") {
        Rng rng(14);
        auto W = random_tensor({2, 2}, rng);
        auto x = random_tensor({2, 1}, rng);
        auto y = random_tensor({2, 1}, rng);
        Graph<double> g;
        const int wi = g.input(W, true);
        const int loss = g.mse(g.matmul(wi, g.input(x)), g.input(y));
        g.backward(loss);
        auto grad = g.grad(wi);
        // d/dW = 2(Wx - y) x^T / N
        double r0 = W[0] * x[0] + W[1] * x[1] - y[0];
        double r1 = W[2] * x[0] + W[3] * x[1] - y[1];
        CHECK(grad[0] == doctest::Approx(2 * r0 * x[0] / 2).epsilon(1e-9));
        CHECK(grad[1] == doctest::Approx(2 * r0 * x[1] / 2).epsilon(1e-9));
        CHECK(grad[2] == doctest::Approx(2 * r1 * x[0] / 2).epsilon(1e-9));
        CHECK(grad[3] == doctest::Approx(2 * r1 * x[1] / 2).epsilon(1e-9));
    }
    SUBCASE("fan-out sums branch adjoints") {
        Graph<double> g;
        const int x = g.input(Tensor<double>({3}, {1, 2, 3}), true);
        const int loss = g.sum_all(g.add(g.scale(x, 2.0), g.scale(x, 5.0)));
        g.backward(loss);
        CHECK(g.grad(x).data == std::vector<double>(3, 7.0));
        CHECK(g.grad_contributions(x) == 2);
    }
    SUBCASE("frozen inputs receive no gradient") {
        Graph<double> g;
        const int pred = g.input(Tensor<double>({2}, {1, 2}), true);
        const int target = g.input(Tensor<double>({2}, {0, 0}), false);
        g.backward(g.mse(pred, target));
        CHECK(g.grad(target).data == std::vector<double>(2, 0.0));
        CHECK(g.grad_contributions(target) == 0);
        CHECK(g.grad(pred)[0] != 0.0);
    }
}

TEST_CASE("chamfer op value and gradient") {
    Rng rng(15);
    auto a = random_tensor({7, 3}, rng);
    auto b = random_tensor({9, 3}, rng);
    Graph<double> g;
    const int ai = g.input(a, true);
    const int bi = g.input(b, true);
    const int loss = g.chamfer(ai, bi);
    auto ca = cloud_from_tensor(a);
    auto cb = cloud_from_tensor(b);
    CHECK(g.val(loss)[0] == doctest::Approx(oracle::chamfer(ca, cb)).epsilon(1e-9));
    g.backward(loss);
    auto ga = g.grad(ai);
    auto f = [&](const std::vector<double>& v) {
        Graph<double> h;
        Tensor<double> t = a;
        t.data = v;
        return h.val(h.chamfer(h.input(t), h.input(b)))[0];
    };
    CHECK(fd_check_vector(f, a.data, ga.data, 0, 16).max_rel_err < 1e-4);
}

TEST_CASE("shaping and reduction ops") {
    Rng rng(18);
    auto x = random_tensor({2, 3, 4}, rng);
    auto w24 = random_tensor({24}, rng);

    SUBCASE("reshape/permute gradients") {
        auto op1 = [&](Graph<double>& h, int xi) {
            return h.mul(h.reshape(xi, {24}), h.input(w24));
        };
        CHECK(check_unary(op1, x, 19) < 1e-6);
        auto op2 = [&](Graph<double>& h, int xi) {
            return h.mul(h.reshape(h.permute(xi, {2, 0, 1}), {24}), h.input(w24));
        };
        CHECK(check_unary(op2, x, 20) < 1e-6);
    }
    SUBCASE("permute values") {
        Graph<double> g;
        const int xi = g.input(x);
        auto y = g.val(g.permute(xi, {1, 0, 2}));
        CHECK(y.shape == Shape{3, 2, 4});
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 3; ++j)
                for (int k = 0; k < 4; ++k)
                    CHECK(y[std::size_t(j) * 8 + std::size_t(i) * 4 + std::size_t(k)] ==
                          x[std::size_t(i) * 12 + std::size_t(j) * 4 + std::size_t(k)]);
    }
    SUBCASE("mean/max over an axis") {
        auto w8 = random_tensor({2, 4}, rng);
        auto mean_op = [&](Graph<double>& h, int xi) {
            return h.mul(h.mean_axis(xi, 1), h.input(w8));
        };
        CHECK(check_unary(mean_op, x, 21) < 1e-5);
        auto max_op = [&](Graph<double>& h, int xi) {
            return h.mul(h.max_axis(xi, 1), h.input(w8));
        };
        CHECK(check_unary(max_op, x, 22) < 1e-4);
    }
    SUBCASE("concat and gather") {
        auto y = random_tensor({2, 2, 4}, rng);
        Graph<double> g;
        const int xi = g.input(x);
        const int yi = g.input(y);
        auto z = g.val(g.concat({xi, yi}, 1));
        CHECK(z.shape == Shape{2, 5, 4});
        auto w = random_tensor({1, 3, 4}, rng);
        auto gather_op = [&](Graph<double>& h, int ai) {
            return h.mul(h.gather_rows(ai, {1, 0, 1}), h.input(random_tensor({3, 3, 4}, rng)));
        };
        (void)gather_op;
        // gather gradient: row used twice accumulates twice
        Graph<double> h;
        auto m = random_tensor({3, 2}, rng);
        const int mi = h.input(m, true);
        h.backward(h.sum_all(h.gather_rows(mi, {1, 1, 2})));
        CHECK(h.grad(mi).data == std::vector<double>{0, 0, 2, 2, 1, 1});
    }
    SUBCASE("replace_rows routes gradients") {
        Graph<double> g;
        auto a = random_tensor({4, 2}, rng);
        auto mt = random_tensor({2}, rng);
        const int ai = g.input(a, true);
        const int mi = g.input(mt, true);
        const int out = g.replace_rows(ai, mi, {1, 3});
        auto v = g.val(out);
        CHECK(v[2] == mt[0]);
        CHECK(v[7] == mt[1]);
        CHECK(v[0] == a[0]);
        g.backward(g.sum_all(out));
        CHECK(g.grad(ai).data == std::vector<double>{1, 1, 0, 0, 1, 1, 0, 0});
        CHECK(g.grad(mi).data == std::vector<double>{2, 2});
    }
}

TEST_CASE("cross_entropy and dropout") {
    Rng rng(25);
    SUBCASE("softmax cross-entropy gradient") {
        auto logits = random_tensor({5}, rng, -2, 2);
        Graph<double> g;
        const int li = g.input(logits, true);
        g.backward(g.cross_entropy(li, 2));
        auto grad = g.grad(li);
        auto f = [&](const std::vector<double>& v) {
            Graph<double> h;
            Tensor<double> t = logits;
            t.data = v;
            return h.val(h.cross_entropy(h.input(t), 2))[0];
        };
        CHECK(fd_check_vector(f, logits.data, grad.data, 0, 26).max_rel_err < 1e-5);
    }
    SUBCASE("dropout at p=0 is identity; seeded masks repeat") {
        auto x = random_tensor({40}, rng);
        Graph<double> g;
        Rng d1(77), d2(77);
        const int xi = g.input(x);
        CHECK(g.dropout(xi, 0.0, d1) == xi);
        auto a = g.val(g.dropout(xi, 0.5, d1));
        Graph<double> h;
        auto b = h.val(h.dropout(h.input(x), 0.5, d2));
        CHECK(a.data == b.data);
    }
}

TEST_CASE("non-finite forward values abort") {
    Graph<double> g;
    const int x = g.input(Tensor<double>({1}, {1e308}));
    CHECK_THROWS_AS(g.mul(x, x), NumericError);
}

TEST_CASE("finite_diff harness self-test: f(x)=x^2 at x=3") {
    auto f = [](const std::vector<double>& v) { return v[0] * v[0]; };
    auto res = fd_check_vector(f, {3.0}, {6.0}, 0, 0);
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("deterministic forward replay") {
    Rng rng(30);
    auto x = random_tensor({6, 6}, rng);
    auto run = [&]() {
        Graph<double> g;
        const int xi = g.input(x);
        return g.val(g.softmax(g.matmul(g.gelu(xi), xi))).data;
    };
    CHECK(run() == run());
}
