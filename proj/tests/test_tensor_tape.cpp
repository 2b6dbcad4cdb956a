#include "doctest.h"

#include "derfkit/errors.hpp"
#include "derfkit/funcs.hpp"
#include "derfkit/rng.hpp"
#include "derfkit/tape.hpp"

#include "support.hpp"

#include <cmath>

using namespace derfkit;
using testsupport::gradcheck;

namespace {

Tensor randt(Rng& rng, Shape shape, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
    return t;
}

// Scalarizes an arbitrary output by a fixed random weighting so every output
// coordinate contributes to the checked gradient.
Var weighted(Tape& t, Var y, const Tensor& w) { return t.sum(t.mul(y, t.constant(w))); }

} // namespace

TEST_CASE("tensor basics and shape errors") {
    Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.dim(0) == 2);
    CHECK(t.dim(1) == 3);
    CHECK(t[4] == 5.0);
    CHECK(Tensor::scalar(7.5).item() == 7.5);
    CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});

    CHECK_THROWS_AS(t.item(), ShapeError);
    CHECK_THROWS_AS(t.dim(2), ShapeError);
    CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
    CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
    CHECK_THROWS_AS(Tensor({2}, {1.0, 2.0, 3.0}), ShapeError);

    Tensor bad({2}, {1.0, std::nan("")});
    CHECK(!bad.all_finite());
    CHECK(t.all_finite());
}

TEST_CASE("gradcheck: binary elementwise and matmul family") {
    Rng rng(11);
    const Tensor w34 = randt(rng, {3, 4});
    const Tensor w32 = randt(rng, {3, 2});
    const Tensor w35 = randt(rng, {3, 5});

    SUBCASE("add/sub/mul") {
        auto in = std::vector<Tensor>{randt(rng, {3, 4}), randt(rng, {3, 4})};
        auto r = gradcheck(
            [&](Tape& t, const std::vector<Var>& v) {
                Var y = t.mul(t.add(v[0], v[1]), t.sub(v[0], v[1]));
                return weighted(t, y, w34);
            },
            in);
        CHECK_MESSAGE(r.ok(), r.worst_at << " grad=" << r.worst_grad << " fd=" << r.worst_fd);
    }
    SUBCASE("matmul") {
        auto r = gradcheck(
            [&](Tape& t, const std::vector<Var>& v) {
                return weighted(t, t.matmul(v[0], v[1]), w32);
            },
            {randt(rng, {3, 4}), randt(rng, {4, 2})});
        CHECK_MESSAGE(r.ok(), r.worst_at);
    }
    SUBCASE("matmul_nt") {
        auto r = gradcheck(
            [&](Tape& t, const std::vector<Var>& v) {
                return weighted(t, t.matmul_nt(v[0], v[1]), w35);
            },
            {randt(rng, {3, 4}), randt(rng, {5, 4})});
        CHECK_MESSAGE(r.ok(), r.worst_at);
    }
    SUBCASE("bmm") {
        const Tensor wb = randt(rng, {2, 3, 2});
        auto r = gradcheck(
            [&](Tape& t, const std::vector<Var>& v) {
                return weighted(t, t.bmm(v[0], v[1]), wb);
            },
            {randt(rng, {2, 3, 4}), randt(rng, {2, 4, 2})});
        CHECK_MESSAGE(r.ok(), r.worst_at);
    }
    SUBCASE("bmm_nt") {
        const Tensor wb = randt(rng, {2, 3, 5});
        auto r = gradcheck(
            [&](Tape& t, const std::vector<Var>& v) {
                return weighted(t, t.bmm_nt(v[0], v[1]), wb);
            },
            {randt(rng, {2, 3, 4}), randt(rng, {2, 5, 4})});
        CHECK_MESSAGE(r.ok(), r.worst_at);
    }
}

TEST_CASE("gradcheck: broadcasts, reshapes, reductions") {
    Rng rng(12);
    const Tensor w23 = randt(rng, {2, 3});

    SUBCASE("add_rowvec / mul_rowvec") {
        auto r = gradcheck(
            [&](Tape& t, const std::vector<Var>& v) {
                return weighted(t, t.mul_rowvec(t.add_rowvec(v[0], v[1]), v[2]), w23);
            },
            {randt(rng, {2, 3}), randt(rng, {3}), randt(rng, {3})});
        CHECK_MESSAGE(r.ok(), r.worst_at);
    }
    SUBCASE("scale + reshape + transpose2d") {
        const Tensor w32 = randt(rng, {3, 2});
        auto r = gradcheck(
            [&](Tape& t, const std::vector<Var>& v) {
                Var y = t.transpose2d(t.reshape(t.scale(v[0], -1.7), {2, 3}));
                return weighted(t, y, w32);
            },
            {randt(rng, {6})});
        CHECK_MESSAGE(r.ok(), r.worst_at);
    }
    SUBCASE("sum and mean_all") {
        auto r = gradcheck(
            [&](Tape& t, const std::vector<Var>& v) {
                return t.add(t.sum(t.mul(v[0], v[0])), t.mean_all(v[0]));
            },
            {randt(rng, {4, 3})});
        CHECK_MESSAGE(r.ok(), r.worst_at);
    }
    SUBCASE("unary") {
        auto r = gradcheck(
            [&](Tape& t, const std::vector<Var>& v) {
                Var y = t.unary(
                    v[0], [](double x) { return std::sin(x); },
                    [](double x) { return std::cos(x); }, "sin");
                return weighted(t, y, w23);
            },
            {randt(rng, {2, 3})});
        CHECK_MESSAGE(r.ok(), r.worst_at);
    }
    SUBCASE("gelu unary") {
        auto r = gradcheck(
            [&](Tape& t, const std::vector<Var>& v) {
                return weighted(t, t.unary(v[0], gelu, gelu_derivative, "gelu"), w23);
            },
            {randt(rng, {2, 3})});
        CHECK_MESSAGE(r.ok(), r.worst_at);
    }
}

TEST_CASE("gradcheck: gather, grouped mean, row scaling, head reshuffles") {
    Rng rng(13);

    SUBCASE("gather_rows scatter-adds duplicate indices") {
        const Tensor w = randt(rng, {4, 3});
        auto r = gradcheck(
            [&](Tape& t, const std::vector<Var>& v) {
                return weighted(t, t.gather_rows(v[0], {2, 0, 2, 1}), w);
            },
            {randt(rng, {3, 3})});
        CHECK_MESSAGE(r.ok(), r.worst_at);
    }
    SUBCASE("mean_rows") {
        const Tensor w = randt(rng, {2, 3});
        auto r = gradcheck(
            [&](Tape& t, const std::vector<Var>& v) {
                return weighted(t, t.mean_rows(v[0], 3), w);
            },
            {randt(rng, {6, 3})});
        CHECK_MESSAGE(r.ok(), r.worst_at);
    }
    SUBCASE("scale_rows") {
        const Tensor w = randt(rng, {4, 2});
        auto r = gradcheck(
            [&](Tape& t, const std::vector<Var>& v) {
                return weighted(t, t.scale_rows(v[0], {0.0, 2.0, 0.5, 1.0}), w);
            },
            {randt(rng, {4, 2})});
        CHECK_MESSAGE(r.ok(), r.worst_at);
    }
    SUBCASE("split_heads round trips and differentiates") {
        const std::size_t B = 2, T = 3, H = 2;
        Tensor x = randt(rng, {B * T, 4});
        Tape t;
        Var xv = t.leaf(x, false);
        Var back = t.merge_heads(t.split_heads(xv, B, T, H), B, T, H);
        for (std::size_t i = 0; i < x.numel(); ++i) CHECK(t.value(back)[i] == x[i]);

        const Tensor w = randt(rng, {B * H, T, 2});
        auto r = gradcheck(
            [&](Tape& tp, const std::vector<Var>& v) {
                return weighted(tp, tp.split_heads(v[0], B, T, H), w);
            },
            {x});
        CHECK_MESSAGE(r.ok(), r.worst_at);
    }
}

TEST_CASE("gradcheck: fused normalization ops across seeds") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed * 101);
        const std::size_t C = 5;
        const Tensor w = randt(rng, {4, C});
        Tensor x = randt(rng, {4, C}, 1.5);
        Tensor gamma = randt(rng, {C}, 0.5);
        Tensor beta = randt(rng, {C}, 0.5);
        for (std::size_t i = 0; i < C; ++i) gamma[i] += 1.0;

        auto ln = gradcheck(
            [&](Tape& t, const std::vector<Var>& v) {
                return weighted(t, t.layer_norm(v[0], v[1], v[2], 1e-5), w);
            },
            {x, gamma, beta});
        CHECK_MESSAGE(ln.ok(), "layer_norm seed " << seed << " " << ln.worst_at);

        auto rms = gradcheck(
            [&](Tape& t, const std::vector<Var>& v) {
                return weighted(t, t.rms_norm(v[0], v[1], v[2], 1e-5), w);
            },
            {x, gamma, beta});
        CHECK_MESSAGE(rms.ok(), "rms_norm seed " << seed << " " << rms.worst_at);

        auto rms_nobeta = gradcheck(
            [&](Tape& t, const std::vector<Var>& v) {
                return weighted(t, t.rms_norm(v[0], v[1], Var{}, 1e-5), w);
            },
            {x, gamma});
        CHECK_MESSAGE(rms_nobeta.ok(), "rms_norm(nobeta) seed " << seed << " "
                                           << rms_nobeta.worst_at);
    }
}

TEST_CASE("gradcheck: dynamic pointwise in all shift modes") {
    Rng rng(99);
    const std::size_t C = 4;
    const Tensor w = randt(rng, {3, C});
    Tensor x = randt(rng, {3, C}, 1.2);
    Tensor gamma = randt(rng, {C}, 0.3);
    Tensor beta = randt(rng, {C}, 0.3);
    Tensor alpha = Tensor::scalar(0.8);
    Tensor s_scalar = Tensor::scalar(0.25);
    Tensor s_chan = randt(rng, {C}, 0.2);

    SUBCASE("scalar shift") {
        auto r = gradcheck(
            [&](Tape& t, const std::vector<Var>& v) {
                Var y = t.dynamic_pointwise(v[0], v[1], v[2], v[3], v[4], erf_eval,
                                            erf_derivative);
                return weighted(t, y, w);
            },
            {x, alpha, s_scalar, gamma, beta});
        CHECK_MESSAGE(r.ok(), r.worst_at);
    }
    SUBCASE("per-channel shift") {
        auto r = gradcheck(
            [&](Tape& t, const std::vector<Var>& v) {
                Var y = t.dynamic_pointwise(v[0], v[1], v[2], v[3], v[4], erf_eval,
                                            erf_derivative);
                return weighted(t, y, w);
            },
            {x, alpha, s_chan, gamma, beta});
        CHECK_MESSAGE(r.ok(), r.worst_at);
    }
    SUBCASE("absent shift") {
        auto r = gradcheck(
            [&](Tape& t, const std::vector<Var>& v) {
                Var y = t.dynamic_pointwise(v[0], v[1], Var{}, v[2], v[3], erf_eval,
                                            erf_derivative);
                return weighted(t, y, w);
            },
            {x, alpha, gamma, beta});
        CHECK_MESSAGE(r.ok(), r.worst_at);
    }
}

TEST_CASE("softmax rows sum to one and cross-entropy matches log-sum-exp") {
    Rng rng(7);
    Tensor logits = randt(rng, {5, 4}, 3.0);
    Tape t;
    Var lv = t.leaf(logits, true);
    Var sm = t.softmax_lastdim(lv);
    const Tensor& p = t.value(sm);
    for (std::size_t r = 0; r < 5; ++r) {
        double row = 0.0;
        for (std::size_t c = 0; c < 4; ++c) row += p[r * 4 + c];
        CHECK(std::abs(row - 1.0) <= 1e-12);
    }

    std::vector<std::int64_t> labels{0, 3, 1, 2, 2};
    Var ce = t.softmax_cross_entropy(lv, labels);
    double manual = 0.0;
    for (std::size_t r = 0; r < 5; ++r) {
        double mx = logits[r * 4];
        for (std::size_t c = 1; c < 4; ++c) mx = std::max(mx, logits[r * 4 + c]);
        double lse = 0.0;
        for (std::size_t c = 0; c < 4; ++c) lse += std::exp(logits[r * 4 + c] - mx);
        manual += mx + std::log(lse) - logits[r * 4 + static_cast<std::size_t>(labels[r])];
    }
    manual /= 5.0;
    CHECK(std::abs(t.value(ce).item() - manual) <= 1e-12);

    auto gc = gradcheck(
        [&](Tape& tp, const std::vector<Var>& v) {
            return tp.softmax_cross_entropy(v[0], labels);
        },
        {logits});
    CHECK_MESSAGE(gc.ok(), gc.worst_at);

    const Tensor ww = randt(rng, {5, 4});
    auto gsm = gradcheck(
        [&](Tape& tp, const std::vector<Var>& v) {
            return weighted(tp, tp.softmax_lastdim(v[0]), ww);
        },
        {logits});
    CHECK_MESSAGE(gsm.ok(), gsm.worst_at);
}

TEST_CASE("backward is repeatable bit-for-bit and zeroes disconnected leaves") {
    Rng rng(4);
    Tensor a = randt(rng, {3, 3});
    Tensor b = randt(rng, {3, 3});
    Tape t;
    Var av = t.leaf(a, true);
    Var bv = t.leaf(b, true);  // never used by the loss
    Var loss = t.mean_all(t.mul(av, av));

    t.backward(loss);
    Tensor g1 = t.grad(av);
    Tensor gb = t.grad(bv);
    t.backward(loss);
    Tensor g2 = t.grad(av);

    for (std::size_t i = 0; i < g1.numel(); ++i) {
        CHECK(g1[i] == g2[i]);
        CHECK(gb[i] == 0.0);
    }
}

TEST_CASE("tape contract and shape errors") {
    Tape t;
    Var a = t.leaf(Tensor({2, 3}, 1.0), true);
    Var b = t.leaf(Tensor({3, 3}, 1.0), true);

    CHECK_THROWS_AS(t.add(a, b), ShapeError);
    CHECK_THROWS_AS(t.matmul(a, a), ShapeError);
    CHECK_THROWS_AS(t.backward(a), ContractError);             // non-scalar loss
    CHECK_THROWS_AS(t.grad(a), ContractError);                 // backward never ran
    CHECK_THROWS_AS(t.layer_norm(a, b, b, 1e-5), ShapeError);  // gamma shape
    CHECK_THROWS_AS(t.layer_norm(a, a, a, 1e-5), ShapeError);
    Var g = t.leaf(Tensor({3}, 1.0), true);
    CHECK_THROWS_AS(t.layer_norm(a, g, g, -1.0), ParameterError);
    CHECK_THROWS_AS(t.softmax_cross_entropy(a, {0}), ShapeError);
    CHECK_THROWS_AS(t.softmax_cross_entropy(a, {0, 5}), Error);  // label out of range
    CHECK_THROWS_AS(t.gather_rows(a, {7}), Error);

    Var loss = t.sum(t.constant(Tensor::scalar(1.0)));
    CHECK_THROWS_AS(t.backward(loss), ContractError);  // nothing requires grad

    Var clean = t.mean_all(a);
    t.backward(clean);
    Var c = t.constant(Tensor::scalar(2.0));
    CHECK_THROWS_AS(t.grad(c), ContractError);  // constants carry no grad
}
