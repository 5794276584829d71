#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "textbin/gradcheck.hpp"
#include "textbin/nn.hpp"
#include "textbin/ops.hpp"

using namespace textbin;
using textbin::testing::dot;
using textbin::testing::probe;
using textbin::testing::random_tensor;

TEST(Matmul, IdentityAndProjectorRow) {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor m({2, 2}, {1, 2, 3, 4});
    EXPECT_EQ(matmul(eye, m).values(), (std::vector<float>{1, 2, 3, 4}));
    Tensor p({2, 2}, {1, 0, 0, 0});
    Tensor n({2, 2}, {5, 6, 7, 8});
    EXPECT_EQ(matmul(p, n).values(), (std::vector<float>{5, 6, 0, 0}));
}

TEST(Matmul, GradientOfSumMatchesCentralDifferences) {
    Tensor a({1, 2}, {1, 2}, true);
    Tensor b({2, 1}, {3, 4});
    sum(matmul(a, b)).backward();
    // Independent oracle: central differences at step 1e-3.
    for (std::size_t i = 0; i < 2; ++i) {
        Tensor hi({1, 2}, a.values());
        Tensor lo({1, 2}, a.values());
        hi.data()[i] += 1e-3f;
        lo.data()[i] -= 1e-3f;
        const double fd = (double(sum(matmul(hi, b)).item()) - sum(matmul(lo, b)).item()) / 2e-3;
        EXPECT_NEAR(a.grad()[i], fd, 1e-2);
    }
    EXPECT_FLOAT_EQ(a.grad()[0], 3.0f);
    EXPECT_FLOAT_EQ(a.grad()[1], 4.0f);
}

TEST(Matmul, RejectsInnerMismatch) {
    EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
    EXPECT_THROW(matmul_nt(Tensor({2, 3}), Tensor({2, 4})), DimensionError);
}

TEST(Conv2d, PointwiseKernelScales) {
    Tensor x({1, 1, 3, 3}, 1.0f);
    Tensor w({1, 1, 1, 1}, {2.0f});
    Tensor y = conv2d(x, w, 1, 0);
    EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
    for (float v : y.data()) EXPECT_EQ(v, 2.0f);
}

TEST(Conv2d, DeltaKernelIsIdentity) {
    Rng rng(3);
    Tensor x = random_tensor({2, 1, 5, 6}, rng);
    for (std::size_t k : {1u, 3u, 5u}) {
        Tensor w({1, 1, k, k}, 0.0f);
        w.data()[(k / 2) * k + k / 2] = 1.0f;
        EXPECT_TRUE(same_values(conv2d(x, w, 1, k / 2), x)) << "k=" << k;
    }
}

TEST(Conv2d, NonIntegralOutputIsDimensionError) {
    EXPECT_THROW(conv2d(Tensor({1, 1, 4, 4}), Tensor({1, 1, 3, 3}), 2, 0), DimensionError);
    EXPECT_THROW(conv2d(Tensor({1, 2, 4, 4}), Tensor({1, 1, 3, 3}), 1, 1), DimensionError);
}

TEST(Conv2d, WeightGradientMatchesFiniteDifferences) {
    Rng rng(5);
    Tensor x = random_tensor({1, 2, 5, 5}, rng);
    Tensor w = random_tensor({3, 2, 3, 3}, rng, 0.5f, true);
    const double err = grad_check([&](const Tensor& wt) { return probe(conv2d(x, wt, 1, 1)); }, w);
    EXPECT_LT(err, 1e-2);
}

TEST(ConvTranspose2d, StrideTwoScatterMatchesBruteForce) {
    Tensor x({1, 1, 2, 2}, 1.0f);
    Tensor w({1, 1, 2, 2}, 1.0f);
    Tensor y = conv_transpose2d(x, w, 2, 0);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
    // Brute-force scatter-add oracle.
    std::vector<float> expect(16, 0.0f);
    for (int iy = 0; iy < 2; ++iy)
        for (int ix = 0; ix < 2; ++ix)
            for (int ky = 0; ky < 2; ++ky)
                for (int kx = 0; kx < 2; ++kx) expect[(iy * 2 + ky) * 4 + ix * 2 + kx] += 1.0f;
    EXPECT_EQ(y.values(), expect);
    for (float v : y.data()) EXPECT_EQ(v, 1.0f);
}

TEST(ConvTranspose2d, ZeroInputGivesZeroOutput) {
    Rng rng(1);
    Tensor w = random_tensor({2, 3, 3, 3}, rng);
    Tensor y = conv_transpose2d(Tensor({1, 2, 4, 4}), w, 1, 1);
    for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(ConvTranspose2d, AdjointOfConv) {
    Rng rng(11);
    struct Case { std::size_t c, o, h, k, s, p; };
    for (Case cs : {Case{1, 1, 4, 3, 1, 0}, Case{1, 1, 4, 3, 1, 1}, Case{2, 3, 5, 3, 2, 1}, Case{3, 2, 8, 4, 2, 1},
                    Case{2, 2, 6, 2, 2, 0}}) {
        Tensor x = random_tensor({2, cs.c, cs.h, cs.h}, rng);
        Tensor w = random_tensor({cs.o, cs.c, cs.k, cs.k}, rng);
        Tensor cx = conv2d(x, w, cs.s, cs.p);
        Tensor y = random_tensor(cx.shape(), rng);
        Tensor ty = conv_transpose2d(y, w, cs.s, cs.p);
        ASSERT_EQ(ty.shape(), x.shape());
        const double lhs = dot(cx, y), rhs = dot(x, ty);
        EXPECT_LE(std::fabs(lhs - rhs), 1e-4 * std::max(1.0, std::fabs(lhs)));
    }
}

TEST(LayerNorm, ConstantRowNormalizesToZero) {
    Tensor x({1, 4}, {5, 5, 5, 5});
    Tensor y = layer_norm(x, Tensor({4}, 1.0f), Tensor({4}, 0.0f), 1e-5f);
    for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(LayerNorm, SymmetricPair) {
    Tensor y = layer_norm(Tensor({1, 2}, {1, -1}), Tensor({2}, 1.0f), Tensor({2}, 0.0f), 1e-12f);
    EXPECT_NEAR(y.data()[0], 1.0f, 1e-5);
    EXPECT_NEAR(y.data()[1], -1.0f, 1e-5);
}

TEST(LayerNorm, Errors) {
    EXPECT_THROW(layer_norm(Tensor({2, 3}), Tensor({4}), Tensor({4}), 1e-5f), DimensionError);
    EXPECT_THROW(layer_norm(Tensor({2, 3}), Tensor({3}), Tensor({3}), 0.0f), DomainError);
}

TEST(LayerNorm, GradientCheck) {
    Rng rng(2);
    Tensor x = random_tensor({2, 8}, rng, 1.0f, true);
    Tensor gain = random_tensor({8}, rng);
    Tensor bias = random_tensor({8}, rng);
    EXPECT_LT(grad_check([&](const Tensor& t) { return probe(layer_norm(t, gain, bias)); }, x), 1e-2);
}

TEST(SoftmaxCrossEntropy, ConfidentLogit) {
    Tensor logits({1, 2}, {10, 0});
    std::vector<std::uint32_t> t{0};
    std::vector<std::uint8_t> m{1};
    // -log sigmoid(10) = log(1 + e^-10)
    EXPECT_NEAR(softmax_cross_entropy(logits, t, m).item(), std::log1p(std::exp(-10.0)), 1e-9);
    EXPECT_NEAR(softmax_cross_entropy(logits, t, m).item(), 4.54e-5, 1e-7);
}

TEST(SoftmaxCrossEntropy, UniformLogits) {
    Tensor logits({3, 4}, 0.5f);
    std::vector<std::uint32_t> t{0, 3, 2};
    std::vector<std::uint8_t> m{1, 1, 1};
    EXPECT_NEAR(softmax_cross_entropy(logits, t, m).item(), std::log(4.0), 1e-6);
}

TEST(SoftmaxCrossEntropy, UnmaskedRowsGetZeroGradient) {
    Rng rng(4);
    Tensor logits = random_tensor({3, 5}, rng, 1.0f, true);
    std::vector<std::uint32_t> t{1, 2, 3};
    std::vector<std::uint8_t> m{1, 0, 1};
    softmax_cross_entropy(logits, t, m).backward();
    for (std::size_t v = 0; v < 5; ++v) EXPECT_EQ(std::bit_cast<std::uint32_t>(logits.grad()[5 + v]), 0u);
    double row0 = 0.0;
    for (std::size_t v = 0; v < 5; ++v) row0 += logits.grad()[v];
    EXPECT_NEAR(row0, 0.0, 1e-6);
}

TEST(SoftmaxCrossEntropy, EmptyMaskIsDomainError) {
    std::vector<std::uint32_t> t{0};
    std::vector<std::uint8_t> m{0};
    EXPECT_THROW(softmax_cross_entropy(Tensor({1, 2}), t, m), DomainError);
}

TEST(GradCheck, SumOfSquares) {
    Tensor x({3}, {1, 2, 3}, true);
    auto f = [](const Tensor& t) { return sum_squares(t); };
    f(x).backward();
    EXPECT_EQ(x.grad()[0], 2.0f);
    EXPECT_EQ(x.grad()[1], 4.0f);
    EXPECT_EQ(x.grad()[2], 6.0f);
    EXPECT_LT(grad_check(f, x), 1e-6);
}

TEST(GradCheck, LayerNormMatmulChain) {
    Rng rng(8);
    Tensor x = random_tensor({3, 6}, rng, 1.0f, true);
    Tensor w = random_tensor({6, 4}, rng);
    Tensor g = random_tensor({6}, rng);
    Tensor b = random_tensor({6}, rng);
    EXPECT_LT(grad_check([&](const Tensor& t) { return probe(matmul(layer_norm(t, g, b), w)); }, x), 1e-2);
}

TEST(GradCheck, NanFunctionIsNumericError) {
    Tensor x({2}, {1, 2}, true);
    EXPECT_THROW(grad_check([](const Tensor&) { return Tensor::scalar(std::nanf("")); }, x), NumericError);
}

// Every differentiable op on three random shapes.
class OpGradients : public ::testing::TestWithParam<int> {};

TEST_P(OpGradients, AllOpsPassGradCheck) {
    const int s = GetParam();
    Rng rng(100 + s);
    const std::size_t m = 2 + s, k = 3 + s, n = 2 + 2 * s;
    Tensor a = random_tensor({m, k}, rng, 1.0f, true);
    Tensor b = random_tensor({k, n}, rng, 1.0f, true);
    EXPECT_LT(grad_check([&](const Tensor& t) { return probe(matmul(t, b)); }, a), 1e-2);
    EXPECT_LT(grad_check([&](const Tensor& t) { return probe(matmul(a, t)); }, b), 1e-2);
    Tensor bt = random_tensor({n, k}, rng, 1.0f, true);
    EXPECT_LT(grad_check([&](const Tensor& t) { return probe(matmul_nt(a, t)); }, bt), 1e-2);

    const std::size_t side = 5 + 2 * std::size_t(s);
    Tensor img = random_tensor({2, 2, side, side}, rng, 1.0f, true);
    Tensor w = random_tensor({3, 2, 3, 3}, rng, 0.5f, true);
    const std::size_t stride = 1 + (s % 2);
    EXPECT_LT(grad_check([&](const Tensor& t) { return probe(conv2d(t, w, stride, 1)); }, img), 1e-2);
    EXPECT_LT(grad_check([&](const Tensor& t) { return probe(conv2d(img, t, stride, 1)); }, w), 1e-2);

    const std::size_t tside = 3 + std::size_t(s);
    Tensor small = random_tensor({1, 3, tside, tside}, rng, 1.0f, true);
    Tensor wt = random_tensor({3, 2, 4, 4}, rng, 0.5f, true);
    EXPECT_LT(grad_check([&](const Tensor& t) { return probe(conv_transpose2d(t, wt, 2, 1)); }, small), 1e-2);
    EXPECT_LT(grad_check([&](const Tensor& t) { return probe(conv_transpose2d(small, t, 2, 1)); }, wt), 1e-2);

    Tensor rows = random_tensor({m, n}, rng, 1.0f, true);
    Tensor gain = random_tensor({n}, rng, 1.0f, true);
    Tensor bias = random_tensor({n}, rng, 1.0f, true);
    EXPECT_LT(grad_check([&](const Tensor& t) { return probe(layer_norm(t, gain, bias)); }, rows), 1e-2);
    EXPECT_LT(grad_check([&](const Tensor& t) { return probe(layer_norm(rows, t, bias)); }, gain), 1e-2);
    EXPECT_LT(grad_check([&](const Tensor& t) { return probe(layer_norm(rows, gain, t)); }, bias), 1e-2);

    const std::size_t heads = 2, width = 4 * (1 + s % 2);
    std::vector<std::size_t> segments{3, 2 + std::size_t(s)};
    Tensor qkv = random_tensor({5 + std::size_t(s), 3 * width}, rng, 1.0f, true);
    for (bool causal : {false, true}) {
        EXPECT_LT(grad_check([&](const Tensor& t) { return probe(self_attention(t, segments, heads, causal)); }, qkv), 1e-2);
    }

    std::vector<std::uint32_t> targets(m);
    std::vector<std::uint8_t> mask(m, 1);
    for (std::size_t i = 0; i < m; ++i) targets[i] = static_cast<std::uint32_t>(rng.below(n));
    mask[0] = 0;
    EXPECT_LT(grad_check([&](const Tensor& t) { return softmax_cross_entropy(t, targets, mask); }, rows), 1e-2);

    Tensor other = random_tensor({m, n}, rng);
    EXPECT_LT(grad_check([&](const Tensor& t) { return mse_loss(t, other); }, rows), 1e-2);
    EXPECT_LT(grad_check([&](const Tensor& t) { return probe(gelu(t)); }, rows), 1e-2);
    EXPECT_LT(grad_check([&](const Tensor& t) { return probe(silu(t)); }, rows), 1e-2);
    EXPECT_LT(grad_check([&](const Tensor& t) { return probe(sigmoid(t)); }, rows), 1e-2);
    EXPECT_LT(grad_check([&](const Tensor& t) { return probe(add_bias(rows, t)); }, bias), 1e-2);
    EXPECT_LT(grad_check([&](const Tensor& t) { return probe(permute(reshape(t, {m, n, 1}), {2, 1, 0})); }, rows), 1e-2);

    Tensor table = random_tensor({6, n}, rng, 1.0f, true);
    std::vector<std::uint32_t> ids{0, 5, 2, 5};
    EXPECT_LT(grad_check([&](const Tensor& t) { return probe(embedding(t, ids)); }, table), 1e-2);
}

INSTANTIATE_TEST_SUITE_P(Shapes, OpGradients, ::testing::Values(0, 1, 2));

TEST(Determinism, RepeatedForwardBackwardIsBitwiseIdentical) {
    auto run = [] {
        Rng rng(21);
        Tensor x = random_tensor({2, 3, 8, 8}, rng, 1.0f, true);
        Tensor w = random_tensor({4, 3, 3, 3}, rng, 1.0f, true);
        Tensor y = conv2d(x, w, 1, 1);
        Tensor loss = probe(relu(y));
        loss.backward();
        return std::make_tuple(loss.item(), std::vector<float>(w.grad().begin(), w.grad().end()),
                               std::vector<float>(x.grad().begin(), x.grad().end()));
    };
    EXPECT_EQ(run(), run());
}

TEST(Tensor, NonFiniteForwardIsNumericError) {
    Tensor x({2}, {1.0f, 1e30f});
    EXPECT_THROW(mul(x, x), NumericError);
}

TEST(Tensor, ShapeDataMismatch) {
    EXPECT_THROW(Tensor({2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
    EXPECT_THROW(Tensor(Shape{0, 2}), DimensionError);
}

TEST(AdamW, FrozenParametersAreBitwiseUnchanged) {
    Rng rng(7);
    ParameterSet params;
    Tensor a = params.add("a", random_tensor({3, 4}, rng));
    Tensor b = params.add("b", random_tensor({4, 2}, rng));
    params.at("a").frozen = true;
    const std::vector<float> a0 = a.values(), b0 = b.values();
    AdamW opt;
    Tensor x = random_tensor({5, 3}, rng);
    for (long step = 1; step <= 20; ++step) {
        probe(matmul(matmul(x, a), b)).backward();
        opt.step(params, 1e-2f, step);
    }
    EXPECT_EQ(a.values(), a0);
    EXPECT_NE(b.values(), b0);
    EXPECT_FALSE(a.has_grad());
}

TEST(AdamW, FrozenRowsUntouchedEvenWithWeightDecay) {
    Rng rng(9);
    ParameterSet params;
    Tensor table = params.add("table", random_tensor({6, 3}, rng));
    params.at("table").frozen_rows = RowRange{2, 6};
    const std::vector<float> before = table.values();
    AdamW opt;
    std::vector<std::uint32_t> ids{0, 1, 2, 3, 4, 5};
    for (long step = 1; step <= 5; ++step) {
        probe(embedding(table, ids)).backward();
        opt.step(params, 1e-2f, step);
    }
    for (std::size_t i = 0; i < before.size(); ++i) {
        if (i / 3 >= 2) EXPECT_EQ(table.values()[i], before[i]);
        else EXPECT_NE(table.values()[i], before[i]);
    }
}

TEST(AdamW, ClipsGlobalNorm) {
    ParameterSet params;
    Tensor w = params.add("w", Tensor({2}, {0.0f, 0.0f}));
    AdamWConfig cfg;
    cfg.weight_decay = 0.0f;
    AdamW opt(cfg);
    sum(scale(mul(w, Tensor({2}, {3.0f, 4.0f})), 100.0f)).backward();
    EXPECT_NEAR(opt.step(params, 1e-3f, 1), 500.0, 1e-3);
    // First Adam step moves every coordinate by ~lr regardless of scale.
    EXPECT_NEAR(w.values()[0], -1e-3f, 1e-6);
}

TEST(LrSchedule, WarmupThenDecayToZero) {
    LrSchedule s{1e-3f, 100, 1000, 5.0f};
    EXPECT_FLOAT_EQ(s.at(50), 5e-4f);
    EXPECT_FLOAT_EQ(s.at(100), 1e-3f);
    EXPECT_LT(s.at(500), s.at(200));
    EXPECT_EQ(s.at(1000), 0.0f);
}
