#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "textbin/gradcheck.hpp"
#include "textbin/quantizers.hpp"

using namespace textbin;
using textbin::testing::probe;
using textbin::testing::random_tensor;

TEST(BinaryQuantize, SignsAndIndex) {
    Tensor x({1, 3}, {0.3f, -1.2f, 0.0f});
    auto q = binary_quantize(x, 3);
    EXPECT_EQ(q.quantized.values(), (std::vector<float>{1, -1, -1}));
    EXPECT_EQ(q.indices, (std::vector<std::uint32_t>{1}));
    EXPECT_EQ(q.code(0).signs, (std::vector<std::int8_t>{1, -1, -1}));
}

TEST(BinaryQuantize, AllPositiveIsLastCode) {
    Tensor x({1, 13}, 0.7f);
    EXPECT_EQ(binary_quantize(x, 13).indices[0], 8191u);
}

TEST(BinaryQuantize, StraightThroughGradientIsBitwiseUpstream) {
    Rng rng(1);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor x = random_tensor({4, 6}, rng, 1.0f, true);
        auto q = binary_quantize(x, 6);
        probe(q.quantized, 50 + trial).backward();
        ASSERT_TRUE(q.quantized.has_grad());
        for (std::size_t i = 0; i < x.numel(); ++i) {
            EXPECT_EQ(std::bit_cast<std::uint32_t>(x.grad()[i]), std::bit_cast<std::uint32_t>(q.quantized.grad()[i]));
        }
    }
}

TEST(BinaryQuantize, Errors) {
    EXPECT_THROW(binary_quantize(Tensor({2, 4}), 3), DimensionError);
    Tensor bad({1, 2}, {1.0f, 0.0f});
    bad.data()[1] = std::numeric_limits<float>::infinity();
    EXPECT_THROW(binary_quantize(bad, 2), NumericError);
}

TEST(BinaryQuantize, ScalingInvarianceAndIdempotence) {
    Rng rng(2);
    Tensor x = random_tensor({32, 8}, rng);
    auto base = binary_quantize(x, 8);
    for (float c : {1e-3f, 0.5f, 7.0f, 1e3f}) {
        EXPECT_EQ(binary_quantize(scale(x, c), 8).indices, base.indices);
    }
    auto again = binary_quantize(base.quantized.detach(), 8);
    EXPECT_EQ(again.indices, base.indices);
    EXPECT_TRUE(same_values(again.quantized, base.quantized));
}

TEST(IndexToCode, Examples) {
    EXPECT_EQ(index_to_code(0, 3).signs, (std::vector<std::int8_t>{-1, -1, -1}));
    EXPECT_EQ(index_to_code(5, 3).signs, (std::vector<std::int8_t>{1, -1, 1}));
    EXPECT_THROW(index_to_code(8, 3), DomainError);
    EXPECT_THROW(index_to_code(0, 25), DomainError);
}

TEST(IndexToCode, ExhaustiveBijectionUpTo13) {
    for (int d = 1; d <= 13; ++d) {
        const std::uint32_t count = 1u << d;
        std::vector<std::uint32_t> all(count);
        std::iota(all.begin(), all.end(), 0u);
        auto q = binary_quantize(indices_to_signs(all, d), d);
        ASSERT_EQ(q.indices, all) << "d=" << d;
    }
}

TEST(EntropyPenalty, ZeroInputCancelsWithEqualWeights) {
    BinaryQuantizerConfig cfg;
    Tensor x({4, 5}, 0.0f);
    EXPECT_NEAR(entropy_penalty(x, cfg).item(), 0.0, 1e-7);
    cfg.entropy_batch_weight = 0.0f;
    EXPECT_NEAR(entropy_penalty(x, cfg).item(), 0.1 * std::log(2.0), 1e-7);
}

TEST(EntropyPenalty, ConfidentButBalancedBatch) {
    BinaryQuantizerConfig cfg;
    cfg.entropy_batch_weight = 0.3f;
    Tensor x({6, 4}, 0.0f);
    for (std::size_t n = 0; n < 6; ++n)
        for (std::size_t k = 0; k < 4; ++k) x.data()[n * 4 + k] = n < 3 ? 50.0f : -50.0f;
    // per-sample entropy -> 0, batch marginal q_k = 1/2 -> ln 2
    EXPECT_NEAR(entropy_penalty(x, cfg).item(), -0.3 * std::log(2.0), 1e-6);
}

TEST(EntropyPenalty, GradientCheck) {
    Rng rng(3);
    BinaryQuantizerConfig cfg;
    cfg.entropy_weight = 0.7f;
    cfg.entropy_batch_weight = 0.4f;
    cfg.temperature = 0.8f;
    for (std::size_t rows : {3u, 5u, 9u}) {
        Tensor x = random_tensor({rows, 4}, rng, 1.0f, true);
        EXPECT_LT(grad_check([&](const Tensor& t) { return entropy_penalty(t, cfg); }, x), 1e-2);
    }
}

TEST(CommitmentLoss, Values) {
    Tensor x({1}, {0.5f});
    Tensor q({1}, {1.0f});
    EXPECT_FLOAT_EQ(commitment_loss(x, q, 1.0f).item(), 0.25f);
    EXPECT_EQ(commitment_loss(q, q, 1.0f).item(), 0.0f);
    EXPECT_THROW(commitment_loss(Tensor({2}), Tensor({3}), 1.0f), DimensionError);
}

TEST(CommitmentLoss, NoGradientIntoQuantized) {
    Rng rng(4);
    Tensor x = random_tensor({3, 4}, rng, 1.0f, true);
    Tensor q = random_tensor({3, 4}, rng, 1.0f, true);
    commitment_loss(x, q, 0.25f).backward();
    EXPECT_TRUE(x.has_grad());
    EXPECT_FALSE(q.has_grad());
    Tensor y = random_tensor({2, 3}, rng, 1.0f, true);
    Tensor target = random_tensor({2, 3}, rng);
    EXPECT_LT(grad_check([&](const Tensor& t) { return commitment_loss(t, target, 0.25f); }, y), 1e-2);
}

namespace {

VqCodebook make_codebook(std::size_t count, std::size_t width, std::uint64_t seed) {
    Rng rng(seed);
    return VqCodebook(VqCodebook::random_entries(count, width, rng));
}

// Exhaustive scan written independently of vq_encode.
std::vector<std::uint32_t> brute_force_nearest(const Tensor& f, const Tensor& entries) {
    const std::size_t width = entries.dim(1);
    std::vector<std::uint32_t> out;
    for (std::size_t n = 0; n < f.numel() / width; ++n) {
        std::uint32_t best = 0;
        double best_d = 1e300;
        for (std::size_t c = 0; c < entries.dim(0); ++c) {
            double d = 0;
            for (std::size_t j = 0; j < width; ++j) {
                const double diff = double(f.data()[n * width + j]) - entries.data()[c * width + j];
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = static_cast<std::uint32_t>(c);
            }
        }
        out.push_back(best);
    }
    return out;
}

}  // namespace

TEST(VqEncode, ExactEntry) {
    VqCodebook cb = make_codebook(16, 4, 5);
    Tensor f({1, 4}, std::vector<float>(cb.entries.data().begin() + 28, cb.entries.data().begin() + 32));
    auto r = vq_encode(f, cb);
    EXPECT_EQ(r.indices[0], 7u);
    EXPECT_TRUE(same_values(r.quantized, f));
    EXPECT_EQ(cb.usage_counts[7], 1u);
}

TEST(VqEncode, TieGoesToLowestIndex) {
    Tensor entries({6, 2}, {9, 9, 9, -9, 1, 0, -9, 9, -9, -9, -1, 0});
    VqCodebook cb(entries);
    auto r = vq_encode(Tensor({1, 2}, {0.0f, 0.0f}), cb);
    EXPECT_EQ(r.indices[0], 2u);
}

TEST(VqEncode, MatchesBruteForce) {
    Rng rng(6);
    VqCodebook cb = make_codebook(64, 8, 7);
    Tensor f = random_tensor({3, 5, 8}, rng, 0.5f);
    EXPECT_EQ(vq_encode(f, cb).indices, brute_force_nearest(f, cb.entries));
}

TEST(VqEncode, Errors) {
    VqCodebook empty;
    EXPECT_THROW(vq_encode(Tensor({1, 2}), empty), DomainError);
    VqCodebook cb = make_codebook(4, 3, 1);
    EXPECT_THROW(vq_encode(Tensor({1, 2}), cb), DimensionError);
}

TEST(Projector, SingleLayerIdentity) {
    Rng rng(8);
    ParameterSet params;
    Projector proj(params, "proj", 5, 5, 1, rng);
    auto& w = params.at("proj.head.weight").tensor;
    std::fill(w.data().begin(), w.data().end(), 0.0f);
    for (std::size_t i = 0; i < 5; ++i) w.data()[i * 5 + i] = 1.0f;
    Tensor f = random_tensor({7, 5}, rng);
    EXPECT_TRUE(same_values(proj(f, 7), f));
}

TEST(Projector, ThreeLayerShapeAndGradient) {
    Rng rng(9);
    ParameterSet params;
    Projector proj(params, "proj", 32, 13, 3, rng);
    EXPECT_EQ(proj(random_tensor({16, 32}, rng), 16).shape(), (Shape{16, 13}));

    ParameterSet small_params;
    Projector small(small_params, "p", 8, 3, 3, rng);
    for (std::size_t tokens : {3u, 4u, 5u}) {
        Tensor f = random_tensor({2 * tokens, 8}, rng, 1.0f, true);
        EXPECT_LT(grad_check([&](const Tensor& t) { return probe(small(t, tokens)); }, f), 1e-2);
    }
    // weight gradients through the attention stack
    Tensor f = random_tensor({8, 8}, rng);
    Tensor& w = small_params.at("p.block1.qkv.weight").tensor;
    EXPECT_LT(grad_check([&](const Tensor&) { return probe(small(f, 4)); }, w), 1e-2);
}

TEST(Hybrid, RouteZeroEqualsDirectPath) {
    Rng init(10);
    ParameterSet params;
    Projector proj(params, "proj", 6, 4, 1, init);
    VqCodebook cb = make_codebook(8, 6, 11);
    BinaryQuantizerConfig cfg;
    cfg.dims = 4;
    Tensor f = random_tensor({3, 5, 6}, init);
    Rng rng(12);
    auto h = hybrid_forward(f, cb, proj, cfg, 0.0, rng);
    auto direct = binary_quantize(proj(reshape(f, {15, 6}), 5), 4);
    EXPECT_EQ(h.codes.indices, direct.indices);
    EXPECT_TRUE(same_values(h.codes.quantized, direct.quantized));
    for (auto r : h.routed) EXPECT_EQ(r, 0);
}

TEST(Hybrid, RouteOneUsesVqFeatures) {
    Rng init(13);
    ParameterSet params;
    Projector proj(params, "proj", 6, 4, 1, init);
    VqCodebook cb = make_codebook(8, 6, 14);
    BinaryQuantizerConfig cfg;
    cfg.dims = 4;
    Tensor f = random_tensor({3, 5, 6}, init);
    Rng rng(15);
    auto h = hybrid_forward(f, cb, proj, cfg, 1.0, rng);
    VqCodebook copy(cb.entries);
    auto v = vq_encode(f, copy);
    EXPECT_TRUE(same_values(h.branch_input, v.quantized));
}

TEST(Hybrid, RouteMaskReproducibleAndCodebookFrozen) {
    auto run = [] {
        Rng init(16);
        ParameterSet params;
        Projector proj(params, "proj", 6, 4, 1, init);
        VqCodebook cb = make_codebook(8, 6, 17);
        cb.entries.set_requires_grad(true);
        const std::vector<float> before = cb.entries.values();
        BinaryQuantizerConfig cfg;
        cfg.dims = 4;
        Tensor f = random_tensor({16, 4, 6}, init, 1.0f, true);
        Rng rng(18);
        auto h = hybrid_forward(f, cb, proj, cfg, 0.5, rng);
        probe(h.codes.quantized).backward();
        EXPECT_FALSE(cb.entries.has_grad());
        EXPECT_EQ(cb.entries.values(), before);
        return h.routed;
    };
    auto a = run();
    EXPECT_EQ(a, run());
    EXPECT_GT(std::count(a.begin(), a.end(), 1), 0);
    EXPECT_GT(std::count(a.begin(), a.end(), 0), 0);
}

TEST(CodebookStats, Utilization) {
    CodebookStats all(8);
    std::vector<std::uint32_t> distinct{0, 1, 2, 3, 4, 5, 6, 7};
    update_stats(all, distinct);
    EXPECT_EQ(utilization(all), 1.0);
    CodebookStats one(8);
    std::vector<std::uint32_t> repeated(20, 3);
    update_stats(one, repeated);
    EXPECT_EQ(utilization(one), 1.0 / 8);
    EXPECT_EQ(one.total, 20u);
    std::vector<std::uint32_t> bad{8};
    EXPECT_THROW(update_stats(one, bad), DomainError);
}

TEST(CodebookStats, GaussianVectorsHitEveryCode) {
    Rng rng(0);
    Tensor x = random_tensor({4096, 4}, rng);
    CodebookStats stats(16);
    update_stats(stats, binary_quantize(x, 4).indices);
    EXPECT_EQ(stats.utilization(), 1.0);
    std::uint64_t total = 0;
    for (auto c : stats.counts) total += c;
    EXPECT_EQ(total, stats.total);
}
