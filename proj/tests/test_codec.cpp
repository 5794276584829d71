#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "test_util.hpp"
#include "textbin/codec.hpp"
#include "textbin/gradcheck.hpp"

using namespace textbin;
using textbin::testing::probe;

namespace {

CodecConfig tiny_config() {
    CodecConfig c;
    c.image_size = 16;
    c.base_width = 4;
    c.feature_dim = 8;
    c.quantizer.dims = 4;
    c.vq_size = 16;
    return c;
}

Tensor uniform_images(std::size_t batch, std::size_t side, Rng& rng, float lo = 0.0f, float hi = 1.0f) {
    std::vector<float> data(batch * 3 * side * side);
    for (auto& v : data) v = lo + (hi - lo) * rng.uniform();
    return Tensor({batch, 3, side, side}, std::move(data));
}

// Piecewise-constant images: a few bars, so there is structure to learn.
std::vector<Tensor> bar_corpus(std::size_t n, std::size_t side, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < n; ++i) {
        Tensor img({3, side, side}, 1.0f);
        const std::size_t row = rng.below(side - 4);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = row; y < row + 4; ++y)
                for (std::size_t x = 0; x < side; ++x) img.data()[(c * side + y) * side + x] = 0.1f * float(c);
        out.push_back(img);
    }
    return out;
}

std::map<std::string, std::vector<float>> snapshot(const ParameterSet& params) {
    std::map<std::string, std::vector<float>> out;
    for (const auto& p : params.items()) out[p.name] = p.tensor.values();
    return out;
}

}  // namespace

TEST(Codec, DefaultGeometry) {
    Codec codec(CodecConfig{}, 0);
    Rng rng(1);
    Tensor img = uniform_images(1, 64, rng);
    EXPECT_EQ(codec.encode(img).shape(), (Shape{1, 16, 16, 32}));
    EXPECT_EQ(codec.tokenize(img).size(), 256u);
}

TEST(Codec, EncodeIsDeterministic) {
    Codec codec(tiny_config(), 3);
    Rng rng(2);
    Tensor img = uniform_images(1, 16, rng);
    Tensor twice = stack_images({img.detach(), img.detach()}, std::vector<std::size_t>{0, 1});
    twice = reshape(twice, {2, 3, 16, 16});
    Tensor f = codec.encode(twice);
    const std::size_t half = f.numel() / 2;
    for (std::size_t i = 0; i < half; ++i) {
        ASSERT_EQ(std::bit_cast<std::uint32_t>(f.data()[i]), std::bit_cast<std::uint32_t>(f.data()[half + i]));
    }
    EXPECT_TRUE(same_values(codec.encode(img), codec.encode(img)));
}

TEST(Codec, RejectsBadInputs) {
    Codec codec(tiny_config(), 0);
    Tensor img({1, 3, 16, 16}, 0.5f);
    img.data()[7] = 1.5f;
    EXPECT_THROW(codec.encode(img), DomainError);
    EXPECT_THROW(codec.encode(Tensor({1, 3, 8, 8}, 0.5f)), DimensionError);
    std::vector<std::uint32_t> bad(16, 0);
    bad[3] = 16;
    EXPECT_THROW(codec.decode_tokens(bad), DomainError);
    EXPECT_THROW(codec.decode_tokens(std::vector<std::uint32_t>(15, 0)), DimensionError);
    CodecConfig c = tiny_config();
    c.image_size = 18;
    EXPECT_THROW(Codec{c}, ConfigError);
    c = tiny_config();
    c.freeze = {"everything"};
    EXPECT_THROW(Codec{c}, ConfigError);
}

TEST(Codec, RoundTripShapeForEveryValidSize) {
    for (std::size_t side : {4u, 8u, 16u, 32u}) {
        CodecConfig c = tiny_config();
        c.image_size = side;
        Codec codec(c, 1);
        Rng rng(side);
        Tensor img = uniform_images(2, side, rng);
        auto ids = codec.tokenize(img);
        EXPECT_EQ(ids.size(), 2 * c.tokens());
        EXPECT_EQ(codec.decode_tokens(ids).shape(), img.shape());
    }
}

TEST(Codec, GradientThroughEncodeAndDecode) {
    CodecConfig c = tiny_config();
    c.hybrid = false;
    Codec codec(c, 4);
    Rng rng(5);
    auto chain = [&](const Tensor& x) {
        Tensor f = codec.encode(x);
        Tensor z = codec.project(f);
        return probe(codec.decode_codes(reshape(z, {1, 4, 4, 4})), 9);
    };
    Tensor x = uniform_images(1, 16, rng, 0.2f, 0.8f);
    EXPECT_LT(grad_check(chain, x), 1e-2);
    Tensor fixed = x.detach();
    for (const char* name : {"encoder.conv1.weight", "decoder.up1.weight", "encoder.norm.gain"}) {
        Tensor& w = codec.params().at(name).tensor;
        EXPECT_LT(grad_check([&](const Tensor&) { return chain(fixed); }, w), 1e-2) << name;
    }
}

TEST(Codec, DecodeTokensIsPure) {
    Codec codec(tiny_config(), 6);
    std::vector<std::uint32_t> ids(32);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = std::uint32_t((i * 7) % 16);
    Tensor a = codec.decode_tokens(ids);
    Tensor b = codec.decode_tokens(ids);
    EXPECT_TRUE(same_values(a, b));
    for (float v : a.data()) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
    }
}

TEST(Codec, AllZeroTokensMatchGolden) {
    Codec codec(CodecConfig{}, 0);
    Tensor img = codec.decode_tokens(std::vector<std::uint32_t>(256, 0));
    const std::string path = std::string(TEXTBIN_TEST_DATA_DIR) + "/golden/zero_tokens_seed0.f32";
    if (std::getenv("TEXTBIN_WRITE_GOLDEN")) {
        std::ofstream out(path, std::ios::binary);
        out.write(reinterpret_cast<const char*>(img.data().data()), std::streamsize(img.numel() * sizeof(float)));
        GTEST_SKIP() << "golden written to " << path;
    }
    std::ifstream in(path, std::ios::binary);
    ASSERT_TRUE(in) << "missing golden file " << path;
    std::vector<float> golden(img.numel());
    in.read(reinterpret_cast<char*>(golden.data()), std::streamsize(golden.size() * sizeof(float)));
    ASSERT_EQ(in.gcount(), std::streamsize(golden.size() * sizeof(float)));
    EXPECT_TRUE(same_values(img, Tensor(img.shape(), golden)));
}

TEST(TokenizerLoss, ZeroAtPerfectPoint) {
    BinaryQuantizerConfig cfg;
    cfg.dims = 3;
    Tensor image({1, 3, 2, 2}, 0.25f);
    Tensor code({1, 3}, {1.0f, -1.0f, -1.0f});
    // A single row makes the per-sample and batch entropies coincide.
    auto loss = tokenizer_loss(image, image, code, code, cfg);
    EXPECT_NEAR(loss.total.item_extended(), 0.0, 1e-12);
}

TEST(TokenizerLoss, PositiveForImperfectReconstruction) {
    BinaryQuantizerConfig cfg;
    cfg.dims = 3;
    Rng rng(7);
    Tensor code({1, 3}, {1.0f, -1.0f, 1.0f});
    for (int t = 0; t < 20; ++t) {
        Tensor a = uniform_images(1, 4, rng);
        Tensor b = uniform_images(1, 4, rng);
        EXPECT_GT(tokenizer_loss(a, b, code, code, cfg).total.item(), 0.0f);
    }
}

TEST(TokenizerLoss, ComponentsMatchStandaloneOps) {
    BinaryQuantizerConfig cfg;
    cfg.dims = 4;
    Rng rng(8);
    Tensor a = uniform_images(2, 4, rng);
    Tensor b = uniform_images(2, 4, rng);
    Tensor x = textbin::testing::random_tensor({6, 4}, rng);
    Tensor q = binary_quantize(x, 4).quantized;
    auto loss = tokenizer_loss(a, b, x, q, cfg);
    EXPECT_TRUE(same_values(loss.reconstruction, l1_loss(a, b)));
    EXPECT_TRUE(same_values(loss.commitment, commitment_loss(x, q, cfg.commitment_weight)));
    EXPECT_TRUE(same_values(loss.entropy, entropy_penalty(x, cfg)));
}

TEST(Training, FrozenDecoderUnchangedAndOthersMove) {
    CodecConfig c = tiny_config();
    c.freeze = {"decoder"};
    Codec codec(c, 9);
    auto corpus = bar_corpus(12, 16, 10);
    auto before = snapshot(codec.params());
    TokenizerTrainConfig t;
    t.steps = 8;
    t.batch = 4;
    t.warmup = 2;
    TokenizerTrainer trainer(codec, corpus, t);
    trainer.run_until(t.steps);
    for (const auto& p : codec.params().items()) {
        const bool frozen = p.name.rfind("decoder.", 0) == 0 || p.name == "vq.codebook";
        if (frozen) { EXPECT_EQ(p.tensor.values(), before[p.name]) << p.name; }
        if (p.name == "encoder.conv0.weight") { EXPECT_NE(p.tensor.values(), before[p.name]); }
    }
}

TEST(Training, EveryFreezeCombinationIsRespected) {
    const std::vector<std::string> names(codec_components().begin(), codec_components().end());
    auto corpus = bar_corpus(6, 8, 11);
    for (unsigned mask = 0; mask < (1u << names.size()); ++mask) {
        CodecConfig c = tiny_config();
        c.image_size = 8;
        for (std::size_t i = 0; i < names.size(); ++i)
            if (mask & (1u << i)) c.freeze.insert(names[i]);
        Codec codec(c, mask);
        auto before = snapshot(codec.params());
        TokenizerTrainConfig t;
        t.steps = 2;
        t.batch = 2;
        t.warmup = 1;
        TokenizerTrainer trainer(codec, corpus, t);
        trainer.run_until(t.steps);
        for (const auto& p : codec.params().items()) {
            const std::string comp = p.name.substr(0, p.name.find('.'));
            if (c.freeze.count(comp) || p.name == "vq.codebook") {
                EXPECT_EQ(p.tensor.values(), before[p.name]) << p.name << " mask " << mask;
                EXPECT_TRUE(p.frozen);
            }
        }
    }
}

TEST(Training, SameSeedSameLossBitwise) {
    auto corpus = bar_corpus(10, 16, 12);
    auto run = [&] {
        Codec codec(tiny_config(), 13);
        TokenizerTrainConfig t;
        t.steps = 5;
        t.batch = 3;
        t.warmup = 2;
        TokenizerTrainer trainer(codec, corpus, t);
        trainer.run_until(t.steps);
        return trainer.history();
    };
    auto a = run(), b = run();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(std::bit_cast<std::uint64_t>(a[i].total), std::bit_cast<std::uint64_t>(b[i].total));
    }
}

TEST(Training, ResumeMatchesUninterrupted) {
    auto corpus = bar_corpus(10, 16, 14);
    CodecConfig c = tiny_config();
    c.projector_depth = 3;
    TokenizerTrainConfig t;
    t.steps = 8;
    t.batch = 3;
    t.warmup = 2;

    Codec full(c, 15);
    TokenizerTrainer straight(full, corpus, t);
    straight.run_until(t.steps);

    Codec first(c, 15);
    TokenizerTrainer part(first, corpus, t);
    part.run_until(3);
    const std::string bytes = serialize_checkpoint(part.save());

    Codec second(c, 99);  // different init, overwritten by the checkpoint
    TokenizerTrainer resumed(second, corpus, t);
    resumed.load(deserialize_checkpoint(bytes));
    resumed.run_until(t.steps);

    ASSERT_EQ(resumed.history().size(), straight.history().size());
    for (std::size_t i = 0; i < straight.history().size(); ++i) {
        EXPECT_EQ(std::bit_cast<std::uint64_t>(resumed.history()[i].total),
                  std::bit_cast<std::uint64_t>(straight.history()[i].total));
    }
    for (const auto& p : full.params().items()) {
        EXPECT_EQ(p.tensor.values(), second.params().at(p.name).tensor.values()) << p.name;
    }
}

TEST(Training, DivergenceRaisesAndKeepsLastGoodParameters) {
    Codec codec(tiny_config(), 16);
    auto corpus = bar_corpus(4, 16, 17);
    TokenizerTrainConfig t;
    t.steps = 4;
    t.batch = 2;
    TokenizerTrainer trainer(codec, corpus, t);
    trainer.advance();
    auto& w = codec.params().at("decoder.conv3.weight").tensor;
    std::fill(w.data().begin(), w.data().end(), 3e38f);
    auto before = snapshot(codec.params());
    EXPECT_THROW(trainer.advance(), TrainingError);
    EXPECT_EQ(snapshot(codec.params()), before);
    EXPECT_EQ(trainer.step(), 1);
}

TEST(Training, EmptyCorpusIsRejected) {
    Codec codec(tiny_config(), 0);
    std::vector<Tensor> none;
    EXPECT_THROW(TokenizerTrainer(codec, none, TokenizerTrainConfig{}), DomainError);
}

TEST(Training, VqBaselineUpdatesItsCodebook) {
    CodecConfig c = tiny_config();
    c.kind = QuantizerKind::vq;
    c.hybrid = false;
    Codec codec(c, 18);
    auto corpus = bar_corpus(6, 16, 19);
    auto before = codec.params().at("vq.codebook").tensor.values();
    TokenizerTrainConfig t;
    t.steps = 3;
    t.batch = 2;
    t.warmup = 1;
    TokenizerTrainer trainer(codec, corpus, t);
    trainer.run_until(t.steps);
    EXPECT_NE(codec.params().at("vq.codebook").tensor.values(), before);
    EXPECT_GT(trainer.history().back().codebook, 0.0);
    auto ids = codec.tokenize(stack_images(corpus, std::vector<std::size_t>{0}));
    for (auto i : ids) EXPECT_LT(i, 16u);
    EXPECT_EQ(codec.decode_tokens(ids).shape(), (Shape{1, 3, 16, 16}));
}

TEST(Training, InferenceRouteIsConfigurable) {
    CodecConfig c = tiny_config();
    Rng rng(20);
    Tensor img = uniform_images(2, 16, rng);
    Codec raw(c, 21);
    c.inference_route = InferenceRoute::vq;
    Codec vq(c, 21);
    auto a = raw.tokenize(img);
    EXPECT_EQ(a, raw.tokenize(img));
    EXPECT_NE(a, vq.tokenize(img));
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
    Codec codec(tiny_config(), 22);
    auto corpus = bar_corpus(4, 16, 23);
    TokenizerTrainConfig t;
    t.steps = 2;
    t.batch = 2;
    TokenizerTrainer trainer(codec, corpus, t);
    trainer.run_until(2);
    const std::string a = serialize_checkpoint(trainer.save());
    const auto dir = std::filesystem::temp_directory_path() / "textbin_ckpt_test";
    std::filesystem::create_directories(dir);
    save_checkpoint((dir / "a.tbck").string(), deserialize_checkpoint(a));
    const std::string b = serialize_checkpoint(load_checkpoint((dir / "a.tbck").string()));
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.substr(0, 4), "TBCK");
    std::filesystem::remove_all(dir);
}

TEST(Checkpoint, CorruptInputsAreRejected) {
    Checkpoint ck;
    ck.params.push_back({"w", {2}, {1.0f, 2.0f}});
    std::string bytes = serialize_checkpoint(ck);
    EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), IoError);
    EXPECT_THROW(deserialize_checkpoint("XXXX" + bytes.substr(4)), IoError);
    EXPECT_THROW(deserialize_checkpoint(bytes + "z"), IoError);
    EXPECT_THROW(load_checkpoint("/nonexistent/file.tbck"), IoError);
}

TEST(Checkpoint, LittleEndianLayout) {
    Checkpoint ck;
    ck.params.push_back({"ab", {1}, {1.0f}});
    const std::string bytes = serialize_checkpoint(ck);
    const std::string expected = std::string("TBCK") + std::string("\x01\0\0\0", 4) + std::string("\x01\0\0\0", 4) +
                                 std::string("\x02\0\0\0", 4) + "ab" + std::string("\x01\0\0\0", 4) +
                                 std::string("\x01\0\0\0", 4) + std::string("\0\0\x80\x3f", 4) +
                                 std::string("\0\0\0\0", 4) + std::string("\0\0\0\0", 4);
    EXPECT_EQ(bytes, expected);
}

TEST(Checkpoint, ShapeMismatchIsConfigError) {
    Codec small(tiny_config(), 0);
    CodecConfig c = tiny_config();
    c.base_width = 6;
    Codec other(c, 0);
    Checkpoint ck;
    capture(ck, small.params());
    EXPECT_THROW(restore(ck, other.params()), ConfigError);
}
