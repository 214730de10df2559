#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "dit4sr/gradcheck.hpp"

using namespace dit4sr;

namespace {

using TD = Tensor<double>;

TD random_tensor(Shape s, std::uint64_t seed, double scale = 1.0) {
    CounterRng rng(seed, 5, 5);
    std::vector<double> v(numel_of(s));
    for (auto& x : v) x = scale * rng.normal();
    return TD(std::move(s), std::move(v));
}

Linear<double> identity_linear(std::size_t d) {
    TD w({d, d});
    for (std::size_t i = 0; i < d; ++i) w.mutable_data()[i * d + i] = 1.0;
    return {w, TD({d})};
}

ModelConfig small_config(VariantId v = VariantId::FULL) {
    ModelConfig cfg;
    cfg.latent_h = cfg.latent_w = 8;
    cfg.token_dim = 16;
    cfg.heads = 2;
    cfg.depth = 2;
    cfg.text_len = 3;
    cfg.pooled_dim = 8;
    cfg.tag_vocab_size = 5;
    cfg.scale_factor = 2;
    cfg.variant = v;
    return cfg;
}

double max_abs_diff(const TD& a, const TD& b) {
    EXPECT_EQ(a.shape(), b.shape());
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST(Patchify, EightByEightGivesSixteenTokens) {
    const auto p = to_patches(random_tensor({8, 8, 3}, 1), 2);
    EXPECT_EQ(p.shape(), (Shape{16, 12}));
}

TEST(Patchify, IdentityProjectionRoundTripIsBitwise) {
    const auto z = random_tensor({6, 4, 3}, 2);
    const auto id = identity_linear(12);
    const auto back = unpatchify(patchify(z, id, 2), id, 6, 4, 3, 2);
    for (std::size_t i = 0; i < z.numel(); ++i) EXPECT_EQ(back[i], z[i]);
}

TEST(Patchify, IndivisibleExtentsThrow) {
    EXPECT_THROW(to_patches(random_tensor({5, 4, 3}, 3), 2), ConfigError);
    ModelConfig cfg = small_config();
    cfg.latent_w = 9;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Unpatchify, ScatterMatchesIndexArithmetic) {
    // K = 4 tokens of a 4x4x2 latent, p = 2
    std::vector<double> v(32);
    for (std::size_t i = 0; i < 32; ++i) v[i] = static_cast<double>(i);
    const auto z = from_patches(TD({4, 8}, v), 4, 4, 2, 2);
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x)
            for (std::size_t c = 0; c < 2; ++c) {
                const std::size_t token = (y / 2) * 2 + x / 2, inner = ((y % 2) * 2 + x % 2) * 2 + c;
                EXPECT_EQ(z[(y * 4 + x) * 2 + c], static_cast<double>(token * 8 + inner));
            }
}

TEST(Unpatchify, ZeroTokensGiveZeroLatent) {
    CounterRng rng(4, 0, 0);
    Linear<double> proj{random_tensor({8, 12}, 4), TD({12})};
    const auto z = unpatchify(TD({16, 8}), proj, 8, 8, 3, 2);
    for (double v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(Patchify, GradientMatchesFiniteDifferences) {
    for (const auto& item : gradcheck_ops()) {
        if (item.name.find("patchify") == std::string::npos) continue;
        SCOPED_TRACE(item.name);
        EXPECT_LT(item.worst_rel, 1e-4);
    }
}

TEST(PositionEmbedding, SharedBetweenStreams) {
    const Model<double> model(small_config());
    EXPECT_EQ(&model.x_position_embedding(), &model.l_position_embedding());
}

TEST(PositionEmbedding, RowsAreDistinct) {
    for (auto [gh, gw, d] : {std::tuple<std::size_t, std::size_t, std::size_t>{4, 4, 8}, {8, 8, 16}, {16, 16, 64}, {3, 7, 4}}) {
        const auto pe = position_embedding<double>(gh, gw, d);
        std::set<std::vector<double>> rows;
        for (std::size_t k = 0; k < gh * gw; ++k)
            rows.emplace(pe.data().begin() + static_cast<long>(k * d), pe.data().begin() + static_cast<long>((k + 1) * d));
        EXPECT_EQ(rows.size(), gh * gw);
    }
}

TEST(PositionEmbedding, OriginIsSinZeroCosOne) {
    const auto pe = position_embedding<double>(2, 2, 4);
    EXPECT_EQ(pe[0], 0.0);
    EXPECT_EQ(pe[1], 1.0);
    EXPECT_EQ(pe[2], 0.0);
    EXPECT_EQ(pe[3], 1.0);
    // (0, 1): row part unchanged, column part is sin(1), cos(1)
    EXPECT_DOUBLE_EQ(pe[4 + 2], std::sin(1.0));
    EXPECT_DOUBLE_EQ(pe[4 + 3], std::cos(1.0));
}

TEST(EncodeLr, UpsamplesToHrExtents) {
    ModelConfig cfg;
    cfg.latent_h = cfg.latent_w = 512;
    cfg.token_dim = 4;
    cfg.heads = 1;
    cfg.depth = 1;
    cfg.text_len = 1;
    cfg.pooled_dim = 2;
    cfg.tag_vocab_size = 1;
    cfg.scale_factor = 4;
    const Model<float> model(cfg);
    const auto l = model.encode_lr(ImageBuffer(128, 128, 3, 0.25));
    EXPECT_EQ(l.shape(), (Shape{256 * 256, 4}));
    EXPECT_THROW(model.encode_lr(ImageBuffer(64, 64, 3)), ConfigError);
}

TEST(EncodeLr, MidGrayGivesBiasPlusPosition) {
    const Model<double> model(small_config());
    const auto l = model.encode_lr(ImageBuffer(4, 4, 3, 0.5));
    const auto& pe = model.l_position_embedding();
    const auto& b = model.l_embed().b;
    const std::size_t d = 16;
    ASSERT_EQ(l.shape(), (Shape{16, d}));
    for (std::size_t k = 0; k < 16; ++k)
        for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(l[k * d + j], b[j] + pe[k * d + j], 1e-12);
}

TEST(EncodeLr, TokenCountMatchesX) {
    const Model<double> model(small_config());
    const auto x = model.embed_latent(random_tensor({8, 8, 3}, 5));
    const auto l = model.encode_lr(ImageBuffer(4, 4, 3, 0.3));
    EXPECT_EQ(x.shape(), l.shape());
}

TEST(Forward, OutputShapeMatchesLatent) {
    for (auto v : kAllVariants) {
        auto cfg = small_config(v);
        cfg.latent_h = 8;
        cfg.latent_w = 12;
        const Model<double> model(cfg);
        const auto z = random_tensor({8, 12, 3}, 6);
        const auto out = model.velocity(z, model.encode_lr(ImageBuffer(4, 6, 3, 0.4)), {1}, 0.3);
        EXPECT_EQ(out.shape(), z.shape()) << to_string(v);
    }
}

TEST(Forward, NullConditioningRuns) {
    const Model<double> model(small_config());
    const auto z = random_tensor({8, 8, 3}, 7);
    const auto out = model.velocity(z, model.encode_lr(ImageBuffer(4, 4, 3, 0.4)), {}, 0.9);
    for (double v : out.data()) EXPECT_TRUE(std::isfinite(v));
    const auto c = model.text_tokens({});
    for (std::size_t j = 1; j < 3; ++j)
        for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(c[j * 16 + k], c[k]);
}

TEST(Forward, TagOrderDoesNotMatter) {
    const Model<double> model(small_config());
    const auto z = random_tensor({8, 8, 3}, 8);
    const auto l = model.encode_lr(ImageBuffer(4, 4, 3, 0.4));
    const auto a = model.velocity(z, l, {3, 1}, 0.5), b = model.velocity(z, l, {1, 3}, 0.5);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
    EXPECT_THROW(model.velocity(z, l, {5}, 0.5), ConfigError);
}

TEST(Forward, BitwiseDeterministic) {
    const Model<float> m1(small_config()), m2(small_config());
    const auto zd = random_tensor({8, 8, 3}, 9);
    const Tensor<float> z(zd.shape(), std::vector<float>(zd.data().begin(), zd.data().end()));
    const auto a = m1.velocity(z, m1.encode_lr(ImageBuffer(4, 4, 3, 0.2)), {2}, 0.25);
    const auto b = m2.velocity(z, m2.encode_lr(ImageBuffer(4, 4, 3, 0.2)), {2}, 0.25);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Forward, MismatchedLatentIsConfigError) {
    const Model<double> model(small_config());
    const auto l = model.encode_lr(ImageBuffer(4, 4, 3, 0.4));
    EXPECT_THROW(model.velocity(random_tensor({8, 6, 3}, 10), l, {}, 0.5), ConfigError);
    EXPECT_THROW(model.velocity(random_tensor({8, 8, 3}, 10), random_tensor({15, 16}, 1), {}, 0.5), ConfigError);
}

TEST(Forward, FullAndNoIntegrationDifferOnlyByDilution) {
    // At init the queries are zero and the L keys/values are zero, so every X and C row
    // of the three-stream softmax is the two-stream one scaled by (K + M) / (2K + M).
    const auto cfg_full = small_config(VariantId::FULL);
    const Model<double> full(cfg_full);
    Model<double> a(small_config(VariantId::A));
    const double k = 16, m = 3, ratio = (k + m) / (2 * k + m);
    for (std::size_t i = 0; i < cfg_full.depth; ++i)
        for (const char* s : {".x.out.w", ".c.out.w"}) {
            auto w = a.params().find("blocks." + std::to_string(i) + s);
            for (auto& v : w.mutable_data()) v *= ratio;
        }
    const auto z = random_tensor({8, 8, 3}, 11);
    const auto lr = random_tensor({4, 4, 3}, 12, 0.3);
    const auto vf = full.velocity(z, full.encode_lr(lr), {0, 4}, 0.6);
    const auto va = a.velocity(z, a.encode_lr(lr), {0, 4}, 0.6);
    EXPECT_LT(max_abs_diff(vf, va), 1e-12);

    const Model<double> plain(small_config(VariantId::A));
    EXPECT_GT(max_abs_diff(vf, plain.velocity(z, plain.encode_lr(lr), {0, 4}, 0.6)), 1e-6);
}

TEST(Forward, EndToEndGradientsMatchFiniteDifferences) {
    for (const auto& item : gradcheck_model()) {
        SCOPED_TRACE(item.name);
        EXPECT_GT(item.elements, 0u);
        EXPECT_LT(item.worst_rel, 1e-4);
    }
}

TEST(Config, HeadsMustDivideWidth) {
    auto cfg = small_config();
    cfg.heads = 3;
    EXPECT_THROW(Model<double>{cfg}, ConfigError);
}
