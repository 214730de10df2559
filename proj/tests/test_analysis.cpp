#include <gtest/gtest.h>

#include <cmath>

#include "dit4sr/ablation.hpp"

using namespace dit4sr;

namespace {

using TD = Tensor<double>;

TD row_stochastic(std::size_t s, std::uint64_t seed) {
    CounterRng rng(seed, 0, 0);
    std::vector<double> v(s * s);
    for (std::size_t i = 0; i < s; ++i) {
        double z = 0;
        for (std::size_t j = 0; j < s; ++j) z += (v[i * s + j] = rng.uniform() + 0.01);
        for (std::size_t j = 0; j < s; ++j) v[i * s + j] /= z;
    }
    return TD({s, s}, v);
}

ModelConfig small_config(VariantId v, std::size_t depth = 2) {
    ModelConfig cfg;
    cfg.latent_h = cfg.latent_w = 16;
    cfg.token_dim = 8;
    cfg.heads = 2;
    cfg.depth = depth;
    cfg.text_len = 2;
    cfg.pooled_dim = 8;
    cfg.variant = v;
    return cfg;
}

std::vector<SamplePair> pairs(std::size_t n) {
    DegradationConfig deg;
    deg.seed = 8;
    return synthesize_pairs(16, 16, deg, n);
}

TrainSample<double> probe_sample(const SamplePair& p) {
    CounterRng rng(99, 0, 0);
    return {encode_latent<double>(p.hr), image_to_tensor<double>(p.lr), p.tags,
            gaussian_tensor<double>({16, 16, 3}, rng), 0.5};
}

void train_steps(Model<double>& m, const std::vector<SamplePair>& data, std::size_t n) {
    TrainConfig tc;
    tc.optimizer.learning_rate = 0.01;
    Trainer<double> t(m, data, tc);
    for (std::size_t i = 0; i < n; ++i) t.step();
}

}  // namespace

TEST(Regions, ReassembleBitwise) {
    const auto map = row_stochastic(2 * 3 + 2, 1);
    const auto regions = extract_regions(map, 3, 2);
    ASSERT_EQ(regions.size(), 9u);
    const auto back = reassemble(regions, {3, 3, 2});
    for (std::size_t i = 0; i < map.numel(); ++i) EXPECT_EQ(back[i], map[i]);
}

TEST(Regions, UniformMapGivesUniformEntries) {
    const std::size_t k = 4, m = 3, s = 2 * k + m;
    const auto map = TD::full({s, s}, 1.0 / s);
    for (const auto& r : extract_regions(map, k, m))
        for (double v : r.values) EXPECT_EQ(v, 1.0 / s);
}

TEST(Regions, HandBuiltMapMatchesIndexArithmetic) {
    // K = 2, M = 1: S = 5; entry (i, j) = 10 i + j
    std::vector<double> v(25);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) v[i * 5 + j] = 10.0 * i + j;
    const auto regions = extract_regions(TD({5, 5}, v), 2, 1);
    const auto& xl = find_region(regions, "X->L");
    EXPECT_EQ(xl.rows, 2u);
    EXPECT_EQ(xl.values, (std::vector<double>{2, 3, 12, 13}));
    const auto& lc = find_region(regions, "L->C");
    EXPECT_EQ(lc.values, (std::vector<double>{24, 34}));
    const auto& cx = find_region(regions, "C->X");
    EXPECT_EQ(cx.values, (std::vector<double>{40, 41}));
    EXPECT_EQ(find_region(regions, "C->C").values, (std::vector<double>{44}));
    EXPECT_THROW(find_region(regions, "X->Y"), ConfigError);
    EXPECT_THROW(extract_regions(TD({5, 5}, v), 2, 2), ConfigError);
}

TEST(DiagonalMass, OneHotDiagonal) {
    RegionMatrix r{"X->L", 3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}};
    EXPECT_EQ(diagonal_mass(r), 1.0);
    EXPECT_EQ(off_diagonal_mean(r), 0.0);
}

TEST(DiagonalMass, UniformRegion) {
    const std::size_t k = 4, m = 2, s = 2 * k + m;
    const auto regions = extract_regions(TD::full({s, s}, 1.0 / s), k, m);
    const auto& xl = find_region(regions, "X->L");
    EXPECT_DOUBLE_EQ(diagonal_mass(xl), 1.0 / s);
    EXPECT_DOUBLE_EQ(off_diagonal_mean(xl), 1.0 / s);
}

TEST(DiagonalMass, MatchesDirectSummation) {
    const std::size_t k = 5, m = 2, s = 2 * k + m;
    const auto map = row_stochastic(s, 2);
    const auto regions = extract_regions(map, k, m);
    const auto& xl = find_region(regions, "X->L");
    double diag = 0, off = 0;
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) (i == j ? diag : off) += map[i * s + k + j];
    EXPECT_NEAR(diagonal_mass(xl), diag / k, 1e-12);
    EXPECT_NEAR(off_diagonal_mean(xl), off / (k * k - k), 1e-12);
    RegionMatrix rect{"X->C", 2, 3, std::vector<double>(6, 0.1)};
    EXPECT_THROW(diagonal_mass(rect), ConfigError);
}

TEST(DiagonalMass, InvariantUnderTransposeOfSymmetricMap) {
    RegionMatrix r{"X->L", 3, 3, {0.5, 0.2, 0.1, 0.2, 0.4, 0.3, 0.1, 0.3, 0.6}};
    RegionMatrix t{"X->L", 3, 3, {}};
    for (std::size_t j = 0; j < 3; ++j)
        for (std::size_t i = 0; i < 3; ++i) t.values.push_back(r.at(i, j));
    EXPECT_EQ(diagonal_mass(r), diagonal_mass(t));
    EXPECT_EQ(off_diagonal_mean(r), off_diagonal_mean(t));
}

TEST(RegionStatsTest, MassesStayInUnitInterval) {
    AttentionRecord<double> rec{{"X", "L", "C"}, {3, 3, 2}, {row_stochastic(8, 3), row_stochastic(8, 4)}};
    const auto stats = region_stats<double>({rec});
    EXPECT_EQ(stats.size(), 18u);
    for (const auto& s : stats) {
        EXPECT_GE(s.mass, 0.0);
        EXPECT_LE(s.mass, 1.0);
        const bool square = s.region == "X->X" || s.region == "X->L" || s.region == "L->X" || s.region == "L->L" ||
                            s.region == "C->C";
        EXPECT_EQ(std::isnan(s.diagonal), !square) << s.region;
    }
}

TEST(DepthCurve, SingleBlockGivesOnePoint) {
    const Model<double> m(small_config(VariantId::FULL, 1));
    const auto p = pairs(1)[0];
    const auto res = m.forward(encode_latent<double>(p.hr), m.encode_lr(p.lr), p.tags, 0.5, {.record = true});
    EXPECT_EQ(depth_decay_curve<double>({res.records}).size(), 1u);
}

TEST(DepthCurve, InitialModelIsUniformInEveryBlock) {
    const auto cfg = small_config(VariantId::FULL, 3);
    const Model<double> m(cfg);
    std::vector<std::vector<AttentionRecord<double>>> batch;
    for (const auto& p : pairs(2))
        batch.push_back(m.forward(encode_latent<double>(p.hr), m.encode_lr(p.lr), p.tags, 0.3, {.record = true}).records);
    const double uniform = 1.0 / static_cast<double>(2 * cfg.tokens() + cfg.text_len);
    const auto curve = depth_decay_curve(batch);
    ASSERT_EQ(curve.size(), 3u);
    for (const auto& pt : curve) {
        EXPECT_NEAR(pt.diagonal, uniform, 1e-6);
        EXPECT_NEAR(pt.off_diagonal, uniform, 1e-6);
    }
}

TEST(Psnr, IdenticalImagesHitTheSentinel) {
    const ImageBuffer a(12, 12, 3, 0.3);
    EXPECT_EQ(psnr(a, a), kPsnrIdentical);
    EXPECT_EQ(ssim(a, a), 1.0);
}

TEST(Psnr, OffsetOfOneTenthIsTwentyDecibels) {
    const ImageBuffer a(12, 12, 3, 0.5), b(12, 12, 3, 0.6);
    EXPECT_NEAR(psnr(a, b), 20.0, 1e-9);
    EXPECT_EQ(psnr(a, b), psnr(b, a));
    EXPECT_THROW(psnr(a, ImageBuffer(12, 11, 3)), ConfigError);
}

TEST(Ssim, NegativeOfConstantPatch) {
    const double x = 0.3, y = 1.0 - x, c1 = 1e-4;
    const ImageBuffer a(11, 11, 3, x), b(11, 11, 3, y);
    EXPECT_NEAR(ssim(a, b), (2 * x * y + c1) / (x * x + y * y + c1), 1e-12);
}

TEST(Ssim, SymmetricAndBounded) {
    ImageBuffer a(16, 16, 3), b(16, 16, 3);
    CounterRng rng(5, 0, 0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        a.values[i] = rng.uniform();
        b.values[i] = rng.uniform();
    }
    const double s = ssim(a, b);
    EXPECT_NEAR(s, ssim(b, a), 1e-15);
    EXPECT_GE(s, -1.0);
    EXPECT_LE(s, 1.0);
    EXPECT_THROW(ssim(ImageBuffer(8, 8, 3), ImageBuffer(8, 8, 3)), ConfigError);
}

TEST(FlowProbe, ControlNetBranchIgnoresLatent) {
    Model<double> m(small_config(VariantId::CONTROLNET));
    const auto data = pairs(2);
    EXPECT_EQ(flow_probe(m, probe_sample(data[0])).lr_state_wrt_latent, 0.0);
    train_steps(m, data, 2);
    EXPECT_EQ(flow_probe(m, probe_sample(data[0])).lr_state_wrt_latent, 0.0);
}

TEST(FlowProbe, ZeroGatesHideLatentFromLrStreamAtInit) {
    // every gate at zero makes each block the identity on L
    Model<double> m(small_config(VariantId::FULL), {0, 0.0});
    EXPECT_EQ(flow_probe(m, probe_sample(pairs(1)[0])).lr_state_wrt_latent, 0.0);
}

TEST(FlowProbe, DefaultGatesExposeLatentAfterOneStep) {
    Model<double> m(small_config(VariantId::FULL));
    const auto data = pairs(2);
    train_steps(m, data, 1);
    EXPECT_GT(flow_probe(m, probe_sample(data[0])).lr_state_wrt_latent, 1e-8);
}

TEST(FlowProbe, NoIntegrationLeavesOnlyTheInjectionPath) {
    Model<double> m(small_config(VariantId::A));
    const auto data = pairs(2);
    train_steps(m, data, 2);
    const auto p = flow_probe(m, probe_sample(data[1]));
    EXPECT_EQ(p.output_wrt_lr_attention, 0.0);
    EXPECT_GT(p.output_wrt_lr, 0.0);
}

TEST(MapImage, ScalesLargestEntryToWhite) {
    const auto img = attention_map_image(TD({2, 2}, {0.1, 0.4, 0.2, 0.0}));
    EXPECT_EQ(img.channels, 1u);
    EXPECT_EQ(img.values[1], 1.0);
    EXPECT_EQ(img.values[3], 0.0);
    EXPECT_EQ(img.values[0], std::round(0.25 * 255) / 255);
}
