#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "dit4sr/degradation.hpp"

using namespace dit4sr;

namespace {

ImageBuffer random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
    ImageBuffer img(h, w, 3);
    CounterRng rng(seed, 0, 0);
    for (double& v : img.values) v = rng.uniform();
    return img;
}

double max_abs_diff(const ImageBuffer& a, const ImageBuffer& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values[i] - b.values[i]));
    return m;
}

DegradationConfig neutral_config() {
    DegradationConfig cfg;
    cfg.blur_sigma_range = {0, 0};
    cfg.noise_sigma_range = {0, 0};
    cfg.resize_methods = {ResizeMethod::nearest};
    cfg.resize_factor_range = {1, 1};
    cfg.compress_quality_range = {100, 100};
    return cfg;
}

}  // namespace

TEST(Blur, ZeroSigmaIsBitwiseIdentity) {
    const auto img = random_image(9, 7, 1);
    EXPECT_EQ(gaussian_blur(img, 0.0), img);
}

TEST(Blur, ConstantImageUnchanged) {
    const ImageBuffer img(12, 10, 3, 0.37);
    for (double s : {0.3, 1.0, 2.5}) EXPECT_LT(max_abs_diff(gaussian_blur(img, s), img), 1e-6);
}

TEST(Blur, ImpulseCenterIsKernelCenterWeight) {
    ImageBuffer img(15, 15, 3, 0.0);
    for (std::size_t c = 0; c < 3; ++c) img.at(7, 7, c) = 1.0;
    const auto out = gaussian_blur(img, 1.0);
    // radius 3, normalized 1-D taps; the 2-D center weight is the square of the 1-D one
    double s = 0;
    for (int i = -3; i <= 3; ++i) s += std::exp(-0.5 * i * i);
    const double w0 = 1.0 / s;
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(out.at(7, 7, c), w0 * w0, 1e-12);
}

TEST(Blur, NegativeSigmaThrows) { EXPECT_THROW(gaussian_blur(ImageBuffer(2, 2), -0.1), ConfigError); }

TEST(Resize, NearestFactorOneIsIdentity) {
    const auto img = random_image(6, 5, 2);
    EXPECT_EQ(resize(img, 6, 5, ResizeMethod::nearest), img);
}

TEST(Resize, ConstantsArePreserved) {
    const ImageBuffer img(8, 6, 3, 0.61);
    for (auto m : {ResizeMethod::nearest, ResizeMethod::bilinear, ResizeMethod::bicubic})
        for (auto [h, w] : {std::pair<std::size_t, std::size_t>{3, 5}, {16, 12}, {1, 1}, {7, 13}})
            EXPECT_LT(max_abs_diff(resize(img, h, w, m), ImageBuffer(h, w, 3, 0.61)), 1e-6);
}

TEST(Resize, BilinearTwoByTwoToOneIsMean) {
    ImageBuffer img(2, 2, 1);
    img.values = {0.1, 0.4, 0.7, 0.2};
    const auto out = resize(img, 1, 1, ResizeMethod::bilinear);
    EXPECT_NEAR(out.values[0], (0.1 + 0.4 + 0.7 + 0.2) / 4, 1e-15);
}

TEST(Resize, NearestUpThenDownIsIdentity) {
    const auto img = random_image(5, 4, 3);
    const auto up = resize(img, 15, 12, ResizeMethod::nearest);
    EXPECT_EQ(resize(up, 5, 4, ResizeMethod::nearest), img);
}

TEST(Noise, ZeroSigmaIsIdentity) {
    const auto img = random_image(4, 4, 4);
    CounterRng rng(1, 2, 3);
    EXPECT_EQ(add_gaussian_noise(img, 0.0, rng), img);
}

TEST(Noise, SameSeedIsBitwiseIdentical) {
    const auto img = random_image(8, 8, 5);
    CounterRng a(9, 1, 2), b(9, 1, 2);
    EXPECT_EQ(add_gaussian_noise(img, 0.05, a), add_gaussian_noise(img, 0.05, b));
}

TEST(Noise, SampleVarianceMatchesSigma) {
    // about 10^6 draws; mid-gray keeps clamping out of reach
    const ImageBuffer img(1000, 334, 3, 0.5);
    CounterRng rng(42, 0, 0);
    const auto out = add_gaussian_noise(img, 0.1, rng);
    double m = 0, v = 0;
    for (double x : out.values) m += x;
    m /= static_cast<double>(out.size());
    for (double x : out.values) v += (x - m) * (x - m);
    v /= static_cast<double>(out.size() - 1);
    EXPECT_NEAR(v, 0.01, 0.02 * 0.01);
}

TEST(Compress, QualityScalingLaw) {
    EXPECT_EQ(quant_table(50)[0], 16.0);
    EXPECT_EQ(quant_table(100)[0], 1.0);
    EXPECT_EQ(quant_table(10)[0], 80.0);
    EXPECT_EQ(quant_table(75)[0], 8.0);
    EXPECT_THROW(quant_table(0), ConfigError);
}

TEST(Compress, QualityHundredIsFixedPoint) {
    const auto once = block_compress(random_image(16, 16, 6), 80);
    const auto twice = block_compress(once, 100);
    EXPECT_EQ(block_compress(twice, 100), twice);
}

TEST(Compress, ConstantImageSurvivesAnyQuality) {
    for (double v : {0.0, 128.0 / 255.0, 1.0})
        for (int q : {10, 50, 95}) {
            const ImageBuffer img(16, 24, 3, v);
            EXPECT_LT(max_abs_diff(block_compress(img, q), img), 1e-9);
        }
}

TEST(Compress, RampBlockMatchesDirectFormOracle) {
    ImageBuffer img(8, 8, 1);
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) img.at(y, x, 0) = (3.0 * x + 5.0 * y) / 60.0;
    const auto out = block_compress(img, 50);

    const auto q = quant_table(50);
    auto alpha = [](int u) { return u == 0 ? std::sqrt(0.125) : 0.5; };
    const double pi = std::numbers::pi;
    double coef[8][8];
    for (int u = 0; u < 8; ++u)
        for (int v = 0; v < 8; ++v) {
            double s = 0;
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x)
                    s += (255.0 * img.at(y, x, 0) - 128.0) * std::cos((2 * y + 1) * u * pi / 16) *
                         std::cos((2 * x + 1) * v * pi / 16);
            s *= alpha(u) * alpha(v);
            coef[u][v] = std::round(s / q[u * 8 + v]) * q[u * 8 + v];
        }
    double worst = 0;
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            double s = 0;
            for (int u = 0; u < 8; ++u)
                for (int v = 0; v < 8; ++v)
                    s += alpha(u) * alpha(v) * coef[u][v] * std::cos((2 * y + 1) * u * pi / 16) *
                         std::cos((2 * x + 1) * v * pi / 16);
            const double ref = std::clamp((s + 128.0) / 255.0, 0.0, 1.0);
            worst = std::max(worst, std::abs(out.at(y, x, 0) - ref));
        }
    EXPECT_LT(worst, 1e-9);
}

TEST(Compress, PartialEdgeBlocksKeepExtent) {
    const auto out = block_compress(random_image(11, 13, 7), 70);
    EXPECT_EQ(out.height, 11u);
    EXPECT_EQ(out.width, 13u);
    for (double v : out.values) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Degrade, FiveTwelveToOneTwentyEight) {
    DegradationConfig cfg;
    cfg.seed = 3;
    const auto r = degrade(random_image(512, 512, 8), cfg, 0);
    EXPECT_EQ(r.lr.height, 128u);
    EXPECT_EQ(r.lr.width, 128u);
    EXPECT_EQ(r.lr.channels, 3u);
}

TEST(Degrade, IndivisibleExtentThrows) {
    DegradationConfig cfg;
    EXPECT_THROW(degrade(ImageBuffer(30, 32), cfg, 0), ConfigError);
}

TEST(Degrade, NeutralChainIsNearestDownsampling) {
    const auto hr = random_image(32, 24, 9);
    const auto lr = degrade(hr, neutral_config(), 5).lr;
    ASSERT_EQ(lr.height, 8u);
    ASSERT_EQ(lr.width, 6u);
    // half-pixel centers at factor 4 land on source index 4i + 2
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 6; ++x)
            for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(lr.at(y, x, c), hr.at(4 * y + 2, 4 * x + 2, c));
}

TEST(Degrade, SameSeedAndIndexIsBitwiseIdentical) {
    DegradationConfig cfg;
    cfg.seed = 11;
    cfg.second_order = true;
    const auto hr = random_image(64, 64, 10);
    const auto a = degrade(hr, cfg, 4), b = degrade(hr, cfg, 4);
    EXPECT_EQ(a.lr, b.lr);
    EXPECT_EQ(a.trace, b.trace);
    const auto c = degrade(hr, cfg, 5);
    EXPECT_FALSE(c.lr == a.lr);
}

TEST(Degrade, TraceReplaysBitwise) {
    DegradationConfig cfg;
    cfg.seed = 12;
    cfg.second_order = true;
    const auto hr = random_image(48, 64, 11);
    const auto r = degrade(hr, cfg, 7);
    EXPECT_EQ(r.trace.stages.size(), 2u);
    const auto parsed = DegradationTrace::parse(r.trace.to_text());
    EXPECT_EQ(parsed, r.trace);
    EXPECT_EQ(replay(hr, parsed), r.lr);
}

TEST(Degrade, DrawnParametersStayInRange) {
    DegradationConfig cfg;
    cfg.seed = 13;
    for (std::uint64_t i = 0; i < 50; ++i) {
        const auto t = draw_trace(64, 64, cfg, i);
        for (const auto& s : t.stages) {
            EXPECT_GE(s.blur_sigma, cfg.blur_sigma_range[0]);
            EXPECT_LE(s.blur_sigma, cfg.blur_sigma_range[1]);
            EXPECT_GE(s.noise_sigma, cfg.noise_sigma_range[0]);
            EXPECT_LE(s.noise_sigma, cfg.noise_sigma_range[1]);
            EXPECT_GE(s.quality, cfg.compress_quality_range[0]);
            EXPECT_LE(s.quality, cfg.compress_quality_range[1]);
        }
    }
}

TEST(Degrade, OutputStaysInUnitInterval) {
    DegradationConfig cfg;
    cfg.seed = 14;
    cfg.noise_sigma_range = {0.2, 0.3};
    for (double v : degrade(random_image(32, 32, 12), cfg, 0).lr.values) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Config, RejectsInvertedRange) {
    DegradationConfig cfg;
    cfg.blur_sigma_range = {1.0, 0.5};
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = DegradationConfig{};
    cfg.compress_quality_range = {5, 90};
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(TraceText, UnknownKeyIsRejected) {
    EXPECT_THROW(DegradationTrace::parse("seed=1\nbogus=2\n"), ConfigError);
}

TEST(ImageIo, PpmRoundTripIsQuantizedExactly) {
    const auto img = random_image(5, 7, 15);
    const auto path = (std::filesystem::temp_directory_path() / "dit4sr_roundtrip.ppm").string();
    write_image(path, img);
    const auto back = read_image(path);
    std::filesystem::remove(path);
    EXPECT_EQ(back, quantize_u8(img));
    EXPECT_THROW(read_image(path), IoError);
}
