#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "pulseforge/neural.hpp"

using namespace pulseforge;
using namespace pulseforge::neural;

namespace {

CanConfig tiny(Activation act = Activation::tanh)
{
    CanConfig c;
    c.input_size = 8;
    c.conv_channels = {2, 2, 3, 3};
    c.hidden_units = 4;
    c.activation = act;
    return c;
}

drm::VideoTensor clip_video(double hr, double seconds, std::uint64_t seed, int size, double velocity = 0)
{
    const auto pulse = synth_pulse(hr, seconds, 30, seed);
    return drm::render_patch_video(drm::PatchSpec::make_default(size), drm::default_skin_model(0.02),
                                   {0.01, 0, 0.01, 0}, pulse, drm::make_motion(velocity, seconds, 30, 30, size),
                                   {std::nullopt, 0.001, seed});
}

TrainingClip training_clip(double hr, double seconds, std::uint64_t seed, const CanConfig& cfg, double velocity = 0)
{
    const auto pulse = synth_pulse(hr, seconds, 30, seed);
    const auto v = drm::render_patch_video(drm::PatchSpec::make_default(cfg.input_size),
                                           drm::default_skin_model(0.02), {0.01, 0, 0.01, 0}, pulse,
                                           drm::make_motion(velocity, seconds, 30, 30, cfg.input_size),
                                           {std::nullopt, 0.001, seed});
    return make_training_clip(v, pulse, cfg);
}

std::vector<double> moments(const std::vector<float>& v)
{
    double m = 0, s = 0;
    for (float x : v)
        m += x;
    m /= v.size();
    for (float x : v)
        s += (x - m) * (x - m);
    return {m, std::sqrt(s / v.size())};
}

} // namespace

TEST(NormalizeFrames, IdenticalFramesGiveZeroDifference)
{
    drm::VideoTensor v(4, 3, 3, 30);
    for (std::size_t i = 0; i < v.data.size(); ++i)
        v.data[i] = 0.1f + 0.01f * static_cast<float>(i % 27);
    for (float d : frame_difference_ratio(v))
        EXPECT_EQ(d, 0.0f);
    EXPECT_THROW(normalize_frames(v), DegenerateInputError);
}

TEST(NormalizeFrames, GainInvariantMotionAndStandardized)
{
    const auto v = clip_video(72, 2, 1, 8, 20);
    auto doubled = v;
    for (float& x : doubled.data)
        x *= 0.5f;
    const auto a = normalize_frames(v);
    const auto b = normalize_frames(doubled);
    ASSERT_EQ(a.pairs, v.frames - 1);
    for (std::size_t i = 0; i < a.motion.size(); ++i)
        EXPECT_NEAR(a.motion[i], b.motion[i], 1e-3);
    for (const auto* x : {&a.motion, &a.appearance}) {
        const auto m = moments(*x);
        EXPECT_LT(std::abs(m[0]), 1e-6);
        EXPECT_NEAR(m[1], 1.0, 1e-4);
    }
}

TEST(Downsample, BoxAverage)
{
    drm::VideoTensor v(2, 4, 4, 30);
    for (std::size_t i = 0; i < v.data.size(); ++i)
        v.data[i] = static_cast<float>(i % 7) / 10.0f;
    const auto d = downsample(v, 2);
    double want = 0;
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x)
            want += v.at(1, y, 2 + x, 1);
    EXPECT_NEAR(d.at(1, 0, 1, 1), want / 4, 1e-7);
    EXPECT_THROW(downsample(v, 3), ConfigError);
}

TEST(Network, ZeroWeightsGiveZeroOutputOfLengthPairs)
{
    const auto cfg = tiny();
    const auto m = CanModel<double>::zeros(cfg);
    const auto in = normalize_frames(clip_video(72, 2, 2, 8, 10));
    const auto y = forward_clip(m, in);
    ASSERT_EQ(y.size(), in.pairs);
    for (double v : y)
        EXPECT_EQ(v, 0.0);
}

TEST(Network, UniformFeaturesGiveHalfMask)
{
    auto m = CanModel<double>::init(tiny(), 3);
    // attention weights zero: every logit equals the bias
    const auto& w = m.weight_spec(kAttention1);
    std::fill_n(m.weights.begin() + static_cast<std::ptrdiff_t>(w.offset), w.size(), 0.0);
    m.weights[m.bias_spec(kAttention1).offset] = 0.7;
    CanNetwork<double> net(m);
    detail::Cache<double> cache;
    Mat<double> xm = Mat<double>::Random(3, 2 * 64), xa = Mat<double>::Random(3, 2 * 64);
    net.forward(xm, xa, cache);
    for (const auto& sc : cache.samples)
        for (Eigen::Index i = 0; i < sc.q1.mask.cols(); ++i)
            EXPECT_NEAR(sc.q1.mask(0, i), 0.5, 1e-12);
}

TEST(Network, MasksSumToHalfArea)
{
    const auto m = CanModel<double>::init(tiny(), 4);
    CanNetwork<double> net(m);
    detail::Cache<double> cache;
    Mat<double> xm = Mat<double>::Random(3, 3 * 64), xa = Mat<double>::Random(3, 3 * 64);
    net.forward(xm, xa, cache);
    ASSERT_EQ(cache.samples.size(), 3u);
    for (const auto& sc : cache.samples) {
        EXPECT_NEAR(sc.q1.mask.sum(), 32.0, 1e-9);
        EXPECT_NEAR(sc.q2.mask.sum(), 8.0, 1e-9);
        EXPECT_GE(sc.q1.mask.minCoeff(), 0.0);
    }
}

TEST(Network, BatchPermutationPermutesOutputs)
{
    const auto m = CanModel<float>::init(CanConfig::desk(), 5);
    CanNetwork<float> net(m);
    detail::Cache<float> cache;
    const int n = 144, b = 5;
    Mat<float> xm = Mat<float>::Random(3, b * n), xa = Mat<float>::Random(3, b * n);
    const Mat<float> y = net.forward(xm, xa, cache);
    const int perm[b] = {3, 0, 4, 1, 2};
    Mat<float> pm(3, b * n), pa(3, b * n);
    for (int j = 0; j < b; ++j) {
        pm.middleCols(j * n, n) = xm.middleCols(perm[j] * n, n);
        pa.middleCols(j * n, n) = xa.middleCols(perm[j] * n, n);
    }
    const Mat<float> yp = net.forward(pm, pa, cache);
    for (int j = 0; j < b; ++j)
        EXPECT_EQ(yp(0, j), y(0, perm[j]));
}

TEST(Network, ShapeMismatchIsConfigError)
{
    const auto m = CanModel<double>::init(tiny(), 1);
    CanNetwork<double> net(m);
    detail::Cache<double> cache;
    EXPECT_THROW(net.forward(Mat<double>::Zero(3, 50), Mat<double>::Zero(3, 50), cache), ConfigError);
    auto bad = m;
    bad.weights.pop_back();
    EXPECT_THROW(CanNetwork<double>{bad}, ConfigError);
}

TEST(GradCheck, LinearModelIsExact)
{
    const auto cfg = tiny(Activation::identity);
    const auto m = CanModel<double>::init(cfg, 6);
    std::vector<TrainingClip> batch{training_clip(72, 0.2, 1, cfg, 30), training_clip(90, 0.2, 2, cfg, 10)};
    // the masks make the output quadratic in appearance weights, so the loss is
    // quartic in them and the five-point stencil is exact
    const auto rep = grad_check(m, batch, 1e-2, 200, 1, Stencil::central_fourth);
    EXPECT_LE(rep.max_relative_error, 1e-9);
}

TEST(GradCheck, FullModelAndCoverage)
{
    const auto cfg = tiny();
    const auto m = CanModel<double>::init(cfg, 7);
    std::vector<TrainingClip> batch{training_clip(72, 0.3, 3, cfg, 30), training_clip(110, 0.3, 4, cfg, 20)};
    const auto rep = grad_check(m, batch, 1e-5, 200, 2);
    EXPECT_LE(rep.max_relative_error, 1e-4);
    EXPECT_GE(rep.total_samples, 200u);
    ASSERT_EQ(rep.layers.size(), m.layout.size());
    for (std::size_t i = 0; i < rep.layers.size(); ++i)
        EXPECT_GE(rep.samples_per_layer[i], 1u) << rep.layers[i];
}

TEST(Train, ZeroLearningRateIsFlat)
{
    const auto cfg = tiny();
    const auto m = CanModel<float>::init(cfg, 8);
    std::vector<TrainingClip> tr{training_clip(72, 2, 5, cfg)}, va{training_clip(80, 2, 6, cfg)};
    TrainOptions opt;
    opt.epochs = 3;
    opt.learning_rate = 0;
    const auto [out, rep] = train(m, tr, va, opt);
    EXPECT_EQ(out.weights, m.weights);
    for (int e = 0; e < 3; ++e) {
        EXPECT_EQ(rep.train_mse[e], rep.initial_train_mse);
        EXPECT_EQ(rep.val_mse[e], rep.initial_val_mse);
    }
    EXPECT_EQ(rep.selected_epoch, 1);
}

TEST(Train, SameSeedIsBitIdentical)
{
    const auto cfg = tiny();
    std::vector<TrainingClip> tr{training_clip(72, 2, 5, cfg, 10)}, va{training_clip(80, 2, 6, cfg)};
    TrainOptions opt;
    opt.epochs = 3;
    opt.seed = 11;
    const auto a = train(CanModel<float>::init(cfg, 9), tr, va, opt);
    const auto b = train(CanModel<float>::init(cfg, 9), tr, va, opt);
    EXPECT_EQ(a.first.weights, b.first.weights);
    EXPECT_EQ(to_json(a.second).dump(), to_json(b.second).dump());
}

TEST(Train, SelectsBestValidationEpoch)
{
    const auto cfg = tiny();
    std::vector<TrainingClip> tr{training_clip(72, 3, 5, cfg)}, va{training_clip(75, 3, 6, cfg)};
    TrainOptions opt;
    opt.epochs = 8;
    opt.learning_rate = 0.01;
    const auto [m, rep] = train(CanModel<float>::init(cfg, 10), tr, va, opt);
    const auto best = std::min_element(rep.val_mse.begin(), rep.val_mse.end());
    EXPECT_EQ(rep.selected_epoch, 1 + (best - rep.val_mse.begin()));
    EXPECT_NEAR(mse(m, va, all_pairs(va)), *best, 1e-6);
}

TEST(Train, DivergenceNamesEpochAndBatch)
{
    const auto cfg = tiny();
    std::vector<TrainingClip> tr{training_clip(72, 2, 5, cfg)};
    TrainOptions opt;
    opt.epochs = 5;
    opt.learning_rate = 1e6;
    opt.momentum = 0.5;
    try {
        train(CanModel<float>::init(cfg, 1), tr, tr, opt);
        FAIL();
    } catch (const DivergenceError& e) {
        EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
    }
}

TEST(Train, OverfitsSingleShortClip)
{
    const auto cfg = CanConfig::desk();
    std::vector<TrainingClip> tr{training_clip(72, 2, 7, cfg)};
    TrainOptions opt;
    opt.epochs = 200;
    const auto [m, rep] = train(CanModel<float>::init(cfg, 2), tr, tr, opt);
    EXPECT_LT(rep.train_mse.back(), 0.1 * rep.initial_train_mse);
}

TEST(Predict, LengthMatchesFrames)
{
    const auto m = CanModel<float>::init(CanConfig::desk(), 3);
    const auto v = clip_video(72, 12, 3, 36);
    const auto e = predict_bvp(m, v);
    EXPECT_EQ(e.samples.size(), v.frames);
    EXPECT_EQ(e.method, "can");
}

TEST(Checkpoint, RoundTripAndErrors)
{
    const auto m = CanModel<float>::init(CanConfig::desk(), 4);
    const auto path = std::filesystem::temp_directory_path() / "pulseforge_test.canw";
    save_checkpoint(path, m);
    const auto back = load_checkpoint(path);
    EXPECT_EQ(back.config, m.config);
    EXPECT_EQ(back.weights, m.weights);
    auto bytes = encode_checkpoint(m);
    EXPECT_EQ(bytes.substr(0, 4), "CANW");
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 4), "x"), ParseError);
    bytes[1] = 'X';
    EXPECT_THROW(decode_checkpoint(bytes, "x"), ParseError);
    std::filesystem::remove(path);
}

TEST(Config, JsonRoundTripRejectsUnknownKeys)
{
    const auto c = CanConfig::desk();
    EXPECT_EQ(can_config_from_json(to_json(c)), c);
    EXPECT_THROW(can_config_from_json(json{{"input_size", 12}, {"depth", 3}}), ConfigError);
    EXPECT_THROW(can_config_from_json(json{{"input_size", 10}}), ConfigError);
}
