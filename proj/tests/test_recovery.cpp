#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "oracles.hpp"
#include "pulseforge/recovery.hpp"

using namespace pulseforge;
using drm::Rgb;
using recovery::RoiTrace;

namespace {

RoiTrace drm_trace(double hr, double seconds, std::uint64_t seed, const drm::ModulationModel& mod = {},
                   double velocity = 0, bool exact = true)
{
    const auto pulse = synth_pulse(hr, seconds, 30, seed);
    const auto motion = drm::make_motion(velocity, seconds, 30);
    const auto tr = drm::pixel_trace(drm::default_skin_model(), mod, pulse, motion, {}, exact);
    return {tr.values, 30};
}

RoiTrace scaled(const RoiTrace& t, double g)
{
    RoiTrace out = t;
    for (auto& v : out.rgb)
        v *= g;
    return out;
}

std::vector<double> bandpassed(const std::vector<double>& x)
{
    return dsp::filtfilt(dsp::pulse_band_filter(30), x);
}

} // namespace

TEST(SpatialAverage, UniformAndSinglePixel)
{
    drm::VideoTensor v(3, 2, 2, 30);
    for (std::size_t i = 0; i < v.data.size(); ++i)
        v.data[i] = 0.25f;
    v.at(1, 1, 0, 2) = 0.75f;
    const auto all = recovery::spatial_average(v, recovery::full_mask(v));
    EXPECT_DOUBLE_EQ(all.rgb[0][1], 0.25);
    EXPECT_DOUBLE_EQ(all.rgb[1][2], (0.25 * 3 + 0.75) / 4);
    const auto one = recovery::spatial_average(v, {0, 0, 1, 0});
    EXPECT_DOUBLE_EQ(one.rgb[1][2], 0.75);
    EXPECT_DOUBLE_EQ(one.rgb[0][2], 0.25);
    EXPECT_THROW(recovery::spatial_average(v, {0, 0, 0, 0}), DomainError);
    EXPECT_THROW(recovery::spatial_average(v, {1, 1}), ConfigError);
}

TEST(SpatialAverage, NoiseFreeRenderMatchesAnalyticTrace)
{
    const auto spec = drm::PatchSpec::make_default();
    const auto model = drm::default_skin_model();
    const auto pulse = synth_pulse(80, 10, 30, 6);
    const auto still = drm::still_motion(pulse.size(), 30);
    const auto video = drm::render_patch_video(spec, model, {}, pulse, still, {});
    const auto roi = recovery::spatial_average(video, spec.skin_mask);

    double perf = 0;
    int n = 0;
    for (std::size_t i = 0; i < spec.pixels(); ++i)
        if (spec.skin_mask[i]) {
            perf += spec.perfusion[i];
            ++n;
        }
    auto weighted = model;
    weighted.pulse_amplitude *= perf / n;
    const auto ref = drm::pixel_trace(weighted, {}, pulse, still, {}, true);
    for (std::size_t t = 0; t < roi.size(); ++t)
        EXPECT_LT((roi.rgb[t] - ref.values[t]).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(RoiTrace, NeedsTwoSeconds)
{
    RoiTrace t{std::vector<Rgb>(59, Rgb::Ones()), 30};
    EXPECT_THROW(recovery::pos(t), DomainError);
    t.rgb.resize(60, Rgb::Ones());
    EXPECT_NO_THROW(recovery::pos(t));
    t.rgb[3][0] = std::nan("");
    EXPECT_THROW(recovery::chrom(t), DomainError);
}

TEST(Pos, ConstantTraceGivesZero)
{
    const RoiTrace t{std::vector<Rgb>(300, Rgb(0.5, 0.4, 0.3)), 30};
    for (const auto& e : {recovery::pos(t), recovery::chrom(t)}) {
        ASSERT_EQ(e.samples.size(), 300u);
        for (double v : e.samples)
            EXPECT_NEAR(v, 0.0, 1e-12);
    }
    EXPECT_THROW(recovery::ica(t, 1), DegenerateInputError);
}

TEST(Methods, NoiseFreeHeartRate)
{
    const auto tr = drm_trace(72, 60, 11);
    EXPECT_NEAR(dsp::estimate_hr(recovery::pos(tr).samples, 30), 72, 1.0);
    EXPECT_NEAR(dsp::estimate_hr(recovery::chrom(tr).samples, 30), 72, 1.0);
    EXPECT_NEAR(dsp::estimate_hr(recovery::ica(tr, 3).samples, 30), 72, 2.0);
}

TEST(Pos, CancelsIntensityModulation)
{
    // psi-only coupling to a 0.25 Hz triangular motion
    const auto tr = drm_trace(72, 60, 12, {0, 0, 0.02, 0}, 30);
    EXPECT_NEAR(dsp::estimate_hr(recovery::pos(tr).samples, 30), 72, 1.0);
}

TEST(Methods, GlobalGainInvariance)
{
    const auto tr = drm_trace(95, 30, 13, {0.002, 0, 0.01, 0}, 20);
    const auto big = scaled(tr, 2.0);
    for (const auto& name : recovery::classical_methods()) {
        const auto a = recovery::recover(name, tr, 4);
        const auto b = recovery::recover(name, big, 4);
        ASSERT_EQ(a.samples.size(), tr.size()) << name;
        ASSERT_EQ(b.samples.size(), tr.size()) << name;
        EXPECT_NEAR(dsp::estimate_hr(a.samples, 30), dsp::estimate_hr(b.samples, 30), 1e-6) << name;
        // equal up to a positive scale
        EXPECT_GT(oracle::pearson(a.samples, b.samples), 0.999999) << name;
    }
}

TEST(Methods, Deterministic)
{
    const auto tr = drm_trace(70, 20, 14, {0.002, 0, 0.01, 0}, 10);
    EXPECT_EQ(recovery::pos(tr).samples, recovery::pos(tr).samples);
    EXPECT_EQ(recovery::chrom(tr).samples, recovery::chrom(tr).samples);
    EXPECT_EQ(recovery::ica(tr, 9).samples, recovery::ica(tr, 9).samples);
}

TEST(Methods, CorrelateWithTruePulseOnLinearizedTrace)
{
    const double seconds = 30;
    const auto pulse = synth_pulse(84, seconds, 30, 15);
    const auto tr = drm_trace(84, seconds, 15, {}, 0, false);
    const auto ref = bandpassed(pulse.samples);
    for (const auto& name : recovery::classical_methods()) {
        const auto e = recovery::recover(name, tr, 1);
        EXPECT_GE(std::abs(oracle::pearson(e.samples, ref)), 0.9) << name;
    }
}

TEST(Methods, UnknownNameListsValid)
{
    try {
        recovery::recover("pca", drm_trace(72, 10, 1));
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("pos, chrom, ica"), std::string::npos);
    }
}

TEST(Chrom, ShortWindowAtLowRateRejected)
{
    RoiTrace t{std::vector<Rgb>(200, Rgb(0.5, 0.4, 0.3)), 10};
    EXPECT_THROW(recovery::chrom(t), DomainError);
}

TEST(Ica, IdentityMixingRecoversSources)
{
    const double fs = 30;
    // incommensurate frequencies; harmonically related sinusoids are not independent
    const auto s1 = oracle::sinusoid(0.93, 30, fs);
    const auto s2 = oracle::sinusoid(1.41, 30, fs, 1.0, 0.3);
    const auto s3 = oracle::sinusoid(2.27, 30, fs, 1.0, 1.1);
    RoiTrace t;
    t.sample_rate = fs;
    for (std::size_t i = 0; i < s1.size(); ++i)
        t.rgb.emplace_back(s1[i], s2[i], s3[i]);
    const auto res = recovery::ica_components(t, 21);
    ASSERT_EQ(res.components.rows(), 3);
    EXPECT_TRUE(res.converged);
    for (const auto* src : {&s1, &s2, &s3}) {
        double best = 0;
        for (int r = 0; r < 3; ++r)
            best = std::max(best, std::abs(oracle::pearson(recovery::detail::row(res.components, r), *src)));
        EXPECT_GE(best, 0.999);
    }
}

TEST(Ica, SelectsPulseFromRandomMixture)
{
    const double fs = 30, seconds = 30;
    const auto pulse = synth_pulse(72, seconds, fs, 2).samples;
    const auto drift = oracle::sinusoid(0.3, seconds, fs, 1.0, 0.4);
    auto rng = make_rng(99);
    std::normal_distribution<double> g(0, 1);
    Eigen::Matrix3d a;
    a << 0.9, 0.4, 0.3, 0.5, 1.1, 0.2, 0.3, 0.6, 0.8;
    RoiTrace t;
    t.sample_rate = fs;
    for (std::size_t i = 0; i < pulse.size(); ++i)
        t.rgb.push_back(a * Eigen::Vector3d(pulse[i], drift[i], g(rng)));
    const auto e = recovery::ica(t, 5);
    EXPECT_GE(std::abs(oracle::pearson(e.samples, bandpassed(pulse))), 0.95);
}

TEST(Ica, IterationCapClearsConvergedFlag)
{
    const auto tr = drm_trace(72, 20, 3, {0.005, 0, 0.02, 0}, 30);
    RoiTrace noisy = tr;
    auto rng = make_rng(4);
    std::normal_distribution<double> g(0, 1e-3);
    for (auto& v : noisy.rgb)
        v += Rgb(g(rng), g(rng), g(rng));
    recovery::IcaOptions opt;
    opt.max_iterations = 1;
    opt.tolerance = 0;
    const auto e = recovery::ica(noisy, 1, opt);
    EXPECT_FALSE(e.converged);
    EXPECT_EQ(e.samples.size(), tr.size());
}

TEST(BvpCsv, RoundTrip)
{
    const auto e = recovery::pos(drm_trace(72, 10, 1));
    const auto path = std::filesystem::temp_directory_path() / "pulseforge_bvp.csv";
    const auto text = recovery::bvp_csv(e);
    EXPECT_TRUE(text.starts_with("# method=pos\nt_s,amplitude\n"));
    io::atomic_write(path, text);
    const auto back = recovery::load_bvp_csv(path);
    EXPECT_EQ(back.method, "pos");
    EXPECT_EQ(back.samples, e.samples);
    EXPECT_NEAR(back.sample_rate, 30.0, 1e-9);
    std::filesystem::remove(path);
    EXPECT_TRUE(recovery::roi_trace_csv(drm_trace(72, 10, 1)).starts_with("t_s,r,g,b\n0,"));
}
