#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "pulseforge/eval.hpp"

using namespace pulseforge;
using drm::Fitzpatrick;

namespace {

eval::SweepConfig quick_sweep()
{
    eval::SweepConfig c;
    c.clips = 2;
    c.scene.clip_seconds = 20;
    return c;
}

} // namespace

// Synthesis -------------------------------------------------------------------

TEST(Apportion, DefaultDistributionIsExactForFifty)
{
    const auto counts = synth::apportion({9, 15, 12, 4, 5, 5}, 50);
    EXPECT_EQ(counts, (std::vector<int>{9, 15, 12, 4, 5, 5}));
    for (int total : {1, 7, 13, 100}) {
        const auto c = synth::apportion({9, 15, 12, 4, 5, 5}, total);
        int sum = 0;
        for (int v : c)
            sum += v;
        EXPECT_EQ(sum, total);
    }
}

TEST(PlanDataset, DefaultHasFourHundredFiftyClips)
{
    const synth::SceneConfig cfg;
    const auto clips = synth::plan_dataset(cfg, 7);
    ASSERT_EQ(clips.size(), 450u);
    std::map<double, int> per_velocity;
    std::map<Fitzpatrick, int> per_skin;
    std::set<std::string> names;
    for (const auto& c : clips) {
        ++per_velocity[c.velocity];
        if (c.clip == 0)
            ++per_skin[c.skin];
        names.insert(c.name());
    }
    EXPECT_EQ(names.size(), 450u);
    EXPECT_EQ(per_velocity[0], 150);
    EXPECT_EQ(per_velocity[10], 100);
    EXPECT_EQ(per_velocity[20], 100);
    EXPECT_EQ(per_velocity[30], 100);
    EXPECT_EQ(per_skin[Fitzpatrick::I], 9);
    EXPECT_EQ(per_skin[Fitzpatrick::II], 15);
    EXPECT_EQ(per_skin[Fitzpatrick::III], 12);
    EXPECT_EQ(per_skin[Fitzpatrick::IV], 4);
    EXPECT_EQ(per_skin[Fitzpatrick::V], 5);
    EXPECT_EQ(per_skin[Fitzpatrick::VI], 5);
    for (const auto& c : clips) {
        EXPECT_GE(c.hr_bpm, 48.0);
        EXPECT_LE(c.hr_bpm, 150.0);
    }
}

TEST(PlanDataset, SeededAndSeedSensitive)
{
    const synth::SceneConfig cfg;
    const auto a = synth::plan_dataset(cfg, 3), b = synth::plan_dataset(cfg, 3), c = synth::plan_dataset(cfg, 4);
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].hr_bpm, b[i].hr_bpm);
        EXPECT_EQ(a[i].noise_seed, b[i].noise_seed);
        EXPECT_EQ(a[i].skin, b[i].skin);
        differs |= a[i].hr_bpm != c[i].hr_bpm;
    }
    EXPECT_TRUE(differs);
}

TEST(SceneConfig, JsonRoundTripAndUnknownKey)
{
    synth::SceneConfig c;
    c.identities = 3;
    c.quantization_bits.reset();
    c.modulation.phi_pulse = 0.001;
    const auto back = synth::scene_from_json(synth::to_json(c));
    EXPECT_EQ(synth::to_json(back), synth::to_json(c));
    EXPECT_THROW(synth::scene_from_json(config::json{{"identites", 3}}), ConfigError);
    EXPECT_THROW(synth::scene_from_json(config::json{{"modulation", {{"phi", 1}}}}), ConfigError);
    EXPECT_THROW(synth::scene_from_json(config::json{{"identities", "three"}}), ConfigError);
    EXPECT_THROW(synth::scene_from_json(config::json{{"hr_min", 20}}), ConfigError);
}

TEST(RenderClip, SegmentsOfOneIdentityPulse)
{
    synth::SceneConfig cfg;
    cfg.identities = 2;
    cfg.clips_per_identity = 3;
    cfg.clip_velocities = {0, 10, 20};
    const auto ids = synth::plan_identities(cfg, 5);
    const auto clips = synth::plan_dataset(cfg, 5);
    const auto pulse = synth::identity_pulse(cfg, ids[1]);
    EXPECT_EQ(pulse.size(), 900u);
    const auto clip = synth::render_clip(cfg, clips[4], pulse);
    EXPECT_EQ(clip.video.frames, 300u);
    EXPECT_EQ(clip.roi_shift.size(), 300u);
    const auto seg = normalize(segment(pulse, 10, 10));
    EXPECT_EQ(clip.truth.samples, seg.samples);
    EXPECT_NEAR(clip.hr_reference, ids[1].hr_bpm, 1.0);
    EXPECT_EQ(clip.spec.velocity, 10.0);
    EXPECT_NO_THROW(clip.video.validate());
}

TEST(RenderClip, RecordingsDriveThePulse)
{
    const auto dir = std::filesystem::temp_directory_path() / "pulseforge_rec";
    std::filesystem::create_directories(dir);
    const auto rec = synth_pulse(66, 100, 125, 9);
    io::atomic_write(dir / "a.csv", ppg_csv(rec));
    io::atomic_write(dir / "short.csv", ppg_csv(synth_pulse(66, 20, 125, 9)));

    synth::SceneConfig cfg;
    cfg.identities = 1;
    cfg.recordings = {(dir / "a.csv").string()};
    const auto id = synth::plan_identities(cfg, 1).front();
    const auto w = synth::identity_pulse(cfg, id);
    EXPECT_EQ(w.sample_rate, 30.0);
    EXPECT_NEAR(w.duration(), 90.0, 1.0 / 30);
    EXPECT_FALSE(w.hr_reference.has_value());
    EXPECT_NEAR(dsp::estimate_hr(w.samples, 30), 66, 0.5);

    cfg.recordings = {(dir / "short.csv").string()};
    EXPECT_THROW(synth::identity_pulse(cfg, id), ConfigError);
    std::filesystem::remove_all(dir);
}

// Metrics ----------------------------------------------------------------------

TEST(Metrics, HandComputedCases)
{
    const std::vector<double> same{60, 72, 90};
    const auto perfect = eval::compute_metrics(same, same);
    EXPECT_EQ(perfect.mae, 0.0);
    EXPECT_EQ(perfect.rmse, 0.0);
    ASSERT_TRUE(perfect.pearson);
    EXPECT_EQ(*perfect.pearson, 1.0);

    const auto r = eval::compute_metrics(std::vector<double>{70, 75, 80}, std::vector<double>{72, 73, 82});
    EXPECT_EQ(r.mae, 2.0);
    EXPECT_EQ(r.rmse, 2.0);
    EXPECT_EQ(r.n_clips, 3u);

    const auto anti = eval::compute_metrics(std::vector<double>{80, 70, 60}, std::vector<double>{60, 70, 80});
    ASSERT_TRUE(anti.pearson);
    EXPECT_EQ(*anti.pearson, -1.0);
}

TEST(Metrics, UndefinedCorrelationAndErrors)
{
    const auto flat = eval::compute_metrics(std::vector<double>{70, 71, 72}, std::vector<double>{72, 72, 72});
    EXPECT_FALSE(flat.pearson.has_value());
    EXPECT_FALSE(eval::compute_metrics(std::vector<double>{70}, std::vector<double>{72}).pearson.has_value());
    EXPECT_THROW(eval::compute_metrics(std::vector<double>{70, 71}, std::vector<double>{72}), ConfigError);
    EXPECT_THROW(eval::compute_metrics(std::vector<double>{}, std::vector<double>{}), DomainError);
    const auto s = eval::compute_metrics(std::vector<double>{70, 71}, std::vector<double>{72, 72},
                                         std::vector<double>{3, 5});
    EXPECT_EQ(*s.snr_db, 4.0);
}

TEST(Metrics, RmseAtLeastMae)
{
    auto rng = make_rng(17);
    std::normal_distribution<double> g(0, 5);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> e, ref;
        for (int i = 0; i < 2 + trial % 9; ++i) {
            ref.push_back(60 + 40 * uniform01(rng));
            e.push_back(ref.back() + g(rng));
        }
        const auto m = eval::compute_metrics(e, ref);
        EXPECT_GE(m.rmse, m.mae);
        EXPECT_GE(m.mae, 0.0);
        if (m.pearson) {
            EXPECT_LE(std::abs(*m.pearson), 1.0);
        }
    }
}

// Folds --------------------------------------------------------------------------

TEST(Folds, EachIdentityTestedOnce)
{
    std::vector<int> ids(25);
    for (int i = 0; i < 25; ++i)
        ids[i] = 100 + i;
    const auto plan = eval::make_folds(ids, 5, {15, 5, 5}, 3);
    ASSERT_EQ(plan.folds.size(), 5u);
    std::map<int, int> tested;
    for (const auto& f : plan.folds) {
        EXPECT_EQ(f.train.size(), 15u);
        EXPECT_EQ(f.validation.size(), 5u);
        EXPECT_EQ(f.test.size(), 5u);
        std::set<int> all;
        for (const auto* part : {&f.train, &f.validation, &f.test})
            all.insert(part->begin(), part->end());
        EXPECT_EQ(all.size(), 25u); // disjoint and complete
        for (int id : f.test)
            ++tested[id];
    }
    EXPECT_EQ(tested.size(), 25u);
    for (const auto& [id, n] : tested)
        EXPECT_EQ(n, 1) << id;

    const auto again = eval::make_folds(ids, 5, {15, 5, 5}, 3);
    for (std::size_t f = 0; f < 5; ++f) {
        EXPECT_EQ(plan.folds[f].train, again.folds[f].train);
        EXPECT_EQ(plan.folds[f].test, again.folds[f].test);
    }
}

TEST(Folds, SizeMismatchRejected)
{
    std::vector<int> ids(25);
    for (int i = 0; i < 25; ++i)
        ids[i] = i;
    EXPECT_THROW(eval::make_folds(ids, 5, {15, 5, 4}, 1), ConfigError);
    EXPECT_THROW(eval::make_folds(ids, 4, {15, 5, 5}, 1), ConfigError);
    ids[3] = 4;
    EXPECT_THROW(eval::make_folds(ids, 5, {15, 5, 5}, 1), ConfigError);
}

// Sweep --------------------------------------------------------------------------

TEST(TrackedAverage, FollowsShiftedPatch)
{
    const auto spec = drm::PatchSpec::make_default(16);
    const auto pulse = synth_pulse(70, 4, 30, 1);
    auto motion = drm::make_motion(30, 4, 30, 30, 16);
    const auto model = drm::default_skin_model();
    const auto moving = drm::render_patch_video(spec, model, {}, pulse, motion, {});
    const auto still = drm::render_patch_video(spec, model, {}, pulse, drm::still_motion(pulse.size(), 30), {});
    const auto a = recovery::tracked_average(moving, spec.skin_mask, motion.pixel_shift);
    // same skin pixels, those that never leave the frame, averaged without tracking
    const auto [lo, hi] = std::minmax_element(motion.pixel_shift.begin(), motion.pixel_shift.end());
    auto kept = spec.skin_mask;
    for (std::size_t i = 0; i < kept.size(); ++i) {
        const int x = static_cast<int>(i % 16);
        if (x + *lo < 0 || x + *hi >= 16)
            kept[i] = 0;
    }
    const auto b = recovery::spatial_average(still, kept);
    for (std::size_t t = 0; t < a.size(); ++t)
        EXPECT_LT((a.rgb[t] - b.rgb[t]).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_THROW(recovery::tracked_average(moving, spec.skin_mask, {0, 1}), ConfigError);
}

TEST(Sweep, SingleCellMeetsOracle)
{
    eval::SweepConfig c;
    c.methods = {"pos"};
    c.velocities = {0};
    const auto rows = eval::run_sweep(c);
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_EQ(rows[0].n_clips, 10u);
    EXPECT_LE(rows[0].mae, 1.0);
    EXPECT_EQ(rows[0].method, "pos");
    EXPECT_EQ(*rows[0].skin, Fitzpatrick::I);
}

TEST(Sweep, GridShapeAndOrder)
{
    const auto c = quick_sweep();
    const auto rows = eval::run_sweep(c);
    ASSERT_EQ(rows.size(), 12u);
    const auto csv = eval::metrics_csv(rows);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 13);
    EXPECT_TRUE(csv.starts_with(std::string(eval::kMetricsCsvHeader) + "\npos,0,I,1,2,"));
    EXPECT_EQ(rows[4].method, "chrom");
    EXPECT_EQ(*rows[5].velocity, 10.0);
    const auto j = eval::sweep_json(rows);
    EXPECT_TRUE(j["ica"]["30"]["I"]["1"].contains("mae_bpm"));
}

TEST(Sweep, DeterministicAcrossJobCounts)
{
    auto c = quick_sweep();
    c.velocities = {0, 20};
    c.scene.noise_sigma = 0.002;
    c.scene.quantization_bits = 8;
    const auto a = eval::metrics_csv(eval::run_sweep(c, 1));
    const auto b = eval::metrics_csv(eval::run_sweep(c, 3));
    EXPECT_EQ(a, b);
}

TEST(Sweep, CommonRandomNumbersAcrossCells)
{
    // cells differing only in method see identical clips and references
    auto c = quick_sweep();
    c.velocities = {0};
    c.methods = {"pos"};
    const auto alone = eval::run_sweep(c);
    c.methods = {"ica", "pos"};
    const auto both = eval::run_sweep(c);
    EXPECT_EQ(eval::metrics_csv_row(alone[0]), eval::metrics_csv_row(both[1]));
}

TEST(Sweep, ConfigErrors)
{
    auto c = quick_sweep();
    c.methods = {"pos", "green"};
    try {
        eval::run_sweep(c);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("pos, chrom, ica, can"), std::string::npos);
    }
    c.methods = {"can"};
    EXPECT_THROW(eval::run_sweep(c), ConfigError);
    EXPECT_THROW(eval::sweep_from_json(config::json{{"method", {"pos"}}}), ConfigError);
    const auto parsed = eval::sweep_from_json(config::json{{"skin_types", {"II", 6}}, {"scene", {{"clip_seconds", 30}}}});
    EXPECT_EQ(parsed.skin_types, (std::vector<Fitzpatrick>{Fitzpatrick::II, Fitzpatrick::VI}));
    EXPECT_EQ(parsed.scene.clip_seconds, 30.0);
    EXPECT_FALSE(parsed.scene.quantization_bits.has_value());
}

// Cross-condition ----------------------------------------------------------------

TEST(CrossCondition, EmptyConditionSetRejected)
{
    const eval::CrossConditionConfig cfg;
    EXPECT_THROW(eval::cross_condition_experiment({}, {10}, cfg), ConfigError);
    EXPECT_THROW(eval::cross_condition_experiment({0}, {}, cfg), ConfigError);
    EXPECT_THROW(eval::cross_condition_experiment({0}, {45}, cfg), ConfigError);
}

TEST(CrossCondition, SmallRunIsIdentityDisjoint)
{
    eval::CrossConditionConfig cfg;
    cfg.scene.identities = 6;
    cfg.scene.clips_per_identity = 4;
    cfg.scene.clip_velocities = {0, 0, 30, 30};
    cfg.scene.clip_seconds = 10;
    cfg.split = {2, 2, 2};
    cfg.training.epochs = 2;
    cfg.training.pairs_per_epoch = 64;
    cfg.training.eval_pairs = 64;
    const auto r = eval::cross_condition_experiment({0}, {30}, cfg);
    std::set<int> seen;
    for (const auto* part : {&r.split.train, &r.split.validation, &r.split.test})
        for (int id : *part)
            EXPECT_TRUE(seen.insert(id).second);
    EXPECT_EQ(seen.size(), 6u);
    EXPECT_EQ(r.baseline.n_clips, 4u); // 2 test identities x 2 motion clips
    EXPECT_EQ(r.augmented.n_clips, 4u);
    EXPECT_EQ(r.baseline.method, "can[0]");
    EXPECT_EQ(r.augmented.method, "can[0,30]");
    EXPECT_EQ(r.baseline_report.val_mse.size(), 2u);
    const auto again = eval::cross_condition_experiment({0}, {30}, cfg);
    EXPECT_EQ(eval::metrics_csv_row(r.augmented), eval::metrics_csv_row(again.augmented));
}
