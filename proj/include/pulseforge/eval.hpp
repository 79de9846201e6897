#pragma once

// Heart-rate metrics, identity fold plans, factorial sweeps and the
// cross-condition training experiment.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pulseforge/config.hpp"
#include "pulseforge/drm.hpp"
#include "pulseforge/dsp.hpp"
#include "pulseforge/error.hpp"
#include "pulseforge/io_util.hpp"
#include "pulseforge/neural.hpp"
#include "pulseforge/parallel.hpp"
#include "pulseforge/random.hpp"
#include "pulseforge/recovery.hpp"
#include "pulseforge/synthesis.hpp"

namespace pulseforge::eval {

using config::json;

// Metrics --------------------------------------------------------------------------

struct MetricsReport {
    std::string method;
    std::optional<double> velocity; // deg/s; empty when the row mixes velocities
    std::optional<drm::Fitzpatrick> skin;
    std::optional<std::uint64_t> seed;
    std::size_t n_clips = 0;
    double mae = 0, rmse = 0;
    std::optional<double> pearson; // empty when undefined (n < 2 or zero variance)
    std::optional<double> snr_db;  // empty when no SNR values were given
};

inline std::optional<double> pearson(std::span<const double> a, std::span<const double> b)
{
    const std::size_t n = a.size();
    if (n < 2 || b.size() != n)
        return std::nullopt;
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (!(saa > 0.0) || !(sbb > 0.0))
        return std::nullopt;
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// MAE and RMSE of HR estimates, Pearson over the per-clip pairs, mean SNR.
inline MetricsReport compute_metrics(std::span<const double> estimated_hr, std::span<const double> reference_hr,
                                     std::span<const double> snr_db = {})
{
    if (estimated_hr.size() != reference_hr.size())
        throw ConfigError("compute_metrics: " + std::to_string(estimated_hr.size()) + " estimates vs " +
                          std::to_string(reference_hr.size()) + " references");
    if (estimated_hr.empty())
        throw DomainError("compute_metrics: no clips");
    if (!snr_db.empty() && snr_db.size() != estimated_hr.size())
        throw ConfigError("compute_metrics: SNR list length differs from clip count");
    MetricsReport r;
    r.n_clips = estimated_hr.size();
    double abs_sum = 0, sq_sum = 0;
    for (std::size_t i = 0; i < r.n_clips; ++i) {
        const double e = estimated_hr[i] - reference_hr[i];
        abs_sum += std::abs(e);
        sq_sum += e * e;
    }
    const auto n = static_cast<double>(r.n_clips);
    r.mae = abs_sum / n;
    r.rmse = std::sqrt(sq_sum / n);
    r.pearson = pearson(estimated_hr, reference_hr);
    if (!snr_db.empty()) {
        double s = 0;
        for (double v : snr_db)
            s += v;
        r.snr_db = s / n;
    }
    return r;
}

// Folds --------------------------------------------------------------------------------

struct Fold {
    std::vector<int> train, validation, test;
};

struct FoldPlan {
    int k = 0;
    std::vector<Fold> folds;
};

/// Seeded shuffle, then fold f tests block f; validation takes the next
/// block after it (wrapping) and training gets the rest.
inline FoldPlan make_folds(std::vector<int> identities, int k, std::array<int, 3> sizes, std::uint64_t seed)
{
    const int n = static_cast<int>(identities.size());
    if (k < 1)
        throw ConfigError("make_folds: k must be >= 1");
    if (sizes[0] < 0 || sizes[1] < 0 || sizes[2] < 1)
        throw ConfigError("make_folds: split sizes must be non-negative with a non-empty test set");
    if (sizes[0] + sizes[1] + sizes[2] != n)
        throw ConfigError("make_folds: sizes " + std::to_string(sizes[0]) + "+" + std::to_string(sizes[1]) + "+" +
                          std::to_string(sizes[2]) + " do not sum to " + std::to_string(n) + " identities");
    if (k * sizes[2] != n)
        throw ConfigError("make_folds: k * test size must equal the identity count so each identity is tested once");
    if (std::set<int>(identities.begin(), identities.end()).size() != identities.size())
        throw ConfigError("make_folds: duplicate identity");

    auto rng = make_rng(seed, {0x666f6c64});
    neural::shuffle_portable(identities, rng);
    FoldPlan plan;
    plan.k = k;
    for (int f = 0; f < k; ++f) {
        Fold fold;
        const int start = f * sizes[2];
        for (int i = 0; i < n; ++i) {
            const int id = identities[static_cast<std::size_t>((start + i) % n)];
            if (i < sizes[2])
                fold.test.push_back(id);
            else if (i < sizes[2] + sizes[1])
                fold.validation.push_back(id);
            else
                fold.train.push_back(id);
        }
        plan.folds.push_back(std::move(fold));
    }
    return plan;
}

// Sweep ----------------------------------------------------------------------------------

inline const std::vector<std::string>& sweep_methods()
{
    static const std::vector<std::string> names{"pos", "chrom", "ica", "can"};
    return names;
}

/// Sweep clips: 60 s, noise-free.
inline synth::SceneConfig default_sweep_scene()
{
    synth::SceneConfig s;
    s.clip_seconds = 60.0;
    s.quantization_bits.reset();
    s.noise_sigma = 0.0;
    return s;
}

struct SweepConfig {
    std::vector<std::string> methods{"pos", "chrom", "ica"};
    std::vector<double> velocities{0, 10, 20, 30};
    std::vector<drm::Fitzpatrick> skin_types{drm::Fitzpatrick::I};
    int clips = 10; // per cell
    std::vector<std::uint64_t> seeds{1};
    synth::SceneConfig scene = default_sweep_scene();
    std::string model_path; // checkpoint for the can method

    void validate() const
    {
        if (methods.empty() || velocities.empty() || skin_types.empty() || seeds.empty())
            throw ConfigError("sweep: methods, velocities, skin_types and seeds must be non-empty");
        for (const auto& m : methods)
            if (std::find(sweep_methods().begin(), sweep_methods().end(), m) == sweep_methods().end())
                throw ConfigError("sweep: unknown method '" + m + "' (valid: pos, chrom, ica, can)");
        for (double v : velocities)
            if (!(v >= 0.0))
                throw ConfigError("sweep: velocities must be >= 0");
        if (clips < 1)
            throw ConfigError("sweep: clips must be >= 1");
        if (std::find(methods.begin(), methods.end(), "can") != methods.end() && model_path.empty())
            throw ConfigError("sweep: method 'can' needs model_path");
        scene.validate();
    }
};

inline SweepConfig sweep_from_json(const json& j)
{
    constexpr std::string_view what = "sweep";
    config::check_keys(j, {"methods", "velocities", "skin_types", "clips", "seeds", "scene", "model_path"}, what);
    SweepConfig c;
    config::read(j, "methods", c.methods, what);
    config::read(j, "velocities", c.velocities, what);
    config::read(j, "clips", c.clips, what);
    config::read(j, "seeds", c.seeds, what);
    config::read(j, "model_path", c.model_path, what);
    if (j.contains("skin_types")) {
        if (!j.at("skin_types").is_array())
            throw ConfigError("sweep.skin_types: expected an array");
        c.skin_types.clear();
        for (const auto& s : j.at("skin_types"))
            c.skin_types.push_back(synth::detail::fitzpatrick_from_json(s));
    }
    if (j.contains("scene"))
        c.scene = synth::scene_from_json(j.at("scene"), default_sweep_scene());
    c.validate();
    return c;
}

inline json to_json(const SweepConfig& c)
{
    json skins = json::array();
    for (auto s : c.skin_types)
        skins.push_back(drm::to_string(s));
    return json{{"methods", c.methods},   {"velocities", c.velocities}, {"skin_types", skins},
                {"clips", c.clips},       {"seeds", c.seeds},           {"scene", synth::to_json(c.scene)},
                {"model_path", c.model_path}};
}

struct ClipResult {
    double hr_estimate = 0, hr_reference = 0, snr_db = 0;
};

/// Recovers one rendered clip with the named method.
inline recovery::BvpEstimate recover_clip(const std::string& method, const synth::RenderedClip& clip,
                                          std::uint64_t seed, const neural::CanModel<float>* model)
{
    if (method == "can") {
        if (!model)
            throw ConfigError("method 'can' needs a trained model");
        return neural::predict_bvp(*model, clip.video);
    }
    const auto roi = recovery::tracked_average(clip.video, clip.skin_mask, clip.roi_shift);
    return recovery::recover(method, roi, seed);
}

inline ClipResult score_estimate(const recovery::BvpEstimate& e, double hr_reference)
{
    ClipResult r;
    r.hr_reference = hr_reference;
    r.hr_estimate = dsp::estimate_hr(e.samples, e.sample_rate);
    r.snr_db = dsp::snr_bvp(e.samples, e.sample_rate, hr_reference);
    return r;
}

/// Full factorial grid method x velocity x skin type x seed, one row per
/// cell in that order. Clip k of a seed has the same pulse, illumination,
/// background and noise stream in every cell.
inline std::vector<MetricsReport> run_sweep(const SweepConfig& cfg, unsigned jobs = 1)
{
    cfg.validate();
    std::optional<neural::CanModel<float>> model;
    if (!cfg.model_path.empty() &&
        std::find(cfg.methods.begin(), cfg.methods.end(), "can") != cfg.methods.end())
        model = neural::load_checkpoint(cfg.model_path);

    auto scene = cfg.scene;
    scene.identities = cfg.clips;
    scene.clips_per_identity = 1;

    const std::size_t nv = cfg.velocities.size(), ns = cfg.skin_types.size(), nd = cfg.seeds.size();
    const std::size_t nm = cfg.methods.size(), nc = static_cast<std::size_t>(cfg.clips);
    std::vector<std::vector<synth::IdentitySpec>> ids(nd);
    std::vector<std::vector<synth::ClipSpec>> plans(nd);
    for (std::size_t d = 0; d < nd; ++d) {
        ids[d] = synth::plan_identities(scene, cfg.seeds[d]);
        plans[d] = synth::plan_dataset(scene, cfg.seeds[d]);
    }

    // results[((v * ns + s) * nd + d) * nc + c][m]
    std::vector<std::vector<ClipResult>> results(nv * ns * nd * nc, std::vector<ClipResult>(nm));
    parallel_for(results.size(), jobs, [&](std::size_t u) {
        const std::size_t c = u % nc, d = (u / nc) % nd, s = (u / nc / nd) % ns, v = u / nc / nd / ns;
        auto spec = plans[d][c];
        spec.velocity = cfg.velocities[v];
        spec.skin = cfg.skin_types[s];
        auto sc = scene;
        sc.clip_velocities = {spec.velocity};
        const auto pulse = synth::identity_pulse(sc, ids[d][c]);
        const auto clip = synth::render_clip(sc, spec, pulse);
        for (std::size_t m = 0; m < nm; ++m) {
            const auto est = recover_clip(cfg.methods[m], clip, derive_seed(cfg.seeds[d], {c}),
                                          model ? &*model : nullptr);
            results[u][m] = score_estimate(est, clip.hr_reference);
        }
    });

    std::vector<MetricsReport> rows;
    for (std::size_t m = 0; m < nm; ++m)
        for (std::size_t v = 0; v < nv; ++v)
            for (std::size_t s = 0; s < ns; ++s)
                for (std::size_t d = 0; d < nd; ++d) {
                    std::vector<double> est, ref, snr;
                    for (std::size_t c = 0; c < nc; ++c) {
                        const auto& r = results[((v * ns + s) * nd + d) * nc + c][m];
                        est.push_back(r.hr_estimate);
                        ref.push_back(r.hr_reference);
                        snr.push_back(r.snr_db);
                    }
                    auto row = compute_metrics(est, ref, snr);
                    row.method = cfg.methods[m];
                    row.velocity = cfg.velocities[v];
                    row.skin = cfg.skin_types[s];
                    row.seed = cfg.seeds[d];
                    rows.push_back(std::move(row));
                }
    return rows;
}

namespace detail {

inline std::string opt_field(const std::optional<double>& v) { return v ? io::fmt(*v) : "NA"; }

inline json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

} // namespace detail

inline constexpr std::string_view kMetricsCsvHeader = "method,velocity_deg_s,skin_type,seed,n_clips,mae_bpm,rmse_bpm,pearson,snr_db";

inline std::string metrics_csv_row(const MetricsReport& r)
{
    std::string s = r.method;
    s += ',' + detail::opt_field(r.velocity);
    s += ',' + std::string(r.skin ? drm::to_string(*r.skin) : "NA");
    s += ',' + (r.seed ? std::to_string(*r.seed) : std::string("NA"));
    s += ',' + std::to_string(r.n_clips);
    s += ',' + io::fmt(r.mae);
    s += ',' + io::fmt(r.rmse);
    s += ',' + detail::opt_field(r.pearson);
    s += ',' + detail::opt_field(r.snr_db);
    return s;
}

inline std::string metrics_csv(const std::vector<MetricsReport>& rows)
{
    std::string out(kMetricsCsvHeader);
    out += '\n';
    for (const auto& r : rows)
        out += metrics_csv_row(r) + '\n';
    return out;
}

inline json metrics_json(const MetricsReport& r)
{
    return json{{"n_clips", r.n_clips},
                {"mae_bpm", r.mae},
                {"rmse_bpm", r.rmse},
                {"pearson", detail::opt_json(r.pearson)},
                {"snr_db", detail::opt_json(r.snr_db)}};
}

/// method -> velocity -> skin type -> seed -> metrics
inline json sweep_json(const std::vector<MetricsReport>& rows)
{
    json out = json::object();
    for (const auto& r : rows) {
        const std::string v = detail::opt_field(r.velocity);
        const std::string s = r.skin ? drm::to_string(*r.skin) : "NA";
        const std::string d = r.seed ? std::to_string(*r.seed) : "NA";
        out[r.method][v][s][d] = metrics_json(r);
    }
    return out;
}

// Cross-condition experiment -----------------------------------------------------------


inline neural::TrainOptions default_experiment_training()
{
    neural::TrainOptions t;
    t.epochs = 12;
    t.learning_rate = 1e-3;
    t.pairs_per_epoch = 2048;
    t.eval_pairs = 2048;
    return t;
}

struct CrossConditionConfig {
    synth::SceneConfig scene;
    std::array<int, 3> split{40, 5, 5}; // identities: train, validation, test
    neural::CanConfig network = neural::CanConfig::desk();
    neural::TrainOptions training = default_experiment_training();
    std::uint64_t seed = 1;
};

struct CrossConditionResult {
    Fold split;
    MetricsReport baseline;  // trained on the training conditions only
    MetricsReport augmented; // training conditions plus the test conditions
    neural::TrainReport baseline_report, augmented_report;
};

namespace detail {

inline bool contains(const std::vector<double>& set, double v)
{
    return std::find(set.begin(), set.end(), v) != set.end();
}

inline std::string condition_label(std::vector<double> set)
{
    std::sort(set.begin(), set.end());
    std::string s = "can[";
    for (std::size_t i = 0; i < set.size(); ++i)
        s += (i ? "," : "") + io::fmt(set[i]);
    return s + "]";
}

} // namespace detail

/// Trains one CAN on clips whose velocity is in `train_conditions` and one on
/// `train_conditions` plus `test_conditions`, both from the same identities
/// and initial weights, then scores both on held-out identities' clips whose
/// velocity is in `test_conditions`.
inline CrossConditionResult cross_condition_experiment(const std::vector<double>& train_conditions,
                                                       const std::vector<double>& test_conditions,
                                                       const CrossConditionConfig& cfg, unsigned jobs = 1)
{
    if (train_conditions.empty() || test_conditions.empty())
        throw ConfigError("cross_condition_experiment: condition sets must be non-empty");
    cfg.scene.validate();
    cfg.network.validate();
    cfg.training.validate();
    if (cfg.scene.patch_size % cfg.network.input_size != 0)
        throw ConfigError("cross_condition_experiment: patch_size must be a multiple of the network input size");
    for (double v : train_conditions)
        if (!detail::contains(cfg.scene.clip_velocities, v))
            throw ConfigError("cross_condition_experiment: scene has no clips at " + io::fmt(v) + " deg/s");
    for (double v : test_conditions)
        if (!detail::contains(cfg.scene.clip_velocities, v))
            throw ConfigError("cross_condition_experiment: scene has no clips at " + io::fmt(v) + " deg/s");

    std::vector<int> all(static_cast<std::size_t>(cfg.scene.identities));
    for (int i = 0; i < cfg.scene.identities; ++i)
        all[static_cast<std::size_t>(i)] = i;
    const int test_n = cfg.split[2];
    if (test_n < 1 || cfg.scene.identities % test_n != 0)
        throw ConfigError("cross_condition_experiment: identity count must be a multiple of the test size");
    const auto plan = make_folds(all, cfg.scene.identities / test_n, cfg.split, cfg.seed);
    CrossConditionResult res;
    res.split = plan.folds.front();
    {
        std::set<int> seen;
        for (const auto* part : {&res.split.train, &res.split.validation, &res.split.test})
            for (int id : *part)
                if (!seen.insert(id).second)
                    throw Error("cross_condition_experiment: identity " + std::to_string(id) + " in two partitions");
    }

    const auto ids = synth::plan_identities(cfg.scene, cfg.seed);
    const auto clips = synth::plan_dataset(cfg.scene, cfg.seed);
    auto in = [](const std::vector<int>& v, int id) { return std::find(v.begin(), v.end(), id) != v.end(); };
    std::vector<double> union_conditions = train_conditions;
    for (double v : test_conditions)
        if (!detail::contains(union_conditions, v))
            union_conditions.push_back(v);

    // clips needed for training (either model) and testing
    std::vector<std::size_t> wanted;
    for (std::size_t i = 0; i < clips.size(); ++i) {
        const auto& c = clips[i];
        const bool fit = (in(res.split.train, c.identity) || in(res.split.validation, c.identity)) &&
                         detail::contains(union_conditions, c.velocity);
        const bool test = in(res.split.test, c.identity) && detail::contains(test_conditions, c.velocity);
        if (fit || test)
            wanted.push_back(i);
    }
    std::vector<neural::TrainingClip> prepared(wanted.size());
    std::vector<synth::RenderedClip> test_clips(wanted.size());
    std::vector<std::uint8_t> is_test(wanted.size(), 0);
    parallel_for(wanted.size(), jobs, [&](std::size_t k) {
        const auto& spec = clips[wanted[k]];
        auto clip = synth::render_clip(cfg.scene, spec, synth::identity_pulse(cfg.scene, ids[static_cast<std::size_t>(spec.identity)]));
        if (in(res.split.test, spec.identity)) {
            is_test[k] = 1;
            test_clips[k] = std::move(clip);
        } else {
            prepared[k] = neural::make_training_clip(clip.video, clip.truth, cfg.network);
        }
    });

    auto select = [&](const std::vector<int>& who, const std::vector<double>& conditions) {
        std::vector<neural::TrainingClip> out;
        for (std::size_t k = 0; k < wanted.size(); ++k) {
            const auto& c = clips[wanted[k]];
            if (!is_test[k] && in(who, c.identity) && detail::contains(conditions, c.velocity))
                out.push_back(prepared[k]);
        }
        return out;
    };

    const auto init = neural::CanModel<float>::init(cfg.network, cfg.seed);
    auto evaluate = [&](const neural::CanModel<float>& model, const std::vector<double>& conditions) {
        std::vector<double> est, ref, snr;
        for (std::size_t k = 0; k < wanted.size(); ++k) {
            if (!is_test[k])
                continue;
            const auto r = score_estimate(neural::predict_bvp(model, test_clips[k].video), test_clips[k].hr_reference);
            est.push_back(r.hr_estimate);
            ref.push_back(r.hr_reference);
            snr.push_back(r.snr_db);
        }
        if (est.empty())
            throw ConfigError("cross_condition_experiment: no test clips");
        auto m = compute_metrics(est, ref, snr);
        m.method = detail::condition_label(conditions);
        m.seed = cfg.seed;
        return m;
    };

    {
        auto [model, report] = neural::train(init, select(res.split.train, train_conditions),
                                             select(res.split.validation, train_conditions), cfg.training);
        res.baseline = evaluate(model, train_conditions);
        res.baseline_report = std::move(report);
    }
    {
        auto [model, report] = neural::train(init, select(res.split.train, union_conditions),
                                             select(res.split.validation, union_conditions), cfg.training);
        res.augmented = evaluate(model, union_conditions);
        res.augmented_report = std::move(report);
    }
    return res;
}

} // namespace pulseforge::eval
