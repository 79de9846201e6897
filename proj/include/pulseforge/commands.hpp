#pragma once

// Command implementations behind the pulseforge executable. Each command
// takes its JSON config (flags already merged in), writes its outputs
// atomically under `out`, and logs through a Logger.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pulseforge/config.hpp"
#include "pulseforge/eval.hpp"
#include "pulseforge/io_util.hpp"
#include "pulseforge/neural.hpp"
#include "pulseforge/parallel.hpp"
#include "pulseforge/recovery.hpp"
#include "pulseforge/synthesis.hpp"
#include "pulseforge/video_io.hpp"

namespace pulseforge::cli {

namespace fs = std::filesystem;
using config::json;

// Logging ----------------------------------------------------------------------------

enum class LogLevel { error = 0, warn, info, debug };

inline LogLevel parse_log_level(const char* s)
{
    if (!s || !*s)
        return LogLevel::info;
    const std::string v(s);
    if (v == "error")
        return LogLevel::error;
    if (v == "warn")
        return LogLevel::warn;
    if (v == "info")
        return LogLevel::info;
    if (v == "debug")
        return LogLevel::debug;
    throw ConfigError("PULSEFORGE_LOG must be one of error, warn, info, debug (got '" + v + "')");
}

/// Plain lines on stderr; the same lines with timestamps in the log file.
/// Timestamps never reach the command outputs.
class Logger {
public:
    explicit Logger(LogLevel level = LogLevel::info, std::ostream* console = &std::cerr)
        : level_(level), console_(console)
    {
    }

    void open_file(const fs::path& path)
    {
        std::lock_guard lock(mutex_);
        if (path.has_parent_path())
            fs::create_directories(path.parent_path());
        file_.open(path, std::ios::app);
    }

    LogLevel level() const { return level_; }

    void log(LogLevel l, const std::string& msg)
    {
        if (l > level_)
            return;
        static constexpr const char* names[] = {"error", "warn", "info", "debug"};
        const std::string line = std::string("[") + names[static_cast<int>(l)] + "] " + msg;
        std::lock_guard lock(mutex_);
        if (console_)
            *console_ << line << '\n';
        if (file_.is_open()) {
            const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
            std::tm tm{};
            gmtime_r(&now, &tm);
            char stamp[32];
            std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", &tm);
            file_ << stamp << ' ' << line << '\n';
            file_.flush();
        }
    }

    void error(const std::string& m) { log(LogLevel::error, m); }
    void warn(const std::string& m) { log(LogLevel::warn, m); }
    void info(const std::string& m) { log(LogLevel::info, m); }
    void debug(const std::string& m) { log(LogLevel::debug, m); }

private:
    LogLevel level_;
    std::ostream* console_;
    std::ofstream file_;
    std::mutex mutex_;
};

inline constexpr const char* kLogFile = "pulseforge.log";

// Common options ------------------------------------------------------------------------

/// Keys every command config accepts besides its own.
struct Common {
    std::uint64_t seed = 0;
    fs::path out = "out";
    unsigned jobs = 1;
};

/// Values given on the command line; they win over the config file.
struct Overrides {
    std::optional<std::uint64_t> seed {};
    std::optional<std::string> out {};
    std::optional<unsigned> jobs {};
    std::optional<std::string> method {};
};

inline Common read_common(const json& j, const Overrides& o, std::string_view what)
{
    Common c;
    config::read(j, "seed", c.seed, what);
    std::string out = c.out.string();
    config::read(j, "out", out, what);
    c.out = out;
    config::read(j, "jobs", c.jobs, what);
    if (o.seed)
        c.seed = *o.seed;
    if (o.out)
        c.out = *o.out;
    if (o.jobs)
        c.jobs = *o.jobs;
    if (c.jobs < 1)
        throw ConfigError(std::string(what) + ".jobs must be >= 1");
    return c;
}

inline json load_config_file(const std::optional<std::string>& path)
{
    if (!path)
        return json::object();
    std::string text;
    try {
        text = io::read_file(*path);
    } catch (const Error&) {
        throw ConfigError("cannot read config file " + *path);
    }
    try {
        auto j = json::parse(text);
        config::require_object(j, *path);
        return j;
    } catch (const json::exception& e) {
        throw ConfigError(*path + ": invalid JSON: " + e.what());
    }
}

inline void write_json(const fs::path& path, const json& j) { io::atomic_write(path, j.dump(2) + "\n"); }

/// Lists the files a command produced (relative to out), in a fixed order.
inline void write_run_record(const Common& c, const std::string& command, const json& effective_config,
                             std::vector<std::string> files)
{
    std::sort(files.begin(), files.end());
    write_json(c.out / "run.json",
               json{{"command", command}, {"seed", c.seed}, {"config", effective_config}, {"outputs", files}});
}

// Dataset manifest ----------------------------------------------------------------------

inline constexpr std::string_view kManifestHeader =
    "clip,identity,clip_index,velocity_deg_s,skin_type,hr_reference_bpm,video,sidecar,truth";

struct ManifestRow {
    std::string clip;
    int identity = 0, clip_index = 0;
    double velocity = 0;
    drm::Fitzpatrick skin = drm::Fitzpatrick::I;
    double hr_reference = 0;
    std::string video, sidecar, truth; // relative to the dataset directory
};

inline std::string manifest_csv(const std::vector<ManifestRow>& rows)
{
    std::string out(kManifestHeader);
    out += '\n';
    for (const auto& r : rows) {
        out += r.clip + ',' + std::to_string(r.identity) + ',' + std::to_string(r.clip_index) + ',' +
               io::fmt(r.velocity) + ',' + drm::to_string(r.skin) + ',' + io::fmt(r.hr_reference) + ',' + r.video +
               ',' + r.sidecar + ',' + r.truth + '\n';
    }
    return out;
}

inline std::vector<std::string> split_csv(std::string_view line)
{
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        const auto comma = line.find(',', start);
        out.emplace_back(io::trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
        if (comma == std::string_view::npos)
            return out;
        start = comma + 1;
    }
}

inline std::vector<ManifestRow> read_manifest(const fs::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw ParseError(path.string() + ": cannot open manifest");
    std::vector<ManifestRow> rows;
    std::string raw;
    std::size_t line_no = 0;
    bool header = false;
    const std::string where = path.string() + ":";
    while (std::getline(in, raw)) {
        ++line_no;
        const auto line = io::trim(raw);
        if (line.empty())
            continue;
        if (!header) {
            if (line != kManifestHeader)
                throw ParseError(where + std::to_string(line_no) + ": unexpected manifest header");
            header = true;
            continue;
        }
        const auto f = split_csv(line);
        if (f.size() != 9)
            throw ParseError(where + std::to_string(line_no) + ": expected 9 fields, found " +
                             std::to_string(f.size()));
        ManifestRow r;
        double identity, index;
        r.clip = f[0];
        try {
            r.skin = drm::parse_fitzpatrick(f[4]);
        } catch (const ConfigError&) {
            throw ParseError(where + std::to_string(line_no) + ": bad skin type '" + f[4] + "'");
        }
        if (!io::parse_double(f[1], identity) || !io::parse_double(f[2], index) ||
            !io::parse_double(f[3], r.velocity) || !io::parse_double(f[5], r.hr_reference))
            throw ParseError(where + std::to_string(line_no) + ": non-numeric field");
        r.identity = static_cast<int>(identity);
        r.clip_index = static_cast<int>(index);
        r.video = f[6];
        r.sidecar = f[7];
        r.truth = f[8];
        rows.push_back(std::move(r));
    }
    if (!header)
        throw ParseError(where + " empty manifest");
    return rows;
}

/// Fails naming every clip whose video file is missing.
inline void check_clip_files(const fs::path& dataset, const std::vector<ManifestRow>& rows)
{
    std::string missing;
    std::size_t n = 0;
    for (const auto& r : rows)
        if (!fs::exists(dataset / r.video)) {
            missing += (n++ ? ", " : "") + r.clip + " (" + (dataset / r.video).string() + ")";
        }
    if (n)
        throw ParseError("manifest references " + std::to_string(n) + " missing clip(s): " + missing);
}

// synth ------------------------------------------------------------------------------------

struct SynthResult {
    std::vector<ManifestRow> rows;
};

inline SynthResult cmd_synth(const json& cfg, const Overrides& o, Logger& log)
{
    config::check_keys(cfg, {"seed", "out", "jobs", "scene"}, "synth");
    const auto c = read_common(cfg, o, "synth");
    const auto scene = synth::scene_from_json(cfg.value("scene", json::object()));
    log.info("synth: " + std::to_string(scene.identities) + " identities x " +
             std::to_string(scene.clips_per_identity) + " clips, seed " + std::to_string(c.seed));

    const auto ids = synth::plan_identities(scene, c.seed);
    const auto plan = synth::plan_dataset(scene, c.seed);
    std::vector<ManifestRow> rows(plan.size());
    parallel_for(plan.size(), c.jobs, [&](std::size_t i) {
        const auto& spec = plan[i];
        const auto pulse = synth::identity_pulse(scene, ids[static_cast<std::size_t>(spec.identity)]);
        const auto clip = synth::render_clip(scene, spec, pulse);
        const std::string name = spec.name();
        ManifestRow r{name, spec.identity, spec.clip, spec.velocity, spec.skin, clip.hr_reference,
                      "clips/" + name + ".vten", "clips/" + name + ".json", "clips/" + name + "_ppg.csv"};
        io::write_video(c.out / r.video, clip.video);
        auto side = synth::sidecar_json(scene, clip, c.seed, r.truth);
        side["roi_shift"] = clip.roi_shift;
        write_json(c.out / r.sidecar, side);
        io::atomic_write(c.out / r.truth, ppg_csv(clip.truth));
        log.debug("synth: wrote " + name);
        rows[i] = std::move(r);
    });
    io::atomic_write(c.out / "manifest.csv", manifest_csv(rows));
    std::vector<std::string> files{"manifest.csv"};
    for (const auto& r : rows)
        files.insert(files.end(), {r.video, r.sidecar, r.truth});
    write_run_record(c, "synth", json{{"scene", synth::to_json(scene)}}, files);
    log.info("synth: wrote " + std::to_string(rows.size()) + " clips to " + c.out.string());
    return {rows};
}

// recover ---------------------------------------------------------------------------------

/// ROI for a stored clip: the default skin ellipse for the frame size, moved
/// by the sidecar's roi_shift when present.
inline recovery::RoiTrace clip_roi(const drm::VideoTensor& video, const json& sidecar)
{
    std::vector<std::uint8_t> mask = recovery::full_mask(video);
    if (video.height == video.width)
        mask = drm::PatchSpec::make_default(static_cast<int>(video.width)).skin_mask;
    if (sidecar.contains("roi_shift")) {
        const auto shift = sidecar.at("roi_shift").get<std::vector<int>>();
        return recovery::tracked_average(video, mask, shift);
    }
    return recovery::spatial_average(video, mask);
}

inline json read_sidecar(const fs::path& path)
{
    if (!fs::exists(path))
        return json::object();
    try {
        return json::parse(io::read_file(path));
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": invalid JSON: " + e.what());
    }
}

inline constexpr std::string_view kHrHeader = "clip,method,hr_bpm,hr_reference_bpm,snr_db";

inline void cmd_recover(const json& cfg, const Overrides& o, Logger& log)
{
    config::check_keys(cfg, {"seed", "out", "jobs", "dataset", "method", "model"}, "recover");
    const auto c = read_common(cfg, o, "recover");
    std::string dataset, method = "pos", model_path;
    config::read(cfg, "dataset", dataset, "recover");
    config::read(cfg, "method", method, "recover");
    config::read(cfg, "model", model_path, "recover");
    if (o.method)
        method = *o.method;
    if (dataset.empty())
        throw ConfigError("recover: 'dataset' (directory with manifest.csv) is required");
    const auto& valid = eval::sweep_methods();
    if (std::find(valid.begin(), valid.end(), method) == valid.end())
        throw ConfigError("recover: unknown method '" + method + "' (valid: pos, chrom, ica, can)");
    std::optional<neural::CanModel<float>> model;
    if (method == "can") {
        if (model_path.empty())
            throw ConfigError("recover: method 'can' needs 'model' (checkpoint path)");
        model = neural::load_checkpoint(model_path);
    }

    const fs::path root(dataset);
    const auto rows = read_manifest(root / "manifest.csv");
    check_clip_files(root, rows);
    log.info("recover: " + std::to_string(rows.size()) + " clips with " + method);

    std::vector<std::string> lines(rows.size());
    parallel_for(rows.size(), c.jobs, [&](std::size_t i) {
        const auto& r = rows[i];
        const auto video = io::read_video(root / r.video);
        recovery::BvpEstimate est;
        if (model) {
            est = neural::predict_bvp(*model, video);
        } else {
            const auto roi = clip_roi(video, read_sidecar(root / r.sidecar));
            io::atomic_write(c.out / "roi" / (r.clip + ".csv"), recovery::roi_trace_csv(roi));
            est = recovery::recover(method, roi, derive_seed(c.seed, {static_cast<std::uint64_t>(i)}));
        }
        if (!est.converged)
            log.warn("recover: " + r.clip + ": ICA hit the iteration cap");
        io::atomic_write(c.out / "estimates" / (r.clip + ".csv"), recovery::bvp_csv(est));
        io::atomic_write(c.out / "spectra" / (r.clip + ".csv"),
                         dsp::spectrum_csv(dsp::power_spectrum(est.samples, est.sample_rate)));
        const auto score = eval::score_estimate(est, r.hr_reference);
        lines[i] = r.clip + ',' + method + ',' + io::fmt(score.hr_estimate) + ',' + io::fmt(score.hr_reference) +
                   ',' + io::fmt(score.snr_db);
    });
    std::string hr(kHrHeader);
    hr += '\n';
    for (const auto& l : lines)
        hr += l + '\n';
    io::atomic_write(c.out / "hr.csv", hr);
    std::vector<std::string> files{"hr.csv"};
    for (const auto& r : rows) {
        files.push_back("estimates/" + r.clip + ".csv");
        files.push_back("spectra/" + r.clip + ".csv");
        if (!model)
            files.push_back("roi/" + r.clip + ".csv");
    }
    write_run_record(c, "recover", json{{"dataset", dataset}, {"method", method}, {"model", model_path}}, files);
    log.info("recover: wrote " + std::to_string(rows.size()) + " estimates");
}

// train ------------------------------------------------------------------------------------

inline neural::TrainOptions training_from_json(const json& j, neural::TrainOptions t)
{
    constexpr std::string_view what = "train.training";
    config::check_keys(j, {"epochs", "learning_rate", "momentum", "batch_size", "pairs_per_epoch", "eval_pairs"},
                       what);
    config::read(j, "epochs", t.epochs, what);
    config::read(j, "learning_rate", t.learning_rate, what);
    config::read(j, "momentum", t.momentum, what);
    config::read(j, "batch_size", t.batch_size, what);
    config::read(j, "pairs_per_epoch", t.pairs_per_epoch, what);
    config::read(j, "eval_pairs", t.eval_pairs, what);
    t.validate();
    return t;
}

inline json to_json(const neural::TrainOptions& t)
{
    return json{{"epochs", t.epochs},         {"learning_rate", t.learning_rate},
                {"momentum", t.momentum},     {"batch_size", t.batch_size},
                {"pairs_per_epoch", t.pairs_per_epoch}, {"eval_pairs", t.eval_pairs}};
}

/// Trains a CAN on the training identities of a dataset and writes the
/// validation-selected checkpoint, the report and the identity split.
inline neural::TrainReport cmd_train(const json& cfg, const Overrides& o, Logger& log)
{
    config::check_keys(cfg, {"seed", "out", "jobs", "dataset", "network", "training", "split", "velocities"},
                       "train");
    const auto c = read_common(cfg, o, "train");
    std::string dataset;
    config::read(cfg, "dataset", dataset, "train");
    if (dataset.empty())
        throw ConfigError("train: 'dataset' (directory with manifest.csv) is required");
    const auto net = cfg.contains("network") ? neural::can_config_from_json(cfg.at("network")) : neural::CanConfig::desk();
    auto opt = training_from_json(cfg.value("training", json::object()), eval::default_experiment_training());
    opt.seed = c.seed;
    std::vector<double> velocities;
    config::read(cfg, "velocities", velocities, "train");

    const fs::path root(dataset);
    const auto rows = read_manifest(root / "manifest.csv");
    check_clip_files(root, rows);
    std::vector<int> ids;
    for (const auto& r : rows)
        if (std::find(ids.begin(), ids.end(), r.identity) == ids.end())
            ids.push_back(r.identity);
    std::sort(ids.begin(), ids.end());
    const int n = static_cast<int>(ids.size());
    std::array<int, 3> split{0, 0, 0};
    if (cfg.contains("split")) {
        config::read(cfg, "split", split, "train");
    } else {
        // 80/10/10 when the count allows it
        split[2] = std::max(1, n / 10);
        split[1] = std::max(1, n / 10);
        split[0] = n - split[1] - split[2];
    }
    if (split[0] < 1)
        throw ConfigError("train: need at least 3 identities (train, validation, test)");
    if (n % split[2] != 0)
        throw ConfigError("train: identity count " + std::to_string(n) + " is not a multiple of the test size " +
                          std::to_string(split[2]));
    const auto fold = eval::make_folds(ids, n / split[2], split, c.seed).folds.front();

    auto member = [](const std::vector<int>& v, int id) { return std::find(v.begin(), v.end(), id) != v.end(); };
    std::vector<std::size_t> use;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        const bool vel_ok = velocities.empty() || std::find(velocities.begin(), velocities.end(), r.velocity) != velocities.end();
        if (vel_ok && (member(fold.train, r.identity) || member(fold.validation, r.identity)))
            use.push_back(i);
    }
    std::vector<neural::TrainingClip> prepared(use.size());
    parallel_for(use.size(), c.jobs, [&](std::size_t k) {
        const auto& r = rows[use[k]];
        const auto video = io::read_video(root / r.video);
        auto truth = load_ppg_csv(root / r.truth);
        if (std::abs(truth.sample_rate - video.sample_rate) > 1e-6 * video.sample_rate)
            throw ParseError((root / r.truth).string() + ": sample rate differs from the video");
        truth.sample_rate = video.sample_rate;
        prepared[k] = neural::make_training_clip(video, truth, net);
    });
    std::vector<neural::TrainingClip> train_set, val_set;
    for (std::size_t k = 0; k < use.size(); ++k)
        (member(fold.train, rows[use[k]].identity) ? train_set : val_set).push_back(std::move(prepared[k]));
    log.info("train: " + std::to_string(train_set.size()) + " training clips, " + std::to_string(val_set.size()) +
             " validation clips, " + std::to_string(opt.epochs) + " epochs");

    auto [model, report] = neural::train(neural::CanModel<float>::init(net, c.seed), train_set, val_set, opt);
    for (std::size_t e = 0; e < report.val_mse.size(); ++e)
        log.debug("train: epoch " + std::to_string(e + 1) + " train " + io::fmt(report.train_mse[e]) + " val " +
                  io::fmt(report.val_mse[e]));
    neural::save_checkpoint(c.out / "model.canw", model);
    write_json(c.out / "train_report.json", neural::to_json(report));
    write_json(c.out / "split.json",
               json{{"train", fold.train}, {"validation", fold.validation}, {"test", fold.test}});
    write_run_record(c, "train",
                     json{{"dataset", dataset},
                          {"network", neural::to_json(net)},
                          {"training", to_json(opt)},
                          {"split", split},
                          {"velocities", velocities}},
                     {"model.canw", "train_report.json", "split.json"});
    log.info("train: selected epoch " + std::to_string(report.selected_epoch) + ", validation MSE " +
             io::fmt(report.val_mse[static_cast<std::size_t>(report.selected_epoch - 1)]));
    return report;
}

// eval --------------------------------------------------------------------------------------

inline constexpr std::string_view kClipScoreHeader = "clip,velocity_deg_s,skin_type,hr_bpm,hr_reference_bpm,abs_error_bpm,snr_db";

/// Scores an estimate directory (one `<clip>.csv` per manifest clip) against
/// a dataset manifest: one overall row, then one row per velocity and per
/// skin type present.
inline std::vector<eval::MetricsReport> cmd_eval(const json& cfg, const Overrides& o, Logger& log)
{
    config::check_keys(cfg, {"seed", "out", "jobs", "dataset", "estimates", "label"}, "eval");
    const auto c = read_common(cfg, o, "eval");
    std::string dataset, estimates, label;
    config::read(cfg, "dataset", dataset, "eval");
    config::read(cfg, "estimates", estimates, "eval");
    config::read(cfg, "label", label, "eval");
    if (o.method)
        label = *o.method;
    if (dataset.empty() || estimates.empty())
        throw ConfigError("eval: 'dataset' and 'estimates' are required");
    const auto rows = read_manifest(fs::path(dataset) / "manifest.csv");

    std::string missing;
    for (const auto& r : rows)
        if (!fs::exists(fs::path(estimates) / (r.clip + ".csv")))
            missing += (missing.empty() ? "" : ", ") + r.clip;
    if (!missing.empty())
        throw ParseError("eval: no estimate in " + estimates + " for: " + missing);

    std::vector<eval::ClipResult> scores(rows.size());
    std::vector<std::string> methods(rows.size());
    parallel_for(rows.size(), c.jobs, [&](std::size_t i) {
        const auto est = recovery::load_bvp_csv(fs::path(estimates) / (rows[i].clip + ".csv"));
        scores[i] = eval::score_estimate(est, rows[i].hr_reference);
        methods[i] = est.method;
    });
    if (label.empty())
        label = methods.empty() ? "unknown" : methods.front();

    auto report = [&](auto&& keep) {
        std::vector<double> e, ref, snr;
        for (std::size_t i = 0; i < rows.size(); ++i)
            if (keep(rows[i])) {
                e.push_back(scores[i].hr_estimate);
                ref.push_back(scores[i].hr_reference);
                snr.push_back(scores[i].snr_db);
            }
        auto m = eval::compute_metrics(e, ref, snr);
        m.method = label;
        return m;
    };
    std::vector<eval::MetricsReport> out;
    out.push_back(report([](const ManifestRow&) { return true; }));
    std::vector<double> vels;
    std::vector<drm::Fitzpatrick> skins;
    for (const auto& r : rows) {
        if (std::find(vels.begin(), vels.end(), r.velocity) == vels.end())
            vels.push_back(r.velocity);
        if (std::find(skins.begin(), skins.end(), r.skin) == skins.end())
            skins.push_back(r.skin);
    }
    std::sort(vels.begin(), vels.end());
    std::sort(skins.begin(), skins.end());
    for (double v : vels) {
        auto m = report([v](const ManifestRow& r) { return r.velocity == v; });
        m.velocity = v;
        out.push_back(m);
    }
    for (auto s : skins) {
        auto m = report([s](const ManifestRow& r) { return r.skin == s; });
        m.skin = s;
        out.push_back(m);
    }

    std::string clips(kClipScoreHeader);
    clips += '\n';
    for (std::size_t i = 0; i < rows.size(); ++i)
        clips += rows[i].clip + ',' + io::fmt(rows[i].velocity) + ',' + drm::to_string(rows[i].skin) + ',' +
                 io::fmt(scores[i].hr_estimate) + ',' + io::fmt(scores[i].hr_reference) + ',' +
                 io::fmt(std::abs(scores[i].hr_estimate - scores[i].hr_reference)) + ',' + io::fmt(scores[i].snr_db) +
                 '\n';
    io::atomic_write(c.out / "metrics.csv", eval::metrics_csv(out));
    io::atomic_write(c.out / "clip_scores.csv", clips);
    write_run_record(c, "eval", json{{"dataset", dataset}, {"estimates", estimates}, {"label", label}},
                     {"metrics.csv", "clip_scores.csv"});
    log.info("eval: " + std::to_string(rows.size()) + " clips, MAE " + io::fmt(out.front().mae) + " BPM");
    return out;
}

// sweep -------------------------------------------------------------------------------------

inline std::vector<eval::MetricsReport> cmd_sweep(const json& cfg, const Overrides& o, Logger& log)
{
    json body = cfg;
    for (const char* k : {"seed", "out", "jobs"})
        body.erase(k);
    const auto c = read_common(cfg, o, "sweep");
    auto sweep = eval::sweep_from_json(body);
    if (o.seed || cfg.contains("seed")) {
        if (body.contains("seeds"))
            log.warn("sweep: the run seed replaces the configured seed list");
        sweep.seeds = {c.seed};
    }
    if (o.method)
        sweep.methods = {*o.method};
    sweep.validate();
    log.info("sweep: " + std::to_string(sweep.methods.size() * sweep.velocities.size() * sweep.skin_types.size() *
                                        sweep.seeds.size()) +
             " cells x " + std::to_string(sweep.clips) + " clips");
    const auto rows = eval::run_sweep(sweep, c.jobs);
    io::atomic_write(c.out / "metrics.csv", eval::metrics_csv(rows));
    write_json(c.out / "metrics.json", eval::sweep_json(rows));
    write_run_record(c, "sweep", eval::to_json(sweep), {"metrics.csv", "metrics.json"});
    log.info("sweep: wrote " + std::to_string(rows.size()) + " rows");
    return rows;
}

// Dispatch ----------------------------------------------------------------------------------

/// Exit codes: 0 ok, 2 configuration or usage, 3 unreadable/malformed input,
/// 4 degenerate or out-of-domain data, 5 training divergence, 1 anything else.
inline int exit_code_for(const std::exception& e)
{
    if (dynamic_cast<const ConfigError*>(&e))
        return 2;
    if (dynamic_cast<const ParseError*>(&e))
        return 3;
    if (dynamic_cast<const DomainError*>(&e) || dynamic_cast<const DegenerateInputError*>(&e))
        return 4;
    if (dynamic_cast<const DivergenceError*>(&e))
        return 5;
    return 1;
}

inline const std::vector<std::string>& command_names()
{
    static const std::vector<std::string> names{"synth", "recover", "train", "eval", "sweep"};
    return names;
}

/// Runs one command; errors are logged and mapped to an exit code.
inline int run_command(const std::string& command, const std::optional<std::string>& config_path,
                       const Overrides& o, Logger& log)
{
    try {
        const auto cfg = load_config_file(config_path);
        const auto c = read_common(cfg, o, command);
        fs::create_directories(c.out);
        log.open_file(c.out / kLogFile);
        log.debug(command + ": output directory " + c.out.string());
        if (command == "synth")
            cmd_synth(cfg, o, log);
        else if (command == "recover")
            cmd_recover(cfg, o, log);
        else if (command == "train")
            cmd_train(cfg, o, log);
        else if (command == "eval")
            cmd_eval(cfg, o, log);
        else if (command == "sweep")
            cmd_sweep(cfg, o, log);
        else
            throw ConfigError("unknown command '" + command + "' (valid: synth, recover, train, eval, sweep)");
        return 0;
    } catch (const std::exception& e) {
        log.error(e.what());
        return exit_code_for(e);
    }
}

} // namespace pulseforge::cli
