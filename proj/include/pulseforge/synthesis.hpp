#pragma once

// Dataset planning and clip rendering: identities with a skin type, a heart
// rate and an illumination level; each identity has one long pulse recording
// and clip j shows segment j of it under the j-th motion condition.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pulseforge/config.hpp"
#include "pulseforge/drm.hpp"
#include "pulseforge/dsp.hpp"
#include "pulseforge/error.hpp"
#include "pulseforge/io_util.hpp"
#include "pulseforge/random.hpp"
#include "pulseforge/waveform.hpp"

namespace pulseforge::synth {

using config::json;
using drm::Fitzpatrick;
using drm::Rgb;

struct SceneConfig {
    int identities = 50;
    int clips_per_identity = 9;
    // clip j of every identity moves at clip_velocities[j % size]
    std::vector<double> clip_velocities{0, 0, 0, 10, 10, 20, 20, 30, 30};
    double clip_seconds = 10.0;
    double sample_rate = 30.0;
    int patch_size = 36;
    double max_angle = 30.0;
    double hr_min = 48.0, hr_max = 150.0;
    double pulse_ratio = 0.005;
    std::array<double, 2> illumination{0.85, 1.0}; // I0 range
    std::array<double, 2> background{0.15, 0.6};   // per-channel range
    drm::ModulationModel modulation{0.005, 0.0, 0.01, 0.0};
    std::optional<int> quantization_bits = 8;
    double noise_sigma = 0.002;
    bool exact = true;
    // identities per type I..VI, rescaled to the identity count
    std::array<double, 6> skin_distribution{9, 15, 12, 4, 5, 5};
    drm::SkinToneTable skin_tones;
    // optional PPG recordings; identity i uses recordings[i % n]
    std::vector<std::string> recordings;

    double total_seconds() const { return clips_per_identity * clip_seconds; }

    void validate() const
    {
        if (identities < 1 || clips_per_identity < 1)
            throw ConfigError("scene: identities and clips_per_identity must be >= 1");
        if (clip_velocities.empty())
            throw ConfigError("scene: clip_velocities must not be empty");
        for (double v : clip_velocities)
            if (!(v >= 0.0))
                throw ConfigError("scene: clip velocities must be >= 0");
        if (!(sample_rate > 0.0) || !(clip_seconds * sample_rate >= 2.0))
            throw ConfigError("scene: clip must hold at least 2 frames");
        if (patch_size < 4)
            throw ConfigError("scene: patch_size must be >= 4");
        if (!(max_angle > 0.0))
            throw ConfigError("scene: max_angle must be positive");
        if (!(hr_min >= 30.0 && hr_max <= 240.0 && hr_min <= hr_max))
            throw ConfigError("scene: heart-rate range must lie within [30, 240] with min <= max");
        if (!(pulse_ratio >= 0.0))
            throw ConfigError("scene: pulse_ratio must be >= 0");
        if (!(illumination[0] > 0.0 && illumination[0] <= illumination[1]))
            throw ConfigError("scene: illumination range must be positive and ordered");
        if (!(background[0] >= 0.0 && background[0] <= background[1] && background[1] <= 1.0))
            throw ConfigError("scene: background range must lie in [0, 1] and be ordered");
        drm::NoiseModel{quantization_bits, noise_sigma, 0}.validate();
        modulation.validate();
        skin_tones.validate();
        double total = 0;
        for (double w : skin_distribution) {
            if (!(w >= 0.0))
                throw ConfigError("scene: skin_distribution entries must be >= 0");
            total += w;
        }
        if (!(total > 0.0))
            throw ConfigError("scene: skin_distribution must not be all zero");
    }
};

namespace detail {

inline Fitzpatrick fitzpatrick_from_json(const json& j)
{
    if (j.is_number_integer())
        return drm::parse_fitzpatrick(std::to_string(j.get<int>()));
    if (j.is_string())
        return drm::parse_fitzpatrick(j.get<std::string>());
    throw ConfigError("skin type must be a string I..VI or an integer 1..6");
}

} // namespace detail

inline json to_json(const drm::ModulationModel& m)
{
    return json{{"phi_motion", m.phi_motion},
                {"phi_pulse", m.phi_pulse},
                {"psi_motion", m.psi_motion},
                {"psi_pulse", m.psi_pulse}};
}

inline drm::ModulationModel modulation_from_json(const json& j)
{
    config::check_keys(j, {"phi_motion", "phi_pulse", "psi_motion", "psi_pulse"}, "modulation");
    drm::ModulationModel m;
    config::read(j, "phi_motion", m.phi_motion, "modulation");
    config::read(j, "phi_pulse", m.phi_pulse, "modulation");
    config::read(j, "psi_motion", m.psi_motion, "modulation");
    config::read(j, "psi_pulse", m.psi_pulse, "modulation");
    m.validate();
    return m;
}

inline json to_json(const SceneConfig& c)
{
    json j{{"identities", c.identities},
           {"clips_per_identity", c.clips_per_identity},
           {"clip_velocities", c.clip_velocities},
           {"clip_seconds", c.clip_seconds},
           {"sample_rate", c.sample_rate},
           {"patch_size", c.patch_size},
           {"max_angle", c.max_angle},
           {"hr_min", c.hr_min},
           {"hr_max", c.hr_max},
           {"pulse_ratio", c.pulse_ratio},
           {"illumination", c.illumination},
           {"background", c.background},
           {"modulation", to_json(c.modulation)},
           {"noise_sigma", c.noise_sigma},
           {"exact", c.exact},
           {"skin_distribution", c.skin_distribution},
           {"skin_tones", {{"intensity", c.skin_tones.intensity}, {"pulse", c.skin_tones.pulse}}},
           {"recordings", c.recordings}};
    j["quantization_bits"] = c.quantization_bits ? json(*c.quantization_bits) : json(nullptr);
    return j;
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline SceneConfig scene_from_json(const json& j, SceneConfig c = {})
{
    constexpr std::string_view what = "scene";
    config::check_keys(j,
                       {"identities", "clips_per_identity", "clip_velocities", "clip_seconds", "sample_rate",
                        "patch_size", "max_angle", "hr_min", "hr_max", "pulse_ratio", "illumination", "background",
                        "modulation", "quantization_bits", "noise_sigma", "exact", "skin_distribution",
                        "skin_tones", "recordings"},
                       what);
    config::read(j, "identities", c.identities, what);
    config::read(j, "clips_per_identity", c.clips_per_identity, what);
    config::read(j, "clip_velocities", c.clip_velocities, what);
    config::read(j, "clip_seconds", c.clip_seconds, what);
    config::read(j, "sample_rate", c.sample_rate, what);
    config::read(j, "patch_size", c.patch_size, what);
    config::read(j, "max_angle", c.max_angle, what);
    config::read(j, "hr_min", c.hr_min, what);
    config::read(j, "hr_max", c.hr_max, what);
    config::read(j, "pulse_ratio", c.pulse_ratio, what);
    config::read(j, "illumination", c.illumination, what);
    config::read(j, "background", c.background, what);
    config::read(j, "noise_sigma", c.noise_sigma, what);
    config::read(j, "exact", c.exact, what);
    config::read(j, "skin_distribution", c.skin_distribution, what);
    config::read(j, "recordings", c.recordings, what);
    if (j.contains("modulation"))
        c.modulation = modulation_from_json(j.at("modulation"));
    if (j.contains("quantization_bits")) {
        const auto& q = j.at("quantization_bits");
        if (q.is_null())
            c.quantization_bits.reset();
        else if (q.is_number_integer())
            c.quantization_bits = q.get<int>();
        else
            throw ConfigError("scene.quantization_bits: expected an integer or null");
    }
    if (j.contains("skin_tones")) {
        const auto& t = j.at("skin_tones");
        config::check_keys(t, {"intensity", "pulse"}, "scene.skin_tones");
        config::read(t, "intensity", c.skin_tones.intensity, "scene.skin_tones");
        config::read(t, "pulse", c.skin_tones.pulse, "scene.skin_tones");
    }
    c.validate();
    return c;
}

// Planning ----------------------------------------------------------------------

struct IdentitySpec {
    int index = 0;
    Fitzpatrick skin = Fitzpatrick::I;
    double hr_bpm = 0;       // nominal rate of the synthetic pulse
    double illumination = 1; // I0
    std::uint64_t pulse_seed = 0;
};

struct ClipSpec {
    int identity = 0;
    int clip = 0;
    double velocity = 0;
    Fitzpatrick skin = Fitzpatrick::I;
    double hr_bpm = 0;
    double illumination = 1;
    Rgb background = Rgb::Zero();
    std::uint64_t noise_seed = 0;

    std::string name() const
    {
        char buf[32];
        std::snprintf(buf, sizeof buf, "id%03d_clip%02d", identity, clip);
        return buf;
    }
};

/// Largest-remainder apportionment of `total` items over the weights.
inline std::vector<int> apportion(const std::array<double, 6>& weights, int total)
{
    double sum = 0;
    for (double w : weights)
        sum += w;
    std::vector<int> out(6);
    std::vector<std::pair<double, int>> rest;
    int given = 0;
    for (int i = 0; i < 6; ++i) {
        const double exact = weights[i] / sum * total;
        out[i] = static_cast<int>(std::floor(exact));
        given += out[i];
        rest.emplace_back(exact - out[i], i);
    }
    // larger remainder first, lower type on ties
    std::stable_sort(rest.begin(), rest.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (int k = 0; given < total; ++k, ++given)
        ++out[rest[static_cast<std::size_t>(k)].second];
    return out;
}

namespace detail {

template <class V>
void shuffle(V& v, Rng& rng)
{
    for (std::size_t i = v.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
        std::swap(v[i - 1], v[std::min(j, i - 1)]);
    }
}

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

inline constexpr std::uint64_t kSkinKey = 0x736b696e;
inline constexpr std::uint64_t kIdentityKey = 0x6964;
inline constexpr std::uint64_t kClipKey = 0x636c6970;

} // namespace detail

inline std::vector<IdentitySpec> plan_identities(const SceneConfig& cfg, std::uint64_t seed)
{
    cfg.validate();
    const auto counts = apportion(cfg.skin_distribution, cfg.identities);
    std::vector<Fitzpatrick> skins;
    for (int t = 0; t < 6; ++t)
        skins.insert(skins.end(), static_cast<std::size_t>(counts[t]), static_cast<Fitzpatrick>(t + 1));
    auto skin_rng = make_rng(seed, {detail::kSkinKey});
    detail::shuffle(skins, skin_rng);

    std::vector<IdentitySpec> out(static_cast<std::size_t>(cfg.identities));
    for (int i = 0; i < cfg.identities; ++i) {
        auto rng = make_rng(seed, {detail::kIdentityKey, static_cast<std::uint64_t>(i)});
        auto& id = out[static_cast<std::size_t>(i)];
        id.index = i;
        id.skin = skins[static_cast<std::size_t>(i)];
        id.hr_bpm = detail::uniform(rng, cfg.hr_min, cfg.hr_max);
        id.illumination = detail::uniform(rng, cfg.illumination[0], cfg.illumination[1]);
        id.pulse_seed = rng();
    }
    return out;
}

inline std::vector<ClipSpec> plan_dataset(const SceneConfig& cfg, std::uint64_t seed)
{
    const auto ids = plan_identities(cfg, seed);
    std::vector<ClipSpec> out;
    out.reserve(ids.size() * static_cast<std::size_t>(cfg.clips_per_identity));
    for (const auto& id : ids)
        for (int j = 0; j < cfg.clips_per_identity; ++j) {
            auto rng = make_rng(seed, {detail::kClipKey, static_cast<std::uint64_t>(id.index),
                                       static_cast<std::uint64_t>(j)});
            ClipSpec c;
            c.identity = id.index;
            c.clip = j;
            c.velocity = cfg.clip_velocities[static_cast<std::size_t>(j) % cfg.clip_velocities.size()];
            c.skin = id.skin;
            c.hr_bpm = id.hr_bpm;
            c.illumination = id.illumination;
            for (int ch = 0; ch < 3; ++ch)
                c.background[ch] = detail::uniform(rng, cfg.background[0], cfg.background[1]);
            c.noise_seed = rng();
            out.push_back(c);
        }
    return out;
}

// Rendering ---------------------------------------------------------------------

/// Full-length driving pulse for one identity at the scene rate, normalized
/// to zero mean and unit variance.
inline PulseWaveform identity_pulse(const SceneConfig& cfg, const IdentitySpec& id)
{
    if (cfg.recordings.empty())
        return synth_pulse(id.hr_bpm, cfg.total_seconds(), cfg.sample_rate, id.pulse_seed);
    const auto& path = cfg.recordings[static_cast<std::size_t>(id.index) % cfg.recordings.size()];
    auto w = load_ppg_csv(path);
    w = normalize(resample(leading(w, std::max(kRecordingUseSeconds, cfg.total_seconds())), cfg.sample_rate));
    if (w.duration() + 0.5 / cfg.sample_rate < cfg.total_seconds())
        throw ConfigError("recording " + path + " is " + io::fmt(w.duration()) + " s long, scene needs " +
                          io::fmt(cfg.total_seconds()) + " s");
    w.hr_reference.reset();
    return w;
}

struct RenderedClip {
    ClipSpec spec;
    drm::VideoTensor video;
    PulseWaveform truth; // pulse segment shown in the clip
    std::vector<std::uint8_t> skin_mask;
    std::vector<int> roi_shift; // lateral skin displacement per frame
    double hr_reference = 0; // spectral estimate on the truth segment
};

inline RenderedClip render_clip(const SceneConfig& cfg, const ClipSpec& spec, const PulseWaveform& full_pulse)
{
    auto truth = segment(full_pulse, spec.clip * cfg.clip_seconds, cfg.clip_seconds);
    truth = normalize(truth);
    const auto motion = drm::make_motion(spec.velocity, cfg.clip_seconds, cfg.sample_rate, cfg.max_angle,
                                         cfg.patch_size);
    auto model = drm::default_skin_model(cfg.pulse_ratio);
    model.I0 = spec.illumination;
    const auto patch = drm::PatchSpec::make_default(cfg.patch_size, spec.skin, spec.background);
    const drm::NoiseModel noise{cfg.quantization_bits, cfg.noise_sigma, spec.noise_seed};

    RenderedClip out;
    out.spec = spec;
    out.video = drm::render_patch_video(patch, model, cfg.modulation, truth, motion, noise, cfg.exact,
                                        cfg.skin_tones);
    out.skin_mask = patch.skin_mask;
    out.roi_shift = motion.pixel_shift;
    out.hr_reference = dsp::estimate_hr(truth.samples, truth.sample_rate);
    out.truth = std::move(truth);
    return out;
}

inline json sidecar_json(const SceneConfig& cfg, const RenderedClip& clip, std::uint64_t seed,
                         const std::string& truth_file)
{
    const auto& s = clip.spec;
    return json{{"clip", s.name()},
                {"identity", s.identity},
                {"clip_index", s.clip},
                {"velocity_deg_s", s.velocity},
                {"skin_type", drm::to_string(s.skin)},
                {"hr_nominal_bpm", cfg.recordings.empty() ? json(s.hr_bpm) : json(nullptr)},
                {"hr_reference_bpm", clip.hr_reference},
                {"illumination", s.illumination},
                {"background", {s.background[0], s.background[1], s.background[2]}},
                {"noise_seed", s.noise_seed},
                {"seed", seed},
                {"truth", truth_file},
                {"scene", to_json(cfg)}};
}

} // namespace pulseforge::synth
