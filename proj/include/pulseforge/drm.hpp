#pragma once

// Dichromatic reflection model of a skin pixel under a single illuminant:
//
//   C(t) = I(t) * (v_s(t) + v_d(t)) + v_n(t)
//   v_d(t) = u_d d0 + (u_abs + u_sub) p(t)
//   v_s(t) = u_s (s0 + Phi(m, p))
//   I(t)   = I0 (1 + Psi(m, p))
//   u_c c0 = u_s s0 + u_d d0
//
// Phi and Psi are first-order couplings of the motion signal m(t) and the
// pulse p(t). The pulsatile term is pulse_amplitude * unit(u_abs + u_sub) * p
// with p standardized to unit variance.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "pulseforge/error.hpp"
#include "pulseforge/io_util.hpp"
#include "pulseforge/random.hpp"
#include "pulseforge/waveform.hpp"

namespace pulseforge::drm {

using Rgb = Eigen::Vector3d;

inline constexpr double kUnitTolerance = 1e-9;

/// Normalizes a color direction; components must be non-negative.
inline Rgb unit_color(const Rgb& v, const char* what)
{
    if ((v.array() < 0.0).any() || !v.allFinite())
        throw ConfigError(std::string(what) + ": color components must be finite and non-negative");
    const double n = v.norm();
    if (!(n > 0.0))
        throw ConfigError(std::string(what) + ": zero color vector");
    return v / n;
}

/// Relative pulsatile strength per channel, strongest in green where
/// hemoglobin absorbs most within the camera bands.
inline Rgb hemoglobin_channel_weights()
{
    return Rgb(0.33, 0.77, 0.53).normalized();
}

struct SkinOpticalModel {
    Rgb u_c, u_s, u_d, u_abs, u_sub;
    double c0 = 0, d0 = 0, s0 = 0;
    double I0 = 0;
    double pulse_amplitude = 0;
    /// Per-channel multiplier on I0 (skin-tone attenuation); ones by default.
    Rgb channel_gain = Rgb::Ones();

    /// Builds a model from the specular and diffuse parts; u_c and c0 follow
    /// from u_c c0 = u_s s0 + u_d d0. pulse_ratio sets pulse_amplitude / c0.
    static SkinOpticalModel from_components(const Rgb& light_color, double s0, const Rgb& skin_color, double d0,
                                            double I0, double pulse_ratio,
                                            const Rgb& absorption = hemoglobin_channel_weights(),
                                            const Rgb& scattering = hemoglobin_channel_weights())
    {
        if (!(s0 >= 0.0) || !(d0 >= 0.0) || !(I0 >= 0.0) || !(pulse_ratio >= 0.0))
            throw ConfigError("SkinOpticalModel: strengths must be non-negative");
        SkinOpticalModel m;
        m.u_s = unit_color(light_color, "u_s");
        m.u_d = unit_color(skin_color, "u_d");
        m.u_abs = unit_color(absorption, "u_abs");
        m.u_sub = unit_color(scattering, "u_sub");
        m.s0 = s0;
        m.d0 = d0;
        const Rgb combined = m.u_s * s0 + m.u_d * d0;
        m.c0 = combined.norm();
        if (!(m.c0 > 0.0))
            throw ConfigError("SkinOpticalModel: stationary reflection is zero");
        m.u_c = combined / m.c0;
        m.I0 = I0;
        m.pulse_amplitude = pulse_ratio * m.c0;
        return m;
    }

    Rgb pulsatile_direction() const { return (u_abs + u_sub).normalized(); }

    /// The linearized form is only trusted for small pulsatile strength.
    bool linearization_valid() const { return pulse_amplitude <= 0.01 * c0; }

    void validate() const
    {
        for (const Rgb* v : {&u_c, &u_s, &u_d, &u_abs, &u_sub}) {
            if (std::abs(v->norm() - 1.0) > kUnitTolerance || (v->array() < 0.0).any())
                throw ConfigError("SkinOpticalModel: color vectors must be non-negative unit vectors");
        }
        const Rgb lhs = u_c * c0;
        const Rgb rhs = u_s * s0 + u_d * d0;
        if ((lhs - rhs).cwiseAbs().maxCoeff() > kUnitTolerance)
            throw ConfigError("SkinOpticalModel: u_c c0 != u_s s0 + u_d d0");
        if (!(c0 >= 0 && d0 >= 0 && s0 >= 0 && I0 >= 0))
            throw ConfigError("SkinOpticalModel: strengths must be non-negative");
    }
};

/// Light source close to white, a light skin tone, pulsatile ratio 0.005.
inline SkinOpticalModel default_skin_model(double pulse_ratio = 0.005)
{
    return SkinOpticalModel::from_components(Rgb(1.0, 0.97, 0.92), 0.1, Rgb(0.76, 0.55, 0.45), 0.8, 1.0,
                                             pulse_ratio);
}

struct ModulationModel {
    double phi_motion = 0, phi_pulse = 0;
    double psi_motion = 0, psi_pulse = 0;

    double phi(double m, double p) const { return phi_motion * m + phi_pulse * p; }
    double psi(double m, double p) const { return psi_motion * m + psi_pulse * p; }

    void validate() const
    {
        if (!std::isfinite(phi_motion) || !std::isfinite(phi_pulse) || !std::isfinite(psi_motion) ||
            !std::isfinite(psi_pulse))
            throw ConfigError("ModulationModel: coefficients must be finite");
    }
};

struct MotionTrace {
    double angular_velocity = 0; // deg/s
    double max_angle = 30;       // deg
    double sample_rate = 0;
    std::vector<double> m;       // yaw / max_angle, in [-1, 1]
    std::vector<int> pixel_shift;
};

/// Horizontal shift at full deflection, as a fraction of the patch width.
inline constexpr double kShiftFraction = 1.0 / 8.0;

/// Triangular yaw sweep 0 -> +max -> -max -> 0 at constant angular speed.
inline MotionTrace make_motion(double angular_velocity, double duration_s, double sample_rate,
                               double max_angle_deg = 30.0, int patch_width = 36)
{
    if (!(angular_velocity >= 0.0))
        throw DomainError("make_motion: angular velocity must be >= 0");
    if (!(max_angle_deg > 0.0) || !(sample_rate > 0.0) || !(duration_s > 0.0))
        throw DomainError("make_motion: max angle, rate and duration must be positive");
    const std::size_t n = sample_count(duration_s, sample_rate);
    MotionTrace mt;
    mt.angular_velocity = angular_velocity;
    mt.max_angle = max_angle_deg;
    mt.sample_rate = sample_rate;
    mt.m.resize(n);
    mt.pixel_shift.resize(n);
    const double a = max_angle_deg;
    for (std::size_t i = 0; i < n; ++i) {
        const double travelled = angular_velocity * static_cast<double>(i) / sample_rate;
        const double s = std::fmod(travelled, 4.0 * a);
        const double angle = s <= a ? s : (s <= 3.0 * a ? 2.0 * a - s : s - 4.0 * a);
        mt.m[i] = std::clamp(angle / a, -1.0, 1.0);
        mt.pixel_shift[i] = static_cast<int>(std::lround(mt.m[i] * patch_width * kShiftFraction));
    }
    return mt;
}

/// Static trace of the given length (no motion).
inline MotionTrace still_motion(std::size_t frames, double sample_rate)
{
    MotionTrace mt;
    mt.sample_rate = sample_rate;
    mt.m.assign(frames, 0.0);
    mt.pixel_shift.assign(frames, 0);
    return mt;
}

struct NoiseModel {
    std::optional<int> quantization_bits; // nullopt: no quantization
    double gaussian_sigma = 0.0;
    std::uint64_t seed = 0;

    bool active() const { return gaussian_sigma > 0.0 || quantization_bits.has_value(); }

    void validate() const
    {
        if (quantization_bits && (*quantization_bits < 1 || *quantization_bits > 16))
            throw ConfigError("NoiseModel: quantization_bits must lie in [1, 16]");
        if (!(gaussian_sigma >= 0.0))
            throw ConfigError("NoiseModel: gaussian_sigma must be >= 0");
    }
};

inline double quantize_value(double v, int bits)
{
    const double levels = std::ldexp(1.0, bits) - 1.0;
    return std::round(v * levels) / levels;
}

/// Noise-free color of one pixel sample. `amplitude_scale` multiplies the
/// pulsatile strength (spatial perfusion weight).
inline Rgb evaluate_color(const SkinOpticalModel& model, const ModulationModel& mod, double p, double m, bool exact,
                          double amplitude_scale = 1.0)
{
    const double phi = mod.phi(m, p);
    const double psi = mod.psi(m, p);
    const Rgb pulse = model.pulsatile_direction() * (model.pulse_amplitude * amplitude_scale * p);
    const Rgb stationary = model.u_c * model.c0;
    Rgb c;
    if (exact)
        c = (1.0 + psi) * (stationary + model.u_s * phi + pulse);
    else
        c = stationary + stationary * psi + model.u_s * phi + pulse;
    return model.I0 * model.channel_gain.cwiseProduct(c);
}

struct RgbSeries {
    std::vector<Rgb> values;
    double sample_rate = 0;
};

namespace detail {

inline void check_drivers(const PulseWaveform& pulse, const MotionTrace& motion)
{
    pulse.validate();
    if (motion.sample_rate != pulse.sample_rate)
        throw ConfigError("pulse (" + io::fmt(pulse.sample_rate) + " Hz) and motion (" +
                          io::fmt(motion.sample_rate) + " Hz) sample rates differ");
    if (motion.m.size() != pulse.samples.size() || motion.pixel_shift.size() != pulse.samples.size())
        throw ConfigError("pulse and motion lengths differ");
}

/// Sensor noise stream for one pixel; pixel_trace uses pixel 0.
inline Rng pixel_stream(const NoiseModel& noise, std::uint64_t pixel)
{
    return make_rng(noise.seed, {0x6e6f697365, pixel});
}

inline double finish_value(double v, const NoiseModel& noise, Rng& rng, std::normal_distribution<double>& gauss)
{
    if (noise.gaussian_sigma > 0.0)
        v += noise.gaussian_sigma * gauss(rng);
    v = std::clamp(v, 0.0, 1.0);
    if (noise.quantization_bits)
        v = quantize_value(v, *noise.quantization_bits);
    return v;
}

} // namespace detail

/// Time series of one skin pixel. exact=true evaluates the product form,
/// exact=false the first-order expansion. Gaussian sensor noise and then
/// quantization are applied last; values are clamped to [0, 1].
inline RgbSeries pixel_trace(const SkinOpticalModel& model, const ModulationModel& mod, const PulseWaveform& pulse,
                             const MotionTrace& motion, const NoiseModel& noise, bool exact)
{
    model.validate();
    mod.validate();
    noise.validate();
    detail::check_drivers(pulse, motion);

    RgbSeries out;
    out.sample_rate = pulse.sample_rate;
    out.values.resize(pulse.samples.size());
    auto rng = detail::pixel_stream(noise, 0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::size_t t = 0; t < pulse.samples.size(); ++t) {
        Rgb c = evaluate_color(model, mod, pulse.samples[t], motion.m[t], exact);
        for (int ch = 0; ch < 3; ++ch)
            c[ch] = detail::finish_value(c[ch], noise, rng, gauss);
        out.values[t] = c;
    }
    return out;
}

enum class Fitzpatrick : int { I = 1, II, III, IV, V, VI };

inline int ordinal(Fitzpatrick f) { return static_cast<int>(f); }

inline const char* to_string(Fitzpatrick f)
{
    static constexpr const char* names[] = {"I", "II", "III", "IV", "V", "VI"};
    return names[ordinal(f) - 1];
}

inline Fitzpatrick parse_fitzpatrick(std::string_view s)
{
    static constexpr std::string_view names[] = {"I", "II", "III", "IV", "V", "VI"};
    for (int i = 0; i < 6; ++i)
        if (s == names[i] || s == std::to_string(i + 1))
            return static_cast<Fitzpatrick>(i + 1);
    throw ConfigError("unknown Fitzpatrick skin type '" + std::string(s) + "' (expected I..VI)");
}

/// Per-type intensity and pulsatile-strength multipliers (type I is the
/// reference). Overridable; entries must be strictly decreasing.
struct SkinToneTable {
    std::array<double, 6> intensity{1.00, 0.85, 0.70, 0.55, 0.40, 0.28};
    std::array<double, 6> pulse{1.00, 0.90, 0.75, 0.55, 0.40, 0.30};

    void validate() const
    {
        for (int i = 1; i < 6; ++i)
            if (!(intensity[i] < intensity[i - 1]) || !(pulse[i] < pulse[i - 1]))
                throw ConfigError("SkinToneTable: multipliers must strictly decrease from type I to VI");
        if (!(intensity[5] > 0.0) || !(pulse[5] > 0.0))
            throw ConfigError("SkinToneTable: multipliers must be positive");
    }
};

struct MelaninAttenuation {
    Rgb channel_gain;
    double pulse_multiplier = 1.0;
};

inline MelaninAttenuation melanin_attenuation(Fitzpatrick type, const SkinToneTable& table = {})
{
    const int i = ordinal(type) - 1;
    return {Rgb::Constant(table.intensity[i]), table.pulse[i]};
}

inline SkinOpticalModel apply_skin_type(SkinOpticalModel model, Fitzpatrick type, const SkinToneTable& table = {})
{
    const auto att = melanin_attenuation(type, table);
    model.channel_gain = model.channel_gain.cwiseProduct(att.channel_gain);
    model.pulse_amplitude *= att.pulse_multiplier;
    return model;
}

struct PatchSpec {
    int height = 36, width = 36;
    std::vector<std::uint8_t> skin_mask; // row-major H x W
    std::vector<double> perfusion;       // row-major H x W, 0 outside skin
    Rgb background = Rgb(0.25, 0.3, 0.35);
    Fitzpatrick skin_type = Fitzpatrick::I;

    std::size_t pixels() const { return static_cast<std::size_t>(height) * static_cast<std::size_t>(width); }
    bool skin(int y, int x) const { return skin_mask[static_cast<std::size_t>(y) * width + x] != 0; }
    double perfusion_at(int y, int x) const { return perfusion[static_cast<std::size_t>(y) * width + x]; }

    void validate() const
    {
        if (height < 1 || width < 1)
            throw ConfigError("PatchSpec: dimensions must be >= 1");
        if (skin_mask.size() != pixels() || perfusion.size() != pixels())
            throw ConfigError("PatchSpec: mask/perfusion size does not match dimensions");
        for (std::size_t i = 0; i < pixels(); ++i) {
            if (!(perfusion[i] >= 0.0 && perfusion[i] <= 1.0))
                throw ConfigError("PatchSpec: perfusion must lie in [0, 1]");
            if (!skin_mask[i] && perfusion[i] != 0.0)
                throw ConfigError("PatchSpec: perfusion must be 0 outside the skin mask");
        }
        if ((background.array() < 0.0).any() || (background.array() > 1.0).any())
            throw ConfigError("PatchSpec: background must lie in [0, 1]");
    }

    /// Inscribed-ellipse skin mask with a radial raised-cosine perfusion map
    /// (floor 0.25 at the rim).
    static PatchSpec make_default(int size = 36, Fitzpatrick type = Fitzpatrick::I,
                                  const Rgb& background = Rgb(0.25, 0.3, 0.35))
    {
        PatchSpec p;
        p.height = p.width = size;
        p.background = background;
        p.skin_type = type;
        p.skin_mask.assign(p.pixels(), 0);
        p.perfusion.assign(p.pixels(), 0.0);
        const double cy = size / 2.0, cx = size / 2.0;
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const double dy = (y + 0.5 - cy) / cy, dx = (x + 0.5 - cx) / cx;
                const double r = std::sqrt(dx * dx + dy * dy);
                if (r > 1.0)
                    continue;
                const std::size_t i = static_cast<std::size_t>(y) * size + x;
                p.skin_mask[i] = 1;
                p.perfusion[i] = 0.25 + 0.75 * 0.5 * (1.0 + std::cos(std::numbers::pi * r));
            }
        return p;
    }
};

/// T x H x W x 3 clip, channel-last, values in [0, 1].
struct VideoTensor {
    std::uint32_t frames = 0, height = 0, width = 0;
    double sample_rate = 0;
    std::vector<float> data;

    VideoTensor() = default;
    VideoTensor(std::uint32_t t, std::uint32_t h, std::uint32_t w, double fs)
        : frames(t), height(h), width(w), sample_rate(fs), data(static_cast<std::size_t>(t) * h * w * 3, 0.0f)
    {
    }

    std::size_t frame_size() const { return static_cast<std::size_t>(height) * width * 3; }

    std::size_t index(std::size_t t, std::size_t y, std::size_t x, std::size_t c) const
    {
        return ((t * height + y) * width + x) * 3 + c;
    }

    float& at(std::size_t t, std::size_t y, std::size_t x, std::size_t c) { return data[index(t, y, x, c)]; }
    float at(std::size_t t, std::size_t y, std::size_t x, std::size_t c) const { return data[index(t, y, x, c)]; }

    void validate() const
    {
        if (frames < 2)
            throw ConfigError("VideoTensor: need at least 2 frames");
        if (!(sample_rate > 0.0))
            throw ConfigError("VideoTensor: sample_rate must be positive");
        if (data.size() != static_cast<std::size_t>(frames) * frame_size())
            throw ConfigError("VideoTensor: data size does not match dimensions");
        for (float v : data)
            if (!(v >= 0.0f && v <= 1.0f))
                throw ConfigError("VideoTensor: values must lie in [0, 1]");
    }
};

/// Renders a patch clip: skin pixels follow pixel_trace with perfusion-scaled
/// pulsatile strength, background pixels share the illumination factor
/// 1 + Psi, frames are shifted laterally by the motion's pixel_shift, and
/// each output pixel receives noise from its own seeded stream.
inline VideoTensor render_patch_video(const PatchSpec& spec, const SkinOpticalModel& model,
                                      const ModulationModel& mod, const PulseWaveform& pulse,
                                      const MotionTrace& motion, const NoiseModel& noise, bool exact = true,
                                      const SkinToneTable& tones = {})
{
    spec.validate();
    model.validate();
    mod.validate();
    noise.validate();
    detail::check_drivers(pulse, motion);
    if (pulse.samples.size() < 2)
        throw ConfigError("render_patch_video: need at least 2 frames");

    const auto skin_model = apply_skin_type(model, spec.skin_type, tones);
    const auto T = static_cast<std::uint32_t>(pulse.samples.size());
    const auto H = static_cast<std::uint32_t>(spec.height), W = static_cast<std::uint32_t>(spec.width);
    VideoTensor video(T, H, W, pulse.sample_rate);

    for (std::uint32_t t = 0; t < T; ++t) {
        const double p = pulse.samples[t];
        const double m = motion.m[t];
        const Rgb bg = spec.background * (1.0 + mod.psi(m, p));
        const int shift = motion.pixel_shift[t];
        for (int y = 0; y < spec.height; ++y)
            for (int x = 0; x < spec.width; ++x) {
                const int xs = x - shift;
                Rgb c = bg;
                if (xs >= 0 && xs < spec.width && spec.skin(y, xs))
                    c = evaluate_color(skin_model, mod, p, m, exact, spec.perfusion_at(y, xs));
                for (int ch = 0; ch < 3; ++ch)
                    video.at(t, y, x, ch) = static_cast<float>(std::clamp(c[ch], 0.0, 1.0));
            }
    }

    if (noise.active()) {
        std::normal_distribution<double> gauss(0.0, 1.0);
        for (std::uint32_t y = 0; y < H; ++y)
            for (std::uint32_t x = 0; x < W; ++x) {
                auto rng = detail::pixel_stream(noise, static_cast<std::uint64_t>(y) * W + x);
                gauss.reset();
                for (std::uint32_t t = 0; t < T; ++t)
                    for (int ch = 0; ch < 3; ++ch) {
                        float& v = video.at(t, y, x, ch);
                        v = static_cast<float>(detail::finish_value(v, noise, rng, gauss));
                    }
            }
    }
    return video;
}

/// Rounds every value to the nearest multiple of 1 / (2^bits - 1).
inline VideoTensor quantize(const VideoTensor& video, int bits)
{
    if (bits < 1 || bits > 16)
        throw ConfigError("quantize: bits must lie in [1, 16]");
    VideoTensor out = video;
    for (float& v : out.data)
        v = static_cast<float>(quantize_value(v, bits));
    return out;
}

} // namespace pulseforge::drm
