#pragma once

// Pulse waveforms: parametric synthesis, PPG CSV ingestion, resampling and
// standardization.
//
// Resampling uses linear interpolation rather than a band-limited kernel.
// The pulse band (below 4 Hz) sits far below Nyquist at every rate this
// library works with (30 Hz video, 125 Hz contact PPG), so the
// interpolation error stays negligible.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pulseforge/error.hpp"
#include "pulseforge/io_util.hpp"
#include "pulseforge/random.hpp"

namespace pulseforge {

struct PulseWaveform {
    std::vector<double> samples;
    double sample_rate = 0.0;
    std::optional<double> hr_reference; // beats per minute

    std::size_t size() const { return samples.size(); }
    double duration() const { return static_cast<double>(samples.size()) / sample_rate; }

    void validate() const
    {
        if (!(sample_rate > 0.0) || !std::isfinite(sample_rate))
            throw DomainError("waveform sample_rate must be positive");
        if (samples.empty())
            throw DomainError("waveform has no samples");
    }
};

/// Relative amplitudes and phases of the harmonic pulse shape.
inline constexpr double kPulseHarmonicAmplitude[3] = {1.0, 0.3, 0.1};
inline constexpr double kPulseHarmonicPhase[3] = {0.0, std::numbers::pi / 2, std::numbers::pi};

inline std::size_t sample_count(double duration_s, double sample_rate)
{
    return static_cast<std::size_t>(std::llround(duration_s * sample_rate));
}

PulseWaveform normalize(const PulseWaveform& w);

/// Harmonic pulse at hr_bpm/60 Hz. The seed selects the starting phase of the
/// cardiac cycle; the shape itself is fixed.
inline PulseWaveform synth_pulse(double hr_bpm, double duration_s, double sample_rate, std::uint64_t seed)
{
    if (!(hr_bpm >= 30.0 && hr_bpm <= 240.0))
        throw DomainError("synth_pulse: hr_bpm must lie in [30, 240], got " + io::fmt(hr_bpm));
    if (!(duration_s > 0.0))
        throw DomainError("synth_pulse: duration must be positive");
    if (!(sample_rate > 0.0))
        throw DomainError("synth_pulse: sample_rate must be positive");

    const std::size_t n = sample_count(duration_s, sample_rate);
    if (n < 2)
        throw DomainError("synth_pulse: duration too short for the sample rate");

    auto rng = make_rng(seed, {0x70756c7365});
    const double phase0 = 2.0 * std::numbers::pi * uniform01(rng);
    const double omega = 2.0 * std::numbers::pi * hr_bpm / 60.0;

    PulseWaveform w;
    w.sample_rate = sample_rate;
    w.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double theta = omega * static_cast<double>(i) / sample_rate + phase0;
        double v = 0.0;
        for (int k = 0; k < 3; ++k)
            v += kPulseHarmonicAmplitude[k] * std::sin((k + 1) * theta + kPulseHarmonicPhase[k]);
        w.samples[i] = v;
    }
    w = normalize(w);
    w.hr_reference = hr_bpm;
    return w;
}

inline PulseWaveform normalize(const PulseWaveform& w)
{
    w.validate();
    const std::size_t n = w.samples.size();
    if (n < 2)
        throw DegenerateInputError("normalize: need at least 2 samples");
    double mean = 0.0;
    for (double v : w.samples)
        mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : w.samples)
        var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    if (!(var > 0.0))
        throw DegenerateInputError("normalize: constant waveform has zero variance");
    const double inv_std = 1.0 / std::sqrt(var);

    PulseWaveform out = w;
    for (double& v : out.samples)
        v = (v - mean) * inv_std;
    return out;
}

/// Linear interpolation onto the uniform grid k / target_rate.
inline PulseWaveform resample(const PulseWaveform& w, double target_rate)
{
    w.validate();
    if (!(target_rate > 0.0))
        throw DomainError("resample: target_rate must be positive");
    const std::size_t n_in = w.samples.size();
    const std::size_t n_out = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(static_cast<double>(n_in) * target_rate / w.sample_rate)));

    PulseWaveform out;
    out.sample_rate = target_rate;
    out.hr_reference = w.hr_reference;
    out.samples.resize(n_out);
    const double step = w.sample_rate / target_rate;
    for (std::size_t k = 0; k < n_out; ++k) {
        const double pos = static_cast<double>(k) * step;
        const auto i = static_cast<std::size_t>(pos);
        if (i + 1 >= n_in) {
            out.samples[k] = w.samples[n_in - 1];
            continue;
        }
        const double frac = pos - static_cast<double>(i);
        out.samples[k] = frac == 0.0 ? w.samples[i] : w.samples[i] + frac * (w.samples[i + 1] - w.samples[i]);
    }
    return out;
}

/// Samples covering [start_s, start_s + duration_s).
inline PulseWaveform segment(const PulseWaveform& w, double start_s, double duration_s)
{
    w.validate();
    const std::size_t begin = sample_count(start_s, w.sample_rate);
    const std::size_t count = sample_count(duration_s, w.sample_rate);
    if (begin + count > w.samples.size())
        throw DomainError("segment: [" + io::fmt(start_s) + ", " + io::fmt(start_s + duration_s) +
                          ") s exceeds waveform duration " + io::fmt(w.duration()) + " s");
    PulseWaveform out;
    out.sample_rate = w.sample_rate;
    out.hr_reference = w.hr_reference;
    out.samples.assign(w.samples.begin() + static_cast<std::ptrdiff_t>(begin),
                       w.samples.begin() + static_cast<std::ptrdiff_t>(begin + count));
    return out;
}

/// Only the leading part of a long recording drives synthesis.
inline constexpr double kRecordingUseSeconds = 90.0;

inline PulseWaveform leading(const PulseWaveform& w, double max_seconds = kRecordingUseSeconds)
{
    w.validate();
    const std::size_t keep = std::min(w.samples.size(), sample_count(max_seconds, w.sample_rate));
    PulseWaveform out = w;
    out.samples.resize(keep);
    return out;
}

/// Reads a PPG trace. Accepted layouts:
///   optional comment line `# sample_rate_hz=<float>`
///   header `amplitude` (rate comes from the comment line) or `time_s,amplitude`
///   one numeric row per sample.
/// With a time column the rate is inferred from the mean spacing.
inline PulseWaveform load_ppg_csv(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw ParseError(path.string() + ": cannot open file");

    const std::string where = path.string() + ":";
    std::optional<double> declared_rate;
    int columns = 0;
    std::vector<double> times;
    std::vector<double> values;
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        auto line = io::trim(raw);
        if (line.empty())
            continue;
        if (line.front() == '#') {
            auto body = io::trim(line.substr(1));
            constexpr std::string_view key = "sample_rate_hz=";
            if (body.starts_with(key)) {
                double r;
                if (!io::parse_double(body.substr(key.size()), r) || !(r > 0.0))
                    throw ParseError(where + std::to_string(line_no) + ": invalid sample_rate_hz");
                declared_rate = r;
            }
            continue;
        }
        if (columns == 0) {
            if (line == "amplitude")
                columns = 1;
            else if (line == "time_s,amplitude")
                columns = 2;
            else
                throw ParseError(where + std::to_string(line_no) +
                                 ": expected header 'amplitude' or 'time_s,amplitude'");
            continue;
        }
        if (columns == 1) {
            double v;
            if (!io::parse_double(line, v))
                throw ParseError(where + std::to_string(line_no) + ": non-numeric amplitude '" +
                                 std::string(line) + "'");
            values.push_back(v);
        } else {
            const auto comma = line.find(',');
            double t, v;
            if (comma == std::string_view::npos || !io::parse_double(line.substr(0, comma), t) ||
                !io::parse_double(line.substr(comma + 1), v))
                throw ParseError(where + std::to_string(line_no) + ": non-numeric row '" + std::string(line) + "'");
            if (!times.empty() && !(t > times.back()))
                throw ParseError(where + std::to_string(line_no) + ": time column is not strictly increasing");
            times.push_back(t);
            values.push_back(v);
        }
    }
    if (columns == 0)
        throw ParseError(where + " empty file (no header)");
    if (values.empty())
        throw ParseError(where + " no samples");

    PulseWaveform w;
    w.samples = std::move(values);
    if (columns == 2) {
        if (times.size() < 2)
            throw ParseError(where + " need at least two timed samples to infer the sample rate");
        const double mean_dt = (times.back() - times.front()) / static_cast<double>(times.size() - 1);
        w.sample_rate = 1.0 / mean_dt;
    } else {
        if (!declared_rate)
            throw ParseError(where + " single-column file needs a '# sample_rate_hz=' line");
        w.sample_rate = *declared_rate;
    }
    return w;
}

/// Writes the two-column layout accepted by load_ppg_csv.
inline std::string ppg_csv(const PulseWaveform& w)
{
    std::string out = "# sample_rate_hz=" + io::fmt(w.sample_rate) + "\n";
    out += "time_s,amplitude\n";
    for (std::size_t i = 0; i < w.samples.size(); ++i) {
        out += io::fmt(static_cast<double>(i) / w.sample_rate);
        out += ',';
        out += io::fmt(w.samples[i]);
        out += '\n';
    }
    return out;
}

} // namespace pulseforge
