#pragma once

// Band-pass filter design, zero-phase filtering, periodogram, heart-rate
// estimation and BVP signal-to-noise ratio.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <mutex>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <fftw3.h>

#include "pulseforge/error.hpp"
#include "pulseforge/io_util.hpp"

namespace pulseforge::dsp {

/// Pulse band used for filtering and heart-rate search.
inline constexpr double kPulseBandLowHz = 0.7;
inline constexpr double kPulseBandHighHz = 2.5;
inline constexpr int kPulseFilterOrder = 6;

/// Second-order section, a0 normalized to 1.
struct Biquad {
    double b0 = 1, b1 = 0, b2 = 0;
    double a1 = 0, a2 = 0;

    std::complex<double> response(std::complex<double> z) const
    {
        const auto zi = 1.0 / z;
        return (b0 + b1 * zi + b2 * zi * zi) / (1.0 + a1 * zi + a2 * zi * zi);
    }

    /// Poles of 1 + a1 z^-1 + a2 z^-2.
    std::pair<std::complex<double>, std::complex<double>> poles() const
    {
        const std::complex<double> disc = std::sqrt(std::complex<double>(a1 * a1 - 4.0 * a2));
        return {(-a1 + disc) / 2.0, (-a1 - disc) / 2.0};
    }
};

/// Butterworth band-pass as a cascade of biquads. `order` is the order of the
/// low-pass prototype; the band-pass transfer function has 2*order poles.
struct BandpassFilter {
    int order = 0;
    double low_hz = 0, high_hz = 0;
    double sample_rate = 0;
    std::vector<Biquad> sections;

    std::complex<double> response(double freq_hz) const
    {
        const auto z = std::polar(1.0, 2.0 * std::numbers::pi * freq_hz / sample_rate);
        std::complex<double> h = 1.0;
        for (const auto& s : sections)
            h *= s.response(z);
        return h;
    }

    double magnitude_db(double freq_hz) const { return 20.0 * std::log10(std::abs(response(freq_hz))); }

    double max_pole_radius() const
    {
        double r = 0.0;
        for (const auto& s : sections) {
            auto [p1, p2] = s.poles();
            r = std::max({r, std::abs(p1), std::abs(p2)});
        }
        return r;
    }

    /// Reflective padding applied by filtfilt: three times the polynomial order.
    std::size_t padding() const { return 3 * 2 * sections.size(); }

    std::string to_json() const
    {
        std::string s = "{\"type\":\"butterworth_bandpass\",\"order\":" + std::to_string(order) +
                        ",\"low_hz\":" + io::fmt(low_hz) + ",\"high_hz\":" + io::fmt(high_hz) +
                        ",\"sample_rate\":" + io::fmt(sample_rate) + ",\"sos\":[";
        for (std::size_t i = 0; i < sections.size(); ++i) {
            const auto& q = sections[i];
            if (i)
                s += ',';
            s += "[" + io::fmt(q.b0) + "," + io::fmt(q.b1) + "," + io::fmt(q.b2) + ",1," + io::fmt(q.a1) + "," +
                 io::fmt(q.a2) + "]";
        }
        return s + "]}";
    }
};

/// Analog prototype -> band-pass transform -> bilinear transform with
/// prewarped edges, factored into biquads with zeros at z = +1 and z = -1.
/// The overall gain is unity at the prewarped center frequency.
inline BandpassFilter design_butterworth(int order, double low_hz, double high_hz, double sample_rate)
{
    using cd = std::complex<double>;
    if (order < 2 || order % 2 != 0)
        throw ConfigError("design_butterworth: order must be an even integer >= 2, got " + std::to_string(order));
    if (!(sample_rate > 0.0) || !(low_hz > 0.0) || !(low_hz < high_hz) || !(high_hz < sample_rate / 2.0))
        throw ConfigError("design_butterworth: need 0 < low < high < fs/2, got low=" + io::fmt(low_hz) +
                          " high=" + io::fmt(high_hz) + " fs=" + io::fmt(sample_rate));

    const double fs2 = 2.0 * sample_rate;
    const double w1 = fs2 * std::tan(std::numbers::pi * low_hz / sample_rate);
    const double w2 = fs2 * std::tan(std::numbers::pi * high_hz / sample_rate);
    const double bw = w2 - w1;
    const double w0sq = w1 * w2;

    std::vector<cd> zpoles;
    zpoles.reserve(2 * order);
    for (int k = 1; k <= order; ++k) {
        const cd p = std::polar(1.0, std::numbers::pi * (2.0 * k + order - 1.0) / (2.0 * order));
        const cd half = p * bw / 2.0;
        const cd root = std::sqrt(half * half - w0sq);
        for (cd s : {half + root, half - root})
            zpoles.push_back((fs2 + s) / (fs2 - s));
    }

    std::vector<cd> upper;
    for (const auto& z : zpoles)
        if (z.imag() > 0.0)
            upper.push_back(z);
    if (upper.size() != static_cast<std::size_t>(order))
        throw ConfigError("design_butterworth: band too wide for complex pole pairing");
    std::sort(upper.begin(), upper.end(), [](cd a, cd b) { return std::abs(a) < std::abs(b); });

    BandpassFilter f;
    f.order = order;
    f.low_hz = low_hz;
    f.high_hz = high_hz;
    f.sample_rate = sample_rate;
    for (const auto& z : upper) {
        Biquad q;
        q.b0 = 1.0;
        q.b1 = 0.0;
        q.b2 = -1.0;
        q.a1 = -2.0 * z.real();
        q.a2 = std::norm(z);
        f.sections.push_back(q);
    }

    const double center_hz = sample_rate / std::numbers::pi * std::atan(std::sqrt(w0sq) / fs2);
    const double gain = 1.0 / std::abs(f.response(center_hz));
    const double per_section = std::pow(gain, 1.0 / order);
    for (auto& q : f.sections) {
        q.b0 *= per_section;
        q.b1 *= per_section;
        q.b2 *= per_section;
    }
    return f;
}

/// The pulse-band filter applied to every BVP estimate.
inline BandpassFilter pulse_band_filter(double sample_rate)
{
    return design_butterworth(kPulseFilterOrder, kPulseBandLowHz, kPulseBandHighHz, sample_rate);
}

namespace detail {

/// Transposed direct-form II cascade; `state` holds two values per section.
inline void sosfilt_inplace(const BandpassFilter& f, std::vector<double>& x, std::vector<double> state)
{
    for (std::size_t s = 0; s < f.sections.size(); ++s) {
        const auto& q = f.sections[s];
        double z1 = state[2 * s], z2 = state[2 * s + 1];
        for (double& v : x) {
            const double y = q.b0 * v + z1;
            z1 = q.b1 * v - q.a1 * y + z2;
            z2 = q.b2 * v - q.a2 * y;
            v = y;
        }
    }
}

/// Per-unit-input steady-state of each section under a constant input,
/// scaled through the cascade.
inline std::vector<double> step_state(const BandpassFilter& f)
{
    std::vector<double> zi(2 * f.sections.size());
    double scale = 1.0;
    for (std::size_t s = 0; s < f.sections.size(); ++s) {
        const auto& q = f.sections[s];
        const double g = (q.b0 + q.b1 + q.b2) / (1.0 + q.a1 + q.a2);
        const double z2 = q.b2 - q.a2 * g;
        const double z1 = q.b1 - q.a1 * g + z2;
        zi[2 * s] = scale * z1;
        zi[2 * s + 1] = scale * z2;
        scale *= g;
    }
    return zi;
}

} // namespace detail

/// Zero-phase forward-backward filtering with odd reflective padding and
/// steady-state initial conditions at both ends.
inline std::vector<double> filtfilt(const BandpassFilter& f, std::span<const double> signal)
{
    const std::size_t pad = f.padding();
    const std::size_t n = signal.size();
    if (n <= pad)
        throw DomainError("filtfilt: signal of " + std::to_string(n) + " samples is too short (need > " +
                          std::to_string(pad) + ")");

    std::vector<double> ext(n + 2 * pad);
    for (std::size_t i = 0; i < pad; ++i) {
        ext[i] = 2.0 * signal[0] - signal[pad - i];
        ext[n + pad + i] = 2.0 * signal[n - 1] - signal[n - 2 - i];
    }
    std::copy(signal.begin(), signal.end(), ext.begin() + static_cast<std::ptrdiff_t>(pad));

    const auto zi = detail::step_state(f);
    auto scaled = [&](double x0) {
        auto z = zi;
        for (double& v : z)
            v *= x0;
        return z;
    };
    detail::sosfilt_inplace(f, ext, scaled(ext.front()));
    std::reverse(ext.begin(), ext.end());
    detail::sosfilt_inplace(f, ext, scaled(ext.front()));
    std::reverse(ext.begin(), ext.end());
    return {ext.begin() + static_cast<std::ptrdiff_t>(pad), ext.begin() + static_cast<std::ptrdiff_t>(pad + n)};
}

struct Spectrum {
    std::vector<double> frequencies; // Hz, 0 .. Nyquist
    std::vector<double> power;

    double resolution() const { return frequencies.size() > 1 ? frequencies[1] - frequencies[0] : 0.0; }
};

inline std::size_t next_pow2(std::size_t n)
{
    std::size_t p = 1;
    while (p < n)
        p <<= 1;
    return p;
}

/// Symmetric Hann window.
inline std::vector<double> hann(std::size_t n)
{
    std::vector<double> w(n, 1.0);
    if (n < 2)
        return w;
    for (std::size_t i = 0; i < n; ++i)
        w[i] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n - 1)));
    return w;
}

namespace detail {
// The FFTW planner is not reentrant.
inline std::mutex& fftw_planner_mutex()
{
    static std::mutex m;
    return m;
}
} // namespace detail

/// One-sided Hann-windowed periodogram, zero-padded to 8x the next power of
/// two. Power is scaled so that it sums to the windowed signal energy.
inline Spectrum power_spectrum(std::span<const double> signal, double sample_rate)
{
    const std::size_t n = signal.size();
    if (n < 2)
        throw DomainError("power_spectrum: need at least 2 samples");
    if (!(sample_rate > 0.0))
        throw DomainError("power_spectrum: sample_rate must be positive");
    const std::size_t nfft = 8 * next_pow2(n);
    const std::size_t bins = nfft / 2 + 1;

    double* in = fftw_alloc_real(nfft);
    fftw_complex* out = fftw_alloc_complex(bins);
    fftw_plan plan;
    {
        std::lock_guard lock(detail::fftw_planner_mutex());
        plan = fftw_plan_dft_r2c_1d(static_cast<int>(nfft), in, out, FFTW_ESTIMATE);
    }
    const auto w = hann(n);
    for (std::size_t i = 0; i < n; ++i)
        in[i] = signal[i] * w[i];
    std::fill(in + n, in + nfft, 0.0);
    fftw_execute(plan);

    Spectrum s;
    s.frequencies.resize(bins);
    s.power.resize(bins);
    const double inv = 1.0 / static_cast<double>(nfft);
    for (std::size_t k = 0; k < bins; ++k) {
        s.frequencies[k] = static_cast<double>(k) * sample_rate * inv;
        const double mag2 = out[k][0] * out[k][0] + out[k][1] * out[k][1];
        const bool edge = k == 0 || k == nfft / 2;
        s.power[k] = (edge ? 1.0 : 2.0) * mag2 * inv;
    }
    {
        std::lock_guard lock(detail::fftw_planner_mutex());
        fftw_destroy_plan(plan);
    }
    fftw_free(in);
    fftw_free(out);
    return s;
}

namespace detail {
inline std::vector<double> demeaned(std::span<const double> x)
{
    std::vector<double> out(x.begin(), x.end());
    double m = 0.0;
    for (double v : out)
        m += v;
    m /= static_cast<double>(out.size());
    for (double& v : out)
        v -= m;
    return out;
}
} // namespace detail

/// Heart rate (BPM) from the strongest spectral peak inside the pulse band,
/// refined by a 3-point parabola on log power. The mean is removed first.
inline double estimate_hr(std::span<const double> signal, double sample_rate)
{
    if (static_cast<double>(signal.size()) + 1e-9 < 10.0 * sample_rate)
        throw DomainError("estimate_hr: need at least 10 s of samples, got " +
                          io::fmt(static_cast<double>(signal.size()) / sample_rate) + " s");
    const auto s = power_spectrum(detail::demeaned(signal), sample_rate);

    std::size_t best = 0;
    double best_power = -1.0;
    for (std::size_t k = 0; k < s.frequencies.size(); ++k) {
        const double f = s.frequencies[k];
        if (f < kPulseBandLowHz || f > kPulseBandHighHz)
            continue;
        if (s.power[k] > best_power) {
            best_power = s.power[k];
            best = k;
        }
    }
    if (!(best_power > 0.0))
        throw DegenerateInputError("estimate_hr: no power inside the pulse band");

    double f_peak = s.frequencies[best];
    if (best > 0 && best + 1 < s.power.size()) {
        constexpr double floor = std::numeric_limits<double>::min();
        const double l = std::log(std::max(s.power[best - 1], floor));
        const double c = std::log(std::max(s.power[best], floor));
        const double r = std::log(std::max(s.power[best + 1], floor));
        const double denom = l - 2.0 * c + r;
        if (denom < 0.0) {
            const double delta = std::clamp(0.5 * (l - r) / denom, -0.5, 0.5);
            f_peak += delta * s.resolution();
        }
    }
    return 60.0 * f_peak;
}

/// Sliding-window heart rate (non-default mode): one estimate per stride.
inline std::vector<double> estimate_hr_windowed(std::span<const double> signal, double sample_rate,
                                                double window_s = 30.0, double stride_s = 1.0)
{
    const auto win = static_cast<std::size_t>(std::llround(window_s * sample_rate));
    const auto stride = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(stride_s * sample_rate)));
    if (win > signal.size())
        throw DomainError("estimate_hr_windowed: window longer than signal");
    std::vector<double> out;
    for (std::size_t start = 0; start + win <= signal.size(); start += stride)
        out.push_back(estimate_hr(signal.subspan(start, win), sample_rate));
    return out;
}

inline constexpr double kSnrCapDb = 60.0;
inline constexpr double kSnrTemplateHalfWidthHz = 0.1;
inline constexpr double kSnrBandLowHz = 0.5;
inline constexpr double kSnrBandHighHz = 5.0;

/// BVP SNR in dB: power within +-0.1 Hz of the reference heart rate and its
/// second harmonic over all other power in [0.5, 5] Hz. Capped at +60 dB.
inline double snr_bvp(std::span<const double> signal, double sample_rate, double hr_ref_bpm)
{
    if (!(hr_ref_bpm >= 42.0 && hr_ref_bpm <= 150.0))
        throw DomainError("snr_bvp: hr_ref must lie in [42, 150] BPM, got " + io::fmt(hr_ref_bpm));
    const auto s = power_spectrum(detail::demeaned(signal), sample_rate);
    const double f1 = hr_ref_bpm / 60.0;
    const double f2 = 2.0 * f1;
    double in_template = 0.0, outside = 0.0;
    for (std::size_t k = 0; k < s.frequencies.size(); ++k) {
        const double f = s.frequencies[k];
        if (f < kSnrBandLowHz || f > kSnrBandHighHz)
            continue;
        if (std::abs(f - f1) <= kSnrTemplateHalfWidthHz || std::abs(f - f2) <= kSnrTemplateHalfWidthHz)
            in_template += s.power[k];
        else
            outside += s.power[k];
    }
    if (!(in_template > 0.0))
        return -kSnrCapDb;
    if (!(outside > 0.0))
        return kSnrCapDb;
    return std::clamp(10.0 * std::log10(in_template / outside), -kSnrCapDb, kSnrCapDb);
}

inline std::string spectrum_csv(const Spectrum& s)
{
    std::string out = "freq_hz,power\n";
    for (std::size_t k = 0; k < s.frequencies.size(); ++k)
        out += io::fmt(s.frequencies[k]) + "," + io::fmt(s.power[k]) + "\n";
    return out;
}

} // namespace pulseforge::dsp
