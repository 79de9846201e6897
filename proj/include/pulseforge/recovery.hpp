#pragma once

// Unsupervised pulse recovery from a spatially averaged RGB trace:
// plane-orthogonal-to-skin (POS), chrominance (CHROM) and FastICA.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pulseforge/drm.hpp"
#include "pulseforge/dsp.hpp"
#include "pulseforge/error.hpp"
#include "pulseforge/io_util.hpp"
#include "pulseforge/random.hpp"

namespace pulseforge::recovery {

using drm::Rgb;

struct RoiTrace {
    std::vector<Rgb> rgb;
    double sample_rate = 0;

    std::size_t size() const { return rgb.size(); }

    std::vector<double> channel(int c) const
    {
        std::vector<double> out(rgb.size());
        for (std::size_t t = 0; t < rgb.size(); ++t)
            out[t] = rgb[t][c];
        return out;
    }

    void validate() const
    {
        if (!(sample_rate > 0.0))
            throw DomainError("RoiTrace: sample_rate must be positive");
        if (static_cast<double>(rgb.size()) < 2.0 * sample_rate)
            throw DomainError("RoiTrace: need at least 2 s of samples, got " + std::to_string(rgb.size()));
        for (const auto& v : rgb)
            if (!v.allFinite())
                throw DomainError("RoiTrace: non-finite value");
    }
};

struct BvpEstimate {
    std::vector<double> samples;
    double sample_rate = 0;
    std::string method;
    bool converged = true;
};

/// Per-frame mean of the masked pixels. The mask is row-major H x W.
inline RoiTrace spatial_average(const drm::VideoTensor& video, const std::vector<std::uint8_t>& mask)
{
    const std::size_t pixels = static_cast<std::size_t>(video.height) * video.width;
    if (mask.size() != pixels)
        throw ConfigError("spatial_average: mask has " + std::to_string(mask.size()) + " entries, frame has " +
                          std::to_string(pixels));
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < pixels; ++i)
        if (mask[i])
            idx.push_back(i);
    if (idx.empty())
        throw DomainError("spatial_average: empty mask");

    RoiTrace tr;
    tr.sample_rate = video.sample_rate;
    tr.rgb.resize(video.frames);
    const double inv = 1.0 / static_cast<double>(idx.size());
    for (std::uint32_t t = 0; t < video.frames; ++t) {
        const float* frame = video.data.data() + t * video.frame_size();
        Rgb acc = Rgb::Zero();
        for (std::size_t i : idx)
            for (int c = 0; c < 3; ++c)
                acc[c] += frame[i * 3 + c];
        tr.rgb[t] = acc * inv;
    }
    return tr;
}

/// Spatial average over a mask that follows a lateral track: in frame t the
/// mask is displaced by shift[t] columns. Only mask pixels that stay inside
/// the frame for every shift are used, so each frame averages the same skin.
inline RoiTrace tracked_average(const drm::VideoTensor& video, const std::vector<std::uint8_t>& mask,
                                const std::vector<int>& shift)
{
    const std::size_t pixels = static_cast<std::size_t>(video.height) * video.width;
    if (mask.size() != pixels)
        throw ConfigError("tracked_average: mask has " + std::to_string(mask.size()) + " entries, frame has " +
                          std::to_string(pixels));
    if (shift.size() != video.frames)
        throw ConfigError("tracked_average: " + std::to_string(shift.size()) + " shifts for " +
                          std::to_string(video.frames) + " frames");
    const auto [lo, hi] = std::minmax_element(shift.begin(), shift.end());
    const int w = static_cast<int>(video.width);
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < pixels; ++i) {
        const int x = static_cast<int>(i % video.width);
        if (mask[i] && x + *lo >= 0 && x + *hi < w)
            idx.push_back(i);
    }
    if (idx.empty())
        throw DomainError("tracked_average: no mask pixel stays in frame");

    RoiTrace tr;
    tr.sample_rate = video.sample_rate;
    tr.rgb.resize(video.frames);
    const double inv = 1.0 / static_cast<double>(idx.size());
    for (std::uint32_t t = 0; t < video.frames; ++t) {
        const float* frame = video.data.data() + t * video.frame_size();
        const std::ptrdiff_t off = shift[t];
        Rgb acc = Rgb::Zero();
        for (std::size_t i : idx) {
            const auto j = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(i) + off);
            for (int c = 0; c < 3; ++c)
                acc[c] += frame[j * 3 + c];
        }
        tr.rgb[t] = acc * inv;
    }
    return tr;
}

/// Whole-frame mask.
inline std::vector<std::uint8_t> full_mask(const drm::VideoTensor& v)
{
    return std::vector<std::uint8_t>(static_cast<std::size_t>(v.height) * v.width, 1);
}

inline constexpr double kWindowSeconds = 1.6;

namespace detail {

inline double stddev(const std::vector<double>& x)
{
    double m = 0;
    for (double v : x)
        m += v;
    m /= static_cast<double>(x.size());
    double s = 0;
    for (double v : x)
        s += (v - m) * (v - m);
    return std::sqrt(s / static_cast<double>(x.size()));
}

/// Pulse band-pass, then mean removal.
inline std::vector<double> finish(const std::vector<double>& h, double fs)
{
    auto y = dsp::filtfilt(dsp::pulse_band_filter(fs), h);
    return dsp::detail::demeaned(y);
}

/// Window means of each channel; false when any mean is not positive.
inline bool window_mean(const RoiTrace& tr, std::size_t start, std::size_t len, Rgb& mean)
{
    mean.setZero();
    for (std::size_t t = start; t < start + len; ++t)
        mean += tr.rgb[t];
    mean /= static_cast<double>(len);
    return (mean.array() > 0.0).all();
}

} // namespace detail

inline std::size_t window_length(double fs)
{
    return static_cast<std::size_t>(std::ceil(kWindowSeconds * fs));
}

/// POS: per 1.6 s window (stride one sample) the temporally normalized RGB is
/// projected onto (0,1,-1) and (-2,1,1), combined as s1 + (sd1/sd2) s2 and
/// overlap-added after mean removal.
inline BvpEstimate pos(const RoiTrace& trace)
{
    trace.validate();
    const std::size_t n = trace.size();
    const std::size_t l = window_length(trace.sample_rate);
    if (l < 2 || l > n)
        throw DomainError("pos: window of " + std::to_string(l) + " samples does not fit the trace");

    std::vector<double> h(n, 0.0), s1(l), s2(l), w(l);
    for (std::size_t m = 0; m + l <= n; ++m) {
        Rgb mean;
        if (!detail::window_mean(trace, m, l, mean))
            continue;
        for (std::size_t k = 0; k < l; ++k) {
            const Rgb c = trace.rgb[m + k].cwiseQuotient(mean);
            s1[k] = c[1] - c[2];
            s2[k] = -2.0 * c[0] + c[1] + c[2];
        }
        const double sd2 = detail::stddev(s2);
        const double alpha = sd2 > 0.0 ? detail::stddev(s1) / sd2 : 0.0;
        double mu = 0;
        for (std::size_t k = 0; k < l; ++k) {
            w[k] = s1[k] + alpha * s2[k];
            mu += w[k];
        }
        mu /= static_cast<double>(l);
        for (std::size_t k = 0; k < l; ++k)
            h[m + k] += w[k] - mu;
    }
    return {detail::finish(h, trace.sample_rate), trace.sample_rate, "pos", true};
}

/// CHROM: 1.6 s Hann windows at 50% overlap. Each window is normalized by its
/// channel means, X = 3R - 2G and Y = 1.5R + G - 1.5B are band-passed and
/// combined as X - (sdX/sdY) Y.
inline BvpEstimate chrom(const RoiTrace& trace)
{
    trace.validate();
    const double fs = trace.sample_rate;
    const std::size_t n = trace.size();
    std::size_t l = window_length(fs);
    l += l % 2;
    const auto filter = dsp::pulse_band_filter(fs);
    if (l > n)
        throw DomainError("chrom: window of " + std::to_string(l) + " samples does not fit the trace");
    if (l <= filter.padding())
        throw DomainError("chrom: window of " + std::to_string(l) + " samples is too short for the pulse filter at " +
                          io::fmt(fs) + " Hz");
    const std::size_t hop = l / 2;

    // periodic Hann: overlapping halves sum to one
    std::vector<double> win(l);
    for (std::size_t k = 0; k < l; ++k)
        win[k] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(l)));

    std::vector<double> h(n, 0.0), x(l), y(l);
    for (std::size_t m = 0; m + l <= n; m += hop) {
        Rgb mean;
        if (!detail::window_mean(trace, m, l, mean))
            continue;
        for (std::size_t k = 0; k < l; ++k) {
            const Rgb c = trace.rgb[m + k].cwiseQuotient(mean);
            x[k] = 3.0 * c[0] - 2.0 * c[1];
            y[k] = 1.5 * c[0] + c[1] - 1.5 * c[2];
        }
        const auto xf = dsp::filtfilt(filter, x);
        const auto yf = dsp::filtfilt(filter, y);
        const double sdy = detail::stddev(yf);
        const double alpha = sdy > 0.0 ? detail::stddev(xf) / sdy : 0.0;
        for (std::size_t k = 0; k < l; ++k)
            h[m + k] += win[k] * (xf[k] - alpha * yf[k]);
    }
    return {detail::finish(h, fs), fs, "chrom", true};
}

struct IcaOptions {
    int max_iterations = 200;
    double tolerance = 1e-6;
    double detrend_seconds = 2.0;
    /// Eigenvalues below this fraction of the largest are dropped in whitening.
    double rank_tolerance = 1e-10;
};

struct IcaResult {
    Eigen::MatrixXd components; // r x T, unit variance rows
    int selected = 0;
    int iterations = 0;
    bool converged = true;
};

namespace detail {

/// Subtracts a centered moving average. Near the ends the window keeps its
/// length and slides inward instead of shrinking.
inline std::vector<double> detrend(const std::vector<double>& x, std::size_t window)
{
    const std::size_t n = x.size();
    window = std::min(window, n);
    const std::size_t half = window / 2;
    std::vector<double> prefix(n + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        prefix[i + 1] = prefix[i] + x[i];
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lo = std::min(i >= half ? i - half : 0, n - window);
        out[i] = x[i] - (prefix[lo + window] - prefix[lo]) / static_cast<double>(window);
    }
    return out;
}

/// W <- (W W^T)^(-1/2) W
inline Eigen::MatrixXd symmetric_decorrelate(const Eigen::MatrixXd& w)
{
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(w * w.transpose());
    const Eigen::VectorXd inv_sqrt = es.eigenvalues().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
    return es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose() * w;
}

/// Peak power over total power inside the pulse band.
inline double pulse_peakiness(const std::vector<double>& x, double fs)
{
    const auto s = dsp::power_spectrum(x, fs);
    double peak = 0, total = 0;
    for (std::size_t k = 0; k < s.frequencies.size(); ++k) {
        if (s.frequencies[k] < dsp::kPulseBandLowHz || s.frequencies[k] > dsp::kPulseBandHighHz)
            continue;
        peak = std::max(peak, s.power[k]);
        total += s.power[k];
    }
    return total > 0.0 ? peak / total : 0.0;
}

inline std::vector<double> row(const Eigen::MatrixXd& m, Eigen::Index r)
{
    std::vector<double> out(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index t = 0; t < m.cols(); ++t)
        out[static_cast<std::size_t>(t)] = m(r, t);
    return out;
}

} // namespace detail

/// Symmetric FastICA with the log-cosh contrast on the detrended,
/// standardized channels. Returns every component; `selected` is the one with
/// the most concentrated pulse-band spectrum, signed to correlate positively
/// with green.
inline IcaResult ica_components(const RoiTrace& trace, std::uint64_t seed, const IcaOptions& opt = {})
{
    trace.validate();
    const double fs = trace.sample_rate;
    const auto n = static_cast<Eigen::Index>(trace.size());
    const auto window = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(opt.detrend_seconds * fs)));

    Eigen::MatrixXd x(3, n);
    for (int c = 0; c < 3; ++c) {
        const auto raw = trace.channel(c);
        const auto d = detail::detrend(raw, window);
        double scale = 0;
        for (double v : raw)
            scale = std::max(scale, std::abs(v));
        // residue of the running sum on a constant channel is rounding only
        double sd = detail::stddev(d);
        if (sd <= 1e-12 * scale)
            sd = 0.0;
        double mu = 0;
        for (double v : d)
            mu += v;
        mu /= static_cast<double>(d.size());
        for (Eigen::Index t = 0; t < n; ++t)
            x(c, t) = sd > 0.0 ? (d[static_cast<std::size_t>(t)] - mu) / sd : 0.0;
    }

    const Eigen::Matrix3d cov = x * x.transpose() / static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
    const double top = es.eigenvalues().maxCoeff();
    if (!(top > 0.0))
        throw DegenerateInputError("ica: trace has no variation after detrending");
    std::vector<int> keep;
    for (int i = 2; i >= 0; --i)
        if (es.eigenvalues()[i] > opt.rank_tolerance * top)
            keep.push_back(i);
    const auto r = static_cast<Eigen::Index>(keep.size());
    Eigen::MatrixXd k(r, 3);
    for (Eigen::Index i = 0; i < r; ++i)
        k.row(i) = es.eigenvectors().col(keep[i]).transpose() / std::sqrt(es.eigenvalues()[keep[i]]);
    const Eigen::MatrixXd z = k * x;

    auto rng = make_rng(seed, {0x696361});
    std::normal_distribution<double> gauss(0.0, 1.0);
    Eigen::MatrixXd w(r, r);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < r; ++j)
            w(i, j) = gauss(rng);
    w = detail::symmetric_decorrelate(w);

    IcaResult res;
    res.converged = false;
    for (int it = 1; it <= opt.max_iterations; ++it) {
        const Eigen::MatrixXd u = w * z;
        const Eigen::MatrixXd g = u.array().tanh().matrix();
        const Eigen::VectorXd gprime_mean = (1.0 - g.array().square()).rowwise().mean();
        Eigen::MatrixXd w_new = g * z.transpose() / static_cast<double>(n) - gprime_mean.asDiagonal() * w;
        w_new = detail::symmetric_decorrelate(w_new);
        const double change = ((w_new * w.transpose()).diagonal().cwiseAbs().array() - 1.0).abs().maxCoeff();
        w = w_new;
        res.iterations = it;
        if (change < opt.tolerance) {
            res.converged = true;
            break;
        }
    }
    res.components = w * z;

    double best = -1;
    for (Eigen::Index i = 0; i < r; ++i) {
        const double q = detail::pulse_peakiness(detail::row(res.components, i), fs);
        if (q > best) {
            best = q;
            res.selected = static_cast<int>(i);
        }
    }
    const double corr_green = res.components.row(res.selected).dot(x.row(1));
    if (corr_green < 0.0)
        res.components.row(res.selected) *= -1.0;
    return res;
}

inline BvpEstimate ica(const RoiTrace& trace, std::uint64_t seed, const IcaOptions& opt = {})
{
    const auto res = ica_components(trace, seed, opt);
    return {detail::finish(detail::row(res.components, res.selected), trace.sample_rate), trace.sample_rate, "ica",
            res.converged};
}

inline const std::vector<std::string>& classical_methods()
{
    static const std::vector<std::string> names{"pos", "chrom", "ica"};
    return names;
}

/// Dispatch by name; `seed` only matters for ica.
inline BvpEstimate recover(const std::string& method, const RoiTrace& trace, std::uint64_t seed = 0)
{
    if (method == "pos")
        return pos(trace);
    if (method == "chrom")
        return chrom(trace);
    if (method == "ica")
        return ica(trace, seed);
    throw ConfigError("unknown recovery method '" + method + "' (valid: pos, chrom, ica)");
}

// CSV forms -----------------------------------------------------------------

inline std::string roi_trace_csv(const RoiTrace& tr)
{
    std::string out = "t_s,r,g,b\n";
    for (std::size_t t = 0; t < tr.rgb.size(); ++t) {
        out += io::fmt(static_cast<double>(t) / tr.sample_rate);
        for (int c = 0; c < 3; ++c) {
            out += ',';
            out += io::fmt(tr.rgb[t][c]);
        }
        out += '\n';
    }
    return out;
}

inline std::string bvp_csv(const BvpEstimate& e)
{
    std::string out = "# method=" + e.method + "\n";
    out += "t_s,amplitude\n";
    for (std::size_t t = 0; t < e.samples.size(); ++t) {
        out += io::fmt(static_cast<double>(t) / e.sample_rate);
        out += ',';
        out += io::fmt(e.samples[t]);
        out += '\n';
    }
    return out;
}

inline BvpEstimate load_bvp_csv(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw ParseError(path.string() + ": cannot open file");
    BvpEstimate e;
    std::vector<double> times;
    std::string raw;
    std::size_t line_no = 0;
    bool header = false;
    while (std::getline(in, raw)) {
        ++line_no;
        const auto line = io::trim(raw);
        if (line.empty())
            continue;
        const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
        if (line.front() == '#') {
            const auto body = io::trim(line.substr(1));
            if (body.starts_with("method="))
                e.method = std::string(body.substr(7));
            continue;
        }
        if (!header) {
            if (line != "t_s,amplitude")
                throw ParseError(where + "expected header 't_s,amplitude'");
            header = true;
            continue;
        }
        const auto comma = line.find(',');
        double t, v;
        if (comma == std::string_view::npos || !io::parse_double(line.substr(0, comma), t) ||
            !io::parse_double(line.substr(comma + 1), v))
            throw ParseError(where + "non-numeric row");
        if (!times.empty() && !(t > times.back()))
            throw ParseError(where + "time column is not strictly increasing");
        times.push_back(t);
        e.samples.push_back(v);
    }
    if (times.size() < 2)
        throw ParseError(path.string() + ": need at least two samples");
    e.sample_rate = static_cast<double>(times.size() - 1) / (times.back() - times.front());
    return e;
}

} // namespace pulseforge::recovery
