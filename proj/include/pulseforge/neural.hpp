#pragma once

// Two-branch convolutional attention network (CAN).
//
// motion:      conv-act, conv-act, x mask1, pool, conv-act, conv-act, x mask2,
//              pool, dense-act, dense-linear
// appearance:  conv-act, conv-act -> mask1, pool, conv-act, conv-act -> mask2
// mask:        1x1 conv, sigmoid, scaled so it sums to H'W'/2 per frame
//
// Activations are stored channel-major: a matrix with one row per channel and
// one column per (sample, y, x). All parameters live in one flat vector in
// declaration order, which is also the checkpoint order.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "pulseforge/drm.hpp"
#include "pulseforge/dsp.hpp"
#include "pulseforge/error.hpp"
#include "pulseforge/io_util.hpp"
#include "pulseforge/random.hpp"
#include "pulseforge/recovery.hpp"
#include "pulseforge/waveform.hpp"

namespace pulseforge::neural {

using nlohmann::json;

enum class Activation { tanh, identity };

struct CanConfig {
    int input_size = 36;
    std::array<int, 4> conv_channels{32, 32, 64, 64};
    int hidden_units = 128;
    int kernel_size = 3;
    /// identity also makes the attention gate linear (no sigmoid, no
    /// normalization); only meant for gradient tests.
    Activation activation = Activation::tanh;
    bool regress_derivative = true;

    void validate() const
    {
        if (input_size < 4 || input_size % 4 != 0)
            throw ConfigError("CanConfig: input_size must be a positive multiple of 4");
        for (int c : conv_channels)
            if (c < 1)
                throw ConfigError("CanConfig: conv_channels must be >= 1");
        if (hidden_units < 1)
            throw ConfigError("CanConfig: hidden_units must be >= 1");
        if (kernel_size < 1 || kernel_size % 2 == 0)
            throw ConfigError("CanConfig: kernel_size must be odd");
    }

    /// Reduced size that trains in minutes on one core.
    static CanConfig desk()
    {
        CanConfig c;
        c.input_size = 12;
        c.conv_channels = {8, 8, 16, 16};
        c.hidden_units = 32;
        return c;
    }

    bool operator==(const CanConfig&) const = default;
};

inline json to_json(const CanConfig& c)
{
    return json{{"input_size", c.input_size},
                {"conv_channels", c.conv_channels},
                {"hidden_units", c.hidden_units},
                {"kernel_size", c.kernel_size},
                {"activation", c.activation == Activation::tanh ? "tanh" : "identity"},
                {"regress_derivative", c.regress_derivative}};
}

inline CanConfig can_config_from_json(const json& j)
{
    static const std::vector<std::string> keys{"input_size", "conv_channels", "hidden_units",
                                               "kernel_size", "activation",    "regress_derivative"};
    if (!j.is_object())
        throw ConfigError("network config must be a JSON object");
    for (const auto& [k, v] : j.items())
        if (std::find(keys.begin(), keys.end(), k) == keys.end())
            throw ConfigError("network config: unknown key '" + k + "'");
    CanConfig c;
    try {
        if (j.contains("input_size"))
            c.input_size = j.at("input_size").get<int>();
        if (j.contains("conv_channels")) {
            const auto v = j.at("conv_channels").get<std::vector<int>>();
            if (v.size() != 4)
                throw ConfigError("network config: conv_channels needs 4 entries");
            std::copy(v.begin(), v.end(), c.conv_channels.begin());
        }
        if (j.contains("hidden_units"))
            c.hidden_units = j.at("hidden_units").get<int>();
        if (j.contains("kernel_size"))
            c.kernel_size = j.at("kernel_size").get<int>();
        if (j.contains("activation")) {
            const auto a = j.at("activation").get<std::string>();
            if (a == "tanh")
                c.activation = Activation::tanh;
            else if (a == "identity")
                c.activation = Activation::identity;
            else
                throw ConfigError("network config: activation must be 'tanh' or 'identity'");
        }
        if (j.contains("regress_derivative"))
            c.regress_derivative = j.at("regress_derivative").get<bool>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("network config: ") + e.what());
    }
    c.validate();
    return c;
}

struct ParamSpec {
    std::string name;
    std::size_t offset = 0;
    int rows = 0, cols = 0;
    std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
    bool operator==(const ParamSpec&) const = default;
};

// Parameter tensor indices in declaration order.
enum Layer : int {
    kMotionConv1, kMotionConv2, kMotionConv3, kMotionConv4,
    kAppearanceConv1, kAppearanceConv2, kAppearanceConv3, kAppearanceConv4,
    kAttention1, kAttention2, kDense1, kDense2,
    kLayerCount
};

inline std::vector<ParamSpec> parameter_layout(const CanConfig& c)
{
    c.validate();
    const int k2 = c.kernel_size * c.kernel_size;
    const auto& ch = c.conv_channels;
    const int q = c.input_size / 4;
    struct Shape {
        const char* name;
        int out, in;
    };
    const Shape shapes[kLayerCount] = {
        {"motion.conv1", ch[0], 3 * k2},
        {"motion.conv2", ch[1], ch[0] * k2},
        {"motion.conv3", ch[2], ch[1] * k2},
        {"motion.conv4", ch[3], ch[2] * k2},
        {"appearance.conv1", ch[0], 3 * k2},
        {"appearance.conv2", ch[1], ch[0] * k2},
        {"appearance.conv3", ch[2], ch[1] * k2},
        {"appearance.conv4", ch[3], ch[2] * k2},
        {"attention1", 1, ch[1]},
        {"attention2", 1, ch[3]},
        {"dense1", c.hidden_units, ch[3] * q * q},
        {"dense2", 1, c.hidden_units},
    };
    std::vector<ParamSpec> out;
    std::size_t off = 0;
    for (const auto& s : shapes) {
        out.push_back({std::string(s.name) + ".weight", off, s.out, s.in});
        off += out.back().size();
        out.push_back({std::string(s.name) + ".bias", off, s.out, 1});
        off += out.back().size();
    }
    return out;
}

template <class T>
struct CanModel {
    CanConfig config;
    std::vector<ParamSpec> layout;
    std::vector<T> weights;

    std::size_t parameter_count() const { return weights.size(); }

    const ParamSpec& weight_spec(int layer) const { return layout[2 * layer]; }
    const ParamSpec& bias_spec(int layer) const { return layout[2 * layer + 1]; }

    /// Glorot-uniform weights, zero biases, from raw engine bits.
    static CanModel init(const CanConfig& cfg, std::uint64_t seed)
    {
        CanModel m;
        m.config = cfg;
        m.layout = parameter_layout(cfg);
        m.weights.assign(m.layout.back().offset + m.layout.back().size(), T(0));
        auto rng = make_rng(seed, {0x696e6974});
        for (int l = 0; l < kLayerCount; ++l) {
            const auto& s = m.weight_spec(l);
            const double limit = std::sqrt(6.0 / static_cast<double>(s.rows + s.cols));
            for (std::size_t i = 0; i < s.size(); ++i)
                m.weights[s.offset + i] = static_cast<T>((2.0 * uniform01(rng) - 1.0) * limit);
        }
        return m;
    }

    static CanModel zeros(const CanConfig& cfg)
    {
        CanModel m;
        m.config = cfg;
        m.layout = parameter_layout(cfg);
        m.weights.assign(m.layout.back().offset + m.layout.back().size(), T(0));
        return m;
    }

    template <class U>
    CanModel<U> cast() const
    {
        CanModel<U> m;
        m.config = config;
        m.layout = layout;
        m.weights.assign(weights.begin(), weights.end());
        return m;
    }
};

// Frame normalization --------------------------------------------------------

/// Network inputs for consecutive frame pairs, each stored as 3 x H x W.
struct FrameInputs {
    std::uint32_t pairs = 0, height = 0, width = 0;
    std::vector<float> motion;
    std::vector<float> appearance;

    std::size_t pair_size() const { return 3u * height * width; }
    const float* motion_at(std::size_t t) const { return motion.data() + t * pair_size(); }
    const float* appearance_at(std::size_t t) const { return appearance.data() + t * pair_size(); }
};

inline constexpr double kDiffEpsilon = 1e-7;

namespace detail {

inline void standardize_inplace(std::vector<float>& v, const char* what)
{
    double mean = 0;
    for (float x : v)
        mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0;
    for (float x : v)
        var += (x - mean) * (x - mean);
    var /= static_cast<double>(v.size());
    if (!(var > 0.0))
        throw DegenerateInputError(std::string("normalize_frames: ") + what + " has zero variance over the clip");
    const double inv = 1.0 / std::sqrt(var);
    for (float& x : v)
        x = static_cast<float>((x - mean) * inv);
}

} // namespace detail

/// (frame[t+1] - frame[t]) / (frame[t+1] + frame[t] + eps) per value,
/// channel-last like the video. No standardization.
inline std::vector<float> frame_difference_ratio(const drm::VideoTensor& video)
{
    if (video.frames < 2)
        throw ConfigError("normalize_frames: need at least 2 frames");
    const std::size_t fsz = video.frame_size();
    std::vector<float> out((video.frames - 1) * fsz);
    for (std::size_t t = 0; t + 1 < video.frames; ++t)
        for (std::size_t i = 0; i < fsz; ++i) {
            const double a = video.data[t * fsz + i], b = video.data[(t + 1) * fsz + i];
            out[t * fsz + i] = static_cast<float>((b - a) / (b + a + kDiffEpsilon));
        }
    return out;
}

/// Motion input: normalized frame differences standardized over the clip.
/// Appearance input: frames 0..T-2 standardized over the clip. Both are
/// returned as 3 x H x W per pair.
inline FrameInputs normalize_frames(const drm::VideoTensor& video)
{
    auto diff = frame_difference_ratio(video);
    const std::size_t fsz = video.frame_size();
    std::vector<float> app(video.data.begin(), video.data.begin() + static_cast<std::ptrdiff_t>(diff.size()));
    detail::standardize_inplace(diff, "motion input");
    detail::standardize_inplace(app, "appearance input");

    FrameInputs in;
    in.pairs = video.frames - 1;
    in.height = video.height;
    in.width = video.width;
    in.motion.resize(diff.size());
    in.appearance.resize(diff.size());
    const std::size_t hw = static_cast<std::size_t>(video.height) * video.width;
    for (std::size_t t = 0; t < in.pairs; ++t)
        for (std::size_t p = 0; p < hw; ++p)
            for (std::size_t c = 0; c < 3; ++c) {
                in.motion[t * fsz + c * hw + p] = diff[t * fsz + p * 3 + c];
                in.appearance[t * fsz + c * hw + p] = app[t * fsz + p * 3 + c];
            }
    return in;
}

/// Box-average downsampling to size x size; frame sides must be multiples.
inline drm::VideoTensor downsample(const drm::VideoTensor& v, int size)
{
    if (static_cast<int>(v.height) == size && static_cast<int>(v.width) == size)
        return v;
    if (size < 1 || v.height % size != 0 || v.width % size != 0)
        throw ConfigError("downsample: frame " + std::to_string(v.height) + "x" + std::to_string(v.width) +
                          " is not a multiple of the network input size " + std::to_string(size));
    const std::uint32_t fy = v.height / size, fx = v.width / size;
    drm::VideoTensor out(v.frames, size, size, v.sample_rate);
    const double inv = 1.0 / (fy * fx);
    for (std::uint32_t t = 0; t < v.frames; ++t)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                for (int c = 0; c < 3; ++c) {
                    double acc = 0;
                    for (std::uint32_t dy = 0; dy < fy; ++dy)
                        for (std::uint32_t dx = 0; dx < fx; ++dx)
                            acc += v.at(t, y * fy + dy, x * fx + dx, c);
                    out.at(t, y, x, c) = static_cast<float>(acc * inv);
                }
    return out;
}

// Forward / backward ---------------------------------------------------------

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const Mat<T>>;
template <class T>
using MapM = Eigen::Map<Mat<T>>;

namespace detail {

template <class T>
void im2col(const Mat<T>& in, int batch, int s, int k, Mat<T>& cols)
{
    const int pad = k / 2;
    const auto c_in = in.rows();
    cols.setZero(c_in * k * k, static_cast<Eigen::Index>(batch) * s * s);
    for (Eigen::Index c = 0; c < c_in; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const Eigen::Index row = (c * k + ky) * k + kx;
                T* dst = cols.row(row).data();
                const T* src = in.row(c).data();
                for (int b = 0; b < batch; ++b)
                    for (int y = 0; y < s; ++y) {
                        const int sy = y + ky - pad;
                        if (sy < 0 || sy >= s)
                            continue;
                        const std::size_t base = (static_cast<std::size_t>(b) * s + y) * s;
                        const std::size_t sbase = (static_cast<std::size_t>(b) * s + sy) * s;
                        for (int x = 0; x < s; ++x) {
                            const int sx = x + kx - pad;
                            if (sx >= 0 && sx < s)
                                dst[base + x] = src[sbase + sx];
                        }
                    }
            }
}

template <class T>
void col2im(const Mat<T>& cols, int c_in, int batch, int s, int k, Mat<T>& out)
{
    const int pad = k / 2;
    out.setZero(c_in, static_cast<Eigen::Index>(batch) * s * s);
    for (int c = 0; c < c_in; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const Eigen::Index row = (static_cast<Eigen::Index>(c) * k + ky) * k + kx;
                const T* src = cols.row(row).data();
                T* dst = out.row(c).data();
                for (int b = 0; b < batch; ++b)
                    for (int y = 0; y < s; ++y) {
                        const int sy = y + ky - pad;
                        if (sy < 0 || sy >= s)
                            continue;
                        const std::size_t base = (static_cast<std::size_t>(b) * s + y) * s;
                        const std::size_t dbase = (static_cast<std::size_t>(b) * s + sy) * s;
                        for (int x = 0; x < s; ++x) {
                            const int sx = x + kx - pad;
                            if (sx >= 0 && sx < s)
                                dst[dbase + sx] += src[base + x];
                        }
                    }
            }
}

template <class T>
Mat<T> avg_pool(const Mat<T>& in, int batch, int s)
{
    const int h = s / 2;
    Mat<T> out(in.rows(), static_cast<Eigen::Index>(batch) * h * h);
    for (Eigen::Index c = 0; c < in.rows(); ++c)
        for (int b = 0; b < batch; ++b)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < h; ++x) {
                    const auto i = [&](int yy, int xx) { return (static_cast<Eigen::Index>(b) * s + yy) * s + xx; };
                    out(c, (static_cast<Eigen::Index>(b) * h + y) * h + x) =
                        T(0.25) * (in(c, i(2 * y, 2 * x)) + in(c, i(2 * y, 2 * x + 1)) + in(c, i(2 * y + 1, 2 * x)) +
                                   in(c, i(2 * y + 1, 2 * x + 1)));
                }
    return out;
}

template <class T>
Mat<T> avg_pool_backward(const Mat<T>& dout, int batch, int s)
{
    const int h = s / 2;
    Mat<T> din(dout.rows(), static_cast<Eigen::Index>(batch) * s * s);
    for (Eigen::Index c = 0; c < dout.rows(); ++c)
        for (int b = 0; b < batch; ++b)
            for (int y = 0; y < s; ++y)
                for (int x = 0; x < s; ++x)
                    din(c, (static_cast<Eigen::Index>(b) * s + y) * s + x) =
                        T(0.25) * dout(c, (static_cast<Eigen::Index>(b) * h + y / 2) * h + x / 2);
    return din;
}

template <class T>
struct ConvCache {
    Mat<T> cols; // im2col of the input
    Mat<T> out;  // post-activation
};

template <class T>
struct AttentionCache {
    Mat<T> logits; // 1 x N
    Mat<T> gate;   // sigmoid (tanh mode)
    Mat<T> mask;   // 1 x N
    std::vector<T> gate_sum; // per sample
};

template <class T>
struct SampleCache {
    int batch = 0;
    ConvCache<T> m1, m2, m3, m4, a1, a2, a3, a4;
    AttentionCache<T> q1, q2;
    Mat<T> g1, g2;       // masked motion features
    Mat<T> p1, p2, ap1;  // pooled
    Mat<T> flat;         // F x B
    Mat<T> hidden;       // H x B, post-activation
    Mat<T> output;       // 1 x B
};

template <class T>
struct Cache {
    std::vector<SampleCache<T>> samples;
    Mat<T> xm, xa; // one sample's input
};

} // namespace detail

template <class T>
class CanNetwork {
public:
    explicit CanNetwork(const CanModel<T>& model) : model_(model), cfg_(model.config)
    {
        if (model.layout != parameter_layout(cfg_) ||
            model.weights.size() != model.layout.back().offset + model.layout.back().size())
            throw ConfigError("CanNetwork: weights do not match the configuration");
    }

    /// Inputs are 3 x (B*S*S) matrices. Returns 1 x B. Samples are evaluated
    /// one at a time, so an output never depends on its batch position.
    Mat<T> forward(const Mat<T>& xm, const Mat<T>& xa, detail::Cache<T>& c) const
    {
        const int s = cfg_.input_size;
        if (xm.rows() != 3 || xa.rows() != 3 || xm.cols() != xa.cols() || xm.cols() % (s * s) != 0)
            throw ConfigError("CanNetwork::forward: inputs must be 3 x (B*" + std::to_string(s) + "*" +
                              std::to_string(s) + ") with matching shapes");
        const Eigen::Index n = static_cast<Eigen::Index>(s) * s;
        const auto b = xm.cols() / n;
        c.samples.resize(static_cast<std::size_t>(b));
        Mat<T> y(1, b);
        for (Eigen::Index j = 0; j < b; ++j) {
            c.xm = xm.middleCols(j * n, n);
            c.xa = xa.middleCols(j * n, n);
            y(0, j) = forward_sample(c.xm, c.xa, c.samples[static_cast<std::size_t>(j)])(0, 0);
        }
        return y;
    }

    /// Back-propagates d(loss)/d(output) (1 x B); writes the gradient of every
    /// parameter into `grad` (same layout as the weights), summed in sample order.
    void backward(const detail::Cache<T>& c, const Mat<T>& dout, std::vector<T>& grad) const
    {
        grad.assign(model_.weights.size(), T(0));
        std::vector<T> one;
        for (std::size_t j = 0; j < c.samples.size(); ++j) {
            backward_sample(c.samples[j], dout.middleCols(static_cast<Eigen::Index>(j), 1), one);
            for (std::size_t i = 0; i < grad.size(); ++i)
                grad[i] += one[i];
        }
    }

    const CanConfig& config() const { return cfg_; }

private:
    Mat<T> forward_sample(const Mat<T>& xm, const Mat<T>& xa, detail::SampleCache<T>& c) const
    {
        const int s = cfg_.input_size;
        const int b = static_cast<int>(xm.cols() / (s * s));
        c.batch = b;
        conv_forward(kMotionConv1, xm, b, s, c.m1);
        conv_forward(kMotionConv2, c.m1.out, b, s, c.m2);
        conv_forward(kAppearanceConv1, xa, b, s, c.a1);
        conv_forward(kAppearanceConv2, c.a1.out, b, s, c.a2);
        attention_forward(kAttention1, c.a2.out, b, s, c.q1);
        c.g1 = c.m2.out.array().rowwise() * c.q1.mask.row(0).array();
        c.p1 = detail::avg_pool(c.g1, b, s);
        c.ap1 = detail::avg_pool(c.a2.out, b, s);

        const int s2 = s / 2;
        conv_forward(kMotionConv3, c.p1, b, s2, c.m3);
        conv_forward(kMotionConv4, c.m3.out, b, s2, c.m4);
        conv_forward(kAppearanceConv3, c.ap1, b, s2, c.a3);
        conv_forward(kAppearanceConv4, c.a3.out, b, s2, c.a4);
        attention_forward(kAttention2, c.a4.out, b, s2, c.q2);
        c.g2 = c.m4.out.array().rowwise() * c.q2.mask.row(0).array();
        c.p2 = detail::avg_pool(c.g2, b, s2);

        const int s4 = s / 4, p = s4 * s4;
        const auto ch = c.p2.rows();
        c.flat.resize(ch * p, b);
        for (Eigen::Index k = 0; k < ch; ++k)
            for (int j = 0; j < b; ++j)
                for (int i = 0; i < p; ++i)
                    c.flat(k * p + i, j) = c.p2(k, static_cast<Eigen::Index>(j) * p + i);

        c.hidden = (weight(kDense1) * c.flat).colwise() + bias(kDense1);
        activate(c.hidden);
        c.output = (weight(kDense2) * c.hidden).colwise() + bias(kDense2);
        return c.output;
    }

    void backward_sample(const detail::SampleCache<T>& c, const Mat<T>& dout, std::vector<T>& grad) const
    {
        grad.assign(model_.weights.size(), T(0));
        const int b = c.batch, s = cfg_.input_size, s2 = s / 2, s4 = s / 4, p = s4 * s4;

        gw(grad, kDense2) = dout * c.hidden.transpose();
        gb(grad, kDense2) = dout.rowwise().sum();
        Mat<T> dh = weight(kDense2).transpose() * dout;
        activation_backward(dh, c.hidden);
        gw(grad, kDense1) = dh * c.flat.transpose();
        gb(grad, kDense1) = dh.rowwise().sum();
        const Mat<T> dflat = weight(kDense1).transpose() * dh;

        const auto ch = c.p2.rows();
        Mat<T> dp2(ch, static_cast<Eigen::Index>(b) * p);
        for (Eigen::Index k = 0; k < ch; ++k)
            for (int j = 0; j < b; ++j)
                for (int i = 0; i < p; ++i)
                    dp2(k, static_cast<Eigen::Index>(j) * p + i) = dflat(k * p + i, j);

        // second junction
        const Mat<T> dg2 = detail::avg_pool_backward(dp2, b, s2);
        Mat<T> dm4 = dg2.array().rowwise() * c.q2.mask.row(0).array();
        const Mat<T> dq2 = (dg2.array() * c.m4.out.array()).colwise().sum();
        Mat<T> da4 = attention_backward(kAttention2, dq2, c.a4.out, b, s2, c.q2, grad);
        const Mat<T> dm3 = conv_backward(kMotionConv4, dm4, c.m4, s2, b, grad, true);
        const Mat<T> dp1 = conv_backward(kMotionConv3, dm3, c.m3, s2, b, grad, true);
        const Mat<T> da3 = conv_backward(kAppearanceConv4, da4, c.a4, s2, b, grad, true);
        const Mat<T> dap1 = conv_backward(kAppearanceConv3, da3, c.a3, s2, b, grad, true);

        // first junction
        const Mat<T> dg1 = detail::avg_pool_backward(dp1, b, s);
        Mat<T> dm2 = dg1.array().rowwise() * c.q1.mask.row(0).array();
        const Mat<T> dq1 = (dg1.array() * c.m2.out.array()).colwise().sum();
        Mat<T> da2 = detail::avg_pool_backward(dap1, b, s);
        da2 += attention_backward(kAttention1, dq1, c.a2.out, b, s, c.q1, grad);
        const Mat<T> dm1 = conv_backward(kMotionConv2, dm2, c.m2, s, b, grad, true);
        conv_backward(kMotionConv1, dm1, c.m1, s, b, grad, false);
        const Mat<T> da1 = conv_backward(kAppearanceConv2, da2, c.a2, s, b, grad, true);
        conv_backward(kAppearanceConv1, da1, c.a1, s, b, grad, false);
    }

    MapC<T> weight(int layer) const
    {
        const auto& s = model_.weight_spec(layer);
        return MapC<T>(model_.weights.data() + s.offset, s.rows, s.cols);
    }

    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bias(int layer) const
    {
        const auto& s = model_.bias_spec(layer);
        return {model_.weights.data() + s.offset, s.rows};
    }

    MapM<T> gw(std::vector<T>& g, int layer) const
    {
        const auto& s = model_.weight_spec(layer);
        return MapM<T>(g.data() + s.offset, s.rows, s.cols);
    }

    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> gb(std::vector<T>& g, int layer) const
    {
        const auto& s = model_.bias_spec(layer);
        return {g.data() + s.offset, s.rows};
    }

    void activate(Mat<T>& z) const
    {
        if (cfg_.activation == Activation::tanh)
            z = z.array().tanh();
    }

    /// d <- d * act'(out), with act' written in terms of the output.
    void activation_backward(Mat<T>& d, const Mat<T>& out) const
    {
        if (cfg_.activation == Activation::tanh)
            d.array() *= T(1) - out.array().square();
    }

    void conv_forward(int layer, const Mat<T>& in, int b, int s, detail::ConvCache<T>& cc) const
    {
        detail::im2col(in, b, s, cfg_.kernel_size, cc.cols);
        cc.out.noalias() = weight(layer) * cc.cols;
        cc.out.colwise() += bias(layer);
        activate(cc.out);
    }

    Mat<T> conv_backward(int layer, Mat<T> dout, const detail::ConvCache<T>& cc, int s, int b, std::vector<T>& grad,
                         bool need_input) const
    {
        activation_backward(dout, cc.out);
        gw(grad, layer).noalias() = dout * cc.cols.transpose();
        gb(grad, layer) = dout.rowwise().sum();
        if (!need_input)
            return {};
        const Mat<T> dcols = weight(layer).transpose() * dout;
        Mat<T> din;
        const int k2 = cfg_.kernel_size * cfg_.kernel_size;
        detail::col2im(dcols, static_cast<int>(dcols.rows() / k2), b, s, cfg_.kernel_size, din);
        return din;
    }

    void attention_forward(int layer, const Mat<T>& feat, int b, int s, detail::AttentionCache<T>& ac) const
    {
        ac.logits = (weight(layer) * feat).array() + bias(layer)(0);
        if (cfg_.activation == Activation::identity) {
            ac.mask = ac.logits;
            return;
        }
        ac.gate = (T(1) + (-ac.logits.array()).exp()).inverse();
        ac.mask.resize(1, ac.gate.cols());
        ac.gate_sum.assign(static_cast<std::size_t>(b), T(0));
        const int n = s * s;
        const T half = T(n) / T(2);
        for (int j = 0; j < b; ++j) {
            T sum = 0;
            for (int i = 0; i < n; ++i)
                sum += ac.gate(0, static_cast<Eigen::Index>(j) * n + i);
            ac.gate_sum[static_cast<std::size_t>(j)] = sum;
            for (int i = 0; i < n; ++i)
                ac.mask(0, static_cast<Eigen::Index>(j) * n + i) = half * ac.gate(0, static_cast<Eigen::Index>(j) * n + i) / sum;
        }
    }

    /// Returns the gradient with respect to the appearance features.
    Mat<T> attention_backward(int layer, const Mat<T>& dmask, const Mat<T>& feat, int b, int s,
                              const detail::AttentionCache<T>& ac, std::vector<T>& grad) const
    {
        Mat<T> dz;
        if (cfg_.activation == Activation::identity) {
            dz = dmask;
        } else {
            const int n = s * s;
            const T half = T(n) / T(2);
            dz.resize(1, dmask.cols());
            for (int j = 0; j < b; ++j) {
                const T sum = ac.gate_sum[static_cast<std::size_t>(j)];
                T dot = 0;
                for (int i = 0; i < n; ++i) {
                    const auto idx = static_cast<Eigen::Index>(j) * n + i;
                    dot += dmask(0, idx) * ac.gate(0, idx);
                }
                for (int i = 0; i < n; ++i) {
                    const auto idx = static_cast<Eigen::Index>(j) * n + i;
                    const T g = ac.gate(0, idx);
                    const T dgate = half / sum * (dmask(0, idx) - dot / sum);
                    dz(0, idx) = dgate * g * (T(1) - g);
                }
            }
        }
        gw(grad, layer).noalias() = dz * feat.transpose();
        gb(grad, layer)(0) = dz.sum();
        return weight(layer).transpose() * dz;
    }

    const CanModel<T>& model_;
    CanConfig cfg_;
};

// Batches ---------------------------------------------------------------------

/// One clip prepared for the network: normalized inputs plus per-pair targets.
struct TrainingClip {
    FrameInputs inputs;
    std::vector<float> targets; // empty when unlabeled
};

inline std::vector<float> pulse_targets(const PulseWaveform& pulse, bool derivative)
{
    if (pulse.samples.size() < 3)
        throw DomainError("pulse_targets: need at least 3 samples");
    std::vector<float> t(pulse.samples.size() - 1);
    for (std::size_t i = 0; i + 1 < pulse.samples.size(); ++i)
        t[i] = static_cast<float>(derivative ? pulse.samples[i + 1] - pulse.samples[i] : pulse.samples[i + 1]);
    detail::standardize_inplace(t, "target");
    return t;
}

inline TrainingClip make_training_clip(const drm::VideoTensor& video, const PulseWaveform& pulse,
                                       const CanConfig& cfg)
{
    if (pulse.samples.size() != video.frames)
        throw ConfigError("make_training_clip: pulse has " + std::to_string(pulse.samples.size()) +
                          " samples, video has " + std::to_string(video.frames) + " frames");
    TrainingClip c;
    c.inputs = normalize_frames(downsample(video, cfg.input_size));
    c.targets = pulse_targets(pulse, cfg.regress_derivative);
    return c;
}

struct PairRef {
    std::uint32_t clip = 0, pair = 0;
};

template <class T>
void gather_batch(const std::vector<TrainingClip>& clips, const std::vector<PairRef>& refs, std::size_t begin,
                  std::size_t end, int s, Mat<T>& xm, Mat<T>& xa, Mat<T>* target)
{
    const auto b = static_cast<Eigen::Index>(end - begin);
    const Eigen::Index n = static_cast<Eigen::Index>(s) * s;
    xm.resize(3, b * n);
    xa.resize(3, b * n);
    if (target)
        target->resize(1, b);
    for (Eigen::Index j = 0; j < b; ++j) {
        const auto& r = refs[begin + static_cast<std::size_t>(j)];
        const auto& clip = clips[r.clip];
        if (clip.inputs.height != static_cast<std::uint32_t>(s) || clip.inputs.width != static_cast<std::uint32_t>(s))
            throw ConfigError("batch: clip input is " + std::to_string(clip.inputs.height) + "x" +
                              std::to_string(clip.inputs.width) + ", network expects " + std::to_string(s));
        const float* m = clip.inputs.motion_at(r.pair);
        const float* a = clip.inputs.appearance_at(r.pair);
        for (int c = 0; c < 3; ++c)
            for (Eigen::Index i = 0; i < n; ++i) {
                xm(c, j * n + i) = static_cast<T>(m[c * n + i]);
                xa(c, j * n + i) = static_cast<T>(a[c * n + i]);
            }
        if (target)
            (*target)(0, j) = static_cast<T>(clip.targets[r.pair]);
    }
}

inline std::vector<PairRef> all_pairs(const std::vector<TrainingClip>& clips)
{
    std::vector<PairRef> refs;
    for (std::uint32_t c = 0; c < clips.size(); ++c)
        for (std::uint32_t t = 0; t < clips[c].inputs.pairs; ++t)
            refs.push_back({c, t});
    return refs;
}

/// Fisher-Yates driven by raw engine bits (portable across standard libraries).
template <class V>
void shuffle_portable(V& v, Rng& rng)
{
    for (std::size_t i = v.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
        std::swap(v[i - 1], v[std::min(j, i - 1)]);
    }
}

inline constexpr std::size_t kForwardChunk = 64;

/// Network output for every pair of a clip.
template <class T>
std::vector<double> forward_clip(const CanModel<T>& model, const FrameInputs& in)
{
    CanNetwork<T> net(model);
    std::vector<TrainingClip> one{{in, {}}};
    std::vector<PairRef> refs;
    for (std::uint32_t t = 0; t < in.pairs; ++t)
        refs.push_back({0, t});
    std::vector<double> out;
    out.reserve(refs.size());
    detail::Cache<T> cache;
    Mat<T> xm, xa;
    for (std::size_t b = 0; b < refs.size(); b += kForwardChunk) {
        const std::size_t e = std::min(refs.size(), b + kForwardChunk);
        gather_batch<T>(one, refs, b, e, model.config.input_size, xm, xa, nullptr);
        const auto y = net.forward(xm, xa, cache);
        for (Eigen::Index j = 0; j < y.cols(); ++j)
            out.push_back(static_cast<double>(y(0, j)));
    }
    return out;
}

template <class T>
double mse(const CanModel<T>& model, const std::vector<TrainingClip>& clips, const std::vector<PairRef>& refs)
{
    if (refs.empty())
        return 0.0;
    CanNetwork<T> net(model);
    detail::Cache<T> cache;
    Mat<T> xm, xa, target;
    double acc = 0;
    for (std::size_t b = 0; b < refs.size(); b += kForwardChunk) {
        const std::size_t e = std::min(refs.size(), b + kForwardChunk);
        gather_batch<T>(clips, refs, b, e, model.config.input_size, xm, xa, &target);
        const auto y = net.forward(xm, xa, cache);
        acc += static_cast<double>((y - target).squaredNorm());
    }
    return acc / static_cast<double>(refs.size());
}

// Training ---------------------------------------------------------------------

struct TrainOptions {
    int epochs = 30;
    double learning_rate = 1e-3;
    double momentum = 0.9;
    int batch_size = 16;
    std::uint64_t seed = 0;
    /// Pairs drawn per epoch (0: every pair once).
    std::size_t pairs_per_epoch = 0;
    /// Fixed pairs used to score each epoch (0: all).
    std::size_t eval_pairs = 0;

    void validate() const
    {
        if (epochs < 1)
            throw ConfigError("train: epochs must be >= 1");
        if (!(learning_rate >= 0.0) || !(momentum >= 0.0 && momentum < 1.0))
            throw ConfigError("train: learning_rate must be >= 0 and momentum in [0, 1)");
        if (batch_size < 1)
            throw ConfigError("train: batch_size must be >= 1");
    }
};

struct TrainReport {
    std::vector<double> train_mse; // per epoch, after the epoch's updates
    std::vector<double> val_mse;
    double initial_train_mse = 0;
    double initial_val_mse = 0;
    int selected_epoch = 0; // 1-based argmin of val_mse (earliest on ties)
    std::uint64_t seed = 0;
};

inline json to_json(const TrainReport& r)
{
    return json{{"train_mse", r.train_mse},
                {"val_mse", r.val_mse},
                {"initial_train_mse", r.initial_train_mse},
                {"initial_val_mse", r.initial_val_mse},
                {"selected_epoch", r.selected_epoch},
                {"seed", r.seed}};
}

namespace detail {

inline std::vector<PairRef> eval_subset(const std::vector<TrainingClip>& clips, std::size_t limit, std::uint64_t seed,
                                        std::uint64_t key)
{
    auto refs = all_pairs(clips);
    if (limit == 0 || limit >= refs.size())
        return refs;
    auto rng = make_rng(seed, {key});
    shuffle_portable(refs, rng);
    refs.resize(limit);
    return refs;
}

} // namespace detail

/// Mini-batch SGD with momentum on the MSE loss. Returns the weights of the
/// epoch with the lowest validation MSE.
template <class T>
std::pair<CanModel<T>, TrainReport> train(CanModel<T> model, const std::vector<TrainingClip>& train_set,
                                          const std::vector<TrainingClip>& val_set, const TrainOptions& opt)
{
    opt.validate();
    if (train_set.empty() || val_set.empty())
        throw ConfigError("train: training and validation sets must be non-empty");
    for (const auto* set : {&train_set, &val_set})
        for (const auto& c : *set)
            if (c.targets.size() != c.inputs.pairs)
                throw ConfigError("train: clip without matching targets");

    TrainReport rep;
    rep.seed = opt.seed;
    const auto train_eval = detail::eval_subset(train_set, opt.eval_pairs, opt.seed, 1);
    const auto val_eval = detail::eval_subset(val_set, opt.eval_pairs, opt.seed, 2);
    rep.initial_train_mse = mse(model, train_set, train_eval);
    rep.initial_val_mse = mse(model, val_set, val_eval);

    CanModel<T> best = model;
    double best_val = std::numeric_limits<double>::infinity();
    std::vector<T> velocity(model.weights.size(), T(0)), grad;
    const T lr = static_cast<T>(opt.learning_rate), mu = static_cast<T>(opt.momentum);
    auto order = all_pairs(train_set);
    auto rng = make_rng(opt.seed, {0x747261696e});
    const int s = model.config.input_size;
    detail::Cache<T> cache;
    Mat<T> xm, xa, target;

    for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
        shuffle_portable(order, rng);
        const std::size_t count =
            opt.pairs_per_epoch == 0 ? order.size() : std::min(order.size(), opt.pairs_per_epoch);
        int batch_no = 0;
        for (std::size_t b = 0; b < count; b += static_cast<std::size_t>(opt.batch_size)) {
            ++batch_no;
            const std::size_t e = std::min(count, b + static_cast<std::size_t>(opt.batch_size));
            CanNetwork<T> net(model);
            gather_batch<T>(train_set, order, b, e, s, xm, xa, &target);
            const Mat<T> y = net.forward(xm, xa, cache);
            const Mat<T> diff = y - target;
            const double loss = static_cast<double>(diff.squaredNorm()) / static_cast<double>(e - b);
            if (!std::isfinite(loss))
                throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                                      std::to_string(batch_no) + " (loss is not finite)");
            const Mat<T> dout = diff * (T(2) / static_cast<T>(e - b));
            net.backward(cache, dout, grad);
            for (std::size_t i = 0; i < model.weights.size(); ++i) {
                velocity[i] = mu * velocity[i] - lr * grad[i];
                model.weights[i] += velocity[i];
            }
        }
        const double tr = mse(model, train_set, train_eval);
        const double va = mse(model, val_set, val_eval);
        if (!std::isfinite(tr) || !std::isfinite(va))
            throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + " (evaluation loss is not finite)");
        rep.train_mse.push_back(tr);
        rep.val_mse.push_back(va);
        if (va < best_val) {
            best_val = va;
            best = model;
            rep.selected_epoch = epoch;
        }
    }
    return {best, rep};
}

// Gradient check ----------------------------------------------------------------

struct GradCheckReport {
    double max_relative_error = 0;
    std::vector<std::string> layers;        // parameter tensor names
    std::vector<std::size_t> samples_per_layer;
    std::vector<double> max_error_per_layer;
    std::size_t total_samples = 0;
};

enum class Stencil {
    central,       // (f(w+h) - f(w-h)) / 2h
    central_fourth // five-point, exact for polynomials up to degree 4
};

/// Central finite differences on sampled weights against the analytic
/// gradient of the batch MSE. Every parameter tensor gets a share of the
/// samples (all of it when smaller than its share).
inline GradCheckReport grad_check(const CanModel<double>& model, const std::vector<TrainingClip>& clips, double h,
                                  std::size_t min_samples = 200, std::uint64_t seed = 0,
                                  Stencil stencil = Stencil::central)
{
    if (clips.empty())
        throw ConfigError("grad_check: empty batch");
    const auto refs = all_pairs(clips);
    const int s = model.config.input_size;
    Mat<double> xm, xa, target;
    gather_batch<double>(clips, refs, 0, refs.size(), s, xm, xa, &target);

    CanModel<double> work = model;
    detail::Cache<double> cache;
    auto loss = [&]() {
        CanNetwork<double> net(work);
        const auto y = net.forward(xm, xa, cache);
        return (y - target).squaredNorm() / static_cast<double>(refs.size());
    };
    std::vector<double> analytic;
    {
        CanNetwork<double> net(work);
        const auto y = net.forward(xm, xa, cache);
        net.backward(cache, (y - target) * (2.0 / static_cast<double>(refs.size())), analytic);
    }

    const auto& layout = model.layout;
    std::size_t share = 1;
    auto total_for = [&](std::size_t q) {
        std::size_t t = 0;
        for (const auto& p : layout)
            t += std::min(q, p.size());
        return t;
    };
    while (total_for(share) < min_samples) {
        std::size_t cap = 0;
        for (const auto& p : layout)
            cap = std::max(cap, p.size());
        if (share >= cap)
            break;
        ++share;
    }

    GradCheckReport rep;
    auto rng = make_rng(seed, {0x67726164});
    for (const auto& p : layout) {
        std::vector<std::size_t> idx(p.size());
        for (std::size_t i = 0; i < idx.size(); ++i)
            idx[i] = p.offset + i;
        shuffle_portable(idx, rng);
        idx.resize(std::min(share, idx.size()));
        double worst = 0;
        for (std::size_t i : idx) {
            const double w0 = work.weights[i];
            auto at = [&](double dw) {
                work.weights[i] = w0 + dw;
                return loss();
            };
            double gn;
            if (stencil == Stencil::central)
                gn = (at(h) - at(-h)) / (2.0 * h);
            else
                gn = (at(-2 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2 * h)) / (12.0 * h);
            work.weights[i] = w0;
            const double ga = analytic[i];
            const double err = std::abs(ga - gn) / std::max({std::abs(ga), std::abs(gn), 1e-8});
            worst = std::max(worst, err);
        }
        rep.layers.push_back(p.name);
        rep.samples_per_layer.push_back(idx.size());
        rep.max_error_per_layer.push_back(worst);
        rep.total_samples += idx.size();
        rep.max_relative_error = std::max(rep.max_relative_error, worst);
    }
    return rep;
}

// Inference -----------------------------------------------------------------------

/// Forward pass, integration of the derivative estimates (zero prepended),
/// pulse band-pass and standardization. Output length equals the frame count.
template <class T>
recovery::BvpEstimate predict_bvp(const CanModel<T>& model, const drm::VideoTensor& video)
{
    const auto in = normalize_frames(downsample(video, model.config.input_size));
    const auto y = forward_clip(model, in);
    std::vector<double> wave(video.frames);
    if (model.config.regress_derivative) {
        wave[0] = 0.0;
        for (std::size_t t = 0; t < y.size(); ++t)
            wave[t + 1] = wave[t] + y[t];
    } else {
        wave[0] = y.front();
        std::copy(y.begin(), y.end(), wave.begin() + 1);
    }
    auto out = dsp::filtfilt(dsp::pulse_band_filter(video.sample_rate), wave);
    double mean = 0, var = 0;
    for (double v : out)
        mean += v;
    mean /= static_cast<double>(out.size());
    for (double v : out)
        var += (v - mean) * (v - mean);
    var /= static_cast<double>(out.size());
    const double inv = var > 0.0 ? 1.0 / std::sqrt(var) : 0.0;
    for (double& v : out)
        v = (v - mean) * inv;
    return {out, video.sample_rate, "can", true};
}

// Checkpoint -------------------------------------------------------------------------

inline constexpr std::string_view kCheckpointMagic = "CANW";
inline constexpr std::uint16_t kCheckpointVersion = 1;

/// "CANW" | u16 version | u32 config length | config JSON | f32 weights
template <class T>
std::string encode_checkpoint(const CanModel<T>& m)
{
    const std::string cfg = to_json(m.config).dump();
    std::string out;
    out.append(kCheckpointMagic);
    io::put_u16(out, kCheckpointVersion);
    io::put_u32(out, static_cast<std::uint32_t>(cfg.size()));
    out += cfg;
    for (T w : m.weights)
        io::put_f32(out, static_cast<float>(w));
    return out;
}

inline CanModel<float> decode_checkpoint(std::string_view bytes, const std::string& source)
{
    io::ByteReader r(bytes, source);
    if (r.remaining() < 4 || r.take(4) != kCheckpointMagic)
        throw ParseError(source + ": bad magic (not a CANW checkpoint)");
    const auto version = r.u16();
    if (version != kCheckpointVersion)
        throw ParseError(source + ": unsupported CANW version " + std::to_string(version));
    const auto len = r.u32();
    CanConfig cfg;
    try {
        cfg = can_config_from_json(json::parse(r.take(len)));
    } catch (const json::exception& e) {
        throw ParseError(source + ": invalid config JSON: " + e.what());
    } catch (const ConfigError& e) {
        throw ParseError(source + ": " + e.what());
    }
    auto m = CanModel<float>::zeros(cfg);
    if (r.remaining() != m.weights.size() * 4)
        throw ParseError(source + ": expected " + std::to_string(m.weights.size()) + " weights, found " +
                         std::to_string(r.remaining() / 4));
    for (float& w : m.weights) {
        w = r.f32();
        if (!std::isfinite(w))
            throw ParseError(source + ": non-finite weight");
    }
    return m;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const CanModel<T>& m)
{
    io::atomic_write(path, encode_checkpoint(m));
}

inline CanModel<float> load_checkpoint(const std::filesystem::path& path)
{
    std::string bytes;
    try {
        bytes = io::read_file(path);
    } catch (const Error&) {
        throw ParseError(path.string() + ": cannot open file");
    }
    return decode_checkpoint(bytes, path.string());
}

} // namespace pulseforge::neural
