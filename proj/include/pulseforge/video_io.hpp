#pragma once

// VTEN clip container:
//   "VTEN" | u16 version | u32 T | u32 H | u32 W | f32 sample_rate | f32 x T*H*W*3
// all little-endian, row-major, channel-last.

#include <filesystem>
#include <string>
#include <string_view>

#include "pulseforge/drm.hpp"
#include "pulseforge/error.hpp"
#include "pulseforge/io_util.hpp"

namespace pulseforge::io {

inline constexpr std::string_view kVideoMagic = "VTEN";
inline constexpr std::uint16_t kVideoVersion = 1;

inline std::string encode_video(const drm::VideoTensor& v)
{
    std::string out;
    out.reserve(22 + v.data.size() * 4);
    out.append(kVideoMagic);
    put_u16(out, kVideoVersion);
    put_u32(out, v.frames);
    put_u32(out, v.height);
    put_u32(out, v.width);
    put_f32(out, static_cast<float>(v.sample_rate));
    for (float f : v.data)
        put_f32(out, f);
    return out;
}

inline drm::VideoTensor decode_video(std::string_view bytes, const std::string& source)
{
    ByteReader r(bytes, source);
    if (r.remaining() < 4 || r.take(4) != kVideoMagic)
        throw ParseError(source + ": bad magic (not a VTEN tensor)");
    const auto version = r.u16();
    if (version != kVideoVersion)
        throw ParseError(source + ": unsupported VTEN version " + std::to_string(version));
    const auto t = r.u32(), h = r.u32(), w = r.u32();
    const double fs = r.f32();
    if (t < 2 || h < 1 || w < 1 || !(fs > 0.0))
        throw ParseError(source + ": invalid header (T=" + std::to_string(t) + ", H=" + std::to_string(h) +
                         ", W=" + std::to_string(w) + ")");
    const std::size_t count = static_cast<std::size_t>(t) * h * w * 3;
    if (r.remaining() != count * 4)
        throw ParseError(source + ": payload has " + std::to_string(r.remaining()) + " bytes, expected " +
                         std::to_string(count * 4));
    drm::VideoTensor v(t, h, w, fs);
    for (std::size_t i = 0; i < count; ++i) {
        v.data[i] = r.f32();
        if (!(v.data[i] >= 0.0f && v.data[i] <= 1.0f))
            throw ParseError(source + ": value out of [0, 1] at element " + std::to_string(i));
    }
    return v;
}

inline void write_video(const std::filesystem::path& path, const drm::VideoTensor& v)
{
    atomic_write(path, encode_video(v));
}

inline drm::VideoTensor read_video(const std::filesystem::path& path)
{
    std::string bytes;
    try {
        bytes = read_file(path);
    } catch (const Error&) {
        throw ParseError(path.string() + ": cannot open file");
    }
    return decode_video(bytes, path.string());
}

} // namespace pulseforge::io
