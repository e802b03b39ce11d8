#pragma once

// MCV container:
//   bytes 0..7   magic "MCVOL\0\0\1"
//   bytes 8..11  header length L, uint32 little-endian
//   L bytes      UTF-8 JSON {"dtype":"f32"|"u8","layout":"CHW"|"HW","shape":[...]}
//   payload      little-endian elements, row-major in the declared layout

#include <array>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcseg/errors.hpp"
#include "mcseg/volume.hpp"

namespace mcseg {

namespace io_detail {

inline constexpr std::array<char, 8> kMagic{'M', 'C', 'V', 'O', 'L', '\0', '\0', '\1'};

inline void put_u32le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32le(const unsigned char* p) {
    return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) |
           (std::uint32_t{p[3]} << 24);
}

inline std::string encode(const nlohmann::json& header, std::string_view payload) {
    const std::string text = header.dump();
    std::string out(kMagic.begin(), kMagic.end());
    put_u32le(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    out.append(payload);
    return out;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for '" + path.string() + "'");
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path.string() + "' for reading");
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

struct Decoded {
    std::string dtype;
    std::string layout;
    std::vector<std::size_t> shape;
    std::string_view payload;
};

inline Decoded decode(const std::string& bytes, const std::string& origin) {
    if (bytes.size() < 12 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin()))
        throw FormatError("'" + origin + "' does not start with the MCV magic");
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::uint32_t len = get_u32le(raw + 8);
    if (bytes.size() < 12 + std::size_t{len})
        throw FormatError("'" + origin + "' header length exceeds file size");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + len);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + origin + "' header is not valid JSON: " + e.what());
    }
    if (!header.is_object() || !header.contains("dtype") || !header.contains("layout") ||
        !header.contains("shape") || !header["dtype"].is_string() ||
        !header["layout"].is_string() || !header["shape"].is_array())
        throw FormatError("'" + origin + "' header lacks dtype/layout/shape");

    Decoded d;
    d.dtype = header["dtype"].get<std::string>();
    d.layout = header["layout"].get<std::string>();
    for (const auto& s : header["shape"]) {
        if (!s.is_number_unsigned() || s.get<std::size_t>() == 0)
            throw FormatError("'" + origin + "' shape entries must be positive integers");
        d.shape.push_back(s.get<std::size_t>());
    }
    if (d.dtype != "f32" && d.dtype != "u8")
        throw FormatError("'" + origin + "' has unknown dtype '" + d.dtype + "'");
    if (d.layout.size() != d.shape.size())
        throw FormatError("'" + origin + "' layout '" + d.layout + "' disagrees with shape rank");
    d.payload = std::string_view(bytes).substr(12 + len);
    return d;
}

}  // namespace io_detail

inline void save_volume(const std::filesystem::path& path, const MultiChannelVolume& v) {
    if (!v.all_finite())
        throw ArgumentError("refusing to write non-finite volume to '" + path.string() + "'");
    nlohmann::json header = {{"dtype", "f32"},
                             {"layout", "CHW"},
                             {"shape", {v.channels(), v.height(), v.width()}}};
    std::string payload;
    payload.reserve(v.size() * 4);
    for (float f : v.data()) {
        const auto bits = std::bit_cast<std::uint32_t>(f);
        io_detail::put_u32le(payload, bits);
    }
    io_detail::write_file(path, io_detail::encode(header, payload));
}

inline MultiChannelVolume load_volume(const std::filesystem::path& path) {
    const std::string bytes = io_detail::read_file(path);
    const auto d = io_detail::decode(bytes, path.string());
    if (d.dtype != "f32" || d.layout != "CHW")
        throw FormatError("'" + path.string() + "' is not an f32 CHW volume");
    const std::size_t n = d.shape[0] * d.shape[1] * d.shape[2];
    if (d.payload.size() < n * 4)
        throw TruncationError("'" + path.string() + "' payload holds " +
                              std::to_string(d.payload.size() / 4) + " of " + std::to_string(n) +
                              " floats");
    if (d.payload.size() > n * 4)
        throw FormatError("'" + path.string() + "' has trailing bytes after payload");
    std::vector<float> data(n);
    const auto* p = reinterpret_cast<const unsigned char*>(d.payload.data());
    for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<float>(io_detail::get_u32le(p + 4 * i));
    MultiChannelVolume v(d.shape[0], d.shape[1], d.shape[2], std::move(data));
    if (!v.all_finite()) throw FormatError("'" + path.string() + "' contains non-finite values");
    return v;
}

inline void save_labels(const std::filesystem::path& path, const LabelMap& m) {
    nlohmann::json header = {{"dtype", "u8"}, {"layout", "HW"}, {"shape", {m.height(), m.width()}}};
    const auto labels = m.labels();
    io_detail::write_file(
        path, io_detail::encode(header, {reinterpret_cast<const char*>(labels.data()), labels.size()}));
}

inline LabelMap load_labels(const std::filesystem::path& path,
                            std::uint8_t n_classes = kDefaultClassCount,
                            std::uint8_t ignore = kIgnoreLabel) {
    const std::string bytes = io_detail::read_file(path);
    const auto d = io_detail::decode(bytes, path.string());
    if (d.dtype != "u8" || d.layout != "HW")
        throw FormatError("'" + path.string() + "' is not a u8 HW label map");
    const std::size_t n = d.shape[0] * d.shape[1];
    if (d.payload.size() < n)
        throw TruncationError("'" + path.string() + "' payload holds " +
                              std::to_string(d.payload.size()) + " of " + std::to_string(n) + " labels");
    if (d.payload.size() > n)
        throw FormatError("'" + path.string() + "' has trailing bytes after payload");
    std::vector<std::uint8_t> labels(d.payload.begin(), d.payload.end());
    try {
        return LabelMap(d.shape[0], d.shape[1], std::move(labels), n_classes, ignore);
    } catch (const ArgumentError& e) {
        throw FormatError("'" + path.string() + "': " + e.what());
    }
}

/// Generic f32 tensor of any rank; `layout` names the axes, one letter each.
inline void save_tensor(const std::filesystem::path& path, const std::string& layout,
                        const std::vector<std::size_t>& shape, std::span<const float> values) {
    if (layout.size() != shape.size()) throw ArgumentError("layout '" + layout + "' does not match shape rank");
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    if (n != values.size()) throw ArgumentError("tensor value count does not match its shape");
    for (float f : values)
        if (!std::isfinite(f)) throw ArgumentError("refusing to write non-finite tensor to '" + path.string() + "'");
    nlohmann::json header = {{"dtype", "f32"}, {"layout", layout}, {"shape", shape}};
    std::string payload;
    payload.reserve(values.size() * 4);
    for (float f : values) io_detail::put_u32le(payload, std::bit_cast<std::uint32_t>(f));
    io_detail::write_file(path, io_detail::encode(header, payload));
}

struct StoredTensor {
    std::string layout;
    std::vector<std::size_t> shape;
    std::vector<float> values;
};

inline StoredTensor load_tensor(const std::filesystem::path& path) {
    const std::string bytes = io_detail::read_file(path);
    const auto d = io_detail::decode(bytes, path.string());
    if (d.dtype != "f32") throw FormatError("'" + path.string() + "' is not an f32 tensor");
    std::size_t n = 1;
    for (auto s : d.shape) n *= s;
    if (d.payload.size() < n * 4) throw TruncationError("'" + path.string() + "' payload is short");
    if (d.payload.size() > n * 4) throw FormatError("'" + path.string() + "' has trailing bytes after payload");
    StoredTensor t{d.layout, d.shape, std::vector<float>(n)};
    const auto* p = reinterpret_cast<const unsigned char*>(d.payload.data());
    for (std::size_t i = 0; i < n; ++i) t.values[i] = std::bit_cast<float>(io_detail::get_u32le(p + 4 * i));
    return t;
}

struct Rgb {
    std::uint8_t r, g, b;
};

/// Display palette: classes 0..5 then the ignore index.
inline constexpr std::array<Rgb, 7> kPalette{{
    {0, 0, 0},        // 0 background
    {0, 114, 189},    // 1 cerebrospinal fluid
    {217, 83, 25},    // 2 vertebral body fluid
    {237, 177, 32},   // 3 lumbar disc
    {126, 47, 142},   // 4 spinal fluid
    {119, 172, 48},   // 5 bone
    {255, 255, 255},  // 6 ignore
}};

/// Grayscale P5 with maxval 255; gray = label * 40 so all seven values are distinct.
inline void export_pgm(const std::filesystem::path& path, const LabelMap& m) {
    std::string out = "P5\n" + std::to_string(m.width()) + " " + std::to_string(m.height()) + "\n255\n";
    for (auto l : m.labels()) out.push_back(static_cast<char>(std::min(255, l * 40)));
    io_detail::write_file(path, out);
}

/// Color P6 using kPalette; labels beyond the palette render as mid gray.
inline void export_ppm(const std::filesystem::path& path, const LabelMap& m) {
    std::string out = "P6\n" + std::to_string(m.width()) + " " + std::to_string(m.height()) + "\n255\n";
    for (auto l : m.labels()) {
        const Rgb c = l < kPalette.size() ? kPalette[l] : Rgb{128, 128, 128};
        out.push_back(static_cast<char>(c.r));
        out.push_back(static_cast<char>(c.g));
        out.push_back(static_cast<char>(c.b));
    }
    io_detail::write_file(path, out);
}

}  // namespace mcseg
