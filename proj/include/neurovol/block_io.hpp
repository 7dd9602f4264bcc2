#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "neurovol/error.hpp"
#include "neurovol/volume.hpp"

namespace neurovol {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Little-endian encoding
// ---------------------------------------------------------------------------

template <typename T>
[[nodiscard]] std::string to_le_bytes(std::span<const T> values) {
    static_assert(std::is_integral_v<T>);
    std::string out(values.size() * sizeof(T), '\0');
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(out.data(), values.data(), out.size());
    } else {
        for (std::size_t i = 0; i < values.size(); ++i) {
            auto v = static_cast<std::make_unsigned_t<T>>(values[i]);
            for (std::size_t b = 0; b < sizeof(T); ++b)
                out[i * sizeof(T) + b] = static_cast<char>((v >> (8 * b)) & 0xFF);
        }
    }
    return out;
}

template <typename T>
[[nodiscard]] std::vector<T> from_le_bytes(std::string_view bytes) {
    static_assert(std::is_integral_v<T>);
    if (bytes.size() % sizeof(T) != 0) throw std::invalid_argument("byte length is not a multiple of the element size");
    std::vector<T> out(bytes.size() / sizeof(T));
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(out.data(), bytes.data(), bytes.size());
    } else {
        for (std::size_t i = 0; i < out.size(); ++i) {
            std::make_unsigned_t<T> v = 0;
            for (std::size_t b = 0; b < sizeof(T); ++b)
                v |= static_cast<std::make_unsigned_t<T>>(static_cast<unsigned char>(bytes[i * sizeof(T) + b])) << (8 * b);
            out[i] = static_cast<T>(v);
        }
    }
    return out;
}

/// Shortest representation that parses back to the same double.
[[nodiscard]] inline std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, end);
}

namespace detail {

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFound("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const fs::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("short write to " + path.string());
}

/// Splits "header\npayload" and returns the header tokens.
inline std::vector<std::string> split_header(std::string_view file, std::string_view& payload) {
    const auto nl = file.find('\n');
    if (nl == std::string_view::npos) throw std::invalid_argument("missing header line");
    std::istringstream hs{std::string(file.substr(0, nl))};
    std::vector<std::string> tokens;
    for (std::string t; hs >> t;) tokens.push_back(t);
    payload = file.substr(nl + 1);
    return tokens;
}

inline std::size_t parse_size(const std::string& s) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) throw std::invalid_argument("bad integer in header: " + s);
    return v;
}

inline double parse_double(const std::string& s) {
    double v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) throw std::invalid_argument("bad number in header: " + s);
    return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// NVB1 image blocks
// ---------------------------------------------------------------------------

[[nodiscard]] inline std::string encode_block(const VolumeBlock& b) {
    const auto& e = b.extents();
    if (b.channel.empty() || b.channel.find_first_of(" \t\n") != std::string::npos)
        throw std::invalid_argument("channel name must be a non-empty token");
    std::string out = "NVB1 " + std::to_string(e.nx) + ' ' + std::to_string(e.ny) + ' ' + std::to_string(e.nz) + ' ' +
                      b.channel + ' ' + std::to_string(b.grid_pos.row) + ' ' + std::to_string(b.grid_pos.col) + ' ' +
                      format_double(b.resolution.dx) + ' ' + format_double(b.resolution.dy) + ' ' +
                      format_double(b.resolution.dz) + '\n';
    out += to_le_bytes<std::uint16_t>(b.voxels.span());
    return out;
}

[[nodiscard]] inline VolumeBlock decode_block(std::string_view file) {
    std::string_view payload;
    const auto t = detail::split_header(file, payload);
    if (t.size() != 10 || t[0] != "NVB1") throw std::invalid_argument("not an NVB1 block");
    Extents e{detail::parse_size(t[1]), detail::parse_size(t[2]), detail::parse_size(t[3])};
    if (payload.size() != e.count() * 2) throw std::invalid_argument("NVB1 payload length mismatch");
    VolumeBlock b;
    b.channel = t[4];
    b.grid_pos = {std::stoi(t[5]), std::stoi(t[6])};
    b.resolution = {detail::parse_double(t[7]), detail::parse_double(t[8]), detail::parse_double(t[9])};
    b.resolution.validate();
    b.voxels = Volume<std::uint16_t>(e, from_le_bytes<std::uint16_t>(payload));
    return b;
}

[[nodiscard]] inline std::string block_file_name(GridPos p, const std::string& channel) {
    return "block_r" + std::to_string(p.row) + "_c" + std::to_string(p.col) + "_" + channel + ".nvb";
}

inline void write_block(const fs::path& path, const VolumeBlock& b) { detail::write_file(path, encode_block(b)); }

[[nodiscard]] inline VolumeBlock read_block(const fs::path& path) { return decode_block(detail::read_file(path)); }

/// Block files of one channel in a directory, keyed by grid position.
[[nodiscard]] inline std::map<GridPos, fs::path> list_block_files(const fs::path& dir, const std::string& channel) {
    if (!fs::is_directory(dir)) throw NotFound("block directory does not exist: " + dir.string());
    static const std::regex name_re(R"(block_r(\d+)_c(\d+)_(.+)\.nvb)");
    std::map<GridPos, fs::path> out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        std::smatch m;
        const std::string name = entry.path().filename().string();
        if (!std::regex_match(name, m, name_re) || m[3] != channel) continue;
        out[{std::stoi(m[1]), std::stoi(m[2])}] = entry.path();
    }
    return out;
}

// ---------------------------------------------------------------------------
// NVL1 label volumes
// ---------------------------------------------------------------------------

[[nodiscard]] inline std::string encode_labels(const LabelVolume& v) {
    const auto& e = v.extents();
    std::string out = "NVL1 " + std::to_string(e.nx) + ' ' + std::to_string(e.ny) + ' ' + std::to_string(e.nz) + '\n';
    out += to_le_bytes<std::uint32_t>(v.span());
    return out;
}

[[nodiscard]] inline LabelVolume decode_labels(std::string_view file) {
    std::string_view payload;
    const auto t = detail::split_header(file, payload);
    if (t.size() != 4 || t[0] != "NVL1") throw std::invalid_argument("not an NVL1 label volume");
    Extents e{detail::parse_size(t[1]), detail::parse_size(t[2]), detail::parse_size(t[3])};
    if (payload.size() != e.count() * 4) throw std::invalid_argument("NVL1 payload length mismatch");
    return LabelVolume(e, from_le_bytes<std::uint32_t>(payload));
}

inline void write_labels(const fs::path& path, const LabelVolume& v) { detail::write_file(path, encode_labels(v)); }

[[nodiscard]] inline LabelVolume read_labels(const fs::path& path) { return decode_labels(detail::read_file(path)); }

}  // namespace neurovol
