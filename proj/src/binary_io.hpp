#pragma once

#include "moeq/errors.hpp"
#include "moeq/linalg.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

// Little-endian primitives shared by the binary containers.
namespace moeq::io {

inline void write_u32(std::ostream &out, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                       static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    out.write(b, 4);
}

inline void write_i32(std::ostream &out, std::int32_t v) { write_u32(out, static_cast<std::uint32_t>(v)); }

inline void write_u8(std::ostream &out, std::uint8_t v) { out.put(static_cast<char>(v)); }

inline void write_f32(std::ostream &out, double v) { write_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }

inline void write_f32s(std::ostream &out, std::span<const double> values) {
    for (double v : values) {
        write_f32(out, v);
    }
}

inline void write_magic(std::ostream &out, std::string_view magic) { out.write(magic.data(), static_cast<std::streamsize>(magic.size())); }

inline void read_bytes(std::istream &in, char *dst, std::size_t n) {
    in.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) {
        throw FormatError("unexpected end of file");
    }
}

inline std::uint32_t read_u32(std::istream &in) {
    unsigned char b[4];
    read_bytes(in, reinterpret_cast<char *>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::int32_t read_i32(std::istream &in) { return static_cast<std::int32_t>(read_u32(in)); }

inline std::uint8_t read_u8(std::istream &in) {
    char c;
    read_bytes(in, &c, 1);
    return static_cast<std::uint8_t>(c);
}

inline double read_f32(std::istream &in) {
    const float f = std::bit_cast<float>(read_u32(in));
    if (!std::isfinite(f)) {
        throw FormatError("non-finite tensor value");
    }
    return static_cast<double>(f);
}

inline std::vector<double> read_f32s(std::istream &in, std::size_t n) {
    std::vector<double> out(n);
    for (auto &v : out) {
        v = read_f32(in);
    }
    return out;
}

inline Matrix read_matrix(std::istream &in, std::size_t rows, std::size_t cols) {
    return Matrix(rows, cols, read_f32s(in, rows * cols));
}

inline void expect_magic(std::istream &in, std::string_view magic) {
    std::string got(magic.size(), '\0');
    in.read(got.data(), static_cast<std::streamsize>(got.size()));
    if (static_cast<std::size_t>(in.gcount()) != magic.size() || got != magic) {
        throw FormatError("bad magic: expected \"" + std::string(magic) + "\"");
    }
}

inline void expect_version(std::istream &in, std::uint32_t version) {
    const auto v = read_u32(in);
    if (v != version) {
        throw FormatError("unsupported format version " + std::to_string(v));
    }
}

inline void expect_eof(std::istream &in) {
    if (in.peek() != std::char_traits<char>::eof()) {
        throw FormatError("trailing bytes after payload");
    }
}

} // namespace moeq::io
