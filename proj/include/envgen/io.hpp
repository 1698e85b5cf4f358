#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "envgen/common.hpp"
#include "envgen/tensor.hpp"

namespace envgen {

// CRC-32 (IEEE 802.3, reflected), table-driven.
inline std::uint32_t crc32(const void* data, std::size_t len, std::uint32_t crc = 0) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    const auto* p = static_cast<const unsigned char*>(data);
    crc ^= 0xffffffffu;
    for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ p[i]) & 0xffu] ^ (crc >> 8);
    return crc ^ 0xffffffffu;
}

// FNV-1a 64-bit; used for config/content hashes embedded in artifacts.
inline std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

// Content hash of a whole file; reports compare these across reruns.
inline std::uint64_t file_fnv1a64(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for hashing: " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 14];
    while (is) {
        is.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<std::size_t>(is.gcount()), h);
    }
    return h;
}

inline std::uint64_t parse_hex64(const std::string& s) {
    std::size_t used = 0;
    std::uint64_t v = 0;
    try {
        v = std::stoull(s, &used, 16);
    } catch (const std::exception&) {
        throw IoError("not a 64-bit hex value: " + s);
    }
    if (used != s.size() || s.empty()) throw IoError("not a 64-bit hex value: " + s);
    return v;
}

// Little-endian binary writer that tracks a running CRC32 of everything
// written, so artifact files can end with a checksum trailer.
class BinaryWriter {
public:
    explicit BinaryWriter(const std::filesystem::path& path) : path_(path.string()), os_(path, std::ios::binary) {
        if (!os_) throw IoError("cannot open for write: " + path_.string());
    }

    void bytes(const void* p, std::size_t n) {
        os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        crc_ = crc32(p, n, crc_);
    }
    void magic(const char (&m)[9]) { bytes(m, 8); }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void u64(std::uint64_t v) { bytes(&v, 8); }
    void i64(std::int64_t v) { bytes(&v, 8); }
    void f32(float v) { bytes(&v, 4); }
    void f64(double v) { bytes(&v, 8); }
    void f32s(const float* p, std::size_t n) { bytes(p, n * 4); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void tensor(const Tensor& t) {
        u32(static_cast<std::uint32_t>(t.rank()));
        for (int d : t.shape()) u32(static_cast<std::uint32_t>(d));
        f32s(t.data(), static_cast<std::size_t>(t.size()));
    }
    // Writes the running CRC as the final 4 bytes.
    void crc_trailer() {
        std::uint32_t c = crc_;
        os_.write(reinterpret_cast<const char*>(&c), 4);
    }
    void close() {
        os_.close();
        if (!os_) throw IoError("write failed: " + path_.string());
    }

private:
    std::filesystem::path path_;
    std::ofstream os_;
    std::uint32_t crc_ = 0;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::filesystem::path& path) : path_(path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw MissingArtifactError("cannot open: " + path.string());
        buf_.assign(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
    }

    std::size_t remaining() const { return buf_.size() - pos_; }
    void bytes(void* p, std::size_t n) {
        if (pos_ + n > buf_.size()) throw IoError("truncated file: " + path_.string());
        std::memcpy(p, buf_.data() + pos_, n);
        pos_ += n;
    }
    void expect_magic(const char (&m)[9]) {
        char got[8];
        bytes(got, 8);
        if (std::memcmp(got, m, 8) != 0) throw IoError("bad magic in " + path_.string());
    }
    std::uint8_t u8() { std::uint8_t v; bytes(&v, 1); return v; }
    std::uint32_t u32() { std::uint32_t v; bytes(&v, 4); return v; }
    std::uint64_t u64() { std::uint64_t v; bytes(&v, 8); return v; }
    std::int64_t i64() { std::int64_t v; bytes(&v, 8); return v; }
    float f32() { float v; bytes(&v, 4); return v; }
    double f64() { double v; bytes(&v, 8); return v; }
    void f32s(float* p, std::size_t n) { bytes(p, n * 4); }
    std::string str() {
        std::uint32_t n = u32();
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    Tensor tensor() {
        std::uint32_t r = u32();
        Shape s(r);
        for (auto& d : s) d = static_cast<int>(u32());
        Tensor t(s);
        f32s(t.data(), static_cast<std::size_t>(t.size()));
        return t;
    }
    // Validates that the final 4 bytes equal the CRC32 of everything before them.
    void check_crc_trailer() const {
        if (buf_.size() < 4) throw IoError("truncated file: " + path_.string());
        std::uint32_t stored;
        std::memcpy(&stored, buf_.data() + buf_.size() - 4, 4);
        std::uint32_t actual = crc32(buf_.data(), buf_.size() - 4);
        if (stored != actual) throw IoError("checksum mismatch in " + path_.string());
    }
    // True once only the CRC trailer is left.
    bool at_trailer() const { return remaining() == 4; }

private:
    std::filesystem::path path_;
    std::vector<char> buf_;
    std::size_t pos_ = 0;
};

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingArtifactError("cannot open: " + path.string());
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path.string());
    os << text;
    if (!os) throw IoError("write failed: " + path.string());
}

inline std::uint64_t file_content_hash(const std::filesystem::path& path) {
    std::string s = read_text_file(path);
    return fnv1a64(s);
}

}  // namespace envgen
