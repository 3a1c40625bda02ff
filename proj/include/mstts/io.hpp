#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mstts::io {

/// Append-only little-endian byte sink.
struct Writer {
    std::string buf;

    void u8(uint8_t v) { buf.push_back(static_cast<char>(v)); }
    void u16(uint16_t v) {
        for (int i = 0; i < 2; ++i) u8(static_cast<uint8_t>(v >> (8 * i)));
    }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) u8(static_cast<uint8_t>(v >> (8 * i)));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) u8(static_cast<uint8_t>(v >> (8 * i)));
    }
    void i32(int32_t v) { u32(std::bit_cast<uint32_t>(v)); }
    void i64(int64_t v) { u64(std::bit_cast<uint64_t>(v)); }
    void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<uint64_t>(v)); }
    void bytes(const void *p, size_t n) { buf.append(static_cast<const char *>(p), n); }
    void str16(const std::string &s) {
        if (s.size() > 0xffff) throw std::invalid_argument("string too long for str16");
        u16(static_cast<uint16_t>(s.size()));
        buf.append(s);
    }
};

/// Bounds-checked little-endian byte source; any overrun throws, so a
/// truncated file can never yield a partial load.
struct Reader {
    const uint8_t *p;
    size_t n;
    size_t pos = 0;

    explicit Reader(const std::vector<uint8_t> &data) : p(data.data()), n(data.size()) {}

    void require(size_t k, const char *what) {
        if (pos + k > n) throw std::runtime_error(std::string("truncated file while reading ") + what);
    }
    uint8_t u8(const char *what = "u8") {
        require(1, what);
        return p[pos++];
    }
    uint16_t u16(const char *what = "u16") {
        require(2, what);
        uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<uint16_t>(p[pos++]) << (8 * i);
        return v;
    }
    uint32_t u32(const char *what = "u32") {
        require(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[pos++]) << (8 * i);
        return v;
    }
    uint64_t u64(const char *what = "u64") {
        require(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[pos++]) << (8 * i);
        return v;
    }
    int32_t i32(const char *what = "i32") { return std::bit_cast<int32_t>(u32(what)); }
    int64_t i64(const char *what = "i64") { return std::bit_cast<int64_t>(u64(what)); }
    float f32(const char *what = "f32") { return std::bit_cast<float>(u32(what)); }
    double f64(const char *what = "f64") { return std::bit_cast<double>(u64(what)); }
    std::string str16(const char *what = "string") {
        size_t len = u16(what);
        require(len, what);
        std::string s(reinterpret_cast<const char *>(p + pos), len);
        pos += len;
        return s;
    }
    std::string raw(size_t k, const char *what = "bytes") {
        require(k, what);
        std::string s(reinterpret_cast<const char *>(p + pos), k);
        pos += k;
        return s;
    }
    bool exhausted() const { return pos == n; }
};

inline std::vector<uint8_t> read_file(const std::string &path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open file: " + path);
    f.seekg(0, std::ios::end);
    std::streamoff size = f.tellg();
    f.seekg(0);
    std::vector<uint8_t> data(static_cast<size_t>(size));
    if (size > 0) f.read(reinterpret_cast<char *>(data.data()), size);
    if (!f) throw std::runtime_error("read failed: " + path);
    return data;
}

inline std::string read_text_file(const std::string &path) {
    auto data = read_file(path);
    return std::string(data.begin(), data.end());
}

inline void write_file(const std::string &path, const std::string &data) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open file for write: " + path);
    f.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

/// Write-temp-then-rename so readers never observe a partial file.
inline void write_file_atomic(const std::string &path, const std::string &data) {
    std::string tmp = path + ".tmp";
    write_file(tmp, data);
    std::filesystem::rename(tmp, path);
}

}  // namespace mstts::io
