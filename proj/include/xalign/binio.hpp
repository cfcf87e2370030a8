#pragma once

// Little-endian binary serialization helpers shared by the checkpoint and
// index file formats. All formats append a zlib CRC32 footer computed over
// every preceding byte.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

#include <zlib.h>

namespace xalign::binio {

static_assert(std::endian::native == std::endian::little,
              "binary file formats assume a little-endian host");

inline void put_u32(std::string& b, uint32_t v) {
    b.append(reinterpret_cast<const char*>(&v), 4);
}
inline void put_u64(std::string& b, uint64_t v) {
    b.append(reinterpret_cast<const char*>(&v), 8);
}
inline void put_f32(std::string& b, float v) {
    b.append(reinterpret_cast<const char*>(&v), 4);
}
inline void put_bytes(std::string& b, const void* p, size_t n) {
    b.append(reinterpret_cast<const char*>(p), n);
}

inline uint32_t crc_of(const std::string& b, size_t n) {
    return uint32_t(::crc32(0L, reinterpret_cast<const Bytef*>(b.data()), uInt(n)));
}

// Appends the CRC32 footer and writes the buffer atomically-ish to `path`.
inline void write_file_with_crc(std::string& buf, const std::string& path,
                                const char* what) {
    put_u32(buf, crc_of(buf, buf.size()));
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(std::string(what) + ": cannot open " + path);
    out.write(buf.data(), std::streamsize(buf.size()));
    if (!out) throw std::runtime_error(std::string(what) + ": write failed for " + path);
}

// Reads a whole file, verifies the CRC32 footer, and returns the payload
// bytes (footer stripped).
inline std::string read_file_checked(const std::string& path, const char* what) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(std::string(what) + ": cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 4) throw std::runtime_error(std::string(what) + ": truncated file");
    uint32_t stored = 0;
    std::memcpy(&stored, buf.data() + buf.size() - 4, 4);
    if (crc_of(buf, buf.size() - 4) != stored)
        throw std::runtime_error(std::string(what) + ": CRC mismatch (corrupt file)");
    buf.resize(buf.size() - 4);
    return buf;
}

class Reader {
  public:
    Reader(const std::string& buf, const char* what) : buf_(buf), what_(what) {}
    uint32_t u32() { return read_as<uint32_t>(); }
    uint64_t u64() { return read_as<uint64_t>(); }
    float f32() { return read_as<float>(); }
    void bytes(void* dst, size_t n) {
        need(n);
        std::memcpy(dst, buf_.data() + pos_, n);
        pos_ += n;
    }
    std::string str(size_t n) {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    size_t pos() const { return pos_; }
    size_t remaining() const { return buf_.size() - pos_; }
    void expect_end() const {
        if (pos_ != buf_.size())
            throw std::runtime_error(std::string(what_) + ": trailing bytes");
    }

  private:
    template <class T>
    T read_as() {
        T v;
        bytes(&v, sizeof(T));
        return v;
    }
    void need(size_t n) const {
        if (pos_ + n > buf_.size())
            throw std::runtime_error(std::string(what_) + ": truncated file");
    }
    const std::string& buf_;
    const char* what_;
    size_t pos_ = 0;
};

}  // namespace xalign::binio
