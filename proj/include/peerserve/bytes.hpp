#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace peerserve {

using Bytes = std::vector<uint8_t>;
using BytesView = std::span<const uint8_t>;

inline Bytes to_bytes(std::string_view s) {
    return Bytes(s.begin(), s.end());
}

inline std::string to_string(BytesView b) {
    return std::string(b.begin(), b.end());
}

std::string hex_encode(BytesView b);
Bytes hex_decode(std::string_view hex);

/** Big-endian serializer used by all wire formats. */
class ByteWriter {
public:
    void u8(uint8_t v) { buf_.push_back(v); }
    void u16(uint16_t v) {
        buf_.push_back(uint8_t(v >> 8));
        buf_.push_back(uint8_t(v));
    }
    void u32(uint32_t v) {
        for (int s = 24; s >= 0; s -= 8) buf_.push_back(uint8_t(v >> s));
    }
    void u64(uint64_t v) {
        for (int s = 56; s >= 0; s -= 8) buf_.push_back(uint8_t(v >> s));
    }
    void f64(double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        u64(bits);
    }
    void raw(BytesView b) { buf_.insert(buf_.end(), b.begin(), b.end()); }

    Bytes take() { return std::move(buf_); }
    const Bytes& bytes() const { return buf_; }

private:
    Bytes buf_;
};

/** Big-endian reader; throws on truncated input. */
class ByteReader {
public:
    explicit ByteReader(BytesView b) : data_(b) {}

    uint8_t u8() { return take(1)[0]; }
    uint16_t u16() {
        auto b = take(2);
        return uint16_t(b[0]) << 8 | b[1];
    }
    uint32_t u32() {
        auto b = take(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v = v << 8 | b[i];
        return v;
    }
    uint64_t u64() {
        auto b = take(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v = v << 8 | b[i];
        return v;
    }
    double f64() {
        uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, sizeof v);
        return v;
    }
    BytesView raw(size_t n) { return take(n); }
    size_t remaining() const { return data_.size() - pos_; }
    bool done() const { return pos_ == data_.size(); }

private:
    BytesView take(size_t n) {
        if (pos_ + n > data_.size()) throw std::runtime_error("truncated buffer");
        BytesView out = data_.subspan(pos_, n);
        pos_ += n;
        return out;
    }

    BytesView data_;
    size_t pos_ = 0;
};

}  // namespace peerserve
