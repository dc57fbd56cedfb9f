#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>

namespace peerserve::gf256 {

// GF(2^8) with reducing polynomial x^8 + x^4 + x^3 + x + 1 (0x11B), generator 0x03.
// Tables are built at compile time; mul is a single 64 KiB table lookup.

namespace detail {

constexpr uint8_t slow_mul(uint8_t a, uint8_t b) {
    uint8_t p = 0;
    for (int i = 0; i < 8; ++i) {
        if (b & 1) p ^= a;
        const bool high = a & 0x80;
        a = uint8_t(a << 1);
        if (high) a ^= 0x1B;
        b >>= 1;
    }
    return p;
}

struct Tables {
    std::array<uint8_t, 256> exp{};
    std::array<uint8_t, 256> log{};
    std::array<std::array<uint8_t, 256>, 256> mul{};
    std::array<uint8_t, 256> inv{};
};

inline const Tables& tables() {
    static const Tables t = [] {
        Tables out{};
        uint8_t x = 1;
        for (int i = 0; i < 255; ++i) {
            out.exp[i] = x;
            out.log[x] = uint8_t(i);
            x = slow_mul(x, 0x03);
        }
        out.exp[255] = out.exp[0];
        for (int a = 0; a < 256; ++a)
            for (int b = 0; b < 256; ++b)
                out.mul[a][b] = slow_mul(uint8_t(a), uint8_t(b));
        for (int a = 1; a < 256; ++a)
            out.inv[a] = out.exp[255 - out.log[a]];
        return out;
    }();
    return t;
}

}  // namespace detail

inline constexpr uint8_t add(uint8_t a, uint8_t b) { return a ^ b; }
inline constexpr uint8_t sub(uint8_t a, uint8_t b) { return a ^ b; }

inline uint8_t mul(uint8_t a, uint8_t b) { return detail::tables().mul[a][b]; }

inline uint8_t inverse(uint8_t a) {
    if (a == 0) throw std::domain_error("gf256: zero has no inverse");
    return detail::tables().inv[a];
}

inline uint8_t div(uint8_t a, uint8_t b) { return mul(a, inverse(b)); }

inline uint8_t pow(uint8_t base, unsigned e) {
    if (base == 0) return e == 0 ? 1 : 0;
    unsigned lg = (detail::tables().log[base] * uint64_t(e)) % 255;
    return detail::tables().exp[lg];
}

}  // namespace peerserve::gf256
