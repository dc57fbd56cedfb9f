#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "peerserve/bytes.hpp"

namespace peerserve {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/** Seeded streaming mix over 64-bit words; the basis for all non-crypto hashing here. */
class Hash64 {
public:
    explicit Hash64(uint64_t seed = 0) : state_(splitmix64(seed ^ 0xA5A5A5A5DEADBEEFull)) {}

    Hash64& mix(uint64_t w) {
        state_ = splitmix64(state_ ^ w);
        return *this;
    }
    Hash64& mix(BytesView b) {
        uint64_t w = 0;
        int n = 0;
        for (uint8_t c : b) {
            w = w << 8 | c;
            if (++n == 8) {
                mix(w);
                w = 0;
                n = 0;
            }
        }
        mix(w ^ (uint64_t(b.size()) << 32));
        return *this;
    }
    Hash64& mix(std::string_view s) {
        return mix(BytesView(reinterpret_cast<const uint8_t*>(s.data()), s.size()));
    }

    uint64_t value() const { return state_; }

private:
    uint64_t state_;
};

/** 32-byte identifier/commitment digest (verifiable by recomputation, not cryptographic). */
struct Digest {
    std::array<uint8_t, 32> bytes{};

    auto operator<=>(const Digest&) const = default;
    std::string hex() const { return hex_encode(BytesView(bytes.data(), bytes.size())); }
};

Digest digest_of(BytesView data);
Digest digest_cat(std::initializer_list<BytesView> parts);

}  // namespace peerserve
