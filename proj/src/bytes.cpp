#include "peerserve/bytes.hpp"

#include "peerserve/hash.hpp"

namespace peerserve {

static constexpr char kHexDigits[] = "0123456789abcdef";

std::string hex_encode(BytesView b) {
    std::string out;
    out.reserve(b.size() * 2);
    for (uint8_t c : b) {
        out.push_back(kHexDigits[c >> 4]);
        out.push_back(kHexDigits[c & 0xF]);
    }
    return out;
}

static int hex_val(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw std::runtime_error("hex_decode: invalid digit");
}

Bytes hex_decode(std::string_view hex) {
    if (hex.size() % 2 != 0) throw std::runtime_error("hex_decode: odd length");
    Bytes out(hex.size() / 2);
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = uint8_t(hex_val(hex[2 * i]) << 4 | hex_val(hex[2 * i + 1]));
    return out;
}

Digest digest_of(BytesView data) {
    Digest d;
    for (int lane = 0; lane < 4; ++lane) {
        Hash64 h(0xD16E57ull + lane);
        h.mix(data);
        const uint64_t v = h.value();
        for (int i = 0; i < 8; ++i) d.bytes[lane * 8 + i] = uint8_t(v >> (56 - 8 * i));
    }
    return d;
}

Digest digest_cat(std::initializer_list<BytesView> parts) {
    Bytes all;
    for (const auto& p : parts) {
        // length-prefix each part so concatenations cannot collide
        for (int s = 56; s >= 0; s -= 8) all.push_back(uint8_t(uint64_t(p.size()) >> s));
        all.insert(all.end(), p.begin(), p.end());
    }
    return digest_of(all);
}

}  // namespace peerserve
