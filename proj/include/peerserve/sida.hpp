#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "peerserve/bytes.hpp"
#include "peerserve/hash.hpp"
#include "peerserve/rng.hpp"

namespace peerserve::sida {

inline constexpr size_t kKeyLen = 16;    // 128-bit key
inline constexpr size_t kNonceLen = 12;  // 96-bit nonce
inline constexpr size_t kTagLen = 16;

using Key = std::array<uint8_t, kKeyLen>;
using Nonce = std::array<uint8_t, kNonceLen>;
using SessionId = std::array<uint8_t, 32>;

struct IdaParams {
    uint8_t n = 4;
    uint8_t k = 3;

    bool operator==(const IdaParams&) const = default;
};

void validate(IdaParams p);

/** One Shamir share: shared evaluation point x plus one y byte per secret byte. */
struct KeyShare {
    uint8_t x = 0;
    Bytes y;

    bool operator==(const KeyShare&) const = default;
};

struct IdaFragment {
    uint8_t index = 0;  // row index in [1, n]
    Bytes payload;

    bool operator==(const IdaFragment&) const = default;
};

enum class MsgType : uint8_t {
    prompt_slice = 0,
    response_slice = 1,
    path_setup = 2,
};

struct Clove {
    MsgType msg_type = MsgType::prompt_slice;
    SessionId session_id{};
    uint8_t clove_index = 0;
    IdaParams params;
    Nonce nonce{};
    uint32_t orig_len = 0;  // ciphertext length before padding
    KeyShare key_share;
    IdaFragment fragment;

    bool operator==(const Clove&) const = default;
};

// --- authenticated symmetric layer (AES-128-GCM) ---

/** Ciphertext carries a 16-byte tag; tampering fails decryption. */
Bytes sym_encrypt(BytesView plaintext, const Key& key, const Nonce& nonce);
Bytes sym_decrypt(BytesView ciphertext, const Key& key, const Nonce& nonce);

// --- Shamir secret sharing, byte-wise over GF(256) ---

std::vector<KeyShare> sss_split(BytesView secret, IdaParams params, Rng& rng);
Bytes sss_recover(const std::vector<KeyShare>& shares, uint8_t k);

// --- Rabin information dispersal ---
// Dispersal matrix is the fixed n x k Vandermonde with rows (1, i, i^2, ...)
// for i = 1..n, so no matrix ever needs transmission and every k x k
// submatrix is invertible.

std::vector<IdaFragment> ida_split(BytesView data, IdaParams params);
Bytes ida_recover(const std::vector<IdaFragment>& fragments, uint8_t k, uint32_t orig_len);

// --- clove layer: encrypt, disperse, share the key ---

std::vector<Clove> make_cloves(BytesView message, IdaParams params, const SessionId& session_id,
                               Rng& rng, MsgType msg_type = MsgType::prompt_slice);
Bytes recover_message(const std::vector<Clove>& cloves);

// --- wire codec ---
// magic 0x50 0x53 | version 0x01 | msg_type | session_id(32) | clove_index |
// n | k | nonce(12) | orig_len u32 | share_x | share_len u16 | share bytes |
// frag_len u32 | fragment bytes. Big-endian.

inline constexpr uint8_t kMagic0 = 0x50;
inline constexpr uint8_t kMagic1 = 0x53;
inline constexpr uint8_t kWireVersion = 0x01;

Bytes encode_clove(const Clove& c);
Clove decode_clove(BytesView buf);

}  // namespace peerserve::sida
