#pragma once

#include <compare>
#include <cstdint>
#include <string>
#include <vector>

#include "peerserve/hash.hpp"

namespace peerserve {

/** 32-byte verification key; doubles as the node identifier. */
struct NodeId {
    std::array<uint8_t, 32> key{};

    auto operator<=>(const NodeId&) const = default;

    static NodeId from_index(uint64_t i) {
        NodeId id;
        Bytes seed = to_bytes("node/");
        for (int s = 56; s >= 0; s -= 8) seed.push_back(uint8_t(i >> s));
        id.key = digest_of(seed).bytes;
        return id;
    }

    BytesView view() const { return BytesView(key.data(), key.size()); }
    std::string short_hex() const { return hex_encode(view()).substr(0, 12); }
};

using Address = std::string;  // simulated transport endpoint

/** Committee signature over a digest; forged ones fail verification. */
struct NodeSig {
    NodeId signer;
    Digest over{};
    bool forged = false;

    bool verify(const Digest& expected) const { return !forged && over == expected; }

    static NodeSig sign(const NodeId& who, const Digest& d) { return NodeSig{who, d, false}; }
};

struct ModelEntry {
    NodeId node;
    Address address;
    std::string model_tag;
    double reputation = 0.5;
};

struct Directory {
    std::vector<NodeId> user_list;
    std::vector<ModelEntry> model_list;
    std::vector<NodeSig> signatures;

    Digest content_digest() const;
};

/** Accepted iff strictly more than 2/3 of the committee produced valid signatures. */
bool verify_directory(const Directory& dir, const std::vector<NodeId>& committee);

}  // namespace peerserve
