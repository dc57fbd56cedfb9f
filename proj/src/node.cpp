#include "peerserve/node.hpp"

#include <set>

namespace peerserve {

Digest Directory::content_digest() const {
    ByteWriter w;
    for (const auto& u : user_list) w.raw(u.view());
    for (const auto& m : model_list) {
        w.raw(m.node.view());
        w.u16(uint16_t(m.address.size()));
        w.raw(to_bytes(m.address));
        w.u16(uint16_t(m.model_tag.size()));
        w.raw(to_bytes(m.model_tag));
        w.f64(m.reputation);
    }
    return digest_of(w.bytes());
}

bool verify_directory(const Directory& dir, const std::vector<NodeId>& committee) {
    if (committee.empty()) throw std::invalid_argument("verify_directory: empty committee");
    const Digest expected = dir.content_digest();
    const std::set<NodeId> members(committee.begin(), committee.end());

    std::set<NodeId> signers;
    for (const auto& sig : dir.signatures) {
        if (!members.count(sig.signer)) continue;  // unknown signer rejected
        if (!sig.verify(expected)) continue;
        signers.insert(sig.signer);  // duplicates collapse
    }
    // strictly more than 2/3 of the committee
    return signers.size() * 3 > committee.size() * 2;
}

}  // namespace peerserve
