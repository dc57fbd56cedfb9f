#include "peerserve/hr_tree.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "peerserve/hash.hpp"

namespace peerserve::hrtree {

uint8_t chunk_hash(std::span<const TokenId> chunk, uint64_t seed) {
    uint64_t h = splitmix64(seed ^ 0xC43579B9ull);
    for (TokenId t : chunk) h = splitmix64(h ^ (uint64_t(t) + 0x9E3779B97F4A7C15ull));
    return uint8_t(h & 0xFF);
}

ChunkPlan sentry_build_plan(const std::vector<uint32_t>& common_lengths, uint32_t separator,
                            uint32_t default_len, uint64_t hash_seed) {
    if (separator == 0) throw std::invalid_argument("sentry_build_plan: separator must be >= 1");
    if (default_len == 0) throw std::invalid_argument("sentry_build_plan: default_len must be >= 1");

    ChunkPlan plan;
    plan.separator = separator;
    plan.default_len = default_len;
    plan.hash_seed = hash_seed;

    if (common_lengths.empty()) return plan;  // default chunking only
    if (common_lengths[0] == 0) throw std::invalid_argument("sentry_build_plan: zero length");

    // Long structured segments are sliced at default_len so a reused common
    // prefix matches several tree levels; every cumulative boundary at a
    // detected length (and its separator) is preserved.
    auto emit = [&](uint32_t len) {
        while (len > default_len) {
            plan.lengths.push_back(default_len);
            len -= default_len;
        }
        if (len > 0) plan.lengths.push_back(len);
    };

    emit(common_lengths[0]);
    for (size_t i = 1; i < common_lengths.size(); ++i) {
        if (common_lengths[i] <= common_lengths[i - 1])
            throw std::invalid_argument("sentry_build_plan: lengths must be strictly increasing");
        const uint32_t gap = common_lengths[i] - common_lengths[i - 1];
        if (gap <= separator) throw std::invalid_argument("separator too large");
        plan.lengths.push_back(separator);
        emit(gap - separator);
    }
    return plan;
}

HashSeq preprocess(const TokenSeq& prompt, const ChunkPlan& plan) {
    HashSeq out;
    size_t pos = 0;
    size_t chunk_index = 0;
    while (true) {
        const uint32_t len = plan.chunk_token_length(chunk_index);
        if (pos + len > prompt.size()) break;  // trailing partial chunk dropped
        out.push_back(chunk_hash(std::span(prompt.data() + pos, len), plan.hash_seed));
        pos += len;
        ++chunk_index;
    }
    return out;
}

// ---------------------------------------------------------------- sentry

Sentry::Sentry(size_t refresh_interval, double theta, uint32_t separator, uint32_t default_len,
               uint64_t hash_seed)
    : refresh_interval_(refresh_interval), theta_(theta) {
    plan_ = sentry_build_plan({}, separator, default_len, hash_seed);
}

bool Sentry::observe(const TokenSeq& prompt) {
    window_.push_back(prompt);
    if (window_.size() < refresh_interval_) return false;
    return refresh_now();
}

bool Sentry::refresh_now() {
    if (window_.empty()) return false;
    auto detected = detect_common_lengths(window_, theta_);
    window_.clear();
    if (detected == common_) return false;
    common_ = std::move(detected);
    plan_ = sentry_build_plan(common_, plan_.separator, plan_.default_len, plan_.hash_seed);
    return true;
}

std::vector<uint32_t> Sentry::detect_common_lengths(const std::vector<TokenSeq>& window,
                                                    double theta) {
    if (window.empty()) return {};
    const size_t w = window.size();

    std::vector<const TokenSeq*> sorted;
    sorted.reserve(w);
    for (const auto& p : window) sorted.push_back(&p);
    std::sort(sorted.begin(), sorted.end(),
              [](const TokenSeq* a, const TokenSeq* b) { return *a < *b; });

    // adjacent longest-common-prefix histogram
    std::vector<uint32_t> lcp(w > 1 ? w - 1 : 0);
    for (size_t i = 0; i + 1 < w; ++i) {
        const TokenSeq& a = *sorted[i];
        const TokenSeq& b = *sorted[i + 1];
        size_t n = 0;
        const size_t lim = std::min(a.size(), b.size());
        while (n < lim && a[n] == b[n]) ++n;
        lcp[i] = uint32_t(n);
    }

    // all maximal rectangles (height = shared prefix length, width+1 = support)
    const size_t min_support = size_t(std::max(1.0, std::ceil(theta * double(w))));
    std::vector<uint32_t> found;
    std::vector<std::pair<size_t, uint32_t>> stack;  // (start index, height)
    auto emit = [&](uint32_t height, size_t width) {
        if (height >= 1 && width + 1 >= min_support) found.push_back(height);
    };
    for (size_t i = 0; i <= lcp.size(); ++i) {
        const uint32_t h = i < lcp.size() ? lcp[i] : 0;
        size_t start = i;
        while (!stack.empty() && stack.back().second > h) {
            emit(stack.back().second, i - stack.back().first);
            start = stack.back().first;
            stack.pop_back();
        }
        if (stack.empty() || stack.back().second < h) stack.emplace_back(start, h);
    }

    std::sort(found.begin(), found.end());
    found.erase(std::unique(found.begin(), found.end()), found.end());
    return found;
}

// ---------------------------------------------------------------- deltas

Bytes encode_delta(const TreeDelta& d) {
    ByteWriter w;
    w.u64(d.base_version);
    w.u32(uint32_t(d.ops.size()));
    for (const auto& op : d.ops) {
        if (op.path.size() > 0xFFFF) throw std::runtime_error("encode_delta: path too long");
        w.u8(uint8_t(op.kind));
        w.u16(uint16_t(op.path.size()));
        w.raw(op.path);
        if (op.kind != DeltaOp::Kind::evict_path) w.raw(op.holder.view());
    }
    return w.take();
}

TreeDelta decode_delta(BytesView buf) {
    ByteReader r(buf);
    TreeDelta d;
    d.base_version = r.u64();
    const uint32_t count = r.u32();
    d.ops.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        DeltaOp op;
        const uint8_t tag = r.u8();
        if (tag > 2) throw std::runtime_error("decode_delta: unknown op tag");
        op.kind = DeltaOp::Kind(tag);
        const uint16_t len = r.u16();
        auto path = r.raw(len);
        op.path.assign(path.begin(), path.end());
        if (op.kind != DeltaOp::Kind::evict_path) {
            auto id = r.raw(32);
            std::copy(id.begin(), id.end(), op.holder.key.begin());
        }
        d.ops.push_back(std::move(op));
    }
    if (!r.done()) throw std::runtime_error("decode_delta: trailing bytes");
    return d;
}

// ---------------------------------------------------------------- tree

void HRTree::add_path(const HashSeq& hashes, const HolderEntry& holder) {
    if (hashes.empty()) return;
    auto [row, inserted] = holder_table_.try_emplace(holder.node, holder);
    if (!inserted) {
        row->second.address = holder.address.empty() ? row->second.address : holder.address;
    }

    Node* cur = &root_;
    for (uint8_t h : hashes) {
        auto it = cur->children.find(h);
        if (it == cur->children.end()) {
            it = cur->children.emplace(h, std::make_unique<Node>()).first;
            ++node_count_;
        }
        cur = it->second.get();
        cur->holders[holder.node] += 1;  // holder attached along the whole path
    }
    registry_[holder.node][hashes] += 1;
}

void HRTree::apply_remove(const HashSeq& hashes, const NodeId& holder, bool drop_registry) {
    if (hashes.empty()) return;
    if (drop_registry) {
        auto reg = registry_.find(holder);
        if (reg == registry_.end()) return;
        auto path_it = reg->second.find(hashes);
        if (path_it == reg->second.end()) return;  // unknown path: no-op
        if (--path_it->second == 0) reg->second.erase(path_it);
        if (reg->second.empty()) registry_.erase(reg);
    }

    std::vector<std::pair<Node*, uint8_t>> trail;  // (parent, edge)
    Node* cur = &root_;
    for (uint8_t h : hashes) {
        auto it = cur->children.find(h);
        if (it == cur->children.end()) return;
        trail.emplace_back(cur, h);
        cur = it->second.get();
    }
    for (auto& [parent, edge] : trail) {
        Node* n = parent->children.at(edge).get();
        auto hit = n->holders.find(holder);
        if (hit != n->holders.end() && --hit->second == 0) n->holders.erase(hit);
    }
    // prune holderless leaves bottom-up
    for (size_t i = trail.size(); i-- > 0;) {
        auto& [parent, edge] = trail[i];
        Node* n = parent->children.at(edge).get();
        if (n->children.empty() && n->holders.empty()) {
            parent->children.erase(edge);
            --node_count_;
        } else {
            break;
        }
    }
}

void HRTree::remove_path(const HashSeq& hashes, const NodeId& holder) {
    apply_remove(hashes, holder, true);
}

void HRTree::evict_holder(const NodeId& node) {
    auto reg = registry_.find(node);
    if (reg == registry_.end()) return;  // unknown node: no-op
    std::vector<std::pair<HashSeq, uint32_t>> paths(reg->second.begin(), reg->second.end());
    for (const auto& [path, count] : paths)
        for (uint32_t i = 0; i < count; ++i) apply_remove(path, node, false);
    registry_.erase(node);
    holder_table_.erase(node);
}

void HRTree::evict_subtree(const HashSeq& prefix) {
    if (prefix.empty()) return;
    // detach every registered path running through the prefix
    std::vector<std::pair<HashSeq, NodeId>> doomed;
    for (const auto& [holder, paths] : registry_) {
        for (const auto& [path, count] : paths) {
            if (path.size() < prefix.size()) continue;
            if (!std::equal(prefix.begin(), prefix.end(), path.begin())) continue;
            for (uint32_t i = 0; i < count; ++i) doomed.emplace_back(path, holder);
        }
    }
    for (const auto& [path, holder] : doomed) remove_path(path, holder);
}

SearchResult HRTree::search(const HashSeq& hashes, size_t tau_c) const {
    if (tau_c < 1) throw std::invalid_argument("search: tau_c must be >= 1");
    SearchResult res;
    const Node* cur = &root_;
    for (uint8_t h : hashes) {
        auto it = cur->children.find(h);
        if (it == cur->children.end()) break;
        cur = it->second.get();
        ++res.depth;
    }
    // the depth threshold guards both exits: shallow matches report no-match
    if (res.depth < tau_c || cur == &root_) return res;
    res.matched = true;
    res.holders.reserve(cur->holders.size());
    for (const auto& [id, refs] : cur->holders) {
        auto row = holder_table_.find(id);
        if (row != holder_table_.end()) {
            res.holders.push_back(row->second);
        } else {
            res.holders.push_back(HolderEntry{id, {}, 0.0, 0.5});
        }
    }
    return res;
}

size_t HRTree::local_prefix_depth(const HashSeq& hashes, const NodeId& self) const {
    size_t depth = 0;
    const Node* cur = &root_;
    for (uint8_t h : hashes) {
        auto it = cur->children.find(h);
        if (it == cur->children.end()) break;
        if (!it->second->holders.count(self)) break;
        cur = it->second.get();
        ++depth;
    }
    return depth;
}

void HRTree::update_holder(const NodeId& node, double lb_factor, double reputation) {
    auto it = holder_table_.find(node);
    if (it == holder_table_.end()) return;
    it->second.lb_factor = lb_factor;
    it->second.reputation = reputation;
}

const HolderEntry* HRTree::holder_row(const NodeId& node) const {
    auto it = holder_table_.find(node);
    return it == holder_table_.end() ? nullptr : &it->second;
}

std::vector<HashSeq> HRTree::holder_paths(const NodeId& node) const {
    std::vector<HashSeq> out;
    auto reg = registry_.find(node);
    if (reg == registry_.end()) return out;
    for (const auto& [path, count] : reg->second)
        for (uint32_t i = 0; i < count; ++i) out.push_back(path);
    return out;
}

size_t HRTree::count_nodes_at_depth(size_t d) const {
    if (d == 0) return 1;
    // plain recursion; trees here are shallow
    struct Walker {
        size_t target;
        size_t count = 0;
        void walk(const Node& n, size_t depth) {
            if (depth == target) {
                ++count;
                return;
            }
            for (const auto& [h, child] : n.children) walk(*child, depth + 1);
        }
    } w{d};
    for (const auto& [h, child] : root_.children) w.walk(*child, 1);
    return w.count;
}

// ---------------------------------------------------------------- synced view

void SyncedTree::apply_op(const DeltaOp& op) {
    switch (op.kind) {
        case DeltaOp::Kind::add_path: {
            const HolderEntry* row = tree_.holder_row(op.holder);
            tree_.add_path(op.path, row ? *row : HolderEntry{op.holder, {}, 0.0, 0.5});
            break;
        }
        case DeltaOp::Kind::remove_holder:
            tree_.remove_path(op.path, op.holder);
            break;
        case DeltaOp::Kind::evict_path:
            tree_.evict_subtree(op.path);
            break;
    }
}

void SyncedTree::local_insert(const HashSeq& hashes, const HolderEntry& holder) {
    if (hashes.empty()) return;
    tree_.add_path(hashes, holder);
    log_.push_back(DeltaOp{DeltaOp::Kind::add_path, hashes, holder.node});
}

void SyncedTree::local_remove(const HashSeq& hashes, const NodeId& holder) {
    if (hashes.empty()) return;
    tree_.remove_path(hashes, holder);
    log_.push_back(DeltaOp{DeltaOp::Kind::remove_holder, hashes, holder});
}

void SyncedTree::local_evict_holder(const NodeId& node) {
    for (const auto& path : tree_.holder_paths(node))
        log_.push_back(DeltaOp{DeltaOp::Kind::remove_holder, path, node});
    tree_.evict_holder(node);
}

void SyncedTree::local_evict_subtree(const HashSeq& prefix) {
    tree_.evict_subtree(prefix);
    log_.push_back(DeltaOp{DeltaOp::Kind::evict_path, prefix, NodeId{}});
}

TreeDelta SyncedTree::export_delta(uint64_t since_version) const {
    if (since_version > version()) throw std::runtime_error("export_delta: version in the future");
    TreeDelta d;
    d.base_version = since_version;
    d.ops.assign(log_.begin() + since_version, log_.end());
    return d;
}

void SyncedTree::apply_remote(const NodeId& sender, const TreeDelta& delta) {
    auto& seen = applied_[sender];
    if (delta.base_version != seen) throw std::runtime_error("resync required");
    for (const auto& op : delta.ops) apply_op(op);
    seen += delta.ops.size();
}

void SyncedTree::resync(const NodeId& sender, const TreeDelta& snapshot) {
    if (snapshot.base_version != 0) throw std::runtime_error("resync: snapshot must start at 0");
    tree_.evict_holder(sender);
    for (const auto& op : snapshot.ops) apply_op(op);
    applied_[sender] = snapshot.ops.size();
}

uint64_t SyncedTree::applied_version(const NodeId& sender) const {
    auto it = applied_.find(sender);
    return it == applied_.end() ? 0 : it->second;
}

}  // namespace peerserve::hrtree
