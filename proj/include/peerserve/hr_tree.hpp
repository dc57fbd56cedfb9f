#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <vector>

#include "peerserve/node.hpp"

namespace peerserve::hrtree {

using TokenId = uint32_t;
using TokenSeq = std::vector<TokenId>;
using HashSeq = std::vector<uint8_t>;  // 8-bit chunk hashes

/**
 * Chunk boundaries for prompt preprocessing: the structured lengths detected
 * by Sentry, then unbounded tail chunks of default_len tokens.
 */
struct ChunkPlan {
    std::vector<uint32_t> lengths;  // l_1 .. l_m
    uint32_t default_len = 32;
    uint32_t separator = 2;  // delta
    uint64_t hash_seed = 0x5EED5EED;
    int hash_bits = 8;

    uint32_t chunk_token_length(size_t chunk_index) const {
        return chunk_index < lengths.size() ? lengths[chunk_index] : default_len;
    }
    /** Tokens covered by the first `chunks` chunks. */
    uint64_t prefix_token_count(size_t chunks) const {
        uint64_t total = 0;
        for (size_t i = 0; i < chunks; ++i) total += chunk_token_length(i);
        return total;
    }
};

/** Seeded universal hash of one chunk's token ids, truncated to 8 bits. */
uint8_t chunk_hash(std::span<const TokenId> chunk, uint64_t seed);

/**
 * Build the chunk length array from detected common prompt lengths:
 * L = [s1, d, s2-s1-d, d, s3-s2-d, ...]; throws "separator too large"
 * when consecutive lengths are closer than the separator.
 */
ChunkPlan sentry_build_plan(const std::vector<uint32_t>& common_lengths, uint32_t separator,
                            uint32_t default_len, uint64_t hash_seed);

/** Full chunks only; a trailing partial chunk is dropped, not hashed. */
HashSeq preprocess(const TokenSeq& prompt, const ChunkPlan& plan);

/**
 * Observes the request stream and refreshes the detected common prefix
 * lengths S every refresh_interval prompts.
 */
class Sentry {
public:
    Sentry(size_t refresh_interval, double theta, uint32_t separator, uint32_t default_len,
           uint64_t hash_seed);

    /** Returns true when this observation triggered a refresh. */
    bool observe(const TokenSeq& prompt);
    /** Force a refresh from whatever is in the window now. */
    bool refresh_now();

    const std::vector<uint32_t>& common_lengths() const { return common_; }
    const ChunkPlan& plan() const { return plan_; }
    size_t window_size() const { return window_.size(); }

    /**
     * Exact detection: a length t is reported iff some prefix of length t is
     * shared by >= theta * window prompts and every one-token extension of it
     * has strictly lower support. Computed from the sorted-window LCP
     * histogram (maximal rectangles).
     */
    static std::vector<uint32_t> detect_common_lengths(const std::vector<TokenSeq>& window,
                                                       double theta);

private:
    size_t refresh_interval_;
    double theta_;
    std::vector<TokenSeq> window_;
    std::vector<uint32_t> common_;
    ChunkPlan plan_;
};

/** Row of the holder table referenced by tree nodes. */
struct HolderEntry {
    NodeId node;
    Address address;
    double lb_factor = 0.0;
    double reputation = 0.5;
};

struct SearchResult {
    bool matched = false;
    size_t depth = 0;                // nodes matched
    std::vector<HolderEntry> holders;  // deepest matched node's holders, sorted by id
};

struct DeltaOp {
    enum class Kind : uint8_t { add_path = 0, remove_holder = 1, evict_path = 2 };
    Kind kind = Kind::add_path;
    HashSeq path;
    NodeId holder;  // add_path / remove_holder only
};

struct TreeDelta {
    uint64_t base_version = 0;
    std::vector<DeltaOp> ops;
};

Bytes encode_delta(const TreeDelta& d);
TreeDelta decode_delta(BytesView buf);

/**
 * The aggregated Hash-Radix tree: an 8-bit hash trie whose nodes carry the
 * set of model nodes holding the KV cache for that prefix. Holder membership
 * is reference counted internally so removing one of a holder's paths keeps
 * it attached to prefixes its other paths still use.
 */
class HRTree {
public:
    void add_path(const HashSeq& hashes, const HolderEntry& holder);
    void remove_path(const HashSeq& hashes, const NodeId& holder);
    /** Remove a holder everywhere (node departure). */
    void evict_holder(const NodeId& node);
    /** Drop the subtree at the given prefix, detaching every path through it. */
    void evict_subtree(const HashSeq& prefix);

    SearchResult search(const HashSeq& hashes, size_t tau_c) const;
    /** Deepest prefix depth along which `self` holds every node. */
    size_t local_prefix_depth(const HashSeq& hashes, const NodeId& self) const;

    void update_holder(const NodeId& node, double lb_factor, double reputation);
    const HolderEntry* holder_row(const NodeId& node) const;
    /** Registered insertion paths of one holder (with multiplicities). */
    std::vector<HashSeq> holder_paths(const NodeId& node) const;

    size_t node_count() const { return node_count_; }
    size_t count_nodes_at_depth(size_t d) const;
    bool empty() const { return root_.children.empty(); }

private:
    struct Node {
        std::map<uint8_t, std::unique_ptr<Node>> children;
        std::map<NodeId, uint32_t> holders;  // refcounts
    };

    void apply_remove(const HashSeq& hashes, const NodeId& holder, bool drop_registry);

    Node root_;
    size_t node_count_ = 0;
    std::map<NodeId, HolderEntry> holder_table_;
    std::map<NodeId, std::map<HashSeq, uint32_t>> registry_;  // holder -> path -> count

    friend class SyncedTree;
};

/**
 * A model node's replicated view: the aggregated tree, the log of locally
 * originated ops for delta export, and the per-sender version vector.
 * Snapshot is the ordered full delta from version 0.
 */
class SyncedTree {
public:
    HRTree& tree() { return tree_; }
    const HRTree& tree() const { return tree_; }

    uint64_t version() const { return log_.size(); }

    void local_insert(const HashSeq& hashes, const HolderEntry& holder);
    void local_remove(const HashSeq& hashes, const NodeId& holder);
    void local_evict_holder(const NodeId& node);
    void local_evict_subtree(const HashSeq& prefix);

    /** Ops after since_version; throws when since_version is in the future. */
    TreeDelta export_delta(uint64_t since_version) const;
    TreeDelta snapshot() const { return export_delta(0); }

    /** Applies iff delta.base_version equals this sender's applied version. */
    void apply_remote(const NodeId& sender, const TreeDelta& delta);
    /** Full resync: drop the sender's entries and replay its snapshot. */
    void resync(const NodeId& sender, const TreeDelta& snapshot);

    uint64_t applied_version(const NodeId& sender) const;

private:
    void apply_op(const DeltaOp& op);

    HRTree tree_;
    std::vector<DeltaOp> log_;
    std::map<NodeId, uint64_t> applied_;
};

}  // namespace peerserve::hrtree
