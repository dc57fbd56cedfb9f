#pragma once

#include <deque>
#include <list>
#include <map>
#include <optional>
#include <string>

#include "peerserve/hr_tree.hpp"
#include "peerserve/node.hpp"
#include "peerserve/sida.hpp"

namespace peerserve::routing {

struct LoadStats {
    double latency_ewma_ms = 0.0;  // L
    uint32_t queued = 0;           // Q
    uint32_t capacity = 1;         // C
    double last_broadcast_ms = 0.0;
};

/** RTT-style moving average with alpha = 1/8. */
inline double updated_ewma(double current, double sample_ms) {
    return current * (7.0 / 8.0) + sample_ms * (1.0 / 8.0);
}

/** Load-balance factor L * (Q / C). */
inline double lb_factor(const LoadStats& s) {
    return s.latency_ewma_ms * (double(s.queued) / double(s.capacity));
}

struct Request {
    uint64_t request_id = 0;
    std::string model_tag;
    hrtree::TokenSeq prompt;
    uint64_t session_id = 0;
    std::vector<Address> origin_proxies;
    uint32_t output_tokens = 0;
    int hop_count = 0;  // forwards so far; never exceeds max_forwards
};

inline constexpr int kMaxForwards = 1;

/** Desk-scale stand-in for GPU inference timing. */
struct ServiceModel {
    double prefill_ms_per_token = 0.2;
    double decode_ms_per_token = 1.0;
    uint64_t cache_capacity_tokens = 0;  // 0 = unlimited
    uint32_t max_backlog = 1024;
};

struct NodeTableRow {
    Address address;
    LoadStats stats;
    double reputation = 0.5;
    uint64_t version = 0;
};

/** Live, trusted peers serving the request's model; keyed by NodeId. */
using NodeTable = std::map<NodeId, NodeTableRow>;

/**
 * The overlay forwarding decision. Miss: global minimum F_LB. Hit: the
 * cheapest cache holder unless it is at/over its overload threshold
 * (Q >= C), then fall back to the global minimum. Ties break on lowest id.
 */
NodeId route(const hrtree::HashSeq& prompt_hashes, const hrtree::HRTree& tree,
             const NodeTable& table, size_t tau_c);

// --- load broadcast wire format: sender(32) | L f64 | Q u32 | C u32 | version u64 ---

Bytes encode_load_broadcast(const NodeId& sender, const LoadStats& stats, uint64_t version);

struct LoadBroadcast {
    NodeId sender;
    LoadStats stats;
    uint64_t version = 0;
};
LoadBroadcast decode_load_broadcast(BytesView buf);

/** Update the receiver's row for the sender; stale versions are ignored. */
void apply_load_broadcast(NodeTable& table, const LoadBroadcast& msg);

// --- the simulated serving engine ---

struct StartedJob {
    Request req;
    double start_ms = 0.0;
    double first_token_ms = 0.0;  // start + prefill of uncached tokens
    double finish_ms = 0.0;
    double service_ms = 0.0;
    uint64_t cached_tokens = 0;
    bool cache_hit = false;  // local prefix at least tau_c chunks
};

struct ModelNodeConfig {
    NodeId id;
    Address address;
    std::string model_tag = "llm";
    uint32_t capacity = 4;
    ServiceModel service;
    hrtree::ChunkPlan plan;
    size_t tau_c = 3;
};

/**
 * One serving node: queue, prefix cache with LRU token budget, the synced
 * HR-tree view, and load stats. The simulator owns the clock and schedules
 * the completion times this class computes.
 */
class ModelNode {
public:
    explicit ModelNode(ModelNodeConfig cfg);

    const NodeId& id() const { return cfg_.id; }
    const Address& address() const { return cfg_.address; }
    const std::string& model_tag() const { return cfg_.model_tag; }
    const LoadStats& stats() const { return stats_; }
    const ModelNodeConfig& config() const { return cfg_; }
    hrtree::SyncedTree& view() { return view_; }
    const hrtree::SyncedTree& view() const { return view_; }
    NodeTable& table() { return table_; }
    const NodeTable& table() const { return table_; }

    /** Re-chunk every cached prompt under a refreshed Sentry plan. */
    void rebuild_plan(const hrtree::ChunkPlan& new_plan);

    /** False when the backlog is full; the request is rejected. */
    bool admit(Request req, double now_ms);
    /** Start queued work while capacity allows. */
    std::vector<StartedJob> start_ready(double now_ms);
    /** Completion: cache insert (with LRU eviction), latency sample. */
    void complete(const StartedJob& job, double now_ms);

    uint64_t rejected() const { return rejected_; }
    uint32_t active() const { return active_; }
    size_t queue_length() const { return queue_.size(); }
    uint64_t cached_tokens_total() const { return cached_tokens_; }

    Bytes make_load_broadcast(double now_ms);

private:
    void cache_touch_prefixes(const hrtree::HashSeq& hashes, size_t depth);
    void cache_insert(const hrtree::HashSeq& hashes, const hrtree::TokenSeq& tokens);
    void cache_evict_over_budget();

    ModelNodeConfig cfg_;
    LoadStats stats_;
    std::deque<Request> queue_;
    uint32_t active_ = 0;
    uint64_t rejected_ = 0;
    uint64_t broadcast_version_ = 0;

    hrtree::SyncedTree view_;
    NodeTable table_;

    struct CacheEntry {
        hrtree::HashSeq path;
        hrtree::TokenSeq tokens;  // kept for plan rebuilds
    };
    std::list<CacheEntry> lru_;  // front = most recent
    std::map<hrtree::HashSeq, std::list<CacheEntry>::iterator> cache_index_;
    // distinct cached chunk mass in tokens; shared prefixes counted once
    uint64_t cached_tokens_ = 0;
};

}  // namespace peerserve::routing
