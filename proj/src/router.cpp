#include "peerserve/router.hpp"

#include <algorithm>
#include <stdexcept>

namespace peerserve::routing {

namespace {

NodeId global_min_lb(const NodeTable& table) {
    const NodeId* best = nullptr;
    double best_lb = 0.0;
    for (const auto& [id, row] : table) {
        const double lb = lb_factor(row.stats);
        if (!best || lb < best_lb) {  // map order makes the tie-break lowest id
            best = &id;
            best_lb = lb;
        }
    }
    return *best;
}

}  // namespace

NodeId route(const hrtree::HashSeq& prompt_hashes, const hrtree::HRTree& tree,
             const NodeTable& table, size_t tau_c) {
    if (table.empty()) throw std::runtime_error("no serving nodes");

    const auto res = tree.search(prompt_hashes, tau_c);
    if (res.matched) {
        // cheapest holder that is actually in the live table
        const NodeTableRow* cand_row = nullptr;
        const NodeId* cand = nullptr;
        double cand_lb = 0.0;
        for (const auto& h : res.holders) {
            auto it = table.find(h.node);
            if (it == table.end()) continue;
            const double lb = lb_factor(it->second.stats);
            if (!cand || lb < cand_lb || (lb == cand_lb && h.node < *cand)) {
                cand = &it->first;
                cand_row = &it->second;
                cand_lb = lb;
            }
        }
        if (cand) {
            // per-node overload threshold: queue at capacity
            if (cand_row->stats.queued < cand_row->stats.capacity) return *cand;
            return global_min_lb(table);  // fallback to load balancing
        }
    }
    return global_min_lb(table);
}

Bytes encode_load_broadcast(const NodeId& sender, const LoadStats& stats, uint64_t version) {
    ByteWriter w;
    w.raw(sender.view());
    w.f64(stats.latency_ewma_ms);
    w.u32(stats.queued);
    w.u32(stats.capacity);
    w.u64(version);
    return w.take();
}

LoadBroadcast decode_load_broadcast(BytesView buf) {
    ByteReader r(buf);
    LoadBroadcast msg;
    auto id = r.raw(32);
    std::copy(id.begin(), id.end(), msg.sender.key.begin());
    msg.stats.latency_ewma_ms = r.f64();
    msg.stats.queued = r.u32();
    msg.stats.capacity = r.u32();
    msg.version = r.u64();
    if (!r.done()) throw std::runtime_error("load broadcast: trailing bytes");
    return msg;
}

void apply_load_broadcast(NodeTable& table, const LoadBroadcast& msg) {
    auto it = table.find(msg.sender);
    if (it == table.end()) return;  // unknown or untrusted sender
    if (msg.version < it->second.version) return;
    it->second.stats.latency_ewma_ms = msg.stats.latency_ewma_ms;
    it->second.stats.queued = msg.stats.queued;
    it->second.stats.capacity = msg.stats.capacity;
    it->second.version = msg.version;
}

// ---------------------------------------------------------------- model node

ModelNode::ModelNode(ModelNodeConfig cfg) : cfg_(std::move(cfg)) {
    stats_.capacity = cfg_.capacity;
}

bool ModelNode::admit(Request req, double now_ms) {
    (void)now_ms;
    if (queue_.size() >= cfg_.service.max_backlog) {
        ++rejected_;
        return false;
    }
    queue_.push_back(std::move(req));
    stats_.queued = uint32_t(queue_.size() + active_);  // outstanding work
    return true;
}

std::vector<StartedJob> ModelNode::start_ready(double now_ms) {
    std::vector<StartedJob> started;
    while (active_ < cfg_.capacity && !queue_.empty()) {
        Request req = std::move(queue_.front());
        queue_.pop_front();
        ++active_;

        const auto hashes = hrtree::preprocess(req.prompt, cfg_.plan);
        const size_t local_depth = view_.tree().local_prefix_depth(hashes, cfg_.id);
        uint64_t cached = cfg_.plan.prefix_token_count(local_depth);
        cached = std::min<uint64_t>(cached, req.prompt.size());
        const uint64_t uncached = req.prompt.size() - cached;
        cache_touch_prefixes(hashes, local_depth);

        StartedJob job;
        job.start_ms = now_ms;
        job.cached_tokens = cached;
        job.cache_hit = local_depth >= cfg_.tau_c;
        const double prefill = double(uncached) * cfg_.service.prefill_ms_per_token;
        const double decode = double(req.output_tokens) * cfg_.service.decode_ms_per_token;
        job.first_token_ms = now_ms + prefill;
        job.finish_ms = now_ms + prefill + decode;
        job.service_ms = prefill + decode;
        job.req = std::move(req);
        started.push_back(std::move(job));
    }
    stats_.queued = uint32_t(queue_.size() + active_);
    return started;
}

void ModelNode::complete(const StartedJob& job, double now_ms) {
    (void)now_ms;
    if (active_ == 0) throw std::logic_error("complete without active job");
    --active_;
    stats_.queued = uint32_t(queue_.size() + active_);

    const auto hashes = hrtree::preprocess(job.req.prompt, cfg_.plan);
    if (!hashes.empty()) {
        cache_insert(hashes, job.req.prompt);
        cache_evict_over_budget();
    }
    stats_.latency_ewma_ms = updated_ewma(stats_.latency_ewma_ms, job.service_ms);
}

void ModelNode::rebuild_plan(const hrtree::ChunkPlan& new_plan) {
    cfg_.plan = new_plan;
    std::vector<CacheEntry> entries(lru_.begin(), lru_.end());  // most recent first
    for (const auto& e : entries) view_.local_remove(e.path, cfg_.id);
    lru_.clear();
    cache_index_.clear();
    cached_tokens_ = 0;
    // reinsert oldest first so recency order survives the rebuild
    for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
        const auto hashes = hrtree::preprocess(it->tokens, cfg_.plan);
        if (hashes.empty()) continue;
        cache_insert(hashes, it->tokens);
    }
    cache_evict_over_budget();
}

void ModelNode::cache_touch_prefixes(const hrtree::HashSeq& hashes, size_t depth) {
    // refresh recency of every stored path whose tokens this request reuses
    hrtree::HashSeq prefix;
    prefix.reserve(depth);
    for (size_t d = 1; d <= depth; ++d) {
        prefix.push_back(hashes[d - 1]);
        auto it = cache_index_.find(prefix);
        if (it == cache_index_.end()) continue;
        lru_.splice(lru_.begin(), lru_, it->second);
    }
}

void ModelNode::cache_insert(const hrtree::HashSeq& hashes, const hrtree::TokenSeq& tokens) {
    auto it = cache_index_.find(hashes);
    if (it != cache_index_.end()) {
        lru_.splice(lru_.begin(), lru_, it->second);
        return;
    }
    // charge only chunks not already held; shared prefixes are stored once
    const size_t held = view_.tree().local_prefix_depth(hashes, cfg_.id);
    cached_tokens_ +=
        cfg_.plan.prefix_token_count(hashes.size()) - cfg_.plan.prefix_token_count(held);
    view_.local_insert(hashes, hrtree::HolderEntry{cfg_.id, cfg_.address,
                                                   lb_factor(stats_), 0.5});
    lru_.push_front(CacheEntry{hashes, tokens});
    cache_index_[hashes] = lru_.begin();
}

void ModelNode::cache_evict_over_budget() {
    if (cfg_.service.cache_capacity_tokens == 0) return;
    while (cached_tokens_ > cfg_.service.cache_capacity_tokens && lru_.size() > 1) {
        const CacheEntry victim = std::move(lru_.back());
        lru_.pop_back();
        cache_index_.erase(victim.path);
        view_.local_remove(victim.path, cfg_.id);
        // release the chunks no surviving entry still shares
        const size_t still = view_.tree().local_prefix_depth(victim.path, cfg_.id);
        cached_tokens_ -= cfg_.plan.prefix_token_count(victim.path.size()) -
                          cfg_.plan.prefix_token_count(still);
    }
}

Bytes ModelNode::make_load_broadcast(double now_ms) {
    stats_.last_broadcast_ms = now_ms;
    return encode_load_broadcast(cfg_.id, stats_, ++broadcast_version_);
}

}  // namespace peerserve::routing
