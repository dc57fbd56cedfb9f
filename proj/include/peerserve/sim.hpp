#pragma once

#include <functional>
#include <map>
#include <queue>
#include <string>
#include <vector>

#include "peerserve/overlay.hpp"
#include "peerserve/router.hpp"
#include "peerserve/verification.hpp"
#include "peerserve/workload.hpp"

namespace peerserve::sim {

/** Deterministic discrete-event loop: (time, insertion order) min-heap. */
class Sim {
public:
    double now() const { return now_; }

    void at(double t, std::function<void()> fn) {
        if (t < now_) throw std::logic_error("sim: scheduling into the past");
        queue_.push(Event{t, seq_++, std::move(fn)});
    }
    void after(double dt, std::function<void()> fn) { at(now_ + dt, std::move(fn)); }

    void run(double horizon_ms = -1.0) {
        while (!queue_.empty()) {
            Event ev = queue_.top();
            queue_.pop();
            if (horizon_ms >= 0.0 && ev.t > horizon_ms) break;
            if (ev.t < now_)
                throw std::logic_error("sim: time went backwards at event #" +
                                       std::to_string(processed_));
            now_ = ev.t;
            ++processed_;
            ev.fn();
        }
    }

    size_t processed() const { return processed_; }
    bool empty() const { return queue_.empty(); }

private:
    struct Event {
        double t;
        uint64_t seq;
        std::function<void()> fn;
        bool operator>(const Event& o) const { return std::tie(t, seq) > std::tie(o.t, o.seq); }
    };
    std::priority_queue<Event, std::vector<Event>, std::greater<>> queue_;
    double now_ = 0.0;
    uint64_t seq_ = 0;
    size_t processed_ = 0;
};

// ---------------------------------------------------------------- scenario

struct ScenarioConfig {
    uint64_t seed = 1;
    size_t users = 200;
    size_t model_nodes = 8;
    std::string model_tag = "llm";
    size_t committee = 4;

    double churn_per_min = 0.0;
    double failure_fraction = 0.0;  // transient per-relay loss per message
    sida::IdaParams ida{4, 3};
    size_t path_len = 3;   // l
    size_t proxies = 4;    // N >= n

    std::string routing = "overlay";  // "overlay" (HR-tree + LB) or "uniform"
    size_t tau_c = 3;
    double sync_period_s = 5.0;
    size_t sentry_refresh = 10'000;
    double theta = 0.10;
    uint32_t default_chunk_len = 32;
    uint32_t separator = 2;
    size_t sentry_warmup = 2000;
    double load_broadcast_period_s = 1.0;

    WorkloadSpec workload;
    routing::ServiceModel service;
    uint32_t capacity = 4;                // concurrent requests per node
    std::vector<uint32_t> node_capacity;  // per-node override, empty = uniform

    verify::ReputationParams reputation;
    double epoch_length_s = 0.0;  // 0 disables verification epochs
    size_t challenges_per_node = 50;
    uint32_t challenge_response_len = 32;
    std::vector<double> model_noise;  // per-node oracle degradation

    double link_median_ms = 40.0;
    double link_sigma = 0.5;
    bool record_events = true;
};

/** Strict parser: unknown keys are rejected. */
ScenarioConfig scenario_from_json(const std::string& text);
/** All keys with their defaults, as accepted by scenario_from_json. */
std::string scenario_defaults_json();

struct RequestRow {
    uint64_t id = 0;
    double arrival_ms = 0.0;
    double ttft_ms = 0.0;
    double completion_ms = 0.0;
    std::string served_by;
    bool cache_hit = false;
    bool forwarded = false;
};

struct MetricsReport {
    size_t generated = 0;
    size_t completed = 0;
    size_t rejected = 0;
    size_t undelivered = 0;
    size_t in_flight = 0;

    double avg_latency_ms = 0.0;
    double p99_latency_ms = 0.0;  // nearest-rank over the full sample
    double avg_ttft_ms = 0.0;
    double cache_hit_rate = 0.0;
    double delivery_rate = 0.0;
    double anonymity_entropy = 1.0;
    uint64_t delta_sync_bytes = 0;
    uint64_t load_broadcast_bytes = 0;

    std::map<std::string, double> per_node_share;  // address -> fraction of completions
    std::vector<RequestRow> rows;
    std::vector<verify::ReputationLogEntry> reputation_log;
    std::vector<std::string> events;
};

MetricsReport run_scenario(const ScenarioConfig& config);

/** metrics.csv, summary.json, events.log, reputation.csv under dir. */
void export_metrics(const MetricsReport& report, const std::string& dir);

std::string render_metrics_csv(const MetricsReport& report);
std::string render_summary_json(const MetricsReport& report);

// ---------------------------------------------------------------- experiments

struct ChurnPoint {
    double churn_per_min = 0.0;
    double path_age_s = 0.0;
    double empirical_f = 0.0;      // dead-relay fraction at message time
    double delivery_multipath = 0.0;
    double delivery_single = 0.0;
    double analytic_multipath = 0.0;
    size_t messages = 0;
};

/**
 * Churn survival: users establish fresh paths, wait a fixed age, then send.
 * Compares (n,k) multipath against single-path delivery at the same age.
 */
ChurnPoint churn_survival_point(size_t overlay_nodes, double churn_per_min, double path_age_s,
                                size_t messages, sida::IdaParams params, size_t path_len,
                                uint64_t seed);

}  // namespace peerserve::sim
