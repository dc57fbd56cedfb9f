#include "peerserve/sim.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

namespace peerserve::sim {

using json = nlohmann::ordered_json;
using hrtree::ChunkPlan;
using hrtree::HashSeq;
using overlay::OverlayNet;
using overlay::PromptEnvelope;
using overlay::ProxyRef;
using routing::ModelNode;

// ---------------------------------------------------------------- scenario json

namespace {

void expect_keys(const json& obj, const char* where, std::initializer_list<const char*> known) {
    for (const auto& [key, value] : obj.items()) {
        bool ok = false;
        for (const char* k : known) ok |= key == k;
        if (!ok)
            throw std::runtime_error(std::string("scenario: unknown key '") + key + "' in " +
                                     where);
    }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) out = obj.at(key).get<T>();
}

WorkloadComponent component_from_json(const json& j) {
    expect_keys(j, "workload component",
                {"name", "prefix_pool", "zipf_exponent", "prompt_tokens", "prefix_share",
                 "output_tokens", "session_turns", "think_time_ms"});
    WorkloadComponent c;
    read(j, "name", c.name);
    read(j, "prefix_pool", c.prefix_pool);
    read(j, "zipf_exponent", c.zipf_exponent);
    read(j, "prompt_tokens", c.prompt_tokens);
    read(j, "prefix_share", c.prefix_share);
    read(j, "output_tokens", c.output_tokens);
    read(j, "session_turns", c.session_turns);
    read(j, "think_time_ms", c.think_time_ms);
    return c;
}

json component_to_json(const WorkloadComponent& c) {
    json j;
    j["name"] = c.name;
    j["prefix_pool"] = c.prefix_pool;
    j["zipf_exponent"] = c.zipf_exponent;
    j["prompt_tokens"] = c.prompt_tokens;
    j["prefix_share"] = c.prefix_share;
    j["output_tokens"] = c.output_tokens;
    j["session_turns"] = c.session_turns;
    j["think_time_ms"] = c.think_time_ms;
    return j;
}

}  // namespace

ScenarioConfig scenario_from_json(const std::string& text) {
    const json j = json::parse(text);
    expect_keys(j, "scenario",
                {"seed", "users", "model_nodes", "model_tag", "committee", "churn_per_min",
                 "failure_fraction", "ida", "path_len", "proxies", "routing", "tau_c",
                 "sync_period_s", "sentry_refresh", "theta", "default_chunk_len", "separator",
                 "sentry_warmup", "load_broadcast_period_s", "workload", "service", "capacity",
                 "node_capacity", "reputation", "epoch_length_s", "challenges_per_node",
                 "challenge_response_len", "model_noise", "link_median_ms", "link_sigma",
                 "record_events"});

    ScenarioConfig cfg;
    read(j, "seed", cfg.seed);
    read(j, "users", cfg.users);
    read(j, "model_nodes", cfg.model_nodes);
    read(j, "model_tag", cfg.model_tag);
    read(j, "committee", cfg.committee);
    read(j, "churn_per_min", cfg.churn_per_min);
    read(j, "failure_fraction", cfg.failure_fraction);
    if (j.contains("ida")) {
        expect_keys(j.at("ida"), "ida", {"n", "k"});
        unsigned n = cfg.ida.n, k = cfg.ida.k;
        read(j.at("ida"), "n", n);
        read(j.at("ida"), "k", k);
        cfg.ida = {uint8_t(n), uint8_t(k)};
    }
    read(j, "path_len", cfg.path_len);
    read(j, "proxies", cfg.proxies);
    read(j, "routing", cfg.routing);
    if (cfg.routing != "overlay" && cfg.routing != "uniform")
        throw std::runtime_error("scenario: routing must be 'overlay' or 'uniform'");
    read(j, "tau_c", cfg.tau_c);
    read(j, "sync_period_s", cfg.sync_period_s);
    read(j, "sentry_refresh", cfg.sentry_refresh);
    read(j, "theta", cfg.theta);
    read(j, "default_chunk_len", cfg.default_chunk_len);
    read(j, "separator", cfg.separator);
    read(j, "sentry_warmup", cfg.sentry_warmup);
    read(j, "load_broadcast_period_s", cfg.load_broadcast_period_s);

    if (j.contains("workload")) {
        const json& w = j.at("workload");
        expect_keys(w, "workload",
                    {"kind", "components", "weights", "mean_interarrival_ms", "count"});
        std::string kind = "custom";
        read(w, "kind", kind);
        if (kind != "custom" && kind != "mixed")
            throw std::runtime_error("scenario: workload.kind must be 'custom' or 'mixed'");
        read(w, "mean_interarrival_ms", cfg.workload.mean_interarrival_ms);
        read(w, "count", cfg.workload.count);
        if (kind == "mixed") {
            auto m = mixed_workload(cfg.workload.count, cfg.workload.mean_interarrival_ms);
            cfg.workload.components = m.components;
            cfg.workload.weights = m.weights;
        }
        if (w.contains("components")) {
            cfg.workload.components.clear();
            for (const auto& cj : w.at("components"))
                cfg.workload.components.push_back(component_from_json(cj));
        }
        if (w.contains("weights")) cfg.workload.weights = w.at("weights").get<std::vector<double>>();
    }
    if (cfg.workload.components.empty()) {
        cfg.workload.components.push_back(WorkloadComponent{});
        cfg.workload.weights = {1.0};
    }
    if (cfg.workload.weights.empty()) cfg.workload.weights.assign(cfg.workload.components.size(), 1.0);

    if (j.contains("service")) {
        const json& s = j.at("service");
        expect_keys(s, "service",
                    {"prefill_ms_per_token", "decode_ms_per_token", "cache_capacity_tokens",
                     "max_backlog"});
        read(s, "prefill_ms_per_token", cfg.service.prefill_ms_per_token);
        read(s, "decode_ms_per_token", cfg.service.decode_ms_per_token);
        read(s, "cache_capacity_tokens", cfg.service.cache_capacity_tokens);
        read(s, "max_backlog", cfg.service.max_backlog);
    }
    read(j, "capacity", cfg.capacity);
    read(j, "node_capacity", cfg.node_capacity);

    if (j.contains("reputation")) {
        const json& r = j.at("reputation");
        expect_keys(r, "reputation", {"alpha", "beta", "window", "tau", "gamma", "trust_floor"});
        read(r, "alpha", cfg.reputation.alpha);
        read(r, "beta", cfg.reputation.beta);
        read(r, "window", cfg.reputation.window);
        read(r, "tau", cfg.reputation.tau);
        read(r, "gamma", cfg.reputation.gamma);
        read(r, "trust_floor", cfg.reputation.trust_floor);
    }
    read(j, "epoch_length_s", cfg.epoch_length_s);
    read(j, "challenges_per_node", cfg.challenges_per_node);
    read(j, "challenge_response_len", cfg.challenge_response_len);
    read(j, "model_noise", cfg.model_noise);
    read(j, "link_median_ms", cfg.link_median_ms);
    read(j, "link_sigma", cfg.link_sigma);
    read(j, "record_events", cfg.record_events);
    return cfg;
}

std::string scenario_defaults_json() {
    ScenarioConfig cfg;
    cfg.workload.components.push_back(WorkloadComponent{});
    cfg.workload.weights = {1.0};

    json j;
    j["seed"] = cfg.seed;
    j["users"] = cfg.users;
    j["model_nodes"] = cfg.model_nodes;
    j["model_tag"] = cfg.model_tag;
    j["committee"] = cfg.committee;
    j["churn_per_min"] = cfg.churn_per_min;
    j["failure_fraction"] = cfg.failure_fraction;
    j["ida"] = {{"n", cfg.ida.n}, {"k", cfg.ida.k}};
    j["path_len"] = cfg.path_len;
    j["proxies"] = cfg.proxies;
    j["routing"] = cfg.routing;
    j["tau_c"] = cfg.tau_c;
    j["sync_period_s"] = cfg.sync_period_s;
    j["sentry_refresh"] = cfg.sentry_refresh;
    j["theta"] = cfg.theta;
    j["default_chunk_len"] = cfg.default_chunk_len;
    j["separator"] = cfg.separator;
    j["sentry_warmup"] = cfg.sentry_warmup;
    j["load_broadcast_period_s"] = cfg.load_broadcast_period_s;
    j["workload"] = {{"kind", "custom"},
                     {"components", json::array({component_to_json(cfg.workload.components[0])})},
                     {"weights", cfg.workload.weights},
                     {"mean_interarrival_ms", cfg.workload.mean_interarrival_ms},
                     {"count", cfg.workload.count}};
    j["service"] = {{"prefill_ms_per_token", cfg.service.prefill_ms_per_token},
                    {"decode_ms_per_token", cfg.service.decode_ms_per_token},
                    {"cache_capacity_tokens", cfg.service.cache_capacity_tokens},
                    {"max_backlog", cfg.service.max_backlog}};
    j["capacity"] = cfg.capacity;
    j["node_capacity"] = cfg.node_capacity;
    j["reputation"] = {{"alpha", cfg.reputation.alpha},   {"beta", cfg.reputation.beta},
                       {"window", cfg.reputation.window}, {"tau", cfg.reputation.tau},
                       {"gamma", cfg.reputation.gamma},   {"trust_floor", cfg.reputation.trust_floor}};
    j["epoch_length_s"] = cfg.epoch_length_s;
    j["challenges_per_node"] = cfg.challenges_per_node;
    j["challenge_response_len"] = cfg.challenge_response_len;
    j["model_noise"] = cfg.model_noise;
    j["link_median_ms"] = cfg.link_median_ms;
    j["link_sigma"] = cfg.link_sigma;
    j["record_events"] = cfg.record_events;
    return j.dump(2);
}

// ---------------------------------------------------------------- scenario run

namespace {

Bytes tokens_to_bytes(const hrtree::TokenSeq& tokens) {
    ByteWriter w;
    w.u32(uint32_t(tokens.size()));
    for (auto t : tokens) w.u32(t);
    return w.take();
}

hrtree::TokenSeq tokens_from_reader(ByteReader& r) {
    const uint32_t n = r.u32();
    hrtree::TokenSeq out(n);
    for (auto& t : out) t = r.u32();
    return out;
}

struct RequestBody {
    uint64_t request_id = 0;
    uint64_t session_id = 0;
    uint32_t output_tokens = 0;
    hrtree::TokenSeq prompt;

    Bytes encode() const {
        ByteWriter w;
        w.u64(request_id);
        w.u64(session_id);
        w.u32(output_tokens);
        w.raw(tokens_to_bytes(prompt));
        return w.take();
    }
    static RequestBody decode(BytesView b) {
        ByteReader r(b);
        RequestBody body;
        body.request_id = r.u64();
        body.session_id = r.u64();
        body.output_tokens = r.u32();
        body.prompt = tokens_from_reader(r);
        return body;
    }
};

struct ResponseBody {
    Address server;
    hrtree::TokenSeq tokens;

    Bytes encode() const {
        ByteWriter w;
        w.u16(uint16_t(server.size()));
        w.raw(to_bytes(server));
        w.raw(tokens_to_bytes(tokens));
        return w.take();
    }
    static ResponseBody decode(BytesView b) {
        ByteReader r(b);
        ResponseBody body;
        const uint16_t len = r.u16();
        auto s = r.raw(len);
        body.server.assign(s.begin(), s.end());
        body.tokens = tokens_from_reader(r);
        return body;
    }
};

class ScenarioRun {
public:
    explicit ScenarioRun(ScenarioConfig cfg)
        : cfg_(std::move(cfg)),
          rng_(cfg_.seed),
          overlay_(cfg_.users),
          workload_(cfg_.workload, cfg_.seed ^ 0xA11CE),
          sentry_(cfg_.sentry_refresh, cfg_.theta, cfg_.separator, cfg_.default_chunk_len,
                  cfg_.seed ^ 0x5E17),
          reference_oracle_(cfg_.seed ^ 0x0DE1, 0.0, 256) {}

    MetricsReport run();

private:
    struct ReqCtx {
        GenRequest gen;
        size_t user = 0;
        uint32_t turn = 1;
        std::vector<ProxyRef> reply_routes;
        bool forwarded = false;
        bool is_challenge = false;
        double ttft_ms = -1.0;
        Address served_by;
        bool cache_hit = false;
    };

    struct ChallengeDone {
        NodeId server;
        hrtree::TokenSeq prompt;
        hrtree::TokenSeq response;
    };

    void log_event(const std::string& line) {
        if (cfg_.record_events) report_.events.push_back(line);
    }
    std::string fmt_t() const {
        char buf[32];
        std::snprintf(buf, sizeof buf, "t=%.3f", sim_.now());
        return buf;
    }

    double link_delay(const NodeId& a, const NodeId& b) const;
    double path_delay(size_t user, const overlay::AnonPath& path, const NodeId& model_id) const;

    void prime_sentry();
    void setup_nodes();
    void schedule_next_arrival();
    void handle_arrival(GenRequest gen, size_t user_hint, uint32_t turn,
                        size_t forced_target = SIZE_MAX);
    void handle_entry(uint64_t req_id, size_t entry_idx);
    void admit_at(uint64_t req_id, size_t node_idx);
    void start_jobs(size_t node_idx);
    void handle_completion(size_t node_idx, const routing::StartedJob& job);
    void finish_request(uint64_t req_id, double completion_at);
    void churn_tick(double interval_ms);
    void broadcast_tick(size_t node_idx);
    void sync_tick(size_t node_idx);
    void plan_refresh();
    void epoch_begin();
    void epoch_end(uint64_t epoch_id);
    bool work_remaining() const {
        return !workload_.exhausted() || inflight_.count_active > 0 ||
               inflight_.scheduled_followups > 0;
    }

    size_t pick_live_user();

    ScenarioConfig cfg_;
    Rng rng_;
    Sim sim_;
    OverlayNet overlay_;
    WorkloadGen workload_;
    hrtree::Sentry sentry_;
    verify::MockOracle reference_oracle_;

    std::vector<std::unique_ptr<ModelNode>> nodes_;
    std::vector<NodeId> node_ids_;
    std::vector<verify::MockOracle> node_oracles_;
    std::map<Address, size_t> node_by_address_;
    std::set<size_t> trusted_;

    struct UserState {
        std::optional<overlay::ProxySet> proxies;
    };
    std::vector<UserState> users_;
    std::map<uint64_t, Address> affinity_;       // session -> server address
    std::map<uint64_t, size_t> session_user_;

    std::map<uint64_t, ReqCtx> ctx_;
    struct {
        size_t count_active = 0;
        size_t scheduled_followups = 0;
    } inflight_;

    // verification state
    std::map<NodeId, verify::ReputationState> reputations_;
    std::vector<ChallengeDone> challenge_done_;
    std::set<uint64_t> challenge_ids_;
    Digest prev_commit_ = digest_of(to_bytes("genesis"));
    uint64_t epoch_counter_ = 0;
    uint64_t next_challenge_id_ = 1ull << 62;

    MetricsReport report_;
    std::vector<double> latencies_;
    std::vector<double> ttfts_;
    size_t cache_hits_ = 0;
    std::map<std::string, size_t> served_counts_;
};

double ScenarioRun::link_delay(const NodeId& a, const NodeId& b) const {
    // per-link delay sampled once, derived from the endpoint pair
    Hash64 h(cfg_.seed ^ 0x11AC);
    if (a < b) {
        h.mix(a.view()).mix(b.view());
    } else {
        h.mix(b.view()).mix(a.view());
    }
    Rng r(h.value());
    return r.lognormal(cfg_.link_median_ms, cfg_.link_sigma);
}

double ScenarioRun::path_delay(size_t user, const overlay::AnonPath& path,
                               const NodeId& model_id) const {
    double total = link_delay(overlay_.id_of(user), overlay_.id_of(path.relays[0]));
    for (size_t h = 0; h + 1 < path.relays.size(); ++h)
        total += link_delay(overlay_.id_of(path.relays[h]), overlay_.id_of(path.relays[h + 1]));
    total += link_delay(overlay_.id_of(path.proxy()), model_id);
    return total;
}

void ScenarioRun::prime_sentry() {
    if (cfg_.sentry_warmup == 0) return;
    // a statistically identical pre-run stream feeds the initial plan
    Rng warm = rng_.fork(0x5EA7);
    WorkloadGen gen(cfg_.workload, cfg_.seed ^ 0xA11CE);
    for (size_t i = 0; i < cfg_.sentry_warmup; ++i) sentry_.observe(gen.sample_prompt(warm));
    sentry_.refresh_now();
    std::string lens;
    for (auto l : sentry_.common_lengths()) lens += std::to_string(l) + " ";
    log_event(fmt_t() + " ev=sentry-warmup S=[ " + lens + "]");
}

void ScenarioRun::setup_nodes() {
    for (size_t i = 0; i < cfg_.model_nodes; ++i) {
        routing::ModelNodeConfig mc;
        mc.id = NodeId::from_index(0x40000000ull + i);
        mc.address = "model-" + std::to_string(i) + ":8000";
        mc.model_tag = cfg_.model_tag;
        mc.capacity = i < cfg_.node_capacity.size() ? cfg_.node_capacity[i] : cfg_.capacity;
        mc.service = cfg_.service;
        mc.plan = sentry_.plan();
        mc.tau_c = cfg_.tau_c;
        node_ids_.push_back(mc.id);
        node_by_address_[mc.address] = i;
        nodes_.push_back(std::make_unique<ModelNode>(mc));
        trusted_.insert(i);
        const double noise = i < cfg_.model_noise.size() ? cfg_.model_noise[i] : 0.0;
        node_oracles_.emplace_back(cfg_.seed ^ 0x0DE1, noise, 256);
        reputations_[mc.id] = verify::ReputationState{};
    }
    // every node's table lists the whole group, itself included
    for (auto& n : nodes_) {
        for (size_t j = 0; j < nodes_.size(); ++j) {
            routing::NodeTableRow row;
            row.address = nodes_[j]->address();
            row.stats.capacity = nodes_[j]->config().capacity;
            n->table()[node_ids_[j]] = row;
        }
    }
}

size_t ScenarioRun::pick_live_user() {
    for (int tries = 0; tries < 64; ++tries) {
        const size_t u = rng_.uniform(overlay_.user_count());
        if (overlay_.alive(u)) return u;
    }
    throw std::runtime_error("scenario: no live users");
}

void ScenarioRun::schedule_next_arrival() {
    if (workload_.exhausted()) return;
    GenRequest gen = workload_.next(rng_);
    const double at = gen.arrival_ms;
    sim_.at(at, [this, gen = std::move(gen)]() mutable {
        schedule_next_arrival();
        handle_arrival(std::move(gen), SIZE_MAX, 1);
    });
}

void ScenarioRun::handle_arrival(GenRequest gen, size_t user_hint, uint32_t turn,
                                 size_t forced_target) {
    ++report_.generated;
    ++inflight_.count_active;
    const uint64_t req_id = gen.id;

    if (sentry_.observe(gen.prompt)) plan_refresh();

    size_t user = user_hint;
    if (user == SIZE_MAX) {
        auto it = session_user_.find(gen.session_id);
        user = it != session_user_.end() ? it->second : pick_live_user();
    }
    if (gen.session_turns > 1) session_user_[gen.session_id] = user;

    if (!overlay_.alive(user)) {
        ++report_.undelivered;
        --inflight_.count_active;
        log_event(fmt_t() + " ev=undelivered id=" + std::to_string(req_id) + " cause=user-departed");
        return;
    }

    // lazily (re)establish the proxy set when paths have broken
    if (user >= users_.size()) users_.resize(user + 1);
    auto& ustate = users_[user];
    bool need_paths = !ustate.proxies.has_value();
    if (!need_paths) {
        size_t alive_paths = 0;
        for (const auto& p : ustate.proxies->paths) alive_paths += overlay_.path_alive(p);
        need_paths = alive_paths < cfg_.ida.n;
    }
    if (need_paths) {
        try {
            ustate.proxies = overlay_.establish_proxies(user, cfg_.proxies, cfg_.path_len, rng_);
        } catch (const overlay::ProxyEstablishError&) {
            ++report_.undelivered;
            --inflight_.count_active;
            log_event(fmt_t() + " ev=undelivered id=" + std::to_string(req_id) +
                      " cause=proxy-establishment");
            return;
        }
    }

    // pinned challenge target, else session affinity, else a uniform pick
    size_t target = SIZE_MAX;
    if (forced_target != SIZE_MAX && trusted_.count(forced_target)) target = forced_target;
    if (target == SIZE_MAX) {
        if (auto it = affinity_.find(gen.session_id); it != affinity_.end()) {
            auto nid = node_by_address_.find(it->second);
            if (nid != node_by_address_.end() && trusted_.count(nid->second)) target = nid->second;
        }
    }
    if (target == SIZE_MAX) {
        std::vector<size_t> pool(trusted_.begin(), trusted_.end());
        if (pool.empty()) throw std::runtime_error("scenario: no trusted model nodes");
        target = pool[rng_.uniform(pool.size())];
    }

    RequestBody body;
    body.request_id = req_id;
    body.session_id = gen.session_id;
    body.output_tokens = gen.output_tokens;
    body.prompt = gen.prompt;

    PromptEnvelope env;
    env.model_address = nodes_[target]->address();
    env.proxies = overlay_.proxy_refs(*ustate.proxies);
    env.body = body.encode();

    auto delivery =
        overlay_.send_prompt(user, env, *ustate.proxies, cfg_.ida, rng_, cfg_.failure_fraction);
    if (!delivery.delivered) {
        ++report_.undelivered;
        --inflight_.count_active;
        log_event(fmt_t() + " ev=undelivered id=" + std::to_string(req_id) + " cause=prompt-loss");
        return;
    }

    // time of the k-th arriving clove
    std::vector<double> delays;
    for (size_t idx : delivery.surviving_paths)
        delays.push_back(path_delay(user, ustate.proxies->paths[idx], node_ids_[target]));
    std::sort(delays.begin(), delays.end());
    const double prompt_delay = delays[cfg_.ida.k - 1];

    ReqCtx ctx;
    ctx.gen = std::move(gen);
    ctx.user = user;
    ctx.turn = turn;
    ctx.reply_routes = env.proxies;
    ctx.is_challenge = challenge_ids_.count(req_id) > 0;
    ctx_[req_id] = std::move(ctx);

    sim_.after(prompt_delay, [this, req_id, target] { handle_entry(req_id, target); });
}

void ScenarioRun::handle_entry(uint64_t req_id, size_t entry_idx) {
    auto it = ctx_.find(req_id);
    if (it == ctx_.end()) return;
    ReqCtx& ctx = it->second;

    size_t target = entry_idx;
    if (cfg_.routing == "overlay") {
        ModelNode& entry = *nodes_[entry_idx];
        // refresh own row, then decide
        auto& own = entry.table()[entry.id()];
        own.stats = entry.stats();
        const auto hashes = hrtree::preprocess(ctx.gen.prompt, entry.config().plan);
        const NodeId chosen =
            routing::route(hashes, entry.view().tree(), entry.table(), entry.config().tau_c);
        for (size_t j = 0; j < node_ids_.size(); ++j)
            if (node_ids_[j] == chosen) target = j;
        // optimistic local bookkeeping until the next broadcast corrects it
        auto row = entry.table().find(chosen);
        if (row != entry.table().end()) row->second.stats.queued += 1;
    }

    if (target != entry_idx) {
        ctx.forwarded = true;
        const double d = link_delay(node_ids_[entry_idx], node_ids_[target]);
        sim_.after(d, [this, req_id, target] { admit_at(req_id, target); });
    } else {
        admit_at(req_id, entry_idx);
    }
}

void ScenarioRun::admit_at(uint64_t req_id, size_t node_idx) {
    auto it = ctx_.find(req_id);
    if (it == ctx_.end()) return;
    ReqCtx& ctx = it->second;

    routing::Request req;
    req.request_id = req_id;
    req.model_tag = cfg_.model_tag;
    req.prompt = ctx.gen.prompt;
    req.session_id = ctx.gen.session_id;
    req.output_tokens = ctx.gen.output_tokens;
    req.hop_count = ctx.forwarded ? 1 : 0;
    assert(req.hop_count <= routing::kMaxForwards);
    for (const auto& ref : ctx.reply_routes) req.origin_proxies.push_back(ref.address);

    if (!nodes_[node_idx]->admit(std::move(req), sim_.now())) {
        ++report_.rejected;
        --inflight_.count_active;
        ctx_.erase(it);
        log_event(fmt_t() + " ev=rejected id=" + std::to_string(req_id));
        return;
    }
    start_jobs(node_idx);
}

void ScenarioRun::start_jobs(size_t node_idx) {
    for (auto& job : nodes_[node_idx]->start_ready(sim_.now())) {
        auto cit = ctx_.find(job.req.request_id);
        if (cit != ctx_.end()) {
            cit->second.ttft_ms = job.first_token_ms - cit->second.gen.arrival_ms;
            cit->second.served_by = nodes_[node_idx]->address();
            cit->second.cache_hit = job.cache_hit;
        }
        sim_.at(job.finish_ms, [this, node_idx, job] { handle_completion(node_idx, job); });
    }
}

void ScenarioRun::handle_completion(size_t node_idx, const routing::StartedJob& job) {
    ModelNode& node = *nodes_[node_idx];
    node.complete(job, sim_.now());
    start_jobs(node_idx);

    const uint64_t req_id = job.req.request_id;
    auto it = ctx_.find(req_id);
    if (it == ctx_.end()) return;
    ReqCtx& ctx = it->second;

    // response generated by this node's oracle; challenges are scored later
    Hash64 h(cfg_.seed ^ 0x9E5);
    h.mix(node.id().view()).mix(req_id);
    Rng resp_rng(h.value());
    const size_t resp_len = ctx.is_challenge ? cfg_.challenge_response_len : job.req.output_tokens;
    ResponseBody resp;
    resp.server = node.address();
    resp.tokens = node_oracles_[node_idx].generate(ctx.gen.prompt, resp_len, resp_rng);

    auto delivery = overlay_.return_response(node.address(), resp.encode(), ctx.reply_routes,
                                             cfg_.ida, rng_, cfg_.failure_fraction);
    if (!delivery.delivered) {
        ++report_.undelivered;
        --inflight_.count_active;
        ctx_.erase(it);
        log_event(fmt_t() + " ev=undelivered id=" + std::to_string(req_id) + " cause=response-loss");
        return;
    }

    std::vector<double> delays;
    for (size_t ri : delivery.surviving_routes) {
        // response retraces the prompt path in reverse
        const auto& paths = users_[ctx.user].proxies->paths;
        double d = cfg_.link_median_ms;
        for (const auto& p : paths) {
            if (overlay_.address_of(p.proxy()) == ctx.reply_routes[ri].address) {
                d = path_delay(ctx.user, p, node.id());
                break;
            }
        }
        delays.push_back(d);
    }
    std::sort(delays.begin(), delays.end());
    const double resp_delay = delays[cfg_.ida.k - 1];

    if (ctx.is_challenge)
        challenge_done_.push_back({node.id(), ctx.gen.prompt, resp.tokens});
    if (ctx.gen.session_turns > ctx.turn) affinity_[ctx.gen.session_id] = node.address();

    finish_request(req_id, sim_.now() + resp_delay);
}

void ScenarioRun::finish_request(uint64_t req_id, double completion_at) {
    sim_.at(completion_at, [this, req_id] {
        auto it = ctx_.find(req_id);
        if (it == ctx_.end()) return;
        ReqCtx& ctx = it->second;

        ++report_.completed;
        --inflight_.count_active;
        const double latency = sim_.now() - ctx.gen.arrival_ms;
        latencies_.push_back(latency);
        ttfts_.push_back(ctx.ttft_ms);
        cache_hits_ += ctx.cache_hit;
        served_counts_[ctx.served_by] += 1;

        RequestRow row;
        row.id = req_id;
        row.arrival_ms = ctx.gen.arrival_ms;
        row.ttft_ms = ctx.ttft_ms;
        row.completion_ms = latency;
        row.served_by = ctx.served_by;
        row.cache_hit = ctx.cache_hit;
        row.forwarded = ctx.forwarded;
        report_.rows.push_back(row);

        // follow-up turn of a multi-turn session
        if (!ctx.is_challenge && ctx.gen.session_turns > ctx.turn) {
            GenRequest next = ctx.gen;
            next.id = req_id + (uint64_t(1) << 48);  // unique per turn
            next.arrival_ms = sim_.now() + ctx.gen.think_time_ms;
            // the follow-up extends the session context
            auto resp_marker = TokenId(0x60000000u | uint32_t(req_id & 0x0FFFFFFF));
            next.prompt.push_back(resp_marker);
            const uint32_t turn_next = ctx.turn + 1;
            const size_t user = ctx.user;
            ++inflight_.scheduled_followups;
            sim_.at(next.arrival_ms, [this, next = std::move(next), user, turn_next]() mutable {
                --inflight_.scheduled_followups;
                handle_arrival(std::move(next), user, turn_next);
            });
        }
        ctx_.erase(it);
    });
}

void ScenarioRun::churn_tick(double interval_ms) {
    if (!work_remaining()) return;
    // departure paired with a join keeps the population mean flat
    for (int tries = 0; tries < 64; ++tries) {
        const size_t victim = rng_.uniform(overlay_.user_count());
        if (!overlay_.alive(victim)) continue;
        overlay_.depart(victim);
        overlay_.join();
        log_event(fmt_t() + " ev=churn depart=" + std::to_string(victim));
        break;
    }
    sim_.after(rng_.exponential(interval_ms), [this, interval_ms] { churn_tick(interval_ms); });
}

void ScenarioRun::broadcast_tick(size_t node_idx) {
    if (!work_remaining()) return;
    ModelNode& sender = *nodes_[node_idx];
    const Bytes msg = sender.make_load_broadcast(sim_.now());
    report_.load_broadcast_bytes += msg.size() * (nodes_.size() - 1);
    const auto decoded = routing::decode_load_broadcast(msg);
    for (size_t j = 0; j < nodes_.size(); ++j) {
        if (j == node_idx) continue;
        const double d = link_delay(node_ids_[node_idx], node_ids_[j]);
        sim_.after(d, [this, j, decoded] { routing::apply_load_broadcast(nodes_[j]->table(), decoded); });
    }
    sim_.after(cfg_.load_broadcast_period_s * 1000.0, [this, node_idx] { broadcast_tick(node_idx); });
}

void ScenarioRun::sync_tick(size_t node_idx) {
    if (!work_remaining()) return;
    ModelNode& sender = *nodes_[node_idx];
    // one delta per period, fanned out to the whole group
    for (size_t j = 0; j < nodes_.size(); ++j) {
        if (j == node_idx) continue;
        const uint64_t since = nodes_[j]->view().applied_version(sender.id());
        const auto delta = sender.view().export_delta(since);
        if (delta.ops.empty()) continue;
        const Bytes wire = hrtree::encode_delta(delta);
        report_.delta_sync_bytes += wire.size();
        const auto decoded = hrtree::decode_delta(wire);
        const double d = link_delay(node_ids_[node_idx], node_ids_[j]);
        const NodeId sid = sender.id();
        sim_.after(d, [this, j, sid, node_idx, decoded] {
            try {
                nodes_[j]->view().apply_remote(sid, decoded);
            } catch (const std::runtime_error&) {
                // version gap: fall back to a full snapshot transfer
                const auto snap = nodes_[node_idx]->view().snapshot();
                report_.delta_sync_bytes += hrtree::encode_delta(snap).size();
                nodes_[j]->view().resync(sid, snap);
            }
        });
    }
    sim_.after(cfg_.sync_period_s * 1000.0, [this, node_idx] { sync_tick(node_idx); });
}

void ScenarioRun::plan_refresh() {
    const auto& plan = sentry_.plan();
    bool changed = false;
    for (auto& n : nodes_) {
        if (n->config().plan.lengths != plan.lengths) {
            n->rebuild_plan(plan);
            changed = true;
        }
    }
    if (changed) log_event(fmt_t() + " ev=plan-refresh chunks=" + std::to_string(plan.lengths.size()));
}

void ScenarioRun::epoch_begin() {
    if (!work_remaining()) return;
    const uint64_t epoch_id = epoch_counter_++;
    std::vector<NodeId> committee;
    for (size_t i = 0; i < cfg_.committee; ++i) committee.push_back(NodeId::from_index(0xC000 + i));
    const NodeId leader = verify::select_leader(prev_commit_, epoch_id, committee);
    log_event(fmt_t() + " ev=epoch-begin epoch=" + std::to_string(epoch_id) +
              " leader=" + leader.short_hex());

    verify::PromptSampler sampler = [this](Rng& r) { return workload_.sample_prompt(r); };
    std::vector<NodeId> targets;
    for (size_t i : trusted_) targets.push_back(node_ids_[i]);
    if (targets.empty()) return;
    auto plan = verify::plan_epoch(epoch_id, targets, cfg_.challenges_per_node, sampler, rng_);

    // challenges enter through the normal request pipeline, indistinguishable
    // from user traffic; the committee only remembers the request ids
    double stagger = 0.0;
    for (const auto& [target, prompt] : plan.challenges) {
        size_t target_idx = SIZE_MAX;
        for (size_t i = 0; i < node_ids_.size(); ++i)
            if (node_ids_[i] == target) target_idx = i;
        if (target_idx == SIZE_MAX) continue;

        GenRequest gen;
        gen.id = next_challenge_id_++;
        gen.arrival_ms = sim_.now() + stagger;
        gen.prompt = prompt;
        gen.output_tokens = cfg_.challenge_response_len;
        gen.session_id = gen.id;
        challenge_ids_.insert(gen.id);
        stagger += 10.0;
        sim_.at(gen.arrival_ms, [this, gen = std::move(gen), target_idx]() mutable {
            handle_arrival(std::move(gen), SIZE_MAX, 1, target_idx);
        });
    }

    const double epoch_ms = cfg_.epoch_length_s * 1000.0;
    sim_.after(epoch_ms, [this, epoch_id] { epoch_end(epoch_id); });
}

void ScenarioRun::epoch_end(uint64_t epoch_id) {
    std::map<NodeId, std::pair<double, size_t>> acc;
    for (const auto& done : challenge_done_) {
        const double score =
            verify::check_credibility(done.prompt, done.response, reference_oracle_, 1e-9);
        auto& [sum, count] = acc[done.server];
        sum += score;
        ++count;
    }
    challenge_done_.clear();

    for (const auto& [node, sc] : acc) {
        auto& state = reputations_[node];
        const double credit = sc.first / double(sc.second);
        const bool punished = verify::update_reputation(state, credit, cfg_.reputation);
        report_.reputation_log.push_back(verify::ReputationLogEntry{
            epoch_id, node, credit, state.r, punished, cfg_.committee});
        if (state.untrusted) {
            for (size_t i = 0; i < node_ids_.size(); ++i) {
                if (node_ids_[i] == node && trusted_.erase(i)) {
                    for (auto& n : nodes_) n->table().erase(node);
                    log_event(fmt_t() + " ev=untrusted node=" + nodes_[i]->address());
                }
            }
        }
    }

    ByteWriter w;
    w.raw(BytesView(prev_commit_.bytes.data(), prev_commit_.bytes.size()));
    w.u64(epoch_id);
    prev_commit_ = digest_of(w.bytes());

    if (work_remaining()) epoch_begin();
}

MetricsReport ScenarioRun::run() {
    prime_sentry();
    setup_nodes();
    users_.resize(cfg_.users);

    schedule_next_arrival();
    if (cfg_.churn_per_min > 0.0) {
        const double interval_ms = 60'000.0 / cfg_.churn_per_min;
        sim_.after(rng_.exponential(interval_ms), [this, interval_ms] { churn_tick(interval_ms); });
    }
    for (size_t i = 0; i < nodes_.size(); ++i) {
        sim_.after(cfg_.load_broadcast_period_s * 1000.0 * (i + 1) / double(nodes_.size()),
                   [this, i] { broadcast_tick(i); });
        sim_.after(cfg_.sync_period_s * 1000.0 * (i + 1) / double(nodes_.size()),
                   [this, i] { sync_tick(i); });
    }
    if (cfg_.epoch_length_s > 0.0) epoch_begin();

    sim_.run();

    report_.in_flight = inflight_.count_active;
    if (!latencies_.empty()) {
        double sum = 0.0;
        for (double v : latencies_) sum += v;
        report_.avg_latency_ms = sum / double(latencies_.size());
        std::vector<double> sorted = latencies_;
        std::sort(sorted.begin(), sorted.end());
        // nearest-rank percentile
        const size_t rank = size_t(std::ceil(0.99 * double(sorted.size())));
        report_.p99_latency_ms = sorted[std::min(rank, sorted.size()) - 1];
    }
    if (!ttfts_.empty()) {
        double sum = 0.0;
        for (double v : ttfts_) sum += v;
        report_.avg_ttft_ms = sum / double(ttfts_.size());
    }
    if (report_.completed > 0) {
        report_.cache_hit_rate = double(cache_hits_) / double(report_.completed);
        for (const auto& [addr, count] : served_counts_)
            report_.per_node_share[addr] = double(count) / double(report_.completed);
    }
    if (report_.generated > 0)
        report_.delivery_rate = double(report_.completed) / double(report_.generated);
    if (cfg_.failure_fraction > 0.0) {
        Rng ent = rng_.fork(0xE27);
        report_.anonymity_entropy = overlay::estimate_anonymity(
            overlay_.user_count(), cfg_.failure_fraction, cfg_.ida.n, cfg_.path_len, 2000, ent);
    }
    return report_;
}

}  // namespace

MetricsReport run_scenario(const ScenarioConfig& config) {
    ScenarioRun run(config);
    return run.run();
}

// ---------------------------------------------------------------- export

std::string render_metrics_csv(const MetricsReport& report) {
    std::string out = "id,arrival_ms,ttft_ms,completion_ms,served_by,cache_hit,forwarded\n";
    char buf[256];
    for (const auto& r : report.rows) {
        std::snprintf(buf, sizeof buf, "%llu,%.3f,%.3f,%.3f,%s,%d,%d\n",
                      (unsigned long long)r.id, r.arrival_ms, r.ttft_ms, r.completion_ms,
                      r.served_by.c_str(), r.cache_hit ? 1 : 0, r.forwarded ? 1 : 0);
        out += buf;
    }
    return out;
}

std::string render_summary_json(const MetricsReport& r) {
    json j;
    j["generated"] = r.generated;
    j["completed"] = r.completed;
    j["rejected"] = r.rejected;
    j["undelivered"] = r.undelivered;
    j["in_flight"] = r.in_flight;
    j["avg_latency_ms"] = r.avg_latency_ms;
    j["p99_latency_ms"] = r.p99_latency_ms;
    j["avg_ttft_ms"] = r.avg_ttft_ms;
    j["cache_hit_rate"] = r.cache_hit_rate;
    j["delivery_rate"] = r.delivery_rate;
    j["anonymity_entropy"] = r.anonymity_entropy;
    j["delta_sync_bytes"] = r.delta_sync_bytes;
    j["load_broadcast_bytes"] = r.load_broadcast_bytes;
    j["per_node_share"] = r.per_node_share;
    return j.dump(2);
}

void export_metrics(const MetricsReport& report, const std::string& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("export_metrics: cannot create " + dir);

    auto write_file = [&](const std::string& name, const std::string& content) {
        std::ofstream out(fs::path(dir) / name, std::ios::binary);
        if (!out) throw std::runtime_error("export_metrics: cannot write " + name);
        out << content;
    };

    write_file("metrics.csv", render_metrics_csv(report));
    write_file("summary.json", render_summary_json(report));

    std::string events;
    for (const auto& e : report.events) events += e + "\n";
    write_file("events.log", events);

    std::string rep = "epoch,node,credit,reputation\n";
    char buf[160];
    for (const auto& e : report.reputation_log) {
        std::snprintf(buf, sizeof buf, "%llu,%s,%.6f,%.6f\n", (unsigned long long)e.epoch,
                      e.node.short_hex().c_str(), e.credit, e.reputation);
        rep += buf;
    }
    write_file("reputation.csv", rep);
}

// ---------------------------------------------------------------- churn experiment

ChurnPoint churn_survival_point(size_t overlay_nodes, double churn_per_min, double path_age_s,
                                size_t messages, sida::IdaParams params, size_t path_len,
                                uint64_t seed) {
    Rng rng(seed);
    OverlayNet net(overlay_nodes);
    Sim sim;

    const double churn_interval_ms = 60'000.0 / churn_per_min;
    const double age_ms = path_age_s * 1000.0;

    size_t delivered_multi = 0, delivered_single = 0, sent = 0;
    size_t relay_slots = 0, dead_slots = 0;

    // continuous churn process
    std::function<void()> churn = [&] {
        for (int tries = 0; tries < 64; ++tries) {
            const size_t victim = rng.uniform(net.user_count());
            if (!net.alive(victim)) continue;
            net.depart(victim);
            net.join();
            break;
        }
        sim.after(rng.exponential(churn_interval_ms), churn);
    };
    sim.after(rng.exponential(churn_interval_ms), churn);

    // senders cycle: establish fresh paths, wait the fixed age, evaluate
    const double spacing_ms = 50.0;
    for (size_t m = 0; m < messages; ++m) {
        const double t_setup = double(m) * spacing_ms;
        sim.at(t_setup, [&, m] {
            // any currently live node sends
            size_t user = SIZE_MAX;
            Rng pick = rng.fork(0x5E11D + m);
            for (int tries = 0; tries < 64 && user == SIZE_MAX; ++tries) {
                const size_t cand = pick.uniform(net.user_count());
                if (net.alive(cand)) user = cand;
            }
            if (user == SIZE_MAX) return;
            overlay::ProxySet multi, single;
            try {
                Rng setup = rng.fork(m);
                multi = net.establish_proxies(user, params.n, path_len, setup);
                single = net.establish_proxies(user, 1, path_len, setup);
            } catch (const overlay::ProxyEstablishError&) {
                return;
            }
            sim.after(age_ms, [&, multi = std::move(multi), single = std::move(single)] {
                ++sent;
                size_t alive_paths = 0;
                for (const auto& p : multi.paths) {
                    const bool ok = net.path_alive(p);
                    alive_paths += ok;
                    relay_slots += p.relays.size();
                    for (size_t r : p.relays) dead_slots += !net.alive(r);
                }
                delivered_multi += alive_paths >= params.k;
                delivered_single += net.path_alive(single.paths[0]);
            });
        });
    }

    sim.run(double(messages) * spacing_ms + age_ms + 1000.0);

    ChurnPoint point;
    point.churn_per_min = churn_per_min;
    point.path_age_s = path_age_s;
    point.messages = sent;
    if (sent > 0) {
        point.delivery_multipath = double(delivered_multi) / double(sent);
        point.delivery_single = double(delivered_single) / double(sent);
    }
    if (relay_slots > 0) point.empirical_f = double(dead_slots) / double(relay_slots);
    point.analytic_multipath =
        overlay::path_success_probability(params.n, params.k, unsigned(path_len), point.empirical_f);
    return point;
}

}  // namespace peerserve::sim
