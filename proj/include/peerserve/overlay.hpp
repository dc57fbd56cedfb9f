#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

#include "peerserve/node.hpp"
#include "peerserve/rng.hpp"
#include "peerserve/sida.hpp"

namespace peerserve::overlay {

/** Pre-established anonymous path; the terminal relay acts as the proxy. */
struct AnonPath {
    Digest path_id{};               // hash of (initiator id, terminal relay id)
    std::vector<size_t> relays;     // node indices, length l

    size_t proxy() const { return relays.back(); }
};

struct ProxySet {
    size_t owner = 0;
    std::vector<AnonPath> paths;
};

struct AdversaryModel {
    double f = 0.0;          // fraction of malicious users
    bool colluding = true;
    bool brute_force = false;
};

class ProxyEstablishError : public std::runtime_error {
public:
    ProxyEstablishError(size_t achieved, size_t wanted)
        : std::runtime_error("proxy establishment failed"), achieved(achieved), wanted(wanted) {}
    size_t achieved;
    size_t wanted;
};

/** One reply route: the proxy's address and the path id it routes by. */
struct ProxyRef {
    Address address;
    Digest path_id{};

    bool operator==(const ProxyRef&) const = default;
};

/** Plaintext prompt envelope: names the model and the reply proxies, never the sender. */
struct PromptEnvelope {
    Address model_address;
    std::vector<ProxyRef> proxies;
    Bytes body;

    Bytes encode() const;
    static PromptEnvelope decode(BytesView buf);
};

struct PromptDelivery {
    bool delivered = false;
    int cloves_arrived = 0;
    Bytes plaintext;  // recovered envelope bytes, model side
    // reply routes observed on arriving cloves (the envelope carries all n)
    std::vector<ProxyRef> reply_routes;
    std::vector<size_t> surviving_paths;  // indices into the proxy set
};

struct ResponseDelivery {
    bool delivered = false;
    int cloves_arrived = 0;
    Bytes plaintext;                       // recovered response, user side
    std::vector<size_t> surviving_routes;  // indices into reply_routes
};

struct TransitRecord {
    Address from;
    Address to;
    Bytes payload;
};

/**
 * Simulated user overlay: directory, relay routing state, clove forwarding.
 * Relays route data cloves purely by stored (path_id -> predecessor/successor)
 * state; the public-key op counter on the data path must stay at zero.
 */
class OverlayNet {
public:
    explicit OverlayNet(size_t num_users);

    size_t user_count() const { return nodes_.size(); }
    const NodeId& id_of(size_t i) const { return nodes_[i].id; }
    const Address& address_of(size_t i) const { return nodes_[i].address; }
    bool alive(size_t i) const { return nodes_[i].alive; }
    std::optional<size_t> index_of_address(const Address& a) const;

    void set_alive(size_t i, bool alive);
    /** Node departure: drop it and evict every route through it. */
    void depart(size_t i) { set_alive(i, false); }
    size_t join();

    std::vector<NodeId> user_list() const;

    ProxySet establish_proxies(size_t user, size_t want_paths, size_t path_len, Rng& rng,
                               size_t max_attempts_per_path = 32);

    /** True iff every relay on the path is still alive and routed. */
    bool path_alive(const AnonPath& p) const;

    /** Reply routes for the envelope: proxy address plus path id per path. */
    std::vector<ProxyRef> proxy_refs(const ProxySet& set) const;

    PromptDelivery send_prompt(size_t user, const PromptEnvelope& envelope, const ProxySet& proxies,
                               sida::IdaParams params, Rng& rng, double per_hop_loss = 0.0);

    ResponseDelivery return_response(const Address& model_address, BytesView response,
                                     const std::vector<ProxyRef>& reply_routes,
                                     sida::IdaParams params, Rng& rng, double per_hop_loss = 0.0);

    // instrumentation
    void set_record_transit(bool on) { record_transit_ = on; }
    const std::vector<TransitRecord>& transit_log() const { return transit_log_; }
    void clear_transit_log() { transit_log_.clear(); }
    uint64_t data_path_pk_ops() const;
    uint64_t setup_pk_ops() const;

private:
    struct Route {
        Address predecessor;
        Address successor;  // empty at the terminal relay
    };
    struct Node {
        NodeId id;
        Address address;
        bool alive = true;
        std::map<Digest, Route> routes;
        uint64_t pk_ops_setup = 0;
        uint64_t pk_ops_data = 0;
    };

    void log_transit(const Address& from, const Address& to, BytesView payload);
    bool install_route(size_t node, const Digest& path_id, const Address& pred,
                       const Address& succ);

    std::vector<Node> nodes_;
    std::map<Address, size_t> by_address_;
    bool record_transit_ = false;
    std::vector<TransitRecord> transit_log_;
    uint64_t next_join_ = 0;
};

// --- analytic and Monte-Carlo privacy metrics ---

/** P(at least k of n paths survive) with per-relay survival (1-f)^l. */
double path_success_probability(unsigned n, unsigned k, unsigned l, double f);

/** Instantiated paths plus adversary positions for the entropy metric. */
struct PathTopology {
    size_t total_nodes = 0;
    size_t user = 0;
    std::vector<std::vector<size_t>> paths;  // relay node indices, user excluded
};

/**
 * Normalized source entropy H(S)/log2(N). Predecessors of malicious chains
 * get probability 1/(L+1-fL); the remaining honest nodes share the rest.
 */
double anonymity_entropy(const PathTopology& topo, const std::vector<bool>& malicious, double f);

/** Mean normalized entropy over sampled topologies and adversary positions. */
double estimate_anonymity(size_t total_nodes, double f, size_t n_paths, size_t path_len,
                          size_t trials, Rng& rng);

/**
 * Fraction of trials in which the message content stays confidential.
 * A path is adversary-occupied when any of its l relays or the proxy handoff
 * is malicious; content falls when >= k paths are occupied and the adversary
 * can brute-force the dispersal. Distinct path ids defeat linkage otherwise.
 */
double confidentiality_estimate(unsigned n, unsigned k, const AdversaryModel& adversary,
                                size_t trials, Rng& rng, unsigned path_len = 3);

/** Fast standalone Monte-Carlo of clove delivery under per-node failure f. */
double monte_carlo_delivery(unsigned n, unsigned k, unsigned l, double f, size_t trials, Rng& rng);

}  // namespace peerserve::overlay
