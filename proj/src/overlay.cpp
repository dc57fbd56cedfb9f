#include "peerserve/overlay.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace peerserve::overlay {

using sida::Clove;
using sida::MsgType;

// ---------------------------------------------------------------- envelope

Bytes PromptEnvelope::encode() const {
    std::ostringstream head;
    head << "model=" << model_address << "\n";
    head << "proxies=";
    for (size_t i = 0; i < proxies.size(); ++i) {
        if (i) head << ",";
        head << proxies[i].address << "#" << proxies[i].path_id.hex();
    }
    head << "\nbody-len=" << body.size() << "\n\n";
    Bytes out = to_bytes(head.str());
    out.insert(out.end(), body.begin(), body.end());
    return out;
}

PromptEnvelope PromptEnvelope::decode(BytesView buf) {
    const std::string text(buf.begin(), buf.end());
    const size_t sep = text.find("\n\n");
    if (sep == std::string::npos) throw std::runtime_error("envelope: missing header terminator");

    PromptEnvelope env;
    size_t body_len = 0;
    std::istringstream head(text.substr(0, sep));
    std::string line;
    while (std::getline(head, line)) {
        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw std::runtime_error("envelope: malformed line");
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        if (key == "model") {
            env.model_address = val;
        } else if (key == "proxies") {
            std::istringstream vs(val);
            std::string item;
            while (std::getline(vs, item, ',')) {
                if (item.empty()) continue;
                const size_t hash_pos = item.find('#');
                if (hash_pos == std::string::npos)
                    throw std::runtime_error("envelope: proxy entry missing path id");
                ProxyRef ref;
                ref.address = item.substr(0, hash_pos);
                const Bytes id = hex_decode(item.substr(hash_pos + 1));
                if (id.size() != ref.path_id.bytes.size())
                    throw std::runtime_error("envelope: bad path id length");
                std::copy(id.begin(), id.end(), ref.path_id.bytes.begin());
                env.proxies.push_back(std::move(ref));
            }
        } else if (key == "body-len") {
            body_len = std::stoull(val);
        } else {
            throw std::runtime_error("envelope: unknown key " + key);
        }
    }
    const size_t body_start = sep + 2;
    if (buf.size() - body_start != body_len) throw std::runtime_error("envelope: body length mismatch");
    env.body.assign(buf.begin() + body_start, buf.end());
    return env;
}

// ---------------------------------------------------------------- overlay

namespace {

Address make_address(uint64_t i) {
    // flat simulated address space
    return "10." + std::to_string((i >> 16) & 0xFF) + "." + std::to_string((i >> 8) & 0xFF) + "." +
           std::to_string(i & 0xFF) + ":7000";
}

Digest make_path_id(const NodeId& initiator, const NodeId& terminal) {
    return digest_cat({initiator.view(), terminal.view()});
}

// Routing wrapper carried on the anonymous leg. Relays read only this.
struct RoutedPacket {
    Digest path_id{};
    uint8_t backward = 0;
    Address dest_model;  // forward direction only
    Bytes clove_bytes;

    Bytes encode() const {
        ByteWriter w;
        w.raw(BytesView(path_id.bytes.data(), path_id.bytes.size()));
        w.u8(backward);
        w.u16(uint16_t(dest_model.size()));
        w.raw(to_bytes(dest_model));
        w.u32(uint32_t(clove_bytes.size()));
        w.raw(clove_bytes);
        return w.take();
    }
};

Bytes setup_clove_bytes(const Digest& path_id, const Address& succ, const NodeId& hop_node) {
    // Path-setup control message: a msg_type=2 clove whose fragment carries
    // key-value text. Modeled onion handshake, one control clove per hop.
    // The predecessor is transport-level knowledge (whoever delivered the
    // message), so the payload names only the path and the successor.
    Clove c;
    c.msg_type = MsgType::path_setup;
    c.session_id = path_id.bytes;
    c.clove_index = 1;
    c.params = {1, 1};
    c.fragment.index = 1;
    std::ostringstream kv;
    kv << "op=establish\npath=" << path_id.hex() << "\nsucc=" << succ << "\n";
    c.fragment.payload = to_bytes(kv.str());
    c.orig_len = uint32_t(c.fragment.payload.size());
    c.key_share.x = uint8_t(hop_node.key[0] | 1);
    return sida::encode_clove(c);
}

}  // namespace

OverlayNet::OverlayNet(size_t num_users) {
    nodes_.reserve(num_users);
    for (size_t i = 0; i < num_users; ++i) join();
}

size_t OverlayNet::join() {
    Node n;
    n.id = NodeId::from_index(next_join_);
    n.address = make_address(next_join_);
    ++next_join_;
    nodes_.push_back(std::move(n));
    by_address_[nodes_.back().address] = nodes_.size() - 1;
    return nodes_.size() - 1;
}

void OverlayNet::set_alive(size_t i, bool alive) {
    nodes_[i].alive = alive;
    if (!alive) nodes_[i].routes.clear();  // departure evicts relay state
}

std::optional<size_t> OverlayNet::index_of_address(const Address& a) const {
    auto it = by_address_.find(a);
    if (it == by_address_.end()) return std::nullopt;
    return it->second;
}

std::vector<NodeId> OverlayNet::user_list() const {
    std::vector<NodeId> out;
    out.reserve(nodes_.size());
    for (const auto& n : nodes_) out.push_back(n.id);
    return out;
}

void OverlayNet::log_transit(const Address& from, const Address& to, BytesView payload) {
    if (record_transit_) transit_log_.push_back({from, to, Bytes(payload.begin(), payload.end())});
}

bool OverlayNet::install_route(size_t node, const Digest& path_id, const Address& pred,
                               const Address& succ) {
    if (!nodes_[node].alive) return false;
    nodes_[node].pk_ops_setup += 1;  // onion layer peeled during establishment
    nodes_[node].routes[path_id] = Route{pred, succ};
    return true;
}

ProxySet OverlayNet::establish_proxies(size_t user, size_t want_paths, size_t path_len, Rng& rng,
                                       size_t max_attempts_per_path) {
    if (path_len == 0) throw std::invalid_argument("establish_proxies: path_len must be >= 1");
    ProxySet set;
    set.owner = user;
    std::set<size_t> used_proxies;

    for (size_t p = 0; p < want_paths; ++p) {
        bool built = false;
        for (size_t attempt = 0; attempt < max_attempts_per_path && !built; ++attempt) {
            // sample a fresh candidate path from the (possibly stale) directory
            std::vector<size_t> relays;
            std::set<size_t> seen{user};
            size_t guard = 0;
            while (relays.size() < path_len && guard++ < nodes_.size() * 4) {
                const size_t cand = rng.uniform(nodes_.size());
                if (seen.count(cand)) continue;
                if (used_proxies.count(cand) && relays.size() + 1 == path_len) continue;
                seen.insert(cand);
                relays.push_back(cand);
            }
            if (relays.size() < path_len) break;  // candidate pool exhausted

            AnonPath path;
            path.relays = relays;
            path.path_id = make_path_id(nodes_[user].id, nodes_[relays.back()].id);

            // hop-by-hop establishment; any dead relay aborts this attempt
            bool ok = true;
            for (size_t h = 0; h < relays.size() && ok; ++h) {
                const Address pred = h == 0 ? nodes_[user].address : nodes_[relays[h - 1]].address;
                const Address succ =
                    h + 1 < relays.size() ? nodes_[relays[h + 1]].address : Address{};
                const Bytes msg = setup_clove_bytes(path.path_id, succ, nodes_[relays[h]].id);
                log_transit(pred, nodes_[relays[h]].address, msg);
                // predecessor learned from the delivering hop, not the payload
                ok = install_route(relays[h], path.path_id, pred, succ);
            }
            if (!ok) continue;

            used_proxies.insert(path.proxy());
            set.paths.push_back(std::move(path));
            built = true;
        }
        if (!built) throw ProxyEstablishError(set.paths.size(), want_paths);
    }
    return set;
}

std::vector<ProxyRef> OverlayNet::proxy_refs(const ProxySet& set) const {
    std::vector<ProxyRef> refs;
    refs.reserve(set.paths.size());
    for (const auto& p : set.paths) refs.push_back({nodes_[p.proxy()].address, p.path_id});
    return refs;
}

bool OverlayNet::path_alive(const AnonPath& p) const {
    for (size_t r : p.relays) {
        if (!nodes_[r].alive) return false;
        if (!nodes_[r].routes.count(p.path_id)) return false;
    }
    return true;
}

PromptDelivery OverlayNet::send_prompt(size_t user, const PromptEnvelope& envelope,
                                       const ProxySet& proxies, sida::IdaParams params, Rng& rng,
                                       double per_hop_loss) {
    if (proxies.paths.size() < params.n)
        throw std::invalid_argument("send_prompt: fewer proxies than n");

    const Bytes plaintext = envelope.encode();
    sida::SessionId session;
    for (auto& b : session) b = rng.byte();
    auto cloves = sida::make_cloves(plaintext, params, session, rng, MsgType::prompt_slice);

    PromptDelivery out;
    std::vector<Clove> arrived;
    for (uint8_t i = 0; i < params.n; ++i) {
        const AnonPath& path = proxies.paths[i];
        RoutedPacket pkt;
        pkt.path_id = path.path_id;
        pkt.dest_model = envelope.model_address;
        pkt.clove_bytes = sida::encode_clove(cloves[i]);
        const Bytes wire = pkt.encode();

        // user -> relay1 -> ... -> proxy, routed by stored state only
        Address prev = nodes_[user].address;
        bool lost = false;
        for (size_t h = 0; h < path.relays.size(); ++h) {
            Node& relay = nodes_[path.relays[h]];
            log_transit(prev, relay.address, wire);
            auto it = relay.routes.find(path.path_id);
            if (!relay.alive || it == relay.routes.end() ||
                (per_hop_loss > 0.0 && rng.chance(per_hop_loss))) {
                lost = true;
                break;
            }
            prev = relay.address;
        }
        if (lost) continue;

        // proxy -> model handoff in the clear, tagged with the reply path
        const Address proxy_addr = nodes_[path.proxy()].address;
        ByteWriter hand;
        hand.raw(BytesView(path.path_id.bytes.data(), path.path_id.bytes.size()));
        hand.raw(pkt.clove_bytes);
        log_transit(proxy_addr, envelope.model_address, hand.bytes());

        arrived.push_back(cloves[i]);
        out.reply_routes.push_back({proxy_addr, path.path_id});
        out.surviving_paths.push_back(i);
    }

    out.cloves_arrived = int(arrived.size());
    if (arrived.size() >= params.k) {
        out.plaintext = sida::recover_message(arrived);
        out.delivered = true;
    }
    return out;
}

ResponseDelivery OverlayNet::return_response(const Address& model_address, BytesView response,
                                             const std::vector<ProxyRef>& reply_routes,
                                             sida::IdaParams params, Rng& rng,
                                             double per_hop_loss) {
    if (reply_routes.size() < params.n)
        throw std::invalid_argument("return_response: fewer reply routes than n");

    sida::SessionId session;
    for (auto& b : session) b = rng.byte();
    auto cloves = sida::make_cloves(response, params, session, rng, MsgType::response_slice);

    ResponseDelivery out;
    std::vector<Clove> arrived;
    for (uint8_t i = 0; i < params.n; ++i) {
        const auto& [proxy_addr, path_id] = reply_routes[i];
        RoutedPacket pkt;
        pkt.path_id = path_id;
        pkt.backward = 1;
        pkt.clove_bytes = sida::encode_clove(cloves[i]);
        const Bytes wire = pkt.encode();

        auto proxy_idx = index_of_address(proxy_addr);
        if (!proxy_idx) continue;
        log_transit(model_address, proxy_addr, wire);

        // walk backward through stored predecessors until the path initiator
        size_t cur = *proxy_idx;
        bool lost = false;
        int guard = 0;
        while (true) {
            Node& relay = nodes_[cur];
            auto it = relay.routes.find(path_id);
            if (!relay.alive || it == relay.routes.end() ||
                (per_hop_loss > 0.0 && rng.chance(per_hop_loss))) {
                lost = true;
                break;
            }
            const Address& pred = it->second.predecessor;
            log_transit(relay.address, pred, wire);
            auto pred_idx = index_of_address(pred);
            if (!pred_idx) {
                lost = true;
                break;
            }
            // the initiator holds no route entry for its own path
            if (!nodes_[*pred_idx].routes.count(path_id)) {
                lost = !nodes_[*pred_idx].alive;
                break;
            }
            cur = *pred_idx;
            if (++guard > 1024) throw std::runtime_error("return_response: routing loop");
        }
        if (!lost) {
            arrived.push_back(cloves[i]);
            out.surviving_routes.push_back(i);
        }
    }

    out.cloves_arrived = int(arrived.size());
    if (arrived.size() >= params.k) {
        out.plaintext = sida::recover_message(arrived);
        out.delivered = true;
    }
    return out;
}

uint64_t OverlayNet::data_path_pk_ops() const {
    uint64_t sum = 0;
    for (const auto& n : nodes_) sum += n.pk_ops_data;
    return sum;
}

uint64_t OverlayNet::setup_pk_ops() const {
    uint64_t sum = 0;
    for (const auto& n : nodes_) sum += n.pk_ops_setup;
    return sum;
}

// ---------------------------------------------------------------- metrics

double path_success_probability(unsigned n, unsigned k, unsigned l, double f) {
    if (k > n) throw std::invalid_argument("path_success_probability: k > n");
    if (f < 0.0 || f >= 1.0) throw std::invalid_argument("path_success_probability: f in [0,1)");
    const double p = std::pow(1.0 - f, double(l));
    // binomial tail, evaluated with long doubles for small n
    long double total = 0.0L;
    for (unsigned i = k; i <= n; ++i) {
        long double c = 1.0L;
        for (unsigned j = 0; j < i; ++j) c = c * (long double)(n - j) / (long double)(j + 1);
        total += c * std::pow((long double)p, (long double)i) *
                 std::pow((long double)(1.0 - p), (long double)(n - i));
    }
    return double(total);
}

double anonymity_entropy(const PathTopology& topo, const std::vector<bool>& malicious, double f) {
    const size_t N = topo.total_nodes;
    if (N < 2) throw std::invalid_argument("anonymity_entropy: need at least 2 nodes");

    std::set<size_t> on_paths;
    for (const auto& p : topo.paths)
        for (size_t r : p) on_paths.insert(r);
    const double L = double(on_paths.size());

    // predecessors of maximal malicious chains; the user itself may qualify
    std::set<size_t> gamma;
    for (const auto& p : topo.paths) {
        for (size_t h = 0; h < p.size(); ++h) {
            if (!malicious[p[h]]) continue;
            if (h == 0) {
                gamma.insert(topo.user);
            } else if (!malicious[p[h - 1]]) {
                gamma.insert(p[h - 1]);
            }
        }
    }

    size_t malicious_count = 0;
    for (bool m : malicious) malicious_count += m;
    const double honest = double(N - malicious_count);

    const double p_gamma = 1.0 / (L + 1.0 - f * L);
    double gamma_mass = p_gamma * double(gamma.size());
    double residual = 1.0 - gamma_mass;
    if (residual < 0.0) residual = 0.0;  // degenerate heavy-adversary corner

    const double rest_count = honest - double(gamma.size());
    double H = 0.0;
    if (gamma_mass > 0.0 && p_gamma > 0.0) H += -double(gamma.size()) * p_gamma * std::log2(p_gamma);
    if (residual > 0.0 && rest_count > 0.5) {
        const double q = residual / rest_count;
        H += -residual * std::log2(q);
    }
    return H / std::log2(double(N));
}

double estimate_anonymity(size_t total_nodes, double f, size_t n_paths, size_t path_len,
                          size_t trials, Rng& rng) {
    if (trials == 0) throw std::invalid_argument("estimate_anonymity: trials must be positive");
    if (total_nodes < 2) throw std::invalid_argument("estimate_anonymity: need at least 2 nodes");
    const size_t slots = n_paths * path_len;
    const double L = double(slots);  // relays distinct at network scale
    const size_t m_total = size_t(std::llround(f * double(total_nodes)));
    const double honest = double(total_nodes - m_total);
    const double p_gamma = 1.0 / (L + 1.0 - f * L);
    const double log2N = std::log2(double(total_nodes));

    std::vector<bool> mal(path_len);
    double sum = 0.0;
    for (size_t t = 0; t < trials; ++t) {
        size_t gamma = 0;
        bool user_in_gamma = false;
        for (size_t p = 0; p < n_paths; ++p) {
            for (size_t h = 0; h < path_len; ++h) mal[h] = rng.chance(f);
            for (size_t h = 0; h < path_len; ++h) {
                if (!mal[h]) continue;
                if (h == 0) {
                    user_in_gamma = true;  // chain starts at the first relay
                } else if (!mal[h - 1]) {
                    ++gamma;  // honest predecessor of a malicious chain
                }
            }
        }
        gamma += user_in_gamma;

        double residual = 1.0 - p_gamma * double(gamma);
        if (residual < 0.0) residual = 0.0;
        const double rest = honest - double(gamma);
        double H = 0.0;
        if (gamma > 0) H += -double(gamma) * p_gamma * std::log2(p_gamma);
        if (residual > 0.0 && rest > 0.5) H += -residual * std::log2(residual / rest);
        sum += H / log2N;
    }
    return sum / double(trials);
}

double confidentiality_estimate(unsigned n, unsigned k, const AdversaryModel& adversary,
                                size_t trials, Rng& rng, unsigned path_len) {
    if (trials == 0) throw std::invalid_argument("confidentiality_estimate: trials must be positive");
    if (!adversary.colluding) return 1.0;  // isolated observers never hold k slices
    if (!adversary.brute_force) {
        // distinct path ids defeat cross-path linkage, so slices never combine
        return 1.0;
    }
    size_t confidential = 0;
    const unsigned exposure = path_len + 1;  // relays plus the proxy handoff
    for (size_t t = 0; t < trials; ++t) {
        unsigned occupied = 0;
        for (unsigned p = 0; p < n; ++p) {
            bool on_path = false;
            for (unsigned h = 0; h < exposure; ++h) on_path |= rng.chance(adversary.f);
            occupied += on_path;
        }
        if (occupied < k) ++confidential;
    }
    return double(confidential) / double(trials);
}

double monte_carlo_delivery(unsigned n, unsigned k, unsigned l, double f, size_t trials, Rng& rng) {
    if (k > n) throw std::invalid_argument("monte_carlo_delivery: k > n");
    size_t ok = 0;
    for (size_t t = 0; t < trials; ++t) {
        unsigned alive_paths = 0;
        for (unsigned p = 0; p < n; ++p) {
            bool alive = true;
            for (unsigned h = 0; h < l; ++h) alive &= !rng.chance(f);
            alive_paths += alive;
        }
        if (alive_paths >= k) ++ok;
    }
    return double(ok) / double(trials);
}

}  // namespace peerserve::overlay
