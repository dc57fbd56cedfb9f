#include "peerserve/verification.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace peerserve::verify {

namespace {

Bytes tokens_bytes(const TokenSeq& tokens) {
    ByteWriter w;
    for (TokenId t : tokens) w.u32(t);
    return w.take();
}

Bytes u64_bytes(uint64_t v) {
    ByteWriter w;
    w.u64(v);
    return w.take();
}

}  // namespace

void TokenDistribution::validate() const {
    if (p.size() < 2) throw std::runtime_error("token distribution: vocab must be >= 2");
    double sum = 0.0;
    for (double v : p) {
        if (v < 0.0 || v > 1.0) throw std::runtime_error("token distribution: entry out of [0,1]");
        sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw std::runtime_error("token distribution: does not sum to 1");
}

double ProbOracle::token_prob(const TokenSeq& context, TokenId token) const {
    const auto dist = next_token_dist(context);
    if (token >= dist.p.size()) return 0.0;
    return dist.p[token];
}

TokenId ProbOracle::greedy_token(const TokenSeq& context) const {
    const auto dist = next_token_dist(context);
    size_t best = 0;
    for (size_t i = 1; i < dist.p.size(); ++i)
        if (dist.p[i] > dist.p[best]) best = i;
    return TokenId(best);
}

// ---------------------------------------------------------------- mock oracle

MockOracle::MockOracle(uint64_t seed, double noise, size_t vocab)
    : seed_(seed), noise_(noise), vocab_(vocab) {
    if (vocab_ < 2) throw std::invalid_argument("mock oracle: vocab must be >= 2");
    if (noise_ < 0.0 || noise_ > 1.0) throw std::invalid_argument("mock oracle: noise in [0,1]");
}

TokenId MockOracle::peak_token(const TokenSeq& context) const {
    Hash64 h(seed_);
    for (TokenId t : context) h.mix(uint64_t(t) + 1);
    return TokenId(h.value() % vocab_);
}

TokenDistribution MockOracle::next_token_dist(const TokenSeq& context) const {
    TokenDistribution d;
    d.p.assign(vocab_, noise_ / double(vocab_));
    d.p[peak_token(context)] += 1.0 - noise_;
    return d;
}

double MockOracle::token_prob(const TokenSeq& context, TokenId token) const {
    if (token >= vocab_) return 0.0;
    const double base = noise_ / double(vocab_);
    return token == peak_token(context) ? base + (1.0 - noise_) : base;
}

TokenId MockOracle::sample_token(const TokenSeq& context, Rng& rng) const {
    if (rng.real() < 1.0 - noise_) return peak_token(context);
    return TokenId(rng.uniform(vocab_));
}

TokenSeq MockOracle::generate(const TokenSeq& prompt, size_t len, Rng& rng) const {
    // incremental peak state; identical to resampling with the full context
    Hash64 h(seed_);
    for (TokenId t : prompt) h.mix(uint64_t(t) + 1);
    TokenSeq out;
    out.reserve(len);
    for (size_t i = 0; i < len; ++i) {
        const TokenId peak = TokenId(h.value() % vocab_);
        const TokenId t =
            rng.real() < 1.0 - noise_ ? peak : TokenId(rng.uniform(vocab_));
        out.push_back(t);
        h.mix(uint64_t(t) + 1);
    }
    return out;
}

TokenSeq MockOracle::generate_greedy(const TokenSeq& prompt, size_t len) const {
    TokenSeq context = prompt;
    TokenSeq out;
    out.reserve(len);
    for (size_t i = 0; i < len; ++i) {
        const TokenId t = greedy_token(context);
        out.push_back(t);
        context.push_back(t);
    }
    return out;
}

// ---------------------------------------------------------------- credibility

double check_credibility(const TokenSeq& prompt, const TokenSeq& response,
                         const ProbOracle& oracle, double epsilon) {
    if (response.empty()) throw std::runtime_error("nothing to score");
    if (epsilon <= 0.0 || epsilon > 1.0) throw std::invalid_argument("epsilon out of (0,1]");

    TokenSeq context = prompt;
    double sum_log = 0.0;
    for (TokenId t : response) {
        double p = oracle.token_prob(context, t);
        if (p <= 0.0) p = epsilon;
        sum_log += std::log(p);
        context.push_back(t);
    }
    // 1/PPL = exp(mean log p); p_i <= 1 keeps this in (0, 1]
    return std::exp(sum_log / double(response.size()));
}

// ---------------------------------------------------------------- reputation

size_t ReputationState::abnormal_count(double tau) const {
    size_t c = 0;
    for (double v : window) c += v < tau;
    return c;
}

bool update_reputation(ReputationState& state, double credit, const ReputationParams& params) {
    if (credit <= 0.0 || credit > 1.0) throw std::invalid_argument("credit out of (0,1]");
    if (std::abs(params.alpha + params.beta - 1.0) > 1e-9)
        throw std::invalid_argument("reputation params: alpha + beta must equal 1");
    if (params.gamma <= 0.0 || params.gamma > 1.0)
        throw std::invalid_argument("reputation params: gamma out of (0,1]");
    if (params.tau <= 0.0 || params.tau >= 1.0)
        throw std::invalid_argument("reputation params: tau out of (0,1)");
    if (params.window == 0) throw std::invalid_argument("reputation params: window must be >= 1");

    state.window.push_back(credit);
    while (state.window.size() > params.window) state.window.pop_front();
    const size_t c = state.abnormal_count(params.tau);

    // trigger reads inclusively: c/W >= gamma
    const bool punished =
        c > 0 && double(c) / double(params.window) >= params.gamma - 1e-12;
    const double coeff =
        punished ? (double(params.window) + 1.0) /
                       (double(params.window) + double(c) / params.gamma + 2.0)
                 : params.beta;
    state.r = params.alpha * state.r + coeff * credit;
    if (state.r < params.trust_floor) state.untrusted = true;
    return punished;
}

// ---------------------------------------------------------------- epochs

NodeId select_leader(const Digest& prev_commit_hash, uint64_t epoch_id,
                     const std::vector<NodeId>& committee) {
    if (committee.empty()) throw std::invalid_argument("select_leader: empty committee");
    Hash64 h(0x1EADE2ull);
    h.mix(BytesView(prev_commit_hash.bytes.data(), prev_commit_hash.bytes.size()));
    h.mix(epoch_id);
    return committee[h.value() % committee.size()];
}

Digest ChallengeRecord::body_digest() const {
    return digest_cat({tokens_bytes(prompt), tokens_bytes(response), u64_bytes(timestamp_ms)});
}

Digest EpochPlan::digest() const {
    ByteWriter w;
    w.u64(epoch_id);
    for (const auto& [target, prompt] : challenges) {
        w.raw(target.view());
        w.u32(uint32_t(prompt.size()));
        for (TokenId t : prompt) w.u32(t);
    }
    return digest_of(w.bytes());
}

EpochPlan plan_epoch(uint64_t epoch_id, const std::vector<NodeId>& targets,
                     size_t prompts_per_node, const PromptSampler& sampler, Rng& rng) {
    EpochPlan plan;
    plan.epoch_id = epoch_id;
    std::set<TokenSeq> used;
    for (const auto& target : targets) {
        for (size_t i = 0; i < prompts_per_node; ++i) {
            TokenSeq prompt;
            int guard = 0;
            do {
                prompt = sampler(rng);
                if (++guard > 1000)
                    throw std::runtime_error("plan_epoch: sampler cannot produce distinct prompts");
            } while (!used.insert(prompt).second);
            plan.challenges.emplace_back(target, std::move(prompt));
        }
    }
    return plan;
}

namespace {

struct Proposal {
    EpochPlan claimed_plan;  // what the leader says it sent
    std::vector<ChallengeRecord> records;
    std::map<NodeId, double> credits;
    std::vector<NodeId> invalid_claims;
};

std::map<NodeId, double> score_records(const std::vector<ChallengeRecord>& records,
                                       const ProbOracle& oracle, double epsilon) {
    std::map<NodeId, std::pair<double, size_t>> acc;
    for (const auto& rec : records) {
        if (rec.response.empty()) continue;
        const double s = check_credibility(rec.prompt, rec.response, oracle, epsilon);
        auto& [sum, count] = acc[rec.target];
        sum += s;
        ++count;
    }
    std::map<NodeId, double> out;
    for (const auto& [node, sc] : acc) out[node] = sc.first / double(sc.second);
    return out;
}

}  // namespace

EpochOutcome run_epoch(const EpochState& epoch,
                       const std::map<NodeId, const ProbOracle*>& member_oracles,
                       const std::map<NodeId, Responder>& responders,
                       const EpochControls& controls, const EpochConfig& config,
                       const PromptSampler& member_prompt_sampler, Rng& rng,
                       std::map<NodeId, ReputationState>* reputations,
                       const ReputationParams& rep_params,
                       std::vector<ReputationLogEntry>* log) {
    EpochOutcome out;
    const size_t N = epoch.committee.size();
    const auto& mis = controls.leader;

    // --- leader phase: dispatch challenges through the overlay (targets see
    //     ordinary requests), collect signed responses, claim invalids
    Proposal prop;
    prop.claimed_plan = epoch.plan;
    auto sent = epoch.plan.challenges;
    if (mis.substitute_prompt && !sent.empty()) {
        sent[0].second.push_back(TokenId(0xDEAD));
        prop.claimed_plan.challenges = sent;  // leader presents the altered list
    }

    std::set<NodeId> claimed_invalid;
    uint64_t ts = epoch.start_ms + 1;
    for (const auto& [target, prompt] : sent) {
        if (mis.suppress && *mis.suppress == target) {
            claimed_invalid.insert(target);
            continue;
        }
        auto record = responders.at(target)(epoch.epoch_id, prompt, ts++);
        if (!record) {
            claimed_invalid.insert(target);
            continue;
        }
        prop.records.push_back(std::move(*record));
    }
    if (mis.tamper_response && !prop.records.empty() && !prop.records[0].response.empty()) {
        prop.records[0].response[0] ^= 1;  // signature no longer covers the body
    }
    prop.invalid_claims.assign(claimed_invalid.begin(), claimed_invalid.end());
    prop.credits = score_records(prop.records, *member_oracles.at(epoch.leader), config.epsilon);

    // --- member phase: integrity checks, independent rescoring, pre-vote
    std::map<NodeId, std::set<TokenSeq>> planned;  // committed plan lookup
    for (const auto& [t, p] : epoch.plan.challenges) planned[t].insert(p);

    std::string reason;
    size_t prevotes = 0;
    for (const auto& member : epoch.committee) {
        if (auto forced = controls.forced_votes.find(member);
            forced != controls.forced_votes.end()) {
            prevotes += forced->second;
            continue;
        }
        if (member == epoch.leader) {
            ++prevotes;  // the leader endorses its own proposal
            continue;
        }

        if (prop.claimed_plan.digest() != epoch.plan_hash) {
            reason = "plan integrity violation";
            continue;
        }
        bool ok = true;
        for (const auto& rec : prop.records) {
            if (!rec.signature.verify(rec.body_digest())) {
                reason = "response signature mismatch";
                ok = false;
                break;
            }
            if (rec.timestamp_ms < epoch.start_ms || rec.timestamp_ms >= epoch.end_ms) {
                reason = "timestamp outside epoch";
                ok = false;
                break;
            }
            auto it = planned.find(rec.target);
            if (it == planned.end() || !it->second.count(rec.prompt)) {
                // responses carry the original prompt, exposing substitutions
                reason = "challenge prompt deviates from the committed plan";
                ok = false;
                break;
            }
        }
        if (!ok) continue;

        const auto own = score_records(prop.records, *member_oracles.at(member), config.epsilon);
        for (const auto& [node, score] : prop.credits) {
            auto it = own.find(node);
            if (it == own.end() || std::abs(it->second - score) > config.score_tol) {
                reason = "score divergence";
                ok = false;
                break;
            }
        }
        if (ok) ++prevotes;
    }

    out.prevotes = prevotes;
    // two-phase: pre-commit only forms once a pre-vote quorum is seen
    out.precommits = commit_decision(prevotes, N) ? prevotes : 0;
    if (!commit_decision(out.precommits, N)) {
        out.abort_reason = reason.empty() ? "insufficient votes" : reason;
        return out;
    }
    out.committed = true;

    // --- invalid-claim handling: members issue their own distinct challenges
    std::map<NodeId, double> member_rescue_credit;
    for (const auto& target : prop.invalid_claims) {
        size_t invalid_reports = 1;  // the leader's claim
        size_t valid = 0;
        double score_sum = 0.0;
        for (const auto& member : epoch.committee) {
            if (member == epoch.leader) continue;
            TokenSeq prompt = member_prompt_sampler(rng);
            auto record = responders.at(target)(epoch.epoch_id, prompt, ts++);
            if (record && record->signature.verify(record->body_digest()) &&
                !record->response.empty()) {
                ++valid;
                score_sum +=
                    check_credibility(prompt, record->response,
                                      *member_oracles.at(member), config.epsilon);
            } else {
                ++invalid_reports;
            }
        }
        if (invalid_report_quorum(invalid_reports, N)) {
            out.reputation_reduced.push_back(target);
            prop.credits[target] = rep_params.tau * 0.5;  // synthetic abnormal credit
        } else if (valid * 3 > 2 * N) {
            // the target answered everyone else: the leader lied
            out.leader_flagged = true;
            prop.credits[target] = score_sum / double(valid);
        }
    }

    // --- commit reputation updates
    for (const auto& [node, credit] : prop.credits) {
        bool punished = false;
        double r_after = 0.0;
        if (reputations) {
            auto& state = (*reputations)[node];
            punished = update_reputation(state, credit, rep_params);
            r_after = state.r;
        }
        if (log)
            log->push_back(ReputationLogEntry{epoch.epoch_id, node, credit, r_after, punished,
                                              prevotes});
        out.credits[node] = credit;
    }

    ByteWriter commit;
    commit.raw(BytesView(epoch.prev_commit_hash.bytes.data(), epoch.prev_commit_hash.bytes.size()));
    commit.u64(epoch.epoch_id);
    for (const auto& [node, credit] : out.credits) {
        commit.raw(node.view());
        commit.f64(credit);
    }
    out.commit_hash = digest_of(commit.bytes());
    return out;
}

// ---------------------------------------------------------------- harness

VerificationNet::VerificationNet(VerificationNetConfig cfg, std::vector<TargetSpec> targets,
                                 uint64_t seed)
    : cfg_(std::move(cfg)),
      targets_(std::move(targets)),
      reference_(cfg_.model_seed, 0.0, cfg_.vocab),
      rng_(seed) {
    for (size_t i = 0; i < cfg_.committee_size; ++i)
        committee_.push_back(NodeId::from_index(0xC0000000ull + i));
    for (const auto& t : targets_)
        target_oracles_.emplace(t.node, MockOracle(cfg_.model_seed, t.noise, cfg_.vocab));
    prev_commit_ = digest_of(to_bytes("genesis"));
    sampler_ = [vocab = cfg_.vocab](Rng& r) {
        TokenSeq prompt(16);
        for (auto& t : prompt) t = TokenId(r.uniform(vocab));
        return prompt;
    };
}

NodeId VerificationNet::current_leader() const {
    return select_leader(prev_commit_, epoch_, committee_);
}

EpochOutcome VerificationNet::step(const EpochControls& controls) {
    const uint64_t id = epoch_++;

    std::vector<NodeId> target_ids;
    for (const auto& t : targets_) target_ids.push_back(t.node);

    EpochState st;
    st.epoch_id = id;
    st.leader = select_leader(prev_commit_, id, committee_);
    st.plan = plan_epoch(id, target_ids, cfg_.challenges_per_node, sampler_, rng_);
    st.plan_hash = st.plan.digest();
    st.prev_commit_hash = prev_commit_;
    st.committee = committee_;
    st.start_ms = id * cfg_.epoch_length_ms;
    st.end_ms = (id + 1) * cfg_.epoch_length_ms;

    std::map<NodeId, const ProbOracle*> member_oracles;
    for (const auto& m : committee_) member_oracles[m] = &reference_;

    std::map<NodeId, Responder> responders;
    for (const auto& t : targets_) {
        responders[t.node] = [this, node = t.node](uint64_t epoch_id, const TokenSeq& prompt,
                                                   uint64_t now_ms) -> std::optional<ChallengeRecord> {
            // per-challenge deterministic sampling randomness
            Hash64 h(0x7A26E7ull);
            h.mix(node.view());
            h.mix(epoch_id);
            for (TokenId t2 : prompt) h.mix(uint64_t(t2) + 1);
            Rng gen(h.value());
            ChallengeRecord rec;
            rec.epoch = epoch_id;
            rec.target = node;
            rec.prompt = prompt;
            rec.response = target_oracles_.at(node).generate(prompt, cfg_.epoch.response_len, gen);
            rec.timestamp_ms = now_ms;
            rec.signature = NodeSig::sign(node, rec.body_digest());
            return rec;
        };
    }

    auto outcome = run_epoch(st, member_oracles, responders, controls, cfg_.epoch, sampler_, rng_,
                             &reputations_, cfg_.reputation, &log_);
    if (outcome.committed) prev_commit_ = outcome.commit_hash;
    return outcome;
}

}  // namespace peerserve::verify
