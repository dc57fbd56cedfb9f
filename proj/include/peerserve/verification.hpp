#pragma once

#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "peerserve/hr_tree.hpp"
#include "peerserve/node.hpp"
#include "peerserve/rng.hpp"

namespace peerserve::verify {

using hrtree::TokenId;
using hrtree::TokenSeq;

struct TokenDistribution {
    std::vector<double> p;

    size_t vocab() const { return p.size(); }
    void validate() const;  // entries in [0,1], sum 1 +- 1e-9, vocab >= 2
};

/** Deterministic next-token probability source; same context, same answer. */
class ProbOracle {
public:
    virtual ~ProbOracle() = default;
    virtual size_t vocab_size() const = 0;
    virtual TokenDistribution next_token_dist(const TokenSeq& context) const = 0;
    virtual double token_prob(const TokenSeq& context, TokenId token) const;
    TokenId greedy_token(const TokenSeq& context) const;
};

/**
 * Desk-scale model family. The base oracle (noise 0) concentrates all mass
 * on a context-seeded peak token; degraded variants mix in uniform noise:
 * (1-noise) * base + noise * uniform.
 */
class MockOracle : public ProbOracle {
public:
    MockOracle(uint64_t seed, double noise, size_t vocab = 256);

    size_t vocab_size() const override { return vocab_; }
    TokenDistribution next_token_dist(const TokenSeq& context) const override;
    double token_prob(const TokenSeq& context, TokenId token) const override;

    TokenId peak_token(const TokenSeq& context) const;
    /** Sample one token from the mixture. */
    TokenId sample_token(const TokenSeq& context, Rng& rng) const;
    /** Autoregressive sampling; at noise 0 this equals greedy generation. */
    TokenSeq generate(const TokenSeq& prompt, size_t len, Rng& rng) const;
    TokenSeq generate_greedy(const TokenSeq& prompt, size_t len) const;

    double noise() const { return noise_; }

private:
    uint64_t seed_;
    double noise_;
    size_t vocab_;
};

/**
 * Normalized perplexity 1/PPL of the response under the oracle,
 * PPL = exp(-(1/n) sum log p_i); zero probabilities are floored at epsilon.
 * Always in (0, 1]. Throws "nothing to score" on an empty response.
 */
double check_credibility(const TokenSeq& prompt, const TokenSeq& response,
                         const ProbOracle& oracle, double epsilon);

// ---------------------------------------------------------------- reputation

struct ReputationParams {
    double alpha = 0.4;
    double beta = 0.6;
    size_t window = 5;        // W
    double tau = 0.15;        // abnormal-credit threshold
    double gamma = 1.0 / 5.0; // punishment trigger on c/W
    double trust_floor = 0.4;
};

struct ReputationState {
    double r = 0.5;
    std::deque<double> window;  // last W credits
    bool untrusted = false;

    size_t abnormal_count(double tau) const;
};

/**
 * Moving-average update R = a*R + b*C; when the abnormal fraction of the
 * window reaches gamma the reward coefficient shrinks to (W+1)/(W+c/g+2).
 * Returns true when the punished branch fired.
 */
bool update_reputation(ReputationState& state, double credit, const ReputationParams& params);

// ---------------------------------------------------------------- epochs

/** Verifiable leader choice: hash(prev commit | epoch) mod committee size. */
NodeId select_leader(const Digest& prev_commit_hash, uint64_t epoch_id,
                     const std::vector<NodeId>& committee);

/** BFT quorum: at least floor(2N/3)+1 matching votes. */
inline size_t quorum(size_t committee_size) { return 2 * committee_size / 3 + 1; }
inline bool commit_decision(size_t votes, size_t committee_size) {
    return votes >= quorum(committee_size);
}

/** Reduce reputation only when strictly more than 1/3 of members report. */
inline bool invalid_report_quorum(size_t distinct_reports, size_t committee_size) {
    return distinct_reports * 3 > committee_size;
}

struct ChallengeRecord {
    uint64_t epoch = 0;
    NodeId target;
    TokenSeq prompt;
    TokenSeq response;
    uint64_t timestamp_ms = 0;
    NodeSig signature;

    Digest body_digest() const;  // over (prompt, response, timestamp)
};

using PromptSampler = std::function<TokenSeq(Rng&)>;

struct EpochPlan {
    uint64_t epoch_id = 0;
    std::vector<std::pair<NodeId, TokenSeq>> challenges;  // all prompts distinct

    Digest digest() const;
};

/** Prompts drawn from the user workload generator; uniqueness enforced. */
EpochPlan plan_epoch(uint64_t epoch_id, const std::vector<NodeId>& targets,
                     size_t prompts_per_node, const PromptSampler& sampler, Rng& rng);

struct EpochState {
    uint64_t epoch_id = 0;
    NodeId leader;
    EpochPlan plan;
    Digest plan_hash;
    Digest prev_commit_hash;
    std::vector<NodeId> committee;
    uint64_t start_ms = 0;
    uint64_t end_ms = 0;
};

/** What a model node does with a challenge; nullopt models no response. */
using Responder = std::function<std::optional<ChallengeRecord>(uint64_t epoch,
                                                               const TokenSeq& prompt,
                                                               uint64_t now_ms)>;

struct LeaderMisbehavior {
    bool substitute_prompt = false;  // swap the first planned prompt
    bool tamper_response = false;    // alter the first response body
    std::optional<NodeId> suppress;  // drop responses, claim "invalid response"
};

struct EpochControls {
    LeaderMisbehavior leader;
    // Byzantine members vote as forced instead of validating honestly
    std::map<NodeId, bool> forced_votes;
};

struct EpochConfig {
    size_t response_len = 32;
    double epsilon = 1e-9;
    double score_tol = 0.05;
};

struct ReputationLogEntry {
    uint64_t epoch = 0;
    NodeId node;
    double credit = 0.0;
    double reputation = 0.0;
    bool punished = false;
    size_t vote_count = 0;
};

struct EpochOutcome {
    bool committed = false;
    std::string abort_reason;
    size_t prevotes = 0;
    size_t precommits = 0;
    bool leader_flagged = false;
    std::vector<NodeId> reputation_reduced;  // via invalid-report quorum
    std::map<NodeId, double> credits;        // committed per-target credits
    Digest commit_hash;
};

/**
 * One verification epoch: leader dispatch, score proposal, member integrity
 * checks and independent rescoring, two-phase voting, misbehavior handling.
 * Member oracles map each committee member to its local reference model.
 */
EpochOutcome run_epoch(const EpochState& epoch,
                       const std::map<NodeId, const ProbOracle*>& member_oracles,
                       const std::map<NodeId, Responder>& responders,
                       const EpochControls& controls, const EpochConfig& config,
                       const PromptSampler& member_prompt_sampler, Rng& rng,
                       std::map<NodeId, ReputationState>* reputations,
                       const ReputationParams& rep_params,
                       std::vector<ReputationLogEntry>* log);

// ---------------------------------------------------------------- harness

struct TargetSpec {
    NodeId node;
    double noise = 0.0;  // oracle degradation
};

struct VerificationNetConfig {
    size_t committee_size = 4;  // 3f+1
    size_t challenges_per_node = 50;
    uint64_t epoch_length_ms = 60'000;
    uint64_t model_seed = 1;  // the reference model identity
    size_t vocab = 256;
    ReputationParams reputation;
    EpochConfig epoch;
};

/**
 * Self-contained committee-plus-targets harness used by the demo CLI and the
 * experiments: honest members share the reference oracle, targets respond by
 * sampling from their (possibly degraded) oracle.
 */
class VerificationNet {
public:
    VerificationNet(VerificationNetConfig cfg, std::vector<TargetSpec> targets, uint64_t seed);

    /** Runs one epoch with optional leader/member misbehavior. */
    EpochOutcome step(const EpochControls& controls = {});

    const std::map<NodeId, ReputationState>& reputations() const { return reputations_; }
    const std::vector<ReputationLogEntry>& log() const { return log_; }
    const std::vector<NodeId>& committee() const { return committee_; }
    NodeId current_leader() const;
    uint64_t epoch() const { return epoch_; }
    void set_prompt_sampler(PromptSampler s) { sampler_ = std::move(s); }

private:
    VerificationNetConfig cfg_;
    std::vector<NodeId> committee_;
    std::vector<TargetSpec> targets_;
    std::map<NodeId, MockOracle> target_oracles_;
    MockOracle reference_;
    std::map<NodeId, ReputationState> reputations_;
    std::vector<ReputationLogEntry> log_;
    PromptSampler sampler_;
    Digest prev_commit_;
    uint64_t epoch_ = 0;
    Rng rng_;
};

}  // namespace peerserve::verify
