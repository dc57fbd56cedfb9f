#pragma once

#include <memory>
#include <string>

#include "peerserve/verification.hpp"

namespace peerserve::verify {

struct RemoteOracleConfig {
    std::string host = "localhost";
    int port = 8080;
    std::string path = "/completion";
    std::string model_tag = "llm";
    size_t vocab = 256;
    size_t top_logprobs = 40;
    double epsilon = 1e-9;  // floor for tokens missing from the top-k
    int retries = 2;
    int timeout_s = 10;
};

/**
 * Adapter from a completion-with-logprobs HTTP endpoint to ProbOracle.
 * POSTs {model, prompt (token ids), max_tokens: 1, logprobs: k} and maps the
 * returned top-k (token, logprob) pairs onto a distribution; tokens absent
 * from the top-k get the epsilon floor.
 */
class RemoteOracle : public ProbOracle {
public:
    explicit RemoteOracle(RemoteOracleConfig cfg);
    ~RemoteOracle() override;

    size_t vocab_size() const override { return cfg_.vocab; }
    TokenDistribution next_token_dist(const TokenSeq& context) const override;
    double token_prob(const TokenSeq& context, TokenId token) const override;

private:
    std::string fetch(const TokenSeq& context) const;

    RemoteOracleConfig cfg_;
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace peerserve::verify
