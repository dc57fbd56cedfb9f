#include "peerserve/remote_oracle.hpp"

#include <httplib.h>

#include <cmath>
#include <json.hpp>

namespace peerserve::verify {

using nlohmann::json;

struct RemoteOracle::Impl {
    mutable httplib::Client client;
    explicit Impl(const RemoteOracleConfig& cfg) : client(cfg.host, cfg.port) {
        client.set_connection_timeout(cfg.timeout_s);
        client.set_read_timeout(cfg.timeout_s);
    }
};

RemoteOracle::RemoteOracle(RemoteOracleConfig cfg)
    : cfg_(std::move(cfg)), impl_(std::make_unique<Impl>(cfg_)) {}

RemoteOracle::~RemoteOracle() = default;

std::string RemoteOracle::fetch(const TokenSeq& context) const {
    json body;
    body["model"] = cfg_.model_tag;
    body["prompt"] = context;
    body["max_tokens"] = 1;
    body["logprobs"] = cfg_.top_logprobs;
    const std::string payload = body.dump();

    for (int attempt = 0; attempt <= cfg_.retries; ++attempt) {
        auto res = impl_->client.Post(cfg_.path, payload, "application/json");
        if (res && res->status == 200) return res->body;
    }
    throw std::runtime_error("oracle unavailable");
}

TokenDistribution RemoteOracle::next_token_dist(const TokenSeq& context) const {
    const std::string body = fetch(context);
    TokenDistribution dist;
    dist.p.assign(cfg_.vocab, cfg_.epsilon);
    try {
        const json j = json::parse(body);
        for (const auto& entry : j.at("top_logprobs")) {
            const TokenId token = entry.at("token").get<TokenId>();
            const double logprob = entry.at("logprob").get<double>();
            if (token < dist.p.size()) dist.p[token] = std::exp(logprob);
        }
    } catch (const json::exception&) {
        throw std::runtime_error("oracle decode error");
    }
    return dist;
}

double RemoteOracle::token_prob(const TokenSeq& context, TokenId token) const {
    const auto dist = next_token_dist(context);
    if (token >= dist.p.size()) return cfg_.epsilon;
    return dist.p[token];
}

}  // namespace peerserve::verify
