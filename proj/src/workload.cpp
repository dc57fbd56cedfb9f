#include "peerserve/workload.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "peerserve/hash.hpp"

namespace peerserve::sim {

WorkloadSpec mixed_workload(size_t count, double mean_interarrival_ms) {
    WorkloadSpec spec;
    // tool-use: long shared instructions, short unique tail, short outputs
    spec.components.push_back(
        {"tooluse", 64, 1.1, 1600, 0.75, 100, 1, 2000.0});
    // coding: minimal prefix overlap, long outputs
    spec.components.push_back(
        {"coding", 512, 0.8, 1100, 0.2, 400, 1, 2000.0});
    // long-document QA: a few big documents as prefixes
    spec.components.push_back(
        {"longdoc", 16, 0.6, 3000, 0.9, 100, 1, 2000.0});
    spec.weights = {3.0, 6.0, 1.0};
    spec.count = count;
    spec.mean_interarrival_ms = mean_interarrival_ms;
    return spec;
}

ZipfSampler::ZipfSampler(size_t pool, double exponent) {
    if (pool == 0) throw std::invalid_argument("zipf: empty pool");
    if (exponent <= 0.0) throw std::invalid_argument("zipf: exponent must be positive");
    cdf_.resize(pool);
    double acc = 0.0;
    for (size_t r = 0; r < pool; ++r) {
        acc += std::pow(double(r + 1), -exponent);
        cdf_[r] = acc;
    }
    for (auto& v : cdf_) v /= acc;
}

size_t ZipfSampler::sample(Rng& rng) const {
    const double u = rng.real();
    return size_t(std::lower_bound(cdf_.begin(), cdf_.end(), u) - cdf_.begin());
}

WorkloadGen::WorkloadGen(WorkloadSpec spec, uint64_t seed) : spec_(std::move(spec)), seed_(seed) {
    if (spec_.components.empty()) throw std::invalid_argument("workload: no components");
    if (spec_.weights.size() != spec_.components.size())
        throw std::invalid_argument("workload: weights/components mismatch");
    for (const auto& c : spec_.components) zipf_.emplace_back(c.prefix_pool, c.zipf_exponent);
    double acc = 0.0;
    for (double w : spec_.weights) {
        if (w < 0.0) throw std::invalid_argument("workload: negative weight");
        acc += w;
        weight_cdf_.push_back(acc);
    }
    if (acc <= 0.0) throw std::invalid_argument("workload: zero total weight");
    for (auto& v : weight_cdf_) v /= acc;
}

TokenSeq WorkloadGen::prefix_tokens(size_t component, size_t rank) const {
    const auto& c = spec_.components[component];
    const uint32_t len = uint32_t(std::llround(c.prefix_share * double(c.prompt_tokens)));
    TokenSeq out(len);
    Hash64 h(seed_ ^ 0xF00D);
    h.mix(component).mix(rank);
    Rng gen(h.value());
    for (auto& t : out) t = TokenId(gen.uniform(1u << 30));
    return out;
}

TokenSeq WorkloadGen::build_prompt(size_t component, Rng& rng) {
    const auto& c = spec_.components[component];
    TokenSeq prompt;
    if (c.prefix_share > 0.0) {
        const size_t rank = zipf_[component].sample(rng);
        prompt = prefix_tokens(component, rank);
    }
    // suffix tokens live in a disjoint id range; the first one is globally
    // unique so suffix-only prompts are prefix-disjoint from token zero
    const uint64_t tag = suffix_counter_++;
    prompt.push_back(TokenId(0x40000000u | uint32_t(tag & 0x3FFFFFFF)));
    while (prompt.size() < c.prompt_tokens)
        prompt.push_back(TokenId(0x40000000u | uint32_t(rng.uniform(1u << 30))));
    return prompt;
}

GenRequest WorkloadGen::next(Rng& rng) {
    if (exhausted()) throw std::runtime_error("workload: stream exhausted");
    const double u = rng.real();
    const size_t comp =
        size_t(std::lower_bound(weight_cdf_.begin(), weight_cdf_.end(), u) - weight_cdf_.begin());
    const auto& c = spec_.components[comp];

    GenRequest req;
    req.id = emitted_++;
    clock_ms_ += rng.exponential(spec_.mean_interarrival_ms);
    req.arrival_ms = clock_ms_;
    req.prompt = build_prompt(comp, rng);
    req.output_tokens = c.output_tokens;
    req.component = comp;
    req.session_id = 0x100000 + req.id;
    req.session_turns = c.session_turns;
    req.think_time_ms = c.think_time_ms;
    return req;
}

TokenSeq WorkloadGen::sample_prompt(Rng& rng) {
    const double u = rng.real();
    const size_t comp =
        size_t(std::lower_bound(weight_cdf_.begin(), weight_cdf_.end(), u) - weight_cdf_.begin());
    return build_prompt(comp, rng);
}

}  // namespace peerserve::sim
