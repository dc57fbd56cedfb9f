#pragma once

#include <string>
#include <vector>

#include "peerserve/hr_tree.hpp"
#include "peerserve/rng.hpp"

namespace peerserve::sim {

using hrtree::TokenId;
using hrtree::TokenSeq;

/**
 * One synthetic workload family: a Zipf-sampled pool of shared prefixes plus
 * a unique per-request suffix. prefix_share is the fraction of prompt tokens
 * drawn from the shared prefix (0 disables sharing entirely).
 */
struct WorkloadComponent {
    std::string name = "default";
    size_t prefix_pool = 128;
    double zipf_exponent = 1.1;
    uint32_t prompt_tokens = 1024;
    double prefix_share = 0.5;
    uint32_t output_tokens = 100;
    uint32_t session_turns = 1;
    double think_time_ms = 2000.0;
};

struct WorkloadSpec {
    std::vector<WorkloadComponent> components;  // sampled by weight per request
    std::vector<double> weights;                // e.g. {3, 6, 1}
    double mean_interarrival_ms = 50.0;
    size_t count = 10'000;
};

/** The standard three-family mix at ratio 3:6:1. */
WorkloadSpec mixed_workload(size_t count, double mean_interarrival_ms);

struct GenRequest {
    uint64_t id = 0;
    double arrival_ms = 0.0;
    TokenSeq prompt;
    uint32_t output_tokens = 0;
    size_t component = 0;
    uint64_t session_id = 0;
    uint32_t session_turns = 1;   // total turns for this session
    double think_time_ms = 0.0;
};

/** O(log pool) Zipf rank sampler over ranks 1..pool with p(r) proportional to r^-s. */
class ZipfSampler {
public:
    ZipfSampler(size_t pool, double exponent);
    size_t sample(Rng& rng) const;  // returns rank in [0, pool)

private:
    std::vector<double> cdf_;
};

class WorkloadGen {
public:
    WorkloadGen(WorkloadSpec spec, uint64_t seed);

    bool exhausted() const { return emitted_ >= spec_.count; }
    GenRequest next(Rng& rng);

    /** A prompt statistically identical to request prompts (for challenges). */
    TokenSeq sample_prompt(Rng& rng);

    /** The shared prefix token sequence of one component/rank. */
    TokenSeq prefix_tokens(size_t component, size_t rank) const;
    const WorkloadSpec& spec() const { return spec_; }

private:
    TokenSeq build_prompt(size_t component, Rng& rng);

    WorkloadSpec spec_;
    uint64_t seed_;
    std::vector<ZipfSampler> zipf_;
    std::vector<double> weight_cdf_;
    double clock_ms_ = 0.0;
    uint64_t emitted_ = 0;
    uint64_t suffix_counter_ = 0;
};

}  // namespace peerserve::sim
