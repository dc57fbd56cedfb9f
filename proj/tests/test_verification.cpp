#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <cmath>
#include <thread>

#include <httplib.h>

#include "peerserve/remote_oracle.hpp"
#include "peerserve/verification.hpp"

using namespace peerserve;
using namespace peerserve::verify;

namespace {

/** Fixed distribution oracle for exact-value checks. */
class FixedOracle : public ProbOracle {
public:
    explicit FixedOracle(std::vector<double> p) : p_(std::move(p)) {}
    size_t vocab_size() const override { return p_.size(); }
    TokenDistribution next_token_dist(const TokenSeq&) const override { return {p_}; }

private:
    std::vector<double> p_;
};

/** Per-position probabilities for the first tokens, independent of context. */
class ScriptedOracle : public ProbOracle {
public:
    explicit ScriptedOracle(std::vector<double> script) : script_(std::move(script)) {}
    size_t vocab_size() const override { return 16; }
    TokenDistribution next_token_dist(const TokenSeq& context) const override {
        const size_t pos = context.size();
        TokenDistribution d;
        d.p.assign(16, 0.0);
        const double p = pos < script_.size() ? script_[pos] : 0.5;
        d.p[0] = p;
        d.p[1] = 1.0 - p;
        return d;
    }

private:
    std::vector<double> script_;
};

}  // namespace

TEST_CASE("token distribution validation") {
    TokenDistribution ok{{0.25, 0.25, 0.25, 0.25}};
    CHECK_NOTHROW(ok.validate());
    TokenDistribution tiny{{1.0}};
    CHECK_THROWS(tiny.validate());
    TokenDistribution skew{{0.7, 0.7}};
    CHECK_THROWS(skew.validate());
}

TEST_CASE("mock oracle family") {
    MockOracle base(42, 0.0, 256);

    SUBCASE("deterministic peaked distribution") {
        TokenSeq ctx{1, 2, 3};
        const auto d = base.next_token_dist(ctx);
        d.validate();
        const auto peak = base.peak_token(ctx);
        CHECK(d.p[peak] == doctest::Approx(1.0));
        CHECK(base.next_token_dist(ctx).p == d.p);  // same context, same answer
    }

    SUBCASE("greedy output of the base oracle scores its own maxima") {
        TokenSeq prompt{7, 8, 9};
        const auto out = base.generate_greedy(prompt, 16);
        TokenSeq ctx = prompt;
        for (auto t : out) {
            CHECK(base.token_prob(ctx, t) == doctest::Approx(1.0));
            ctx.push_back(t);
        }
        // sampling from the noise-free oracle is the greedy sequence
        Rng rng(1);
        CHECK(base.generate(prompt, 16, rng) == out);
    }

    SUBCASE("full noise is uniform everywhere") {
        MockOracle uniform(42, 1.0, 64);
        const auto d = uniform.next_token_dist({5});
        d.validate();
        for (double p : d.p) CHECK(p == doctest::Approx(1.0 / 64.0));
    }

    SUBCASE("mixture weights interpolate") {
        MockOracle half(42, 0.5, 256);
        TokenSeq ctx{1};
        const auto peak = half.peak_token(ctx);
        CHECK(half.token_prob(ctx, peak) == doctest::Approx(0.5 + 0.5 / 256.0));
        CHECK(half.token_prob(ctx, (peak + 1) % 256) == doctest::Approx(0.5 / 256.0));
    }
}

TEST_CASE("check_credibility: exact values") {
    TokenSeq prompt{0};

    SUBCASE("perfect agreement scores 1.0") {
        MockOracle base(7, 0.0, 256);
        const auto out = base.generate_greedy(prompt, 8);
        CHECK(check_credibility(prompt, out, base, 1e-9) == doctest::Approx(1.0));
    }

    SUBCASE("uniform over V=4 scores 1/V") {
        FixedOracle uniform({0.25, 0.25, 0.25, 0.25});
        TokenSeq response{0, 1, 2, 3, 0};
        CHECK(check_credibility(prompt, response, uniform, 1e-9) == doctest::Approx(0.25));
    }

    SUBCASE("p = (0.5, 0.25) gives 1/PPL ~ 0.3536") {
        ScriptedOracle scripted({1.0, 0.5, 0.25});  // position 0 is the prompt token
        TokenSeq two_prompt{};                       // empty prompt: positions 0,1 score
        TokenSeq response{0, 0};
        const double score = check_credibility(prompt, response, ScriptedOracle({0.5, 0.25}),
                                               1e-9);
        CHECK(score == doctest::Approx(1.0 / (2.0 * std::sqrt(2.0))).epsilon(1e-9));
        CHECK(score == doctest::Approx(0.35355).epsilon(1e-4));
        (void)two_prompt;
        (void)scripted;
    }

    SUBCASE("zero probabilities floor at epsilon; score stays in (0,1]") {
        FixedOracle point({1.0, 0.0});
        TokenSeq response{1, 1};  // both tokens impossible under the oracle
        const double eps = 1e-9;
        const double score = check_credibility(prompt, response, point, eps);
        CHECK(score == doctest::Approx(eps));
        CHECK(score > 0.0);
        CHECK(score <= 1.0);
    }

    SUBCASE("empty response rejected") {
        FixedOracle uniform({0.5, 0.5});
        CHECK_THROWS_WITH(check_credibility(prompt, {}, uniform, 1e-9), "nothing to score");
    }

    SUBCASE("score is permutation sensitive for a non-uniform oracle") {
        MockOracle base(19, 0.0, 256);
        TokenSeq p{3, 4};
        auto out = base.generate_greedy(p, 12);
        const double good = check_credibility(p, out, base, 1e-9);
        std::swap(out[0], out[6]);
        std::swap(out[2], out[9]);
        const double shuffled = check_credibility(p, out, base, 1e-9);
        CHECK(shuffled < good);
    }

    SUBCASE("degraded outputs rank by noise under the reference verifier") {
        MockOracle reference(77, 0.0, 256);
        MockOracle m02(77, 0.2, 256);
        MockOracle m05(77, 0.5, 256);
        TokenSeq p{9, 9, 9};
        const size_t len = 24;

        // exact expectation of the score under the mixture: each position is
        // the peak with probability q = (1-noise) + noise/V, else eps-floored
        auto expected_score = [&](double noise) {
            const double V = 256.0, eps = 1e-9;
            const double q = (1.0 - noise) + noise / V;
            double mean = 0.0;
            const size_t n = len;
            for (size_t m = 0; m <= n; ++m) {
                // probability of m peak hits
                double c = 1.0;
                for (size_t j = 0; j < m; ++j) c = c * double(n - j) / double(j + 1);
                const double pm = c * std::pow(q, double(m)) * std::pow(1 - q, double(n - m));
                mean += pm * std::exp((double(n - m) / double(n)) * std::log(eps));
            }
            return mean;
        };
        CHECK(expected_score(0.2) > expected_score(0.5));

        // empirical check over seeded generations
        auto empirical = [&](const MockOracle& gen_oracle) {
            double sum = 0.0;
            for (uint64_t s = 0; s < 200; ++s) {
                Rng rng(1000 + s);
                const auto out = gen_oracle.generate(p, len, rng);
                sum += check_credibility(p, out, reference, 1e-9);
            }
            return sum / 200.0;
        };
        const double e02 = empirical(m02), e05 = empirical(m05);
        CHECK(e02 > e05);
        CHECK(e02 == doctest::Approx(expected_score(0.2)).epsilon(0.5));
        CHECK(e05 == doctest::Approx(expected_score(0.5)).epsilon(0.5));
    }
}

TEST_CASE("reputation updates") {
    ReputationParams params;  // alpha .4, beta .6, W 5, gamma 1/5, floor .4
    params.tau = 0.6;         // classify credits below 0.6 as abnormal here

    SUBCASE("fixpoint at R=1 with perfect credits") {
        ReputationState st;
        st.r = 1.0;
        CHECK_FALSE(update_reputation(st, 1.0, params));
        CHECK(st.r == doctest::Approx(1.0));
    }

    SUBCASE("hand-computed punishment case: coefficient 6/12 at W=5, c=1") {
        ReputationState st;
        st.r = 0.8;
        const bool punished = update_reputation(st, 0.5, params);  // 0.5 < tau -> c=1
        CHECK(punished);
        CHECK(st.r == doctest::Approx(0.57).epsilon(1e-12));  // 0.4*0.8 + 0.5*0.5
    }

    SUBCASE("no punishment branch is the plain moving average") {
        ReputationParams strict = params;
        strict.gamma = 0.5;  // c=1 of W=5 no longer triggers
        ReputationState st;
        st.r = 0.8;
        CHECK_FALSE(update_reputation(st, 0.5, strict));
        CHECK(st.r == doctest::Approx(0.4 * 0.8 + 0.6 * 0.5));
    }

    SUBCASE("constant credits converge geometrically") {
        ReputationState st;
        st.r = 0.1;
        const double c = 0.9;
        for (int t = 1; t <= 20; ++t) {
            update_reputation(st, c, params);
            CHECK(std::abs(st.r - c) == doctest::Approx(std::pow(0.4, t) * 0.8).epsilon(1e-9));
        }
    }

    SUBCASE("untrusted marking is sticky below the floor") {
        ReputationState st;
        st.r = 0.5;
        update_reputation(st, 0.05, params);
        CHECK(st.r < 0.4);
        CHECK(st.untrusted);
        for (int i = 0; i < 50; ++i) update_reputation(st, 1.0, params);
        CHECK(st.untrusted);  // once marked, stays marked
    }

    SUBCASE("punished coefficient never exceeds beta when triggered") {
        for (double gamma : {1.0, 1.0 / 3.0, 1.0 / 5.0}) {
            for (size_t c = 1; c <= 5; ++c) {
                const double trigger = double(c) / 5.0;
                if (trigger < gamma - 1e-12) continue;
                const double coeff = 6.0 / (5.0 + double(c) / gamma + 2.0);
                CHECK(coeff <= 0.6 + 1e-12);
                CHECK(0.4 + coeff <= 1.0 + 1e-12);
            }
        }
    }

    SUBCASE("reputation stays in [0,1] under random credit storms") {
        Rng rng(8);
        for (int seq = 0; seq < 200; ++seq) {
            ReputationParams p2;
            p2.tau = 0.3;
            p2.gamma = (seq % 3 == 0) ? 1.0 : (seq % 3 == 1 ? 1.0 / 3.0 : 0.2);
            ReputationState st;
            st.r = rng.real();
            for (int t = 0; t < 500; ++t) {
                update_reputation(st, std::max(1e-6, rng.real()), p2);
                CHECK(st.r >= 0.0);
                CHECK(st.r <= 1.0);
            }
        }
    }

    SUBCASE("out-of-range credit rejected") {
        ReputationState st;
        CHECK_THROWS(update_reputation(st, 0.0, params));
        CHECK_THROWS(update_reputation(st, 1.5, params));
    }
}

TEST_CASE("leader selection") {
    std::vector<NodeId> committee;
    for (int i = 0; i < 7; ++i) committee.push_back(NodeId::from_index(i));

    SUBCASE("deterministic") {
        const Digest d = digest_of(to_bytes("commit-1"));
        CHECK(select_leader(d, 5, committee) == select_leader(d, 5, committee));
        CHECK(select_leader(d, 5, {committee[3]}) == committee[3]);
    }

    SUBCASE("uniform over the committee by chi-square at p > 0.01") {
        std::map<NodeId, size_t> counts;
        Rng rng(14);
        const size_t trials = 100000;
        for (size_t t = 0; t < trials; ++t) {
            Digest d;
            for (auto& b : d.bytes) b = rng.byte();
            counts[select_leader(d, t, committee)] += 1;
        }
        const double expected = double(trials) / 7.0;
        double chi2 = 0.0;
        for (const auto& m : committee) {
            const double diff = double(counts[m]) - expected;
            chi2 += diff * diff / expected;
        }
        // chi-square critical value, 6 dof, p = 0.01
        CHECK(chi2 < 16.81);
    }
}

namespace {

struct EpochFixture {
    VerificationNetConfig cfg;
    std::vector<TargetSpec> targets;

    EpochFixture() {
        cfg.committee_size = 4;
        cfg.challenges_per_node = 8;
        targets.push_back({NodeId::from_index(0xA1), 0.0});
        targets.push_back({NodeId::from_index(0xA2), 0.0});
    }
};

}  // namespace

TEST_CASE("epoch planning") {
    Rng rng(2);
    std::vector<NodeId> targets{NodeId::from_index(1), NodeId::from_index(2),
                                NodeId::from_index(3), NodeId::from_index(4),
                                NodeId::from_index(5), NodeId::from_index(6),
                                NodeId::from_index(7), NodeId::from_index(8)};
    PromptSampler sampler = [](Rng& r) {
        TokenSeq p(12);
        for (auto& t : p) t = TokenId(r.uniform(1000));
        return p;
    };

    SUBCASE("prompts pairwise distinct across all targets") {
        auto plan = plan_epoch(3, targets, 2, sampler, rng);
        CHECK(plan.challenges.size() == 16);
        std::set<TokenSeq> uniq;
        for (const auto& [t, p] : plan.challenges) uniq.insert(p);
        CHECK(uniq.size() == 16);
    }

    SUBCASE("plan hash commits the content") {
        auto plan = plan_epoch(3, targets, 2, sampler, rng);
        const Digest h = plan.digest();
        auto tampered = plan;
        tampered.challenges[5].second[0] += 1;
        CHECK(h == plan.digest());
        CHECK_FALSE(h == tampered.digest());
    }

    SUBCASE("challenge prompts are indistinguishable from user prompts") {
        // same generator for both populations; a length-threshold classifier
        // fitted on a labeled sample must sit at chance on held-out data
        Rng gen(5);
        PromptSampler workload_like = [](Rng& r) {
            TokenSeq p(8 + r.uniform(16));
            for (auto& t : p) t = TokenId(r.uniform(500));
            return p;
        };
        std::vector<size_t> challenge_lens, user_lens;
        for (int i = 0; i < 2000; ++i) challenge_lens.push_back(workload_like(gen).size());
        for (int i = 0; i < 2000; ++i) user_lens.push_back(workload_like(gen).size());
        // best threshold on the first halves
        double best_acc = 0.0;
        size_t best_thr = 0;
        for (size_t thr = 8; thr <= 24; ++thr) {
            size_t correct = 0;
            for (size_t i = 0; i < 1000; ++i) {
                correct += challenge_lens[i] >= thr;
                correct += user_lens[i] < thr;
            }
            const double acc = double(correct) / 2000.0;
            if (acc > best_acc) {
                best_acc = acc;
                best_thr = thr;
            }
        }
        size_t correct = 0;
        for (size_t i = 1000; i < 2000; ++i) {
            correct += challenge_lens[i] >= best_thr;
            correct += user_lens[i] < best_thr;
        }
        const double holdout_acc = double(correct) / 2000.0;
        CHECK(holdout_acc == doctest::Approx(0.5).epsilon(0.1));
    }
}

TEST_CASE("epoch protocol: honest run and misbehavior scenarios") {
    EpochFixture fx;

    SUBCASE("all honest, identical oracles -> unanimous commit") {
        VerificationNet net(fx.cfg, fx.targets, 11);
        auto out = net.step();
        REQUIRE(out.committed);
        CHECK(out.prevotes == 4);
        CHECK(out.credits.size() == 2);
        for (const auto& [node, c] : out.credits) CHECK(c == doctest::Approx(1.0));
        CHECK(net.reputations().at(fx.targets[0].node).r == doctest::Approx(0.8));
    }

    SUBCASE("prompt substitution aborts on plan integrity") {
        VerificationNet net(fx.cfg, fx.targets, 11);
        EpochControls controls;
        controls.leader.substitute_prompt = true;
        auto out = net.step(controls);
        CHECK_FALSE(out.committed);
        CHECK(out.abort_reason == "plan integrity violation");
        CHECK(net.reputations().empty());  // no updates on abort

        // a new leader takes the next epoch; the system recovers
        auto next = net.step();
        CHECK(next.committed);
    }

    SUBCASE("response tampering aborts on signature mismatch") {
        VerificationNet net(fx.cfg, fx.targets, 11);
        EpochControls controls;
        controls.leader.tamper_response = true;
        auto out = net.step(controls);
        CHECK_FALSE(out.committed);
        CHECK(out.abort_reason == "response signature mismatch");
    }

    SUBCASE("suppression claim is outvoted; the leader is flagged") {
        VerificationNet net(fx.cfg, fx.targets, 11);
        EpochControls controls;
        controls.leader.suppress = fx.targets[0].node;
        auto out = net.step(controls);
        REQUIRE(out.committed);
        CHECK(out.leader_flagged);
        CHECK(out.reputation_reduced.empty());
        // the suppressed-but-honest target keeps a healthy credit
        CHECK(out.credits.at(fx.targets[0].node) > 0.9);
    }

    SUBCASE("a truly unresponsive node is reduced on member quorum") {
        VerificationNetConfig cfg = fx.cfg;
        // make the second target unresponsive by dropping its responder:
        // modelled via suppress + the target really not answering members is
        // covered in run_epoch unit form below
        (void)cfg;
    }

    SUBCASE("one Byzantine member cannot block an honest quorum (exhaustive f=1)") {
        for (size_t byz = 0; byz < 4; ++byz) {
            for (bool vote : {false, true}) {
                VerificationNet net(fx.cfg, fx.targets, 11);
                EpochControls controls;
                controls.forced_votes[net.committee()[byz]] = vote;
                auto out = net.step(controls);
                CHECK(out.committed);  // 3 honest votes >= quorum(4) = 3
                CHECK(out.prevotes >= 3);
            }
        }
    }

    SUBCASE("two forced abstentions stall the epoch") {
        VerificationNet net(fx.cfg, fx.targets, 11);
        EpochControls controls;
        controls.forced_votes[net.committee()[0]] = false;
        controls.forced_votes[net.committee()[1]] = false;
        auto out = net.step(controls);
        CHECK_FALSE(out.committed);
    }
}

TEST_CASE("unresponsive target: invalid-report quorum reduces reputation") {
    // direct run_epoch drive with a dead responder
    const size_t N = 4;
    std::vector<NodeId> committee;
    for (size_t i = 0; i < N; ++i) committee.push_back(NodeId::from_index(0xC0 + i));
    const NodeId dead_node = NodeId::from_index(0xD0);

    MockOracle reference(3, 0.0, 256);
    std::map<NodeId, const ProbOracle*> oracles;
    for (const auto& m : committee) oracles[m] = &reference;

    std::map<NodeId, Responder> responders;
    responders[dead_node] = [](uint64_t, const TokenSeq&, uint64_t) {
        return std::optional<ChallengeRecord>{};  // never answers anyone
    };

    Rng rng(4);
    PromptSampler sampler = [](Rng& r) {
        TokenSeq p(8);
        for (auto& t : p) t = TokenId(r.uniform(100));
        return p;
    };

    EpochState st;
    st.epoch_id = 0;
    st.committee = committee;
    st.leader = committee[0];
    st.plan = plan_epoch(0, {dead_node}, 4, sampler, rng);
    st.plan_hash = st.plan.digest();
    st.end_ms = 60000;

    std::map<NodeId, ReputationState> reps;
    std::vector<ReputationLogEntry> log;
    ReputationParams params;
    auto out = run_epoch(st, oracles, responders, {}, EpochConfig{}, sampler, rng, &reps, params,
                         &log);
    REQUIRE(out.committed);
    REQUIRE(out.reputation_reduced.size() == 1);
    CHECK(out.reputation_reduced[0] == dead_node);
    CHECK(reps.at(dead_node).r < 0.5);  // synthetic abnormal credit applied
    REQUIRE(log.size() == 1);
    CHECK(log[0].punished);
}

TEST_CASE("invalid-report quorum arithmetic") {
    // strictly more than one third of the committee
    CHECK_FALSE(invalid_report_quorum(2, 7));
    CHECK(invalid_report_quorum(3, 7));
    CHECK_FALSE(invalid_report_quorum(1, 4));
    CHECK(invalid_report_quorum(2, 4));
}

TEST_CASE("commit decision model-checked over all vote subsets at N=4") {
    CHECK(quorum(4) == 3);
    for (unsigned mask = 0; mask < 16; ++mask) {
        const size_t votes = __builtin_popcount(mask);
        CHECK(commit_decision(votes, 4) == (votes >= 3));
    }
    CHECK(quorum(7) == 5);
}

TEST_CASE("remote oracle adapter against a stub server") {
    httplib::Server server;
    std::atomic<int> hits{0};
    server.Post("/completion", [&](const httplib::Request& req, httplib::Response& res) {
        ++hits;
        // fixed top-2 logprobs regardless of context
        res.set_content(R"({"top_logprobs":[{"token":3,"logprob":-0.223143551},)"
                        R"({"token":7,"logprob":-1.609437912}]})",
                        "application/json");
        (void)req;
    });
    int port = 0;
    std::thread srv([&] {
        port = server.bind_to_any_port("127.0.0.1");
        server.listen_after_bind();
    });
    while (!server.is_running()) std::this_thread::sleep_for(std::chrono::milliseconds(5));

    RemoteOracleConfig cfg;
    cfg.host = "127.0.0.1";
    cfg.port = port;
    cfg.vocab = 16;
    cfg.epsilon = 1e-9;
    RemoteOracle oracle(cfg);

    SUBCASE("distribution matches the stub's logprobs; missing tokens get the floor") {
        const auto d = oracle.next_token_dist({1, 2});
        CHECK(d.p[3] == doctest::Approx(std::exp(-0.223143551)));  // = 0.8
        CHECK(d.p[7] == doctest::Approx(std::exp(-1.609437912)));  // = 0.2
        CHECK(d.p[0] == doctest::Approx(1e-9));
        CHECK(oracle.token_prob({1, 2}, 3) == doctest::Approx(0.8).epsilon(1e-6));
        CHECK(oracle.token_prob({1, 2}, 5) == doctest::Approx(1e-9));
    }

    SUBCASE("credibility works through the adapter") {
        const double score = check_credibility({9}, {3, 3}, oracle, 1e-9);
        CHECK(score == doctest::Approx(0.8).epsilon(1e-6));
    }

    server.stop();
    srv.join();

    SUBCASE("unreachable endpoint fails after retries") {
        RemoteOracleConfig dead;
        dead.host = "127.0.0.1";
        dead.port = 1;  // nothing listens there
        dead.retries = 1;
        dead.timeout_s = 1;
        RemoteOracle gone(dead);
        CHECK_THROWS_WITH(gone.next_token_dist({1}), "oracle unavailable");
    }
}

TEST_CASE("remote oracle rejects malformed payloads") {
    httplib::Server server;
    server.Post("/completion", [&](const httplib::Request&, httplib::Response& res) {
        res.set_content("{\"nope\": []}", "application/json");
    });
    int port = 0;
    std::thread srv([&] {
        port = server.bind_to_any_port("127.0.0.1");
        server.listen_after_bind();
    });
    while (!server.is_running()) std::this_thread::sleep_for(std::chrono::milliseconds(5));

    RemoteOracleConfig cfg;
    cfg.host = "127.0.0.1";
    cfg.port = port;
    RemoteOracle oracle(cfg);
    CHECK_THROWS_WITH(oracle.next_token_dist({1}), "oracle decode error");

    server.stop();
    srv.join();
}
