#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "peerserve/overlay.hpp"
#include "peerserve/sida.hpp"
#include "peerserve/sim.hpp"
#include "peerserve/verification.hpp"

using namespace peerserve;

namespace {

int cmd_sim(const std::string& scenario_path, uint64_t seed, const std::string& out_dir,
            bool dump_defaults) {
    if (dump_defaults) {
        std::cout << sim::scenario_defaults_json() << "\n";
        return 0;
    }
    sim::ScenarioConfig cfg;
    if (!scenario_path.empty()) {
        std::ifstream in(scenario_path);
        if (!in) {
            std::cerr << "cannot open scenario file: " << scenario_path << "\n";
            return 1;
        }
        std::stringstream ss;
        ss << in.rdbuf();
        cfg = sim::scenario_from_json(ss.str());
    } else {
        cfg = sim::scenario_from_json(sim::scenario_defaults_json());
    }
    if (seed != 0) cfg.seed = seed;

    auto report = sim::run_scenario(cfg);
    if (!out_dir.empty()) sim::export_metrics(report, out_dir);

    std::printf("generated      %zu\n", report.generated);
    std::printf("completed      %zu\n", report.completed);
    std::printf("rejected       %zu\n", report.rejected);
    std::printf("undelivered    %zu\n", report.undelivered);
    std::printf("avg latency    %.2f ms\n", report.avg_latency_ms);
    std::printf("p99 latency    %.2f ms\n", report.p99_latency_ms);
    std::printf("avg ttft       %.2f ms\n", report.avg_ttft_ms);
    std::printf("cache hit rate %.4f\n", report.cache_hit_rate);
    std::printf("delivery rate  %.4f\n", report.delivery_rate);
    std::printf("delta sync     %llu bytes\n", (unsigned long long)report.delta_sync_bytes);
    if (!out_dir.empty()) std::printf("wrote metrics to %s\n", out_dir.c_str());
    return 0;
}

int cmd_entropy(size_t nodes, double frac_malicious, size_t trials, size_t paths, size_t path_len,
                uint64_t seed) {
    Rng rng(seed);
    const double h = overlay::estimate_anonymity(nodes, frac_malicious, paths, path_len, trials, rng);
    std::printf("nodes=%zu f=%.4f paths=%zu l=%zu trials=%zu\n", nodes, frac_malicious, paths,
                path_len, trials);
    std::printf("normalized entropy %.4f\n", h);
    return 0;
}

int cmd_survival(unsigned n, unsigned k, unsigned l, double f, size_t trials, uint64_t seed) {
    const double analytic = overlay::path_success_probability(n, k, l, f);
    Rng rng(seed);
    const double mc = overlay::monte_carlo_delivery(n, k, l, f, trials, rng);
    std::printf("n=%u k=%u l=%u f=%.4f\n", n, k, l, f);
    std::printf("analytic     %.6f\n", analytic);
    std::printf("monte carlo  %.6f  (%zu trials)\n", mc, trials);
    return 0;
}

int cmd_verify_demo(const std::string& noise_csv, size_t epochs, double gamma, uint64_t seed) {
    verify::VerificationNetConfig cfg;
    cfg.reputation.gamma = gamma;

    std::vector<verify::TargetSpec> targets;
    targets.push_back({NodeId::from_index(0xA000), 0.0});  // reference-faithful node
    std::stringstream ss(noise_csv);
    std::string item;
    size_t idx = 1;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        targets.push_back({NodeId::from_index(0xA000 + idx), std::stod(item)});
        ++idx;
    }

    verify::VerificationNet net(cfg, targets, seed);
    std::printf("epoch");
    for (size_t t = 0; t < targets.size(); ++t)
        std::printf("  R(noise=%.2f)", targets[t].noise);
    std::printf("\n");
    for (size_t e = 0; e < epochs; ++e) {
        auto outcome = net.step();
        std::printf("%5zu", e);
        for (const auto& t : targets) {
            auto it = net.reputations().find(t.node);
            std::printf("  %13.4f", it == net.reputations().end() ? 0.5 : it->second.r);
        }
        std::printf("%s\n", outcome.committed ? "" : "  [aborted]");
    }
    for (const auto& t : targets) {
        const auto& st = net.reputations().at(t.node);
        std::printf("noise=%.2f final R=%.4f untrusted=%s\n", t.noise, st.r,
                    st.untrusted ? "yes" : "no");
    }
    return 0;
}

int cmd_crypto_selftest() {
    Rng rng(0xC0FFEE);
    size_t checks = 0;
    for (int n = 1; n <= 6; ++n) {
        for (int k = 1; k <= n; ++k) {
            Bytes msg = rng.bytes(1 + rng.uniform(4096));
            sida::SessionId sid{};
            auto cloves = sida::make_cloves(msg, {uint8_t(n), uint8_t(k)}, sid, rng);
            std::vector<sida::Clove> subset(cloves.begin(), cloves.begin() + k);
            if (sida::recover_message(subset) != msg) {
                std::printf("FAIL (n=%d k=%d)\n", n, k);
                return 1;
            }
            auto decoded = sida::decode_clove(sida::encode_clove(cloves[0]));
            if (!(decoded == cloves[0])) {
                std::printf("FAIL codec (n=%d k=%d)\n", n, k);
                return 1;
            }
            ++checks;
        }
    }
    std::printf("crypto selftest OK (%zu parameter sets)\n", checks);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"decentralized LLM-serving overlay simulator"};
    app.require_subcommand(1);

    // sim
    std::string scenario_path, out_dir;
    uint64_t seed = 0;
    bool dump_defaults = false;
    auto* sim_cmd = app.add_subcommand("sim", "run a scenario");
    sim_cmd->add_option("--scenario", scenario_path, "scenario JSON file");
    sim_cmd->add_option("--seed", seed, "override the scenario seed");
    sim_cmd->add_option("--out", out_dir, "output directory for metrics files");
    sim_cmd->add_flag("--dump-defaults", dump_defaults, "print the default scenario and exit");

    // entropy
    size_t nodes = 10000, trials = 2000, paths = 4, path_len = 3;
    double frac_malicious = 0.05;
    uint64_t eseed = 7;
    auto* ent_cmd = app.add_subcommand("entropy", "anonymity entropy estimate");
    ent_cmd->add_option("--nodes", nodes, "network size");
    ent_cmd->add_option("--frac-malicious", frac_malicious, "fraction of malicious users");
    ent_cmd->add_option("--trials", trials, "Monte Carlo trials");
    ent_cmd->add_option("--paths", paths, "number of anonymous paths");
    ent_cmd->add_option("--path-len", path_len, "relays per path");
    ent_cmd->add_option("--seed", eseed, "rng seed");

    // survival
    unsigned sn = 4, sk = 3, sl = 3;
    double sf = 0.03;
    size_t strials = 100000;
    uint64_t sseed = 11;
    auto* sur_cmd = app.add_subcommand("survival", "delivery probability, analytic + Monte Carlo");
    sur_cmd->add_option("--n", sn, "clove count");
    sur_cmd->add_option("--k", sk, "recovery threshold");
    sur_cmd->add_option("--l", sl, "relays per path");
    sur_cmd->add_option("--f", sf, "per-node failure rate");
    sur_cmd->add_option("--trials", strials, "Monte Carlo trials");
    sur_cmd->add_option("--seed", sseed, "rng seed");

    // verify-demo
    std::string noise = "0.5,0.8";
    size_t epochs = 35;
    double gamma = 0.2;
    uint64_t vseed = 3;
    auto* ver_cmd = app.add_subcommand("verify-demo", "reputation trajectories for degraded nodes");
    ver_cmd->add_option("--noise", noise, "comma-separated degradation levels");
    ver_cmd->add_option("--epochs", epochs, "verification epochs to run");
    ver_cmd->add_option("--gamma", gamma, "punishment trigger threshold");
    ver_cmd->add_option("--seed", vseed, "rng seed");

    auto* selftest_cmd = app.add_subcommand("crypto-selftest", "quick S-IDA and codec check");

    CLI11_PARSE(app, argc, argv);

    try {
        if (sim_cmd->parsed()) return cmd_sim(scenario_path, seed, out_dir, dump_defaults);
        if (ent_cmd->parsed()) return cmd_entropy(nodes, frac_malicious, trials, paths, path_len, eseed);
        if (sur_cmd->parsed()) return cmd_survival(sn, sk, sl, sf, strials, sseed);
        if (ver_cmd->parsed()) return cmd_verify_demo(noise, epochs, gamma, vseed);
        if (selftest_cmd->parsed()) return cmd_crypto_selftest();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
