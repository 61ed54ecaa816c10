// Command line front end: train, eval, report, baseline.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "vppbid/harness.hpp"

namespace fs = std::filesystem;
using namespace vppbid;

namespace {

struct Common {
    std::string config;
    std::vector<std::string> overrides;
    std::string out;
    bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c, bool config_required = true) {
    auto* opt = cmd->add_option("--config", c.config, "run configuration file")->check(CLI::ExistingFile);
    if (config_required) opt->required();
    cmd->add_option("--set", c.overrides, "override a configuration key (key=value), repeatable");
    cmd->add_option("--out", c.out, "results directory (default: <output_dir>/<command>)");
    cmd->add_flag("-q,--quiet", c.quiet, "no progress output");
}

fs::path out_dir(const Common& c, const RunConfig& cfg, const std::string& leaf) {
    return c.out.empty() ? cfg.output_dir / leaf : fs::path(c.out);
}

RunOptions options(const Common& c, int threads = 1) {
    RunOptions o;
    o.log = c.quiet ? nullptr : &std::cerr;
    o.threads = threads;
    return o;
}

void print_summary(const RunMetrics& m, const fs::path& dir) {
    double reward = 0.0, net = 0.0;
    long act = 0, steps = 0;
    int ok = 0;
    for (const auto& e : m.episodes) {
        act += e.activations;
        steps += e.steps;
        if (e.aborted) continue;
        ++ok;
        reward += e.reward;
        net += e.net_market_profit();
    }
    std::cout << "results: " << dir.string() << '\n'
              << "episodes: " << m.episodes.size() << " (" << m.aborted() << " aborted)\n";
    if (ok > 0)
        std::cout << "mean daily reward [EUR/day]: " << format_double(reward / ok) << '\n'
                  << "mean net market profit [EUR/day]: " << format_double(net / ok) << '\n';
    if (steps > 0) std::cout << "shield activation rate: " << format_double(static_cast<double>(act) / steps) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Safe reinforcement learning for strategic VPP bidding"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    Common train_c, eval_c, base_c;
    std::string seed_set, checkpoint, mode, report_in, report_out;
    int eval_episodes = 0, base_episodes = 0, threads = 1;

    auto* train_cmd = app.add_subcommand("train", "train an agent");
    add_common(train_cmd, train_c);
    train_cmd->add_option("--seed-set", seed_set, "named seed set from the configuration");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint without exploration noise");
    add_common(eval_cmd, eval_c);
    eval_cmd->add_option("--seed-set", seed_set, "named seed set for the evaluation days");
    eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file (omit for an untrained agent)");
    eval_cmd->add_option("--episodes", eval_episodes, "evaluation days (default: episodes.eval)")->check(CLI::PositiveNumber);
    eval_cmd->add_option("--threads", threads, "evaluate days on this many threads")->check(CLI::PositiveNumber);

    auto* report_cmd = app.add_subcommand("report", "summarize run directories");
    report_cmd->add_option("--in", report_in, "directory searched for run results")->required();
    report_cmd->add_option("--out", report_out, "report directory (default: <in>/report)");

    auto* base_cmd = app.add_subcommand("baseline", "scripted bidding through the same pipeline");
    add_common(base_cmd, base_c);
    base_cmd->add_option("--mode", mode, "price-taker or no-vpp")
        ->required()
        ->check(CLI::IsMember({"price-taker", "no-vpp"}));
    base_cmd->add_option("--seed-set", seed_set, "named seed set for the evaluation days");
    base_cmd->add_option("--episodes", base_episodes, "evaluation days (default: episodes.eval)")
        ->check(CLI::PositiveNumber);
    base_cmd->add_option("--threads", threads, "evaluate days on this many threads")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        const auto t0 = std::chrono::steady_clock::now();
        if (*train_cmd) {
            const auto cfg = load_run_config(train_c.config, train_c.overrides, seed_set);
            const auto dir = out_dir(train_c, cfg, "train");
            const auto res = train(cfg, dir, options(train_c));
            print_summary(res.metrics, dir);
            std::cout << "checkpoint: " << res.checkpoint.string() << '\n';
        } else if (*eval_cmd) {
            const auto cfg = load_run_config(eval_c.config, eval_c.overrides, seed_set);
            const auto dir = out_dir(eval_c, cfg, "eval");
            const auto m = evaluate(cfg, checkpoint, eval_episodes > 0 ? eval_episodes : cfg.eval_episodes, dir,
                                    options(eval_c, threads));
            print_summary(m, dir);
        } else if (*base_cmd) {
            const auto cfg = load_run_config(base_c.config, base_c.overrides, seed_set);
            const auto dir = out_dir(base_c, cfg, "baseline-" + mode);
            const auto m = run_baseline(cfg, parse_policy(mode), base_episodes > 0 ? base_episodes : cfg.eval_episodes,
                                        dir, options(base_c, threads));
            print_summary(m, dir);
        } else if (*report_cmd) {
            const fs::path out = report_out.empty() ? fs::path(report_in) / "report" : fs::path(report_out);
            const auto paths = write_report(report_in, out);
            for (const auto& p : {paths.variants, paths.forecast, paths.activation, paths.mcp}) std::cout << p.string() << '\n';
        }
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cerr << "elapsed " << s << " s\n";
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code_for(e);
    }
}
