// Acceptance run: one PASS/FAIL line per criterion, with the measured values.
// Exit status is 0 only when every selected criterion passes.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "oracles.hpp"
#include "vppbid/harness.hpp"

using namespace vppbid;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

struct Verdict {
    int id;
    std::string name;
    bool pass;
    std::string detail;
};

std::vector<Verdict> verdicts;
std::vector<std::string> notes;

void report(int id, std::string name, bool pass, std::string detail) {
    std::cerr << "criterion " << id << (pass ? " PASS " : " FAIL ") << detail << '\n';
    verdicts.push_back({id, std::move(name), pass, std::move(detail)});
}

void note(std::string s) {
    std::cerr << "info: " << s << '\n';
    notes.push_back(std::move(s));
}

std::string config_path(const std::string& name) { return std::string(VPPBID_CONFIG_DIR) + "/" + name; }

RunOptions run_options() {
    RunOptions o;
    o.threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    return o;
}

// --- per-run statistics -------------------------------------------------

double activation_rate(const RunMetrics& m, int first, int last) {
    long act = 0, steps = 0;
    for (const auto& e : m.episodes)
        if (e.episode >= first && e.episode < last) {
            act += e.activations;
            steps += e.steps;
        }
    return steps ? static_cast<double>(act) / static_cast<double>(steps) : 0.0;
}

struct EvalStats {
    double reward = 0.0, net = 0.0, activation = 0.0;
};

EvalStats eval_stats(const RunMetrics& m) {
    EvalStats s;
    int n = 0;
    long act = 0, steps = 0;
    for (const auto& e : m.episodes) {
        act += e.activations;
        steps += e.steps;
        if (e.aborted) continue;
        ++n;
        s.reward += e.reward;
        s.net += e.net_market_profit();
    }
    if (n) {
        s.reward /= n;
        s.net /= n;
    }
    s.activation = steps ? static_cast<double>(act) / static_cast<double>(steps) : 0.0;
    return s;
}

struct TrainedRun {
    RunMetrics train;
    RunMetrics eval;
    fs::path dir;
    double seconds = 0.0;
};

TrainedRun train_and_eval(const RunConfig& cfg, const fs::path& dir, const StepObserver& observer = {}) {
    const auto t0 = Clock::now();
    TrainedRun r;
    r.dir = dir;
    RunOptions opt = run_options();
    opt.observer = observer;
    const auto trained = train(cfg, dir / "train", opt);
    r.train = trained.metrics;
    r.eval = evaluate(cfg, trained.checkpoint, cfg.eval_episodes, dir / "eval", run_options());
    r.seconds = seconds_since(t0);
    std::cerr << "  " << cfg.name << " [" << dir.filename().string() << "] " << fmt("%.1f s", r.seconds) << '\n';
    return r;
}

const std::vector<std::string> kSeedSets{"s1", "s2", "s3", "s4", "s5"};

// --- criteria -------------------------------------------------------------

void power_flow_fidelity() {
    const auto net = load_network(oracle::data_path("ieee13.net"));
    std::mt19937_64 rng(1001);
    std::uniform_real_distribution<double> p(-600.0, 900.0), pf(-0.5, 0.5);
    int converged = 0, bad = 0;
    double worst = 0.0, slowest = 0.0, total = 0.0;
    for (int n = 0; n < 1000; ++n) {
        InjectionProfile inj(net.bus_count());
        for (std::size_t b = 1; b < net.bus_count(); ++b) {
            inj.p_kw[b] = p(rng);
            inj.q_kvar[b] = pf(rng) * std::abs(inj.p_kw[b]);
        }
        const auto t0 = Clock::now();
        const auto sol = solve_power_flow(net, inj);
        const double dt = seconds_since(t0);
        slowest = std::max(slowest, dt);
        total += dt;
        if (!sol.converged()) continue;
        ++converged;
        const double r = oracle::substitute(net, inj, sol).max();
        worst = std::max(worst, r);
        if (r > 1e-8) ++bad;
    }
    report(1, "power-flow fidelity", bad == 0 && converged > 0 && slowest < 5e-3,
           fmt("%d/1000 converged, max residual %.2e p.u. (<= 1e-8), slowest solve %.3f ms, mean %.3f ms (< 5 ms)",
               converged, worst, slowest * 1e3, total / 1000.0 * 1e3));
}

void market_oracle() {
    std::mt19937_64 rng(2002);
    std::uniform_int_distribution<int> price(0, 10), qty(0, 100);
    int mismatch = 0, slack = 0;
    const auto t0 = Clock::now();
    double solve_time = 0.0;
    for (int n = 0; n < 500; ++n) {
        const int ns = std::uniform_int_distribution<int>(1, 5)(rng);
        const int nd = std::uniform_int_distribution<int>(1, 6 - ns)(rng);
        std::vector<Bid> s, d;
        for (int k = 0; k < ns; ++k) s.push_back({1, Side::supply, double(price(rng)), double(qty(rng))});
        for (int k = 0; k < nd; ++k) d.push_back({2, Side::demand, double(price(rng)), double(qty(rng))});
        const auto c0 = Clock::now();
        const auto out = clear(s, d);
        solve_time += seconds_since(c0);
        const double opt = oracle::lp_optimum(s, d);
        if (out.welfare != opt) ++mismatch;
        bool ok = std::abs(oracle::dual_value(s, d, out.mcp) - opt) <= 1e-9 * std::max(1.0, opt);
        for (std::size_t k = 0; k < s.size(); ++k) {
            const double x = out.supply_cleared[k];
            ok = ok && x >= 0.0 && x <= s[k].quantity;
            if (s[k].price < out.mcp) ok = ok && x == s[k].quantity;
            if (s[k].price > out.mcp) ok = ok && x == 0.0;
        }
        for (std::size_t k = 0; k < d.size(); ++k) {
            const double y = out.demand_cleared[k];
            ok = ok && y >= 0.0 && y <= d[k].quantity;
            if (d[k].price > out.mcp) ok = ok && y == d[k].quantity;
            if (d[k].price < out.mcp) ok = ok && y == 0.0;
        }
        if (!ok) ++slack;
    }
    const double total = seconds_since(t0);
    report(2, "market oracle equivalence", mismatch == 0 && slack == 0 && solve_time < 1.0,
           fmt("500 instances: %d objective mismatches, %d complementary-slackness violations, clearing %.4f s "
               "(< 1 s; with the oracle %.2f s)",
               mismatch, slack, solve_time, total));
}

void opf_oracle() {
    std::mt19937_64 rng(3003);
    auto u = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
    int within = 0, both_infeasible = 0, off = 0;
    double worst = 0.0;
    double solve_time = 0.0;
    const auto t0 = Clock::now();
    for (int n = 0; n < 50; ++n) {
        // drawn in a fixed order (argument evaluation order is unspecified)
        const double s12 = u(150.0, 1000.0), v_min = u(0.9, 0.97), r12 = u(0.01, 0.06), x12 = u(0.02, 0.12);
        const double lp = u(100.0, 400.0), lq = u(0.0, 150.0), cost_b = u(4.1, 6.0), exch = u(0.0, 150.0);
        const auto t = oracle::toy(s12, v_min, r12, x12, lp, lq, cost_b, exch);
        AvailabilityDraw avail{std::vector<double>(3, 0.0), std::vector<double>(3, 0.0)};
        const auto c0 = Clock::now();
        const auto r = solve_opf(t.net, t.fleet, avail, 0, t.u);
        solve_time += seconds_since(c0);
        const double ref = oracle::grid_search(t);
        if (!std::isfinite(ref) && !r.feasible) {
            ++both_infeasible;
            continue;
        }
        const double rel = r.feasible && std::isfinite(ref) ? std::abs(r.generation_cost - ref) / std::abs(ref) : 1e300;
        worst = std::max(worst, rel);
        if (rel <= 0.01)
            ++within;
        else
            ++off;
    }
    const double total = seconds_since(t0);
    report(3, "OPF oracle bound", off == 0 && total < 60.0,
           fmt("50 instances: %d within 1%% (worst %.3g%%), %d infeasible for both, %d off; %.1f s total incl. "
               "grid search (solver %.3f s) (< 60 s)",
               within, 100.0 * worst, both_infeasible, off, total, solve_time));
}

struct ShieldAudit {
    long steps = 0;
    long violations = 0;
    std::string first;
};

void shield_soundness(const ShieldAudit& audit, int run_episodes) {
    std::mt19937_64 rng(4004);
    std::uniform_real_distribution<double> x(-3000.0, 3000.0), w(0.0, 2000.0), f(0.0, 1.0);
    const ShieldConfig cfg;
    int failed = 0;
    for (int n = 0; n < 10000; ++n) {
        const double lo = x(rng), hi = lo + w(rng), a = x(rng), b = x(rng);
        const double pa = project_bid(a, lo, hi, cfg).shielded_bid;
        const double pb = project_bid(b, lo, hi, cfg).shielded_bid;
        const double other = lo + (hi - lo) * f(rng);
        const bool ok = project_bid(pa, lo, hi, cfg).shielded_bid == pa && std::abs(pa - pb) <= std::abs(a - b) &&
                        std::abs(pa - a) <= std::abs(other - a) && pa >= lo && pa <= hi;
        if (!ok) ++failed;
    }
    report(4, "shield soundness", audit.violations == 0 && audit.steps > 0 && failed == 0,
           fmt("%ld/%ld shielded dispatches of a %d-episode sRL training run re-verified%s%s; projection properties "
               "failed on %d/10000 pairs",
               audit.steps - audit.violations, audit.steps, run_episodes, audit.first.empty() ? "" : ", first failure: ",
               audit.first.c_str(), failed));
}

void gradient_correctness() {
    std::mt19937_64 rng(5005);
    auto pick = [&](int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng); };
    double worst = 0.0;
    int checked = 0, skipped = 0;
    for (int n = 0; n < 100; ++n) {
        const int sd = pick(1, 5), layers = pick(1, 3), batch = pick(1, 8);
        std::vector<int> hidden;
        for (int l = 0; l < layers; ++l) hidden.push_back(pick(2, 6));
        std::vector<int> adims{sd}, cdims{sd + 2};
        for (int h : hidden) adims.push_back(h), cdims.push_back(h);
        adims.push_back(2);
        cdims.push_back(1);
        const std::uint64_t seed = rng();
        auto actor = oracle::random_mlp(adims, OutputActivation::sigmoid, seed, 0.8);
        auto critic = oracle::random_mlp(cdims, OutputActivation::identity, seed + 1, 0.8);
        const auto b = oracle::random_batch(sd, batch, seed + 2);
        const VectorXd y = VectorXd::NullaryExpr(batch, [&] { return std::normal_distribution<double>(0.0, 2.0)(rng); });

        MlpGrad gc;
        critic_loss(critic, b, y, &gc);
        const MatrixXd sa = stack_rows(b.s, b.a);
        worst = std::max(worst, oracle::worst_relative_error(
                                    critic, gc, [&] { return critic_loss(critic, b, y); }, 1e-5,
                                    [&] { return oracle::relu_pattern(critic, sa); }, &skipped));
        MlpGrad ga;
        policy_objective(actor, critic, b, &ga);
        worst = std::max(worst, oracle::worst_relative_error(
                                    actor, ga, [&] { return -policy_objective(actor, critic, b); }, 1e-5,
                                    [&] {
                                        auto p = oracle::relu_pattern(actor, b.s);
                                        const auto q = oracle::relu_pattern(critic, stack_rows(b.s, actor.forward(b.s)));
                                        p.insert(p.end(), q.begin(), q.end());
                                        return p;
                                    },
                                    &skipped));
        checked += static_cast<int>(actor.parameter_count() + critic.parameter_count());
    }
    report(5, "gradient correctness", worst <= 1e-4,
           fmt("100 random actor/critic parameterizations: max relative error %.2e (<= 1e-4) over %d parameters; "
               "%d whose +-h step crosses a rectifier kink not compared",
               worst, checked - skipped, skipped));
}

void noise_schedule() {
    const auto cfg = load_run_config(config_path("basecase-sRL.cfg"));
    const double s0 = exploration_sigma(0, cfg.hp), s1 = exploration_sigma(cfg.hp.m_tot, cfg.hp);
    report(6, "noise schedule", std::abs(s0 - 0.5) <= 1e-12 && std::abs(s1 - 0.1) <= 1e-12,
           fmt("sigma(0) = %.17g, sigma(%d) = %.17g (to 1e-12)", s0, cfg.hp.m_tot, s1));
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::string workdir = "acceptance_runs";
    std::vector<int> only;
    app.add_option("--workdir", workdir, "directory for training and evaluation output");
    app.add_option("--only", only, "run only these criteria (1-10)")->delimiter(',')->check(CLI::Range(1, 10));
    CLI11_PARSE(app, argc, argv);
    const std::set<int> selected = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}
                                                : std::set<int>(only.begin(), only.end());
    auto want = [&](int c) { return selected.count(c) > 0; };
    const fs::path work = fs::absolute(workdir);
    fs::create_directories(work);
    const auto t_start = Clock::now();

    try {
        if (want(1)) power_flow_fidelity();
        if (want(2)) market_oracle();
        if (want(3)) opf_oracle();
        if (want(5)) gradient_correctness();
        if (want(6)) noise_schedule();

        // Trained runs shared by criteria 4, 7, 8 and 10.
        std::map<std::string, TrainedRun> srl, srl_stddev;
        ShieldAudit audit;
        int audited_episodes = 0;
        const bool need_srl = want(4) || want(7) || want(8) || want(10);
        const auto t7 = Clock::now();
        if (need_srl) {
            for (const auto& s : kSeedSets) {
                const auto cfg = load_run_config(config_path("basecase-sRL.cfg"), {}, s);
                StepObserver observer;
                if (s == kSeedSets.front() && want(4)) {
                    audited_episodes = cfg.train_episodes;
                    observer = [&audit](const StepEvent& ev) {
                        ++audit.steps;
                        const auto why = oracle::dispatch_violation(ev.env.network(), ev.fleet_before.units,
                                                                    ev.availability, ev.record.hour,
                                                                    ev.env.last_dispatch());
                        if (!why.empty()) {
                            ++audit.violations;
                            if (audit.first.empty())
                                audit.first = fmt("episode %d hour %d: %s", ev.episode, ev.record.hour, why.c_str());
                        }
                    };
                }
                srl[s] = train_and_eval(cfg, work / "basecase-sRL" / s, observer);
                if (!want(7) && !want(8)) break;
            }
        }
        const double srl_seconds = seconds_since(t7);

        if (want(4)) shield_soundness(audit, audited_episodes);

        if (want(7)) {
            int ok = 0;
            std::string per_seed;
            for (const auto& s : kSeedSets) {
                const auto& r = srl.at(s);
                const int m = static_cast<int>(r.train.episodes.size());
                const double early = activation_rate(r.train, 0, 10), late = activation_rate(r.train, m - 10, m);
                const double ratio = early > 0.0 ? late / early : (late > 0.0 ? INFINITY : 0.0);
                const double test = eval_stats(r.eval).activation;
                const bool pass = ratio < 0.2 && test < 0.05;
                ok += pass;
                per_seed += fmt(" %s: %.3f->%.3f ratio %.2f test %.3f%s;", s.c_str(), early, late, ratio, test,
                                pass ? "" : " x");
            }
            report(7, "shield activation decays", ok >= 4 && srl_seconds < 1800.0,
                   fmt("%d/5 seeds meet late/early < 0.2 and test rate < 0.05 (need 4);", ok) + per_seed +
                       fmt(" %.0f s for 5 train+eval runs (< 1800 s)", srl_seconds));

            // Same runs with the noise parameter read as a standard deviation.
            std::string alt;
            int alt_ok = 0;
            for (const auto& s : kSeedSets) {
                const auto cfg =
                    load_run_config(config_path("basecase-sRL.cfg"), {"agent.noise_scale=stddev"}, s);
                const auto& r = srl_stddev[s] = train_and_eval(cfg, work / "basecase-sRL-stddev" / s);
                const int m = static_cast<int>(r.train.episodes.size());
                const double early = activation_rate(r.train, 0, 10), late = activation_rate(r.train, m - 10, m);
                const double test = eval_stats(r.eval).activation;
                alt_ok += early > 0.0 && late / early < 0.2 && test < 0.05;
                alt += fmt(" %s ratio %.2f test %.3f;", s.c_str(), early > 0.0 ? late / early : 0.0, test);
            }
            note(fmt("criterion 7 with noise as a standard deviation: %d/5 seeds pass;", alt_ok) + alt);
        }

        if (want(8)) {
            int ok = 0;
            std::string per_seed;
            for (const auto& s : kSeedSets) {
                const auto u = train_and_eval(load_run_config(config_path("basecase-uRL.cfg"), {}, s),
                                              work / "basecase-uRL" / s);
                const auto sh = train_and_eval(load_run_config(config_path("basecase-shRL.cfg"), {}, s),
                                               work / "basecase-shRL" / s);
                const auto es = eval_stats(srl.at(s).eval), eu = eval_stats(u.eval), eh = eval_stats(sh.eval);
                const double gap = std::abs(es.reward - eh.reward) / std::abs(eh.reward);
                const bool pass = eu.net < es.net && gap <= 0.10;
                ok += pass;
                per_seed += fmt(" %s: net uRL %.0f vs sRL %.0f, reward sRL %.0f vs shRL %.0f (%.1f%%)%s;", s.c_str(),
                                eu.net, es.net, es.reward, eh.reward, 100.0 * gap, pass ? "" : " x");
            }
            report(8, "variant ordering", ok >= 4,
                   fmt("%d/5 seeds with uRL net < sRL net and sRL reward within 10%% of shRL (need 4);", ok) +
                       per_seed);

            if (!srl_stddev.empty()) {
                int alt_ok = 0;
                std::string alt;
                for (const auto& s : kSeedSets) {
                    const std::vector<std::string> sd{"agent.noise_scale=stddev"};
                    const auto u = train_and_eval(load_run_config(config_path("basecase-uRL.cfg"), sd, s),
                                                  work / "basecase-uRL-stddev" / s);
                    const auto sh = train_and_eval(load_run_config(config_path("basecase-shRL.cfg"), sd, s),
                                                   work / "basecase-shRL-stddev" / s);
                    const auto es = eval_stats(srl_stddev.at(s).eval), eu = eval_stats(u.eval), eh = eval_stats(sh.eval);
                    const double gap = std::abs(es.reward - eh.reward) / std::abs(eh.reward);
                    alt_ok += eu.net < es.net && gap <= 0.10;
                    alt += fmt(" %s net uRL %.0f sRL %.0f, reward gap %.1f%%;", s.c_str(), eu.net, es.net, 100.0 * gap);
                }
                note(fmt("criterion 8 with noise as a standard deviation: %d/5 seeds pass;", alt_ok) + alt);
            }
        }

        if (want(9)) {
            const auto cfg = load_run_config(config_path("pinned22-sRL.cfg"));
            const auto r = train_and_eval(cfg, work / "pinned22-sRL");
            const auto taker = run_baseline(cfg, Policy::price_taker, cfg.eval_episodes,
                                            work / "pinned22-sRL" / "baseline-price-taker", run_options());
            auto hour22 = [](const RunMetrics& m) {
                int n = 0, raised = 0, out = 0;
                double mcp = 0.0, absent = 0.0;
                for (const auto& row : m.steps)
                    if (row.rec.hour == 22) {
                        ++n;
                        raised += row.rec.mcp > row.rec.mcp_absent;
                        out += std::abs(row.rec.cleared_kw) <= 1e-6;
                        mcp += row.rec.mcp;
                        absent += row.rec.mcp_absent;
                    }
                struct {
                    int n, raised, out;
                    double mcp, absent;
                } s{n, raised, out, n ? mcp / n : 0.0, n ? absent / n : 0.0};
                return s;
            };
            const auto a = hour22(r.eval), p = hour22(taker);
            const double raised = a.n ? double(a.raised) / a.n : 0.0, out = a.n ? double(a.out) / a.n : 1.0;
            report(9, "price-maker mechanism", raised >= 0.5 && out <= 0.2,
                   fmt("hour 22 over %d evaluation days: MCP above the agent-absent price in %.1f%% (need >= 50%%), "
                       "not cleared in %.1f%% (need <= 20%%); mean MCP %.3f vs agent-absent %.3f EUR/kWh",
                       a.n, 100.0 * raised, 100.0 * out, a.mcp, a.absent));
            note(fmt("criterion 9 price-taker baseline at hour 22: mean MCP %.3f (agent %.3f, absent %.3f), MCP above "
                     "agent-absent in %d/%d days, not cleared in %d/%d",
                     p.mcp, a.mcp, p.absent, p.raised, p.n, p.out, p.n));
        }

        if (want(10)) {
            const auto cfg = load_run_config(config_path("basecase-sRL.cfg"), {}, kSeedSets.front());
            const fs::path a = work / "basecase-sRL" / kSeedSets.front() / "train";
            const fs::path b = work / "determinism" / "train";
            if (!fs::exists(a / "steps.csv")) train(cfg, a, run_options());
            train(cfg, b, run_options());
            bool same = true;
            std::string which;
            for (const char* f : {"steps.csv", "episodes.csv"}) {
                const bool eq = slurp(a / f) == slurp(b / f) && !slurp(a / f).empty();
                same = same && eq;
                which += fmt(" %s %s;", f, eq ? "identical" : "DIFFERENT");
            }
            report(10, "determinism", same, "two training runs with identical config and seeds:" + which);
        }
    } catch (const std::exception& e) {
        std::cerr << "acceptance run failed: " << e.what() << '\n';
        return 1;
    }

    std::sort(verdicts.begin(), verdicts.end(), [](const Verdict& x, const Verdict& y) { return x.id < y.id; });
    std::ostringstream out;
    int failed = 0;
    for (const auto& v : verdicts) {
        out << (v.pass ? "PASS" : "FAIL") << "  " << v.id << ". " << v.name << ": " << v.detail << '\n';
        failed += !v.pass;
    }
    for (const auto& n : notes) out << "INFO  " << n << '\n';
    out << fmt("%zu criteria, %d failed, %.0f s\n", verdicts.size(), failed, seconds_since(t_start));
    std::cout << out.str();
    std::ofstream(work / "acceptance.txt") << out.str();
    return failed ? 1 : 0;
}
