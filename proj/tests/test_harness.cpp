#include <catch_amalgamated.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "vppbid/harness.hpp"

using namespace vppbid;
namespace fs = std::filesystem;
using Catch::Approx;

namespace {

fs::path scratch_dir(const std::string& name) {
    const auto d = fs::temp_directory_path() / ("vppbid_harness_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

/// A small, fast configuration written next to the test outputs.
fs::path write_config(const fs::path& dir, const std::string& extra = "") {
    const auto path = dir / "run.cfg";
    std::ofstream out(path);
    out << "name = tiny\n"
        << "network = " << oracle::data_path("ieee13.net") << '\n'
        << "ders = " << oracle::data_path("ders.txt") << '\n'
        << "rivals = " << oracle::data_path("rivals.txt") << '\n'
        << "episodes.train = 12\n"
        << "episodes.eval = 4\n"
        << "agent.hidden_width = 16\n"
        << "agent.warmup_episodes = 10\n"
        << "agent.reward_scale = 0.001\n"
        << extra << "\n[seed_sets]\n"
        << "alt 1 2 3 4 5\n";
    return path;
}

RunOptions quiet() {
    RunOptions o;
    return o;
}

}  // namespace

TEST_CASE("configuration keys, paths and seed sets", "[harness][config]") {
    const auto dir = scratch_dir("config");
    const auto cfg = load_run_config(write_config(dir, "variant = shRL\nforecast = woFC\nshield.epsilon = 2.5"));
    CHECK(cfg.name == "tiny");
    CHECK(cfg.env.variant == Variant::shRL);
    CHECK(cfg.env.forecast == ForecastMode::without_forecast);
    CHECK(cfg.env.shield.epsilon == 2.5);
    CHECK(cfg.hp.hidden_width == 16);
    CHECK(cfg.hp.m_tot == 12);
    CHECK(cfg.seeds.noise == SeedSet{}.noise);
    CHECK(cfg.output_dir == fs::path("runs") / "tiny");

    const auto alt = load_run_config(dir / "run.cfg", {}, "alt");
    CHECK(alt.seeds.noise == 1);
    CHECK(alt.seeds.replay == 5);
    CHECK_THROWS_WITH(load_run_config(dir / "run.cfg", {}, "nope"), Catch::Matchers::ContainsSubstring("unknown seed set"));

    const auto over = load_run_config(dir / "run.cfg", {"variant=uRL", "episodes.train = 3"});
    CHECK(over.env.variant == Variant::uRL);
    CHECK(over.hp.m_tot == 3);

    // every key is echoed with its resolved value
    const auto echo = describe(cfg);
    CHECK(echo.size() == detail::config_keys().size());
    bool found = false;
    for (const auto& [k, v] : echo)
        if (k == "shield.epsilon") found = v == "2.5";
    CHECK(found);
}

TEST_CASE("relative paths resolve against the config file", "[harness][config]") {
    const auto dir = scratch_dir("relative");
    fs::create_directories(dir / "d");
    for (const char* f : {"ieee13.net", "ders.txt", "rivals.txt"}) fs::copy_file(oracle::data_path(f), dir / "d" / f);
    fs::create_directories(dir / "c");
    std::ofstream(dir / "c" / "x.cfg") << "network = ../d/ieee13.net\nders = ../d/ders.txt\nrivals = ../d/rivals.txt\n"
                                          "output_dir = out\n";
    const auto cfg = load_run_config(dir / "c" / "x.cfg");
    CHECK(cfg.network == (dir / "d" / "ieee13.net").lexically_normal());
    CHECK(cfg.output_dir == (dir / "c" / "out").lexically_normal());
}

TEST_CASE("configuration errors", "[harness][config][error]") {
    const auto dir = scratch_dir("config_errors");
    CHECK_THROWS_WITH(load_run_config(write_config(dir, "learning_rate = 1")),
                      Catch::Matchers::ContainsSubstring("unknown key 'learning_rate'"));
    CHECK_THROWS_AS(load_run_config(write_config(dir, "variant = RL")), ConfigError);
    CHECK_THROWS_AS(load_run_config(write_config(dir, "episodes.train = 0")), ConfigError);
    CHECK_THROWS_AS(load_run_config(write_config(dir, "episodes.train = -3")), ConfigError);
    CHECK_THROWS_AS(load_run_config(write_config(dir, "agent.tau = 2")), ConfigError);
    CHECK_THROWS_AS(load_run_config(write_config(dir, "seed.noise = x")), ConfigError);
    CHECK_THROWS_WITH(load_run_config(write_config(dir), {"rivals=/nonexistent/rivals.txt"}),
                      Catch::Matchers::ContainsSubstring("does not exist"));
    CHECK_THROWS_AS(load_run_config(write_config(dir), {"novalue"}), ConfigError);
    CHECK_THROWS_AS(load_run_config(dir / "missing.cfg"), ConfigError);
    std::ofstream(dir / "sec.cfg") << "[extras]\nfoo\n";
    CHECK_THROWS_WITH(load_run_config(dir / "sec.cfg"), Catch::Matchers::ContainsSubstring("unknown section"));
}

TEST_CASE("episode seeds separate phases and days", "[harness]") {
    SeedSet s;
    const auto a = episode_seeds(s, Phase::train, 0);
    CHECK(a.load == episode_seeds(s, Phase::train, 0).load);
    CHECK(a.load != episode_seeds(s, Phase::train, 1).load);
    CHECK(a.load != episode_seeds(s, Phase::eval, 0).load);
    CHECK(a.rival != episode_seeds(s, Phase::eval, 0).rival);
    SeedSet t = s;
    t.exploration = 999;
    CHECK(episode_seeds(t, Phase::eval, 3).load == episode_seeds(s, Phase::eval, 3).load);
}

TEST_CASE("a one-episode training run", "[harness][example]") {
    const auto dir = scratch_dir("smoke");
    const auto cfg = load_run_config(write_config(dir), {"episodes.train=1"});
    const auto t0 = std::chrono::steady_clock::now();
    const auto res = train(cfg, dir / "out", quiet());
    CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 30.0);
    CHECK(res.metrics.steps.size() == 24);
    REQUIRE(res.metrics.episodes.size() == 1);
    CHECK(res.metrics.episodes[0].steps == 24);
    for (const char* f : {"steps.csv", "episodes.csv", "manifest.txt", "checkpoint-final.vppb"})
        CHECK(fs::exists(dir / "out" / f));
    const auto steps = CsvTable::read(dir / "out" / "steps.csv");
    CHECK(steps.size() == 24);
    const auto manifest = TextDocument::from_file(dir / "out" / "manifest.txt");
    CHECK(manifest.get("command") == "train");
    CHECK(manifest.get("config.agent.hidden_width") == "16");
    CHECK(manifest.get("config.variant") == "sRL");
    CHECK(manifest.get("episodes_aborted") == "0");
    const auto h = read_checkpoint_header(res.checkpoint);
    CHECK(h.version == kCheckpointVersion);
    CHECK(h.fields.at("episodes_done") == "1");
}

TEST_CASE("identical seeds give bit-identical metrics", "[harness][property]") {
    const auto dir = scratch_dir("determinism");
    const auto cfg = load_run_config(write_config(dir));
    const auto a = train(cfg, dir / "a", quiet());
    const auto b = train(cfg, dir / "b", quiet());
    CHECK(slurp(dir / "a" / "steps.csv") == slurp(dir / "b" / "steps.csv"));
    CHECK(slurp(dir / "a" / "episodes.csv") == slurp(dir / "b" / "episodes.csv"));
    CHECK(slurp(dir / "a" / "checkpoint-final.vppb") == slurp(dir / "b" / "checkpoint-final.vppb"));

    // a different exploration seed changes the bids, not the days
    auto other = cfg;
    other.seeds.exploration += 1;
    const auto c = train(other, dir / "c", quiet());
    REQUIRE(c.metrics.steps.size() == a.metrics.steps.size());
    bool bids_differ = false;
    for (std::size_t i = 0; i < a.metrics.steps.size(); ++i) {
        const auto& x = a.metrics.steps[i].rec;
        const auto& y = c.metrics.steps[i].rec;
        bids_differ = bids_differ || x.price_bid != y.price_bid;
        CHECK(x.mcp_absent == y.mcp_absent);
        if (x.hour == 0) CHECK(x.u_max == y.u_max);
    }
    CHECK(bids_differ);
}

TEST_CASE("evaluation is noise free and independent of the thread count", "[harness][example]") {
    const auto dir = scratch_dir("eval");
    const auto cfg = load_run_config(write_config(dir));
    const auto trained = train(cfg, dir / "train", quiet());
    RunOptions one = quiet(), three = quiet();
    three.threads = 3;
    const auto a = evaluate(cfg, trained.checkpoint, 5, dir / "e1", one);
    const auto b = evaluate(cfg, trained.checkpoint, 5, dir / "e3", three);
    CHECK(slurp(dir / "e1" / "steps.csv") == slurp(dir / "e3" / "steps.csv"));
    REQUIRE(a.steps.size() == 5 * 24);

    // noise free: the bid is the actor output
    auto env = make_environment(cfg);
    auto agent = make_agent(cfg, env.state_dim());
    load_checkpoint(trained.checkpoint, agent, cfg);
    VectorXd s = env.reset(episode_seeds(cfg.seeds, Phase::eval, 0));
    const auto [price, qty] = env.denormalize(agent.act(s));
    CHECK(a.steps[0].rec.price_bid == price);
    CHECK(a.steps[0].rec.quantity_bid == qty);

    // untrained agent runs as a baseline
    const auto u = evaluate(cfg, {}, 2, dir / "untrained", quiet());
    CHECK(u.steps.size() == 48);
    CHECK(TextDocument::from_file(dir / "untrained" / "manifest.txt").get("checkpoint") == "untrained");
    (void)b;
}

TEST_CASE("checkpoints are checked against the configuration", "[harness][error]") {
    const auto dir = scratch_dir("ckpt");
    const auto cfg = load_run_config(write_config(dir), {"episodes.train=1"});
    const auto trained = train(cfg, dir / "t", quiet());

    const auto bat = load_run_config(dir / "run.cfg", {"der_config=bat1"});
    CHECK_THROWS_WITH(evaluate(bat, trained.checkpoint, 1, dir / "x", quiet()),
                      Catch::Matchers::ContainsSubstring("dimension mismatch"));
    const auto wide = load_run_config(dir / "run.cfg", {"agent.hidden_width=32"});
    CHECK_THROWS_AS(evaluate(wide, trained.checkpoint, 1, dir / "x", quiet()), ConfigError);

    std::ofstream(dir / "junk.vppb") << "not a checkpoint at all";
    CHECK_THROWS_WITH(evaluate(cfg, dir / "junk.vppb", 1, dir / "x", quiet()),
                      Catch::Matchers::ContainsSubstring("not a vppbid checkpoint"));

    auto bytes = slurp(trained.checkpoint);
    auto versioned = bytes;
    versioned[8] = 9;  // first byte of the format version
    std::ofstream(dir / "v9.vppb", std::ios::binary) << versioned;
    CHECK_THROWS_WITH(evaluate(cfg, dir / "v9.vppb", 1, dir / "x", quiet()),
                      Catch::Matchers::ContainsSubstring("version"));
    std::ofstream(dir / "cut.vppb", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS_AS(evaluate(cfg, dir / "cut.vppb", 1, dir / "x", quiet()), ConfigError);
    CHECK_THROWS_AS(evaluate(cfg, dir / "missing.vppb", 1, dir / "x", quiet()), ConfigError);
}

TEST_CASE("periodic checkpoints resume the agent exactly", "[harness]") {
    const auto dir = scratch_dir("periodic");
    const auto cfg = load_run_config(write_config(dir), {"checkpoint_every=6"});
    train(cfg, dir / "t", quiet());
    CHECK(fs::exists(dir / "t" / "checkpoint-0006.vppb"));
    CHECK(read_checkpoint_header(dir / "t" / "checkpoint-0006.vppb").fields.at("episodes_done") == "6");
    auto a = make_agent(cfg, make_environment(cfg).state_dim());
    load_checkpoint(dir / "t" / "checkpoint-final.vppb", a, cfg);
    CHECK(a.updates() == 2 * 24);
}

TEST_CASE("aborted episodes are logged and fail the run beyond the threshold", "[harness][error]") {
    const auto dir = scratch_dir("abort");
    // the substation is held at 1.0 p.u., so no exchange satisfies this band
    std::string net = slurp(oracle::data_path("ieee13.net"));
    const auto pos = net.find("0   650   0.95  1.05");
    REQUIRE(pos != std::string::npos);
    net.replace(pos, 20, "0   650   1.01  1.05");
    std::ofstream(dir / "tight.net") << net;
    const auto cfg = load_run_config(write_config(dir), {"network=" + (dir / "tight.net").string(), "episodes.train=2"});
    CHECK_THROWS_AS(train(cfg, dir / "t", quiet()), RunAborted);
    const auto eps = CsvTable::read(dir / "t" / "episodes.csv");
    REQUIRE(eps.size() == 2);
    CHECK(eps.text(0, eps.column("status")) == "aborted");
    CHECK(eps.text(0, eps.column("abort_hour")) == "0");
    const auto manifest = TextDocument::from_file(dir / "t" / "manifest.txt");
    CHECK(manifest.get("episodes_aborted") == "2");
    CHECK(manifest.require_table("aborted").rows.size() == 2);

    RunMetrics m;
    m.episodes.resize(100);
    m.episodes[0].aborted = true;
    CHECK_NOTHROW(detail::check_aborts(m, cfg));
    m.episodes[1].aborted = true;
    CHECK_THROWS_AS(detail::check_aborts(m, cfg), RunAborted);
}

TEST_CASE("scripted baselines", "[harness][example]") {
    const auto dir = scratch_dir("baseline");
    const auto cfg = load_run_config(write_config(dir));
    const auto taker = run_baseline(cfg, Policy::price_taker, 3, dir / "pt", quiet());
    REQUIRE(taker.steps.size() == 72);
    for (const auto& row : taker.steps) {
        const auto& r = row.rec;
        CHECK_FALSE(r.shield_active);
        CHECK(r.quantity_bid == r.u_max);
        CHECK(r.cleared_kw <= r.u_max + 1e-9);
        CHECK(r.mcp == Approx(r.mcp_price_taker));
    }
    const auto none = run_baseline(cfg, Policy::no_vpp, 2, dir / "nv", quiet());
    for (const auto& row : none.steps) {
        CHECK(row.rec.cleared_kw == 0.0);
        CHECK(row.rec.r_da == 0.0);
        CHECK(row.rec.mcp == row.rec.mcp_absent);
    }
    CHECK_THROWS_AS(parse_policy("greedy"), ConfigError);
}

TEST_CASE("report tables are recomputable from the step logs", "[harness][example]") {
    const auto dir = scratch_dir("report");
    const auto cfg = load_run_config(write_config(dir));
    const auto m_w = run_baseline(cfg, Policy::price_taker, 3, dir / "runs" / "w", quiet());
    const auto cfg_wo = load_run_config(dir / "run.cfg", {"forecast=woFC", "der_config=renew1"});
    const auto cfg_w1 = load_run_config(dir / "run.cfg", {"der_config=renew1"});
    run_baseline(cfg_w1, Policy::price_taker, 2, dir / "runs" / "r1w", quiet());
    run_baseline(cfg_wo, Policy::price_taker, 2, dir / "runs" / "r1wo", quiet());
    train(load_run_config(dir / "run.cfg", {"episodes.train=2"}), dir / "runs" / "train", quiet());

    const auto paths = write_report(dir / "runs", dir / "report");
    const auto t1 = CsvTable::read(paths.variants);
    REQUIRE(t1.size() == 3);
    std::size_t row_w = 99;
    for (std::size_t i = 0; i < t1.size(); ++i)
        if (t1.text(i, t1.column("run")) == "w") row_w = i;
    REQUIRE(row_w < 3);
    // independent aggregation from the in-memory records
    double rda = 0.0, bal = 0.0, cvpp = 0.0;
    for (const auto& e : m_w.episodes) {
        rda += e.r_da;
        bal += e.balancing;
        cvpp += e.c_vpp;
    }
    CHECK(t1.number(row_w, t1.column("day_ahead")) == Approx(rda / 3).epsilon(1e-12));
    CHECK(t1.number(row_w, t1.column("balancing")) == Approx(bal / 3).epsilon(1e-12));
    CHECK(t1.number(row_w, t1.column("c_vpp")) == Approx(cvpp / 3).epsilon(1e-12));
    CHECK(t1.number(row_w, t1.column("net_market_profit")) == Approx((rda - bal) / 3).epsilon(1e-12));
    CHECK(t1.text(row_w, t1.column("policy")) == "price-taker");

    const auto t2 = CsvTable::read(paths.forecast);
    bool paired = false;
    for (std::size_t i = 0; i < t2.size(); ++i)
        if (t2.text(i, t2.column("der_config")) == "renew1")
            paired = !t2.text(i, t2.column("profit_wFC")).empty() && !t2.text(i, t2.column("profit_woFC")).empty();
    CHECK(paired);

    const auto f3 = CsvTable::read(paths.activation);
    CHECK(f3.size() == 3 + 2 + 2 + 2);  // eval days of the baselines plus the training days
    const auto f4 = CsvTable::read(paths.mcp);
    CHECK(f4.size() == 3 * 24);
}

TEST_CASE("an empty report has headers only", "[harness][example]") {
    const auto dir = scratch_dir("empty_report");
    fs::create_directories(dir / "in");
    const auto paths = write_report(dir / "in", dir / "out");
    for (const auto& p : {paths.variants, paths.forecast, paths.activation, paths.mcp}) {
        const auto text = slurp(p);
        CHECK(std::count(text.begin(), text.end(), '\n') == 1);
    }
    CHECK_THROWS_AS(write_report(dir / "nope", dir / "out"), ConfigError);
}

TEST_CASE("exit codes follow the error category", "[harness]") {
    CHECK(exit_code_for(ConfigError("x")) == 2);
    CHECK(exit_code_for(SolverError("x")) == 3);
    CHECK(exit_code_for(InfeasibleError("x")) == 3);
    CHECK(exit_code_for(RunAborted("x")) == 4);
    CHECK(exit_code_for(EpisodeAborted(3, "x")) == 4);
    CHECK(exit_code_for(std::runtime_error("x")) == 1);
}

TEST_CASE("a step observer sees every step with the pre-step fleet", "[harness]") {
    const auto dir = scratch_dir("observer");
    const auto cfg = load_run_config(write_config(dir), {"episodes.train=2", "der_config=bat1"});
    RunOptions opt = quiet();
    opt.write_files = false;
    int seen = 0, bad = 0;
    opt.observer = [&](const StepEvent& ev) {
        ++seen;
        if (!oracle::dispatch_violation(ev.env.network(), ev.fleet_before.units, ev.availability, ev.record.hour,
                                        ev.env.last_dispatch())
                 .empty())
            ++bad;
    };
    train(cfg, dir / "unused", opt);
    CHECK(seen == 48);
    CHECK(bad == 0);
    CHECK_FALSE(fs::exists(dir / "unused"));
}
