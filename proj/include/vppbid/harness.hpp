#pragma once

// Run configuration, the training / evaluation / baseline loops, metrics
// files, checkpoints and the summary report.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include "vppbid/agent.hpp"
#include "vppbid/binio.hpp"
#include "vppbid/env.hpp"
#include "vppbid/errors.hpp"
#include "vppbid/textdoc.hpp"

namespace vppbid {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr char kCheckpointMagic[8] = {'V', 'P', 'P', 'B', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// More episodes aborted than the configured fraction allows.
class RunAborted : public Error {
public:
    using Error::Error;
};

/// Process exit status per error category.
inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 2;
    if (dynamic_cast<const SolverError*>(&e) || dynamic_cast<const InfeasibleError*>(&e)) return 3;
    if (dynamic_cast<const RunAborted*>(&e) || dynamic_cast<const EpisodeAborted*>(&e)) return 4;
    return 1;
}

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// ============================================================================
// Configuration
// ============================================================================

struct SeedSet {
    std::uint64_t noise = 11;  ///< load and renewable noise
    std::uint64_t rival = 23;  ///< rival bid jitter
    std::uint64_t init = 37;   ///< network weights
    std::uint64_t exploration = 41;
    std::uint64_t replay = 53;
};

struct RunConfig {
    std::filesystem::path source;  ///< config file, empty when built in code
    std::string name = "run";
    std::filesystem::path network, ders, rivals, output_dir;
    std::string der_config = "basecase";
    std::string load_curve = "residential-a";
    EnvConfig env;
    DdpgHyperparams hp;
    int train_episodes = 100;
    int eval_episodes = 500;
    int checkpoint_every = 0;  ///< 0: final checkpoint only
    double max_abort_fraction = 0.01;
    std::string seed_set = "default";
    SeedSet seeds;
    std::map<std::string, SeedSet> seed_sets;
};

namespace detail {

struct ConfigKey {
    std::string key;
    std::function<void(RunConfig&, const std::string& value, const std::string& where)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <class Ref>
ConfigKey real_key(std::string key, Ref ref) {
    return {std::move(key),
            [ref](RunConfig& c, const std::string& v, const std::string& at) { ref(c) = parse_double(v, at); },
            [ref](const RunConfig& c) { return format_double(ref(const_cast<RunConfig&>(c))); }};
}

template <class T, class Ref>
ConfigKey integer_key(std::string key, Ref ref) {
    return {std::move(key),
            [ref](RunConfig& c, const std::string& v, const std::string& at) {
                const long x = parse_int(v, at);
                if (x < 0) throw ConfigError(at + ": expected a nonnegative integer, got '" + v + "'");
                ref(c) = static_cast<T>(x);
            },
            [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); }};
}

inline std::uint64_t parse_seed(const std::string& v, const std::string& at) {
    std::uint64_t x = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc{} || ptr != v.data() + v.size()) throw ConfigError(at + ": expected a seed, got '" + v + "'");
    return x;
}

template <class Ref>
ConfigKey seed_key(std::string key, Ref ref) {
    return {std::move(key),
            [ref](RunConfig& c, const std::string& v, const std::string& at) { ref(c) = parse_seed(v, at); },
            [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); }};
}

template <class Ref>
ConfigKey text_key(std::string key, Ref ref) {
    return {std::move(key), [ref](RunConfig& c, const std::string& v, const std::string&) { ref(c) = v; },
            [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c))); }};
}

/// Paths are taken relative to the directory of the config file.
template <class Ref>
ConfigKey path_key(std::string key, Ref ref) {
    return {std::move(key),
            [ref](RunConfig& c, const std::string& v, const std::string&) {
                std::filesystem::path p(v);
                if (p.is_relative() && !c.source.empty()) p = c.source.parent_path() / p;
                ref(c) = p.lexically_normal();
            },
            [ref](const RunConfig& c) { return ref(const_cast<RunConfig&>(c)).string(); }};
}

inline const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = [] {
        std::vector<ConfigKey> k;
        k.push_back(text_key("name", [](RunConfig& c) -> std::string& { return c.name; }));
        k.push_back(path_key("network", [](RunConfig& c) -> std::filesystem::path& { return c.network; }));
        k.push_back(path_key("ders", [](RunConfig& c) -> std::filesystem::path& { return c.ders; }));
        k.push_back(text_key("der_config", [](RunConfig& c) -> std::string& { return c.der_config; }));
        k.push_back(text_key("load_curve", [](RunConfig& c) -> std::string& { return c.load_curve; }));
        k.push_back(path_key("rivals", [](RunConfig& c) -> std::filesystem::path& { return c.rivals; }));
        k.push_back(path_key("output_dir", [](RunConfig& c) -> std::filesystem::path& { return c.output_dir; }));
        k.push_back({"variant", [](RunConfig& c, const std::string& v, const std::string&) { c.env.variant = parse_variant(v); },
                     [](const RunConfig& c) { return std::string(to_string(c.env.variant)); }});
        k.push_back({"forecast",
                     [](RunConfig& c, const std::string& v, const std::string&) { c.env.forecast = parse_forecast_mode(v); },
                     [](const RunConfig& c) { return std::string(to_string(c.env.forecast)); }});
        k.push_back({"unsafe_reward",
                     [](RunConfig& c, const std::string& v, const std::string& at) {
                         if (v == "day_ahead")
                             c.env.unsafe_reward = UnsafeReward::day_ahead;
                         else if (v == "day_ahead_minus_balancing")
                             c.env.unsafe_reward = UnsafeReward::day_ahead_minus_balancing;
                         else
                             throw ConfigError(at + ": unsafe_reward must be day_ahead or day_ahead_minus_balancing");
                     },
                     [](const RunConfig& c) {
                         return std::string(c.env.unsafe_reward == UnsafeReward::day_ahead ? "day_ahead"
                                                                                           : "day_ahead_minus_balancing");
                     }});
        k.push_back(integer_key<int>("episodes.train", [](RunConfig& c) -> int& { return c.train_episodes; }));
        k.push_back(integer_key<int>("episodes.eval", [](RunConfig& c) -> int& { return c.eval_episodes; }));
        k.push_back(integer_key<int>("checkpoint_every", [](RunConfig& c) -> int& { return c.checkpoint_every; }));
        k.push_back(real_key("max_abort_fraction", [](RunConfig& c) -> double& { return c.max_abort_fraction; }));
        k.push_back(text_key("seed_set", [](RunConfig& c) -> std::string& { return c.seed_set; }));
        k.push_back(seed_key("seed.noise", [](RunConfig& c) -> std::uint64_t& { return c.seeds.noise; }));
        k.push_back(seed_key("seed.rival", [](RunConfig& c) -> std::uint64_t& { return c.seeds.rival; }));
        k.push_back(seed_key("seed.init", [](RunConfig& c) -> std::uint64_t& { return c.seeds.init; }));
        k.push_back(seed_key("seed.exploration", [](RunConfig& c) -> std::uint64_t& { return c.seeds.exploration; }));
        k.push_back(seed_key("seed.replay", [](RunConfig& c) -> std::uint64_t& { return c.seeds.replay; }));
        k.push_back(real_key("shield.epsilon", [](RunConfig& c) -> double& { return c.env.shield.epsilon; }));
        k.push_back(real_key("shield.tolerance", [](RunConfig& c) -> double& { return c.env.shield.tolerance; }));
        k.push_back(real_key("market.price_cap", [](RunConfig& c) -> double& { return c.env.price_cap; }));
        k.push_back(real_key("market.quantity_cap_kw", [](RunConfig& c) -> double& { return c.env.quantity_cap_kw; }));
        k.push_back(real_key("market.balancing_factor", [](RunConfig& c) -> double& { return c.env.balancing_factor; }));
        k.push_back(real_key("load.day_std", [](RunConfig& c) -> double& { return c.env.load_day_std; }));
        k.push_back(real_key("load.hour_std", [](RunConfig& c) -> double& { return c.env.load_hour_std; }));
        k.push_back(real_key("dispatch.interval_tolerance_kw",
                             [](RunConfig& c) -> double& { return c.env.dispatch.interval_tolerance_kw; }));
        k.push_back(real_key("dispatch.pcc_tolerance_kw",
                             [](RunConfig& c) -> double& { return c.env.dispatch.pcc_tolerance_kw; }));
        k.push_back(real_key("agent.actor_lr", [](RunConfig& c) -> double& { return c.hp.actor_lr; }));
        k.push_back(real_key("agent.critic_lr", [](RunConfig& c) -> double& { return c.hp.critic_lr; }));
        k.push_back(real_key("agent.tau", [](RunConfig& c) -> double& { return c.hp.tau; }));
        k.push_back(real_key("agent.discount", [](RunConfig& c) -> double& { return c.hp.discount; }));
        k.push_back(real_key("agent.z_i", [](RunConfig& c) -> double& { return c.hp.z_i; }));
        k.push_back(real_key("agent.z_f", [](RunConfig& c) -> double& { return c.hp.z_f; }));
        k.push_back(integer_key<int>("agent.minibatch", [](RunConfig& c) -> int& { return c.hp.minibatch; }));
        k.push_back(integer_key<std::size_t>("agent.replay_capacity",
                                             [](RunConfig& c) -> std::size_t& { return c.hp.replay_capacity; }));
        k.push_back(integer_key<int>("agent.hidden_width", [](RunConfig& c) -> int& { return c.hp.hidden_width; }));
        k.push_back(integer_key<int>("agent.hidden_layers", [](RunConfig& c) -> int& { return c.hp.hidden_layers; }));
        k.push_back(integer_key<int>("agent.warmup_episodes", [](RunConfig& c) -> int& { return c.hp.warmup_episodes; }));
        k.push_back(real_key("agent.final_layer_scale", [](RunConfig& c) -> double& { return c.hp.final_layer_scale; }));
        k.push_back(real_key("agent.reward_scale", [](RunConfig& c) -> double& { return c.hp.reward_scale; }));
        k.push_back({"agent.noise_scale",
                     [](RunConfig& c, const std::string& v, const std::string& at) {
                         if (v == "variance")
                             c.hp.noise_scale = NoiseScale::variance;
                         else if (v == "stddev")
                             c.hp.noise_scale = NoiseScale::stddev;
                         else
                             throw ConfigError(at + ": agent.noise_scale must be variance or stddev");
                     },
                     [](const RunConfig& c) {
                         return std::string(c.hp.noise_scale == NoiseScale::variance ? "variance" : "stddev");
                     }});
        k.push_back(real_key("agent.adam_beta1", [](RunConfig& c) -> double& { return c.hp.adam.beta1; }));
        k.push_back(real_key("agent.adam_beta2", [](RunConfig& c) -> double& { return c.hp.adam.beta2; }));
        k.push_back(real_key("agent.adam_eps", [](RunConfig& c) -> double& { return c.hp.adam.eps; }));
        return k;
    }();
    return keys;
}

inline const ConfigKey* find_key(const std::string& key) {
    for (const auto& k : config_keys())
        if (k.key == key) return &k;
    return nullptr;
}

inline void require_file(const std::filesystem::path& p, const char* what) {
    if (p.empty()) throw ConfigError(std::string("config: '") + what + "' is not set");
    if (!std::filesystem::is_regular_file(p))
        throw ConfigError(std::string("config: ") + what + " file '" + p.string() + "' does not exist");
}

}  // namespace detail

/// Set one key; unknown keys are rejected.
inline void apply_config_value(RunConfig& cfg, const std::string& key, const std::string& value,
                               const std::string& where) {
    const auto* k = detail::find_key(key);
    if (k == nullptr) throw ConfigError(where + ": unknown key '" + key + "'");
    k->set(cfg, value, where);
}

/// Apply "key=value" overrides (command line).
inline void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides) {
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not of the form key=value");
        apply_config_value(cfg, std::string(detail::trim(o.substr(0, eq))), std::string(detail::trim(o.substr(eq + 1))),
                           "override '" + o + "'");
    }
}

/// Resolve the seed set, derive m_tot, check files and value ranges.
inline void finalize(RunConfig& cfg) {
    if (cfg.seed_set != "default") {
        const auto it = cfg.seed_sets.find(cfg.seed_set);
        if (it == cfg.seed_sets.end()) throw ConfigError("config: unknown seed set '" + cfg.seed_set + "'");
        cfg.seeds = it->second;
    }
    detail::require_file(cfg.network, "network");
    detail::require_file(cfg.ders, "ders");
    detail::require_file(cfg.rivals, "rivals");
    if (cfg.train_episodes < 1 || cfg.eval_episodes < 1) throw ConfigError("config: episode counts must be positive");
    if (!(cfg.max_abort_fraction >= 0.0 && cfg.max_abort_fraction < 1.0))
        throw ConfigError("config: max_abort_fraction must lie in [0, 1)");
    if (cfg.name.empty() || cfg.name.find_first_of("/\\ ") != std::string::npos)
        throw ConfigError("config: name must be a nonempty word");
    cfg.hp.m_tot = cfg.train_episodes;
    validate(cfg.env);
    validate(cfg.hp);
    if (cfg.output_dir.empty()) cfg.output_dir = std::filesystem::path("runs") / cfg.name;
}

/// Parse a run configuration:
///
///   key = value ...                 (see config_keys)
///   [seed_sets]
///   name noise rival init exploration replay
inline RunConfig parse_run_config(const TextDocument& doc, const std::filesystem::path& source,
                                  const std::vector<std::string>& overrides = {}, const std::string& seed_set = "") {
    RunConfig cfg;
    cfg.source = source;
    for (const auto& key : doc.keys()) apply_config_value(cfg, key, *doc.get(key), doc.source());
    for (const auto& table : doc.tables()) {
        if (table.name != "seed_sets") throw ConfigError(doc.source() + ": unknown section [" + table.name + "]");
        for (const auto& row : table.rows) {
            const std::string at = doc.where(row.line);
            if (row.cells.size() != 6)
                throw ConfigError(at + ": seed set rows are: name noise rival init exploration replay");
            if (row.cells[0] == "default") throw ConfigError(at + ": 'default' names the seed.* keys");
            SeedSet s;
            s.noise = detail::parse_seed(row.cells[1], at);
            s.rival = detail::parse_seed(row.cells[2], at);
            s.init = detail::parse_seed(row.cells[3], at);
            s.exploration = detail::parse_seed(row.cells[4], at);
            s.replay = detail::parse_seed(row.cells[5], at);
            if (!cfg.seed_sets.emplace(row.cells[0], s).second)
                throw ConfigError(at + ": duplicate seed set '" + row.cells[0] + "'");
        }
    }
    apply_overrides(cfg, overrides);
    if (!seed_set.empty()) cfg.seed_set = seed_set;
    finalize(cfg);
    return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {},
                                 const std::string& seed_set = "") {
    return parse_run_config(TextDocument::from_file(path), path, overrides, seed_set);
}

/// Every key with its resolved value, in a fixed order.
inline std::vector<std::pair<std::string, std::string>> describe(const RunConfig& cfg) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& k : detail::config_keys()) out.emplace_back(k.key, k.get(cfg));
    return out;
}

inline VppEnv make_environment(const RunConfig& cfg) {
    return VppEnv(load_network(cfg.network), load_der_fleet(cfg.ders, cfg.der_config, cfg.load_curve),
                  load_rival_scenario(cfg.rivals), cfg.env);
}

inline Ddpg make_agent(const RunConfig& cfg, int state_dim) {
    return Ddpg(state_dim, cfg.hp, Ddpg::Seeds{cfg.seeds.init, cfg.seeds.exploration, cfg.seeds.replay});
}

enum class Phase { train, eval };

/// Seeds of day m. Training and evaluation days never coincide; baselines
/// and agents evaluated with the same seeds face identical days.
inline EpisodeSeeds episode_seeds(const SeedSet& s, Phase phase, int m) {
    const std::uint64_t lane = 2 * static_cast<std::uint64_t>(m) + (phase == Phase::train ? 0 : 1);
    std::uint64_t a = s.noise + 0x9E3779B97F4A7C15ULL * (lane + 1);
    std::uint64_t b = s.rival + 0xD1B54A32D192ED03ULL * (lane + 1);
    return {splitmix64(a), splitmix64(b)};
}

// ============================================================================
// Metrics
// ============================================================================

struct StepRow {
    std::string phase;
    int episode = 0;
    StepRecord rec;
};

struct EpisodeSummary {
    std::string phase;
    int episode = 0;
    bool aborted = false;
    int abort_hour = -1;
    std::string cause;
    int steps = 0;
    double reward = 0.0;
    double r_da = 0.0;
    double c_vpp = 0.0;
    double c_shd = 0.0;
    double balancing = 0.0;
    double intervention_kw = 0.0;
    int activations = 0;

    [[nodiscard]] double net_market_profit() const { return r_da - balancing; }

    void add(const StepRecord& r) {
        ++steps;
        reward += r.reward;
        r_da += r.r_da;
        c_vpp += r.c_vpp;
        c_shd += r.c_shd;
        balancing += r.balancing;
        intervention_kw += r.intervention_kw;
        activations += r.shield_active ? 1 : 0;
    }
};

struct RunMetrics {
    std::vector<StepRow> steps;
    std::vector<EpisodeSummary> episodes;
    long nonfinite_updates = 0;

    [[nodiscard]] int aborted() const {
        return static_cast<int>(std::count_if(episodes.begin(), episodes.end(), [](const auto& e) { return e.aborted; }));
    }
};

inline const std::vector<std::string>& step_columns() {
    static const std::vector<std::string> cols = {
        "phase",        "episode",         "hour",      "price_bid",     "quantity_bid",    "shielded_bid",
        "u_min",        "u_max",           "shield_active", "intervention_kw", "c_shd",       "mcp",
        "cleared_kw",   "dispatched_kw",   "r_da",      "c_vpp",         "balancing",       "reward",
        "pmc",          "mcp_absent",      "mcp_price_taker", "losses_kw", "worst_violation", "storage_kw",
        "chi_kwh",      "dispatch_status"};
    return cols;
}

inline void write_steps_csv(const std::filesystem::path& path, const std::vector<StepRow>& rows) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write '" + path.string() + "'");
    const auto& cols = step_columns();
    for (std::size_t k = 0; k < cols.size(); ++k) out << (k ? "," : "") << cols[k];
    out << '\n';
    for (const auto& row : rows) {
        const auto& r = row.rec;
        out << row.phase << ',' << row.episode << ',' << r.hour;
        for (double v : {r.price_bid, r.quantity_bid, r.shielded_bid, r.u_min, r.u_max}) out << ',' << format_double(v);
        out << ',' << (r.shield_active ? 1 : 0);
        for (double v : {r.intervention_kw, r.c_shd, r.mcp, r.cleared_kw, r.dispatched_kw, r.r_da, r.c_vpp,
                         r.balancing, r.reward, r.pmc, r.mcp_absent, r.mcp_price_taker, r.losses_kw,
                         r.worst_violation, r.storage_kw, r.chi_kwh})
            out << ',' << format_double(v);
        out << ',' << to_string(r.dispatch_status) << '\n';
    }
    if (!out) throw Error("write to '" + path.string() + "' failed");
}

inline void write_episodes_csv(const std::filesystem::path& path, const std::vector<EpisodeSummary>& eps) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write '" + path.string() + "'");
    out << "phase,episode,status,steps,reward,r_da,c_vpp,c_shd,balancing,net_market_profit,activations,"
           "intervention_kw,abort_hour,abort_cause\n";
    for (const auto& e : eps) {
        std::string cause = e.cause;
        std::replace(cause.begin(), cause.end(), ',', ';');
        out << e.phase << ',' << e.episode << ',' << (e.aborted ? "aborted" : "ok") << ',' << e.steps;
        for (double v : {e.reward, e.r_da, e.c_vpp, e.c_shd, e.balancing, e.net_market_profit()})
            out << ',' << format_double(v);
        out << ',' << e.activations << ',' << format_double(e.intervention_kw) << ',' << e.abort_hour << ',' << cause
            << '\n';
    }
    if (!out) throw Error("write to '" + path.string() + "' failed");
}

/// key = value manifest, readable back with TextDocument.
inline void write_manifest(const std::filesystem::path& path, const std::string& command, const RunConfig& cfg,
                           const std::vector<std::pair<std::string, std::string>>& facts, const RunMetrics& m) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write '" + path.string() + "'");
    auto clean = [](std::string s) {
        std::replace(s.begin(), s.end(), '#', '_');
        std::replace(s.begin(), s.end(), '\n', ' ');
        return s;
    };
    out << "# vppbid run manifest\n";
    out << "format = 1\n";
    out << "version = " << kVersion << '\n';
    out << "command = " << command << '\n';
    out << "config_file = " << clean(cfg.source.string()) << '\n';
    for (const auto& [k, v] : facts) out << k << " = " << clean(v) << '\n';
    out << "episodes_total = " << m.episodes.size() << '\n';
    out << "episodes_aborted = " << m.aborted() << '\n';
    out << "nonfinite_updates = " << m.nonfinite_updates << '\n';
    for (const auto& [k, v] : describe(cfg)) out << "config." << k << " = " << clean(v) << '\n';
    out << "\n[seed_sets]\n";
    for (const auto& [name, s] : cfg.seed_sets)
        out << name << ' ' << s.noise << ' ' << s.rival << ' ' << s.init << ' ' << s.exploration << ' ' << s.replay
            << '\n';
    out << "\n[aborted]\n# phase episode hour cause\n";
    for (const auto& e : m.episodes)
        if (e.aborted) out << e.phase << ' ' << e.episode << ' ' << e.abort_hour << ' ' << clean(e.cause) << '\n';
    if (!out) throw Error("write to '" + path.string() + "' failed");
}

// ============================================================================
// Checkpoints
// ============================================================================

struct CheckpointHeader {
    std::uint32_t version = 0;
    std::map<std::string, std::string> fields;
};

namespace detail {

inline std::string checkpoint_fields(const RunConfig& cfg, int state_dim, int episodes_done) {
    std::ostringstream h;
    h << "der_config=" << cfg.der_config << '\n'
      << "variant=" << to_string(cfg.env.variant) << '\n'
      << "forecast=" << to_string(cfg.env.forecast) << '\n'
      << "state_dim=" << state_dim << '\n'
      << "hidden_width=" << cfg.hp.hidden_width << '\n'
      << "hidden_layers=" << cfg.hp.hidden_layers << '\n'
      << "replay_capacity=" << cfg.hp.replay_capacity << '\n'
      << "episodes_done=" << episodes_done << '\n';
    return h.str();
}

inline CheckpointHeader read_checkpoint_header(BinaryReader& in, std::istream& is, const std::string& source) {
    char magic[8] = {};
    is.read(magic, sizeof magic);
    if (!is || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
        throw ConfigError(source + ": not a vppbid checkpoint");
    CheckpointHeader h;
    h.version = in.get<std::uint32_t>();
    if (h.version != kCheckpointVersion)
        throw ConfigError(source + ": checkpoint format version " + std::to_string(h.version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    std::istringstream fields(in.get_string());
    std::string line;
    while (std::getline(fields, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) in.fail("malformed header");
        h.fields[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return h;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Ddpg& agent, const RunConfig& cfg,
                            int episodes_done) {
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw ConfigError("cannot write checkpoint '" + tmp.string() + "'");
        os.write(kCheckpointMagic, sizeof kCheckpointMagic);
        BinaryWriter w(os);
        w.put<std::uint32_t>(kCheckpointVersion);
        w.put_string(detail::checkpoint_fields(cfg, agent.state_dim(), episodes_done));
        agent.save(w);
        if (!w.good()) throw Error("writing checkpoint '" + tmp.string() + "' failed");
    }
    std::filesystem::rename(tmp, path);
}

inline CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open checkpoint '" + path.string() + "'");
    BinaryReader in(is, path.string());
    return detail::read_checkpoint_header(in, is, path.string());
}

/// Restore an agent; dimension mismatches with the configuration are config errors.
inline void load_checkpoint(const std::filesystem::path& path, Ddpg& agent, const RunConfig& cfg) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open checkpoint '" + path.string() + "'");
    BinaryReader in(is, path.string());
    const auto h = detail::read_checkpoint_header(in, is, path.string());
    auto expect = [&](const char* key, const std::string& want) {
        const auto it = h.fields.find(key);
        if (it == h.fields.end()) in.fail(std::string("header lacks ") + key);
        if (it->second != want)
            throw ConfigError(path.string() + ": dimension mismatch between checkpoint and config (" + key + " " +
                              it->second + " vs " + want + ")");
    };
    expect("state_dim", std::to_string(agent.state_dim()));
    expect("hidden_width", std::to_string(cfg.hp.hidden_width));
    expect("hidden_layers", std::to_string(cfg.hp.hidden_layers));
    expect("replay_capacity", std::to_string(cfg.hp.replay_capacity));
    agent.load(in);
}

// ============================================================================
// Episode loops
// ============================================================================

/// Handed to observers after every completed step.
struct StepEvent {
    const char* phase;
    int episode;
    const VppEnv& env;
    const StepRecord& record;
    const DerFleet& fleet_before;  ///< units as they were when the step began
    const AvailabilityDraw& availability;
};

using StepObserver = std::function<void(const StepEvent&)>;

enum class Policy { agent, price_taker, no_vpp };

inline const char* to_string(Policy p) {
    switch (p) {
        case Policy::agent: return "agent";
        case Policy::price_taker: return "price-taker";
        case Policy::no_vpp: return "no-vpp";
    }
    return "?";
}

inline Policy parse_policy(const std::string& s) {
    if (s == "price-taker") return Policy::price_taker;
    if (s == "no-vpp") return Policy::no_vpp;
    if (s == "agent") return Policy::agent;
    throw ConfigError("unknown baseline mode '" + s + "' (expected price-taker or no-vpp)");
}

struct RunOptions {
    StepObserver observer;
    bool write_files = true;
    std::ostream* log = nullptr;  ///< progress lines, if set
    int threads = 1;              ///< evaluation fan-out
};

namespace detail {

struct Decision {
    VectorXd action;  ///< normalized, empty for scripted policies
    double price = 0.0;
    double quantity = 0.0;
};

/// One day. `decide(env, s)` picks the bid, `learn(s, decision, result)`
/// sees every transition. Aborts end the day and are recorded.
template <class Decide, class Learn>
EpisodeSummary run_episode(VppEnv& env, const EpisodeSeeds& seeds, const char* phase, int m, Decide&& decide,
                           Learn&& learn, const StepObserver& observer, std::vector<StepRow>& rows) {
    EpisodeSummary e;
    e.phase = phase;
    e.episode = m;
    VectorXd s = env.reset(seeds);
    try {
        while (!env.done()) {
            std::optional<DerFleet> before;
            std::optional<AvailabilityDraw> avail;
            if (observer) {
                before = env.fleet();
                avail = env.availability(env.hour());
            }
            const Decision d = decide(env, s);
            auto res = env.step(d.price, d.quantity);
            rows.push_back({phase, m, res.record});
            e.add(res.record);
            if (observer) observer(StepEvent{phase, m, env, res.record, *before, *avail});
            learn(s, d, res);
            s = std::move(res.next_state);
        }
    } catch (const EpisodeAborted& ex) {
        e.aborted = true;
        e.abort_hour = ex.hour();
        e.cause = ex.what();
    }
    return e;
}

inline Decision scripted_decision(VppEnv& env, Policy p) {
    Decision d;
    if (p == Policy::price_taker) {
        const auto& iv = env.interval();
        d.price = iv.at_max.pmc;
        d.quantity = iv.u_max;
    }
    return d;
}

inline void check_aborts(const RunMetrics& m, const RunConfig& cfg) {
    const int n = static_cast<int>(m.episodes.size());
    const int bad = m.aborted();
    if (n > 0 && static_cast<double>(bad) > cfg.max_abort_fraction * static_cast<double>(n))
        throw RunAborted(std::to_string(bad) + " of " + std::to_string(n) +
                         " episodes aborted (more than the allowed fraction " + format_double(cfg.max_abort_fraction) +
                         "); see the manifest for causes");
}

inline void log_progress(const RunOptions& opt, const char* phase, const EpisodeSummary& e, int total) {
    if (opt.log == nullptr) return;
    if ((e.episode + 1) % 10 != 0 && e.episode + 1 != total && !e.aborted) return;
    *opt.log << phase << " episode " << e.episode + 1 << "/" << total << "  reward " << format_double(e.reward)
             << "  activations " << e.activations << (e.aborted ? "  ABORTED: " + e.cause : std::string()) << '\n';
}

}  // namespace detail

struct TrainResult {
    RunMetrics metrics;
    std::filesystem::path checkpoint;  ///< final checkpoint, empty if files are off
};

/// m_tot exploration episodes, updating once per step after the warm-up.
inline TrainResult train(const RunConfig& cfg, const std::filesystem::path& out_dir, const RunOptions& opt = {}) {
    auto env = make_environment(cfg);
    auto agent = make_agent(cfg, env.state_dim());
    TrainResult res;
    if (opt.write_files) std::filesystem::create_directories(out_dir);

    for (int m = 0; m < cfg.train_episodes; ++m) {
        auto decide = [&](VppEnv& e, const VectorXd& s) {
            detail::Decision d;
            d.action = agent.explore(s, m);
            std::tie(d.price, d.quantity) = e.denormalize(d.action);
            return d;
        };
        auto learn = [&](const VectorXd& s, const detail::Decision& d, const StepResult& r) {
            agent.remember({s, d.action, r.record.reward, r.next_state, r.done});
            if (m >= cfg.hp.warmup_episodes && agent.can_update()) {
                const auto st = agent.update();
                if (st.nonfinite) ++res.metrics.nonfinite_updates;
            }
        };
        auto e = detail::run_episode(env, episode_seeds(cfg.seeds, Phase::train, m), "train", m, decide, learn,
                                     opt.observer, res.metrics.steps);
        detail::log_progress(opt, "train", e, cfg.train_episodes);
        res.metrics.episodes.push_back(std::move(e));
        if (opt.write_files && cfg.checkpoint_every > 0 && (m + 1) % cfg.checkpoint_every == 0 &&
            m + 1 < cfg.train_episodes) {
            char name[64];
            std::snprintf(name, sizeof name, "checkpoint-%04d.vppb", m + 1);
            save_checkpoint(out_dir / name, agent, cfg, m + 1);
        }
    }

    if (opt.write_files) {
        res.checkpoint = out_dir / "checkpoint-final.vppb";
        save_checkpoint(res.checkpoint, agent, cfg, cfg.train_episodes);
        write_steps_csv(out_dir / "steps.csv", res.metrics.steps);
        write_episodes_csv(out_dir / "episodes.csv", res.metrics.episodes);
        write_manifest(out_dir / "manifest.txt", "train", cfg,
                       {{"policy", "agent"},
                        {"phase", "train"},
                        {"state_dim", std::to_string(env.state_dim())},
                        {"checkpoint", res.checkpoint.filename().string()},
                        {"updates", std::to_string(agent.updates())}},
                       res.metrics);
    }
    detail::check_aborts(res.metrics, cfg);
    return res;
}

namespace detail {

/// Noise-free episodes of a fixed policy, optionally spread over threads.
/// Results are merged in episode order, so the output does not depend on
/// the thread count.
inline RunMetrics evaluate_policy(const RunConfig& cfg, int episodes, Policy policy, const Mlp* actor,
                                  const RunOptions& opt) {
    if (episodes < 1) throw ConfigError("episode count must be positive");
    const int threads = std::clamp(opt.threads, 1, episodes);
    std::vector<EpisodeSummary> eps(static_cast<std::size_t>(episodes));
    std::vector<std::vector<StepRow>> rows(static_cast<std::size_t>(episodes));
    std::mutex observe_mutex;
    StepObserver observer;
    if (opt.observer)
        observer = [&](const StepEvent& ev) {
            std::lock_guard<std::mutex> lock(observe_mutex);
            opt.observer(ev);
        };

    auto worker = [&](int first) {
        auto env = make_environment(cfg);
        for (int m = first; m < episodes; m += threads) {
            auto decide = [&](VppEnv& e, const VectorXd& s) {
                if (policy != Policy::agent) return scripted_decision(e, policy);
                Decision d;
                d.action = actor->evaluate(s);
                std::tie(d.price, d.quantity) = e.denormalize(d.action);
                return d;
            };
            auto learn = [](const VectorXd&, const Decision&, const StepResult&) {};
            const auto i = static_cast<std::size_t>(m);
            eps[i] = run_episode(env, episode_seeds(cfg.seeds, Phase::eval, m), "eval", m, decide, learn, observer,
                                 rows[i]);
        }
    };
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto guarded = [&](int first) {
        try {
            worker(first);
        } catch (...) {
            std::lock_guard<std::mutex> lock(failure_mutex);
            if (!failure) failure = std::current_exception();
        }
    };
    if (threads == 1) {
        guarded(0);
    } else {
        std::vector<std::thread> pool;
        for (int k = 0; k < threads; ++k) pool.emplace_back(guarded, k);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);

    RunMetrics out;
    for (int m = 0; m < episodes; ++m) {
        const auto i = static_cast<std::size_t>(m);
        log_progress(opt, "eval", eps[i], episodes);
        out.episodes.push_back(std::move(eps[i]));
        for (auto& r : rows[i]) out.steps.push_back(std::move(r));
    }
    return out;
}

inline void write_eval_files(const std::filesystem::path& out_dir, const RunConfig& cfg, const RunMetrics& m,
                             const char* command, Policy policy, const std::string& checkpoint, int state_dim) {
    std::filesystem::create_directories(out_dir);
    write_steps_csv(out_dir / "steps.csv", m.steps);
    write_episodes_csv(out_dir / "episodes.csv", m.episodes);
    write_manifest(out_dir / "manifest.txt", command, cfg,
                   {{"policy", to_string(policy)},
                    {"phase", "eval"},
                    {"state_dim", std::to_string(state_dim)},
                    {"checkpoint", checkpoint}},
                   m);
}

}  // namespace detail

/// Noise-free evaluation of a trained (or, without checkpoint, freshly
/// initialized) agent.
inline RunMetrics evaluate(const RunConfig& cfg, const std::filesystem::path& checkpoint, int episodes,
                           const std::filesystem::path& out_dir, const RunOptions& opt = {}) {
    const int state_dim = make_environment(cfg).state_dim();
    auto agent = make_agent(cfg, state_dim);
    if (!checkpoint.empty()) load_checkpoint(checkpoint, agent, cfg);
    auto m = detail::evaluate_policy(cfg, episodes, Policy::agent, &agent.actor(), opt);
    if (opt.write_files)
        detail::write_eval_files(out_dir, cfg, m, "eval", Policy::agent,
                                 checkpoint.empty() ? "untrained" : checkpoint.string(), state_dim);
    detail::check_aborts(m, cfg);
    return m;
}

/// Scripted bids through the same pipeline: price taker (u_max at the
/// marginal cost) or no VPP bid at all.
inline RunMetrics run_baseline(const RunConfig& cfg, Policy policy, int episodes, const std::filesystem::path& out_dir,
                               const RunOptions& opt = {}) {
    if (policy == Policy::agent) throw ConfigError("baseline needs a scripted policy");
    auto m = detail::evaluate_policy(cfg, episodes, policy, nullptr, opt);
    if (opt.write_files)
        detail::write_eval_files(out_dir, cfg, m, "baseline", policy, "none", make_environment(cfg).state_dim());
    detail::check_aborts(m, cfg);
    return m;
}

// ============================================================================
// Report
// ============================================================================

/// Columns of a CSV file by name; cells stay text until asked for.
class CsvTable {
public:
    static CsvTable read(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open '" + path.string() + "'");
        CsvTable t;
        t.source_ = path.string();
        std::string line;
        if (!std::getline(in, line)) return t;
        t.header_ = split(line);
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            auto cells = split(line);
            if (cells.size() != t.header_.size())
                throw ConfigError(t.source_ + ": row " + std::to_string(t.rows_.size() + 2) + " has " +
                                  std::to_string(cells.size()) + " cells, expected " + std::to_string(t.header_.size()));
            t.rows_.push_back(std::move(cells));
        }
        return t;
    }

    [[nodiscard]] std::size_t size() const { return rows_.size(); }

    [[nodiscard]] std::size_t column(const std::string& name) const {
        for (std::size_t k = 0; k < header_.size(); ++k)
            if (header_[k] == name) return k;
        throw ConfigError(source_ + ": missing column '" + name + "'");
    }

    [[nodiscard]] const std::string& text(std::size_t row, std::size_t col) const { return rows_[row][col]; }

    [[nodiscard]] double number(std::size_t row, std::size_t col) const {
        return parse_double(rows_[row][col], source_ + " row " + std::to_string(row + 2));
    }

private:
    static std::vector<std::string> split(const std::string& line) {
        std::vector<std::string> out;
        std::size_t start = 0;
        while (true) {
            const auto comma = line.find(',', start);
            out.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (!out.empty() && !out.back().empty() && out.back().back() == '\r') out.back().pop_back();
        return out;
    }

    std::string source_;
    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> rows_;
};

/// Per-episode sums of one run directory, rebuilt from its step log.
struct RunSummary {
    std::string label;
    std::map<std::string, std::string> manifest;
    struct Day {
        std::string phase;
        int episode = 0;
        std::vector<std::size_t> rows;  ///< into `steps`
    };
    CsvTable steps;
    std::vector<Day> days;

    [[nodiscard]] std::string get(const std::string& key) const {
        const auto it = manifest.find(key);
        return it == manifest.end() ? std::string() : it->second;
    }
};

inline RunSummary load_run_summary(const std::filesystem::path& dir, const std::string& label) {
    RunSummary r;
    r.label = label;
    const auto doc = TextDocument::from_file(dir / "manifest.txt");
    for (const auto& k : doc.keys()) r.manifest[k] = *doc.get(k);
    r.steps = CsvTable::read(dir / "steps.csv");
    if (r.steps.size() == 0) return r;
    const auto cp = r.steps.column("phase"), ce = r.steps.column("episode");
    for (std::size_t i = 0; i < r.steps.size(); ++i) {
        const auto& phase = r.steps.text(i, cp);
        const int ep = static_cast<int>(parse_int(r.steps.text(i, ce), "episode"));
        if (r.days.empty() || r.days.back().phase != phase || r.days.back().episode != ep)
            r.days.push_back({phase, ep, {}});
        r.days.back().rows.push_back(i);
    }
    return r;
}

struct ReportPaths {
    std::filesystem::path variants, forecast, activation, mcp;
};

namespace detail {

/// Complete days of one phase. Aborted days (fewer than 24 steps) are left
/// out of every average.
inline std::vector<const RunSummary::Day*> complete_days(const RunSummary& r, const std::string& phase) {
    std::vector<const RunSummary::Day*> out;
    for (const auto& d : r.days)
        if (d.phase == phase && d.rows.size() == static_cast<std::size_t>(kHoursPerDay)) out.push_back(&d);
    return out;
}

/// Mean over days of the per-day sum of f(row); sums run in file order.
template <class F>
double mean_daily(const std::vector<const RunSummary::Day*>& days, F f) {
    double total = 0.0;
    for (const auto* d : days) {
        double day = 0.0;
        for (std::size_t i : d->rows) day += f(i);
        total += day;
    }
    return days.empty() ? 0.0 : total / static_cast<double>(days.size());
}

}  // namespace detail

/// Comparison tables and per-day / per-hour series for every run
/// directory (one holding manifest.txt and steps.csv) below `in_dir`.
inline ReportPaths write_report(const std::filesystem::path& in_dir, const std::filesystem::path& out_dir) {
    std::vector<std::filesystem::path> dirs;
    if (std::filesystem::is_directory(in_dir)) {
        for (const auto& entry : std::filesystem::recursive_directory_iterator(in_dir))
            if (entry.is_regular_file() && entry.path().filename() == "manifest.txt" &&
                std::filesystem::exists(entry.path().parent_path() / "steps.csv"))
                dirs.push_back(entry.path().parent_path());
    } else {
        throw ConfigError("report input '" + in_dir.string() + "' is not a directory");
    }
    std::sort(dirs.begin(), dirs.end());
    std::vector<RunSummary> runs;
    for (const auto& d : dirs) {
        auto label = std::filesystem::relative(d, in_dir).generic_string();
        if (label.empty() || label == ".") label = d.filename().string();
        runs.push_back(load_run_summary(d, label));
    }

    std::filesystem::create_directories(out_dir);
    ReportPaths paths{out_dir / "variant_comparison.csv", out_dir / "forecast_comparison.csv", out_dir / "shield_activation.csv",
                      out_dir / "mcp_by_hour.csv"};
    std::ofstream t1(paths.variants), t2(paths.forecast), f3(paths.activation), f4(paths.mcp);
    if (!t1 || !t2 || !f3 || !f4) throw ConfigError("cannot write report files into '" + out_dir.string() + "'");
    const auto fd = [](double v) { return format_double(v); };

    t1 << "run,der_config,variant,forecast,policy,load_curve,episodes,day_ahead,balancing,net_market_profit,c_vpp,"
          "c_shd,reward,profit,activations_per_day\n";
    t2 << "der_config,variant,policy,load_curve,profit_wFC,profit_woFC,runs_wFC,runs_woFC\n";
    f3 << "run,phase,episode,steps,activations,activation_rate\n";
    f4 << "run,policy,hour,episodes,mcp,mcp_price_taker,mcp_absent,price_bid,shielded_bid,cleared_kw\n";

    struct Cell {
        double sum = 0.0;
        int runs = 0;
    };
    std::map<std::string, std::pair<Cell, Cell>> table2;  // key -> (wFC, woFC)
    std::vector<std::string> table2_order;

    for (const auto& r : runs) {
        const auto& s = r.steps;
        if (s.size() > 0) {
            for (const auto& d : r.days) {
                double act = 0.0;
                for (std::size_t i : d.rows) act += s.number(i, s.column("shield_active"));
                f3 << r.label << ',' << d.phase << ',' << d.episode << ',' << d.rows.size() << ',' << fd(act) << ','
                   << fd(act / static_cast<double>(d.rows.size())) << '\n';
            }
        }
        const auto days = s.size() > 0 ? detail::complete_days(r, "eval") : std::vector<const RunSummary::Day*>{};
        if (days.empty()) continue;
        auto col = [&](const char* name) {
            const auto c = s.column(name);
            return [&s, c](std::size_t i) { return s.number(i, c); };
        };
        const double da = detail::mean_daily(days, col("r_da"));
        const double bal = detail::mean_daily(days, col("balancing"));
        const auto c_rda = s.column("r_da"), c_bal = s.column("balancing"), c_vpp = s.column("c_vpp");
        const double net = detail::mean_daily(days, [&](std::size_t i) { return s.number(i, c_rda) - s.number(i, c_bal); });
        const double cv = detail::mean_daily(days, col("c_vpp"));
        const double cs = detail::mean_daily(days, col("c_shd"));
        const double rw = detail::mean_daily(days, col("reward"));
        const double profit = detail::mean_daily(
            days, [&](std::size_t i) { return s.number(i, c_rda) - s.number(i, c_vpp) - s.number(i, c_bal); });
        const double act = detail::mean_daily(days, col("shield_active"));
        const std::string variant = r.get("config.variant"), forecast = r.get("config.forecast");
        const std::string policy = r.get("policy"), curve = r.get("config.load_curve");
        const std::string config = r.get("config.der_config");
        t1 << r.label << ',' << config << ',' << variant << ',' << forecast << ',' << policy << ',' << curve << ','
           << days.size() << ',' << fd(da) << ',' << fd(bal) << ',' << fd(net) << ',' << fd(cv) << ',' << fd(cs) << ','
           << fd(rw) << ',' << fd(profit) << ',' << fd(act) << '\n';

        const std::string key = config + ',' + variant + ',' + policy + ',' + curve;
        if (!table2.count(key)) table2_order.push_back(key);
        auto& cell = forecast == "woFC" ? table2[key].second : table2[key].first;
        cell.sum += profit;
        ++cell.runs;

        for (int h = 0; h < kHoursPerDay; ++h) {
            double mcp = 0, taker = 0, absent = 0, price = 0, shielded = 0, cleared = 0;
            for (const auto* d : days) {
                const std::size_t i = d->rows[static_cast<std::size_t>(h)];
                mcp += s.number(i, s.column("mcp"));
                taker += s.number(i, s.column("mcp_price_taker"));
                absent += s.number(i, s.column("mcp_absent"));
                price += s.number(i, s.column("price_bid"));
                shielded += s.number(i, s.column("shielded_bid"));
                cleared += s.number(i, s.column("cleared_kw"));
            }
            const double n = static_cast<double>(days.size());
            f4 << r.label << ',' << policy << ',' << h << ',' << days.size() << ',' << fd(mcp / n) << ','
               << fd(taker / n) << ',' << fd(absent / n) << ',' << fd(price / n) << ',' << fd(shielded / n) << ','
               << fd(cleared / n) << '\n';
        }
    }
    for (const auto& key : table2_order) {
        const auto& [w, wo] = table2[key];
        t2 << key << ',' << (w.runs ? fd(w.sum / w.runs) : "") << ',' << (wo.runs ? fd(wo.sum / wo.runs) : "") << ','
           << w.runs << ',' << wo.runs << '\n';
    }
    return paths;
}

}  // namespace vppbid
