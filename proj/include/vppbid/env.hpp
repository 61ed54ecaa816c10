#pragma once

// Day-ahead bidding MDP: one strategic bid per hour, routed through the
// shield, the auction and the internal dispatch.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "vppbid/agent.hpp"
#include "vppbid/ders.hpp"
#include "vppbid/dispatch.hpp"
#include "vppbid/errors.hpp"
#include "vppbid/grid.hpp"
#include "vppbid/market.hpp"
#include "vppbid/shield.hpp"

namespace vppbid {

enum class Variant { uRL, shRL, sRL };
enum class ForecastMode { with_forecast, without_forecast };

/// Reward of the unshielded variant: day-ahead revenue alone, or net of the
/// balancing settlement.
enum class UnsafeReward { day_ahead, day_ahead_minus_balancing };

inline const char* to_string(Variant v) {
    switch (v) {
        case Variant::uRL: return "uRL";
        case Variant::shRL: return "shRL";
        case Variant::sRL: return "sRL";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    if (s == "uRL") return Variant::uRL;
    if (s == "shRL") return Variant::shRL;
    if (s == "sRL") return Variant::sRL;
    throw ConfigError("unknown variant '" + s + "' (expected uRL, shRL or sRL)");
}

inline const char* to_string(ForecastMode m) { return m == ForecastMode::with_forecast ? "wFC" : "woFC"; }

inline ForecastMode parse_forecast_mode(const std::string& s) {
    if (s == "wFC") return ForecastMode::with_forecast;
    if (s == "woFC") return ForecastMode::without_forecast;
    throw ConfigError("unknown forecast mode '" + s + "' (expected wFC or woFC)");
}

/// Which cost terms enter the reward.
struct RewardWeights {
    double c_vpp = 1.0;
    double c_shd = 1.0;
    double balancing = 1.0;
};

inline RewardWeights reward_weights(Variant v, UnsafeReward unsafe = UnsafeReward::day_ahead) {
    switch (v) {
        case Variant::uRL: return {0.0, 0.0, unsafe == UnsafeReward::day_ahead ? 0.0 : 1.0};
        case Variant::shRL: return {1.0, 0.0, 1.0};
        case Variant::sRL: return {1.0, 1.0, 1.0};
    }
    return {};
}

/// Settlement of the gap between the cleared and the dispatched exchange.
inline double balancing_cost(double cleared_kw, double dispatched_kw, double mcp, double factor, double dt_h = 1.0) {
    return std::abs(cleared_kw - dispatched_kw) * factor * mcp * dt_h;
}

inline double total_reward(double r_da, double c_vpp, double c_shd, double balancing, const RewardWeights& w) {
    return r_da - w.c_vpp * c_vpp - w.c_shd * c_shd - w.balancing * balancing;
}

struct EnvConfig {
    Variant variant = Variant::sRL;
    ForecastMode forecast = ForecastMode::with_forecast;
    UnsafeReward unsafe_reward = UnsafeReward::day_ahead;
    ShieldConfig shield{};
    DispatchOptions dispatch{};
    double price_cap = 10.0;        ///< EUR/kWh, upper end of the price action
    double quantity_cap_kw = 0.0;   ///< 0: installed generation of the fleet
    double balancing_factor = 1.2;  ///< balancing price / MCP
    double load_day_std = 0.08;     ///< relative, one draw per episode
    double load_hour_std = 0.03;    ///< relative, per hour and load
    bool reference_prices = true;   ///< also clear without the VPP and as a price taker
};

inline void validate(const EnvConfig& c) {
    validate_shield(c.shield);
    if (!(c.price_cap > 0.0)) throw ConfigError("price cap must be positive");
    if (!(c.quantity_cap_kw >= 0.0)) throw ConfigError("quantity cap must be nonnegative");
    if (!(c.balancing_factor >= 1.0)) throw ConfigError("balancing factor must be at least 1");
    if (!(c.load_day_std >= 0.0) || !(c.load_hour_std >= 0.0)) throw ConfigError("load noise must be nonnegative");
}

// ----------------------------------------------------------------------------
// State encoding

struct RawState {
    int t = 0;
    std::vector<double> p_load, q_load;  ///< kW / kvar per load
    std::vector<double> p_res;           ///< forecast kW per renewable
    std::vector<double> chi;             ///< kWh per storage
};

/// Scale bound per field; raw values in [0, 2*bound] map affinely onto [0, 1].
struct StateScales {
    std::vector<double> p_load, q_load, p_res, chi;
};

/// [t/23, p_load, q_load, p_res (with forecast only), chi]. Entries outside
/// twice their bound are clipped and counted.
inline VectorXd assemble_state(const RawState& raw, const StateScales& sc, ForecastMode mode, long* clips = nullptr) {
    const bool fc = mode == ForecastMode::with_forecast;
    if (raw.p_load.size() != sc.p_load.size() || raw.q_load.size() != sc.q_load.size() ||
        raw.p_res.size() != sc.p_res.size() || raw.chi.size() != sc.chi.size())
        throw ConfigError("state fields do not match their scale bounds");
    if (raw.t < 0 || raw.t >= kHoursPerDay) throw ConfigError("hour index outside 0..23");
    const std::size_t n = 1 + raw.p_load.size() + raw.q_load.size() + (fc ? raw.p_res.size() : 0) + raw.chi.size();
    VectorXd x(static_cast<Eigen::Index>(n));
    Eigen::Index k = 0;
    x[k++] = raw.t / 23.0;
    auto put = [&](const std::vector<double>& v, const std::vector<double>& bound) {
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double y = bound[i] > 0.0 ? v[i] / (2.0 * bound[i]) : 0.0;
            if ((y < 0.0 || y > 1.0) && clips) ++*clips;
            x[k++] = std::clamp(y, 0.0, 1.0);
        }
    };
    put(raw.p_load, sc.p_load);
    put(raw.q_load, sc.q_load);
    if (fc) put(raw.p_res, sc.p_res);
    put(raw.chi, sc.chi);
    return x;
}

// ----------------------------------------------------------------------------
// Episode and step records

struct EpisodeSeeds {
    std::uint64_t load = 0;   ///< load and renewable noise
    std::uint64_t rival = 0;  ///< rival bid jitter
};

struct StepRecord {
    int hour = 0;
    double price_bid = 0.0;      ///< EUR/kWh
    double quantity_bid = 0.0;   ///< kW, positive sells
    double shielded_bid = 0.0;   ///< kW
    double u_min = 0.0;
    double u_max = 0.0;
    bool shield_active = false;
    double intervention_kw = 0.0;
    double c_shd = 0.0;  ///< penalty the shield charges, logged in every shielded variant
    double mcp = 0.0;
    double cleared_kw = 0.0;     ///< signed, positive sold
    double dispatched_kw = 0.0;  ///< P_disp handed to the dispatch
    double r_da = 0.0;
    double c_vpp = 0.0;
    double balancing = 0.0;
    double reward = 0.0;
    double pmc = 0.0;
    double mcp_absent = 0.0;       ///< rivals only
    double mcp_price_taker = 0.0;  ///< VPP bids u_max at its marginal cost
    double losses_kw = 0.0;
    double worst_violation = 0.0;
    double storage_kw = 0.0;  ///< total storage injection, discharge positive
    double chi_kwh = 0.0;     ///< total stored energy after the step
    DispatchStatus dispatch_status = DispatchStatus::optimal;
};

struct StepResult {
    VectorXd next_state;
    StepRecord record;
    bool done = false;
};

/// Everything drawn at reset for one day.
struct EpisodeData {
    std::array<std::vector<double>, kHoursPerDay> p_load, q_load;  ///< per load
    std::array<AvailabilityDraw, kHoursPerDay> avail;
    std::array<RivalBids, kHoursPerDay> rivals;
    double day_factor = 1.0;
};

class VppEnv {
public:
    VppEnv(NetworkModel net, DerFleet fleet, RivalScenario rivals, EnvConfig cfg)
        : net_(std::move(net)), base_(std::move(fleet)), rivals_(std::move(rivals)), cfg_(cfg) {
        validate(cfg_);
        validate_fleet(base_, net_);
        validate_scenario(rivals_);
        if (cfg_.quantity_cap_kw == 0.0) cfg_.quantity_cap_kw = base_.installed_generation_kw();
        if (!(cfg_.quantity_cap_kw > 0.0)) throw ConfigError("quantity cap is zero: the fleet has no generation");
        weights_ = reward_weights(cfg_.variant, cfg_.unsafe_reward);
        loads_ = base_.indices_of<Load>();
        res_ = base_.indices_of<Renewable>();
        storage_ = base_.indices_of<Storage>();
        for (std::size_t i : loads_) {
            const auto& l = base_.units[i].as<Load>();
            scales_.p_load.push_back(*std::max_element(l.p_kw.begin(), l.p_kw.end()));
            scales_.q_load.push_back(*std::max_element(l.q_kvar.begin(), l.q_kvar.end()));
        }
        for (std::size_t i : res_) scales_.p_res.push_back(base_.units[i].as<Renewable>().s_max);
        for (std::size_t i : storage_) scales_.chi.push_back(base_.units[i].as<Storage>().chi_max);
        fleet_ = base_;
        state_dim_ = static_cast<int>(assemble_state(observe_raw(), scales_, cfg_.forecast).size());
    }

    [[nodiscard]] int state_dim() const { return state_dim_; }
    [[nodiscard]] int hour() const { return t_; }
    [[nodiscard]] bool done() const { return t_ >= kHoursPerDay; }
    [[nodiscard]] const EnvConfig& config() const { return cfg_; }
    [[nodiscard]] const NetworkModel& network() const { return net_; }
    [[nodiscard]] const DerFleet& fleet() const { return fleet_; }
    [[nodiscard]] const RivalScenario& rivals() const { return rivals_; }
    [[nodiscard]] const EpisodeData& episode() const { return ep_; }
    [[nodiscard]] const StateScales& scales() const { return scales_; }
    [[nodiscard]] long clip_count() const { return clips_; }
    [[nodiscard]] const DispatchResult& last_dispatch() const { return last_dispatch_; }
    [[nodiscard]] const FeasibleExportInterval& last_interval() const { return last_interval_; }
    [[nodiscard]] const AvailabilityDraw& availability(int t) const { return ep_.avail[static_cast<std::size_t>(t)]; }

    /// Draws the day: load scaling and noise, renewable availability and the
    /// rival stacks of all 24 hours. Storage returns to its initial energy.
    VectorXd reset(const EpisodeSeeds& seeds) {
        fleet_ = base_;
        Rng load_rng(seeds.load), rival_rng(seeds.rival);
        std::normal_distribution<double> normal(0.0, 1.0);
        ep_.day_factor = std::max(0.0, 1.0 + cfg_.load_day_std * normal(load_rng));
        for (int t = 0; t < kHoursPerDay; ++t) {
            const auto h = static_cast<std::size_t>(t);
            ep_.p_load[h].clear();
            ep_.q_load[h].clear();
            for (std::size_t i : loads_) {
                const double f = std::max(0.0, ep_.day_factor * (1.0 + cfg_.load_hour_std * normal(load_rng)));
                auto& l = fleet_.units[i].as<Load>();
                l.p_kw[h] *= f;
                l.q_kvar[h] *= f;
                ep_.p_load[h].push_back(l.p_kw[h]);
                ep_.q_load[h].push_back(l.q_kvar[h]);
            }
            ep_.avail[h] = sample_availability(fleet_.units, t, load_rng);
            ep_.rivals[h] = generate_rival_bids(t, rivals_, rival_rng);
        }
        t_ = 0;
        interval_hour_ = -1;
        return observe();
    }

    [[nodiscard]] RawState observe_raw() const {
        RawState raw;
        raw.t = std::min(t_, kHoursPerDay - 1);
        const auto h = static_cast<std::size_t>(raw.t);
        for (std::size_t k = 0; k < loads_.size(); ++k) {
            const auto& l = fleet_.units[loads_[k]].as<Load>();
            raw.p_load.push_back(l.p_kw[h]);
            raw.q_load.push_back(l.q_kvar[h]);
        }
        for (std::size_t i : res_) raw.p_res.push_back(fleet_.units[i].as<Renewable>().availability_kw[h]);
        for (std::size_t i : storage_) raw.chi.push_back(fleet_.units[i].as<Storage>().chi);
        return raw;
    }

    VectorXd observe() { return assemble_state(observe_raw(), scales_, cfg_.forecast, &clips_); }

    /// Agent action in [0,1]^2 to (price, quantity).
    [[nodiscard]] std::pair<double, double> denormalize(const VectorXd& a) const {
        if (a.size() != 2) throw ConfigError("action must have two components");
        const double pa = std::clamp(a[0], 0.0, 1.0), qa = std::clamp(a[1], 0.0, 1.0);
        return {pa * cfg_.price_cap, (2.0 * qa - 1.0) * cfg_.quantity_cap_kw};
    }

    /// Feasible export interval of the current hour, computed once per hour.
    const FeasibleExportInterval& interval() {
        if (done()) throw ConfigError("no current hour in a finished episode; reset first");
        if (interval_hour_ != t_) {
            try {
                interval_ = feasible_export_interval(net_, fleet_, ep_.avail[static_cast<std::size_t>(t_)], t_,
                                                     cfg_.dispatch);
            } catch (const Error& e) {
                throw EpisodeAborted(t_, std::string("feasible interval: ") + e.what());
            }
            interval_hour_ = t_;
        }
        return interval_;
    }

    StepResult step_normalized(const VectorXd& a) {
        const auto [price, quantity] = denormalize(a);
        return step(price, quantity);
    }

    /// One hour: shield, auction, dispatch, storage, reward.
    StepResult step(double price, double quantity_kw) {
        if (done()) throw ConfigError("step called on a finished episode; reset first");
        if (!std::isfinite(price) || !std::isfinite(quantity_kw) || price < 0.0)
            throw ConfigError("bid price must be finite and nonnegative, quantity finite");
        const int t = t_;
        const auto h = static_cast<std::size_t>(t);
        const auto& avail = ep_.avail[h];
        StepRecord rec;
        rec.hour = t;
        rec.price_bid = price;
        rec.quantity_bid = quantity_kw;

        last_interval_ = interval();
        rec.u_min = last_interval_.u_min;
        rec.u_max = last_interval_.u_max;

        // (1) shield
        ShieldConfig sc = cfg_.shield;
        sc.enabled = sc.enabled && cfg_.variant != Variant::uRL;
        const auto sh = project_bid(quantity_kw, last_interval_, sc);
        rec.shielded_bid = sh.shielded_bid;
        rec.shield_active = sh.activated;
        rec.intervention_kw = sh.intervention();
        rec.c_shd = sh.penalty;

        // (2) auction
        const auto& rb = ep_.rivals[h];
        auto supply = rb.supply;
        auto demand = rb.demand;
        const double q = sh.shielded_bid;
        if (q >= 0.0)
            supply.push_back(Bid{kVppOwner, Side::supply, price, q});
        else
            demand.push_back(Bid{kVppOwner, Side::demand, price, -q});
        const auto out = clear(supply, demand);
        rec.mcp = out.mcp;
        rec.cleared_kw = out.net_cleared(kVppOwner);
        rec.r_da = settle(out, kVppOwner, cfg_.dispatch.dt_h);

        // (3) dispatch of the nearest feasible exchange; the gap is bought or
        // sold at the balancing price.
        rec.dispatched_kw = last_interval_.clamp(rec.cleared_kw);
        rec.balancing =
            balancing_cost(rec.cleared_kw, rec.dispatched_kw, out.mcp, cfg_.balancing_factor, cfg_.dispatch.dt_h);
        last_dispatch_ = solve_opf(net_, fleet_, avail, t, rec.dispatched_kw, cfg_.dispatch);
        rec.dispatch_status = last_dispatch_.status;
        if (!last_dispatch_.feasible)
            throw EpisodeAborted(t, std::string("dispatch of ") + std::to_string(rec.dispatched_kw) + " kW: " +
                                        to_string(last_dispatch_.status) +
                                        (last_dispatch_.note.empty() ? "" : " (" + last_dispatch_.note + ")"));
        rec.c_vpp = last_dispatch_.c_vpp;
        rec.pmc = last_dispatch_.pmc;
        rec.losses_kw = last_dispatch_.flow.losses_kw;
        rec.worst_violation = last_dispatch_.limits.worst_violation;

        if (cfg_.reference_prices) {
            rec.mcp_absent = clear(rb.supply, rb.demand).mcp;
            auto taker = rb.supply;
            taker.push_back(Bid{kVppOwner, Side::supply, last_interval_.at_max.pmc, std::max(0.0, rec.u_max)});
            rec.mcp_price_taker = clear(taker, rb.demand).mcp;
        }

        // (4) storage
        for (std::size_t i : storage_) {
            auto& s = fleet_.units[i].as<Storage>();
            try {
                s.chi = step_soe(s, last_dispatch_.p_kw[i], cfg_.dispatch.dt_h);
                rec.storage_kw += last_dispatch_.p_kw[i];
            } catch (const InfeasibleError& e) {
                throw EpisodeAborted(t, std::string("storage: ") + e.what());
            }
            rec.chi_kwh += s.chi;
        }

        // (5) reward
        rec.reward = total_reward(rec.r_da, rec.c_vpp, rec.c_shd, rec.balancing, weights_);

        ++t_;
        StepResult res;
        res.record = rec;
        res.done = done();
        res.next_state = observe();
        return res;
    }

    [[nodiscard]] const RewardWeights& weights() const { return weights_; }

private:
    NetworkModel net_;
    DerFleet base_;
    DerFleet fleet_;
    RivalScenario rivals_;
    EnvConfig cfg_;
    RewardWeights weights_;
    std::vector<std::size_t> loads_, res_, storage_;
    StateScales scales_;
    int state_dim_ = 0;
    int t_ = 0;
    long clips_ = 0;
    EpisodeData ep_;
    FeasibleExportInterval last_interval_;
    FeasibleExportInterval interval_;
    int interval_hour_ = -1;
    DispatchResult last_dispatch_;
};

}  // namespace vppbid
