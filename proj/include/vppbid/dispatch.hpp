#pragma once

// Internal dispatch of the VPP for a prescribed PCC exchange, the interval of
// feasible exchanges and the production marginal cost.
//
// solve_opf: merit-order continuation (cheapest units first, total output
// iterated against the power flow until the PCC balance closes), followed by
// a projected coordinate-descent polish over (p, q) that first removes limit
// violations and then lowers cost while staying feasible.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "vppbid/ders.hpp"
#include "vppbid/errors.hpp"
#include "vppbid/grid.hpp"

namespace vppbid {

struct DispatchOptions {
    double pcc_tolerance_kw = 1.0;       ///< accepted |P_01 + P_disp|
    double balance_tolerance_kw = 1e-4;  ///< target of the loss iteration
    double interval_tolerance_kw = 1.0;  ///< bisection resolution
    double limit_tolerance = 1e-9;       ///< on normalized exceedance
    double dt_h = 1.0;
    int max_balance_iterations = 60;
    bool polish = true;         ///< run coordinate descent after merit order
    bool optimize_cost = true;  ///< false: stop once feasible (feasibility queries)
    PowerFlowOptions flow{};
};

enum class DispatchStatus {
    optimal,                ///< feasible dispatch found
    infeasible_capability,  ///< P_disp outside what the units can deliver
    infeasible_limits,      ///< no dispatch found that respects flow/voltage limits
    not_converged,          ///< power flow failed
};

inline const char* to_string(DispatchStatus s) {
    switch (s) {
        case DispatchStatus::optimal: return "optimal";
        case DispatchStatus::infeasible_capability: return "infeasible_capability";
        case DispatchStatus::infeasible_limits: return "infeasible_limits";
        case DispatchStatus::not_converged: return "not_converged";
    }
    return "unknown";
}

struct DispatchResult {
    DispatchStatus status = DispatchStatus::not_converged;
    bool feasible = false;
    int hour = 0;
    double p_disp_kw = 0.0;
    std::vector<double> p_kw;    ///< per fleet unit; loads carry their fixed injection
    std::vector<double> q_kvar;  ///< per fleet unit
    double generation_cost = 0.0;
    double load_revenue = 0.0;
    double c_vpp = 0.0;  ///< generation cost minus load revenue, EUR for one step
    double pmc = 0.0;
    double pcc_mismatch_kw = 0.0;  ///< P_01 + P_disp
    PowerFlowSolution flow;
    LimitReport limits;
    std::string note;  ///< binding constraint or failure reason
};

struct FeasibleExportInterval {
    double u_min = 0.0;  ///< kW, most negative feasible exchange (max import)
    double u_max = 0.0;  ///< kW, max feasible export
    DispatchResult at_min;
    DispatchResult at_max;

    [[nodiscard]] bool contains(double u, double tol = 0.0) const { return u >= u_min - tol && u <= u_max + tol; }
    [[nodiscard]] double clamp(double u) const { return std::clamp(u, u_min, u_max); }
};

double production_marginal_cost(const DispatchResult& result, const DerFleet& fleet, double tol = 1e-3);

namespace detail {

/// Snapshot of one dispatch hour: controllable units, their ranges and the
/// fixed load injections.
class DispatchModel {
public:
    DispatchModel(const NetworkModel& net, const DerFleet& fleet, const AvailabilityDraw& avail, int hour,
                  const DispatchOptions& opt)
        : net_(net), fleet_(fleet), opt_(opt), hour_(hour), base_(load_injections(fleet, net, hour)) {
        if (avail.p_res.size() != fleet.units.size())
            throw ConfigError("availability draw does not match the unit list");
        for (std::size_t i = 0; i < fleet.units.size(); ++i) {
            const auto& u = fleet.units[i];
            if (!u.controllable()) continue;
            const auto r = active_range(u, avail.p_res[i], opt.dt_h);
            unit_.push_back(i);
            lo_.push_back(r.lo);
            hi_.push_back(r.hi);
            cost_.push_back(unit_cost(u));
            p_res_.push_back(avail.p_res[i]);
        }
        merit_.resize(unit_.size());
        std::iota(merit_.begin(), merit_.end(), 0);
        auto rank = [&](std::size_t k) {
            const auto& u = fleet_.units[unit_[k]];
            return u.is<Renewable>() ? 0 : u.is<Storage>() ? 1 : 2;
        };
        std::stable_sort(merit_.begin(), merit_.end(), [&](std::size_t a, std::size_t b) {
            if (cost_[a] != cost_[b]) return cost_[a] < cost_[b];
            return rank(a) < rank(b);
        });
        for (std::size_t k = 0; k < unit_.size(); ++k) {
            g_lo_ += lo_[k];
            g_hi_ += hi_[k];
        }
    }

    [[nodiscard]] std::size_t size() const { return unit_.size(); }
    [[nodiscard]] double g_lo() const { return g_lo_; }
    [[nodiscard]] double g_hi() const { return g_hi_; }
    [[nodiscard]] double lo(std::size_t k) const { return lo_[k]; }
    [[nodiscard]] double hi(std::size_t k) const { return hi_[k]; }
    [[nodiscard]] const DispatchOptions& options() const { return opt_; }

    [[nodiscard]] double q_limit(std::size_t k, double p) const {
        return reactive_headroom(fleet_.units[unit_[k]], p);
    }

    /// Merit-order allocation of a total controllable output G.
    [[nodiscard]] std::vector<double> allocate(double g) const {
        std::vector<double> p(lo_);
        double rest = g - g_lo_;
        for (std::size_t k : merit_) {
            const double add = std::clamp(rest, 0.0, hi_[k] - lo_[k]);
            p[k] += add;
            rest -= add;
        }
        return p;
    }

    const PowerFlowSolution& flow(const std::vector<double>& p, const std::vector<double>& q) {
        inj_ = base_;
        for (std::size_t k = 0; k < unit_.size(); ++k) {
            const auto bus = static_cast<std::size_t>(fleet_.units[unit_[k]].bus);
            inj_.p_kw[bus] += p[k];
            inj_.q_kvar[bus] += q[k];
        }
        ++flow_calls_;
        last_ = solve_power_flow(net_, inj_, 1.0, opt_.flow, &ws_);
        return last_;
    }

    [[nodiscard]] double cost(const std::vector<double>& p) const {
        double c = 0.0;
        for (std::size_t k = 0; k < unit_.size(); ++k)
            if (!fleet_.units[unit_[k]].is<Storage>()) c += cost_[k] * p[k];
        return c;
    }

    /// Sum of squared positive exceedances (0 when inside every limit).
    [[nodiscard]] double violation(const LimitReport& rep) const {
        double v = 0.0;
        for (double l : rep.loading)
            if (l > 1.0) v += (l - 1.0) * (l - 1.0);
        for (std::size_t i = 0; i < net_.bus_count(); ++i) {
            const auto& b = net_.buses()[i];
            const double e = std::max(b.v_min - last_.v[i], last_.v[i] - b.v_max);
            if (e > 0.0) v += e * e;
        }
        return v;
    }

    DispatchResult finish(double u, const std::vector<double>& p, const std::vector<double>& q, DispatchStatus status,
                          std::string note) {
        DispatchResult r;
        r.hour = hour_;
        r.p_disp_kw = u;
        r.p_kw.assign(fleet_.units.size(), 0.0);
        r.q_kvar.assign(fleet_.units.size(), 0.0);
        for (std::size_t i = 0; i < fleet_.units.size(); ++i)
            if (const auto* l = std::get_if<Load>(&fleet_.units[i].kind)) {
                const auto pq = load_injection(*l, hour_);
                r.p_kw[i] = pq.p;
                r.q_kvar[i] = pq.q;
                r.load_revenue += l->tariff * l->p_kw[static_cast<std::size_t>(hour_)] * opt_.dt_h;
            }
        for (std::size_t k = 0; k < unit_.size(); ++k) {
            r.p_kw[unit_[k]] = p[k];
            r.q_kvar[unit_[k]] = q[k];
        }
        r.generation_cost = cost(p) * opt_.dt_h;
        r.c_vpp = r.generation_cost - r.load_revenue;
        r.flow = flow(p, q);
        r.limits = evaluate_limits(net_, r.flow, opt_.limit_tolerance);
        r.pcc_mismatch_kw = r.flow.pcc_active_kw + u;
        r.status = status;
        if (status == DispatchStatus::optimal) {
            const bool ok = r.flow.converged() && r.limits.feasible &&
                            std::abs(r.pcc_mismatch_kw) <= opt_.pcc_tolerance_kw;
            if (!ok) {
                r.status = r.flow.converged() ? DispatchStatus::infeasible_limits : DispatchStatus::not_converged;
                if (note.empty()) note = "final verification failed";
            }
        }
        r.feasible = r.status == DispatchStatus::optimal;
        r.pmc = r.feasible ? production_marginal_cost(r, fleet_) : 0.0;
        r.note = std::move(note);
        return r;
    }

    [[nodiscard]] long flow_calls() const { return flow_calls_; }
    [[nodiscard]] const PowerFlowSolution& last_flow() const { return last_; }
    [[nodiscard]] const NetworkModel& net() const { return net_; }

    /// Root of f(x) = P_01(x) + u on [xlo, xhi] for a decreasing response.
    /// `apply(x)` must set up the operating point and return the flow.
    template <class Apply>
    bool balance(double u, double x0, double xlo, double xhi, Apply&& apply, double& x_out, bool& flow_ok) {
        flow_ok = true;
        double x = std::clamp(x0, xlo, xhi);
        const PowerFlowSolution* s = &apply(x);
        if (!s->converged()) return flow_ok = false;
        double f = s->pcc_active_kw + u;
        double x_prev = x, f_prev = f, slope = -1.0;
        for (int it = 0; it < opt_.max_balance_iterations; ++it) {
            if (std::abs(f) <= opt_.balance_tolerance_kw) break;
            double next = std::clamp(x - f / slope, xlo, xhi);
            if (next == x) break;  // pinned at a bound
            x_prev = x;
            f_prev = f;
            x = next;
            s = &apply(x);
            if (!s->converged()) return flow_ok = false;
            f = s->pcc_active_kw + u;
            if (x != x_prev) {
                const double sl = (f - f_prev) / (x - x_prev);
                if (sl < -0.2 && sl > -5.0) slope = sl;
            }
        }
        x_out = x;
        return std::abs(f) <= opt_.pcc_tolerance_kw;
    }

private:
    const NetworkModel& net_;
    const DerFleet& fleet_;
    DispatchOptions opt_;
    int hour_;
    InjectionProfile base_;
    InjectionProfile inj_;
    PowerFlowWorkspace ws_;
    PowerFlowSolution last_;
    long flow_calls_ = 0;

    std::vector<std::size_t> unit_;
    std::vector<double> lo_, hi_, cost_, p_res_;
    std::vector<std::size_t> merit_;
    double g_lo_ = 0.0, g_hi_ = 0.0;
};

/// Operating point under evaluation in the polish.
struct Candidate {
    std::vector<double> p, q;
    double cost = 0.0;
    double violation = 0.0;
    bool valid = false;
};

class Polisher {
public:
    Polisher(DispatchModel& model, double u) : m_(model), u_(u) {}

    /// Rebalance with unit `s` as slack, then score.
    Candidate evaluate(std::vector<double> p, std::vector<double> q, std::size_t s) {
        Candidate c;
        bool flow_ok = true;
        double x = p[s];
        auto apply = [&](double ps) -> const PowerFlowSolution& {
            p[s] = ps;
            const double lim = m_.q_limit(s, ps);
            q[s] = std::clamp(q[s], -lim, lim);
            return m_.flow(p, q);
        };
        if (!m_.balance(u_, x, m_.lo(s), m_.hi(s), apply, x, flow_ok)) return c;
        if (p[s] != x) apply(x);
        const auto rep = evaluate_limits(m_.net(), m_.last_flow(), m_.options().limit_tolerance);
        c.violation = m_.violation(rep);
        c.cost = m_.cost(p);
        c.p = std::move(p);
        c.q = std::move(q);
        c.valid = true;
        return c;
    }

    [[nodiscard]] bool better(const Candidate& a, const Candidate& b) const {
        if (!a.valid) return false;
        if (!b.valid) return true;
        const double vt = kFeasibleViolation;
        if (a.violation > vt || b.violation > vt) return a.violation < b.violation * (1.0 - 1e-9);
        return a.cost < b.cost - 1e-9;
    }

    /// Slack for reactive moves: the unit with the most active-power room.
    [[nodiscard]] std::size_t roomiest(const std::vector<double>& p) const {
        std::size_t best = 0;
        double room = -1.0;
        for (std::size_t k = 0; k < m_.size(); ++k) {
            const double r = std::min(p[k] - m_.lo(k), m_.hi(k) - p[k]);
            if (r > room) {
                room = r;
                best = k;
            }
        }
        return best;
    }

    /// Coordinate descent on reactive setpoints only, minimizing violation.
    Candidate repair_reactive(Candidate cur) {
        for (double step : {256.0, 64.0, 16.0, 4.0, 1.0}) {
            bool improved = true;
            for (int pass = 0; improved && pass < 20 && cur.violation > kFeasibleViolation; ++pass) {
                improved = false;
                for (std::size_t k = 0; k < m_.size(); ++k)
                    for (double dir : {1.0, -1.0}) {
                        auto q = cur.q;
                        const double lim = m_.q_limit(k, cur.p[k]);
                        q[k] = std::clamp(q[k] + dir * step, -lim, lim);
                        if (q[k] == cur.q[k]) continue;
                        auto cand = evaluate(cur.p, q, roomiest(cur.p));
                        if (cand.valid && cand.violation < cur.violation * (1.0 - 1e-9)) {
                            cur = std::move(cand);
                            improved = true;
                        }
                    }
            }
        }
        return cur;
    }

    Candidate run(Candidate cur, bool optimize_cost) {
        const std::size_t n = m_.size();
        if (n == 0) return cur;
        for (double step : {256.0, 64.0, 16.0, 4.0, 1.0, 0.25}) {
            bool improved = true;
            for (int pass = 0; improved && pass < 40; ++pass) {
                improved = false;
                if (!optimize_cost && cur.violation <= kFeasibleViolation) return cur;
                // Active transfers i -> k, with k closing the balance.
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t k = 0; k < n; ++k) {
                        if (i == k) continue;
                        auto p = cur.p;
                        p[i] = std::clamp(p[i] + step, m_.lo(i), m_.hi(i));
                        if (p[i] == cur.p[i]) continue;
                        auto q = cur.q;
                        const double lim = m_.q_limit(i, p[i]);
                        q[i] = std::clamp(q[i], -lim, lim);
                        p[k] = std::clamp(p[k] - (p[i] - cur.p[i]), m_.lo(k), m_.hi(k));
                        auto cand = evaluate(std::move(p), std::move(q), k);
                        if (!cand.valid) continue;
                        if (cand.violation > kFeasibleViolation && cur.violation <= kFeasibleViolation &&
                            cand.cost < cur.cost - 1e-9)
                            cand = repair_reactive(std::move(cand));
                        if (better(cand, cur)) {
                            cur = std::move(cand);
                            improved = true;
                        }
                    }
                // Reactive moves.
                for (std::size_t k = 0; k < n; ++k)
                    for (double dir : {1.0, -1.0}) {
                        auto q = cur.q;
                        const double lim = m_.q_limit(k, cur.p[k]);
                        q[k] = std::clamp(q[k] + dir * step, -lim, lim);
                        if (q[k] == cur.q[k]) continue;
                        auto cand = evaluate(cur.p, std::move(q), roomiest(cur.p));
                        if (better(cand, cur)) {
                            cur = std::move(cand);
                            improved = true;
                        }
                    }
            }
        }
        return cur;
    }

    static constexpr double kFeasibleViolation = 1e-18;

private:
    DispatchModel& m_;
    double u_;
};

inline DispatchResult solve_opf_model(DispatchModel& m, double p_disp_kw) {
    const auto& opt = m.options();
    const std::size_t n = m.size();
    std::vector<double> q(n, 0.0);
    if (!std::isfinite(p_disp_kw)) throw ConfigError("P_disp must be finite");

    // Merit-order continuation on the total controllable output G.
    std::vector<double> p;
    double g = 0.0;
    bool flow_ok = true;
    auto apply = [&](double gg) -> const PowerFlowSolution& {
        p = m.allocate(gg);
        return m.flow(p, q);
    };
    // Lossless guess: G = u + loads, corrected by the iteration.
    const PowerFlowSolution& s0 = apply(m.g_lo());
    if (!s0.converged()) return m.finish(p_disp_kw, p, q, DispatchStatus::not_converged, "power flow failed");
    const double guess = m.g_lo() + (s0.pcc_active_kw + p_disp_kw);
    const bool balanced = n > 0 ? m.balance(p_disp_kw, guess, m.g_lo(), m.g_hi(), apply, g, flow_ok)
                                : std::abs(s0.pcc_active_kw + p_disp_kw) <= opt.pcc_tolerance_kw;
    if (!flow_ok) return m.finish(p_disp_kw, p, q, DispatchStatus::not_converged, "power flow failed");
    if (!balanced) {
        if (n > 0) apply(g);
        const double f = m.last_flow().pcc_active_kw + p_disp_kw;
        return m.finish(p_disp_kw, p, q, DispatchStatus::infeasible_capability,
                        f > 0.0 ? "exchange above what the units can deliver"
                                : "exchange below what the units can absorb");
    }
    if (n > 0) apply(g);

    Polisher polisher(m, p_disp_kw);
    Candidate cur;
    cur.p = p;
    cur.q = q;
    cur.cost = m.cost(p);
    cur.violation = m.violation(evaluate_limits(m.net(), m.last_flow(), opt.limit_tolerance));
    cur.valid = true;

    if (opt.polish && n > 0 && (cur.violation > Polisher::kFeasibleViolation || opt.optimize_cost))
        cur = polisher.run(std::move(cur), opt.optimize_cost);

    if (cur.violation > Polisher::kFeasibleViolation) {
        m.flow(cur.p, cur.q);
        const auto rep = evaluate_limits(m.net(), m.last_flow(), opt.limit_tolerance);
        return m.finish(p_disp_kw, cur.p, cur.q, DispatchStatus::infeasible_limits,
                        std::string(to_string(rep.worst_family)) + " limit binds");
    }
    return m.finish(p_disp_kw, cur.p, cur.q, DispatchStatus::optimal, "");
}

}  // namespace detail

/// Cost-minimal internal dispatch with P_01 = -P_disp.
inline DispatchResult solve_opf(const NetworkModel& net, const DerFleet& fleet, const AvailabilityDraw& avail,
                                int hour, double p_disp_kw, const DispatchOptions& opt = {}) {
    detail::DispatchModel model(net, fleet, avail, hour, opt);
    return detail::solve_opf_model(model, p_disp_kw);
}

inline double production_marginal_cost(const DispatchResult& result, const DerFleet& fleet, double tol) {
    double pmc = 0.0;
    for (std::size_t i = 0; i < fleet.units.size(); ++i) {
        const auto& u = fleet.units[i];
        if (!u.controllable() || result.p_kw.size() <= i) continue;
        if (result.p_kw[i] > tol) pmc = std::max(pmc, unit_cost(u));
    }
    return pmc;
}

/// Interval of PCC exchanges for which solve_opf finds a feasible dispatch.
///
/// Each end starts from the dispatch with every unit at its bound; when that
/// point violates a flow or voltage limit the end is located by bisection on
/// u with solve_opf feasibility as the predicate.
inline FeasibleExportInterval feasible_export_interval(const NetworkModel& net, const DerFleet& fleet,
                                                       const AvailabilityDraw& avail, int hour,
                                                       const DispatchOptions& opt = {}) {
    DispatchOptions probe = opt;
    probe.optimize_cost = false;
    detail::DispatchModel model(net, fleet, avail, hour, probe);
    const std::size_t n = model.size();

    auto extreme_exchange = [&](bool upper) {
        std::vector<double> p(n), q(n, 0.0);
        for (std::size_t k = 0; k < n; ++k) p[k] = upper ? model.hi(k) : model.lo(k);
        const auto& s = model.flow(p, q);
        if (!s.converged()) throw SolverError("power flow failed at the " + std::string(upper ? "upper" : "lower") +
                                              " extreme dispatch");
        return -s.pcc_active_kw;
    };
    const double u_hi_ext = extreme_exchange(true);
    const double u_lo_ext = extreme_exchange(false);

    auto feasible = [&](double u) {
        detail::DispatchModel m(net, fleet, avail, hour, probe);
        return detail::solve_opf_model(m, u);
    };

    // A feasible seed anywhere in the capability range.
    DispatchResult seed = feasible(u_hi_ext);
    double seed_u = u_hi_ext;
    if (!seed.feasible) {
        seed = feasible(u_lo_ext);
        seed_u = u_lo_ext;
    }
    std::string worst = seed.note;
    for (int k = 1; !seed.feasible && k < 20; ++k) {
        seed_u = u_lo_ext + (u_hi_ext - u_lo_ext) * k / 20.0;
        seed = feasible(seed_u);
        if (!seed.note.empty()) worst = seed.note;
    }
    if (!seed.feasible)
        throw InfeasibleError("no feasible PCC exchange at hour " + std::to_string(hour) + " (" + worst + ")");

    auto search = [&](double inside, DispatchResult inside_res, double outside) {
        // inside is feasible, outside is not (or is the capability extreme).
        const double tol = opt.interval_tolerance_kw;
        while (std::abs(outside - inside) > tol) {
            const double mid = 0.5 * (inside + outside);
            auto r = feasible(mid);
            if (r.feasible) {
                inside = mid;
                inside_res = std::move(r);
            } else {
                outside = mid;
            }
        }
        return std::make_pair(inside, std::move(inside_res));
    };

    FeasibleExportInterval iv;
    auto resolve = [&](double extreme) {
        auto r = feasible(extreme);
        if (r.feasible) return std::make_pair(extreme, std::move(r));
        return search(seed_u, seed, extreme);
    };
    auto [umax, rmax] = resolve(u_hi_ext);
    auto [umin, rmin] = resolve(u_lo_ext);
    iv.u_max = umax;
    iv.u_min = umin;
    iv.at_max = std::move(rmax);
    iv.at_min = std::move(rmin);
    if (iv.u_min > iv.u_max) throw SolverError("feasible exchange interval is empty");
    return iv;
}

}  // namespace vppbid
