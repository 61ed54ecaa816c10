#pragma once

// Capability sets of distributed energy resources, renewable availability
// sampling, battery energy dynamics and the DER configuration tables.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <random>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "vppbid/errors.hpp"
#include "vppbid/grid.hpp"
#include "vppbid/textdoc.hpp"

namespace vppbid {

inline constexpr int kHoursPerDay = 24;
using HourlyProfile = std::array<double, kHoursPerDay>;
using Rng = std::mt19937_64;

// ============================================================================
// Unit kinds
// ============================================================================

struct Conventional {
    double p_min = 0.0;  ///< kW
    double p_max = 0.0;  ///< kW
    double s_max = 0.0;  ///< kVA
    double cost = 0.0;   ///< EUR/kWh
};

/// Multiplicative Gaussian error on the hourly mean.
struct NoiseModel {
    double relative_std = 0.15;
};

struct Renewable {
    double s_max = 0.0;               ///< kVA
    double power_factor_floor = 0.0;  ///< a in [0, 1]
    HourlyProfile availability_kw{};  ///< hourly mean (also the forecast)
    NoiseModel noise{};
    double cost = 0.0;  ///< EUR/kWh, zero for wind/PV
};

struct Storage {
    double p_max = 0.0;    ///< kW
    double s_max = 0.0;    ///< kVA
    double chi_min = 0.0;  ///< kWh
    double chi_max = 0.0;  ///< kWh
    double chi = 0.0;      ///< kWh, current state of energy
    double cost = 0.0;     ///< EUR/kWh
};

struct Load {
    HourlyProfile p_kw{};    ///< consumption, positive
    HourlyProfile q_kvar{};  ///< consumption, positive
    double tariff = 0.0;     ///< EUR/kWh paid by the load
};

using DerKind = std::variant<Conventional, Renewable, Storage, Load>;

struct DerUnit {
    std::string name;
    int bus = 0;
    DerKind kind;

    template <class T>
    [[nodiscard]] bool is() const { return std::holds_alternative<T>(kind); }
    template <class T>
    [[nodiscard]] const T& as() const { return std::get<T>(kind); }
    template <class T>
    [[nodiscard]] T& as() { return std::get<T>(kind); }

    /// Controllable source (anything but a load).
    [[nodiscard]] bool controllable() const { return !is<Load>(); }
};

inline const char* kind_name(const DerUnit& u) {
    if (u.is<Conventional>()) return "conventional";
    if (u.is<Renewable>()) return "renewable";
    if (u.is<Storage>()) return "storage";
    return "load";
}

/// Per-unit availability for one hour, aligned with the unit list.
/// Entries of non-renewable units are zero.
struct AvailabilityDraw {
    std::vector<double> p_res;     ///< realized upper limit, kW
    std::vector<double> p_res_fc;  ///< noise-free forecast, kW
};

inline void validate_unit(const DerUnit& u) {
    const std::string who = "unit '" + u.name + "' at bus " + std::to_string(u.bus);
    std::visit(
        [&](const auto& k) {
            using K = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<K, Conventional>) {
                if (!(0.0 <= k.p_min && k.p_min <= k.p_max && k.p_max <= k.s_max))
                    throw ConfigError(who + ": need 0 <= p_min <= p_max <= s_max");
                if (!(k.cost >= 0.0)) throw ConfigError(who + ": negative cost");
            } else if constexpr (std::is_same_v<K, Renewable>) {
                if (!(k.s_max > 0.0)) throw ConfigError(who + ": s_max must be positive");
                if (!(k.power_factor_floor >= 0.0 && k.power_factor_floor <= 1.0))
                    throw ConfigError(who + ": power factor floor outside [0, 1]");
                if (!(k.noise.relative_std >= 0.0)) throw ConfigError(who + ": negative noise level");
                for (double v : k.availability_kw)
                    if (!(v >= 0.0)) throw ConfigError(who + ": negative availability");
            } else if constexpr (std::is_same_v<K, Storage>) {
                if (!(k.p_max >= 0.0 && k.p_max <= k.s_max)) throw ConfigError(who + ": need 0 <= p_max <= s_max");
                if (!(k.chi_min <= k.chi && k.chi <= k.chi_max))
                    throw ConfigError(who + ": state of energy outside [chi_min, chi_max]");
            } else {
                if (!(k.tariff >= 0.0)) throw ConfigError(who + ": negative tariff");
                for (double v : k.p_kw)
                    if (!std::isfinite(v)) throw ConfigError(who + ": non-finite load profile");
            }
        },
        u.kind);
}

// ============================================================================
// Capability sets
// ============================================================================

struct CapabilityContext {
    double p_res = 0.0;  ///< realized renewable limit, kW
    int hour = 0;
    double dt_h = 1.0;
    double tol = 1e-6;  ///< kW / kvar / kWh slack on every inequality
};

/// Membership of (p, q) in the unit's set of allowable operating points.
inline bool capability_contains(const DerUnit& unit, double p, double q, const CapabilityContext& ctx = {}) {
    const double tol = ctx.tol;
    auto in_circle = [&](double s_max) { return p * p + q * q <= (s_max + tol) * (s_max + tol); };
    return std::visit(
        [&](const auto& k) -> bool {
            using K = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<K, Conventional>) {
                return p >= k.p_min - tol && p <= k.p_max + tol && in_circle(k.s_max);
            } else if constexpr (std::is_same_v<K, Renewable>) {
                if (p < -tol || p > ctx.p_res + tol || !in_circle(k.s_max)) return false;
                const double s = std::hypot(p, q);
                if (s <= tol) return true;  // curtailed to zero
                return p >= k.power_factor_floor * s - tol;
            } else if constexpr (std::is_same_v<K, Storage>) {
                if (std::abs(p) > k.p_max + tol || !in_circle(k.s_max)) return false;
                const double next = k.chi - p * ctx.dt_h;
                return next >= k.chi_min - tol && next <= k.chi_max + tol;
            } else {
                const auto t = static_cast<std::size_t>(ctx.hour);
                return std::abs(p + k.p_kw[t]) <= tol && std::abs(q + k.q_kvar[t]) <= tol;
            }
        },
        unit.kind);
}

/// Active-power range of a controllable unit for this hour, honouring the
/// energy bounds of storage over one step of length dt.
struct ActiveRange {
    double lo = 0.0;
    double hi = 0.0;
};

inline ActiveRange active_range(const DerUnit& unit, double p_res, double dt_h = 1.0) {
    if (const auto* c = std::get_if<Conventional>(&unit.kind)) return {c->p_min, c->p_max};
    if (const auto* r = std::get_if<Renewable>(&unit.kind)) return {0.0, std::clamp(p_res, 0.0, r->s_max)};
    if (const auto* s = std::get_if<Storage>(&unit.kind)) {
        const double hi = std::min(s->p_max, (s->chi - s->chi_min) / dt_h);
        const double lo = std::max(-s->p_max, -(s->chi_max - s->chi) / dt_h);
        return {std::min(lo, 0.0), std::max(hi, 0.0)};
    }
    return {0.0, 0.0};
}

/// Largest |q| available at active output p.
inline double reactive_headroom(const DerUnit& unit, double p) {
    auto circle = [p](double s) { return std::sqrt(std::max(0.0, s * s - p * p)); };
    if (const auto* c = std::get_if<Conventional>(&unit.kind)) return circle(c->s_max);
    if (const auto* s = std::get_if<Storage>(&unit.kind)) return circle(s->s_max);
    if (const auto* r = std::get_if<Renewable>(&unit.kind)) {
        if (p <= 0.0) return 0.0;
        const double a = r->power_factor_floor;
        const double pf_limit = a > 0.0 ? p * std::sqrt(std::max(0.0, 1.0 - a * a)) / a : circle(r->s_max);
        return std::min(pf_limit, circle(r->s_max));
    }
    return 0.0;
}

/// Marginal production cost of a controllable unit.
inline double unit_cost(const DerUnit& unit) {
    if (const auto* c = std::get_if<Conventional>(&unit.kind)) return c->cost;
    if (const auto* r = std::get_if<Renewable>(&unit.kind)) return r->cost;
    if (const auto* s = std::get_if<Storage>(&unit.kind)) return s->cost;
    return 0.0;
}

// ============================================================================
// Dynamics and sampling
// ============================================================================

/// State of energy after injecting p (discharge positive) for dt hours.
inline double step_soe(const Storage& unit, double p_kw, double dt_h = 1.0, double tol = 1e-6) {
    if (std::abs(p_kw) > unit.p_max + tol)
        throw InfeasibleError("storage power " + std::to_string(p_kw) + " kW exceeds p_max");
    const double next = unit.chi - p_kw * dt_h;
    if (next < unit.chi_min - tol || next > unit.chi_max + tol)
        throw InfeasibleError("storage state of energy " + std::to_string(next) + " kWh outside [" +
                              std::to_string(unit.chi_min) + ", " + std::to_string(unit.chi_max) + "]");
    return std::clamp(next, unit.chi_min, unit.chi_max);
}

inline AvailabilityDraw sample_availability(const std::vector<DerUnit>& units, int t, Rng& rng) {
    if (t < 0 || t >= kHoursPerDay) throw ConfigError("hour index outside 0..23");
    AvailabilityDraw d;
    d.p_res.assign(units.size(), 0.0);
    d.p_res_fc.assign(units.size(), 0.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < units.size(); ++i) {
        const auto* r = std::get_if<Renewable>(&units[i].kind);
        if (r == nullptr) continue;
        const double mean = r->availability_kw[static_cast<std::size_t>(t)];
        const double z = normal(rng);
        d.p_res_fc[i] = mean;
        d.p_res[i] = std::clamp(mean * (1.0 + r->noise.relative_std * z), 0.0, r->s_max);
    }
    return d;
}

/// Noise-free availability (forecast used as realization).
inline AvailabilityDraw forecast_availability(const std::vector<DerUnit>& units, int t) {
    AvailabilityDraw d;
    d.p_res.assign(units.size(), 0.0);
    d.p_res_fc.assign(units.size(), 0.0);
    for (std::size_t i = 0; i < units.size(); ++i)
        if (const auto* r = std::get_if<Renewable>(&units[i].kind)) {
            d.p_res_fc[i] = r->availability_kw[static_cast<std::size_t>(t)];
            d.p_res[i] = std::clamp(d.p_res_fc[i], 0.0, r->s_max);
        }
    return d;
}

struct PowerPair {
    double p = 0.0;
    double q = 0.0;
};

/// Nodal injection of an inflexible load (consumption enters negative).
inline PowerPair load_injection(const Load& load, int t) {
    if (t < 0 || t >= kHoursPerDay) throw ConfigError("hour index outside 0..23");
    const auto h = static_cast<std::size_t>(t);
    return {-load.p_kw[h], -load.q_kvar[h]};
}

// ============================================================================
// Fleets and configuration tables
// ============================================================================

struct DerFleet {
    std::string name;
    std::string load_curve;
    std::vector<DerUnit> units;

    /// Sum of p_max over generators, renewables (s_max) and storage.
    [[nodiscard]] double installed_generation_kw() const {
        double total = 0.0;
        for (const auto& u : units) {
            if (const auto* c = std::get_if<Conventional>(&u.kind)) total += c->p_max;
            if (const auto* r = std::get_if<Renewable>(&u.kind)) total += r->s_max;
            if (const auto* s = std::get_if<Storage>(&u.kind)) total += s->p_max;
        }
        return total;
    }

    template <class T>
    [[nodiscard]] std::vector<std::size_t> indices_of() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < units.size(); ++i)
            if (units[i].is<T>()) out.push_back(i);
        return out;
    }

    [[nodiscard]] double total_load_kw(int t) const {
        double total = 0.0;
        for (const auto& u : units)
            if (const auto* l = std::get_if<Load>(&u.kind)) total += l->p_kw[static_cast<std::size_t>(t)];
        return total;
    }
};

inline void validate_fleet(const DerFleet& fleet, const NetworkModel& net) {
    std::vector<int> owner(net.bus_count(), -1);
    for (std::size_t i = 0; i < fleet.units.size(); ++i) {
        const auto& u = fleet.units[i];
        validate_unit(u);
        if (u.bus < 0 || static_cast<std::size_t>(u.bus) >= net.bus_count())
            throw ConfigError("unit '" + u.name + "': bus " + std::to_string(u.bus) + " does not exist");
        if (u.bus == net.root()) throw ConfigError("unit '" + u.name + "': the root bus cannot host a unit");
        auto& slot = owner[static_cast<std::size_t>(u.bus)];
        if (slot >= 0)
            throw ConfigError("bus " + std::to_string(u.bus) + " hosts both '" +
                              fleet.units[static_cast<std::size_t>(slot)].name + "' and '" + u.name + "'");
        slot = static_cast<int>(i);
    }
}

/// Build the injection profile of the fixed loads only.
inline InjectionProfile load_injections(const DerFleet& fleet, const NetworkModel& net, int t) {
    InjectionProfile inj(net.bus_count());
    for (const auto& u : fleet.units)
        if (const auto* l = std::get_if<Load>(&u.kind)) {
            const auto pq = load_injection(*l, t);
            inj.p_kw[static_cast<std::size_t>(u.bus)] += pq.p;
            inj.q_kvar[static_cast<std::size_t>(u.bus)] += pq.q;
        }
    return inj;
}

namespace detail {

inline HourlyProfile read_hours(const TextRow& row, std::size_t first, const TextDocument& doc) {
    if (row.cells.size() != first + kHoursPerDay)
        throw ConfigError(doc.where(row.line) + ": expected " + std::to_string(kHoursPerDay) + " hourly values");
    HourlyProfile h{};
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = parse_double(row.cells[first + i], doc.where(row.line));
    return h;
}

inline const TextRow* find_row(const TextTable& table, const std::string& key) {
    for (const auto& row : table.rows)
        if (!row.cells.empty() && row.cells[0] == key) return &row;
    return nullptr;
}

}  // namespace detail

/// Names of the configurations listed in a DER table file.
inline std::vector<std::string> der_configuration_names(const TextDocument& doc) {
    std::vector<std::string> names;
    for (const auto& row : doc.require_table("configurations").rows) names.push_back(row.cells.at(0));
    return names;
}

/// Assemble one named DER configuration from a table file.
///
/// Loads are shared by all configurations; their hourly profile is the
/// nominal demand times the chosen load curve, with reactive power from the
/// file's fixed power factor.
inline DerFleet load_der_fleet(const TextDocument& doc, const std::string& config, const std::string& load_curve) {
    bool known = false;
    for (const auto& n : der_configuration_names(doc)) known = known || n == config;
    if (!known) throw ConfigError(doc.source() + ": unknown DER configuration '" + config + "'");

    DerFleet fleet;
    fleet.name = config;
    fleet.load_curve = load_curve;
    const double pf = doc.get_double("load_power_factor", 0.95);
    if (!(pf > 0.0 && pf <= 1.0)) throw ConfigError(doc.source() + ": load_power_factor outside (0, 1]");
    const double tan_phi = std::sqrt(1.0 - pf * pf) / pf;

    const auto* curve_row = detail::find_row(doc.require_table("load_curves"), load_curve);
    if (curve_row == nullptr) throw ConfigError(doc.source() + ": unknown load curve '" + load_curve + "'");
    const HourlyProfile curve = detail::read_hours(*curve_row, 1, doc);

    auto int_cell = [&](const TextRow& row, std::size_t i) {
        return static_cast<int>(parse_int(row.cells.at(i), doc.where(row.line)));
    };
    auto num_cell = [&](const TextRow& row, std::size_t i) { return parse_double(row.cells.at(i), doc.where(row.line)); };
    auto need = [&](const TextRow& row, std::size_t n) {
        if (row.cells.size() != n)
            throw ConfigError(doc.where(row.line) + ": expected " + std::to_string(n) + " columns");
    };

    if (const auto* t = doc.table("conventional"))
        for (const auto& row : t->rows) {
            need(row, 7);
            if (row.cells[0] != config) continue;
            fleet.units.push_back(DerUnit{row.cells[1], int_cell(row, 2),
                                          Conventional{num_cell(row, 3), num_cell(row, 4), num_cell(row, 5),
                                                       num_cell(row, 6)}});
        }
    if (const auto* t = doc.table("renewable"))
        for (const auto& row : t->rows) {
            need(row, 7);
            if (row.cells[0] != config) continue;
            Renewable r;
            r.s_max = num_cell(row, 3);
            r.power_factor_floor = num_cell(row, 4);
            const auto* prof = detail::find_row(doc.require_table("renewable_profiles"), row.cells[5]);
            if (prof == nullptr) throw ConfigError(doc.where(row.line) + ": unknown profile '" + row.cells[5] + "'");
            const HourlyProfile shape = detail::read_hours(*prof, 1, doc);
            for (std::size_t h = 0; h < shape.size(); ++h) r.availability_kw[h] = shape[h] * r.s_max;
            r.noise.relative_std = num_cell(row, 6);
            fleet.units.push_back(DerUnit{row.cells[1], int_cell(row, 2), r});
        }
    if (const auto* t = doc.table("storage"))
        for (const auto& row : t->rows) {
            need(row, 9);
            if (row.cells[0] != config) continue;
            Storage s;
            s.p_max = num_cell(row, 3);
            s.s_max = num_cell(row, 4);
            s.chi_min = num_cell(row, 5);
            s.chi_max = num_cell(row, 6);
            s.chi = s.chi_min + num_cell(row, 7) * (s.chi_max - s.chi_min);
            s.cost = num_cell(row, 8);
            fleet.units.push_back(DerUnit{row.cells[1], int_cell(row, 2), s});
        }
    for (const auto& row : doc.require_table("loads").rows) {
        need(row, 4);
        Load l;
        const double nominal = num_cell(row, 2);
        for (std::size_t h = 0; h < curve.size(); ++h) {
            l.p_kw[h] = nominal * curve[h];
            l.q_kvar[h] = l.p_kw[h] * tan_phi;
        }
        l.tariff = num_cell(row, 3);
        fleet.units.push_back(DerUnit{row.cells[0], int_cell(row, 1), l});
    }
    return fleet;
}

inline DerFleet load_der_fleet(const std::filesystem::path& path, const std::string& config,
                               const std::string& load_curve) {
    return load_der_fleet(TextDocument::from_file(path), config, load_curve);
}

}  // namespace vppbid
