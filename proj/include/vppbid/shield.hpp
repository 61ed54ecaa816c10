#pragma once

// Projection of the bid quantity onto the feasible PCC exchange interval.

#include <algorithm>
#include <cmath>

#include "vppbid/dispatch.hpp"
#include "vppbid/errors.hpp"

namespace vppbid {

struct ShieldConfig {
    double epsilon = 1.0;    ///< EUR per kW of intervention
    double tolerance = 1.0;  ///< kW; smaller corrections do not count as activations
    bool enabled = true;
};

struct ShieldOutcome {
    double original_bid = 0.0;  ///< kW
    double shielded_bid = 0.0;  ///< kW
    bool activated = false;
    double penalty = 0.0;  ///< c_shd, EUR

    [[nodiscard]] double intervention() const { return std::abs(shielded_bid - original_bid); }
};

inline void validate_shield(const ShieldConfig& cfg) {
    if (!(cfg.epsilon >= 0.0)) throw ConfigError("shield epsilon must be nonnegative");
    if (!(cfg.tolerance >= 0.0)) throw ConfigError("shield tolerance must be nonnegative");
}

/// Scalar l2 projection: clamp to [u_min, u_max].
inline ShieldOutcome project_bid(double p_bid_kw, double u_min, double u_max, const ShieldConfig& cfg) {
    if (!(u_min <= u_max) || !std::isfinite(u_min) || !std::isfinite(u_max))
        throw ConfigError("shield received an invalid feasible interval");
    ShieldOutcome out;
    out.original_bid = p_bid_kw;
    out.shielded_bid = cfg.enabled ? std::clamp(p_bid_kw, u_min, u_max) : p_bid_kw;
    out.activated = cfg.enabled && out.intervention() > cfg.tolerance;
    out.penalty = out.activated ? cfg.epsilon * out.intervention() : 0.0;
    return out;
}

inline ShieldOutcome project_bid(double p_bid_kw, const FeasibleExportInterval& interval, const ShieldConfig& cfg) {
    return project_bid(p_bid_kw, interval.u_min, interval.u_max, cfg);
}

inline double shield_penalty(const ShieldOutcome& outcome, const ShieldConfig& cfg) {
    return outcome.activated ? cfg.epsilon * outcome.intervention() : 0.0;
}

}  // namespace vppbid
