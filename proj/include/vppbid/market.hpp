#pragma once

// Uniform-price day-ahead auction: merit-order clearing, clearing price
// selection, settlement and the rival bid generator.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "vppbid/ders.hpp"
#include "vppbid/errors.hpp"
#include "vppbid/textdoc.hpp"

namespace vppbid {

enum class Side { supply, demand };

inline constexpr int kVppOwner = 0;

struct Bid {
    int owner_id = 0;
    Side side = Side::supply;
    double price = 0.0;     ///< EUR/kWh
    double quantity = 0.0;  ///< kW
};

struct BidRef {
    Side side = Side::supply;
    std::size_t index = 0;  ///< position in the side's input list
};

struct MarketOutcome {
    double mcp = 0.0;
    std::vector<double> supply_cleared;  ///< aligned with the supply input
    std::vector<double> demand_cleared;  ///< aligned with the demand input
    std::vector<int> supply_owner;
    std::vector<int> demand_owner;
    double total_cleared = 0.0;
    double welfare = 0.0;
    std::optional<BidRef> marginal_bid;
    /// Interval of prices that are valid duals of the balance constraint.
    double dual_lo = 0.0;
    double dual_hi = 0.0;

    /// Signed quantity cleared for an owner: supply positive, demand negative.
    [[nodiscard]] double net_cleared(int owner) const {
        double total = 0.0;
        for (std::size_t i = 0; i < supply_cleared.size(); ++i)
            if (supply_owner[i] == owner) total += supply_cleared[i];
        for (std::size_t i = 0; i < demand_cleared.size(); ++i)
            if (demand_owner[i] == owner) total -= demand_cleared[i];
        return total;
    }
};

namespace detail {

inline void check_bids(const std::vector<Bid>& bids, Side side, const char* label) {
    if (bids.empty()) throw ConfigError(std::string("market clearing needs at least one ") + label + " bid");
    for (const auto& b : bids) {
        if (b.side != side) throw ConfigError(std::string(label) + " list contains a bid of the other side");
        if (!(b.price >= 0.0) || !std::isfinite(b.price) || !(b.quantity >= 0.0) || !std::isfinite(b.quantity))
            throw ConfigError(std::string(label) + " bid with negative or non-finite price/quantity");
    }
}

}  // namespace detail

/// Welfare-maximizing clearing by stack intersection.
///
/// The clearing price is the lowest valid dual of the balance constraint:
/// the marginal supply price, raised to the best rejected demand price if
/// that is higher. With nothing cleared it is the midpoint of the bid-ask gap
/// among bids with positive quantity.
inline MarketOutcome clear(const std::vector<Bid>& supply, const std::vector<Bid>& demand) {
    detail::check_bids(supply, Side::supply, "supply");
    detail::check_bids(demand, Side::demand, "demand");

    std::vector<std::size_t> so(supply.size()), dor(demand.size());
    std::iota(so.begin(), so.end(), 0);
    std::iota(dor.begin(), dor.end(), 0);
    std::stable_sort(so.begin(), so.end(), [&](auto a, auto b) { return supply[a].price < supply[b].price; });
    std::stable_sort(dor.begin(), dor.end(), [&](auto a, auto b) { return demand[a].price > demand[b].price; });

    MarketOutcome out;
    out.supply_cleared.assign(supply.size(), 0.0);
    out.demand_cleared.assign(demand.size(), 0.0);
    for (const auto& b : supply) out.supply_owner.push_back(b.owner_id);
    for (const auto& b : demand) out.demand_owner.push_back(b.owner_id);

    std::size_t i = 0, j = 0;
    double rs = supply.empty() ? 0.0 : supply[so[0]].quantity;
    double rd = demand.empty() ? 0.0 : demand[dor[0]].quantity;
    while (i < so.size() && j < dor.size() && supply[so[i]].price <= demand[dor[j]].price) {
        const double take = std::min(rs, rd);
        out.supply_cleared[so[i]] += take;
        out.demand_cleared[dor[j]] += take;
        out.total_cleared += take;
        rs -= take;
        rd -= take;
        if (rs <= 0.0) {
            out.supply_cleared[so[i]] = supply[so[i]].quantity;
            if (++i < so.size()) rs = supply[so[i]].quantity;
        }
        if (rd <= 0.0) {
            out.demand_cleared[dor[j]] = demand[dor[j]].quantity;
            if (++j < dor.size()) rd = demand[dor[j]].quantity;
        }
    }

    // Complementary-slackness bounds on the balance dual.
    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();
    std::optional<BidRef> lo_bid;
    auto raise = [&](double price, BidRef ref) {
        if (price > lo || (price == lo && lo_bid && lo_bid->side == Side::demand && ref.side == Side::supply)) {
            lo = price;
            lo_bid = ref;
        }
    };
    for (std::size_t k = 0; k < supply.size(); ++k) {
        const double q = supply[k].quantity, c = out.supply_cleared[k], g = supply[k].price;
        if (q <= 0.0) continue;
        if (c > 0.0) raise(g, {Side::supply, k});
        if (c < q) hi = std::min(hi, g);
    }
    for (std::size_t k = 0; k < demand.size(); ++k) {
        const double q = demand[k].quantity, c = out.demand_cleared[k], g = demand[k].price;
        if (q <= 0.0) continue;
        if (c < q) raise(g, {Side::demand, k});
        if (c > 0.0) hi = std::min(hi, g);
    }

    if (out.total_cleared > 0.0) {
        out.mcp = lo;
        out.marginal_bid = lo_bid;
    } else if (std::isfinite(lo) && std::isfinite(hi)) {
        out.mcp = 0.5 * (lo + hi);  // bid-ask gap of the bids that carry quantity
    } else if (std::isfinite(lo) || std::isfinite(hi)) {
        out.mcp = std::isfinite(lo) ? lo : hi;
    } else {
        double best_ask = std::numeric_limits<double>::infinity();
        double best_bid = -std::numeric_limits<double>::infinity();
        for (const auto& b : supply) best_ask = std::min(best_ask, b.price);
        for (const auto& b : demand) best_bid = std::max(best_bid, b.price);
        out.mcp = 0.5 * (best_ask + best_bid);
        lo = hi = out.mcp;
    }
    out.dual_lo = lo;
    out.dual_hi = hi;

    for (std::size_t k = 0; k < supply.size(); ++k) out.welfare -= supply[k].price * out.supply_cleared[k];
    for (std::size_t k = 0; k < demand.size(); ++k) out.welfare += demand[k].price * out.demand_cleared[k];
    return out;
}

/// Revenue of one owner: cleared supply earns, cleared demand pays.
inline double settle(const MarketOutcome& outcome, int owner_id, double dt_h = 1.0) {
    return outcome.net_cleared(owner_id) * outcome.mcp * dt_h;
}

// ============================================================================
// Rival participants
// ============================================================================

struct BlockSpec {
    double price_factor = 1.0;
    double quantity_factor = 0.0;
};

struct HourSpec {
    double anchor_price = 0.0;  ///< EUR/kWh
    double volume_kw = 0.0;     ///< scales every block quantity
    std::optional<double> pinned_price;
};

/// Rival stacks around a diurnal price anchor.
///
/// Supply blocks below the marginal block are priced off the anchor, the
/// marginal block sits at the clearing anchor c_t (the pinned price when
/// one is set, otherwise the anchor), and blocks above it as well as every
/// demand block are priced off c_t. Without jitter the stacks intersect at
/// c_t exactly. Prices of a pinned hour are not jittered.
struct RivalScenario {
    std::string name = "rivals";
    std::vector<BlockSpec> supply_blocks;
    std::vector<BlockSpec> demand_blocks;
    std::size_t marginal_block = 0;
    double price_jitter = 0.0;     ///< relative std of block prices
    double quantity_jitter = 0.0;  ///< relative std of block quantities
    std::array<HourSpec, kHoursPerDay> hours{};

    [[nodiscard]] double clearing_anchor(int t) const {
        const auto& h = hours[static_cast<std::size_t>(t)];
        return h.pinned_price.value_or(h.anchor_price);
    }
};

struct RivalBids {
    std::vector<Bid> supply;
    std::vector<Bid> demand;
};

inline constexpr int kRivalSupplyOwner = 100;
inline constexpr int kRivalDemandOwner = 200;

namespace detail {

inline RivalBids build_rival_bids(int t, const RivalScenario& sc, Rng* rng) {
    if (t < 0 || t >= kHoursPerDay) throw ConfigError("hour index outside 0..23");
    const auto& h = sc.hours[static_cast<std::size_t>(t)];
    const double c = sc.clearing_anchor(t);
    const bool pinned = h.pinned_price.has_value();
    std::normal_distribution<double> normal(0.0, 1.0);
    auto jitter = [&](double value, double rel, bool enabled) {
        if (rng == nullptr) return value;
        const double z = normal(*rng);  // drawn regardless, keeps streams aligned
        return enabled ? std::max(0.0, value * (1.0 + rel * z)) : value;
    };

    RivalBids out;
    for (std::size_t k = 0; k < sc.supply_blocks.size(); ++k) {
        const auto& b = sc.supply_blocks[k];
        double price = k < sc.marginal_block ? b.price_factor * h.anchor_price
                       : k == sc.marginal_block ? c
                                                : b.price_factor * c;
        price = jitter(price, sc.price_jitter, !pinned);
        const double qty = jitter(b.quantity_factor * h.volume_kw, sc.quantity_jitter, true);
        out.supply.push_back(Bid{kRivalSupplyOwner + static_cast<int>(k), Side::supply, price, qty});
    }
    for (std::size_t k = 0; k < sc.demand_blocks.size(); ++k) {
        const auto& b = sc.demand_blocks[k];
        const double price = jitter(b.price_factor * c, sc.price_jitter, !pinned);
        const double qty = jitter(b.quantity_factor * h.volume_kw, sc.quantity_jitter, true);
        out.demand.push_back(Bid{kRivalDemandOwner + static_cast<int>(k), Side::demand, price, qty});
    }
    return out;
}

}  // namespace detail

inline RivalBids generate_rival_bids(int t, const RivalScenario& scenario, Rng& rng) {
    return detail::build_rival_bids(t, scenario, &rng);
}

/// The unperturbed stacks of an hour.
inline RivalBids nominal_rival_bids(int t, const RivalScenario& scenario) {
    return detail::build_rival_bids(t, scenario, nullptr);
}

inline void validate_scenario(const RivalScenario& sc) {
    if (sc.supply_blocks.empty() || sc.demand_blocks.empty())
        throw ConfigError(sc.name + ": needs at least one supply and one demand block");
    if (sc.marginal_block >= sc.supply_blocks.size())
        throw ConfigError(sc.name + ": marginal block index out of range");
    if (!(sc.price_jitter >= 0.0) || !(sc.quantity_jitter >= 0.0))
        throw ConfigError(sc.name + ": jitter must be nonnegative");
    for (int t = 0; t < kHoursPerDay; ++t) {
        const auto& h = sc.hours[static_cast<std::size_t>(t)];
        if (!(h.anchor_price > 0.0) || !(h.volume_kw > 0.0))
            throw ConfigError(sc.name + ": hour " + std::to_string(t) + " needs a positive anchor and volume");
        const auto bids = nominal_rival_bids(t, sc);
        const auto out = clear(bids.supply, bids.demand);
        if (out.mcp != sc.clearing_anchor(t))
            throw ConfigError(sc.name + ": hour " + std::to_string(t) + " clears at " + std::to_string(out.mcp) +
                              " without jitter instead of its anchor " + std::to_string(sc.clearing_anchor(t)));
    }
}

/// Read a rival scenario file.
///
///   price_jitter = ...   quantity_jitter = ...   marginal_block = ...
///   [supply_blocks]  price_factor  quantity_factor
///   [demand_blocks]  price_factor  quantity_factor
///   [hours]          hour  anchor_price  volume_kw  pinned_price|-
inline RivalScenario load_rival_scenario(const std::filesystem::path& path) {
    const auto doc = TextDocument::from_file(path);
    RivalScenario sc;
    sc.name = doc.get("name").value_or(path.stem().string());
    sc.price_jitter = doc.get_double("price_jitter", 0.0);
    sc.quantity_jitter = doc.get_double("quantity_jitter", 0.0);
    sc.marginal_block = static_cast<std::size_t>(parse_int(doc.require("marginal_block"), doc.source()));

    auto blocks = [&](const char* table) {
        std::vector<BlockSpec> out;
        for (const auto& row : doc.require_table(table).rows) {
            if (row.cells.size() != 2) throw ConfigError(doc.where(row.line) + ": block rows need 2 columns");
            out.push_back({parse_double(row.cells[0], doc.where(row.line)), parse_double(row.cells[1], doc.where(row.line))});
        }
        return out;
    };
    sc.supply_blocks = blocks("supply_blocks");
    sc.demand_blocks = blocks("demand_blocks");

    std::array<bool, kHoursPerDay> seen{};
    for (const auto& row : doc.require_table("hours").rows) {
        const std::string at = doc.where(row.line);
        if (row.cells.size() != 4) throw ConfigError(at + ": hour rows need 4 columns");
        const long t = parse_int(row.cells[0], at);
        if (t < 0 || t >= kHoursPerDay || seen[static_cast<std::size_t>(t)])
            throw ConfigError(at + ": hour missing, repeated or out of range");
        seen[static_cast<std::size_t>(t)] = true;
        HourSpec h;
        h.anchor_price = parse_double(row.cells[1], at);
        h.volume_kw = parse_double(row.cells[2], at);
        if (row.cells[3] != "-") h.pinned_price = parse_double(row.cells[3], at);
        sc.hours[static_cast<std::size_t>(t)] = h;
    }
    for (int t = 0; t < kHoursPerDay; ++t)
        if (!seen[static_cast<std::size_t>(t)]) throw ConfigError(doc.source() + ": hour " + std::to_string(t) + " missing");
    validate_scenario(sc);
    return sc;
}

}  // namespace vppbid
