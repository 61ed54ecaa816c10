#pragma once

// Radial feeder model, DistFlow backward/forward sweep and limit evaluation.
//
// Public quantities are in kW / kvar / kVA; the solver works in per-unit on
// the network's base power. Bus ids are dense integers 0..n-1.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "vppbid/errors.hpp"
#include "vppbid/textdoc.hpp"

namespace vppbid {

// ============================================================================
// Network description and validated model
// ============================================================================

struct BusSpec {
    int id = 0;
    std::string name;
    double v_min = 0.95;  ///< p.u.
    double v_max = 1.05;  ///< p.u.
};

struct BranchSpec {
    int from_bus = 0;
    int to_bus = 0;
    double r = 0.0;      ///< p.u.
    double x = 0.0;      ///< p.u.
    double s_max = 0.0;  ///< p.u.
};

struct NetworkSpec {
    std::string name = "network";
    double base_power_kva = 1000.0;
    double base_voltage_kv = 4.16;
    int root_id = 0;
    std::vector<BusSpec> buses;
    std::vector<BranchSpec> branches;
};

/// Branch oriented from parent (sending end) to child.
struct Branch {
    int parent = 0;
    int child = 0;
    double r = 0.0;
    double x = 0.0;
    double s_max = 0.0;
    std::size_t spec_index = 0;  ///< position in the originating spec
};

class NetworkModel {
public:
    [[nodiscard]] const std::string& name() const { return name_; }
    [[nodiscard]] double base_power_kva() const { return base_power_kva_; }
    [[nodiscard]] double base_voltage_kv() const { return base_voltage_kv_; }
    [[nodiscard]] int root() const { return root_; }
    [[nodiscard]] std::size_t bus_count() const { return buses_.size(); }
    [[nodiscard]] std::size_t branch_count() const { return branches_.size(); }
    [[nodiscard]] const std::vector<BusSpec>& buses() const { return buses_; }
    [[nodiscard]] const std::vector<Branch>& branches() const { return branches_; }

    /// Index of the branch feeding `bus`, or -1 for the root.
    [[nodiscard]] int parent_branch(int bus) const { return parent_branch_[static_cast<std::size_t>(bus)]; }
    /// Branch indices leaving `bus` towards the leaves.
    [[nodiscard]] const std::vector<int>& child_branches(int bus) const {
        return child_branches_[static_cast<std::size_t>(bus)];
    }
    /// Branch indices in breadth-first order from the root.
    [[nodiscard]] const std::vector<int>& sweep_order() const { return order_; }
    [[nodiscard]] int depth(int bus) const { return depth_[static_cast<std::size_t>(bus)]; }
    [[nodiscard]] int max_depth() const { return *std::max_element(depth_.begin(), depth_.end()); }

    /// Returns a copy with one branch's apparent-power limit replaced (kVA).
    [[nodiscard]] NetworkModel with_branch_limit(std::size_t branch, double s_max_kva) const {
        NetworkModel copy = *this;
        if (branch >= copy.branches_.size() || !(s_max_kva > 0.0))
            throw ConfigError("with_branch_limit: invalid branch index or limit");
        copy.branches_[branch].s_max = s_max_kva / base_power_kva_;
        return copy;
    }

private:
    friend NetworkModel build_network(NetworkSpec spec);

    std::string name_;
    double base_power_kva_ = 1000.0;
    double base_voltage_kv_ = 4.16;
    int root_ = 0;
    std::vector<BusSpec> buses_;
    std::vector<Branch> branches_;
    std::vector<int> parent_branch_;
    std::vector<std::vector<int>> child_branches_;
    std::vector<int> order_;
    std::vector<int> depth_;
};

namespace detail {

inline std::string branch_label(std::size_t k, const BranchSpec& b) {
    return "branch " + std::to_string(k) + " (" + std::to_string(b.from_bus) + "-" + std::to_string(b.to_bus) + ")";
}

struct DisjointSets {
    std::vector<int> parent;
    explicit DisjointSets(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
    int find(int a) {
        while (parent[static_cast<std::size_t>(a)] != a) {
            parent[static_cast<std::size_t>(a)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(a)])];
            a = parent[static_cast<std::size_t>(a)];
        }
        return a;
    }
    bool unite(int a, int b) {
        a = find(a);
        b = find(b);
        if (a == b) return false;
        parent[static_cast<std::size_t>(a)] = b;
        return true;
    }
};

}  // namespace detail

/// Validate a network description and orient it as a tree rooted at `root_id`.
inline NetworkModel build_network(NetworkSpec spec) {
    const std::size_t n = spec.buses.size();
    if (n < 2) throw ConfigError("network needs at least two buses");
    if (!(spec.base_power_kva > 0.0)) throw ConfigError("base power must be positive");
    if (!(spec.base_voltage_kv > 0.0)) throw ConfigError("base voltage must be positive");

    std::vector<BusSpec> buses(n);
    std::vector<bool> seen(n, false);
    for (const auto& b : spec.buses) {
        if (b.id < 0 || static_cast<std::size_t>(b.id) >= n)
            throw ConfigError("bus id " + std::to_string(b.id) + " outside 0.." + std::to_string(n - 1));
        if (seen[static_cast<std::size_t>(b.id)]) throw ConfigError("bus " + std::to_string(b.id) + " listed twice");
        if (!(b.v_min > 0.0) || !(b.v_min < b.v_max))
            throw ConfigError("bus " + std::to_string(b.id) + ": voltage limits must satisfy 0 < v_min < v_max");
        seen[static_cast<std::size_t>(b.id)] = true;
        buses[static_cast<std::size_t>(b.id)] = b;
    }
    if (spec.root_id < 0 || static_cast<std::size_t>(spec.root_id) >= n)
        throw ConfigError("root bus " + std::to_string(spec.root_id) + " does not exist");

    detail::DisjointSets sets(n);
    for (std::size_t k = 0; k < spec.branches.size(); ++k) {
        const auto& b = spec.branches[k];
        const std::string label = detail::branch_label(k, b);
        if (b.from_bus < 0 || b.to_bus < 0 || static_cast<std::size_t>(b.from_bus) >= n ||
            static_cast<std::size_t>(b.to_bus) >= n)
            throw ConfigError(label + ": references an unknown bus");
        if (b.from_bus == b.to_bus) throw ConfigError(label + ": self loop");
        if (!(b.r >= 0.0)) throw ConfigError(label + ": resistance must be nonnegative");
        if (!std::isfinite(b.x)) throw ConfigError(label + ": reactance must be finite");
        if (!(b.s_max > 0.0)) throw ConfigError(label + ": nonpositive s_max");
        if (!sets.unite(b.from_bus, b.to_bus)) throw ConfigError(label + ": cycle detected");
    }
    for (std::size_t i = 0; i < n; ++i)
        if (sets.find(static_cast<int>(i)) != sets.find(spec.root_id))
            throw ConfigError("bus " + std::to_string(i) + " is disconnected from the root");
    // Acyclic and connected over n buses implies exactly n-1 branches.

    std::vector<std::vector<std::size_t>> adjacency(n);
    for (std::size_t k = 0; k < spec.branches.size(); ++k) {
        adjacency[static_cast<std::size_t>(spec.branches[k].from_bus)].push_back(k);
        adjacency[static_cast<std::size_t>(spec.branches[k].to_bus)].push_back(k);
    }

    NetworkModel net;
    net.name_ = spec.name;
    net.base_power_kva_ = spec.base_power_kva;
    net.base_voltage_kv_ = spec.base_voltage_kv;
    net.root_ = spec.root_id;
    net.buses_ = std::move(buses);
    net.parent_branch_.assign(n, -1);
    net.child_branches_.assign(n, {});
    net.depth_.assign(n, 0);

    std::vector<int> queue{spec.root_id};
    std::vector<bool> visited(n, false);
    visited[static_cast<std::size_t>(spec.root_id)] = true;
    for (std::size_t head = 0; head < queue.size(); ++head) {
        const int bus = queue[head];
        for (std::size_t k : adjacency[static_cast<std::size_t>(bus)]) {
            const auto& b = spec.branches[k];
            const int other = b.from_bus == bus ? b.to_bus : b.from_bus;
            if (visited[static_cast<std::size_t>(other)]) continue;
            visited[static_cast<std::size_t>(other)] = true;
            const int idx = static_cast<int>(net.branches_.size());
            net.branches_.push_back(Branch{bus, other, b.r, b.x, b.s_max, k});
            net.parent_branch_[static_cast<std::size_t>(other)] = idx;
            net.child_branches_[static_cast<std::size_t>(bus)].push_back(idx);
            net.depth_[static_cast<std::size_t>(other)] = net.depth_[static_cast<std::size_t>(bus)] + 1;
            net.order_.push_back(idx);
            queue.push_back(other);
        }
    }
    return net;
}

/// Read a network file: header keys plus [buses] and [branches] tables.
///
///   [buses]     id  name  v_min  v_max
///   [branches]  from  to  r_pu  x_pu  s_max_kva
inline NetworkModel load_network(const std::filesystem::path& path) {
    const auto doc = TextDocument::from_file(path);
    NetworkSpec spec;
    spec.name = doc.get("name").value_or(path.stem().string());
    spec.base_power_kva = doc.require_double("base_power_kva");
    spec.base_voltage_kv = doc.require_double("base_voltage_kv");
    spec.root_id = static_cast<int>(parse_int(doc.get("root").value_or("0"), doc.source() + ": root"));

    for (const auto& row : doc.require_table("buses").rows) {
        if (row.cells.size() != 4) throw ConfigError(doc.where(row.line) + ": bus rows need 4 columns");
        const std::string at = doc.where(row.line);
        spec.buses.push_back(BusSpec{static_cast<int>(parse_int(row.cells[0], at)), row.cells[1],
                                     parse_double(row.cells[2], at), parse_double(row.cells[3], at)});
    }
    for (const auto& row : doc.require_table("branches").rows) {
        if (row.cells.size() != 5) throw ConfigError(doc.where(row.line) + ": branch rows need 5 columns");
        const std::string at = doc.where(row.line);
        spec.branches.push_back(BranchSpec{static_cast<int>(parse_int(row.cells[0], at)),
                                           static_cast<int>(parse_int(row.cells[1], at)),
                                           parse_double(row.cells[2], at), parse_double(row.cells[3], at),
                                           parse_double(row.cells[4], at) / spec.base_power_kva});
    }
    return build_network(std::move(spec));
}

// ============================================================================
// Power flow
// ============================================================================

/// Nodal injections, generation positive. Root entries are ignored.
struct InjectionProfile {
    std::vector<double> p_kw;
    std::vector<double> q_kvar;

    InjectionProfile() = default;
    explicit InjectionProfile(std::size_t buses) : p_kw(buses, 0.0), q_kvar(buses, 0.0) {}
};

enum class FlowStatus { converged, max_iterations, voltage_collapse };

inline const char* to_string(FlowStatus s) {
    switch (s) {
        case FlowStatus::converged: return "converged";
        case FlowStatus::max_iterations: return "max_iterations";
        case FlowStatus::voltage_collapse: return "voltage_collapse";
    }
    return "unknown";
}

struct PowerFlowSolution {
    FlowStatus status = FlowStatus::max_iterations;
    int iterations = 0;
    double residual = 0.0;          ///< p.u., max over all DistFlow equations
    std::vector<double> p_kw;       ///< per branch, parent -> child
    std::vector<double> q_kvar;     ///< per branch
    std::vector<double> i_sq;       ///< per branch, p.u.
    std::vector<double> v;          ///< per bus, p.u. magnitude
    double pcc_active_kw = 0.0;     ///< P_01, total flow out of the root
    double pcc_reactive_kvar = 0.0;
    double losses_kw = 0.0;

    [[nodiscard]] bool converged() const { return status == FlowStatus::converged; }
};

struct PowerFlowOptions {
    double tolerance = 1e-8;
    int max_iterations = 100;
};

/// Reusable scratch space so repeated solves do not allocate.
struct PowerFlowWorkspace {
    std::vector<double> p, q, isq, vsq, pinj, qinj;
};

namespace detail {

/// Max mismatch of the DistFlow equations and the current definition, p.u.
inline double distflow_residual(const NetworkModel& net, const std::vector<double>& pinj,
                                const std::vector<double>& qinj, const std::vector<double>& p,
                                const std::vector<double>& q, const std::vector<double>& isq,
                                const std::vector<double>& vsq) {
    double res = 0.0;
    const auto& br = net.branches();
    for (std::size_t k = 0; k < br.size(); ++k) {
        const auto& b = br[k];
        const auto j = static_cast<std::size_t>(b.child);
        const auto i = static_cast<std::size_t>(b.parent);
        double sp = 0.0, sq = 0.0;
        for (int c : net.child_branches(b.child)) {
            sp += p[static_cast<std::size_t>(c)];
            sq += q[static_cast<std::size_t>(c)];
        }
        res = std::max(res, std::abs(p[k] - (sp - pinj[j] + b.r * isq[k])));
        res = std::max(res, std::abs(q[k] - (sq - qinj[j] + b.x * isq[k])));
        res = std::max(res, std::abs(vsq[i] - vsq[j] - 2.0 * (b.r * p[k] + b.x * q[k]) +
                                     (b.r * b.r + b.x * b.x) * isq[k]));
        res = std::max(res, std::abs(isq[k] * vsq[i] - (p[k] * p[k] + q[k] * q[k])));
    }
    return res;
}

}  // namespace detail

/// DistFlow backward/forward sweep from a flat start.
inline PowerFlowSolution solve_power_flow(const NetworkModel& net, const InjectionProfile& inj, double v_root = 1.0,
                                          const PowerFlowOptions& opt = {}, PowerFlowWorkspace* ws = nullptr) {
    const std::size_t nb = net.bus_count();
    const std::size_t nl = net.branch_count();
    if (inj.p_kw.size() != nb || inj.q_kvar.size() != nb)
        throw ConfigError("injection profile size does not match the bus count");
    if (!(v_root > 0.8 && v_root < 1.2)) throw ConfigError("root voltage must lie in (0.8, 1.2) p.u.");

    PowerFlowWorkspace local;
    PowerFlowWorkspace& w = ws != nullptr ? *ws : local;
    const double base = net.base_power_kva();
    w.pinj.resize(nb);
    w.qinj.resize(nb);
    for (std::size_t i = 0; i < nb; ++i) {
        w.pinj[i] = inj.p_kw[i] / base;
        w.qinj[i] = inj.q_kvar[i] / base;
    }
    w.pinj[static_cast<std::size_t>(net.root())] = 0.0;
    w.qinj[static_cast<std::size_t>(net.root())] = 0.0;
    w.p.assign(nl, 0.0);
    w.q.assign(nl, 0.0);
    w.isq.assign(nl, 0.0);
    w.vsq.assign(nb, v_root * v_root);

    const auto& br = net.branches();
    const auto& order = net.sweep_order();
    PowerFlowSolution sol;
    sol.status = FlowStatus::max_iterations;

    for (int it = 1; it <= opt.max_iterations; ++it) {
        // Backward: aggregate flows towards the root with the last loss estimate.
        for (auto o = order.rbegin(); o != order.rend(); ++o) {
            const auto k = static_cast<std::size_t>(*o);
            const auto& b = br[k];
            double sp = 0.0, sq = 0.0;
            for (int c : net.child_branches(b.child)) {
                sp += w.p[static_cast<std::size_t>(c)];
                sq += w.q[static_cast<std::size_t>(c)];
            }
            const auto j = static_cast<std::size_t>(b.child);
            w.p[k] = sp - w.pinj[j] + b.r * w.isq[k];
            w.q[k] = sq - w.qinj[j] + b.x * w.isq[k];
        }
        // Forward: voltages, then currents from the sending-end voltage.
        bool collapsed = false;
        for (int ko : order) {
            const auto k = static_cast<std::size_t>(ko);
            const auto& b = br[k];
            const auto i = static_cast<std::size_t>(b.parent);
            const auto j = static_cast<std::size_t>(b.child);
            w.isq[k] = (w.p[k] * w.p[k] + w.q[k] * w.q[k]) / w.vsq[i];
            w.vsq[j] = w.vsq[i] - 2.0 * (b.r * w.p[k] + b.x * w.q[k]) + (b.r * b.r + b.x * b.x) * w.isq[k];
            if (!(w.vsq[j] > 0.0)) {
                collapsed = true;
                break;
            }
        }
        sol.iterations = it;
        if (collapsed) {
            sol.status = FlowStatus::voltage_collapse;
            sol.residual = std::numeric_limits<double>::infinity();
            break;
        }
        sol.residual = detail::distflow_residual(net, w.pinj, w.qinj, w.p, w.q, w.isq, w.vsq);
        if (!std::isfinite(sol.residual)) {
            sol.status = FlowStatus::voltage_collapse;
            break;
        }
        if (sol.residual <= opt.tolerance) {
            sol.status = FlowStatus::converged;
            break;
        }
    }

    sol.p_kw.resize(nl);
    sol.q_kvar.resize(nl);
    sol.i_sq = w.isq;
    sol.v.resize(nb);
    double losses = 0.0;
    for (std::size_t k = 0; k < nl; ++k) {
        sol.p_kw[k] = w.p[k] * base;
        sol.q_kvar[k] = w.q[k] * base;
        losses += br[k].r * w.isq[k];
    }
    for (std::size_t i = 0; i < nb; ++i) sol.v[i] = w.vsq[i] > 0.0 ? std::sqrt(w.vsq[i]) : 0.0;
    double p0 = 0.0, q0 = 0.0;
    for (int c : net.child_branches(net.root())) {
        p0 += w.p[static_cast<std::size_t>(c)];
        q0 += w.q[static_cast<std::size_t>(c)];
    }
    sol.pcc_active_kw = p0 * base;
    sol.pcc_reactive_kvar = q0 * base;
    sol.losses_kw = losses * base;
    return sol;
}

// ============================================================================
// Limits
// ============================================================================

enum class VoltageFlag { ok, under, over };

struct LimitReport {
    std::vector<double> loading;             ///< per branch, S / s_max
    std::vector<VoltageFlag> voltage_flags;  ///< per bus
    double worst_violation = 0.0;            ///< max normalized exceedance; <= 0 means inside
    bool feasible = true;

    enum class Family { none, branch_flow, voltage };
    Family worst_family = Family::none;
    int worst_element = -1;  ///< branch or bus index of the worst constraint
};

inline const char* to_string(LimitReport::Family f) {
    switch (f) {
        case LimitReport::Family::none: return "none";
        case LimitReport::Family::branch_flow: return "branch flow";
        case LimitReport::Family::voltage: return "voltage";
    }
    return "unknown";
}

/// Branch exceedance is S/s_max - 1; voltage exceedance is the p.u. distance
/// outside [v_min, v_max]. Both are relative to the respective base.
inline LimitReport evaluate_limits(const NetworkModel& net, const PowerFlowSolution& sol, double tolerance = 1e-9) {
    LimitReport rep;
    const double base = net.base_power_kva();
    const auto& br = net.branches();
    rep.loading.resize(br.size());
    rep.voltage_flags.assign(net.bus_count(), VoltageFlag::ok);
    rep.worst_violation = -std::numeric_limits<double>::infinity();

    for (std::size_t k = 0; k < br.size(); ++k) {
        const double s = std::sqrt(sol.p_kw[k] * sol.p_kw[k] + sol.q_kvar[k] * sol.q_kvar[k]);
        rep.loading[k] = s / (br[k].s_max * base);
        const double e = rep.loading[k] - 1.0;
        if (e > rep.worst_violation) {
            rep.worst_violation = e;
            rep.worst_family = LimitReport::Family::branch_flow;
            rep.worst_element = static_cast<int>(k);
        }
    }
    for (std::size_t i = 0; i < net.bus_count(); ++i) {
        const auto& bus = net.buses()[i];
        const double v = sol.v[i];
        if (v < bus.v_min) rep.voltage_flags[i] = VoltageFlag::under;
        if (v > bus.v_max) rep.voltage_flags[i] = VoltageFlag::over;
        const double e = std::max(bus.v_min - v, v - bus.v_max);
        if (e > rep.worst_violation) {
            rep.worst_violation = e;
            rep.worst_family = LimitReport::Family::voltage;
            rep.worst_element = static_cast<int>(i);
        }
    }
    rep.feasible = rep.worst_violation <= tolerance;
    return rep;
}

}  // namespace vppbid
