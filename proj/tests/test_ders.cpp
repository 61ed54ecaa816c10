#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <random>

#include "oracles.hpp"
#include "vppbid/ders.hpp"

using namespace vppbid;
using Catch::Approx;

namespace {

DerUnit renewable(double s_max, double a, double mean = 400.0, double noise = 0.0) {
    Renewable r;
    r.s_max = s_max;
    r.power_factor_floor = a;
    r.availability_kw.fill(mean);
    r.noise.relative_std = noise;
    return {"res", 1, r};
}

DerUnit conventional(double p_min, double p_max, double s_max) { return {"gen", 1, Conventional{p_min, p_max, s_max, 4.0}}; }

DerUnit storage(double chi) { return {"bat", 1, Storage{500.0, 500.0, 0.0, 4800.0, chi, 0.0}}; }

CapabilityContext with_res(double p_res) {
    CapabilityContext c;
    c.p_res = p_res;
    c.tol = 0.0;
    return c;
}

// Independent statement of each set, written with angles rather than the
// squared-norm / ratio forms used by the library.
bool reference_contains(const DerUnit& u, double p, double q, double p_res, int hour) {
    const double s = std::sqrt(p * p + q * q);
    if (const auto* c = std::get_if<Conventional>(&u.kind)) return !(p < c->p_min) && !(p > c->p_max) && !(s > c->s_max);
    if (const auto* r = std::get_if<Renewable>(&u.kind)) {
        if (p < 0.0 || p > p_res || s > r->s_max) return false;
        if (s == 0.0) return true;
        const double angle = std::abs(std::atan2(q, p));
        return std::cos(angle) >= r->power_factor_floor;
    }
    if (const auto* b = std::get_if<Storage>(&u.kind)) {
        const double next = b->chi - p;
        return std::abs(p) <= b->p_max && s <= b->s_max && next >= b->chi_min && next <= b->chi_max;
    }
    const auto& l = std::get<Load>(u.kind);
    return p == -l.p_kw[static_cast<std::size_t>(hour)] && q == -l.q_kvar[static_cast<std::size_t>(hour)];
}

// Distance from the nearest boundary of any inequality, to skip ambiguous points.
bool near_boundary(const DerUnit& u, double p, double q, double p_res) {
    const double s = std::hypot(p, q), eps = 1e-6;
    auto close = [&](double a, double b) { return std::abs(a - b) < eps * std::max(1.0, std::abs(b)); };
    if (const auto* c = std::get_if<Conventional>(&u.kind)) return close(p, c->p_min) || close(p, c->p_max) || close(s, c->s_max);
    if (const auto* r = std::get_if<Renewable>(&u.kind))
        return close(p, 0.0) || close(p, p_res) || close(s, r->s_max) || (s > 0 && close(p / s, r->power_factor_floor));
    if (const auto* b = std::get_if<Storage>(&u.kind))
        return close(std::abs(p), b->p_max) || close(s, b->s_max) || close(b->chi - p, b->chi_min) || close(b->chi - p, b->chi_max);
    return false;
}

}  // namespace

TEST_CASE("capability examples", "[ders][capability]") {
    CHECK(capability_contains(renewable(500, 0.9), 0.0, 0.0, with_res(400)));
    CHECK(capability_contains(conventional(0, 500, 500), 300.0, 400.0, with_res(0)));
    CHECK_FALSE(capability_contains(renewable(500, 0.9), 100.0, 100.0, with_res(400)));
    CHECK(capability_contains(renewable(500, 0.9), 100.0, 40.0, with_res(400)));
    CHECK_FALSE(capability_contains(renewable(500, 0.9), 450.0, 0.0, with_res(400)));
    CHECK_FALSE(capability_contains(renewable(500, 0.0), -1.0, 0.0, with_res(400)));
    CHECK_FALSE(capability_contains(conventional(100, 500, 500), 50.0, 0.0, with_res(0)));
}

TEST_CASE("storage capability includes the post-step energy bound", "[ders][capability]") {
    CHECK(capability_contains(storage(2400), 500.0, 0.0, with_res(0)));
    CHECK_FALSE(capability_contains(storage(300), 400.0, 0.0, with_res(0)));
    CHECK_FALSE(capability_contains(storage(4800), -100.0, 0.0, with_res(0)));
    CHECK(capability_contains(storage(4800), 100.0, 0.0, with_res(0)));
    CHECK_FALSE(capability_contains(storage(2400), 400.0, 400.0, with_res(0)));
}

TEST_CASE("load capability is the single fixed point", "[ders][capability]") {
    Load l;
    l.p_kw.fill(50.0);
    l.q_kvar.fill(10.0);
    const DerUnit u{"l", 2, l};
    CapabilityContext ctx = with_res(0);
    ctx.hour = 10;
    CHECK(capability_contains(u, -50.0, -10.0, ctx));
    CHECK_FALSE(capability_contains(u, -49.0, -10.0, ctx));
}

TEST_CASE("capability matches an independent statement of the inequalities", "[ders][capability][property]") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> p(-700.0, 700.0), q(-700.0, 700.0), a(0.0, 1.0), res(0.0, 600.0),
        chi(0.0, 4800.0), pm(0.0, 400.0);
    int checked = 0;
    for (int n = 0; n < 20000; ++n) {
        const int kind = n % 3;
        DerUnit u = kind == 0 ? renewable(500, a(rng)) : kind == 1 ? conventional(pm(rng), 450.0, 500.0) : storage(chi(rng));
        if (kind == 1) {
            auto& c = u.as<Conventional>();
            c.p_min = std::min(c.p_min, c.p_max);
        }
        const double pp = p(rng), qq = q(rng), pr = res(rng);
        if (near_boundary(u, pp, qq, pr)) continue;
        CapabilityContext ctx;
        ctx.p_res = pr;
        INFO("kind " << kind << " p " << pp << " q " << qq);
        CHECK(capability_contains(u, pp, qq, ctx) == reference_contains(u, pp, qq, pr, 0));
        ++checked;
    }
    CHECK(checked > 19000);
}

TEST_CASE("renewable sets are star-shaped from the origin", "[ders][capability][property]") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> p(0.0, 500.0), q(-300.0, 300.0), lam(0.0, 1.0);
    const auto u = renewable(500, 0.85);
    CapabilityContext ctx;
    ctx.p_res = 450.0;
    int members = 0;
    for (int n = 0; n < 20000; ++n) {
        const double pp = p(rng), qq = q(rng);
        if (!capability_contains(u, pp, qq, ctx)) continue;
        ++members;
        const double l = lam(rng);
        CHECK(capability_contains(u, l * pp, l * qq, ctx));
    }
    CHECK(members > 1000);
}

TEST_CASE("conventional set is convex", "[ders][capability][property]") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> p(-50.0, 550.0), q(-550.0, 550.0);
    const auto u = conventional(50.0, 450.0, 500.0);
    std::vector<std::pair<double, double>> members;
    while (members.size() < 2000) {
        const double pp = p(rng), qq = q(rng);
        if (capability_contains(u, pp, qq)) members.emplace_back(pp, qq);
    }
    for (std::size_t i = 0; i + 1 < members.size(); i += 2)
        CHECK(capability_contains(u, 0.5 * (members[i].first + members[i + 1].first),
                                  0.5 * (members[i].second + members[i + 1].second)));
}

TEST_CASE("state-of-energy dynamics", "[ders][storage]") {
    const Storage s = storage(2400).as<Storage>();
    CHECK(step_soe(s, 500.0, 1.0) == 1900.0);
    CHECK_THROWS_AS(step_soe(storage(4800).as<Storage>(), -100.0, 1.0), InfeasibleError);
    CHECK(step_soe(storage(0).as<Storage>(), 0.0, 1.0) == 0.0);
    CHECK_THROWS_AS(step_soe(s, 600.0, 1.0), InfeasibleError);
}

TEST_CASE("storage round trip returns the initial energy", "[ders][storage][property]") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> chi(500.0, 4300.0), p(-500.0, 500.0);
    for (int n = 0; n < 1000; ++n) {
        Storage s = storage(chi(rng)).as<Storage>();
        const double start = s.chi, pp = p(rng);
        s.chi = step_soe(s, pp, 1.0);
        s.chi = step_soe(s, -pp, 1.0);
        CHECK(s.chi == Approx(start).margin(1e-9));
    }
    // Integer energies and powers are exact in binary.
    Storage s = storage(2400).as<Storage>();
    s.chi = step_soe(s, 337.0, 1.0);
    s.chi = step_soe(s, -337.0, 1.0);
    CHECK(s.chi == 2400.0);
}

TEST_CASE("availability sampling", "[ders][availability]") {
    std::vector<DerUnit> units{renewable(500, 0.9, 300.0, 0.0), conventional(0, 500, 500)};
    SECTION("zero noise returns the profile") {
        Rng rng(1);
        const auto d = sample_availability(units, 5, rng);
        CHECK(d.p_res[0] == 300.0);
        CHECK(d.p_res_fc[0] == 300.0);
        CHECK(d.p_res[1] == 0.0);
    }
    SECTION("draws are clamped to s_max") {
        units[0] = renewable(500, 0.9, 600.0, 0.15);
        Rng rng(1);
        for (int n = 0; n < 1000; ++n) {
            const auto d = sample_availability(units, 3, rng);
            CHECK(d.p_res[0] <= 500.0);
            CHECK(d.p_res[0] >= 0.0);
            CHECK(d.p_res_fc[0] == 600.0);
        }
    }
    SECTION("same seed, same draw") {
        units[0] = renewable(500, 0.9, 300.0, 0.15);
        Rng a(42), b(42);
        CHECK(sample_availability(units, 7, a).p_res == sample_availability(units, 7, b).p_res);
    }
    SECTION("relative spread matches the noise model") {
        units[0] = renewable(1000, 0.9, 300.0, 0.15);
        Rng rng(8);
        double sum = 0.0, sq = 0.0;
        const int n = 20000;
        for (int k = 0; k < n; ++k) {
            const double x = sample_availability(units, 0, rng).p_res[0] / 300.0 - 1.0;
            sum += x;
            sq += x * x;
        }
        const double mean = sum / n;
        CHECK(std::abs(mean) < 0.005);
        CHECK(std::sqrt(sq / n - mean * mean) == Approx(0.15).epsilon(0.03));
    }
    CHECK_THROWS_AS(sample_availability(units, 24, *std::make_unique<Rng>(1)), ConfigError);
}

TEST_CASE("load injection sign convention and linearity", "[ders][load]") {
    Load l;
    l.p_kw.fill(0.0);
    l.q_kvar.fill(0.0);
    l.p_kw[10] = 50.0;
    l.q_kvar[10] = 10.0;
    const auto pq = load_injection(l, 10);
    CHECK(pq.p == -50.0);
    CHECK(pq.q == -10.0);
    const auto zero = load_injection(l, 3);
    CHECK(zero.p == 0.0);
    CHECK(zero.q == 0.0);
    Load twice = l;
    for (auto& v : twice.p_kw) v *= 2.0;
    for (auto& v : twice.q_kvar) v *= 2.0;
    CHECK(load_injection(twice, 10).p == 2.0 * pq.p);
    CHECK(load_injection(twice, 10).q == 2.0 * pq.q);
}

TEST_CASE("bundled DER configurations", "[ders][config]") {
    const auto net = load_network(oracle::data_path("ieee13.net"));
    const auto doc = TextDocument::from_file(oracle::data_path("ders.txt"));
    for (const auto& name : der_configuration_names(doc)) {
        const auto fleet = load_der_fleet(doc, name, "residential-a");
        REQUIRE_NOTHROW(validate_fleet(fleet, net));
        CHECK(fleet.indices_of<Load>().size() == 8);
    }
    const auto base = load_der_fleet(doc, "basecase", "residential-a");
    CHECK(base.indices_of<Conventional>().size() == 3);
    CHECK(base.installed_generation_kw() == 1950.0);
    CHECK(load_der_fleet(doc, "renew1", "residential-a").indices_of<Renewable>().size() == 1);
    CHECK(load_der_fleet(doc, "renew2", "residential-a").indices_of<Renewable>().size() == 3);
    const auto bat = load_der_fleet(doc, "bat1", "residential-a");
    REQUIRE(bat.indices_of<Storage>().size() == 1);
    CHECK(bat.units[bat.indices_of<Storage>()[0]].as<Storage>().chi == 2400.0);
    CHECK_THROWS_AS(load_der_fleet(doc, "nonsense", "residential-a"), ConfigError);
    CHECK_THROWS_AS(load_der_fleet(doc, "basecase", "nonsense"), ConfigError);

    // Loads run at a fixed 0.95 lagging power factor.
    const auto& l = base.units[base.indices_of<Load>()[0]].as<Load>();
    CHECK(l.p_kw[12] / std::hypot(l.p_kw[12], l.q_kvar[12]) == Approx(0.95).epsilon(1e-12));
}

TEST_CASE("two units on one bus are rejected", "[ders][config]") {
    const auto net = load_network(oracle::data_path("ieee13.net"));
    DerFleet fleet;
    fleet.units = {conventional(0, 500, 500), renewable(500, 0.9)};
    CHECK_THROWS_WITH(validate_fleet(fleet, net), Catch::Matchers::ContainsSubstring("bus 1"));
}
