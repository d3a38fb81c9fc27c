#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "bbm/martingales.hpp"

using namespace bbm;

namespace {

OffspringDistribution binary() { return OffspringDistribution::point_mass(2); }
ModelParams unit_params() { return {1.0, 1.0, binary(), binary()}; }

PopulationSnapshot snapshot_at(std::vector<double> positions, double t,
                               bool homogeneous_only = false) {
    PopulationSnapshot snap;
    snap.time = t;
    snap.homogeneous_only = homogeneous_only;
    std::uint32_t i = 1;
    for (double x : positions) {
        ParticleLabel label;
        label.path = {i++};
        snap.particles.push_back({label, x, 0.0});
    }
    return snap;
}

} // namespace

TEST_CASE("martingale evaluation on snapshots", "[martingales]") {
    const DerivedRates d = derive_rates(unit_params());

    const auto start = snapshot_at({0.0}, 0.0);
    REQUIRE(evaluate(MartingaleKind::folded(), start, d) == 1.0);
    const auto start_h = snapshot_at({0.0}, 0.0, true);
    const DerivedRates dh =
        derive_rates(homogeneous_embedding(unit_params()));
    REQUIRE(evaluate(MartingaleKind::tilted(0.5), start_h, dh) == 1.0);

    const auto snap = snapshot_at({0.0, 1.0}, 1.0);
    const double expected = std::exp(-1.5) + std::exp(-2.5);
    REQUIRE(evaluate(MartingaleKind::folded(), snap, d) ==
            Catch::Approx(expected).epsilon(1e-14));
    REQUIRE(std::abs(expected - 0.3052152) < 1e-7);

    // kind/population mismatches
    REQUIRE_THROWS_AS(evaluate(MartingaleKind::tilted(0.5), snap, d),
                      std::invalid_argument);
    const auto snap_h = snapshot_at({0.2}, 1.0, true);
    REQUIRE_THROWS_AS(evaluate(MartingaleKind::folded(), snap_h, d),
                      std::invalid_argument);
    REQUIRE_NOTHROW(evaluate(MartingaleKind::folded(), snap_h, dh));
}

TEST_CASE("degenerate single-particle population gives a constant series",
          "[martingales]") {
    const ModelParams degenerate{1.0, 1.0, OffspringDistribution::point_mass(1),
                                 OffspringDistribution::point_mass(1)};
    const DerivedRates d = derive_rates(degenerate);
    std::vector<PopulationSnapshot> snaps;
    for (double t : {0.0, 0.5, 1.0, 2.0}) snaps.push_back(snapshot_at({0.0}, t));
    const auto series = trajectory(MartingaleKind::folded(), snaps, d);
    for (const auto& [t, v] : series) REQUIRE(v == 1.0);
}

TEST_CASE("unit mean of the folded martingale", "[martingales]") {
    const ModelParams params = unit_params();
    const DerivedRates d = derive_rates(params);
    SimConfig cfg;
    cfg.horizon = 1.0;
    cfg.record_times = {1.0};
    RandomStream master(31);
    std::vector<double> values;
    for (int r = 0; r < 20000; ++r)
        simulate_observed(params, cfg, master.child(r), [&](const Frame& f) {
            values.push_back(evaluate(MartingaleKind::folded(), f, d));
            REQUIRE(values.back() > 0.0);
        });
    const auto ms = mean_and_se(values);
    REQUIRE(std::abs(ms.mean - 1.0) <= 4.0 * ms.se);
}

TEST_CASE("unit mean of the tilted martingale on homogeneous-only runs",
          "[martingales]") {
    const ModelParams params = unit_params();
    const DerivedRates d = derive_rates(homogeneous_embedding(params));
    SimConfig cfg;
    cfg.horizon = 1.0;
    cfg.record_times = {1.0};
    cfg.homogeneous_only = true;
    RandomStream master(37);
    std::vector<double> values;
    for (int r = 0; r < 20000; ++r)
        simulate_observed(params, cfg, master.child(r), [&](const Frame& f) {
            values.push_back(evaluate(MartingaleKind::tilted(0.5), f, d));
        });
    const auto ms = mean_and_se(values);
    REQUIRE(std::abs(ms.mean - 1.0) <= 4.0 * ms.se);
}

TEST_CASE("tilt zero counts the population", "[martingales]") {
    const ModelParams params = unit_params();
    const DerivedRates d = derive_rates(homogeneous_embedding(params));
    SimConfig cfg;
    cfg.horizon = 2.0;
    cfg.record_times = {0.5, 1.0, 2.0};
    cfg.homogeneous_only = true;
    const SimResult res = simulate(params, cfg, RandomStream(41));
    for (const auto& snap : res.snapshots) {
        const double lhs = evaluate(MartingaleKind::tilted(0.0), snap, d);
        const double rhs =
            double(snap.particles.size()) * std::exp(-d.beta_hat * snap.time);
        REQUIRE(lhs == Catch::Approx(rhs).epsilon(1e-12));
    }
}

TEST_CASE("pathwise bounds of the folded martingale", "[martingales]") {
    const ModelParams params = unit_params();
    const DerivedRates d = derive_rates(params);
    SimConfig cfg;
    cfg.horizon = 2.0;
    cfg.record_times = {0.5, 1.0, 1.5, 2.0};
    RandomStream master(43);
    for (int r = 0; r < 50; ++r) {
        const SimResult res = simulate(params, cfg, master.child(r));
        for (const auto& snap : res.snapshots) {
            const double v = evaluate(MartingaleKind::folded(), snap, d);
            // population bound: |N_t| e^{-growth t} dominates the sum
            REQUIRE(double(snap.particles.size()) *
                        std::exp(-d.growth_exponent * snap.time) >=
                    v - 1e-12);
            // per-snapshot floor from the largest displacement
            double max_abs = 0.0;
            for (const auto& e : snap.particles)
                max_abs = std::max(max_abs, std::abs(e.position));
            const double floor =
                std::exp(-d.beta0_hat * max_abs -
                         0.5 * d.beta0_hat * d.beta0_hat * snap.time -
                         d.beta_hat * snap.time);
            REQUIRE(v >= floor - 1e-15);
            REQUIRE(v > 0.0);
        }
    }
}

TEST_CASE("band truncation is dominated by the tilted martingale",
          "[martingales]") {
    const ModelParams params = unit_params();
    const DerivedRates d = derive_rates(homogeneous_embedding(params));
    SimConfig cfg;
    cfg.horizon = 2.0;
    cfg.record_times = {1.0, 2.0};
    cfg.homogeneous_only = true;
    RandomStream master(47);
    for (int r = 0; r < 50; ++r) {
        const SimResult res = simulate(params, cfg, master.child(r));
        for (const auto& snap : res.snapshots)
            for (double lambda : {0.2, 0.5})
                for (double delta : {0.1, 0.3}) {
                    const double truncated =
                        truncated_tilted_sum(snap, d, lambda, delta);
                    const double full = evaluate(
                        MartingaleKind::tilted(lambda + delta), snap, d);
                    REQUIRE(truncated <= full + 1e-15);
                    REQUIRE(truncated >= 0.0);
                }
    }
}

TEST_CASE("limit diagnostics separate positive and degenerate limits",
          "[martingales]") {
    REQUIRE_THROWS_AS(limit_diagnostic({{{0.0, 1.0}}}), std::invalid_argument);

    // positive-limit regime: moderate rates keep the population in reach
    const ModelParams params{0.5, 0.5, binary(), binary()};
    const DerivedRates d = derive_rates(params);
    SimConfig cfg;
    cfg.horizon = 10.0;
    cfg.record_times = {2.0, 10.0};
    RandomStream master(53);
    std::vector<std::vector<std::pair<double, double>>> folded_traj;
    for (int r = 0; r < 200; ++r) {
        folded_traj.emplace_back();
        auto& traj = folded_traj.back();
        simulate_observed(params, cfg, master.child(r), [&](const Frame& f) {
            if (!f.truncation_frame)
                traj.emplace_back(f.time, evaluate(MartingaleKind::folded(), f, d));
        });
    }
    const auto diag = limit_diagnostic(folded_traj);
    REQUIRE(diag.times.size() == 2);
    REQUIRE(diag.frac_below_eps.back()[1] < 0.05); // eps = 1e-6 at t = 10

    // degenerate regime: supercritical tilt decays to zero
    const ModelParams hom{1.0, 1.0, OffspringDistribution({{1, 0.5}, {2, 0.5}}),
                          binary()};
    const DerivedRates dh = derive_rates(homogeneous_embedding(hom));
    REQUIRE(dh.beta_hat == 0.5);
    const double lambda = 1.2 * std::sqrt(2.0 * dh.beta_hat);
    SimConfig hcfg;
    hcfg.horizon = 10.0;
    hcfg.record_times = {2.0, 10.0};
    hcfg.homogeneous_only = true;
    std::vector<double> at2, at10;
    RandomStream hmaster(59);
    for (int r = 0; r < 200; ++r)
        simulate_observed(hom, hcfg, hmaster.child(r), [&](const Frame& f) {
            const double v = evaluate(MartingaleKind::tilted(lambda), f, dh);
            (std::abs(f.time - 2.0) < 1e-9 ? at2 : at10).push_back(v);
        });
    std::sort(at2.begin(), at2.end());
    std::sort(at10.begin(), at10.end());
    REQUIRE(at10[at10.size() / 2] < at2[at2.size() / 2]); // median decays
}
