#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "bbm/analytics.hpp"
#include "bbm/spine.hpp"

using namespace bbm;

namespace {

OffspringDistribution binary() { return OffspringDistribution::point_mass(2); }
ModelParams unit_params() { return {1.0, 1.0, binary(), binary()}; }

} // namespace

TEST_CASE("size-biased offspring laws", "[spine]") {
    const auto pm = size_biased(binary());
    REQUIRE(pm.atoms().size() == 1);
    REQUIRE(pm.atoms()[0].first == 2);
    REQUIRE(pm.atoms()[0].second == 1.0);

    const OffspringDistribution two({{1, 0.5}, {3, 0.5}});
    const auto biased = size_biased(two);
    REQUIRE(biased.atoms()[0] == OffspringDistribution::Atom{1, 0.25});
    REQUIRE(biased.atoms()[1] == OffspringDistribution::Atom{3, 0.75});
    // mean of the size-biased law is E[A^2]/E[A]
    REQUIRE(biased.mean() == Catch::Approx(2.5).epsilon(1e-14));
    REQUIRE(biased.mean() == Catch::Approx((0.5 * 1 + 0.5 * 9) / 2.0));

    double total = 0.0;
    for (const auto& [n, w] : biased.atoms()) total += w;
    REQUIRE(std::abs(total - 1.0) < 1e-15);

    // idempotent only for point masses
    const auto twice = size_biased(biased);
    REQUIRE(twice.atoms()[0].second != biased.atoms()[0].second);
}

TEST_CASE("plain spine: fission clocks and local time", "[spine]") {
    const ModelParams params = unit_params();
    RandomStream master(3);

    // off-origin fissions are Poisson(beta t)
    const int n = 10000;
    double fissions = 0.0;
    for (int r = 0; r < n; ++r) {
        const SpinePath path =
            simulate_spine(SpineMeasure::plain(), params, 10.0, master.child(r), 0.01);
        for (const auto& f : path.fissions) fissions += f.at_origin ? 0.0 : 1.0;
    }
    const double mean = fissions / n;
    const double se = std::sqrt(10.0 / n); // Poisson variance = mean
    REQUIRE(std::abs(mean - 10.0) <= 4.0 * se);

    // local time at t=1 has mean sqrt(2/pi); endpoint is standard normal
    double lt_sum = 0.0, xi_sum = 0.0, xi_sq = 0.0;
    const int m = 20000;
    for (int r = 0; r < m; ++r) {
        const SpinePath path = simulate_spine(SpineMeasure::plain(), params, 1.0,
                                              master.child(100000 + r), 0.01);
        lt_sum += path.local_time.back();
        xi_sum += path.xi.back();
        xi_sq += path.xi.back() * path.xi.back();
        REQUIRE(path.local_time.front() == 0.0);
        for (std::size_t k = 1; k < path.local_time.size(); ++k)
            REQUIRE(path.local_time[k] >= path.local_time[k - 1]);
    }
    const double ref = std::sqrt(2.0 / M_PI);
    REQUIRE(std::abs(lt_sum / m - ref) < 4.0 * ref / std::sqrt(double(m)) * 1.5);
    REQUIRE(std::abs(xi_sum / m) < 4.0 / std::sqrt(double(m)));
    REQUIRE(std::abs(xi_sq / m - 1.0) < 0.05);
}

TEST_CASE("origin-drift spine concentrates local time", "[spine]") {
    const ModelParams params = unit_params(); // beta0_hat = 1
    RandomStream master(7);
    const int n = 800;
    double lt_rate = 0.0;
    for (int r = 0; r < n; ++r) {
        const SpinePath path = simulate_spine(SpineMeasure::origin_drift(), params,
                                              50.0, master.child(r), 0.01);
        lt_rate += path.local_time.back() / 50.0;
    }
    REQUIRE(std::abs(lt_rate / n - 1.0) < 0.05);
}

TEST_CASE("origin-drift spine fission rates are boosted", "[spine]") {
    const ModelParams params = unit_params(); // m = m0 = 2
    RandomStream master(11);
    double hom = 0.0, cat = 0.0, lt = 0.0, time = 0.0;
    for (int r = 0; r < 60; ++r) {
        const SpinePath path = simulate_spine(SpineMeasure::origin_drift(), params,
                                              100.0, master.child(r), 0.01);
        for (const auto& f : path.fissions) (f.at_origin ? cat : hom) += 1.0;
        lt += path.local_time.back();
        time += 100.0;
    }
    // off-origin fissions per unit time ~ m beta; at-origin per unit local
    // time ~ m0 beta0 (5% bands at this horizon)
    REQUIRE(std::abs(hom / time - 2.0) / 2.0 < 0.05);
    REQUIRE(std::abs(cat / lt - 2.0) / 2.0 < 0.05);
}

TEST_CASE("linear-drift spine travels at its drift", "[spine]") {
    const ModelParams params = unit_params();
    RandomStream master(13);
    const int n = 1000;
    double end_rate = 0.0, lt_total = 0.0;
    for (int r = 0; r < n; ++r) {
        const SpinePath path = simulate_spine(SpineMeasure::linear_drift(1.0),
                                              params, 50.0, master.child(r), 0.01);
        end_rate += path.xi.back() / 50.0;
        lt_total += path.local_time.back();
        // no at-origin fissions in the homogeneous-only context
        for (const auto& f : path.fissions) REQUIRE_FALSE(f.at_origin);
    }
    REQUIRE(std::abs(end_rate / n - 1.0) < 0.05);
    // total local time of a unit-drift path is Exp(mean 1/lambda = 1)
    REQUIRE(std::abs(lt_total / n - 1.0) < 4.0 / std::sqrt(double(n)) + 0.02);
}

TEST_CASE("radial-drift spine escapes at the drift speed", "[spine]") {
    const ModelParams params = unit_params();
    RandomStream master(17);
    const int n = 1000;
    double rate = 0.0;
    for (int r = 0; r < n; ++r) {
        const SpinePath path = simulate_spine(SpineMeasure::radial_drift(0.5),
                                              params, 50.0, master.child(r), 0.01);
        rate += std::abs(path.xi.back()) / 50.0;
    }
    REQUIRE(std::abs(rate / n - 0.5) < 0.05);
}

TEST_CASE("weighted one-shot estimator reproduces the closed forms", "[spine]") {
    const ModelParams params = unit_params();
    const DerivedRates d = derive_rates(params);

    const auto est = many_to_one_estimate(params, 1.0, 0.0, 100000, RandomStream(5));
    const double ref = normal_cdf(1.0) * std::exp(1.5);
    REQUIRE(std::abs(est.estimate - ref) <= 4.0 * est.std_error);
    REQUIRE(est.std_error > 0.0);

    const auto vanish =
        many_to_one_estimate(params, 1.0, 1e12, 1000, RandomStream(6));
    REQUIRE(vanish.estimate == 0.0);

    // homogeneous reduction: m0 = 1 removes the local-time weight
    const ModelParams hom{1.0, 1.0, binary(), OffspringDistribution::point_mass(1)};
    const auto he = many_to_one_estimate(hom, 1.0, 0.0, 100000, RandomStream(7));
    REQUIRE(std::abs(he.estimate - std::exp(1.0) / 2.0) <= 4.0 * he.std_error);
    REQUIRE(std::abs(std::exp(1.0) / 2.0 - 1.35914) < 1e-5);

    // unbiasedness across a grid of (t, x) pairs
    RandomStream seeds(23);
    int idx = 0;
    for (double t : {0.4, 0.8, 1.3, 2.0}) {
        for (double x : {0.0, 0.3, 0.8, 1.5, 2.5}) {
            const auto e =
                many_to_one_estimate(params, t, x, 40000, seeds.child(idx++));
            const double reference = expected_count_above(d, t, x);
            REQUIRE(std::abs(e.estimate - reference) <= 4.0 * e.std_error + 1e-12);
        }
    }

    REQUIRE_THROWS_AS(many_to_one_estimate(params, 1.0, 0.0, 1, RandomStream(1)),
                      std::invalid_argument);
}

TEST_CASE("spine decomposition value", "[spine]") {
    const ModelParams params = unit_params();

    // no fissions: spine(0) = 1 under every measure
    for (const auto& measure :
         {SpineMeasure::plain(), SpineMeasure::origin_drift(),
          SpineMeasure::linear_drift(0.7), SpineMeasure::radial_drift(-0.3)}) {
        SpinePath path;
        path.measure = measure;
        path.times = {0.0};
        path.xi = {0.0};
        path.local_time = {0.0};
        REQUIRE(spine_decomposition_value(path, measure, params, 0.0) ==
                Catch::Approx(1.0).epsilon(1e-14));
    }

    // one fission with two offspring: value is spine(t) + spine(S1)
    SpinePath path;
    path.measure = SpineMeasure::origin_drift();
    path.times = {0.0, 0.5, 1.0};
    path.xi = {0.0, 0.4, -0.2};
    path.local_time = {0.0, 0.1, 0.3};
    path.fissions = {{0.5, false, 2, 0.4, 0.1}};
    const DerivedRates d = derive_rates(params);
    auto weight = [&](double s, double xi, double) {
        return std::exp(-d.beta0_hat * std::abs(xi) -
                        0.5 * d.beta0_hat * d.beta0_hat * s - d.beta_hat * s);
    };
    const double expected = weight(1.0, -0.2, 0.3) + weight(0.5, 0.4, 0.1);
    REQUIRE(spine_decomposition_value(path, path.measure, params, 1.0) ==
            Catch::Approx(expected).epsilon(1e-12));

    // measure mismatch is rejected
    REQUIRE_THROWS_AS(
        spine_decomposition_value(path, SpineMeasure::plain(), params, 1.0),
        std::invalid_argument);
    REQUIRE_THROWS_AS(
        spine_decomposition_value(path, path.measure, params, 0.75),
        std::invalid_argument);
}

TEST_CASE("decomposition stays bounded under the origin drift", "[spine]") {
    const ModelParams params = unit_params();
    RandomStream master(29);
    const SpineMeasure measure = SpineMeasure::origin_drift();
    double worst = 0.0;
    for (int r = 0; r < 100; ++r) {
        const SpinePath path =
            simulate_spine(measure, params, 50.0, master.child(r), 0.01);
        for (double t : {10.0, 20.0, 30.0, 40.0, 50.0}) {
            const double v = spine_decomposition_value(path, measure, params, t);
            REQUIRE(v > 0.0);
            worst = std::max(worst, v);
        }
    }
    REQUIRE(worst < 100.0); // no blow-up along the path
}
