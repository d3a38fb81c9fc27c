#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "bbm/model.hpp"
#include "bbm/random.hpp"

using namespace bbm;

namespace {

OffspringDistribution binary() { return OffspringDistribution::point_mass(2); }

ModelParams unit_params() { return {1.0, 1.0, binary(), binary()}; }

// random parameter draw used by the property tests
ModelParams random_params(RandomStream& s) {
    auto random_dist = [&] {
        std::vector<OffspringDistribution::Atom> atoms;
        double total = 0.0;
        const int support = 1 + int(s.next_unit() * 4.0);
        std::vector<double> w(support);
        for (auto& x : w) {
            x = 0.05 + s.next_unit();
            total += x;
        }
        for (int n = 1; n <= support; ++n) atoms.emplace_back(n, w[n - 1] / total);
        return OffspringDistribution(std::move(atoms));
    };
    return {0.2 + 1.8 * s.next_unit(), 0.2 + 1.8 * s.next_unit(), random_dist(),
            random_dist()};
}

// root of delta_lambda by bisection, the independent route to lambda_crit
double lambda_crit_by_bisection(const DerivedRates& d) {
    double lo = 0.0, hi = 1.0;
    while (delta_lambda(d, hi) > 0.0) hi *= 2.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (delta_lambda(d, mid) > 0.0 ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

} // namespace

TEST_CASE("offspring distribution validation", "[model]") {
    REQUIRE_THROWS_AS(OffspringDistribution({{0, 1.0}}), std::invalid_argument);
    REQUIRE_THROWS_AS(OffspringDistribution({{1, 0.5}, {2, 0.6}}),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(OffspringDistribution({{1, -0.1}, {2, 1.1}}),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(OffspringDistribution({}), std::invalid_argument);
    REQUIRE(OffspringDistribution({{1, 0.5}, {3, 0.5}}).mean() == 2.0);
    REQUIRE_THROWS_AS(ModelParams(0.0, 1.0, binary(), binary()),
                      std::invalid_argument);
}

TEST_CASE("offspring sampling follows the weights", "[model]") {
    const OffspringDistribution d({{2, 0.5}, {4, 0.5}});
    RandomStream s(17);
    double sum = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) sum += d.sample(s.next_unit());
    const double se = 1.0 / std::sqrt(double(n)); // sd of the two-point law
    REQUIRE(std::abs(sum / n - 3.0) < 3.0 * se);
    REQUIRE(OffspringDistribution::point_mass(3).sample(0.999) == 3);
}

TEST_CASE("x log x moment sums", "[model]") {
    REQUIRE(xlogx_holds(binary()).holds);
    REQUIRE(xlogx_holds(binary()).sum ==
            Catch::Approx(2.0 * std::log(2.0)).epsilon(1e-14));
    REQUIRE(std::abs(xlogx_holds(binary()).sum - 1.3863) < 1e-4);
    REQUIRE(xlogx_holds(OffspringDistribution::point_mass(1)).sum == 0.0);

    const OffspringDistribution uniform(
        {{1, 0.2}, {2, 0.2}, {3, 0.2}, {4, 0.2}, {5, 0.2}});
    const double direct = (2.0 * std::log(2.0) + 3.0 * std::log(3.0) +
                           4.0 * std::log(4.0) + 5.0 * std::log(5.0)) /
                          5.0;
    REQUIRE(xlogx_holds(uniform).sum == Catch::Approx(direct).epsilon(1e-14));
    REQUIRE(std::abs(direct - 3.6548996) < 1e-7);
}

TEST_CASE("derived rates and critical speed", "[model]") {
    const DerivedRates d = derive_rates(unit_params());
    REQUIRE(d.beta_hat == 1.0);
    REQUIRE(d.beta0_hat == 1.0);
    REQUIRE(d.regime == Regime::HomogeneousDominant);
    REQUIRE(d.lambda_crit == Catch::Approx(std::sqrt(2.0)).epsilon(1e-14));
    REQUIRE(std::abs(d.lambda_crit - 1.4142136) < 1e-7);
    REQUIRE(d.growth_exponent == 1.5);
    REQUIRE_FALSE(d.degenerate);

    const DerivedRates d2 = derive_rates({0.25, 1.0, binary(), binary()});
    REQUIRE(d2.beta_hat == 0.25);
    REQUIRE(d2.regime == Regime::CatalyticDominant);
    REQUIRE(d2.lambda_crit == Catch::Approx(0.75).epsilon(1e-14));

    // both branches agree at the regime boundary
    const DerivedRates db = derive_rates({0.5, 1.0, binary(), binary()});
    REQUIRE(db.beta_hat == 0.5);
    REQUIRE(db.lambda_crit == Catch::Approx(1.0).epsilon(1e-12));
    REQUIRE(std::sqrt(2.0 * db.beta_hat) == Catch::Approx(1.0).epsilon(1e-12));
    REQUIRE(db.beta_hat / db.beta0_hat + 0.5 * db.beta0_hat ==
            Catch::Approx(1.0).epsilon(1e-12));

    const DerivedRates dd = derive_rates({1.0, 1.0,
                                          OffspringDistribution::point_mass(1),
                                          OffspringDistribution::point_mass(1)});
    REQUIRE(dd.degenerate);
    REQUIRE(dd.lambda_crit == 0.0);
    REQUIRE(dd.growth_exponent == 0.0);
}

TEST_CASE("count growth exponent at a moving level", "[model]") {
    const DerivedRates d = derive_rates(unit_params());
    REQUIRE(delta_lambda(d, 0.5) == Catch::Approx(1.0).epsilon(1e-14));
    REQUIRE(delta_lambda(d, 2.0) == Catch::Approx(-1.0).epsilon(1e-14));
    // branch boundary at lambda = beta0_hat
    REQUIRE(delta_lambda(d, 1.0) == Catch::Approx(0.5).epsilon(1e-14));
    REQUIRE(0.5 * 1.0 - 1.0 + 1.0 == Catch::Approx(-0.5 * 1.0 + 1.0));
    REQUIRE_THROWS_AS(delta_lambda(d, -0.1), std::invalid_argument);
}

TEST_CASE("optimal split point and the two-phase exponent", "[model]") {
    const DerivedRates d = derive_rates(unit_params());
    REQUIRE(optimal_split(d, 0.5) == 0.5);
    REQUIRE(optimal_split(d, 1.5) == 0.0);
    const DerivedRates d2 = derive_rates({1.0, 2.0, binary(), binary()});
    REQUIRE(d2.beta0_hat == 2.0);
    REQUIRE(optimal_split(d2, 0.5) == 0.75);
    const DerivedRates dh = derive_rates(
        {1.0, 1.0, binary(), OffspringDistribution::point_mass(1)});
    REQUIRE(dh.beta0_hat == 0.0);
    REQUIRE(optimal_split(dh, 0.5) == 0.0);

    REQUIRE(split_exponent(d, 0.5, 0.5) == Catch::Approx(1.0).epsilon(1e-14));
    REQUIRE(split_exponent(d, 0.5, 0.5) ==
            Catch::Approx(delta_lambda(d, 0.5)).epsilon(1e-14));
    REQUIRE(split_exponent(d, 0.5, 0.0) ==
            Catch::Approx(d.beta_hat - 0.125).epsilon(1e-14));
    REQUIRE(split_exponent(d, 0.5, 0.25) ==
            Catch::Approx(1.0 + 0.125 - 1.0 / 6.0).epsilon(1e-12));
    REQUIRE(split_exponent(d, 0.5, 0.25) < split_exponent(d, 0.5, 0.5));
    REQUIRE_THROWS_AS(split_exponent(d, 0.5, 1.0), std::invalid_argument);
}

TEST_CASE("delta is continuous, decreasing, and vanishes at lambda_crit",
          "[model]") {
    RandomStream s(2025);
    for (int trial = 0; trial < 100; ++trial) {
        const ModelParams params = random_params(s);
        const DerivedRates d = derive_rates(params);
        if (d.degenerate) continue;

        REQUIRE(std::abs(delta_lambda(d, d.lambda_crit)) < 1e-10);
        REQUIRE(std::abs(d.lambda_crit - lambda_crit_by_bisection(d)) < 1e-9);

        double prev = delta_lambda(d, 0.0);
        const double hi = 2.0 * d.lambda_crit + 1.0;
        for (int i = 1; i <= 1000; ++i) {
            const double cur = delta_lambda(d, hi * i / 1000.0);
            REQUIRE(cur < prev);
            REQUIRE(std::abs(cur - prev) < hi / 1000.0 * (d.beta0_hat + hi) + 1e-9);
            prev = cur;
        }
    }
}

TEST_CASE("grid maximum of the split exponent sits at the optimum", "[model]") {
    RandomStream s(77);
    for (int trial = 0; trial < 25; ++trial) {
        const ModelParams params = random_params(s);
        const DerivedRates d = derive_rates(params);
        if (d.degenerate) continue;
        const double lambda = 0.05 + s.next_unit() * 1.5;

        double best = -1e300, best_p = 0.0;
        for (int i = 0; i < 1000; ++i) {
            const double p = i / 1000.0;
            const double v = split_exponent(d, lambda, p);
            if (v > best) { best = v; best_p = p; }
        }
        const double p_star = optimal_split(d, lambda);
        REQUIRE(std::abs(best_p - p_star) <= 1e-3 + 1e-12);
        REQUIRE(best <= delta_lambda(d, lambda) + 1e-9);
        REQUIRE(split_exponent(d, lambda, std::min(0.999, p_star)) >=
                delta_lambda(d, lambda) - 0.01 * (1.0 + lambda * lambda));
    }
}

TEST_CASE("homogeneous embedding removes the catalytic channel", "[model]") {
    const ModelParams emb = homogeneous_embedding(unit_params());
    REQUIRE(emb.q_dist.mean() == 1.0);
    const DerivedRates d = derive_rates(emb);
    REQUIRE(d.beta0_hat == 0.0);
    REQUIRE(d.lambda_crit == Catch::Approx(std::sqrt(2.0)));
}
