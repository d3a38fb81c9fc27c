#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

namespace bbm {

/// Offspring law with finite support on {1, 2, ...}. Every death produces at
/// least one child, so the population never goes extinct.
class OffspringDistribution {
public:
    using Atom = std::pair<int, double>; // (count, weight)

    explicit OffspringDistribution(std::vector<Atom> atoms)
        : atoms_(std::move(atoms)) {
        if (atoms_.empty())
            throw std::invalid_argument("offspring distribution: empty support");
        double total = 0.0, mean = 0.0;
        for (const auto& [n, w] : atoms_) {
            if (n < 1)
                throw std::invalid_argument(
                    "offspring distribution: counts must be >= 1");
            if (w < 0.0)
                throw std::invalid_argument(
                    "offspring distribution: negative weight");
            total += w;
            mean += n * w;
        }
        if (std::abs(total - 1.0) > 1e-12)
            throw std::invalid_argument(
                "offspring distribution: weights must sum to 1");
        mean_ = mean;
    }

    static OffspringDistribution point_mass(int n) {
        return OffspringDistribution({{n, 1.0}});
    }

    const std::vector<Atom>& atoms() const { return atoms_; }
    double mean() const { return mean_; }

    /// Inverse-CDF draw given a uniform in (0,1).
    int sample(double u) const {
        double acc = 0.0;
        for (const auto& [n, w] : atoms_) {
            acc += w;
            if (u <= acc) return n;
        }
        return atoms_.back().first;
    }

private:
    std::vector<Atom> atoms_;
    double mean_ = 0.0;
};

struct XLogXResult {
    bool holds;
    double sum; // sum of n log(n) w_n
};

/// The "X log X" moment of an offspring law. Finite support makes the sum
/// exact and always finite.
inline XLogXResult xlogx_holds(const OffspringDistribution& dist) {
    double s = 0.0;
    for (const auto& [n, w] : dist.atoms()) s += n * std::log(double(n)) * w;
    return {true, s};
}

/// Model parameters: homogeneous branching at rate beta per unit time with
/// off-origin offspring law p, catalytic branching at rate beta0 per unit
/// local time at the origin with offspring law q.
struct ModelParams {
    double beta;
    double beta0;
    OffspringDistribution p_dist; // offspring when dying away from the origin
    OffspringDistribution q_dist; // offspring when dying at the origin

    ModelParams(double beta_, double beta0_, OffspringDistribution p,
                OffspringDistribution q)
        : beta(beta_), beta0(beta0_), p_dist(std::move(p)), q_dist(std::move(q)) {
        if (!(beta > 0.0) || !(beta0 > 0.0))
            throw std::invalid_argument("ModelParams: rates must be > 0");
    }
};

enum class Regime { CatalyticDominant, HomogeneousDominant };

/// Effective rates and growth constants. Immutable once computed; all
/// downstream formulas read from here rather than recomputing.
struct DerivedRates {
    double beta_hat;        // beta (m - 1)
    double beta0_hat;       // beta0 (m0 - 1)
    double growth_exponent; // beta0_hat^2 / 2 + beta_hat
    double lambda_crit;
    Regime regime;
    bool degenerate; // both effective rates zero (m = m0 = 1)
};

inline DerivedRates derive_rates(const ModelParams& params) {
    DerivedRates d{};
    d.beta_hat = params.beta * (params.p_dist.mean() - 1.0);
    d.beta0_hat = params.beta0 * (params.q_dist.mean() - 1.0);
    d.growth_exponent = 0.5 * d.beta0_hat * d.beta0_hat + d.beta_hat;
    d.regime = (d.beta_hat <= 0.5 * d.beta0_hat * d.beta0_hat)
                   ? Regime::CatalyticDominant
                   : Regime::HomogeneousDominant;
    d.degenerate = (d.beta_hat == 0.0 && d.beta0_hat == 0.0);
    if (d.degenerate) {
        d.lambda_crit = 0.0;
    } else if (d.beta_hat <= 0.5 * d.beta0_hat * d.beta0_hat) {
        d.lambda_crit = d.beta_hat / d.beta0_hat + 0.5 * d.beta0_hat;
    } else {
        d.lambda_crit = std::sqrt(2.0 * d.beta_hat);
    }
    return d;
}

/// Exponential growth rate of the expected particle count above the moving
/// level lambda * t.
inline double delta_lambda(const DerivedRates& derived, double lambda) {
    if (lambda < 0.0) throw std::invalid_argument("delta_lambda: lambda < 0");
    const double b = derived.beta_hat, b0 = derived.beta0_hat;
    if (lambda <= b0) return 0.5 * b0 * b0 - b0 * lambda + b;
    return -0.5 * lambda * lambda + b;
}

/// Optimal fraction of time spent hugging the catalyst before travelling at
/// the speed needed to reach level lambda * t.
inline double optimal_split(const DerivedRates& derived, double lambda) {
    if (!(lambda > 0.0)) throw std::invalid_argument("optimal_split: lambda <= 0");
    const double b0 = derived.beta0_hat;
    if (b0 == 0.0 || lambda >= b0) return 0.0;
    return 1.0 - lambda / b0;
}

/// Growth exponent of the two-phase strategy: sit at the catalyst for a
/// fraction p of the time, then travel; maximised at optimal_split.
inline double split_exponent(const DerivedRates& derived, double lambda, double p) {
    if (!(p >= 0.0) || !(p < 1.0))
        throw std::invalid_argument("split_exponent: p must lie in [0,1)");
    const double b = derived.beta_hat, b0 = derived.beta0_hat;
    return b + 0.5 * b0 * b0 * p - lambda * lambda / (2.0 * (1.0 - p));
}

/// Parameters of the embedded homogeneous-only system: catalytic births are
/// not counted, which is realised by a unit point mass at the origin.
inline ModelParams homogeneous_embedding(const ModelParams& params) {
    return ModelParams(params.beta, params.beta0, params.p_dist,
                       OffspringDistribution::point_mass(1));
}

} // namespace bbm
