#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "bbm/analytics.hpp"
#include "bbm/model.hpp"
#include "bbm/population.hpp"

namespace bbm {

/// Additive martingales evaluated on population snapshots.
///   Folded:        sum over particles of exp(-b0h |x| - b0h^2 t/2 - bh t),
///                  valid for the full model.
///   Tilted(lambda): sum of exp(lambda x - lambda^2 t/2 - bh t), valid only
///                  for homogeneous-only populations.
/// Both have unit mean at every fixed t.
struct MartingaleKind {
    enum class Which { Folded, Tilted } which;
    double lambda = 0.0;

    static MartingaleKind folded() { return {Which::Folded, 0.0}; }
    static MartingaleKind tilted(double lambda) { return {Which::Tilted, lambda}; }
};

namespace detail {

inline void check_martingale_match(const MartingaleKind& kind,
                                   bool homogeneous_only,
                                   const DerivedRates& derived) {
    if (kind.which == MartingaleKind::Which::Tilted && !homogeneous_only)
        throw std::invalid_argument(
            "tilted martingale requires a homogeneous-only population");
    if (kind.which == MartingaleKind::Which::Folded && homogeneous_only &&
        derived.beta0_hat != 0.0)
        throw std::invalid_argument(
            "folded martingale with beta0_hat > 0 does not match a "
            "homogeneous-only population");
}

inline double log_weight(const MartingaleKind& kind, const DerivedRates& d,
                         double x, double t) {
    if (kind.which == MartingaleKind::Which::Folded)
        return -d.beta0_hat * std::abs(x) -
               0.5 * d.beta0_hat * d.beta0_hat * t - d.beta_hat * t;
    return kind.lambda * x - 0.5 * kind.lambda * kind.lambda * t - d.beta_hat * t;
}

} // namespace detail

/// Martingale value on one snapshot. Terms span many orders of magnitude at
/// large t, so the sum is compensated.
inline double evaluate(const MartingaleKind& kind, const PopulationSnapshot& snap,
                       const DerivedRates& derived) {
    detail::check_martingale_match(kind, snap.homogeneous_only, derived);
    KahanSum sum;
    for (const auto& e : snap.particles)
        sum.add(std::exp(detail::log_weight(kind, derived, e.position, snap.time)));
    return sum.value();
}

inline double evaluate(const MartingaleKind& kind, const Frame& frame,
                       const DerivedRates& derived) {
    detail::check_martingale_match(kind, frame.homogeneous_only, derived);
    KahanSum sum;
    for (const Particle& p : frame.particles)
        sum.add(std::exp(detail::log_weight(kind, derived, p.position(), frame.time)));
    return sum.value();
}

/// Martingale values along a snapshot series.
inline std::vector<std::pair<double, double>> trajectory(
    const MartingaleKind& kind, const std::vector<PopulationSnapshot>& snapshots,
    const DerivedRates& derived) {
    std::vector<std::pair<double, double>> series;
    series.reserve(snapshots.size());
    double prev = -std::numeric_limits<double>::infinity();
    for (const auto& snap : snapshots) {
        if (snap.time < prev)
            throw std::invalid_argument("trajectory: snapshots must be ordered in t");
        prev = snap.time;
        series.emplace_back(snap.time, evaluate(kind, snap, derived));
    }
    return series;
}

/// Truncated tilted sum of the two-sided band lambda t <= x <= (lambda+2d) t
/// with tilt lambda + d; never exceeds the full tilted martingale.
inline double truncated_tilted_sum(const PopulationSnapshot& snap,
                                   const DerivedRates& derived, double lambda,
                                   double delta) {
    const MartingaleKind kind = MartingaleKind::tilted(lambda + delta);
    detail::check_martingale_match(kind, snap.homogeneous_only, derived);
    const double t = snap.time;
    KahanSum sum;
    for (const auto& e : snap.particles) {
        if (e.position < lambda * t || e.position > (lambda + 2.0 * delta) * t)
            continue;
        sum.add(std::exp(detail::log_weight(kind, derived, e.position, t)));
    }
    return sum.value();
}

struct LimitDiagnostic {
    std::vector<double> times;
    std::vector<double> mean;
    std::vector<double> se;
    std::vector<std::array<double, 3>> frac_below_eps; // one row per time
    std::array<double, 3> eps_sweep;
};

/// Cross-replica means and the fraction of replicas whose martingale value
/// has fallen below eps: distinguishes a positive limit from a degenerate
/// one. The dichotomy is qualitative, so three eps values are reported.
inline LimitDiagnostic limit_diagnostic(
    const std::vector<std::vector<std::pair<double, double>>>& replica_trajectories,
    std::array<double, 3> eps_sweep = {1e-4, 1e-6, 1e-8}) {
    if (replica_trajectories.size() < 100)
        throw std::invalid_argument("limit_diagnostic: need at least 100 replicas");
    const auto& first = replica_trajectories.front();
    LimitDiagnostic diag;
    diag.eps_sweep = eps_sweep;
    for (std::size_t k = 0; k < first.size(); ++k) {
        std::vector<double> values;
        values.reserve(replica_trajectories.size());
        for (const auto& traj : replica_trajectories) {
            if (traj.size() != first.size() ||
                std::abs(traj[k].first - first[k].first) > 1e-9)
                throw std::invalid_argument(
                    "limit_diagnostic: replicas must share the time grid");
            values.push_back(traj[k].second);
        }
        const auto ms = mean_and_se(values);
        std::array<double, 3> frac{};
        for (int j = 0; j < 3; ++j) {
            std::size_t below = 0;
            for (double v : values) below += (v < eps_sweep[j]) ? 1 : 0;
            frac[j] = double(below) / double(values.size());
        }
        diag.times.push_back(first[k].first);
        diag.mean.push_back(ms.mean);
        diag.se.push_back(ms.se);
        diag.frac_below_eps.push_back(frac);
    }
    return diag;
}

} // namespace bbm
