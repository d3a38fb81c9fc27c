#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "bbm/analytics.hpp"
#include "bbm/kernels.hpp"
#include "bbm/model.hpp"
#include "bbm/random.hpp"

namespace bbm {

/// Dynamics of the distinguished line of descent.
///   Plain:          no drift, fission rates beta (in time) and beta0 (in
///                   local time), plain offspring laws.
///   OriginDrift:    drift beta0_hat toward the origin; rates m*beta and
///                   m0*beta0; size-biased offspring.
///   LinearDrift(l): constant drift l on the signed path; rate m*beta,
///                   size-biased p; homogeneous-only context (no at-origin
///                   fissions are counted).
///   RadialDrift(l): drift l applied to |xi| (away from the origin for
///                   l > 0); rates and offspring biased as in OriginDrift.
struct SpineMeasure {
    enum class Kind { Plain, OriginDrift, LinearDrift, RadialDrift };
    Kind kind = Kind::Plain;
    double lambda = 0.0; // LinearDrift / RadialDrift parameter

    static SpineMeasure plain() { return {Kind::Plain, 0.0}; }
    static SpineMeasure origin_drift() { return {Kind::OriginDrift, 0.0}; }
    static SpineMeasure linear_drift(double lambda) {
        return {Kind::LinearDrift, lambda};
    }
    static SpineMeasure radial_drift(double lambda) {
        return {Kind::RadialDrift, lambda};
    }

    bool biased() const { return kind != Kind::Plain; }
    bool operator==(const SpineMeasure& o) const {
        return kind == o.kind && lambda == o.lambda;
    }
};

struct Fission {
    double time;
    bool at_origin;
    int offspring;
    double xi;         // spine position at the fission (0 for at-origin)
    double local_time; // spine local time at the fission
};

struct SpinePath {
    SpineMeasure measure;
    double step_h = 0.0;
    std::vector<double> times;
    std::vector<double> xi;
    std::vector<double> local_time;
    std::vector<Fission> fissions;
};

/// Offspring law reweighted by k/m, the law seen at fissions along a biased
/// spine. Normalisation is exact by construction.
inline OffspringDistribution size_biased(const OffspringDistribution& dist) {
    std::vector<OffspringDistribution::Atom> atoms;
    atoms.reserve(dist.atoms().size());
    const double m = dist.mean();
    for (const auto& [n, w] : dist.atoms()) atoms.emplace_back(n, n * w / m);
    return OffspringDistribution(std::move(atoms));
}

/// Single spine trajectory over [0, horizon] with marked fission times and
/// offspring counts, simulated under the chosen measure. Radial measures
/// reuse the reflected-driver stepping of the population simulator with the
/// drift folded into the driver; the linear-drift measure steps the signed
/// path and samples local-time increments from the exact conditional law
/// given the endpoints.
inline SpinePath simulate_spine(const SpineMeasure& measure,
                                const ModelParams& params, double horizon,
                                RandomStream stream, double step_h = 0.005) {
    if (!(horizon > 0.0) || !(step_h > 0.0))
        throw std::invalid_argument("simulate_spine: horizon and step_h must be > 0");
    const DerivedRates derived = derive_rates(params);

    const bool biased = measure.biased();
    const bool linear = measure.kind == SpineMeasure::Kind::LinearDrift;
    const double time_rate =
        biased ? params.p_dist.mean() * params.beta : params.beta;
    const double lt_rate =
        biased ? params.q_dist.mean() * params.beta0 : params.beta0;
    const OffspringDistribution p_law =
        biased ? size_biased(params.p_dist) : params.p_dist;
    const OffspringDistribution q_law =
        biased ? size_biased(params.q_dist) : params.q_dist;

    double drift = 0.0;
    switch (measure.kind) {
        case SpineMeasure::Kind::Plain: drift = 0.0; break;
        case SpineMeasure::Kind::OriginDrift: drift = -derived.beta0_hat; break;
        case SpineMeasure::Kind::RadialDrift: drift = measure.lambda; break;
        case SpineMeasure::Kind::LinearDrift: drift = measure.lambda; break;
    }

    SpinePath path;
    path.measure = measure;
    path.step_h = step_h;

    const auto n_steps = std::size_t(std::llround(horizon / step_h));
    if (std::abs(double(n_steps) * step_h - horizon) > 1e-6 * std::max(1.0, horizon))
        throw std::invalid_argument("simulate_spine: horizon must be a multiple of step_h");

    // state
    double t = 0.0;
    double driver = 0.0, driver_min = 0.0; // radial modes
    double x = 0.0;                        // linear mode
    double lt = 0.0;
    int sign = 0;
    double hom_residual = exponential(stream, time_rate);
    double cat_residual = linear ? std::numeric_limits<double>::infinity()
                                 : exponential(stream, lt_rate);

    path.times.push_back(0.0);
    path.xi.push_back(0.0);
    path.local_time.push_back(0.0);

    auto position = [&]() {
        if (linear) return x;
        return sign * (driver - std::min(driver_min, 0.0));
    };

    // advance by hs, stamping the sub-step end with t_sub (kept exact on the
    // grid by the caller); fissions do not interrupt the motion
    auto sub_step = [&](double hs, double t_sub) {
        double dl;
        if (linear) {
            const double x0 = x;
            x = x0 + drift * hs + gaussian_increment(stream, hs);
            dl = bridge_local_time(stream, x0, x, hs);
        } else {
            const double d0 = driver;
            driver = d0 + drift * hs + gaussian_increment(stream, hs);
            const double new_min =
                update_running_min(stream, d0, driver, hs, driver_min);
            dl = std::min(driver_min, 0.0) - std::min(new_min, 0.0);
            driver_min = new_min;
            if (dl > 0.0) sign = (stream.next_u64() & 1u) ? 1 : -1;
        }
        const double lt0 = lt;
        t = t_sub;
        lt += dl;
        // at-origin fissions for each local-time level crossed in this
        // sub-step, snapped to the sub-step end, position exactly 0
        double crossed = 0.0;
        while (cat_residual <= dl - crossed) {
            crossed += cat_residual;
            path.fissions.push_back(
                {t, true, q_law.sample(stream.next_unit()), 0.0, lt0 + crossed});
            cat_residual = exponential(stream, lt_rate);
        }
        cat_residual -= dl - crossed;
    };

    for (std::size_t s = 0; s < n_steps; ++s) {
        const double t1 = double(s + 1) * step_h;
        while (t < t1) {
            const double remaining = t1 - t;
            if (hom_residual <= remaining) {
                const double hs = hom_residual;
                sub_step(hs, t + hs);
                path.fissions.push_back(
                    {t, false, p_law.sample(stream.next_unit()), position(), lt});
                hom_residual = exponential(stream, time_rate);
            } else {
                hom_residual -= remaining;
                sub_step(remaining, t1);
            }
        }
        path.times.push_back(t1);
        path.xi.push_back(position());
        path.local_time.push_back(lt);
    }
    return path;
}

struct ManyToOneEstimate {
    double estimate;
    double std_error;
};

/// Unbiased estimator of the expected number of particles above x at time
/// t: the mean of 1{y > x} exp(b0h l + bh t) over exact draws (y, l) from
/// the joint position/local-time law. No path simulation is involved, so
/// the estimate carries no discretisation bias.
inline ManyToOneEstimate many_to_one_estimate(const ModelParams& params, double t,
                                              double x, std::size_t n_samples,
                                              RandomStream stream) {
    if (n_samples < 2)
        throw std::invalid_argument("many_to_one_estimate: need n_samples >= 2");
    const DerivedRates derived = derive_rates(params);
    const JointLaw law(t);
    KahanSum sum, sum_sq;
    for (std::size_t i = 0; i < n_samples; ++i) {
        const auto [y, l] = sample_joint(stream, law);
        const double w =
            y > x ? std::exp(derived.beta0_hat * l + derived.beta_hat * t) : 0.0;
        sum.add(w);
        sum_sq.add(w * w);
    }
    const double n = double(n_samples);
    const double mean = sum.value() / n;
    const double var =
        std::max(0.0, (sum_sq.value() - n * mean * mean) / (n - 1.0));
    return {mean, std::sqrt(var / n)};
}

namespace detail {

// log of spine(s) = (Girsanov weight) * exp(-bh s - b0h L_s) for the
// measure; for LinearDrift the context is homogeneous-only, so no local
// time enters.
inline double log_spine_weight(const SpineMeasure& measure,
                               const DerivedRates& d, double s, double xi,
                               double lt) {
    const double base = -d.beta_hat * s;
    switch (measure.kind) {
        case SpineMeasure::Kind::Plain:
            return base - d.beta0_hat * lt;
        case SpineMeasure::Kind::OriginDrift:
            return base - d.beta0_hat * std::abs(xi) -
                   0.5 * d.beta0_hat * d.beta0_hat * s;
        case SpineMeasure::Kind::RadialDrift:
            return base + measure.lambda * std::abs(xi) -
                   (measure.lambda + d.beta0_hat) * lt -
                   0.5 * measure.lambda * measure.lambda * s;
        case SpineMeasure::Kind::LinearDrift:
            return base + measure.lambda * xi -
                   0.5 * measure.lambda * measure.lambda * s;
    }
    return 0.0;
}

} // namespace detail

/// Conditional expectation of the additive martingale given the spine:
/// spine(t) plus sum over fissions up to t of (A_n - 1) spine(S_n).
inline double spine_decomposition_value(const SpinePath& path,
                                        const SpineMeasure& measure,
                                        const ModelParams& params, double t) {
    if (!(path.measure == measure))
        throw std::invalid_argument(
            "spine_decomposition_value: path was simulated under a different measure");
    if (path.times.empty() || t > path.times.back() + 1e-9 || t < 0.0)
        throw std::invalid_argument("spine_decomposition_value: t outside the path");
    const DerivedRates derived = derive_rates(params);

    // locate t on the skeleton grid
    std::size_t k = path.times.size() - 1;
    while (k > 0 && path.times[k] > t + 1e-9) --k;
    if (std::abs(path.times[k] - t) > 1e-9)
        throw std::invalid_argument(
            "spine_decomposition_value: t must lie on the skeleton grid");

    KahanSum sum;
    sum.add(std::exp(detail::log_spine_weight(measure, derived, path.times[k],
                                              path.xi[k], path.local_time[k])));
    for (const Fission& f : path.fissions) {
        if (f.time > t + 1e-9) break;
        sum.add(double(f.offspring - 1) *
                std::exp(detail::log_spine_weight(measure, derived, f.time, f.xi,
                                                  f.local_time)));
    }
    return sum.value();
}

} // namespace bbm
