#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "bbm/model.hpp"

namespace bbm {

/// Standard normal CDF. erfc keeps full relative accuracy in the lower
/// tail; absolute error is well under 1e-12 everywhere.
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / M_SQRT2); }

/// Expected number of particles strictly above x >= 0 at time t:
///   Phi(b0h sqrt(t) - x/sqrt(t)) * exp(b0h^2 t / 2 - b0h x + bh t).
inline double expected_count_above(const DerivedRates& derived, double t, double x) {
    if (!(t > 0.0)) throw std::invalid_argument("expected_count_above: t must be > 0");
    if (x < 0.0)
        throw std::invalid_argument(
            "expected_count_above: stated for x >= 0 only; use symmetry for x < 0");
    const double b = derived.beta_hat, b0 = derived.beta0_hat;
    const double st = std::sqrt(t);
    return normal_cdf(b0 * st - x / st) *
           std::exp(0.5 * b0 * b0 * t - b0 * x + b * t);
}

/// Expected total population: 2 Phi(b0h sqrt(t)) exp((b0h^2/2 + bh) t).
inline double expected_population(const DerivedRates& derived, double t) {
    if (!(t > 0.0)) throw std::invalid_argument("expected_population: t must be > 0");
    return 2.0 * expected_count_above(derived, t, 0.0);
}

struct GrowthFit {
    double slope;
    double intercept;
    double t_lo;
    double t_hi;
    double r_squared;
    std::size_t points;
};

/// Least-squares slope of log(value) against t over the trailing
/// window_fraction of the time range. Values must be positive.
inline GrowthFit growth_rate_fit(const std::vector<std::pair<double, double>>& series,
                                 double window_fraction) {
    if (!(window_fraction > 0.0) || window_fraction > 1.0)
        throw std::invalid_argument("growth_rate_fit: window_fraction in (0,1]");
    if (series.size() < 4)
        throw std::invalid_argument("growth_rate_fit: need at least 4 points");
    const double t_first = series.front().first, t_last = series.back().first;
    const double t_cut = t_last - window_fraction * (t_last - t_first);

    std::vector<std::pair<double, double>> pts;
    for (const auto& [t, v] : series) {
        if (t + 1e-12 < t_cut) continue;
        if (!(v > 0.0))
            throw std::invalid_argument("growth_rate_fit: nonpositive value");
        pts.emplace_back(t, std::log(v));
    }
    if (pts.size() < 4)
        throw std::invalid_argument("growth_rate_fit: fewer than 4 points in window");

    const double n = double(pts.size());
    double st = 0, sy = 0;
    for (auto& [t, y] : pts) { st += t; sy += y; }
    const double mt = st / n, my = sy / n;
    double sxx = 0, sxy = 0, syy = 0;
    for (auto& [t, y] : pts) {
        sxx += (t - mt) * (t - mt);
        sxy += (t - mt) * (y - my);
        syy += (y - my) * (y - my);
    }
    if (sxx == 0.0) throw std::invalid_argument("growth_rate_fit: degenerate t grid");
    GrowthFit fit{};
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mt;
    fit.t_lo = pts.front().first;
    fit.t_hi = pts.back().first;
    fit.r_squared = (syy == 0.0) ? 1.0 : (sxy * sxy) / (sxx * syy);
    fit.points = pts.size();
    return fit;
}

struct SurvivalEstimate {
    double p_hat;
    double ci_lo;
    double ci_hi;
};

/// Point estimate with a Wilson 95% interval.
inline SurvivalEstimate survival_estimate(long long successes, long long trials) {
    if (trials < 1 || successes < 0 || successes > trials)
        throw std::invalid_argument("survival_estimate: bad counts");
    constexpr double z = 1.959963984540054; // Phi^{-1}(0.975)
    const double n = double(trials);
    const double p = double(successes) / n;
    const double z2n = z * z / n;
    const double center = (p + 0.5 * z2n) / (1.0 + z2n);
    const double half =
        z * std::sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n)) / (1.0 + z2n);
    return {p, std::max(0.0, center - half), std::min(1.0, center + half)};
}

// ---- small statistics helpers -------------------------------------------

/// Compensated (Kahan) accumulator; keeps sums honest when terms span many
/// orders of magnitude.
class KahanSum {
public:
    void add(double x) {
        const double y = x - c_;
        const double t = s_ + y;
        c_ = (t - s_) - y;
        s_ = t;
    }
    double value() const { return s_; }

private:
    double s_ = 0.0;
    double c_ = 0.0;
};

struct MeanSe {
    double mean;
    double se;
    std::size_t n;
};

inline MeanSe mean_and_se(const std::vector<double>& xs) {
    if (xs.size() < 2) throw std::invalid_argument("mean_and_se: need n >= 2");
    KahanSum s;
    for (double x : xs) s.add(x);
    const double m = s.value() / double(xs.size());
    KahanSum q;
    for (double x : xs) q.add((x - m) * (x - m));
    const double var = q.value() / double(xs.size() - 1);
    return {m, std::sqrt(var / double(xs.size())), xs.size()};
}

// Regularised upper incomplete gamma Q(a, x), by series or continued
// fraction (Lentz). Relative accuracy ~1e-12, plenty for p-values.
inline double gamma_q(double a, double x) {
    if (!(a > 0.0) || x < 0.0) throw std::invalid_argument("gamma_q: bad args");
    if (x == 0.0) return 1.0;
    if (x < a + 1.0) {
        // P(a,x) by series, return 1 - P
        double ap = a, sum = 1.0 / a, del = sum;
        for (int i = 0; i < 1000; ++i) {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if (std::abs(del) < std::abs(sum) * 1e-15) break;
        }
        return 1.0 - sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
    }
    // Q(a,x) by continued fraction
    const double tiny = 1e-300;
    double b = x + 1.0 - a, c = 1.0 / tiny, d = 1.0 / b, h = d;
    for (int i = 1; i <= 1000; ++i) {
        const double an = -double(i) * (double(i) - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double delta = d * c;
        h *= delta;
        if (std::abs(delta - 1.0) < 1e-15) break;
    }
    return h * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

/// Upper-tail p-value of a chi-square statistic with df degrees of freedom.
inline double chi_square_pvalue(double statistic, int df) {
    if (df < 1) throw std::invalid_argument("chi_square_pvalue: df < 1");
    return gamma_q(0.5 * df, 0.5 * statistic);
}

} // namespace bbm
