#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>

#include "bbm/random.hpp"

namespace bbm {

namespace detail {

// 256-layer ziggurat for the standard normal. Tables are built once from
// the layer constants (r, v): every layer has area v, layer 0 holds the
// [0,r] base rectangle plus the tail mass beyond r.
struct ZigguratTables {
    static constexpr int N = 256;
    static constexpr double R = 3.6541528853610088;
    static constexpr double V = 4.92867323399e-3;

    // fast-path entries packed per layer: one cache line serves both loads
    struct Layer {
        double w;        // x = j * w, |j| < 2^51
        std::int64_t k;  // fast-accept bound on |j|
    };
    Layer layer[N];
    double f[N]; // f[i] = exp(-x_i^2/2), f[0] = 1; slow path only

    ZigguratTables() {
        constexpr double SCALE = 2251799813685248.0; // 2^51
        double x[N];
        x[N - 1] = R;
        f[N - 1] = std::exp(-0.5 * R * R);
        for (int i = N - 1; i >= 2; --i) {
            const double fi = f[i] + V / x[i];
            x[i - 1] = std::sqrt(-2.0 * std::log(fi));
            f[i - 1] = fi;
        }
        // top of the stack must close at the mode
        assert(std::abs(f[1] + V / x[1] - 1.0) < 1e-7);
        f[0] = 1.0;

        const double base = V / f[N - 1]; // virtual width of layer 0
        layer[0].w = base / SCALE;
        layer[0].k = static_cast<std::int64_t>(SCALE * (R / base));
        layer[1].k = 0;
        for (int i = 1; i < N; ++i) {
            layer[i].w = x[i] / SCALE;
            if (i >= 2)
                layer[i].k = static_cast<std::int64_t>(SCALE * (x[i - 1] / x[i]));
        }
    }
};

// namespace-scope instance: no per-call initialisation guard
inline const ZigguratTables ZIGGURAT{};

inline const ZigguratTables& ziggurat() { return ZIGGURAT; }

// 128-entry table log for the inverse-transform samplers: absolute error
// under 3e-13, a hair coarser than libm but three times faster; the
// perturbation of sampled quantiles is far below statistical resolution.
struct LogTables {
    double inv_m0[128];
    double log_m0[128];
    LogTables() {
        for (int i = 0; i < 128; ++i) {
            const double m0 = 1.0 + (double(i) + 0.5) / 128.0;
            inv_m0[i] = 1.0 / m0;
            log_m0[i] = std::log(m0);
        }
    }
};

inline const LogTables LOG_TABLES{};

} // namespace detail

/// log(x) for finite positive normal x via mantissa tables; absolute error
/// below 3e-13.
inline double fast_log(double x) {
    constexpr double LN2 = 0.6931471805599453;
    std::uint64_t bits;
    __builtin_memcpy(&bits, &x, 8);
    const int e = int((bits >> 52) & 0x7ffu) - 1023;
    const int idx = int((bits >> 45) & 127u);
    bits = (bits & 0x000fffffffffffffull) | 0x3ff0000000000000ull;
    double m;
    __builtin_memcpy(&m, &bits, 8);
    const double r = m * detail::LOG_TABLES.inv_m0[idx] - 1.0; // |r| <= 2^-8
    const double r2 = r * r;
    // log1p(r), degree 5
    const double p = r - 0.5 * r2 +
                     r * r2 * (1.0 / 3.0 + r * (-0.25 + r * 0.2));
    return double(e) * LN2 + detail::LOG_TABLES.log_m0[idx] + p;
}

/// Exact standard normal draw (ziggurat rejection sampler).
inline double standard_normal(RandomStream& stream) {
    const auto& z = detail::ziggurat();
    for (;;) {
        const std::uint64_t u = stream.next_u64();
        const int i = static_cast<int>(u & 255u);
        const std::int64_t j =
            static_cast<std::int64_t>(u >> 12) - (std::int64_t{1} << 51);
        const double x = static_cast<double>(j) * z.layer[i].w;
        if ((j < 0 ? -j : j) < z.layer[i].k) return x; // fully inside the layer
        if (i == 0) {
            // tail beyond R: Marsaglia's exact exponential-rejection scheme
            for (;;) {
                const double tx = -fast_log(stream.next_unit()) / detail::ZigguratTables::R;
                const double ty = -fast_log(stream.next_unit());
                if (ty + ty >= tx * tx)
                    return j > 0 ? detail::ZigguratTables::R + tx
                                 : -(detail::ZigguratTables::R + tx);
            }
        }
        const double fx = std::exp(-0.5 * x * x);
        if (z.f[i] + stream.next_unit() * (z.f[i - 1] - z.f[i]) < fx) return x;
    }
}

/// Sample of N(0, h).
inline double gaussian_increment(RandomStream& stream, double h) {
    assert(h > 0.0);
    return std::sqrt(h) * standard_normal(stream);
}

/// Exact minimum of a Brownian bridge with endpoints a, b over duration h.
/// Tail law: P(min <= w) = exp(-2(a-w)(b-w)/h) for w <= min(a,b); sampled
/// by inverting the quadratic in the exponent.
inline double bridge_min(RandomStream& stream, double a, double b, double h) {
    assert(h > 0.0);
    const double c = -0.5 * h * fast_log(stream.next_unit());
    const double d = a - b;
    return 0.5 * (a + b - std::sqrt(d * d + 4.0 * c));
}

/// Exact maximum of the bridge (reflection of bridge_min).
inline double bridge_max(RandomStream& stream, double a, double b, double h) {
    return -bridge_min(stream, -a, -b, h);
}

/// Probability that a Brownian bridge from a to b over h touches zero.
inline double bridge_hits_zero_prob(double a, double b, double h) {
    assert(h > 0.0);
    if (a * b <= 0.0) return 1.0;
    return std::exp(-2.0 * a * b / h);
}

// ln of the smallest value next_unit() can produce, with margin. A bridge
// event of conditional probability below e^-37.5 can never be realised by
// the generator, so skipping the draw is outcome-identical.
inline constexpr double MIN_LOG_UNIT = -37.5;

/// Running-minimum update for one driver step: equal in law (and, given the
/// stream, equal in outcome) to min(m, bridge_min(a, b, h)), but consumes no
/// draw when the bridge cannot go below m. Requires m <= a.
inline double update_running_min(RandomStream& stream, double a, double b,
                                 double h, double m) {
    if (b > m) {
        // P(min <= m) = exp(-2(a-m)(b-m)/h); below e^MIN_LOG_UNIT the event
        // is unreachable at the generator's resolution
        const double prod = (a - m) * (b - m);
        if (prod >= -0.5 * MIN_LOG_UNIT * h) return m;
        const double lu = fast_log(stream.next_unit());
        if (lu * h >= -2.0 * prod) return m; // sampled min lands above m
        const double c = -0.5 * h * lu;
        const double d = a - b;
        return 0.5 * (a + b - std::sqrt(d * d + 4.0 * c));
    }
    // endpoint already below m: the minimum is below m surely
    return bridge_min(stream, a, b, h);
}

/// Local time at zero accrued by a Brownian path over one step, conditional
/// on the endpoints: with c = |a|+|b| and d = b-a,
///   P(dL >= l) = exp(-((c+l)^2 - d^2)/(2h)),  l >= 0,
/// whose l=0 value is the zero-touch probability. Drift-free given the
/// endpoints, so it applies to constant-drift paths as well.
inline double bridge_local_time(RandomStream& stream, double a, double b,
                                double h) {
    assert(h > 0.0);
    const double c = std::abs(a) + std::abs(b);
    const double d = b - a;
    const double q = -0.5 * (c * c - d * d) / h;
    if (q <= MIN_LOG_UNIT) return 0.0; // touch impossible at stream resolution
    const double u = stream.next_unit();
    const double s2 = d * d - 2.0 * h * fast_log(u);
    const double l = std::sqrt(s2) - c;
    return l > 0.0 ? l : 0.0;
}

/// First hitting time of zero from x != 0: H = x^2 / Z^2 with Z standard
/// normal, so P(H <= t) = 2(1 - Phi(|x|/sqrt(t))).
inline double hitting_time_of_zero(RandomStream& stream, double x) {
    if (x == 0.0)
        throw std::invalid_argument("hitting_time_of_zero: x must be nonzero");
    double z = standard_normal(stream);
    while (z == 0.0) z = standard_normal(stream);
    return (x * x) / (z * z);
}

/// Joint law of (position, local time at zero) of a Brownian path at a
/// fixed time t, started at the origin.
struct JointLaw {
    double t;
    explicit JointLaw(double t_) : t(t_) {
        if (!(t > 0.0)) throw std::invalid_argument("JointLaw: t must be > 0");
    }
};

/// Density (|y|+l)/sqrt(2 pi t^3) * exp(-(|y|+l)^2 / (2t)) on l >= 0.
inline double joint_density(const JointLaw& law, double y, double l) {
    if (l < 0.0) throw std::invalid_argument("joint_density: l must be >= 0");
    const double s = std::abs(y) + l;
    const double t = law.t;
    return s / std::sqrt(2.0 * M_PI * t * t * t) * std::exp(-s * s / (2.0 * t));
}

/// CDF of S = |y| + l under the joint law: the radial part is the norm of a
/// 3-d centred Gaussian with variance t per coordinate,
///   P(S <= s) = erf(s/sqrt(2t)) - s sqrt(2/(pi t)) exp(-s^2/(2t)).
inline double radial_cdf(const JointLaw& law, double s) {
    if (s <= 0.0) return 0.0;
    const double t = law.t;
    return std::erf(s / std::sqrt(2.0 * t)) -
           s * std::sqrt(2.0 / (M_PI * t)) * std::exp(-s * s / (2.0 * t));
}

/// Exact sample of (y, l): draw S as the 3-d Gaussian norm, then y uniform
/// on (-S, S) and l = S - |y|.
inline std::pair<double, double> sample_joint(RandomStream& stream,
                                              const JointLaw& law) {
    const double z1 = standard_normal(stream);
    const double z2 = standard_normal(stream);
    const double z3 = standard_normal(stream);
    const double s = std::sqrt(law.t * (z1 * z1 + z2 * z2 + z3 * z3));
    const double y = (2.0 * stream.next_unit() - 1.0) * s;
    return {y, s - std::abs(y)};
}

/// Exponential draw with the given rate (used for branching clocks).
inline double exponential(RandomStream& stream, double rate) {
    assert(rate > 0.0);
    return -fast_log(stream.next_unit()) / rate;
}

} // namespace bbm
