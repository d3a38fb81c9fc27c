#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bbm/genealogy.hpp"
#include "bbm/kernels.hpp"
#include "bbm/model.hpp"
#include "bbm/random.hpp"

namespace bbm {

/// One particle of the branching system. The absolute position and the
/// local time at the origin are carried by a reflection coupling: the
/// driver is a Brownian path started at |birth position|, and
///   |X| = driver - min(running driver minimum, 0),
///   local time accrued since birth = max(0, -running driver minimum).
/// The signed position is sign * |X|; the sign is constant between
/// zero-touches and resampled uniformly on every step that touches zero.
struct Particle {
    RandomStream stream;
    double driver = 0.0;
    double driver_min = 0.0;
    double local_time_birth = 0.0;
    double hom_residual = 0.0; // remaining Exp(beta) lifetime
    double cat_residual = 0.0; // remaining Exp(beta0) local-time level
    std::int64_t node = Genealogy::ROOT;
    int sign = 0; // 0 only when exactly at the origin

    double abs_pos() const { return driver - std::min(driver_min, 0.0); }
    double local_time() const {
        return local_time_birth + std::max(0.0, -driver_min);
    }
    double position() const { return sign * abs_pos(); }
};

enum class EventKind { Homogeneous, Catalytic };

struct BranchEvent {
    double time;
    ParticleLabel label;
    EventKind kind;
    double position; // death position (exactly 0 for catalytic deaths)
    int n_children;
};

enum class CapPolicy { StopAndFlag };

struct SimConfig {
    double step_h = 0.005;
    double horizon = 1.0;
    std::vector<double> record_times;
    std::size_t population_cap = 1'000'000;
    CapPolicy cap_policy = CapPolicy::StopAndFlag;
    bool homogeneous_only = false; // suppress catalytic births entirely
    bool collect_events = false;
    // per-step path recording window, enabled when hi >= lo
    double record_window_lo = 0.0;
    double record_window_hi = -1.0;
};

struct SnapshotEntry {
    ParticleLabel label;
    double position;
    double local_time;
};

struct PopulationSnapshot {
    double time;
    bool homogeneous_only = false;
    std::vector<SnapshotEntry> particles;
};

/// Lightweight view passed to observers at recording times; avoids
/// materialising labels on hot paths.
struct Frame {
    double time;
    const std::vector<Particle>& particles;
    const Genealogy& genealogy;
    bool homogeneous_only;
    bool truncation_frame; // final partial state when the cap was hit
};

// ---- per-step path recording ---------------------------------------------

/// One step of one particle's path. y_lo/y_hi bound the reflected |X| over
/// the step: exact in law on no-touch steps, and on touch steps y_lo = 0
/// with y_hi an upper bound.
struct PathSegment {
    std::int64_t node;
    double t0, t1;
    double x0, x1; // signed endpoints
    bool touched;
    double y_lo, y_hi;
};

struct RecordedFrame {
    double time;
    std::vector<std::pair<std::int64_t, double>> particles; // (node, position)
};

struct PathRecording {
    double window_lo = 0.0;
    double window_hi = -1.0;
    double step_h = 0.0;
    std::vector<PathSegment> segments;
    std::vector<RecordedFrame> frames; // one per grid time inside the window

    bool enabled() const { return window_hi >= window_lo; }
};

struct SimResult {
    std::vector<PopulationSnapshot> snapshots;
    std::vector<BranchEvent> events;
    bool truncated = false;
    double truncation_time = 0.0;
    Genealogy genealogy;
    PathRecording recording;
};

namespace detail {

struct DeathInfo {
    EventKind kind;
    double time;
    double position;   // signed; exactly 0 for catalytic deaths
    double local_time; // ancestral local time at the death instant
};

/// Complete one motion sub-step after the endpoint d1 has been drawn:
/// running-minimum update, local-time accrual, sign renewal on touches,
/// catalytic death detection. Returns the death if the catalytic level was
/// crossed. The homogeneous residual is NOT consumed here.
inline std::optional<DeathInfo> settle_substep(Particle& p, double d0, double d1,
                                               double hs, double now,
                                               double t_next,
                                               PathRecording* rec, double x0) {
    double new_min;
    double exact_min = std::numeric_limits<double>::quiet_NaN();
    if (rec) {
        exact_min = bridge_min(p.stream, d0, d1, hs);
        new_min = std::min(p.driver_min, exact_min);
    } else {
        new_min = update_running_min(p.stream, d0, d1, hs, p.driver_min);
    }

    const double shift_old = std::min(p.driver_min, 0.0);
    const double shift_new = std::min(new_min, 0.0);
    const double dl = shift_old - shift_new; // local time accrued

    if (dl >= p.cat_residual) { // catalytic level crossed: dies at 0
        const double death_lt = p.local_time_birth - shift_old + p.cat_residual;
        p.driver = d1;
        p.driver_min = new_min;
        p.sign = 0;
        if (rec)
            rec->segments.push_back({p.node, now, t_next, x0, 0.0, true, 0.0,
                                     bridge_max(p.stream, d0, d1, hs) - shift_new});
        return DeathInfo{EventKind::Catalytic, t_next, 0.0, death_lt};
    }

    p.driver = d1;
    p.driver_min = new_min;
    if (dl > 0.0) { // touched zero: sign renewed, level consumed
        p.cat_residual -= dl;
        p.sign = (p.stream.next_u64() & 1u) ? 1 : -1;
    }

    if (rec) {
        const double x1 = p.position();
        double y_lo, y_hi;
        const double y_max = bridge_max(p.stream, d0, d1, hs);
        if (dl > 0.0) {
            y_lo = 0.0;
            y_hi = y_max - shift_new;
        } else {
            y_lo = exact_min - shift_old;
            y_hi = y_max - shift_old;
        }
        rec->segments.push_back({p.node, now, t_next, x0, x1, dl > 0.0, y_lo, y_hi});
    }
    return std::nullopt;
}

/// Advance a particle from t_begin to t_end or to its death, whichever
/// comes first. Homogeneous deaths occur at the exact exponential time (the
/// step is cut there); catalytic deaths are snapped to the end of the
/// sub-step in which the local-time level was crossed, at position exactly
/// 0. When both clocks fire in one sub-step the catalytic death wins (it
/// crossed earlier or at the same instant).
inline std::optional<DeathInfo> advance_particle(Particle& p, double t_begin,
                                                 double t_end,
                                                 PathRecording* rec) {
    double now = t_begin;
    while (now < t_end) {
        const double h_left = t_end - now;
        const bool hom_due = p.hom_residual <= h_left;
        const double hs = hom_due ? p.hom_residual : h_left;
        const double t_next = hom_due ? now + hs : t_end;

        if (hs <= 0.0)
            return DeathInfo{EventKind::Homogeneous, now, p.position(),
                             p.local_time()};

        const double x0 = rec ? p.position() : 0.0;
        const double d0 = p.driver;
        const double d1 = d0 + std::sqrt(hs) * standard_normal(p.stream);
        auto death = settle_substep(p, d0, d1, hs, now, t_next, rec, x0);
        if (death) return death;

        if (hom_due)
            return DeathInfo{EventKind::Homogeneous, t_next, p.position(),
                             p.local_time()};
        p.hom_residual -= hs;
        now = t_next;
    }
    return std::nullopt;
}

inline Particle make_child(const Particle& parent, const DeathInfo& death,
                           std::uint32_t index, const ModelParams& params,
                           bool homogeneous_only, Genealogy& gen) {
    Particle c;
    c.stream = parent.stream.child(index);
    c.node = gen.add_child(parent.node, index, death.time);
    const double apos = std::abs(death.position);
    c.driver = apos;
    c.driver_min = 0.0; // reflection uses min(running min, 0) only
    c.local_time_birth = death.local_time;
    c.hom_residual = exponential(c.stream, params.beta);
    c.cat_residual = homogeneous_only
                         ? std::numeric_limits<double>::infinity()
                         : exponential(c.stream, params.beta0);
    c.sign = death.position > 0.0 ? 1 : (death.position < 0.0 ? -1 : 0);
    return c;
}

struct RawEvent {
    double time;
    std::int64_t node;
    EventKind kind;
    double position;
    int n_children;
};

// Safety radius for striding over many steps at once: a driver at distance
// Y from the touch level can move freely for (Y/STRIDE_RADIUS)^2 time units,
// since the marginal touch probability 2 Phi(-STRIDE_RADIUS) stays below the
// e^MIN_LOG_UNIT resolution of the generator.
inline constexpr double STRIDE_RADIUS = 9.0;

/// Advance a sleeping particle over [since, until] in one exact stride: a
/// Gaussian endpoint plus one lazy bridge-minimum update. The wake schedule
/// guarantees no homogeneous death inside the stride and makes a zero touch
/// unreachable at the generator's resolution; if a touch is realised anyway
/// (probability < e^MIN_LOG_UNIT per stride) it is handled like a touch step
/// of length tau snapped at the stride end.
inline std::optional<DeathInfo> leap_particle(Particle& p, double since,
                                              double until) {
    const double tau = until - since;
    if (tau <= 0.0) return std::nullopt;
    const double d0 = p.driver;
    const double d1 = d0 + std::sqrt(tau) * standard_normal(p.stream);
    const double new_min = update_running_min(p.stream, d0, d1, tau, p.driver_min);
    const double shift_old = std::min(p.driver_min, 0.0);
    const double shift_new = std::min(new_min, 0.0);
    const double dl = shift_old - shift_new;
    if (dl >= p.cat_residual) {
        const double death_lt = p.local_time_birth - shift_old + p.cat_residual;
        p.driver = d1;
        p.driver_min = new_min;
        p.sign = 0;
        return DeathInfo{EventKind::Catalytic, until, 0.0, death_lt};
    }
    p.driver = d1;
    p.driver_min = new_min;
    p.hom_residual -= tau;
    if (dl > 0.0) {
        p.cat_residual -= dl;
        p.sign = (p.stream.next_u64() & 1u) ? 1 : -1;
    }
    return std::nullopt;
}

inline std::vector<std::size_t> grid_indices(const std::vector<double>& times,
                                             double h, std::size_t n_steps,
                                             const char* what) {
    std::vector<std::size_t> idx;
    for (double t : times) {
        const double r = t / h;
        const auto i = static_cast<long long>(std::llround(r));
        if (i < 0 || std::abs(r - double(i)) > 1e-6 ||
            std::size_t(i) > n_steps)
            throw std::invalid_argument(std::string(what) +
                                        ": times must be grid multiples of step_h "
                                        "inside [0, horizon]");
        idx.push_back(std::size_t(i));
    }
    std::sort(idx.begin(), idx.end());
    idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
    return idx;
}

} // namespace detail

/// One public stepping call: advance a particle by h (or to its death).
/// Pure in (state, stream contents); two calls on identical state yield
/// identical results. t_begin only stamps recorded segments and death times.
inline std::optional<detail::DeathInfo> step_particle(Particle& state, double h,
                                                      PathRecording* rec = nullptr,
                                                      double t_begin = 0.0) {
    if (!(h > 0.0)) throw std::invalid_argument("step_particle: h must be > 0");
    return detail::advance_particle(state, t_begin, t_begin + h, rec);
}

/// Offspring of a dead particle: count drawn from the q law at the origin
/// and the p law elsewhere; children inherit the death position and the
/// ancestral local time and get fresh clocks.
inline std::vector<Particle> branch_offspring(Particle& parent, bool at_origin,
                                              const ModelParams& params,
                                              Genealogy& gen,
                                              bool homogeneous_only = false,
                                              double death_time = 0.0) {
    const detail::DeathInfo death{at_origin ? EventKind::Catalytic
                                            : EventKind::Homogeneous,
                                  death_time,
                                  at_origin ? 0.0 : parent.position(),
                                  parent.local_time()};
    const OffspringDistribution& law = at_origin ? params.q_dist : params.p_dist;
    const int k = law.sample(parent.stream.next_unit());
    std::vector<Particle> children;
    children.reserve(std::size_t(k));
    for (int i = 1; i <= k; ++i)
        children.push_back(detail::make_child(parent, death, std::uint32_t(i),
                                              params, homogeneous_only, gen));
    return children;
}

/// Event-driven simulation of the branching system on a fixed step grid.
/// The observer is called with a Frame at every requested record time (and
/// once more, flagged, if the population cap stops the run).
template <typename Observer>
SimResult simulate_observed(const ModelParams& params, const SimConfig& cfg,
                            const RandomStream& stream, Observer&& observe) {
    if (!(cfg.step_h > 0.0) || !(cfg.horizon > 0.0))
        throw std::invalid_argument("SimConfig: step_h and horizon must be > 0");
    if (cfg.population_cap < 1)
        throw std::invalid_argument("SimConfig: population_cap must be >= 1");
    for (double t : cfg.record_times)
        if (t < 0.0 || t > cfg.horizon + 1e-9)
            throw std::invalid_argument("SimConfig: record_times outside [0, horizon]");

    const double h = cfg.step_h;
    const auto n_steps = std::size_t(std::llround(cfg.horizon / h));
    if (std::abs(double(n_steps) * h - cfg.horizon) > 1e-6 * std::max(1.0, cfg.horizon))
        throw std::invalid_argument("SimConfig: horizon must be a multiple of step_h");

    const auto record_idx =
        detail::grid_indices(cfg.record_times, h, n_steps, "record_times");

    SimResult result;
    PathRecording* rec = nullptr;
    std::size_t window_lo_idx = 0, window_hi_idx = 0;
    if (cfg.record_window_hi >= cfg.record_window_lo) {
        const auto w = detail::grid_indices(
            {cfg.record_window_lo, cfg.record_window_hi}, h, n_steps, "record_window");
        window_lo_idx = w.front();
        window_hi_idx = w.back();
        result.recording.window_lo = cfg.record_window_lo;
        result.recording.window_hi = cfg.record_window_hi;
        result.recording.step_h = h;
        rec = &result.recording;
    }

    std::vector<Particle> pop;
    pop.reserve(1024);
    {
        Particle root;
        root.stream = stream.child(0xb0uLL);
        root.node = Genealogy::ROOT;
        root.hom_residual = exponential(root.stream, params.beta);
        root.cat_residual = cfg.homogeneous_only
                                ? std::numeric_limits<double>::infinity()
                                : exponential(root.stream, params.beta0);
        pop.push_back(root);
    }

    std::vector<detail::RawEvent> raw_events;
    auto capture_frame = [&](double t) {
        RecordedFrame f;
        f.time = t;
        f.particles.reserve(pop.size());
        for (const Particle& p : pop) f.particles.emplace_back(p.node, p.position());
        result.recording.frames.push_back(std::move(f));
    };

    std::size_t next_record = 0;
    auto emit_records_at = [&](std::size_t step_idx, double t) {
        while (next_record < record_idx.size() && record_idx[next_record] == step_idx) {
            observe(Frame{t, pop, result.genealogy, cfg.homogeneous_only, false});
            ++next_record;
        }
    };

    emit_records_at(0, 0.0);
    if (rec && window_lo_idx == 0) capture_frame(0.0);

    // steps at which every particle must be awake: record times, recording
    // window edges, and the horizon
    std::vector<std::size_t> boundaries = record_idx;
    if (rec) {
        boundaries.push_back(window_lo_idx);
        boundaries.push_back(window_hi_idx);
    }
    boundaries.push_back(n_steps);
    std::sort(boundaries.begin(), boundaries.end());
    boundaries.erase(std::unique(boundaries.begin(), boundaries.end()),
                     boundaries.end());

    struct Dormant {
        Particle particle;
        double since;
    };
    std::vector<std::vector<Dormant>> buckets(n_steps + 1);
    std::size_t dormant_count = 0;
    std::size_t live = 1;
    constexpr std::size_t MIN_SLEEP_STEPS = 8;

    std::vector<Particle> staging; // children born during the current step
    std::vector<std::pair<Particle, detail::DeathInfo>> death_stack;

    for (std::size_t s = 0; s < n_steps && !result.truncated; ++s) {
        const double t0 = double(s) * h;
        const double t1 = double(s + 1) * h;
        PathRecording* step_rec =
            (rec && s >= window_lo_idx && s < window_hi_idx) ? rec : nullptr;

        // births replace the parent in place; children are advanced to the
        // step end at once (dying children recurse through the stack)
        auto process_death = [&](const Particle& dying,
                                 const detail::DeathInfo& first) -> bool {
            death_stack.clear();
            death_stack.emplace_back(dying, first);
            while (!death_stack.empty()) {
                Particle parent = std::move(death_stack.back().first);
                const detail::DeathInfo info = death_stack.back().second;
                death_stack.pop_back();
                const OffspringDistribution& law =
                    info.kind == EventKind::Catalytic ? params.q_dist
                                                      : params.p_dist;
                const int k = law.sample(parent.stream.next_unit());
                if (live - 1 + std::size_t(k) > cfg.population_cap) {
                    // cap hit: stop at this instant without this birth
                    result.truncated = true;
                    result.truncation_time = info.time;
                    death_stack.emplace_back(std::move(parent), info);
                    return false;
                }
                live += std::size_t(k) - 1;
                if (cfg.collect_events)
                    raw_events.push_back(
                        {info.time, parent.node, info.kind, info.position, k});
                for (int c = 1; c <= k; ++c) {
                    Particle child =
                        detail::make_child(parent, info, std::uint32_t(c), params,
                                           cfg.homogeneous_only, result.genealogy);
                    if (info.time < t1) {
                        auto death = detail::advance_particle(child, info.time, t1,
                                                              step_rec);
                        if (death) {
                            death_stack.emplace_back(std::move(child), *death);
                            continue;
                        }
                    }
                    staging.push_back(std::move(child));
                }
            }
            return true;
        };

        // park a particle that sits far from the origin until the first step
        // where it could matter again (or a boundary step)
        const double sleep_floor =
            detail::STRIDE_RADIUS * std::sqrt(double(MIN_SLEEP_STEPS) * h);
        auto try_sleep = [&](Particle& p) -> bool {
            if (p.abs_pos() < sleep_floor) return false; // cheap pre-filter
            if (s + 1 + MIN_SLEEP_STEPS > n_steps) return false;
            if (rec && s + 1 >= window_lo_idx && s + 1 < window_hi_idx)
                return false;
            const double y = p.abs_pos() / detail::STRIDE_RADIUS;
            const double tau = std::min(y * y, p.hom_residual);
            if (!(tau >= double(MIN_SLEEP_STEPS) * h)) return false;
            // the particle must be present in frames at boundary steps,
            // including the one emitted right after this step
            const auto next = std::upper_bound(boundaries.begin(),
                                               boundaries.end(), s);
            if (next == boundaries.end() || *next == s + 1) return false;
            const auto reach = s + 1 + std::size_t(tau / h);
            const std::size_t wake = std::min(reach, *next);
            if (wake < s + 1 + MIN_SLEEP_STEPS) return false;
            buckets[wake].push_back({std::move(p), t1});
            ++dormant_count;
            return true;
        };

        // removals swap the last unscanned particle in; survivor order is
        // free to change (snapshots sort by label, aggregation is
        // order-independent)
        const double sqrt_h = std::sqrt(h);
        const double skip_thresh = -0.5 * MIN_LOG_UNIT * h;
        Particle* const data = pop.data();
        std::size_t last = pop.size(); // one past the unscanned region
        std::size_t i = 0;
        while (i < last) {
            Particle& p = data[i];
            std::optional<detail::DeathInfo> death;
            if (!step_rec && p.hom_residual > h) {
                // fast path: one full step, no clocks due; identical math to
                // advance_particle with the running-minimum skip inlined
                const double d0 = p.driver;
                const double d1 = d0 + sqrt_h * standard_normal(p.stream);
                const double m = p.driver_min;
                if (d1 > m && (d0 - m) * (d1 - m) >= skip_thresh) {
                    p.driver = d1;
                    p.hom_residual -= h;
                    if (!try_sleep(p)) ++i;
                    else data[i] = data[--last];
                    continue;
                }
                death = detail::settle_substep(p, d0, d1, h, t0, t1, nullptr, 0.0);
                if (!death) p.hom_residual -= h;
            } else {
                death = detail::advance_particle(p, t0, t1, step_rec);
            }
            if (!death) {
                if (!try_sleep(p)) ++i;
                else data[i] = data[--last];
                continue;
            }
            const bool ok = process_death(p, *death);
            data[i] = data[--last];
            if (!ok) break;
        }

        std::size_t drained = 0;
        bool merged = false;
        if (!result.truncated) {
            pop.resize(last);
            pop.insert(pop.end(), std::make_move_iterator(staging.begin()),
                       std::make_move_iterator(staging.end()));
            staging.clear();
            merged = true;

            // wake the particles scheduled for this step end: one exact
            // stride over their sleep interval
            auto& wake_list = buckets[s + 1];
            for (; drained < wake_list.size(); ++drained) {
                Dormant& d = wake_list[drained];
                --dormant_count;
                auto death = detail::leap_particle(d.particle, d.since, t1);
                if (death) {
                    if (!process_death(d.particle, *death)) {
                        ++drained;
                        break;
                    }
                    continue;
                }
                if (!try_sleep(d.particle)) pop.push_back(std::move(d.particle));
            }
            if (!result.truncated) wake_list.clear();
        }

        if (result.truncated) {
            // partial state at the stopping instant: survivors, pending and
            // unscanned particles, children born this step, and sleepers
            // strode up to the current step end (their strides are shorter
            // than scheduled, so still exact; fallback deaths are ignored
            // here and the particles kept as they stand)
            if (!merged) pop.resize(last);
            std::vector<Particle> partial;
            partial.reserve(live + death_stack.size());
            partial.insert(partial.end(), pop.begin(), pop.end());
            for (auto& [particle, info] : death_stack)
                partial.push_back(std::move(particle));
            partial.insert(partial.end(), staging.begin(), staging.end());
            buckets[s + 1].erase(buckets[s + 1].begin(),
                                 buckets[s + 1].begin() + long(drained));
            for (auto& bucket : buckets)
                for (Dormant& d : bucket) {
                    detail::leap_particle(d.particle, d.since, t1);
                    partial.push_back(std::move(d.particle));
                }
            pop = std::move(partial);
            staging.clear();
            observe(Frame{result.truncation_time, pop, result.genealogy,
                          cfg.homogeneous_only, true});
            break;
        }

        if (rec && s + 1 >= window_lo_idx && s + 1 <= window_hi_idx)
            capture_frame(t1);
        emit_records_at(s + 1, t1);
    }

    if (cfg.collect_events) {
        result.events.reserve(raw_events.size());
        for (const auto& e : raw_events)
            result.events.push_back({e.time, result.genealogy.label(e.node),
                                     e.kind, e.position, e.n_children});
        std::sort(result.events.begin(), result.events.end(),
                  [](const BranchEvent& a, const BranchEvent& b) {
                      if (a.time != b.time) return a.time < b.time;
                      return a.label < b.label;
                  });
    }
    return result;
}

/// Snapshot-collecting front end.
inline SimResult simulate(const ModelParams& params, const SimConfig& cfg,
                          const RandomStream& stream) {
    std::vector<PopulationSnapshot> snaps;
    SimResult result = simulate_observed(
        params, cfg, stream, [&](const Frame& f) {
            if (f.truncation_frame) return;
            PopulationSnapshot snap;
            snap.time = f.time;
            snap.homogeneous_only = f.homogeneous_only;
            snap.particles.reserve(f.particles.size());
            for (const Particle& p : f.particles)
                snap.particles.push_back({f.genealogy.label(p.node), p.position(),
                                          p.local_time()});
            std::sort(snap.particles.begin(), snap.particles.end(),
                      [](const SnapshotEntry& a, const SnapshotEntry& b) {
                          return a.label < b.label;
                      });
            snaps.push_back(std::move(snap));
        });
    result.snapshots = std::move(snaps);
    return result;
}

// ---- particle-set counters -------------------------------------------------

/// Number of particles strictly above x.
inline std::int64_t count_above(const PopulationSnapshot& snap, double x) {
    std::int64_t n = 0;
    for (const auto& e : snap.particles) n += (e.position > x) ? 1 : 0;
    return n;
}

inline std::int64_t count_above(const Frame& frame, double x) {
    std::int64_t n = 0;
    for (const Particle& p : frame.particles) n += (p.position() > x) ? 1 : 0;
    return n;
}

/// Position of the rightmost particle.
inline double rightmost(const PopulationSnapshot& snap) {
    if (snap.particles.empty())
        throw std::invalid_argument("rightmost: empty snapshot");
    double r = -std::numeric_limits<double>::infinity();
    for (const auto& e : snap.particles) r = std::max(r, e.position);
    return r;
}

inline double rightmost(const Frame& frame) {
    if (frame.particles.empty())
        throw std::invalid_argument("rightmost: empty population");
    double r = -std::numeric_limits<double>::infinity();
    for (const Particle& p : frame.particles) r = std::max(r, p.position());
    return r;
}

namespace detail {

struct AncestralPath {
    // segments of the particle's ancestral line covering [lo, hi], in time order
    std::vector<const PathSegment*> segments;
};

inline AncestralPath collect_ancestral(
    const Genealogy& gen, std::int64_t node, double lo, double hi,
    const std::map<std::int64_t, std::vector<const PathSegment*>>& by_node) {
    AncestralPath path;
    double need_hi = hi; // [lo, need_hi] still lacks coverage
    std::int64_t cur = node;
    while (need_hi > lo + 1e-9) {
        auto it = by_node.find(cur);
        if (it != by_node.end()) {
            const auto& segs = it->second; // sorted by t0
            for (auto rit = segs.rbegin(); rit != segs.rend(); ++rit) {
                const PathSegment* s = *rit;
                if (s->t1 > need_hi + 1e-9) continue;
                if (s->t1 < need_hi - 1e-9)
                    throw std::invalid_argument(
                        "path counters: recording has gaps over the window");
                path.segments.push_back(s);
                need_hi = s->t0;
                if (need_hi <= lo + 1e-9) break;
            }
        }
        if (need_hi <= lo + 1e-9) break;
        // cur was born at need_hi; continue along the parent's path
        const std::int64_t parent = gen.parent(cur);
        if (parent < 0)
            throw std::invalid_argument(
                "path counters: window not fully covered by the recording");
        cur = parent;
    }
    std::reverse(path.segments.begin(), path.segments.end());
    return path;
}

inline std::map<std::int64_t, std::vector<const PathSegment*>>
segments_by_node(const PathRecording& rec) {
    std::map<std::int64_t, std::vector<const PathSegment*>> by_node;
    for (const auto& s : rec.segments) by_node[s.node].push_back(&s);
    for (auto& [node, segs] : by_node)
        std::sort(segs.begin(), segs.end(),
                  [](const PathSegment* a, const PathSegment* b) {
                      return a->t0 < b->t0;
                  });
    return by_node;
}

// Per-step supremum handle for the signed path. Exact in law on no-touch
// steps; touch steps contribute max(endpoints, 0), a deliberate undercount.
inline double segment_sup(const PathSegment& s) {
    if (s.touched) return std::max({s.x0, s.x1, 0.0});
    return (s.x1 > 0.0) ? s.y_hi : -s.y_lo;
}

// Per-step infimum lower bound for the signed path.
inline double segment_inf(const PathSegment& s) {
    if (s.touched) return -s.y_hi;
    return (s.x1 > 0.0) ? s.y_lo : -s.y_hi;
}

inline void check_window(const PathRecording& rec, double lo, double hi,
                         const char* what) {
    if (!rec.enabled())
        throw std::invalid_argument(std::string(what) + ": no recording present");
    if (lo < rec.window_lo - 1e-9 || hi > rec.window_hi + 1e-9)
        throw std::invalid_argument(std::string(what) +
                                    ": window not covered by the recording");
    if (rec.frames.empty() || std::abs(rec.frames.back().time - hi) > 1e-9)
        throw std::invalid_argument(std::string(what) +
                                    ": recording must end at the window end");
}

} // namespace detail

/// Particles alive at n+1 whose recorded ancestral path supremum over
/// [n, n+1] reaches lambda * n. Step size must be <= 0.01: touch steps
/// contribute only max(endpoints, 0), and the finer grid keeps that
/// undercount negligible.
inline std::int64_t count_envelope(const PathRecording& rec, const Genealogy& gen,
                                   double lambda, double n) {
    detail::check_window(rec, n, n + 1.0, "count_envelope");
    if (rec.step_h > 0.01 + 1e-12)
        throw std::invalid_argument(
            "count_envelope: recording resolution too coarse (need step_h <= 0.01)");
    const auto by_node = detail::segments_by_node(rec);
    const double threshold = lambda * n;
    std::int64_t count = 0;
    for (const auto& [node, pos] : rec.frames.back().particles) {
        const auto path = detail::collect_ancestral(gen, node, n, n + 1.0, by_node);
        double sup = pos; // position at n+1 itself
        for (const auto* s : path.segments) sup = std::max(sup, detail::segment_sup(*s));
        if (sup >= threshold) ++count;
    }
    return count;
}

/// Particles alive at t+1 whose recorded ancestral path stays strictly above
/// lambda * s for all s in [t, t+1] (checked through per-step lower bounds,
/// so the count is conservative).
inline std::int64_t count_path_above(const PathRecording& rec, const Genealogy& gen,
                                     double lambda, double t) {
    detail::check_window(rec, t, t + 1.0, "count_path_above");
    const auto by_node = detail::segments_by_node(rec);
    std::int64_t count = 0;
    for (const auto& [node, pos] : rec.frames.back().particles) {
        const auto path = detail::collect_ancestral(gen, node, t, t + 1.0, by_node);
        bool above = pos > lambda * (t + 1.0);
        for (const auto* s : path.segments) {
            if (!above) break;
            const double line_max = lambda * (lambda >= 0.0 ? s->t1 : s->t0);
            if (!(detail::segment_inf(*s) > line_max)) above = false;
        }
        if (above) ++count;
    }
    return count;
}

} // namespace bbm
