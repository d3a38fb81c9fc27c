#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <limits>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "bbm/analytics.hpp"
#include "bbm/io.hpp"
#include "bbm/kernels.hpp"
#include "bbm/martingales.hpp"
#include "bbm/model.hpp"
#include "bbm/population.hpp"
#include "bbm/random.hpp"
#include "bbm/spine.hpp"

namespace bbm {

using json = nlohmann::json;

/// Thrown for malformed configuration; the CLI maps it to exit code 2.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

enum class ExperimentKind {
    Expect,
    Simulate,
    VerifyMean,
    Growth,
    GrowthAbove,
    Rightmost,
    RareSurvival,
    Martingale,
    Spine,
    KernelsTest,
};

inline const char* experiment_name(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::Expect: return "expect";
        case ExperimentKind::Simulate: return "simulate";
        case ExperimentKind::VerifyMean: return "verify-mean";
        case ExperimentKind::Growth: return "growth";
        case ExperimentKind::GrowthAbove: return "growth-above";
        case ExperimentKind::Rightmost: return "rightmost";
        case ExperimentKind::RareSurvival: return "rare-survival";
        case ExperimentKind::Martingale: return "martingale";
        case ExperimentKind::Spine: return "spine";
        case ExperimentKind::KernelsTest: return "kernels-test";
    }
    return "?";
}

struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::Expect;
    ModelParams model;
    SimConfig sim;
    std::size_t replicas = 1;
    std::uint64_t master_seed = 1;
    std::string output_dir; // empty: no files written
    int threads = 1;

    // experiment-specific knobs
    std::vector<std::pair<double, double>> targets; // verify-mean (t, x) pairs
    double lambda = 0.0;                            // growth-above / rare-survival
    std::vector<double> t_grid;                     // rare-survival horizons
    MartingaleKind martingale = MartingaleKind::folded();
    SpineMeasure measure = SpineMeasure::plain();
    double window_fraction = 0.5;    // trailing fit window for growth fits
    std::optional<std::array<double, 2>> band; // acceptance band where used
    std::vector<double> delta_table = {0.5, 1.0, M_SQRT2, 2.0};
    double z_max = 4.0;
    std::size_t gof_samples = 100000;

    explicit ExperimentConfig(ModelParams m) : model(std::move(m)) {}
};

struct Metric {
    std::string name;
    std::optional<double> estimate;
    std::optional<double> std_error;
    std::optional<std::array<double, 2>> ci95;
    std::optional<double> reference;
    std::optional<double> z;
    std::optional<bool> pass;
    std::string provenance;
};

struct ExperimentReport {
    std::string experiment;
    std::uint64_t master_seed = 0;
    std::size_t replicas = 0;
    int threads = 1;
    json config_echo;
    json derived;
    std::vector<Metric> metrics;
    json extra; // experiment-specific structured output (stable keys)
    std::size_t replicas_total = 0;
    std::size_t replicas_truncated = 0;
    bool underpowered = false;
    double runtime_seconds = 0.0;

    bool all_passed() const {
        for (const auto& m : metrics)
            if (m.pass.has_value() && !*m.pass) return false;
        return !underpowered;
    }

    json to_json() const {
        json metrics_json = json::array();
        for (const auto& m : metrics) {
            json j;
            j["name"] = m.name;
            j["estimate"] = m.estimate ? json(*m.estimate) : json(nullptr);
            j["std_error"] = m.std_error ? json(*m.std_error) : json(nullptr);
            j["ci95"] = m.ci95 ? json({(*m.ci95)[0], (*m.ci95)[1]}) : json(nullptr);
            j["reference"] = m.reference ? json(*m.reference) : json(nullptr);
            j["z"] = m.z ? json(*m.z) : json(nullptr);
            j["pass"] = m.pass ? json(*m.pass) : json(nullptr);
            j["provenance"] = m.provenance;
            metrics_json.push_back(std::move(j));
        }
        return json{{"experiment", experiment},
                    {"master_seed", master_seed},
                    {"replicas", replicas},
                    {"threads", threads},
                    {"config", config_echo},
                    {"derived", derived},
                    {"metrics", metrics_json},
                    {"extra", extra},
                    {"truncation",
                     {{"total", replicas_total},
                      {"truncated", replicas_truncated},
                      {"underpowered", underpowered}}},
                    {"runtime_seconds", runtime_seconds}};
    }
};

// ---- configuration parsing -------------------------------------------------

inline OffspringDistribution parse_offspring(const json& j, const char* key) {
    if (!j.is_array() || j.empty())
        throw ConfigError(std::string(key) + ": expected a nonempty list of [n, weight]");
    std::vector<OffspringDistribution::Atom> atoms;
    for (const auto& a : j) {
        if (!a.is_array() || a.size() != 2)
            throw ConfigError(std::string(key) + ": entries must be [n, weight]");
        atoms.emplace_back(a[0].get<int>(), a[1].get<double>());
    }
    try {
        return OffspringDistribution(std::move(atoms));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string(key) + ": " + e.what());
    }
}

inline ModelParams parse_model_params(const json& j) {
    for (const char* key : {"beta", "beta0", "p_dist", "q_dist"})
        if (!j.contains(key))
            throw ConfigError(std::string("model: missing key '") + key + "'");
    try {
        return ModelParams(j.at("beta").get<double>(), j.at("beta0").get<double>(),
                           parse_offspring(j.at("p_dist"), "p_dist"),
                           parse_offspring(j.at("q_dist"), "q_dist"));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("model: ") + e.what());
    }
}

inline ExperimentConfig parse_experiment_config(const json& j, ExperimentKind kind) {
    if (!j.contains("model")) throw ConfigError("config: missing 'model'");
    ExperimentConfig cfg(parse_model_params(j.at("model")));
    cfg.kind = kind;

    if (j.contains("sim")) {
        const json& s = j.at("sim");
        if (s.contains("step_h")) cfg.sim.step_h = s.at("step_h").get<double>();
        if (s.contains("horizon")) cfg.sim.horizon = s.at("horizon").get<double>();
        if (s.contains("record_times"))
            cfg.sim.record_times = s.at("record_times").get<std::vector<double>>();
        if (s.contains("population_cap"))
            cfg.sim.population_cap = s.at("population_cap").get<std::size_t>();
        if (s.contains("homogeneous_only"))
            cfg.sim.homogeneous_only = s.at("homogeneous_only").get<bool>();
        if (s.contains("collect_events"))
            cfg.sim.collect_events = s.at("collect_events").get<bool>();
    }
    if (j.contains("replicas")) cfg.replicas = j.at("replicas").get<std::size_t>();
    if (j.contains("master_seed"))
        cfg.master_seed = j.at("master_seed").get<std::uint64_t>();
    if (j.contains("output_dir")) cfg.output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("threads")) cfg.threads = j.at("threads").get<int>();

    const json params = j.value("params", json::object());
    if (params.contains("targets")) {
        cfg.targets.clear();
        for (const auto& p : params.at("targets")) {
            if (!p.is_array() || p.size() != 2)
                throw ConfigError("params.targets: entries must be [t, x]");
            cfg.targets.emplace_back(p[0].get<double>(), p[1].get<double>());
        }
    }
    if (params.contains("lambda")) cfg.lambda = params.at("lambda").get<double>();
    if (params.contains("t_grid"))
        cfg.t_grid = params.at("t_grid").get<std::vector<double>>();
    if (params.contains("window_fraction"))
        cfg.window_fraction = params.at("window_fraction").get<double>();
    if (params.contains("band")) {
        const auto& b = params.at("band");
        if (!b.is_array() || b.size() != 2)
            throw ConfigError("params.band: expected [lo, hi]");
        cfg.band = std::array<double, 2>{b[0].get<double>(), b[1].get<double>()};
    }
    if (params.contains("z_max")) cfg.z_max = params.at("z_max").get<double>();
    if (params.contains("gof_samples"))
        cfg.gof_samples = params.at("gof_samples").get<std::size_t>();
    if (params.contains("delta_table"))
        cfg.delta_table = params.at("delta_table").get<std::vector<double>>();
    if (params.contains("martingale")) {
        const auto& m = params.at("martingale");
        if (m.is_string() && m.get<std::string>() == "folded")
            cfg.martingale = MartingaleKind::folded();
        else if (m.is_object() && m.contains("lambda"))
            cfg.martingale = MartingaleKind::tilted(m.at("lambda").get<double>());
        else
            throw ConfigError("params.martingale: expected \"folded\" or {\"lambda\": x}");
    }
    if (params.contains("measure")) {
        const auto& m = params.at("measure");
        const std::string name = m.is_string() ? m.get<std::string>()
                                               : m.value("kind", std::string());
        const double lam = m.is_object() ? m.value("lambda", 0.0) : 0.0;
        if (name == "plain") cfg.measure = SpineMeasure::plain();
        else if (name == "origin-drift") cfg.measure = SpineMeasure::origin_drift();
        else if (name == "linear-drift") cfg.measure = SpineMeasure::linear_drift(lam);
        else if (name == "radial-drift") cfg.measure = SpineMeasure::radial_drift(lam);
        else throw ConfigError("params.measure: unknown measure '" + name + "'");
    }
    return cfg;
}

inline json config_to_json(const ExperimentConfig& cfg) {
    json p_dist = json::array(), q_dist = json::array();
    for (const auto& [n, w] : cfg.model.p_dist.atoms()) p_dist.push_back({n, w});
    for (const auto& [n, w] : cfg.model.q_dist.atoms()) q_dist.push_back({n, w});
    json targets = json::array();
    for (const auto& [t, x] : cfg.targets) targets.push_back({t, x});
    return json{
        {"experiment", experiment_name(cfg.kind)},
        {"model",
         {{"beta", cfg.model.beta},
          {"beta0", cfg.model.beta0},
          {"p_dist", p_dist},
          {"q_dist", q_dist}}},
        {"sim",
         {{"step_h", cfg.sim.step_h},
          {"horizon", cfg.sim.horizon},
          {"record_times", cfg.sim.record_times},
          {"population_cap", cfg.sim.population_cap},
          {"homogeneous_only", cfg.sim.homogeneous_only},
          {"collect_events", cfg.sim.collect_events}}},
        {"replicas", cfg.replicas},
        {"master_seed", cfg.master_seed},
        {"params",
         {{"targets", targets},
          {"lambda", cfg.lambda},
          {"t_grid", cfg.t_grid},
          {"window_fraction", cfg.window_fraction},
          {"band", cfg.band ? json({(*cfg.band)[0], (*cfg.band)[1]}) : json(nullptr)},
          {"z_max", cfg.z_max},
          {"delta_table", cfg.delta_table}}}};
}

// ---- parallel replica fan-out ----------------------------------------------

/// Run body(i) for i in [0, n) on up to `threads` workers. The body must
/// write only to its own slot; aggregation order is up to the caller, so
/// results are independent of the worker count.
template <typename F>
void parallel_replicas(std::size_t n, int threads, F&& body) {
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    const std::size_t workers =
        std::min<std::size_t>(threads <= 0 ? hw : unsigned(threads), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                    return;
                }
            }
        });
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

// ---- shared runner pieces ---------------------------------------------------

namespace detail {

inline json derived_to_json(const DerivedRates& d, const ModelParams& m) {
    return json{{"beta_hat", d.beta_hat},
                {"beta0_hat", d.beta0_hat},
                {"m", m.p_dist.mean()},
                {"m0", m.q_dist.mean()},
                {"growth_exponent", d.growth_exponent},
                {"lambda_crit", d.lambda_crit},
                {"regime", d.regime == Regime::CatalyticDominant
                               ? "catalytic-dominant"
                               : "homogeneous-dominant"},
                {"degenerate", d.degenerate}};
}

inline Metric z_metric(std::string name, double estimate, double se,
                       double reference, double z_max, std::string provenance) {
    Metric m;
    m.name = std::move(name);
    m.estimate = estimate;
    m.std_error = se;
    m.ci95 = std::array<double, 2>{estimate - 1.959963984540054 * se,
                                   estimate + 1.959963984540054 * se};
    m.reference = reference;
    const double z = se > 0.0 ? (estimate - reference) / se
                              : (estimate == reference ? 0.0
                                                       : std::numeric_limits<double>::infinity());
    m.z = z;
    m.pass = std::abs(z) <= z_max;
    m.provenance = std::move(provenance);
    return m;
}

inline Metric band_metric(std::string name, double estimate,
                          std::array<double, 2> band, double reference,
                          std::string provenance) {
    Metric m;
    m.name = std::move(name);
    m.estimate = estimate;
    m.reference = reference;
    m.pass = estimate >= band[0] && estimate <= band[1];
    m.provenance = std::move(provenance) + "; band [" + format_double(band[0]) +
                   ", " + format_double(band[1]) + "]";
    return m;
}

inline Metric info_metric(std::string name, double estimate, std::string provenance,
                          std::optional<double> reference = std::nullopt) {
    Metric m;
    m.name = std::move(name);
    m.estimate = estimate;
    m.reference = reference;
    m.provenance = std::move(provenance);
    return m;
}

inline double median(std::vector<double> xs) {
    if (xs.empty()) throw std::invalid_argument("median: empty");
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

/// Reference rates for the counting formulas: for homogeneous-only runs the
/// catalytic channel contributes nothing, which is the m0 = 1 embedding.
inline DerivedRates reference_rates(const ExperimentConfig& cfg) {
    if (cfg.sim.homogeneous_only)
        return derive_rates(homogeneous_embedding(cfg.model));
    return derive_rates(cfg.model);
}

inline std::filesystem::path report_dir(const ExperimentConfig& cfg) {
    return std::filesystem::path(cfg.output_dir) / experiment_name(cfg.kind) /
           std::to_string(cfg.master_seed);
}

} // namespace detail

// ---- experiment implementations ---------------------------------------------

namespace detail {

inline void run_expect(const ExperimentConfig& cfg, ExperimentReport& rep) {
    const DerivedRates d = reference_rates(cfg);
    const auto xp = xlogx_holds(cfg.model.p_dist);
    const auto xq = xlogx_holds(cfg.model.q_dist);
    auto constant = [](std::string name, double v, std::string note) {
        Metric m = info_metric(std::move(name), v, std::move(note), v);
        m.pass = true;
        return m;
    };
    rep.metrics.push_back(constant("beta_hat", d.beta_hat, "effective homogeneous rate"));
    rep.metrics.push_back(constant("beta0_hat", d.beta0_hat, "effective catalytic rate"));
    rep.metrics.push_back(
        constant("growth_exponent", d.growth_exponent, "population growth exponent"));
    rep.metrics.push_back(constant("lambda_crit", d.lambda_crit, "rightmost speed"));
    rep.metrics.push_back(constant("degenerate", d.degenerate ? 1.0 : 0.0,
                                   "both effective rates zero"));
    rep.metrics.push_back(constant("xlogx_sum_p", xp.sum, "offspring moment sum"));
    rep.metrics.push_back(constant("xlogx_sum_q", xq.sum, "offspring moment sum"));
    json table = json::array();
    for (double lam : cfg.delta_table) {
        const double dv = delta_lambda(d, lam);
        rep.metrics.push_back(constant("delta@" + format_double(lam), dv,
                                       "count growth exponent at slope lambda"));
        table.push_back({{"lambda", lam},
                         {"delta", dv},
                         {"optimal_split", lam > 0 ? optimal_split(d, lam) : 0.0}});
    }
    rep.extra["delta_table"] = table;
}

inline void run_simulate(const ExperimentConfig& cfg, ExperimentReport& rep) {
    if (cfg.sim.record_times.empty())
        throw ConfigError("simulate: sim.record_times must not be empty");
    const DerivedRates d = reference_rates(cfg);
    const RandomStream master(cfg.master_seed);
    std::size_t truncated = 0;
    json runs = json::array();
    for (std::size_t r = 0; r < cfg.replicas; ++r) {
        SimConfig sc = cfg.sim;
        sc.collect_events = true;
        SimResult res = simulate(cfg.model, sc, master.child(r));
        truncated += res.truncated ? 1 : 0;
        if (!cfg.output_dir.empty()) {
            const auto dir = report_dir(cfg);
            write_snapshot_csv(dir / ("snapshots_" + std::to_string(r) + ".csv"),
                               res.snapshots);
            write_event_csv(dir / ("events_" + std::to_string(r) + ".csv"),
                            res.events);
        }
        json sizes = json::array();
        for (const auto& snap : res.snapshots) {
            sizes.push_back({{"t", snap.time},
                             {"population", snap.particles.size()},
                             {"rightmost", rightmost(snap)}});
            if (r == 0)
                rep.metrics.push_back(info_metric(
                    "population@t=" + format_double(snap.time),
                    double(snap.particles.size()), "single-run size; reference is the mean",
                    expected_population(d, std::max(snap.time, 1e-12))));
        }
        runs.push_back({{"replica", r}, {"truncated", res.truncated}, {"sizes", sizes}});
    }
    rep.extra["runs"] = runs;
    rep.replicas_total = cfg.replicas;
    rep.replicas_truncated = truncated;
}

inline void run_verify_mean(const ExperimentConfig& cfg, ExperimentReport& rep) {
    std::vector<std::pair<double, double>> targets = cfg.targets;
    if (targets.empty())
        targets = {{0.5, 0.0}, {1.0, 0.0}, {1.0, 0.5}, {2.0, 0.0}};
    if (cfg.replicas < 2) throw ConfigError("verify-mean: need replicas >= 2");

    SimConfig sc = cfg.sim;
    sc.record_times.clear();
    double horizon = 0.0;
    for (const auto& [t, x] : targets) {
        if (!(t > 0.0)) throw ConfigError("verify-mean: target t must be > 0");
        sc.record_times.push_back(t);
        horizon = std::max(horizon, t);
    }
    sc.horizon = horizon;

    const RandomStream master(cfg.master_seed);
    const std::size_t n = cfg.replicas;
    std::vector<std::vector<double>> counts(targets.size());
    for (auto& c : counts) c.assign(n, std::numeric_limits<double>::quiet_NaN());
    std::vector<std::uint8_t> truncated(n, 0);

    parallel_replicas(n, cfg.threads, [&](std::size_t r) {
        SimResult res = simulate_observed(
            cfg.model, sc, master.child(r), [&](const Frame& f) {
                if (f.truncation_frame) return;
                for (std::size_t k = 0; k < targets.size(); ++k)
                    if (std::abs(targets[k].first - f.time) < 1e-9)
                        counts[k][r] = double(count_above(f, targets[k].second));
            });
        truncated[r] = res.truncated ? 1 : 0;
    });

    const DerivedRates d = reference_rates(cfg);
    std::size_t n_trunc = 0;
    for (auto f : truncated) n_trunc += f;
    for (std::size_t k = 0; k < targets.size(); ++k) {
        std::vector<double> vals;
        vals.reserve(n);
        for (std::size_t r = 0; r < n; ++r)
            if (!truncated[r] && !std::isnan(counts[k][r])) vals.push_back(counts[k][r]);
        const auto [t, x] = targets[k];
        if (vals.size() < 2) continue;
        const auto ms = mean_and_se(vals);
        rep.metrics.push_back(z_metric(
            "mean_count_above@t=" + format_double(t) + ",x=" + format_double(x),
            ms.mean, ms.se, expected_count_above(d, t, x), cfg.z_max,
            "closed-form expected count"));
        if (x == 0.0)
            rep.metrics.push_back(z_metric(
                "mean_population@t=" + format_double(t), 2.0 * ms.mean, 2.0 * ms.se,
                expected_population(d, t), cfg.z_max,
                "mirror symmetry doubles the above-origin count"));
    }
    rep.replicas_total = n;
    rep.replicas_truncated = n_trunc;
    rep.underpowered = n_trunc * 2 > n;

    if (!cfg.output_dir.empty()) {
        auto out = open_output(report_dir(cfg) / "counts.csv");
        out << "replica,t,x,count\n";
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t k = 0; k < targets.size(); ++k)
                if (!std::isnan(counts[k][r]))
                    out << r << ',' << format_double(targets[k].first) << ','
                        << format_double(targets[k].second) << ','
                        << format_double(counts[k][r]) << '\n';
    }
}

// shared by growth / growth-above / rightmost: per-replica series of a
// scalar statistic at the configured record times
struct SeriesRun {
    std::vector<std::vector<std::pair<double, double>>> series; // per replica
    std::vector<std::uint8_t> truncated;
    std::vector<double> final_time;  // horizon or truncation time
    std::vector<double> final_value; // statistic at final_time
};

template <typename Stat>
SeriesRun run_series(const ExperimentConfig& cfg, Stat&& stat) {
    SimConfig sc = cfg.sim;
    if (sc.record_times.empty()) {
        for (double t = 0.5; t <= sc.horizon + 1e-9; t += 0.5)
            sc.record_times.push_back(t);
    }
    const RandomStream master(cfg.master_seed);
    const std::size_t n = cfg.replicas;
    SeriesRun out;
    out.series.resize(n);
    out.truncated.assign(n, 0);
    out.final_time.assign(n, 0.0);
    out.final_value.assign(n, 0.0);

    parallel_replicas(n, cfg.threads, [&](std::size_t r) {
        auto& series = out.series[r];
        SimResult res = simulate_observed(
            cfg.model, sc, master.child(r), [&](const Frame& f) {
                const double v = stat(f);
                if (!f.truncation_frame) series.emplace_back(f.time, v);
                out.final_time[r] = f.time;
                out.final_value[r] = v;
            });
        out.truncated[r] = res.truncated ? 1 : 0;
    });
    return out;
}

inline void write_series_csv(const ExperimentConfig& cfg, const SeriesRun& run,
                             const char* value_name) {
    if (cfg.output_dir.empty()) return;
    auto out = open_output(report_dir(cfg) / "series.csv");
    out << "replica,t," << value_name << "\n";
    for (std::size_t r = 0; r < run.series.size(); ++r)
        for (const auto& [t, v] : run.series[r])
            out << r << ',' << format_double(t) << ',' << format_double(v) << '\n';
}

inline void run_growth(const ExperimentConfig& cfg, ExperimentReport& rep,
                       bool above_moving_level) {
    if (cfg.replicas < 1) throw ConfigError("growth: need replicas >= 1");
    const DerivedRates d = reference_rates(cfg);
    const double lambda = cfg.lambda;
    if (above_moving_level && !(lambda > 0.0))
        throw ConfigError("growth-above: params.lambda must be > 0");

    SeriesRun run = run_series(cfg, [&](const Frame& f) {
        return above_moving_level ? double(count_above(f, lambda * f.time))
                                  : double(f.particles.size());
    });

    std::vector<double> slopes;
    json fits = json::array();
    for (std::size_t r = 0; r < run.series.size(); ++r) {
        std::vector<std::pair<double, double>> positive;
        for (const auto& [t, v] : run.series[r])
            if (v > 0.0) positive.emplace_back(t, v);
        if (positive.size() < 4) continue;
        try {
            const GrowthFit fit = growth_rate_fit(positive, cfg.window_fraction);
            slopes.push_back(fit.slope);
            fits.push_back({{"replica", r},
                            {"slope", fit.slope},
                            {"t_lo", fit.t_lo},
                            {"t_hi", fit.t_hi},
                            {"r_squared", fit.r_squared},
                            {"points", fit.points},
                            {"truncated", bool(run.truncated[r])}});
        } catch (const std::invalid_argument&) {
            // too few usable points in the window: censored
        }
    }
    rep.extra["fits"] = fits;

    const double reference =
        above_moving_level ? delta_lambda(d, lambda) : d.growth_exponent;
    const std::array<double, 2> band =
        cfg.band.value_or(std::array<double, 2>{reference - 0.15, reference + 0.15});
    const char* what = above_moving_level ? "count growth slope" : "population growth slope";
    if (slopes.empty()) {
        Metric m;
        m.name = "growth_slope";
        m.reference = reference;
        m.pass = false;
        m.provenance = std::string(what) + "; no replica produced a usable fit";
        rep.metrics.push_back(std::move(m));
    } else if (slopes.size() == 1) {
        rep.metrics.push_back(band_metric("growth_slope", slopes.front(), band,
                                          reference, what));
    } else {
        const auto ms = mean_and_se(slopes);
        Metric m = band_metric("growth_slope", ms.mean, band, reference, what);
        m.std_error = ms.se;
        rep.metrics.push_back(std::move(m));
        rep.metrics.push_back(
            info_metric("growth_slope_median", median(slopes), what, reference));
    }

    std::size_t n_trunc = 0;
    for (auto f : run.truncated) n_trunc += f;
    rep.replicas_total = cfg.replicas;
    rep.replicas_truncated = n_trunc;
    rep.underpowered = n_trunc * 2 > cfg.replicas;
    write_series_csv(cfg, run, above_moving_level ? "count_above" : "population");
}

inline void run_rightmost(const ExperimentConfig& cfg, ExperimentReport& rep) {
    if (cfg.sim.horizon < 6.0)
        throw ConfigError("rightmost: sim.horizon must be >= 6");
    const DerivedRates d = reference_rates(cfg);

    SeriesRun run = run_series(cfg, [&](const Frame& f) { return rightmost(f); });

    std::vector<double> speeds;
    std::vector<double> fit_slopes;
    for (std::size_t r = 0; r < run.series.size(); ++r) {
        if (run.final_time[r] > 0.0)
            speeds.push_back(run.final_value[r] / run.final_time[r]);
        // linear fit of R_t over the trailing window
        const auto& series = run.series[r];
        if (series.size() >= 4) {
            const double t_lo =
                series.back().first -
                cfg.window_fraction * (series.back().first - series.front().first);
            double st = 0, sy = 0, sxx = 0, sxy = 0;
            std::size_t m = 0;
            for (const auto& [t, v] : series)
                if (t >= t_lo - 1e-9) { st += t; sy += v; ++m; }
            if (m >= 4) {
                const double mt = st / double(m), my = sy / double(m);
                for (const auto& [t, v] : series)
                    if (t >= t_lo - 1e-9) {
                        sxx += (t - mt) * (t - mt);
                        sxy += (t - mt) * (v - my);
                    }
                if (sxx > 0) fit_slopes.push_back(sxy / sxx);
            }
        }
    }
    if (speeds.empty()) throw std::runtime_error("rightmost: no replicas produced R_t");

    const std::array<double, 2> band = cfg.band.value_or(
        std::array<double, 2>{0.85 * d.lambda_crit, 1.15 * d.lambda_crit});
    rep.metrics.push_back(band_metric("median_speed", median(speeds), band,
                                      d.lambda_crit,
                                      "rightmost position over elapsed time"));
    if (fit_slopes.size() >= 2) {
        const auto ms = mean_and_se(fit_slopes);
        rep.metrics.push_back(info_metric("mean_fit_slope", ms.mean,
                                          "trailing-window linear fit of R_t",
                                          d.lambda_crit));
    }
    std::size_t n_trunc = 0;
    for (auto f : run.truncated) n_trunc += f;
    rep.replicas_total = cfg.replicas;
    rep.replicas_truncated = n_trunc;
    write_series_csv(cfg, run, "rightmost");
}

inline void run_rare_survival(const ExperimentConfig& cfg, ExperimentReport& rep) {
    const DerivedRates d = reference_rates(cfg);
    const double lambda = cfg.lambda;
    if (!(lambda > d.lambda_crit))
        throw ConfigError("rare-survival: params.lambda must exceed lambda_crit");
    std::vector<double> t_grid = cfg.t_grid;
    if (t_grid.empty()) t_grid = {3.0, 4.0, 5.0};
    if (t_grid.size() < 3)
        throw ConfigError("rare-survival: params.t_grid needs >= 3 points");
    if (cfg.replicas < 100)
        throw ConfigError("rare-survival: need replicas >= 100 per horizon");

    const RandomStream master(cfg.master_seed);
    json per_t = json::array();
    std::vector<std::pair<double, double>> fit_points; // (t, log p_hat)
    bool any_success = false;

    for (std::size_t k = 0; k < t_grid.size(); ++k) {
        const double t = t_grid[k];
        SimConfig sc = cfg.sim;
        sc.horizon = t;
        sc.record_times = {t};
        const double level = lambda * t;
        const RandomStream batch = master.child(0x7261 + k);
        std::vector<std::uint8_t> success(cfg.replicas, 0), truncated(cfg.replicas, 0);

        parallel_replicas(cfg.replicas, cfg.threads, [&](std::size_t r) {
            bool hit = false;
            SimResult res = simulate_observed(
                cfg.model, sc, batch.child(r), [&](const Frame& f) {
                    // at truncation every later count is unknown; count what exists
                    if (count_above(f, level) > 0) hit = true;
                });
            success[r] = hit ? 1 : 0;
            truncated[r] = res.truncated ? 1 : 0;
        });

        long long n_success = 0;
        std::size_t n_trunc = 0;
        for (std::size_t r = 0; r < cfg.replicas; ++r) {
            n_success += success[r];
            n_trunc += truncated[r];
        }
        rep.replicas_total += cfg.replicas;
        rep.replicas_truncated += n_trunc;
        const auto est = survival_estimate(n_success, (long long)cfg.replicas);
        any_success |= n_success > 0;
        per_t.push_back({{"t", t},
                         {"successes", n_success},
                         {"trials", cfg.replicas},
                         {"p_hat", est.p_hat},
                         {"ci_lo", est.ci_lo},
                         {"ci_hi", est.ci_hi},
                         {"truncated", n_trunc}});
        Metric m = info_metric("survival@t=" + format_double(t), est.p_hat,
                               "fraction of runs with a particle above lambda t");
        m.ci95 = std::array<double, 2>{est.ci_lo, est.ci_hi};
        rep.metrics.push_back(std::move(m));
        if (n_success >= 10) fit_points.emplace_back(t, std::log(est.p_hat));
    }
    rep.extra["survival"] = per_t;

    const double reference = delta_lambda(d, lambda);
    const std::array<double, 2> band =
        cfg.band.value_or(std::array<double, 2>{reference - 0.3, reference + 0.3});
    if (fit_points.size() < 2) {
        Metric m;
        m.name = "decay_slope";
        m.reference = reference;
        m.pass = any_success ? std::optional<bool>(false) : std::nullopt;
        m.provenance = any_success
                           ? "too few horizons with >= 10 successes for a fit"
                           : "no estimate: zero successes at every horizon";
        rep.metrics.push_back(std::move(m));
        return;
    }
    // least squares on log p_hat vs t
    double st = 0, sy = 0;
    for (auto& [t, y] : fit_points) { st += t; sy += y; }
    const double mt = st / double(fit_points.size());
    const double my = sy / double(fit_points.size());
    double sxx = 0, sxy = 0;
    for (auto& [t, y] : fit_points) {
        sxx += (t - mt) * (t - mt);
        sxy += (t - mt) * (y - my);
    }
    rep.metrics.push_back(band_metric("decay_slope", sxy / sxx, band, reference,
                                      "slope of log survival rate over t"));

    if (!cfg.output_dir.empty()) {
        auto out = open_output(report_dir(cfg) / "survival.csv");
        out << "t,successes,trials,p_hat,ci_lo,ci_hi\n";
        for (const auto& row : per_t)
            out << format_double(row.at("t").get<double>()) << ','
                << row.at("successes").get<long long>() << ','
                << row.at("trials").get<std::size_t>() << ','
                << format_double(row.at("p_hat").get<double>()) << ','
                << format_double(row.at("ci_lo").get<double>()) << ','
                << format_double(row.at("ci_hi").get<double>()) << '\n';
    }
}

inline void run_martingale(const ExperimentConfig& cfg, ExperimentReport& rep) {
    if (cfg.martingale.which == MartingaleKind::Which::Tilted &&
        !cfg.sim.homogeneous_only)
        throw ConfigError(
            "martingale: tilted kind requires sim.homogeneous_only = true");
    if (cfg.replicas < 2) throw ConfigError("martingale: need replicas >= 2");
    SimConfig sc = cfg.sim;
    if (sc.record_times.empty()) sc.record_times = {0.5, 1.0, 2.0};
    std::sort(sc.record_times.begin(), sc.record_times.end());
    sc.horizon = sc.record_times.back();

    const DerivedRates d = reference_rates(cfg);
    const RandomStream master(cfg.master_seed);
    const std::size_t n = cfg.replicas;
    std::vector<std::vector<std::pair<double, double>>> trajectories(n);
    std::vector<std::uint8_t> truncated(n, 0);

    parallel_replicas(n, cfg.threads, [&](std::size_t r) {
        SimResult res = simulate_observed(
            cfg.model, sc, master.child(r), [&](const Frame& f) {
                if (f.truncation_frame) return;
                trajectories[r].emplace_back(f.time, evaluate(cfg.martingale, f, d));
            });
        truncated[r] = res.truncated ? 1 : 0;
    });

    std::size_t n_trunc = 0;
    for (auto f : truncated) n_trunc += f;
    std::vector<std::vector<std::pair<double, double>>> complete;
    for (std::size_t r = 0; r < n; ++r)
        if (!truncated[r]) complete.push_back(trajectories[r]);

    json per_t = json::array();
    const std::array<double, 3> eps_sweep{1e-4, 1e-6, 1e-8};
    if (complete.size() >= 100) {
        const LimitDiagnostic diag = limit_diagnostic(complete, eps_sweep);
        for (std::size_t k = 0; k < diag.times.size(); ++k) {
            rep.metrics.push_back(
                z_metric("martingale_mean@t=" + format_double(diag.times[k]),
                         diag.mean[k], diag.se[k], 1.0, cfg.z_max,
                         "additive martingales have unit mean"));
            per_t.push_back({{"t", diag.times[k]},
                             {"mean", diag.mean[k]},
                             {"se", diag.se[k]},
                             {"frac_below_eps",
                              {diag.frac_below_eps[k][0], diag.frac_below_eps[k][1],
                               diag.frac_below_eps[k][2]}}});
        }
    } else {
        for (std::size_t k = 0; !complete.empty() && k < complete.front().size(); ++k) {
            std::vector<double> vals;
            for (const auto& traj : complete)
                if (k < traj.size()) vals.push_back(traj[k].second);
            if (vals.size() < 2) continue;
            const auto ms = mean_and_se(vals);
            rep.metrics.push_back(
                z_metric("martingale_mean@t=" + format_double(complete.front()[k].first),
                         ms.mean, ms.se, 1.0, cfg.z_max,
                         "additive martingales have unit mean"));
        }
    }
    rep.extra["per_t"] = per_t;
    rep.extra["eps_sweep"] = {eps_sweep[0], eps_sweep[1], eps_sweep[2]};
    rep.replicas_total = n;
    rep.replicas_truncated = n_trunc;
    rep.underpowered = n_trunc * 2 > n;
}

inline void run_spine(const ExperimentConfig& cfg, ExperimentReport& rep) {
    if (cfg.replicas < 2) throw ConfigError("spine: need replicas >= 2");
    const DerivedRates d = derive_rates(cfg.model);
    const double T = cfg.sim.horizon;
    const RandomStream master(cfg.master_seed);
    const std::size_t n = cfg.replicas;

    std::vector<double> end_xi(n), end_lt(n), hom_rate(n);
    std::vector<double> cat_per_lt;
    cat_per_lt.reserve(n);
    std::vector<SpinePath> kept;

    for (std::size_t r = 0; r < n; ++r) {
        SpinePath path = simulate_spine(cfg.measure, cfg.model, T, master.child(r),
                                        cfg.sim.step_h);
        end_xi[r] = path.xi.back();
        end_lt[r] = path.local_time.back();
        std::size_t hom = 0, cat = 0;
        for (const auto& f : path.fissions) (f.at_origin ? cat : hom) += 1;
        hom_rate[r] = double(hom) / T;
        if (end_lt[r] > 0.0) cat_per_lt.push_back(double(cat) / end_lt[r]);
        if (!cfg.output_dir.empty()) {
            const auto dir = report_dir(cfg);
            write_spine_csv(dir / ("spine_" + std::to_string(r) + ".csv"), path);
            write_fission_csv(dir / ("fissions_" + std::to_string(r) + ".csv"), path);
        }
    }

    const bool biased = cfg.measure.biased();
    const double ref_hom = (biased ? cfg.model.p_dist.mean() : 1.0) * cfg.model.beta;
    const double ref_cat = (biased ? cfg.model.q_dist.mean() : 1.0) * cfg.model.beta0;
    {
        const auto ms = mean_and_se(hom_rate);
        rep.metrics.push_back(z_metric("hom_fissions_per_time", ms.mean, ms.se,
                                       ref_hom, cfg.z_max,
                                       "off-origin fission clock rate"));
    }
    const bool count_cat = cfg.measure.kind != SpineMeasure::Kind::LinearDrift;
    if (count_cat && cat_per_lt.size() >= 2) {
        const auto ms = mean_and_se(cat_per_lt);
        rep.metrics.push_back(z_metric("cat_fissions_per_local_time", ms.mean, ms.se,
                                       ref_cat, cfg.z_max,
                                       "at-origin fission clock rate"));
    }
    switch (cfg.measure.kind) {
        case SpineMeasure::Kind::Plain: {
            const auto ms = mean_and_se(end_xi);
            rep.metrics.push_back(z_metric("mean_xi_end", ms.mean, ms.se, 0.0,
                                           cfg.z_max, "driftless spine"));
            break;
        }
        case SpineMeasure::Kind::OriginDrift: {
            std::vector<double> lt_rate(n);
            for (std::size_t r = 0; r < n; ++r) lt_rate[r] = end_lt[r] / T;
            const auto ms = mean_and_se(lt_rate);
            rep.metrics.push_back(z_metric("local_time_per_time", ms.mean, ms.se,
                                           d.beta0_hat, cfg.z_max,
                                           "local time accrues at the drift rate"));
            break;
        }
        case SpineMeasure::Kind::LinearDrift: {
            std::vector<double> v(n);
            for (std::size_t r = 0; r < n; ++r) v[r] = end_xi[r] / T;
            const auto ms = mean_and_se(v);
            rep.metrics.push_back(z_metric("xi_end_per_time", ms.mean, ms.se,
                                           cfg.measure.lambda, cfg.z_max,
                                           "constant drift"));
            break;
        }
        case SpineMeasure::Kind::RadialDrift: {
            std::vector<double> v(n);
            for (std::size_t r = 0; r < n; ++r) v[r] = std::abs(end_xi[r]) / T;
            const auto ms = mean_and_se(v);
            rep.metrics.push_back(z_metric("abs_xi_end_per_time", ms.mean, ms.se,
                                           std::abs(cfg.measure.lambda), cfg.z_max,
                                           "radial drift"));
            break;
        }
    }
    rep.replicas_total = n;
}

inline void run_kernels_test(const ExperimentConfig& cfg, ExperimentReport& rep) {
    const RandomStream master(cfg.master_seed);
    const std::size_t n = cfg.gof_samples;

    // (position, local time) sampler against its density, via the exact
    // probability-integral transform to the unit square
    {
        RandomStream s = master.child(1);
        const JointLaw law(1.0);
        constexpr int B = 20;
        std::vector<long long> cells(B * B, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto [y, l] = sample_joint(s, law);
            const double S = std::abs(y) + l;
            const double u1 = radial_cdf(law, S);
            const double u2 = S > 0.0 ? 0.5 * (y / S + 1.0) : 0.5;
            int b1 = std::min(B - 1, int(u1 * B));
            int b2 = std::min(B - 1, int(u2 * B));
            cells[b1 * B + b2] += 1;
        }
        const double expected = double(n) / (B * B);
        double stat = 0.0;
        for (long long c : cells) {
            const double diff = double(c) - expected;
            stat += diff * diff / expected;
        }
        const double p = chi_square_pvalue(stat, B * B - 1);
        Metric m = info_metric("joint_gof_pvalue", p,
                               "chi-square on a 20x20 transform grid");
        m.pass = p > 0.001;
        rep.metrics.push_back(std::move(m));
    }

    // bridge minimum median at a=b=0, h=1
    {
        RandomStream s = master.child(2);
        std::vector<double> mins(n);
        for (std::size_t i = 0; i < n; ++i) mins[i] = -bridge_min(s, 0.0, 0.0, 1.0);
        const double med = median(mins);
        const double ref = std::sqrt(0.5 * std::log(2.0));
        Metric m = info_metric("bridge_min_median", med,
                               "median of -min for the pinned bridge", ref);
        m.pass = std::abs(med - ref) <= 0.01;
        rep.metrics.push_back(std::move(m));
    }

    // hitting-time CDF at t=1 for x=1
    {
        RandomStream s = master.child(3);
        std::size_t hits = 0;
        for (std::size_t i = 0; i < n; ++i)
            hits += (hitting_time_of_zero(s, 1.0) <= 1.0) ? 1 : 0;
        const double freq = double(hits) / double(n);
        const double ref = 2.0 * (1.0 - normal_cdf(1.0));
        Metric m = info_metric("hitting_cdf@t=1", freq,
                               "empirical CDF of the first zero-hitting time", ref);
        m.pass = std::abs(freq - ref) <= 0.01;
        rep.metrics.push_back(std::move(m));
    }

    // bridge-min / touch-probability consistency over random endpoint triples
    {
        RandomStream s = master.child(4);
        double max_z = 0.0;
        const std::size_t trials = 20000;
        for (int k = 0; k < 20; ++k) {
            const double a = 2.0 * s.next_unit() - 0.5;
            const double b = 2.0 * s.next_unit() - 0.5;
            const double h = 0.25 + s.next_unit();
            const double p = bridge_hits_zero_prob(a, b, h);
            std::size_t hits = 0;
            for (std::size_t i = 0; i < trials; ++i) {
                // touching zero means min <= 0 from above, max >= 0 from below
                if (a >= 0.0 && b >= 0.0)
                    hits += bridge_min(s, a, b, h) <= 0.0 ? 1 : 0;
                else if (a <= 0.0 && b <= 0.0)
                    hits += bridge_max(s, a, b, h) >= 0.0 ? 1 : 0;
                else
                    hits += 1;
            }
            const double freq = double(hits) / double(trials);
            const double se =
                std::sqrt(std::max(p * (1.0 - p), 1e-12) / double(trials));
            max_z = std::max(max_z, std::abs(freq - p) / se);
        }
        Metric m = info_metric("bridge_hit_consistency_max_z", max_z,
                               "empirical touch frequency against the closed form");
        m.pass = max_z <= 3.0;
        rep.metrics.push_back(std::move(m));
    }
    rep.replicas_total = n;
}

} // namespace detail

/// Run one experiment deterministically from its configuration. The report
/// (minus the runtime field) is a pure function of the configuration.
inline ExperimentReport run(const ExperimentConfig& cfg) {
    const auto start = std::chrono::steady_clock::now();
    ExperimentReport rep;
    rep.experiment = experiment_name(cfg.kind);
    rep.master_seed = cfg.master_seed;
    rep.replicas = cfg.replicas;
    rep.threads = cfg.threads;
    rep.config_echo = config_to_json(cfg);
    rep.derived = detail::derived_to_json(detail::reference_rates(cfg), cfg.model);
    rep.extra = json::object();

    switch (cfg.kind) {
        case ExperimentKind::Expect: detail::run_expect(cfg, rep); break;
        case ExperimentKind::Simulate: detail::run_simulate(cfg, rep); break;
        case ExperimentKind::VerifyMean: detail::run_verify_mean(cfg, rep); break;
        case ExperimentKind::Growth: detail::run_growth(cfg, rep, false); break;
        case ExperimentKind::GrowthAbove: detail::run_growth(cfg, rep, true); break;
        case ExperimentKind::Rightmost: detail::run_rightmost(cfg, rep); break;
        case ExperimentKind::RareSurvival: detail::run_rare_survival(cfg, rep); break;
        case ExperimentKind::Martingale: detail::run_martingale(cfg, rep); break;
        case ExperimentKind::Spine: detail::run_spine(cfg, rep); break;
        case ExperimentKind::KernelsTest: detail::run_kernels_test(cfg, rep); break;
    }

    rep.runtime_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    if (!cfg.output_dir.empty()) {
        auto out = open_output(detail::report_dir(cfg) / "report.json");
        out << rep.to_json().dump(2) << '\n';
    }
    return rep;
}

/// Rightmost-speed study against lambda_crit.
inline ExperimentReport rightmost_speed_experiment(ExperimentConfig cfg) {
    cfg.kind = ExperimentKind::Rightmost;
    return run(cfg);
}

/// Survival-decay study for lambda above lambda_crit.
inline ExperimentReport rare_survival_experiment(ExperimentConfig cfg) {
    cfg.kind = ExperimentKind::RareSurvival;
    return run(cfg);
}

} // namespace bbm
