#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include "bbm/population.hpp"
#include "bbm/spine.hpp"

namespace bbm {

/// Shortest faithful decimal rendering used in all CSV output: 17
/// significant digits round-trip a double exactly.
inline std::string format_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string());
    return out;
}

inline void write_snapshot_csv(const std::filesystem::path& path,
                               const std::vector<PopulationSnapshot>& snapshots) {
    auto out = open_output(path);
    out << "time,label,position,local_time\n";
    for (const auto& snap : snapshots)
        for (const auto& e : snap.particles)
            out << format_double(snap.time) << ',' << e.label.to_string() << ','
                << format_double(e.position) << ',' << format_double(e.local_time)
                << '\n';
}

inline void write_event_csv(const std::filesystem::path& path,
                            const std::vector<BranchEvent>& events) {
    auto out = open_output(path);
    out << "time,label,kind,position,n_children\n";
    for (const auto& e : events)
        out << format_double(e.time) << ',' << e.label.to_string() << ','
            << (e.kind == EventKind::Homogeneous ? "hom" : "cat") << ','
            << format_double(e.position) << ',' << e.n_children << '\n';
}

inline void write_spine_csv(const std::filesystem::path& path,
                            const SpinePath& spine) {
    auto out = open_output(path);
    out << "time,xi,local_time\n";
    for (std::size_t i = 0; i < spine.times.size(); ++i)
        out << format_double(spine.times[i]) << ',' << format_double(spine.xi[i])
            << ',' << format_double(spine.local_time[i]) << '\n';
}

inline void write_fission_csv(const std::filesystem::path& path,
                              const SpinePath& spine) {
    auto out = open_output(path);
    out << "time,at_origin,offspring\n";
    for (const auto& f : spine.fissions)
        out << format_double(f.time) << ',' << (f.at_origin ? 1 : 0) << ','
            << f.offspring << '\n';
}

} // namespace bbm
