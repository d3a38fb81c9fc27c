#pragma once

#include <algorithm>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bbm {

/// Ulam-Harris label: the sequence of child indices from the root. The root
/// has an empty path; the second child of the third child of the root is
/// {3, 2}.
struct ParticleLabel {
    std::vector<std::uint32_t> path;

    std::size_t generation() const { return path.size(); }

    /// Strict ancestor relation: true iff this path is a strict prefix of
    /// the other.
    bool is_ancestor_of(const ParticleLabel& other) const {
        if (path.size() >= other.path.size()) return false;
        for (std::size_t i = 0; i < path.size(); ++i)
            if (path[i] != other.path[i]) return false;
        return true;
    }

    bool operator==(const ParticleLabel& other) const = default;

    bool operator<(const ParticleLabel& other) const {
        return path < other.path; // lexicographic
    }

    /// Dot-separated child indices; the root renders as the empty string.
    std::string to_string() const {
        std::ostringstream os;
        for (std::size_t i = 0; i < path.size(); ++i) {
            if (i) os << '.';
            os << path[i];
        }
        return os.str();
    }

    static ParticleLabel parse(const std::string& text) {
        ParticleLabel label;
        if (text.empty()) return label;
        std::istringstream is(text);
        std::string tok;
        while (std::getline(is, tok, '.')) {
            const long v = std::stol(tok);
            if (v < 1) throw std::invalid_argument("label indices start at 1");
            label.path.push_back(static_cast<std::uint32_t>(v));
        }
        return label;
    }
};

/// Append-only arena of birth records. Node 0 is the root; every other node
/// stores its parent and its child index, so labels are materialised on
/// demand by walking to the root.
class Genealogy {
public:
    static constexpr std::int64_t ROOT = 0;

    Genealogy() { nodes_.push_back({-1, 0, 0.0}); }

    std::int64_t add_child(std::int64_t parent, std::uint32_t child_index,
                           double birth_time = 0.0) {
        nodes_.push_back({parent, child_index, birth_time});
        return static_cast<std::int64_t>(nodes_.size()) - 1;
    }

    std::int64_t parent(std::int64_t node) const { return nodes_[at(node)].parent; }

    double birth_time(std::int64_t node) const {
        return nodes_[at(node)].birth_time;
    }

    ParticleLabel label(std::int64_t node) const {
        ParticleLabel l;
        while (node != ROOT) {
            const Node& n = nodes_[at(node)];
            l.path.push_back(n.child_index);
            node = n.parent;
        }
        std::reverse(l.path.begin(), l.path.end());
        return l;
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        std::int64_t parent;
        std::uint32_t child_index;
        double birth_time;
    };

    std::size_t at(std::int64_t node) const {
        if (node < 0 || node >= std::int64_t(nodes_.size()))
            throw std::out_of_range("Genealogy: unknown node");
        return static_cast<std::size_t>(node);
    }

    std::vector<Node> nodes_;
};

} // namespace bbm
