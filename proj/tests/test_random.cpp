#include <catch2/catch_amalgamated.hpp>

#include <set>
#include <vector>

#include "bbm/analytics.hpp"
#include "bbm/random.hpp"

using bbm::RandomStream;

TEST_CASE("identical seed and derivation path reproduce the sequence", "[random]") {
    RandomStream a(42);
    RandomStream b(42);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());

    RandomStream c = RandomStream(7).child(3).child(11);
    RandomStream d = RandomStream(7).child(3).child(11);
    for (int i = 0; i < 100; ++i) REQUIRE(c.next_u64() == d.next_u64());
}

TEST_CASE("child derivation ignores the parent draw position", "[random]") {
    RandomStream a(9);
    RandomStream before = a.child(5);
    for (int i = 0; i < 17; ++i) a.next_u64();
    RandomStream after = a.child(5);
    for (int i = 0; i < 50; ++i) REQUIRE(before.next_u64() == after.next_u64());
}

TEST_CASE("distinct keys give distinct streams", "[random]") {
    RandomStream root(1);
    std::set<std::uint64_t> firsts;
    for (std::uint64_t k = 0; k < 1000; ++k)
        firsts.insert(root.child(k).next_u64());
    REQUIRE(firsts.size() == 1000);

    // different master seeds decorrelate as well
    REQUIRE(RandomStream(1).next_u64() != RandomStream(2).next_u64());
}

TEST_CASE("next_unit stays inside the open interval", "[random]") {
    RandomStream s(3);
    for (int i = 0; i < 100000; ++i) {
        const double u = s.next_unit();
        REQUIRE(u > 0.0);
        REQUIRE(u < 1.0);
    }
}

TEST_CASE("unit_at is stateless and indexable", "[random]") {
    RandomStream s(12);
    const double v = s.unit_at(77, 5);
    s.next_u64();
    REQUIRE(s.unit_at(77, 5) == v);
    REQUIRE(s.unit_at(77, 6) != v);
    REQUIRE(s.unit_at(78, 5) != v);
}

TEST_CASE("uniform output passes moment and chi-square checks", "[random]") {
    RandomStream s(2024);
    const int n = 1000000;
    const int bins = 64;
    std::vector<long long> counts(bins, 0);
    double sum = 0.0, sum_sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double u = s.next_unit();
        sum += u;
        sum_sq += u * u;
        counts[std::min(bins - 1, int(u * bins))] += 1;
    }
    const double mean = sum / n;
    const double var = sum_sq / n - mean * mean;
    REQUIRE(std::abs(mean - 0.5) < 4.0 * std::sqrt(1.0 / 12.0 / n));
    REQUIRE(std::abs(var - 1.0 / 12.0) < 0.001);

    const double expected = double(n) / bins;
    double stat = 0.0;
    for (long long c : counts) stat += (c - expected) * (c - expected) / expected;
    REQUIRE(bbm::chi_square_pvalue(stat, bins - 1) > 1e-4);
}
