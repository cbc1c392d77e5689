#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "stabilitybench/rng.hpp"

using namespace sb;

TEST_CASE("same seed reproduces the draw sequence") {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("uniform stays in [0,1)") {
    Rng rng(7);
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
}

TEST_CASE("normal moments are sane") {
    Rng rng(11);
    const int n = 200000;
    double sum = 0.0, ss = 0.0;
    for (int i = 0; i < n; ++i) {
        const double z = rng.normal();
        sum += z;
        ss += z * z;
    }
    const double mean = sum / n;
    const double var = ss / n - mean * mean;
    CHECK(std::abs(mean) < 0.02);
    CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("state round-trips") {
    Rng a(99);
    for (int i = 0; i < 17; ++i) a.next_u64();
    Rng b(0);
    b.set_state(a.state());
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("below(n) covers the range without escapes") {
    Rng rng(3);
    bool seen[5] = {};
    for (int i = 0; i < 1000; ++i) {
        const auto v = rng.below(5);
        REQUIRE(v < 5);
        seen[v] = true;
    }
    for (bool s : seen) CHECK(s);
}

TEST_CASE("stream derivation separates tags and qualifiers") {
    const auto a = mix_seed(1, "data", 0, 0);
    const auto b = mix_seed(1, "eval", 0, 0);
    const auto c = mix_seed(1, "data", 1, 0);
    const auto d = mix_seed(2, "data", 0, 0);
    CHECK(a != b);
    CHECK(a != c);
    CHECK(a != d);
    CHECK(mix_seed(1, "data", 0, 0) == a);
}
