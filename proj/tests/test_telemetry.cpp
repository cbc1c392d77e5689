#include <doctest.h>

#include <cmath>

#include "stabilitybench/errors.hpp"
#include "stabilitybench/rng.hpp"
#include "stabilitybench/telemetry.hpp"

using namespace sb;

TEST_CASE("gradient coherence: identity, symmetry, orthogonality") {
    const std::vector<double> v = {1.0, 2.0, -0.5};
    CHECK(gradient_coherence({v, v, v, v}) == doctest::Approx(1.0).epsilon(1e-15));

    std::vector<double> neg = v;
    for (double& x : neg) x = -x;
    CHECK(gradient_coherence({v, neg}) == doctest::Approx(-1.0).epsilon(1e-15));

    CHECK(gradient_coherence({{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}}) ==
          doctest::Approx(0.0));
}

TEST_CASE("gradient coherence: zero vectors contribute zero, lengths must match") {
    const std::vector<double> v = {1.0, 1.0};
    const std::vector<double> zero = {0.0, 0.0};
    CHECK(gradient_coherence({v, zero}) == 0.0);
    CHECK(gradient_coherence({zero, zero, v}) == 0.0);
    CHECK_THROWS_AS(gradient_coherence({{1.0, 2.0}, {1.0, 2.0, 3.0}}), ContractError);
    CHECK_THROWS_AS(gradient_coherence({{1.0, 2.0}}), ContractError);
}

TEST_CASE("gradient coherence is invariant to positive rescaling") {
    Rng rng(55);
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<std::vector<double>> grads(4, std::vector<double>(6));
        for (auto& g : grads)
            for (double& x : g) x = rng.normal();
        const double base = gradient_coherence(grads);
        for (auto& g : grads) {
            const double s = std::exp(rng.uniform(-3.0, 3.0));
            for (double& x : g) x *= s;
        }
        CHECK(gradient_coherence(grads) == doctest::Approx(base).epsilon(1e-9));
    }
}

TEST_CASE("coherence to-mean variant agrees on aligned inputs") {
    const std::vector<double> v = {2.0, -1.0};
    CHECK(gradient_coherence({v, v, v}, CoherenceMode::ToMean) ==
          doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("instability index: frozen examples") {
    std::vector<double> constant(80, 5.0);
    CHECK(instability_index(constant, 50) == 0.0);

    std::vector<double> alternating;
    for (int i = 0; i < 50; ++i) alternating.push_back(i % 2 == 0 ? 1.0 : -1.0);
    // Variance of a zero-mean ±1 sequence over a full 50-step window.
    CHECK(instability_index(alternating, 50) == doctest::Approx(1.0).epsilon(1e-15));

    const std::vector<double> single = {3.0};
    CHECK(instability_index(single, 50) == 0.0);
    CHECK_THROWS_AS(instability_index(std::vector<double>{}, 50), ContractError);
}

TEST_CASE("instability index: shorter prefixes divide by the actual count") {
    const std::vector<double> two = {0.0, 2.0};  // mean 1, squared devs 1 each
    CHECK(instability_index(two, 50) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("instability index is shift invariant") {
    Rng rng(66);
    std::vector<double> hist(120);
    for (double& x : hist) x = rng.normal(0.0, 3.0);
    const double base = instability_index(hist, 50);
    for (double& x : hist) x += 1234.5;
    CHECK(instability_index(hist, 50) == doctest::Approx(base).epsilon(1e-9));
}

TEST_CASE("performance trend: identity, fixed point, direct formula") {
    CHECK(performance_trend(3.0, 7.0, 1.0) == 7.0);
    CHECK(performance_trend(4.0, 4.0, 0.25) == doctest::Approx(4.0).epsilon(1e-15));
    CHECK(performance_trend(0.0, 10.0, 0.1) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK_THROWS_AS(performance_trend(0.0, 1.0, 0.0), ConfigError);
    CHECK_THROWS_AS(performance_trend(0.0, 1.0, 1.5), ConfigError);
}

TEST_CASE("state persistence: zero, fixed point, direct formula") {
    CHECK(state_persistence(0.0, 0.0) == 0.0);
    const double u = 3.0;
    double mem = u;  // at the fixed point the EMA stays put
    CHECK(state_persistence(mem, u) == doctest::Approx(u).epsilon(1e-15));
    CHECK(state_persistence(1.0, 2.0, 0.99) == doctest::Approx(1.01).epsilon(1e-15));
    CHECK_THROWS_AS(state_persistence(0.0, -1.0), ContractError);
}

TEST_CASE("x_gen with alpha=1 reproduces the performance column") {
    ChannelTracker tracker(1.0, 0.99, 50);
    Rng rng(77);
    for (int t = 0; t < 100; ++t) {
        const double j = rng.normal();
        const auto ch = tracker.observe_replayed(j, 0.1, 0.5);
        CHECK(ch.x_gen == j);
    }
}

TEST_CASE("records copy fields and enforce step ordering") {
    ChannelTracker tracker;
    StepRaw raw;
    raw.step = 0;
    raw.loss = 0.25;
    raw.update_norm = 0.5;
    raw.sub_grads = {{1.0, 0.0}, {1.0, 0.0}};
    const auto ch = tracker.observe(2.0, raw.update_norm, raw.sub_grads);
    const TelemetryRecord rec = assemble_record(0, raw, 2.0, ch, true, -1);
    CHECK(rec.step == 0);
    CHECK(rec.J == 2.0);
    CHECK(rec.loss == 0.25);
    CHECK(rec.x_grad == 1.0);
    CHECK(rec.perturb_active);
    CHECK_FALSE(rec.diverged);
    CHECK_THROWS_AS(assemble_record(5, raw, 2.0, ch, false, 0), ContractError);
}

TEST_CASE("diverged records clamp non-finite losses") {
    ChannelTracker tracker;
    StepRaw raw;
    raw.step = 0;
    raw.loss = std::numeric_limits<double>::infinity();
    raw.diverged = true;
    raw.sub_grads = {{0.0}, {0.0}};
    const auto ch = tracker.observe(-1e6, 0.0, raw.sub_grads);
    const TelemetryRecord rec = assemble_record(0, raw, -1e6, ch, false, -1);
    CHECK(rec.diverged);
    CHECK(rec.loss == 1e300);
}

TEST_CASE("channels recompute bit-for-bit from the raw columns") {
    Rng rng(88);
    ChannelTracker live(0.1, 0.99, 50);
    ChannelTracker replay(0.1, 0.99, 50);
    for (int t = 0; t < 300; ++t) {
        const double j = rng.normal(10.0, 2.0);
        const double un = std::abs(rng.normal(0.0, 0.3));
        std::vector<std::vector<double>> grads(3, std::vector<double>(4));
        for (auto& g : grads)
            for (double& x : g) x = rng.normal();
        const double xg = gradient_coherence(grads);
        const auto a = live.observe(j, un, grads);
        const auto b = replay.observe_replayed(j, un, xg);
        REQUIRE(a.x_gen == b.x_gen);
        REQUIRE(a.x_inst == b.x_inst);
        REQUIRE(a.x_grad == b.x_grad);
        REQUIRE(a.x_mem == b.x_mem);
    }
}
