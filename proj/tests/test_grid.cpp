#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "ebsvie/errors.hpp"
#include "ebsvie/grid.hpp"
#include "ebsvie/philox.hpp"

using namespace ebsvie;

TEST_CASE("grid nodes") {
    const TimeGrid a = make_grid(0.0, 1.0, 4);
    const std::vector<double> expect{0.0, 0.25, 0.5, 0.75, 1.0};
    REQUIRE(a.size() == expect.size());
    for (std::size_t i = 0; i < expect.size(); ++i) {
        CHECK(a.node(i) == doctest::Approx(expect[i]).epsilon(1e-15));
    }

    const TimeGrid b = make_grid(0.0, 1.0, 1);
    CHECK(b.size() == 2);
    CHECK(b.dt() == 1.0);
    CHECK(b.node(1) == 1.0);

    const TimeGrid c = make_grid(0.5, 1.5, 2);
    CHECK(c.node(0) == 0.5);
    CHECK(c.node(1) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(c.node(2) == 1.5);
}

TEST_CASE("grid rejects bad bounds") {
    const double inf = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(make_grid(1.0, 1.0, 4), std::invalid_argument);
    CHECK_THROWS_AS(make_grid(2.0, 1.0, 4), std::invalid_argument);
    CHECK_THROWS_AS(make_grid(0.0, 1.0, 0), std::invalid_argument);
    CHECK_THROWS_AS(make_grid(0.0, inf, 4), std::invalid_argument);
    CHECK_THROWS_AS(make_grid(std::nan(""), 1.0, 4), std::invalid_argument);
}

TEST_CASE("grid tail keeps nodes") {
    const TimeGrid g = make_grid(0.0, 1.0, 8);
    const TimeGrid t = g.tail(3);
    CHECK(t.steps() == 5);
    CHECK(t.lo() == g.node(3));
    CHECK(t.dt() == g.dt());
    for (std::size_t i = 0; i < t.size(); ++i) {
        CHECK(t.node(i) == g.node(i + 3));
    }
}

TEST_CASE("simulate_paths is deterministic") {
    const TimeGrid g = make_grid(0.0, 1.0, 4);
    const PathEnsemble a = simulate_paths(g, 1, 1, 7);
    const PathEnsemble b = simulate_paths(g, 1, 1, 7);
    REQUIRE(a.raw().size() == b.raw().size());
    for (std::size_t i = 0; i < a.raw().size(); ++i) {
        CHECK(a.raw()[i] == b.raw()[i]);
    }
    const PathEnsemble c = simulate_paths(g, 1, 1, 8);
    CHECK(c.raw()[0] != a.raw()[0]);
}

TEST_CASE("simulate_paths is stable in the number of paths") {
    const TimeGrid g = make_grid(0.0, 1.0, 16);
    const PathEnsemble a = simulate_paths(g, 10, 2, 7);
    const PathEnsemble b = simulate_paths(g, 20, 2, 7);
    for (std::size_t p = 0; p < 10; ++p) {
        for (std::size_t j = 0; j < 16; ++j) {
            for (std::size_t c = 0; c < 2; ++c) {
                CHECK(a.increment(p, j, c) == b.increment(p, j, c));
            }
        }
    }
}

TEST_CASE("increment moments") {
    const std::size_t m = 100000;
    const TimeGrid g = make_grid(0.0, 1.0, 4);
    const PathEnsemble e = simulate_paths(g, m, 1, 3);
    const double dt = g.dt();
    for (std::size_t j = 0; j < g.steps(); ++j) {
        double s1 = 0.0;
        double s2 = 0.0;
        for (std::size_t p = 0; p < m; ++p) {
            const double v = e.increment(p, j, 0);
            s1 += v;
            s2 += v * v;
        }
        const double mean = s1 / static_cast<double>(m);
        const double var = s2 / static_cast<double>(m) - mean * mean;
        CHECK(std::abs(mean) <= 5.0 * std::sqrt(dt / static_cast<double>(m)));
        CHECK(std::abs(var - dt) <= 0.05 * dt);
        // standard error of the sample variance of a normal is dt sqrt(2/M)
        CHECK(std::abs(var - dt) <= 5.0 * dt * std::sqrt(2.0 / static_cast<double>(m)));
    }
    double s2 = 0.0;
    for (std::size_t p = 0; p < m; ++p) {
        const double w = e.brownian(p, g.steps(), 0);
        s2 += w * w;
    }
    CHECK(std::abs(s2 / static_cast<double>(m) - 1.0) <= 5.0 * std::sqrt(2.0 / static_cast<double>(m)));
}

TEST_CASE("memory budget") {
    const TimeGrid g = make_grid(0.0, 1.0, 100);
    CHECK_THROWS_AS(simulate_paths(g, 1000, 1, 1, 1000), ResourceError);
    CHECK_NOTHROW(simulate_paths(g, 10, 1, 1, 100000));
}

TEST_CASE("resampled future keeps the past") {
    const TimeGrid g = make_grid(0.0, 1.0, 8);
    const PathEnsemble a = simulate_paths(g, 5, 1, 2);
    const PathEnsemble b = a.with_resampled_future(4, 99);
    for (std::size_t p = 0; p < 5; ++p) {
        for (std::size_t j = 0; j < 4; ++j) {
            CHECK(a.increment(p, j, 0) == b.increment(p, j, 0));
        }
        CHECK(a.increment(p, 4, 0) != b.increment(p, 4, 0));
    }
    const PathEnsemble t = a.tail(3);
    CHECK(t.steps() == 5);
    CHECK(t.increment(2, 0, 0) == a.increment(2, 3, 0));
}

TEST_CASE("Philox4x32-10 known answers") {
    using C = Philox4x32::Counter;
    CHECK(Philox4x32(0)(C{0, 0, 0, 0}) == C{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u});
    CHECK(Philox4x32(~0ULL)(C{0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}) ==
          C{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu});
    CHECK(Philox4x32(0x299f31d0a4093822ULL)(C{0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}) ==
          C{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u});
}

TEST_CASE("Gaussian stream is random access") {
    const GaussianStream s(5, 3);
    const double x7 = s.normal(7);
    const double x2 = s.normal(2);
    CHECK(s.normal(7) == x7);
    CHECK(s.normal(2) == x2);
    CHECK(GaussianStream(5, 4).normal(7) != x7);
}
