#include <doctest.h>

#include <cmath>
#include <functional>
#include <limits>

#include "ebsvie/bsde.hpp"
#include "ebsvie/oracles.hpp"

using namespace ebsvie;

namespace {

BsdeSpec terminal_of_w(std::function<double(double)> psi) {
    BsdeSpec spec;
    spec.terminal = [psi = std::move(psi)](const GeneratorPoint& pt, std::span<double> out) {
        out[0] = psi(pt.ensemble->brownian(pt.path, pt.s_node, 0));
    };
    return spec;
}

}  // namespace

TEST_CASE("zero data gives the zero solution") {
    const PathEnsemble e = simulate_paths(make_grid(0.0, 1.0, 16), 100, 2, 1);
    BsdeSpec spec;
    spec.d = 2;
    spec.terminal = [](const GeneratorPoint&, std::span<double> out) { out[0] = 0.0; };
    spec.generator = [](const GeneratorPoint&, std::span<const double>, std::span<const double>,
                        std::span<double> out) { out[0] = 0.0; };
    const BsdeSolution sol = solve_bsde(spec, e, {BasisKind::brownian, 2});
    for (double v : sol.y.raw()) {
        CHECK(v == 0.0);
    }
    for (double v : sol.z.raw()) {
        CHECK(v == 0.0);
    }
}

TEST_CASE("martingale representation of W(T)") {
    const TimeGrid g = make_grid(0.0, 1.0, 32);
    const PathEnsemble e = simulate_paths(g, 10000, 1, 2);
    const BsdeSolution sol = solve_bsde(terminal_of_w([](double w) { return w; }), e, {BasisKind::brownian, 1});
    double ey = 0.0;
    double ez = 0.0;
    for (std::size_t p = 0; p < e.paths(); ++p) {
        for (std::size_t s = 0; s <= g.steps(); ++s) {
            ey = std::max(ey, std::abs(sol.y.at(p, s) - e.brownian(p, s, 0)));
            ez = std::max(ez, std::abs(sol.z.at(p, s) - 1.0));
        }
    }
    CHECK(ez <= 0.05);
    CHECK(ey <= 0.05);
}

TEST_CASE("linear generator against the backward ODE") {
    const PathEnsemble e = simulate_paths(make_grid(0.0, 1.0, 64), 1, 1, 3);
    const BsdeSolution sol = solve_bsde(oracles::exponential_bsde(0.5), e, {BasisKind::brownian, 0});
    CHECK(std::abs(sol.y.at(0, 0) - std::exp(0.5)) <= 2e-2);
    for (std::size_t s = 0; s <= 64; ++s) {
        CHECK(std::abs(sol.z.at(0, s)) <= 1e-12);
    }
}

TEST_CASE("bsde stability probe") {
    const TimeGrid g = make_grid(0.0, 1.0, 16);
    const PathEnsemble e = simulate_paths(g, 2000, 1, 4);
    const RegressionBasis basis{BasisKind::brownian, 2};
    const BsdeSpec base = oracles::stationary_bsde(e, 0.3, 0.2);

    const StabilityProbe same = bsde_stability_probe(base, base, e, basis);
    CHECK(same.solution_diff == 0.0);
    CHECK(same.data_diff == 0.0);

    const BsdeSpec w = terminal_of_w([](double x) { return std::sin(x); });
    const BsdeSpec shifted = terminal_of_w([](double x) { return std::sin(x) + 0.1; });
    const BsdeSolution a = solve_bsde(w, e, basis);
    const BsdeSolution b = solve_bsde(shifted, e, basis);
    for (std::size_t i = 0; i < a.y.raw().size(); ++i) {
        CHECK(std::abs(b.y.raw()[i] - a.y.raw()[i] - 0.1) <= 1e-12);
    }
    const StabilityProbe shift = bsde_stability_probe(w, shifted, e, basis);
    CHECK(shift.ratio == doctest::Approx(1.0).epsilon(1e-10));

    const BsdeSpec wiggle = terminal_of_w([](double x) { return std::sin(x) + 0.01 * x; });
    const BsdeSolution c = solve_bsde(wiggle, e, basis);
    double mean_dy0 = 0.0;
    double max_dz = 0.0;
    for (std::size_t p = 0; p < e.paths(); ++p) {
        mean_dy0 += (c.y.at(p, 0) - a.y.at(p, 0)) / static_cast<double>(e.paths());
        for (std::size_t s = 0; s < g.steps(); ++s) {
            max_dz = std::max(max_dz, std::abs(c.z.at(p, s) - a.z.at(p, s) - 0.01));
        }
    }
    CHECK(std::abs(mean_dy0) <= 1e-3);
    CHECK(max_dz <= 1e-3);
}

TEST_CASE("regression residuals are orthogonal to the features") {
    const TimeGrid g = make_grid(0.0, 1.0, 8);
    const PathEnsemble e = simulate_paths(g, 3000, 1, 6);
    const BsdeSolution sol = solve_bsde(terminal_of_w([](double w) { return std::cos(w) + w * w * w; }), e,
                                        {BasisKind::brownian, 2});
    const double dt = g.dt();
    for (std::size_t i = 1; i < g.steps(); ++i) {
        double worst = 0.0;
        for (int k = 0; k < 6; ++k) {
            double dot = 0.0;
            double rr = 0.0;
            double ff = 0.0;
            for (std::size_t p = 0; p < e.paths(); ++p) {
                const double w = e.brownian(p, i, 0);
                const double dw = e.increment(p, i, 0);
                const double r = sol.y.at(p, i + 1) - sol.y.at(p, i) - sol.z.at(p, i) * dw;
                const double phi = std::pow(w, k % 3) * (k < 3 ? 1.0 : dw / std::sqrt(dt));
                dot += r * phi;
                rr += r * r;
                ff += phi * phi;
            }
            worst = std::max(worst, std::abs(dot) / std::sqrt(rr * ff));
        }
        CHECK(worst <= 1e-8);
    }
}

TEST_CASE("zero generator solutions are linear in the terminal value") {
    const PathEnsemble e = simulate_paths(make_grid(0.0, 1.0, 12), 500, 1, 7);
    const RegressionBasis basis{BasisKind::brownian, 2};
    const BsdeSolution a = solve_bsde(terminal_of_w([](double w) { return w * w; }), e, basis);
    const BsdeSolution b = solve_bsde(terminal_of_w([](double w) { return std::cos(w); }), e, basis);
    const BsdeSolution c = solve_bsde(terminal_of_w([](double w) { return 2.0 * w * w - 3.0 * std::cos(w); }), e, basis);
    for (std::size_t i = 0; i < a.y.raw().size(); ++i) {
        CHECK(std::abs(c.y.raw()[i] - (2.0 * a.y.raw()[i] - 3.0 * b.y.raw()[i])) <= 1e-12);
        CHECK(std::abs(c.z.raw()[i] - (2.0 * a.z.raw()[i] - 3.0 * b.z.raw()[i])) <= 1e-11);
    }
}

TEST_CASE("error falls under refinement") {
    // psi = W(T)^2, g = a y: y(s) = e^{a(T-s)} (W(s)^2 + T - s), exact in the degree-2 basis
    const double a = 0.5;
    double previous = std::numeric_limits<double>::infinity();
    std::size_t n = 8;
    std::size_t m = 1000;
    for (int level = 0; level < 3; ++level, n *= 2, m *= 4) {
        const TimeGrid g = make_grid(0.0, 1.0, n);
        const PathEnsemble e = simulate_paths(g, m, 1, 8);
        BsdeSpec spec = terminal_of_w([](double w) { return w * w; });
        spec.generator = [a](const GeneratorPoint&, std::span<const double> y, std::span<const double>,
                             std::span<double> out) { out[0] = a * y[0]; };
        spec.lipschitz = a;
        const BsdeSolution sol = solve_bsde(spec, e, {BasisKind::brownian, 2});
        double err = 0.0;
        for (std::size_t p = 0; p < m; ++p) {
            for (std::size_t s = 0; s <= n; ++s) {
                const double w = e.brownian(p, s, 0);
                const double exact = std::exp(a * (1.0 - g.node(s))) * (w * w + 1.0 - g.node(s));
                err += (sol.y.at(p, s) - exact) * (sol.y.at(p, s) - exact);
            }
        }
        err = std::sqrt(err / static_cast<double>(m * (n + 1)));
        CHECK(err < previous);
        previous = err;
    }
}

TEST_CASE("rank loss is reported") {
    const PathEnsemble e = simulate_paths(make_grid(0.0, 1.0, 8), 200, 1, 9);
    // W(0) = 0 on every path, so the first design has dependent columns
    const BsdeSolution sol = solve_bsde(terminal_of_w([](double) { return 1.0; }), e, {BasisKind::brownian, 2});
    CHECK(sol.deficient_nodes >= 1);
    for (double v : sol.y.raw()) {
        CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("non-finite generator values abort with a location") {
    const PathEnsemble e = simulate_paths(make_grid(0.0, 1.0, 8), 10, 1, 9);
    BsdeSpec spec = terminal_of_w([](double) { return 1.0; });
    spec.generator = [](const GeneratorPoint& pt, std::span<const double>, std::span<const double>,
                        std::span<double> out) { out[0] = pt.s_node == 5 && pt.path == 3 ? std::nan("") : 0.0; };
    try {
        solve_bsde(spec, e, {BasisKind::brownian, 1});
        FAIL("expected NumericalError");
    } catch (const NumericalError& err) {
        CHECK(err.node() == 5);
        CHECK(err.path() == 3);
    }
}

TEST_CASE("scheme options are validated") {
    CHECK_THROWS(SchemeOptions{1.5, 2}.validate());
    CHECK_THROWS(SchemeOptions{0.5, -1}.validate());
    CHECK_NOTHROW(SchemeOptions{0.0, 0}.validate());
}
