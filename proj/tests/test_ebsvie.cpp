#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "ebsvie/ebsvie.hpp"
#include "ebsvie/oracles.hpp"

using namespace ebsvie;

namespace {

// eta' = -a eta backward from eta(T) = 1 by RK4 with about 10^4 steps in total
std::vector<double> volterra_rk4(double a, const TimeGrid& g) {
    const std::size_t sub = (10000 + g.steps() - 1) / g.steps();
    const double h = g.dt() / static_cast<double>(sub);
    std::vector<double> out(g.size());
    double y = 1.0;
    out[g.steps()] = y;
    auto f = [a](double v) { return a * v; };  // dy/d(T - s)
    for (std::size_t j = g.steps(); j-- > 0;) {
        for (std::size_t k = 0; k < sub; ++k) {
            const double k1 = f(y);
            const double k2 = f(y + 0.5 * h * k1);
            const double k3 = f(y + 0.5 * h * k2);
            const double k4 = f(y + h * k3);
            y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        out[j] = y;
    }
    return out;
}

double volterra_error(const EbsvieSolution& sol, const std::vector<double>& exact) {
    double err = 0.0;
    const std::size_t nodes = sol.y.nodes();
    for (std::size_t t = 0; t < nodes; ++t) {
        for (std::size_t s = t; s < nodes; ++s) {
            err = std::max(err, std::abs(sol.y.at(t, 0, s) - exact[s]));
        }
    }
    return err;
}

// psi(t) = sin 3t, g = a eta + b t y: deterministic with genuine t-dependence
EbsvieSpec wavy_problem(double a, double b) {
    EbsvieSpec spec;
    spec.lipschitz = std::abs(a) + std::abs(b);
    spec.free_term = [](const GeneratorPoint& pt, std::span<double> out) { out[0] = std::sin(3.0 * pt.t); };
    spec.free_term_dt = [](const GeneratorPoint& pt, std::span<double> out) { out[0] = 3.0 * std::cos(3.0 * pt.t); };
    spec.generator = [a, b](const GeneratorPoint& pt, std::span<const double> eta, std::span<const double> y,
                            std::span<const double>, std::span<double> out) { out[0] = a * eta[0] + b * pt.t * y[0]; };
    spec.generator_dt = [b](const GeneratorPoint&, std::span<const double>, std::span<const double> y,
                            std::span<const double>, std::span<double> out) { out[0] = b * y[0]; };
    spec.generator_dy = [b](const GeneratorPoint& pt, std::span<const double>, std::span<const double>,
                            std::span<const double>, std::span<double> out) { out[0] = b * pt.t; };
    spec.generator_dz = [](const GeneratorPoint&, std::span<const double>, std::span<const double>,
                           std::span<const double>, std::span<double> out) { out[0] = 0.0; };
    return spec;
}

}  // namespace

TEST_CASE("zero problem") {
    const PathEnsemble e = simulate_paths(make_grid(0.0, 1.0, 8), 50, 1, 1);
    const EbsvieSolution sol = solve_ebsvie(oracles::zero_problem(), e, {BasisKind::brownian, 2});
    CHECK(sol.report.picard_iterations == 1);
    CHECK(sol.report.converged);
    CHECK(sol.report.contraction_ratios.empty());
    for (double v : sol.y.raw()) {
        CHECK(v == 0.0);
    }
    for (double v : sol.z.raw()) {
        CHECK(v == 0.0);
    }
}

TEST_CASE("deterministic Volterra problem") {
    const TimeGrid g = make_grid(0.0, 1.0, 64);
    const PathEnsemble e = simulate_paths(g, 1, 1, 1);
    const EbsvieSolution sol = solve_ebsvie(oracles::volterra_problem(0.5), e, {BasisKind::brownian, 0});
    CHECK(sol.report.converged);
    CHECK(volterra_error(sol, volterra_rk4(0.5, g)) <= 1e-3);
    for (double v : sol.z.raw()) {
        CHECK(std::abs(v) <= 1e-12);
    }
    CHECK(sol.report.contraction_ratios.size() + 1 == static_cast<std::size_t>(sol.report.picard_iterations));
}

TEST_CASE("martingale problem") {
    const TimeGrid g = make_grid(0.0, 1.0, 32);
    const PathEnsemble e = simulate_paths(g, 10000, 1, 2);
    const EbsvieSolution sol = solve_ebsvie(oracles::martingale_problem(e), e, {BasisKind::brownian, 1});
    double ez = 0.0;
    for (std::size_t t = 0; t <= 32; ++t) {
        for (std::size_t p = 0; p < e.paths(); ++p) {
            for (std::size_t s = 0; s < 32; ++s) {
                ez = std::max(ez, std::abs(sol.z.at(t, p, s) - g.node(t)));
            }
        }
    }
    CHECK(ez <= 0.05);
    // Y(0.5, 0.25) = 0.5 W(0.25) path by path
    double ey = 0.0;
    for (std::size_t p = 0; p < e.paths(); ++p) {
        ey = std::max(ey, std::abs(sol.y.at(16, p, 8) - 0.5 * e.brownian(p, 8, 0)));
    }
    CHECK(ey <= 1e-9);
}

TEST_CASE("stored diagonal and terminal values") {
    const TimeGrid g = make_grid(0.0, 1.0, 16);
    const PathEnsemble e = simulate_paths(g, 300, 1, 3);
    const EbsvieSpec spec = oracles::stationary_problem(e, 0.4, 0.3);
    for (Domain domain : {Domain::full, Domain::upper}) {
        SolverOptions opt;
        opt.domain = domain;
        const EbsvieSolution sol = solve_ebsvie(spec, e, {BasisKind::brownian, 2}, opt);
        std::vector<double> psi(1);
        for (std::size_t t = 0; t <= 16; ++t) {
            for (std::size_t p = 0; p < e.paths(); ++p) {
                CHECK(sol.eta.at(p, t) == sol.y.at(t, p, t));
                spec.free_term({g.node(t), 1.0, t, 16, p, &e}, psi);
                CHECK(sol.y.at(t, p, 16) == psi[0]);
            }
        }
    }
}

TEST_CASE("t-independent data reduce to one BSDE") {
    const PathEnsemble e = simulate_paths(make_grid(0.0, 1.0, 32), 1000, 1, 4);
    const RegressionBasis basis{BasisKind::brownian, 2};
    const EbsvieSolution sol = solve_ebsvie(oracles::stationary_problem(e, 0.5, 0.3), e, basis);
    const BsdeSolution ref = solve_bsde(oracles::stationary_bsde(e, 0.5, 0.3), e, basis);
    CHECK(sol.report.converged);
    double worst = 0.0;
    for (std::size_t t = 0; t <= 32; ++t) {
        for (std::size_t p = 0; p < e.paths(); ++p) {
            for (std::size_t s = 0; s <= 32; ++s) {
                worst = std::max(worst, std::abs(sol.y.at(t, p, s) - ref.y.at(p, s)));
                worst = std::max(worst, std::abs(sol.z.at(t, p, s) - ref.z.at(p, s)));
            }
        }
    }
    CHECK(worst <= 1e-12);
}

TEST_CASE("Type-I equation") {
    const TimeGrid g = make_grid(0.0, 1.0, 64);
    const PathEnsemble one = simulate_paths(g, 1, 1, 1);

    EbsvieSpec constant = oracles::zero_problem();
    constant.free_term = [](const GeneratorPoint&, std::span<double> out) { out[0] = 2.5; };
    const Type1Solution c = solve_type1_bsvie(constant, one, {BasisKind::brownian, 0});
    for (double v : c.eta.raw()) {
        CHECK(v == 2.5);
    }
    for (double v : c.zeta.raw()) {
        CHECK(v == 0.0);
    }

    const Type1Solution v = solve_type1_bsvie(oracles::volterra_problem(0.5), one, {BasisKind::brownian, 0});
    const std::vector<double> exact = volterra_rk4(0.5, g);
    for (std::size_t t = 0; t <= 64; ++t) {
        CHECK(std::abs(v.eta.at(0, t) - exact[t]) <= 1e-3);
    }

    const PathEnsemble e = simulate_paths(make_grid(0.0, 1.0, 16), 500, 1, 5);
    const Type1Solution m = solve_type1_bsvie(oracles::martingale_problem(e), e, {BasisKind::brownian, 1});
    for (std::size_t p = 0; p < e.paths(); ++p) {
        for (std::size_t t = 0; t <= 16; ++t) {
            CHECK(std::abs(m.eta.at(p, t) - e.grid().node(t) * e.brownian(p, t, 0)) <= 1e-9);
        }
    }

    CHECK_THROWS(solve_type1_bsvie(oracles::exponential_problem(0.5), one, {BasisKind::brownian, 0}));
}

TEST_CASE("derivative equation") {
    const TimeGrid g = make_grid(0.0, 1.0, 32);
    const PathEnsemble e = simulate_paths(g, 10000, 1, 6);
    const RegressionCache cache(e, {BasisKind::brownian, 1});
    const EbsvieSpec mart = oracles::martingale_problem(e);
    const EbsvieSolution base = solve_ebsvie(mart, cache);
    const DerivativeSolution d = solve_derivative_ebsvie(mart, base, cache);
    double ey = 0.0;
    double ez = 0.0;
    for (std::size_t t = 0; t <= 32; ++t) {
        for (std::size_t p = 0; p < e.paths(); ++p) {
            for (std::size_t s = 0; s <= 32; ++s) {
                ey = std::max(ey, std::abs(d.dy.at(t, p, s) - e.brownian(p, s, 0)));
                if (s < 32) {
                    ez = std::max(ez, std::abs(d.dz.at(t, p, s) - 1.0));
                }
            }
        }
    }
    CHECK(ey <= 0.05);
    CHECK(ez <= 0.05);

    const AdaptedField diag = compute_diag(base.z, d.dz);
    double ed = 0.0;
    for (std::size_t p = 0; p < e.paths(); ++p) {
        for (std::size_t s = 0; s < 32; ++s) {
            ed = std::max(ed, std::abs(diag.at(p, s) - g.node(s)));
        }
    }
    CHECK(ed <= 0.05);

    const PathEnsemble small = simulate_paths(g, 300, 1, 6);
    const EbsvieSpec stat = oracles::stationary_problem(small, 0.4, 0.3);
    const EbsvieSolution sbase = solve_ebsvie(stat, small, {BasisKind::brownian, 2});
    const DerivativeSolution sd = solve_derivative_ebsvie(stat, sbase, small, {BasisKind::brownian, 2});
    for (double v : sd.dy.raw()) {
        CHECK(v == 0.0);
    }
    for (double v : sd.dz.raw()) {
        CHECK(v == 0.0);
    }
    const AdaptedField sdiag = compute_diag(sbase.z, sd.dz);
    for (std::size_t p = 0; p < small.paths(); ++p) {
        for (std::size_t s = 0; s <= 32; ++s) {
            CHECK(sdiag.at(p, s) == sbase.z.at(0, p, s));
        }
    }

    const PathEnsemble one = simulate_paths(make_grid(0.0, 1.0, 64), 1, 1, 1);
    const EbsvieSpec vol = oracles::volterra_problem(0.5);
    const EbsvieSolution vbase = solve_ebsvie(vol, one, {BasisKind::brownian, 0});
    const DerivativeSolution vd = solve_derivative_ebsvie(vol, vbase, one, {BasisKind::brownian, 0});
    for (std::size_t t = 0; t <= 64; ++t) {
        for (std::size_t s = t; s <= 64; ++s) {
            CHECK(std::abs(vd.dy.at(t, 0, s)) <= 1e-3);
        }
    }

    EbsvieSpec bare = oracles::exponential_problem(0.5);
    bare.generator_dt = nullptr;
    const EbsvieSolution bbase = solve_ebsvie(bare, one, {BasisKind::brownian, 0});
    CHECK_THROWS(solve_derivative_ebsvie(bare, bbase, one, {BasisKind::brownian, 0}));
}

TEST_CASE("diagonal of a zero field") {
    const TimeGrid g = make_grid(0.0, 1.0, 8);
    const BiTemporalField z(g, 3, 1);
    const AdaptedField diag = compute_diag(z, z);
    for (double v : diag.raw()) {
        CHECK(v == 0.0);
    }
    CHECK_THROWS(compute_diag(z, BiTemporalField(g, 4, 1)));
}

TEST_CASE("finite differences in t match the derivative equation") {
    std::vector<double> dts;
    std::vector<double> errs;
    for (std::size_t n : {16u, 32u, 64u}) {
        const PathEnsemble one = simulate_paths(make_grid(0.0, 1.0, n), 1, 1, 1);
        const EbsvieSpec spec = wavy_problem(0.5, 0.7);
        SolverOptions opt;
        opt.tol = 1e-13;
        const EbsvieSolution base = solve_ebsvie(spec, one, {BasisKind::brownian, 0}, opt);
        const DerivativeSolution d = solve_derivative_ebsvie(spec, base, one, {BasisKind::brownian, 0});
        const double dt = one.grid().dt();
        double err = 0.0;
        for (std::size_t t = 1; t < n; ++t) {
            for (std::size_t s = 0; s <= n; ++s) {
                const double fd = (base.y.at(t + 1, 0, s) - base.y.at(t - 1, 0, s)) / (2.0 * dt);
                err = std::max(err, std::abs(fd - d.dy.at(t, 0, s)));
            }
        }
        dts.push_back(dt);
        errs.push_back(err);
    }
    CHECK(loglog_slope(dts, errs) >= 1.0);
}

TEST_CASE("property (D) on known fields") {
    const TimeGrid g = make_grid(0.0, 1.0, 32);
    BiTemporalField z(g, 2, 1);
    AdaptedField diag(g, 2, 1);
    for (std::size_t t = 0; t <= 32; ++t) {
        for (std::size_t p = 0; p < 2; ++p) {
            for (std::size_t s = 0; s <= 32; ++s) {
                z.at(t, p, s) = g.node(t);
            }
        }
    }
    for (std::size_t p = 0; p < 2; ++p) {
        for (std::size_t s = 0; s <= 32; ++s) {
            diag.at(p, s) = g.node(s);
        }
    }
    const std::vector<std::size_t> t_nodes{0, 8};
    const std::vector<std::size_t> eps_steps{2, 4, 8};
    const PropertyDReport lin = property_d_rate(z, diag, t_nodes, eps_steps);
    for (const PropertyDRow& row : lin.rows) {
        for (std::size_t k = 0; k < row.eps.size(); ++k) {
            CHECK(row.integrals[k] == doctest::Approx(0.5 * row.eps[k] * row.eps[k]).epsilon(1e-12));
        }
        CHECK(row.slope == doctest::Approx(2.0).epsilon(1e-10));
        CHECK_FALSE(row.failure);
    }
    CHECK_FALSE(lin.any_failure());

    for (std::size_t t = 0; t <= 32; ++t) {
        for (std::size_t p = 0; p < 2; ++p) {
            for (std::size_t s = 0; s <= 32; ++s) {
                z.at(t, p, s) = diag.at(p, s);
            }
        }
    }
    const PropertyDReport flat = property_d_rate(z, diag, t_nodes, eps_steps);
    for (const PropertyDRow& row : flat.rows) {
        CHECK(row.exact_zero);
        CHECK_FALSE(row.failure);
    }

    const std::vector<std::size_t> late{30};
    const PropertyDReport cut = property_d_rate(z, diag, late, eps_steps);
    REQUIRE(cut.rows.size() == 1);
    CHECK_FALSE(cut.rows[0].warnings.empty());
}

TEST_CASE("property (D) fails on the counterexample") {
    const double r = 2.0;
    const std::vector<double> ts{0.0, 0.3};
    const std::vector<double> eps{0.04, 0.02, 0.01};
    const PropertyDReport rep = property_d_rate(
        [r](double, double e) { return oracles::counterexample_integral(r, e); }, ts, eps, 1.0);
    CHECK(rep.any_failure());
    for (const PropertyDRow& row : rep.rows) {
        CHECK(row.failure);
        CHECK(row.slope == doctest::Approx(1.0 - 1.0 / r).epsilon(1e-9));
        CHECK(std::abs(row.averages[0] - 10.0) <= 1e-9);
        CHECK(std::abs(row.averages[1] - 10.0 * std::sqrt(2.0)) <= 1e-9);
        CHECK(std::abs(row.averages[2] - 20.0) <= 1e-9);
    }
}

TEST_CASE("ebsvie stability probe") {
    const TimeGrid g = make_grid(0.0, 1.0, 16);
    const PathEnsemble e = simulate_paths(g, 400, 1, 7);
    const RegressionBasis basis{BasisKind::brownian, 1};
    const EbsvieSpec mart = oracles::martingale_problem(e);
    const StabilityProbe same = ebsvie_stability_probe(mart, mart, e, basis);
    CHECK(same.solution_diff == 0.0);

    EbsvieSpec shifted = mart;
    shifted.free_term = [f = mart.free_term](const GeneratorPoint& pt, std::span<double> out) {
        f(pt, out);
        out[0] += 0.1;
    };
    const EbsvieSolution a = solve_ebsvie(mart, e, basis);
    const EbsvieSolution b = solve_ebsvie(shifted, e, basis);
    for (std::size_t t = 0; t <= 16; ++t) {
        auto ya = a.y.slice(t);
        auto yb = b.y.slice(t);
        for (std::size_t i = 0; i < ya.size(); ++i) {
            CHECK(std::abs(yb[i] - ya[i] - 0.1) <= 1e-12);
        }
    }

    const PathEnsemble one = simulate_paths(make_grid(0.0, 1.0, 64), 1, 1, 1);
    std::vector<double> ratios;
    for (double delta : {0.01, 0.005, 0.0025}) {
        const StabilityProbe pr = ebsvie_stability_probe(oracles::volterra_problem(0.5),
                                                         oracles::volterra_problem(0.5 + delta), one,
                                                         {BasisKind::brownian, 0});
        CHECK(std::isfinite(pr.ratio));
        ratios.push_back(pr.ratio);
    }
    const auto [lo, hi] = std::minmax_element(ratios.begin(), ratios.end());
    CHECK(*hi / *lo - 1.0 <= 0.10);
}

TEST_CASE("solution scales linearly with the free term") {
    const PathEnsemble e = simulate_paths(make_grid(0.0, 1.0, 16), 300, 1, 8);
    SolverOptions opt;
    opt.auto_beta = false;
    opt.norm = {1.0, 2.0};
    std::vector<double> norms;
    for (double c : {1.0, 2.0, 4.0}) {
        EbsvieSpec spec = oracles::martingale_problem(e);
        spec.free_term = [f = spec.free_term, c](const GeneratorPoint& pt, std::span<double> out) {
            f(pt, out);
            out[0] *= c;
        };
        const EbsvieSolution sol = solve_ebsvie(spec, e, {BasisKind::brownian, 1}, opt);
        norms.push_back(beta_norm(sol.y, sol.z, opt.norm));
    }
    CHECK(std::isfinite(norms[0]));
    CHECK(norms[1] == doctest::Approx(2.0 * norms[0]).epsilon(1e-12));
    CHECK(norms[2] == doctest::Approx(4.0 * norms[0]).epsilon(1e-12));
}

TEST_CASE("Picard ratios contract") {
    const PathEnsemble one = simulate_paths(make_grid(0.0, 1.0, 32), 1, 1, 1);
    for (const EbsvieSpec& spec : {oracles::volterra_problem(0.5), oracles::exponential_problem(0.5)}) {
        const EbsvieSolution sol = solve_ebsvie(spec, one, {BasisKind::brownian, 0});
        CHECK(sol.report.converged);
        CHECK(sol.report.final_delta <= 1e-8);
        for (std::size_t k = 1; k < sol.report.contraction_ratios.size(); ++k) {
            CHECK(sol.report.contraction_ratios[k] < 1.0);
        }
    }
}

TEST_CASE("non-convergence is reported, not thrown") {
    const PathEnsemble one = simulate_paths(make_grid(0.0, 1.0, 32), 1, 1, 1);
    SolverOptions opt;
    opt.max_iter = 2;
    const EbsvieSolution sol = solve_ebsvie(oracles::volterra_problem(0.5), one, {BasisKind::brownian, 0}, opt);
    CHECK_FALSE(sol.report.converged);
    CHECK(sol.report.picard_iterations == 2);
}

TEST_CASE("derivative callbacks agree with finite differences") {
    const PathEnsemble e = simulate_paths(make_grid(0.0, 1.0, 16), 20, 1, 9);
    CHECK(derivative_consistency(oracles::martingale_problem(e), e) <= 1e-4);
    CHECK(derivative_consistency(oracles::volterra_problem(0.5), e) <= 1e-4);
    CHECK(derivative_consistency(oracles::stationary_problem(e, 0.4, 0.3), e) <= 1e-4);
    CHECK(derivative_consistency(wavy_problem(0.5, 0.7), e) <= 1e-4);
}

TEST_CASE("solver options are validated") {
    SolverOptions opt;
    opt.tol = 0.0;
    CHECK_THROWS(opt.validate());
    opt.tol = 1e-8;
    opt.max_iter = 0;
    CHECK_THROWS(opt.validate());
}
