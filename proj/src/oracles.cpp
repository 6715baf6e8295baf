#include "ebsvie/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace ebsvie::oracles {

namespace {

void zeros(std::span<double> out) {
    for (double& v : out) {
        v = 0.0;
    }
}

std::shared_ptr<std::vector<double>> terminal_brownian(const PathEnsemble& ens) {
    auto w = std::make_shared<std::vector<double>>(ens.paths());
    for (std::size_t p = 0; p < ens.paths(); ++p) {
        (*w)[p] = ens.brownian(p, ens.steps(), 0);
    }
    return w;
}

auto zero_generator() {
    return [](const GeneratorPoint&, std::span<const double>, std::span<const double>, std::span<const double>,
              std::span<double> out) { zeros(out); };
}

}  // namespace

EbsvieSpec zero_problem(std::size_t m, std::size_t d) {
    EbsvieSpec spec;
    spec.m = m;
    spec.d = d;
    spec.free_term = [](const GeneratorPoint&, std::span<double> out) { zeros(out); };
    spec.free_term_dt = spec.free_term;
    return spec;
}

EbsvieSpec martingale_problem(const PathEnsemble& ensemble) {
    auto w = terminal_brownian(ensemble);
    EbsvieSpec spec;
    spec.free_term = [w](const GeneratorPoint& pt, std::span<double> out) { out[0] = pt.t * (*w)[pt.path]; };
    spec.free_term_dt = [w](const GeneratorPoint& pt, std::span<double> out) { out[0] = (*w)[pt.path]; };
    return spec;
}

EbsvieSpec volterra_problem(double a) {
    EbsvieSpec spec;
    spec.lipschitz = std::abs(a);
    spec.depends_on_y = false;
    spec.free_term = [](const GeneratorPoint&, std::span<double> out) { out[0] = 1.0; };
    spec.generator = [a](const GeneratorPoint&, std::span<const double> eta, std::span<const double>,
                         std::span<const double>, std::span<double> out) { out[0] = a * eta[0]; };
    spec.free_term_dt = [](const GeneratorPoint&, std::span<double> out) { out[0] = 0.0; };
    spec.generator_dt = zero_generator();
    spec.generator_dy = zero_generator();
    spec.generator_dz = zero_generator();
    return spec;
}

double volterra_closed_form(double a, double s, double horizon) { return std::exp(a * (horizon - s)); }

EbsvieSpec exponential_problem(double a) {
    EbsvieSpec spec;
    spec.lipschitz = std::abs(a);
    spec.free_term = [](const GeneratorPoint&, std::span<double> out) { out[0] = 1.0; };
    spec.generator = [a](const GeneratorPoint&, std::span<const double>, std::span<const double> y,
                         std::span<const double>, std::span<double> out) { out[0] = a * y[0]; };
    spec.free_term_dt = [](const GeneratorPoint&, std::span<double> out) { out[0] = 0.0; };
    spec.generator_dt = zero_generator();
    spec.generator_dy = [a](const GeneratorPoint&, std::span<const double>, std::span<const double>,
                            std::span<const double>, std::span<double> out) { out[0] = a; };
    spec.generator_dz = zero_generator();
    return spec;
}

BsdeSpec exponential_bsde(double a) {
    BsdeSpec spec;
    spec.lipschitz = std::abs(a);
    spec.terminal = [](const GeneratorPoint&, std::span<double> out) { out[0] = 1.0; };
    spec.generator = [a](const GeneratorPoint&, std::span<const double> y, std::span<const double>,
                         std::span<double> out) { out[0] = a * y[0]; };
    return spec;
}

EbsvieSpec stationary_problem(const PathEnsemble& ensemble, double a, double b) {
    auto w = terminal_brownian(ensemble);
    EbsvieSpec spec;
    spec.lipschitz = std::abs(a) + std::abs(b);
    spec.free_term = [w](const GeneratorPoint& pt, std::span<double> out) { out[0] = std::cos((*w)[pt.path]); };
    spec.generator = [a, b](const GeneratorPoint&, std::span<const double>, std::span<const double> y,
                            std::span<const double> z, std::span<double> out) { out[0] = a * y[0] + b * z[0]; };
    spec.free_term_dt = [](const GeneratorPoint&, std::span<double> out) { out[0] = 0.0; };
    spec.generator_dt = zero_generator();
    spec.generator_dy = [a](const GeneratorPoint&, std::span<const double>, std::span<const double>,
                            std::span<const double>, std::span<double> out) { out[0] = a; };
    spec.generator_dz = [b](const GeneratorPoint&, std::span<const double>, std::span<const double>,
                            std::span<const double>, std::span<double> out) { out[0] = b; };
    return spec;
}

BsdeSpec stationary_bsde(const PathEnsemble& ensemble, double a, double b) {
    auto w = terminal_brownian(ensemble);
    BsdeSpec spec;
    spec.lipschitz = std::abs(a) + std::abs(b);
    spec.terminal = [w](const GeneratorPoint& pt, std::span<double> out) { out[0] = std::cos((*w)[pt.path]); };
    spec.generator = [a, b](const GeneratorPoint&, std::span<const double> y, std::span<const double> z,
                            std::span<double> out) { out[0] = a * y[0] + b * z[0]; };
    return spec;
}

double counterexample_field(double r, double t, double s) { return s > t ? std::pow(s - t, -1.0 / r) : 0.0; }

double counterexample_integral(double r, double eps) {
    if (!(r > 1.0) || !(eps > 0.0)) {
        throw std::invalid_argument("counterexample needs r > 1 and eps > 0");
    }
    // antiderivative of u^{-1/r} is u^{1-1/r} / (1 - 1/r)
    const double k = 1.0 - 1.0 / r;
    return std::pow(eps, k) / k;
}

double counterexample_average(double r, double eps) { return counterexample_integral(r, eps) / eps; }

namespace {

ControlProblem quiet_problem() {
    ControlProblem pr;
    pr.n = 1;
    pr.t0 = 0.0;
    pr.horizon = 1.0;
    auto zero_field = [](double, double, std::span<const double>, std::span<double> out) { zeros(out); };
    auto zero_vec = [](double, double, double, std::span<const double>, double, double, std::span<double> out) {
        zeros(out);
    };
    pr.b = pr.b_x = pr.b_xx = zero_field;
    pr.sigma = pr.sigma_x = pr.sigma_xx = zero_field;
    pr.f = pr.f_t = [](double, double, double, std::span<const double>, double, double) { return 0.0; };
    pr.f_grad = pr.f_grad_t = pr.f_hess = zero_vec;
    pr.h = pr.h_t = [](double, std::span<const double>) { return 0.0; };
    pr.h_x = pr.h_xt = pr.h_xx = [](double, std::span<const double>, std::span<double> out) { zeros(out); };
    pr.initial_state = [](std::size_t, std::span<double> out) { zeros(out); };
    pr.lipschitz = 0.0;
    return pr;
}

}  // namespace

ControlProblem control_toy() {
    ControlProblem pr = quiet_problem();
    pr.controls = {-1.0, 0.0, 1.0};
    pr.b = [](double, double u, std::span<const double>, std::span<double> out) { out[0] = u; };
    pr.sigma = [](double, double, std::span<const double>, std::span<double> out) { out[0] = 1.0; };
    pr.f = [](double, double, double u, std::span<const double>, double, double) { return u * u; };
    return pr;
}

ControlProblem spike_cost_toy() {
    ControlProblem pr = quiet_problem();
    pr.controls = {0.0, 1.0};
    pr.b = [](double, double u, std::span<const double>, std::span<double> out) { out[0] = u; };
    pr.f = [](double, double, double u, std::span<const double>, double, double) { return u * u; };
    return pr;
}

ControlProblem volatility_toy(double c, double kappa, double lambda) {
    ControlProblem pr = quiet_problem();
    pr.controls = {-1.0, 0.0, 1.0};
    pr.lipschitz = std::abs(kappa);
    pr.b = [c](double, double u, std::span<const double> x, std::span<double> out) { out[0] = u + c * std::sin(x[0]); };
    pr.b_x = [c](double, double, std::span<const double> x, std::span<double> out) { out[0] = c * std::cos(x[0]); };
    pr.b_xx = [c](double, double, std::span<const double> x, std::span<double> out) { out[0] = -c * std::sin(x[0]); };
    pr.sigma = [](double, double u, std::span<const double>, std::span<double> out) { out[0] = u; };
    pr.f = [kappa, lambda](double t, double s, double u, std::span<const double>, double y, double) {
        return 0.5 * std::exp(-lambda * (s - t)) * u * u + kappa * y;
    };
    pr.f_t = [lambda](double t, double s, double u, std::span<const double>, double, double) {
        return 0.5 * lambda * std::exp(-lambda * (s - t)) * u * u;
    };
    pr.f_grad = [kappa](double, double, double, std::span<const double>, double, double, std::span<double> out) {
        out[0] = 0.0;
        out[1] = kappa;
        out[2] = 0.0;
    };
    pr.h = [](double t, std::span<const double> x) { return 0.5 * (1.0 + t) * x[0] * x[0]; };
    pr.h_t = [](double, std::span<const double> x) { return 0.5 * x[0] * x[0]; };
    pr.h_x = [](double t, std::span<const double> x, std::span<double> out) { out[0] = (1.0 + t) * x[0]; };
    pr.h_xt = [](double, std::span<const double> x, std::span<double> out) { out[0] = x[0]; };
    pr.h_xx = [](double t, std::span<const double>, std::span<double> out) { out[0] = 1.0 + t; };
    return pr;
}

namespace {

OracleResult judged(std::string id, std::string description, double error, double tolerance) {
    return {std::move(id), std::move(description), error <= tolerance, error, tolerance};
}

}  // namespace

std::vector<OracleResult> oracle_suite(std::uint64_t seed) {
    std::vector<OracleResult> out;
    {
        const TimeGrid grid = make_grid(0.0, 1.0, 16);
        const PathEnsemble ens = simulate_paths(grid, 200, 1, seed);
        const EbsvieSolution sol = solve_ebsvie(zero_problem(), ens, RegressionBasis{});
        double err = 0.0;
        for (double v : sol.y.raw()) {
            err = std::max(err, std::abs(v));
        }
        for (double v : sol.z.raw()) {
            err = std::max(err, std::abs(v));
        }
        out.push_back(judged("O1", "zero problem, max |Y|, |Z|", err, 1e-14));
    }
    {
        const TimeGrid grid = make_grid(0.0, 1.0, 16);
        const PathEnsemble ens = simulate_paths(grid, 4000, 1, seed);
        RegressionBasis basis;
        basis.degree = 1;
        const RegressionCache cache(ens, basis);
        const EbsvieSpec spec = martingale_problem(ens);
        const EbsvieSolution sol = solve_ebsvie(spec, cache);
        const DerivativeSolution der = solve_derivative_ebsvie(spec, sol, cache);
        const AdaptedField diag = compute_diag(sol.z, der.dz);
        double err = 0.0;
        for (std::size_t t = 0; t <= grid.steps(); ++t) {
            for (std::size_t p = 0; p < ens.paths(); ++p) {
                for (std::size_t s = 0; s <= grid.steps(); ++s) {
                    err = std::max(err, std::abs(sol.z.at(t, p, s) - grid.node(t)));
                    err = std::max(err, std::abs(sol.y.at(t, p, s) - grid.node(t) * ens.brownian(p, s, 0)));
                }
            }
        }
        for (std::size_t p = 0; p < ens.paths(); ++p) {
            for (std::size_t s = 0; s <= grid.steps(); ++s) {
                err = std::max(err, std::abs(diag.at(p, s) - grid.node(s)));
            }
        }
        out.push_back(judged("O2", "martingale problem, max error in Y, Z, Diag[Z]", err, 0.05));
    }
    {
        const double a = 0.5;
        const TimeGrid grid = make_grid(0.0, 1.0, 64);
        const PathEnsemble ens = simulate_paths(grid, 1, 1, seed);
        RegressionBasis basis;
        basis.degree = 0;
        const EbsvieSolution sol = solve_ebsvie(volterra_problem(a), ens, basis);
        double err = 0.0;
        for (std::size_t t = 0; t <= grid.steps(); ++t) {
            for (std::size_t s = t; s <= grid.steps(); ++s) {
                err = std::max(err, std::abs(sol.y.at(t, 0, s) - volterra_closed_form(a, grid.node(s), 1.0)));
            }
        }
        out.push_back(judged("O3", "deterministic Volterra, max error in Y", err, 1e-3));
    }
    {
        const double a = 0.5;
        const TimeGrid grid = make_grid(0.0, 1.0, 64);
        const PathEnsemble ens = simulate_paths(grid, 1, 1, seed);
        RegressionBasis basis;
        basis.degree = 0;
        const BsdeSolution sol = solve_bsde(exponential_bsde(a), ens, basis);
        double err = 0.0;
        for (std::size_t s = 0; s <= grid.steps(); ++s) {
            err = std::max({err, std::abs(sol.y.at(0, s) - std::exp(a * (1.0 - grid.node(s)))), std::abs(sol.z.at(0, s))});
        }
        out.push_back(judged("O4", "exponential BSDE, max error in y, z", err, 1e-3));
    }
    {
        double err = 0.0;
        const std::vector<double> eps{0.04, 0.02, 0.01};
        for (double e : eps) {
            err = std::max(err, std::abs(counterexample_average(2.0, e) - 2.0 * std::pow(e, -0.5)));
        }
        const std::vector<double> ts{0.0};
        const PropertyDReport rep =
            property_d_rate([](double, double e) { return counterexample_integral(2.0, e); }, ts, eps, 1.0);
        OracleResult r = judged("O5", "diagonal counterexample, averages and failure flag", err, 1e-9);
        r.passed = r.passed && rep.any_failure();
        out.push_back(r);
    }
    {
        const ControlProblem pr = control_toy();
        const TimeGrid grid = make_grid(pr.t0, pr.horizon, 16);
        const PathEnsemble ens = simulate_paths(grid, 500, 1, seed);
        const ControlPolicy zero(ens.paths(), grid.size(), 1);
        const EquilibriumCheck check = check_equilibrium(pr, zero, ens, ControlOptions{});
        out.push_back(judged("O6", "control toy, violation measure of u = 0", check.violation_measure,
                             0.02 * (pr.horizon - pr.t0)));
    }
    return out;
}

}  // namespace ebsvie::oracles
