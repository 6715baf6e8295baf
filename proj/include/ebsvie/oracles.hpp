#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "ebsvie/control.hpp"
#include "ebsvie/ebsvie.hpp"

namespace ebsvie::oracles {

/// O1: psi = 0, g = 0.
EbsvieSpec zero_problem(std::size_t m = 1, std::size_t d = 1);

/// O2: psi(t) = t W(T), g = 0. Y(t,s) = t W(s), Z = t, Diag[Z](s) = s, dY/dt = W(s), dZ/dt = 1.
EbsvieSpec martingale_problem(const PathEnsemble& ensemble);

/// O3: psi = 1, g = a eta. eta(t) = e^{a(T-t)}, Y(t,s) = e^{a(T-s)} on s >= t, Z = 0.
EbsvieSpec volterra_problem(double a);
double volterra_closed_form(double a, double s, double horizon);

/// O4: psi = 1, g = a y. y(s) = e^{a(T-s)}, z = 0.
EbsvieSpec exponential_problem(double a);
BsdeSpec exponential_bsde(double a);

/// t-independent data with a nonzero generator: psi = cos W(T), g = a y + b z.
EbsvieSpec stationary_problem(const PathEnsemble& ensemble, double a, double b);
BsdeSpec stationary_bsde(const PathEnsemble& ensemble, double a, double b);

/// O5: Z1(t,s) = (s-t)^{-1/r} for s > t, else 0. Never produced by a solver.
double counterexample_field(double r, double t, double s);
/// int_t^{t+eps} Z1(t,s) ds from the exact antiderivative.
double counterexample_integral(double r, double eps);
/// (1/eps) int_t^{t+eps} Z1(t,s) ds = r/(r-1) eps^{-1/r}.
double counterexample_average(double r, double eps);

/// O6: b = u, sigma = 1, f = u^2, h = 0 on [0, 1] with U = {-1, 0, 1}. The equilibrium is u = 0 and p = q = P = 0.
ControlProblem control_toy();

/// b = u, sigma = 0, f = u^2, h = 0, U = {0, 1}. A spike of u = 1 over [tau, tau + eps) costs exactly eps.
ControlProblem spike_cost_toy();

/// b = u + c sin x, sigma = u, f = e^{-lambda (s - t)} u^2 / 2 + kappa y, h = (1 + t) x^2 / 2, x0 = 0, U = {-1, 0, 1}.
/// Along u = 0 the state stays at 0, p = q = 0 and P is deterministic.
ControlProblem volatility_toy(double c = 0.5, double kappa = 0.1, double lambda = 1.0);

struct OracleResult {
    std::string id;
    std::string description;
    bool passed = false;
    double error = 0.0;
    double tolerance = 0.0;
};

/// Runs O1 to O6 against their closed forms at desk scale.
std::vector<OracleResult> oracle_suite(std::uint64_t seed = 7);

}  // namespace ebsvie::oracles
