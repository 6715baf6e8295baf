#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ebsvie/bsde.hpp"
#include "ebsvie/fields.hpp"
#include "ebsvie/regression.hpp"

namespace ebsvie {

/// Y(t,s) = psi(t) + int_s^T g(t, r, Y(r,r), Y(t,r), Z(t,r)) dr - int_s^T Z(t,r) dW(r).
struct EbsvieSpec {
    using FreeTerm = std::function<void(const GeneratorPoint&, std::span<double>)>;
    /// g(t, s, eta, y, z); z layout as in BsdeSpec.
    using Generator = std::function<void(const GeneratorPoint&, std::span<const double> eta,
                                         std::span<const double> y, std::span<const double> z, std::span<double> out)>;

    std::size_t m = 1;
    std::size_t d = 1;
    FreeTerm free_term;
    Generator generator;  ///< empty means g = 0
    double lipschitz = 0.0;
    bool depends_on_y = true;

    FreeTerm free_term_dt;
    Generator generator_dt;
    Generator generator_dy;  ///< m x m row-major, entry (i, j) = dg_i/dy_j
    Generator generator_dz;  ///< m x (m*d), entry (i, j*d + c) = dg_i/dz_{j,c}

    bool has_derivatives() const {
        return static_cast<bool>(free_term_dt) && (!generator || (generator_dt && generator_dy && generator_dz));
    }
};

struct SolverOptions {
    BetaNorm norm{1.0, 2.0};
    bool auto_beta = true;
    double tol = 1e-8;
    int max_iter = 50;
    SchemeOptions scheme;
    Domain domain = Domain::full;

    void validate() const;
};

struct SolveReport {
    int picard_iterations = 0;
    double beta_used = 0.0;
    std::vector<double> deltas;              ///< beta-norm of Y^k - Y^{k-1}
    std::vector<double> contraction_ratios;  ///< deltas[k] / deltas[k-1]
    bool converged = false;
    double final_delta = 0.0;
    std::size_t deficient_nodes = 0;
};

struct EbsvieSolution {
    BiTemporalField y;
    BiTemporalField z;
    AdaptedField eta;
    SolveReport report;
};

EbsvieSolution solve_ebsvie(const EbsvieSpec& spec, const PathEnsemble& ensemble, const RegressionBasis& basis,
                            const SolverOptions& options = {});
EbsvieSolution solve_ebsvie(const EbsvieSpec& spec, const RegressionCache& cache, const SolverOptions& options = {});

/// Pilot estimate of the BSDE stability constant on the first t-slice and the resulting beta.
double beta_heuristic(const EbsvieSpec& spec, const RegressionCache& cache, const SchemeOptions& scheme);

struct Type1Solution {
    AdaptedField eta;
    BiTemporalField zeta;
    SolveReport report;
};

/// Type-I BSVIE: the generator must ignore its y argument, which is spot-checked at 10 points.
Type1Solution solve_type1_bsvie(const EbsvieSpec& spec, const PathEnsemble& ensemble, const RegressionBasis& basis,
                                const SolverOptions& options = {});
Type1Solution solve_type1_bsvie(const EbsvieSpec& spec, const RegressionCache& cache,
                                const SolverOptions& options = {});

struct DerivativeSolution {
    BiTemporalField dy;
    BiTemporalField dz;
};

/// Family of linear BSDEs for (dY/dt, dZ/dt) with coefficients frozen along base.
DerivativeSolution solve_derivative_ebsvie(const EbsvieSpec& spec, const EbsvieSolution& base,
                                           const RegressionCache& cache, const SchemeOptions& scheme = {});
DerivativeSolution solve_derivative_ebsvie(const EbsvieSpec& spec, const EbsvieSolution& base,
                                           const PathEnsemble& ensemble, const RegressionBasis& basis,
                                           const SchemeOptions& scheme = {});

/// Diag[Z](s_j) = Z(S, s_j) + trapezoid over t-nodes 0..j of dZ(tau, s_j).
AdaptedField compute_diag(const BiTemporalField& z, const BiTemporalField& dz);

struct PropertyDRow {
    std::size_t t_node = 0;
    std::vector<double> eps;
    std::vector<double> integrals;  ///< E int_t^{t+eps} |Z(t,s) - Diag(s)| ds
    std::vector<double> averages;   ///< integrals / eps
    double slope = 0.0;             ///< log-log slope of integrals against eps
    bool exact_zero = false;
    bool failure = false;           ///< slope <= 1, so the averages do not vanish
    std::vector<std::string> warnings;
};

struct PropertyDReport {
    std::vector<PropertyDRow> rows;
    bool any_failure() const;
};

/// Grid version: eps_steps are multiples of dt; integrals by trapezoid in s and the ensemble mean.
PropertyDReport property_d_rate(const BiTemporalField& z, const AdaptedField& diag,
                                std::span<const std::size_t> t_nodes, std::span<const std::size_t> eps_steps);

/// Analytic version: integral(t, eps) returns E int_t^{t+eps} |Z(t,s) - Diag(s)| ds exactly.
PropertyDReport property_d_rate(const std::function<double(double, double)>& integral, std::span<const double> ts,
                                std::span<const double> eps_set, double horizon);

/// Least-squares slope of log(y) against log(x).
double loglog_slope(std::span<const double> x, std::span<const double> y);

StabilityProbe ebsvie_stability_probe(const EbsvieSpec& spec1, const EbsvieSpec& spec2, const PathEnsemble& ensemble,
                                      const RegressionBasis& basis, const SolverOptions& options = {});

/// Central-difference checks of the derivative callbacks at `points` pseudo-random evaluation points.
/// Returns the largest relative error found.
double derivative_consistency(const EbsvieSpec& spec, const PathEnsemble& ensemble, std::size_t points = 20,
                              double step = 1e-5, std::uint64_t seed = 11);

}  // namespace ebsvie
