#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ebsvie/ebsvie.hpp"

namespace ebsvie {

/// Time-inconsistent recursive control problem with scalar Brownian motion and a finite control set.
/// Matrices are row-major; b_x(i, j) = db_i/dx_j and b_xx(i, j, k) = d^2 b_i / dx_j dx_k.
/// The gradient and Hessian of f are taken in (x, y, z), so they have n + 2 entries per axis.
struct ControlProblem {
    using Field = std::function<void(double s, double u, std::span<const double> x, std::span<double> out)>;
    using Running = std::function<double(double t, double s, double u, std::span<const double> x, double y, double z)>;
    using RunningVec = std::function<void(double t, double s, double u, std::span<const double> x, double y,
                                          double z, std::span<double> out)>;
    using Terminal = std::function<double(double t, std::span<const double> x)>;
    using TerminalVec = std::function<void(double t, std::span<const double> x, std::span<double> out)>;

    std::size_t n = 1;
    double t0 = 0.0;
    double horizon = 1.0;
    std::vector<double> controls;

    Field b, b_x, b_xx;
    Field sigma, sigma_x, sigma_xx;
    Running f, f_t;
    RunningVec f_grad, f_grad_t, f_hess;
    Terminal h, h_t;
    TerminalVec h_x, h_xt, h_xx;
    std::function<void(std::size_t path, std::span<double> out)> initial_state;
    double lipschitz = 1.0;

    void validate() const;
};

/// Largest relative error between the derivative callbacks and central differences.
double control_derivative_consistency(const ControlProblem& problem, std::size_t points = 20, double step = 1e-5,
                                      std::uint64_t seed = 19);

/// Control indices into ControlProblem::controls per (path, node).
class ControlPolicy {
public:
    ControlPolicy() = default;
    ControlPolicy(std::size_t paths, std::size_t nodes, std::size_t fill = 0)
        : paths_(paths), nodes_(nodes), index_(paths * nodes, fill) {}

    std::size_t paths() const noexcept { return paths_; }
    std::size_t nodes() const noexcept { return nodes_; }
    std::size_t& at(std::size_t path, std::size_t node) { return index_[path * nodes_ + node]; }
    std::size_t at(std::size_t path, std::size_t node) const { return index_[path * nodes_ + node]; }
    bool operator==(const ControlPolicy& other) const = default;

    /// Policy restricted to nodes >= from.
    ControlPolicy tail(std::size_t from) const;

private:
    std::size_t paths_ = 0;
    std::size_t nodes_ = 0;
    std::vector<std::size_t> index_;
};

struct ControlOptions {
    SolverOptions solver = default_solver();
    int degree = 2;            ///< state-basis degree
    double tol_h_factor = 1e-2;
    double measure_tol = -1.0;  ///< negative: 0.02 (T - t0)
    int max_rounds = 10;
    double damping = 0.0;      ///< fraction of cells that keep the incumbent control
    bool auto_damping = true;
    std::size_t worst_cells = 10;

    static SolverOptions default_solver();
    double measure_tolerance(double span) const { return measure_tol >= 0.0 ? measure_tol : 0.02 * span; }
};

struct WorstCell {
    std::size_t node = 0;
    std::size_t path = 0;
    std::size_t control = 0;
    double gap = 0.0;  ///< H(v) - H(u_hat), negative on violations
};

struct EquilibriumBundle {
    AdaptedField x_hat;
    AdaptedField y_hat;
    BiTemporalField z_hat;
    AdaptedField diag_z;
    BiTemporalField p;
    BiTemporalField q;
    AdaptedField diag_q;
    BiTemporalField P;
    BiTemporalField Q;
    std::vector<double> h_values;  ///< [node][path][control] for nodes 0..N-1
    std::size_t controls = 0;
    double tol_h = 0.0;
    double violation_measure = 0.0;
    std::vector<WorstCell> worst_cells;
    SolveReport cost_report;
    SolveReport first_order_report;
    SolveReport second_order_report;
    double dz_fd_gap = 0.0;  ///< max |dZ/dt - central difference of Z| over interior t-nodes
    double dq_fd_gap = 0.0;

    double h_value(std::size_t node, std::size_t path, std::size_t v) const {
        return h_values[(node * x_hat.paths() + path) * controls + v];
    }
};

AdaptedField solve_state_sde(const ControlProblem& problem, const ControlPolicy& policy, const PathEnsemble& ensemble);

struct CostSolution {
    EbsvieSolution cost;
    AdaptedField diag_z;
    double dz_fd_gap = 0.0;
};

/// Type-I cost BSVIE along (x, policy) plus Diag[Z] through the derivative equation.
CostSolution solve_cost_bsvie(const ControlProblem& problem, const ControlPolicy& policy, const AdaptedField& x,
                              const RegressionCache& cache, const ControlOptions& options, bool with_diag = true);

/// Builds the full bundle: state, cost, both adjoints, H on every cell, violation measure.
EquilibriumBundle build_bundle(const ControlProblem& problem, const ControlPolicy& policy,
                               const PathEnsemble& ensemble, const ControlOptions& options);

/// H(s_node, path, v) from a bundle whose adjoints are filled in.
double eval_h_function(const ControlProblem& problem, const ControlPolicy& policy, const EquilibriumBundle& bundle,
                       std::size_t node, std::size_t path, std::size_t v);

struct EquilibriumCheck {
    double violation_measure = 0.0;
    double tol_h = 0.0;
    std::vector<WorstCell> worst_cells;
};

EquilibriumCheck check_equilibrium(const ControlProblem& problem, const ControlPolicy& policy,
                                   const PathEnsemble& ensemble, const ControlOptions& options);

struct SearchResult {
    ControlPolicy policy;
    std::vector<double> history;  ///< violation measure of every policy evaluated
    int rounds = 0;               ///< best-response updates applied
    bool converged = false;
    bool oscillation = false;
    bool damping_used = false;
};

SearchResult search_equilibrium(const ControlProblem& problem, const ControlPolicy& initial,
                                const PathEnsemble& ensemble, const ControlOptions& options);

/// Problem on [node(from), T] started from x_hat at that node, path by path.
ControlProblem restrict_problem(const ControlProblem& problem, const AdaptedField& x_hat, std::size_t from);

struct VariationalReport {
    std::vector<double> eps;
    std::vector<double> x1;         ///< E sup |X1|^2
    std::vector<double> x2;         ///< E sup |X2|^2
    std::vector<double> remainder;  ///< E sup |X^eps - X_hat - X1 - X2|^2
    std::vector<double> residual;   ///< E[|R^eps|^2]^{1/2}
    std::vector<double> cost_gap;   ///< E[J^eps - J_hat]
    std::vector<double> h_integral; ///< E[E_tau int (H(v) - H(u_hat))]
    double x1_slope = 0.0;
    double x2_slope = 0.0;
    double remainder_slope = 0.0;
    double residual_slope = 0.0;
    std::vector<std::string> warnings;
};

VariationalReport variational_rates(const ControlProblem& problem, const ControlPolicy& policy,
                                    const PathEnsemble& ensemble, const ControlOptions& options,
                                    std::size_t tau_node, std::size_t v, std::span<const std::size_t> eps_steps);

}  // namespace ebsvie
