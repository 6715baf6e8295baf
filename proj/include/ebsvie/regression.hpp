#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Dense>

#include "ebsvie/fields.hpp"
#include "ebsvie/grid.hpp"

namespace ebsvie {

enum class BasisKind {
    brownian,  ///< monomials in W(s)
    state,     ///< monomials in a supplied adapted state
};

/// Feature map for the conditional expectations E_s[.].
/// Degree 0 gives the plain ensemble mean.
struct RegressionBasis {
    BasisKind kind = BasisKind::brownian;
    int degree = 2;
    const AdaptedField* state = nullptr;  ///< required for BasisKind::state, must share the ensemble grid

    void validate(const PathEnsemble& ensemble) const;
};

/// Exponent vectors of all monomials of total degree <= degree in `vars` variables,
/// constant first, then by increasing degree.
std::vector<std::vector<int>> monomial_exponents(std::size_t vars, int degree);

/// Column-pivoted QR of one design matrix, truncated to its numerical rank.
struct Projector {
    Eigen::MatrixXd q;           ///< thin orthonormal factor, paths x rank
    Eigen::MatrixXd r;           ///< leading upper-triangular block, rank x rank
    std::vector<Eigen::Index> kept;  ///< design columns carried by the basic solution
    Eigen::Index cols = 0;
    bool deficient = false;

    /// Basic least-squares coefficients for every column of target (cols x target.cols()).
    Eigen::MatrixXd coefficients(const Eigen::MatrixXd& target) const;
};

Projector make_projector(const Eigen::MatrixXd& design);

/// Per-node design matrices and factorizations shared by every solve on one ensemble.
///
/// The joint design at step i is [phi_i, phi_i * dW_i^1, ..., phi_i * dW_i^d]; regressing
/// a target on it yields E_i[target] = a.phi_i and E_i[target dW^c]/dt = b_c.phi_i at once.
class RegressionCache {
public:
    struct Needs {
        bool joint = true;
        bool plain = false;
    };

    RegressionCache(const PathEnsemble& ensemble, const RegressionBasis& basis);
    RegressionCache(const PathEnsemble& ensemble, const RegressionBasis& basis, Needs needs);

    const PathEnsemble& ensemble() const noexcept { return *ensemble_; }
    std::size_t features() const noexcept { return features_; }

    /// target: paths x m at node i+1 (already F_{i+1}-measurable); fills yhat (paths x m)
    /// and z (paths x m*d, column k*d + c for component k, coordinate c).
    void joint(std::size_t step, const Eigen::MatrixXd& target, Eigen::MatrixXd& yhat, Eigen::MatrixXd& z) const;

    /// Regression of target on phi_node; fills fitted (paths x target.cols()).
    void project(std::size_t node, const Eigen::MatrixXd& target, Eigen::MatrixXd& fitted) const;

    /// Number of nodes whose design lost rank.
    std::size_t deficient_nodes() const;

private:
    void build_phi(std::size_t node, Eigen::MatrixXd& phi) const;

    const PathEnsemble* ensemble_;
    RegressionBasis basis_;
    std::vector<std::vector<int>> exponents_;
    std::size_t features_ = 0;
    std::vector<Eigen::MatrixXd> phi_;
    std::vector<Projector> joint_;
    std::vector<Projector> plain_;
};

}  // namespace ebsvie
