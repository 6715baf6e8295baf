#include "ebsvie/regression.hpp"

#include <stdexcept>

namespace ebsvie {

void RegressionBasis::validate(const PathEnsemble& ensemble) const {
    if (degree < 0) {
        throw std::invalid_argument("regression degree must be nonnegative");
    }
    if (kind == BasisKind::state) {
        if (state == nullptr) {
            throw std::invalid_argument("state basis requires a state field");
        }
        if (!(state->grid() == ensemble.grid()) || state->paths() != ensemble.paths()) {
            throw std::invalid_argument("state field does not match the ensemble");
        }
    }
}

std::vector<std::vector<int>> monomial_exponents(std::size_t vars, int degree) {
    std::vector<std::vector<int>> out;
    for (int total = 0; total <= degree; ++total) {
        // all compositions of `total` into `vars` parts, lexicographically descending
        std::vector<int> cur(vars, 0);
        auto rec = [&](auto&& self, std::size_t k, int left) -> void {
            if (k + 1 == vars) {
                cur[k] = left;
                out.push_back(cur);
                return;
            }
            for (int v = left; v >= 0; --v) {
                cur[k] = v;
                self(self, k + 1, left - v);
            }
        };
        if (vars == 0) {
            if (total == 0) {
                out.emplace_back();
            }
            continue;
        }
        rec(rec, 0, total);
    }
    return out;
}

Eigen::MatrixXd Projector::coefficients(const Eigen::MatrixXd& target) const {
    Eigen::MatrixXd coef = Eigen::MatrixXd::Zero(cols, target.cols());
    if (kept.empty()) {
        return coef;
    }
    const Eigen::MatrixXd c = r.triangularView<Eigen::Upper>().solve(q.transpose() * target);
    for (std::size_t k = 0; k < kept.size(); ++k) {
        coef.row(kept[k]) = c.row(static_cast<Eigen::Index>(k));
    }
    return coef;
}

Projector make_projector(const Eigen::MatrixXd& design) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design.rows(), design.cols());
    qr.setThreshold(1e-10);
    qr.compute(design);
    const Eigen::Index rank = qr.rank();
    Projector p;
    p.cols = design.cols();
    p.deficient = rank < std::min(design.rows(), design.cols());
    p.q = qr.householderQ() * Eigen::MatrixXd::Identity(design.rows(), rank);
    p.r = qr.matrixR().topLeftCorner(rank, rank).triangularView<Eigen::Upper>();
    const auto& perm = qr.colsPermutation().indices();
    for (Eigen::Index k = 0; k < rank; ++k) {
        p.kept.push_back(perm(k));
    }
    return p;
}

RegressionCache::RegressionCache(const PathEnsemble& ensemble, const RegressionBasis& basis)
    : RegressionCache(ensemble, basis, Needs{}) {}

RegressionCache::RegressionCache(const PathEnsemble& ensemble, const RegressionBasis& basis, Needs needs)
    : ensemble_(&ensemble), basis_(basis) {
    basis.validate(ensemble);
    const std::size_t vars = basis.kind == BasisKind::state ? basis.state->dim() : ensemble.dim();
    exponents_ = monomial_exponents(vars, basis.degree);
    features_ = exponents_.size();

    const std::size_t nodes = ensemble.grid().size();
    const std::size_t steps = ensemble.steps();
    const std::size_t d = ensemble.dim();
    const auto paths = static_cast<Eigen::Index>(ensemble.paths());
    const auto k = static_cast<Eigen::Index>(features_);

    phi_.resize(nodes);
    if (needs.joint) {
        joint_.resize(steps);
    }
    if (needs.plain) {
        plain_.resize(nodes);
    }
    const auto n_nodes = static_cast<std::ptrdiff_t>(nodes);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t jj = 0; jj < n_nodes; ++jj) {
        const auto j = static_cast<std::size_t>(jj);
        build_phi(j, phi_[j]);
        if (needs.plain) {
            plain_[j] = make_projector(phi_[j]);
        }
        if (needs.joint && j < steps) {
            Eigen::MatrixXd design(paths, k * static_cast<Eigen::Index>(1 + d));
            design.leftCols(k) = phi_[j];
            for (std::size_t c = 0; c < d; ++c) {
                auto block = design.middleCols(k * static_cast<Eigen::Index>(1 + c), k);
                for (Eigen::Index m = 0; m < paths; ++m) {
                    block.row(m) = phi_[j].row(m) * ensemble.increment(static_cast<std::size_t>(m), j, c);
                }
            }
            joint_[j] = make_projector(design);
        }
    }
}

void RegressionCache::build_phi(std::size_t node, Eigen::MatrixXd& phi) const {
    const auto paths = ensemble_->paths();
    const std::size_t vars = exponents_.empty() ? 0 : exponents_.front().size();
    phi.resize(static_cast<Eigen::Index>(paths), static_cast<Eigen::Index>(features_));
    std::vector<double> x(vars);
    for (std::size_t m = 0; m < paths; ++m) {
        for (std::size_t v = 0; v < vars; ++v) {
            x[v] = basis_.kind == BasisKind::state ? basis_.state->at(m, node, v) : ensemble_->brownian(m, node, v);
        }
        for (std::size_t f = 0; f < features_; ++f) {
            double value = 1.0;
            for (std::size_t v = 0; v < vars; ++v) {
                for (int e = 0; e < exponents_[f][v]; ++e) {
                    value *= x[v];
                }
            }
            phi(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(f)) = value;
        }
    }
}

void RegressionCache::joint(std::size_t step, const Eigen::MatrixXd& target, Eigen::MatrixXd& yhat,
                            Eigen::MatrixXd& z) const {
    if (step >= joint_.size()) {
        throw std::logic_error("joint regression not available at this step");
    }
    const std::size_t d = ensemble_->dim();
    const auto k = static_cast<Eigen::Index>(features_);
    const auto m = target.cols();
    const Eigen::MatrixXd coef = joint_[step].coefficients(target);
    const Eigen::MatrixXd& phi = phi_[step];
    yhat.noalias() = phi * coef.topRows(k);
    z.resize(target.rows(), m * static_cast<Eigen::Index>(d));
    for (std::size_t c = 0; c < d; ++c) {
        const Eigen::MatrixXd zc = phi * coef.middleRows(k * static_cast<Eigen::Index>(1 + c), k);
        for (Eigen::Index comp = 0; comp < m; ++comp) {
            z.col(comp * static_cast<Eigen::Index>(d) + static_cast<Eigen::Index>(c)) = zc.col(comp);
        }
    }
}

void RegressionCache::project(std::size_t node, const Eigen::MatrixXd& target, Eigen::MatrixXd& fitted) const {
    if (node >= plain_.size()) {
        throw std::logic_error("plain regression not available at this node");
    }
    fitted.noalias() = phi_[node] * plain_[node].coefficients(target);
}

std::size_t RegressionCache::deficient_nodes() const {
    std::size_t count = 0;
    for (const auto& p : joint_) {
        count += p.deficient ? 1 : 0;
    }
    for (const auto& p : plain_) {
        count += p.deficient ? 1 : 0;
    }
    return count;
}

}  // namespace ebsvie
