#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "ebsvie/errors.hpp"
#include "ebsvie/fields.hpp"
#include "ebsvie/grid.hpp"
#include "ebsvie/regression.hpp"

namespace ebsvie {

/// Where a coefficient callback is evaluated. For plain BSDEs t = s_lo and t_node = 0.
struct GeneratorPoint {
    double t = 0.0;
    double s = 0.0;
    std::size_t t_node = 0;
    std::size_t s_node = 0;
    std::size_t path = 0;
    const PathEnsemble* ensemble = nullptr;
};

struct BsdeSpec {
    std::size_t m = 1;
    std::size_t d = 1;
    /// psi for one path; point.s_node is the terminal node.
    std::function<void(const GeneratorPoint&, std::span<double>)> terminal;
    /// g(s, y, z); z holds m*d entries, component k coordinate c at k*d + c. Empty means g = 0.
    std::function<void(const GeneratorPoint&, std::span<const double> y, std::span<const double> z,
                       std::span<double> out)>
        generator;
    double lipschitz = 0.0;
    bool depends_on_y = true;
};

/// theta = 1 is implicit Euler in the generator, 1/2 the trapezoidal rule.
struct SchemeOptions {
    double theta = 0.5;
    int inner_corrections = 2;

    void validate() const;
};

struct BsdeSolution {
    AdaptedField y;
    AdaptedField z;
    std::size_t deficient_nodes = 0;
};

BsdeSolution solve_bsde(const BsdeSpec& spec, const PathEnsemble& ensemble, const RegressionBasis& basis,
                        const SchemeOptions& scheme = {});
BsdeSolution solve_bsde(const BsdeSpec& spec, const RegressionCache& cache, const SchemeOptions& scheme = {});

/// Solution-difference norm over data-difference norm for two specs on one ensemble.
struct StabilityProbe {
    double solution_diff = 0.0;
    double data_diff = 0.0;
    double ratio = 0.0;
};

StabilityProbe bsde_stability_probe(const BsdeSpec& spec1, const BsdeSpec& spec2, const PathEnsemble& ensemble,
                                    const RegressionBasis& basis, const SchemeOptions& scheme = {});

/// Scratch matrices reused across sweeps by one worker.
struct SweepBuffers {
    Eigen::MatrixXd target;
    Eigen::MatrixXd yhat;
    Eigen::MatrixXd z;
    Eigen::MatrixXd g_next;
    Eigen::MatrixXd g;
    Eigen::MatrixXd ycur;
};

/// Backward sweep on nodes [first, N] of the cache's grid.
///
/// y: [path][s - first][m] with the terminal row at s = N already filled.
/// z: [path][s - first][m*d]; z at node N is copied from node N-1.
/// gen(s_node, path, y, z, out) evaluates the generator; ignored when has_gen is false.
template <class Gen>
void backward_sweep(const RegressionCache& cache, std::size_t first, std::size_t m, Gen&& gen, bool has_gen,
                    bool depends_on_y, const SchemeOptions& scheme, std::span<double> y, std::span<double> z,
                    SweepBuffers& buf) {
    const PathEnsemble& ens = cache.ensemble();
    const std::size_t n = ens.steps();
    const std::size_t d = ens.dim();
    const std::size_t paths = ens.paths();
    const std::size_t width = n + 1 - first;
    const std::size_t md = m * d;
    const double dt = ens.grid().dt();
    const auto rows = static_cast<Eigen::Index>(paths);
    const auto cols = static_cast<Eigen::Index>(m);

    auto yrow = [&](std::size_t p, std::size_t s) { return y.data() + (p * width + (s - first)) * m; };
    auto zrow = [&](std::size_t p, std::size_t s) { return z.data() + (p * width + (s - first)) * md; };

    buf.target.resize(rows, cols);
    buf.g.resize(rows, cols);
    buf.g_next.setZero(rows, cols);
    std::vector<double> yv(m);
    std::vector<double> zv(md);
    std::vector<double> gv(m);

    for (std::size_t step = n; step-- > first;) {
        // z at node N is unknown at the first step, so that step is fully implicit
        const double theta = step + 1 == n ? 1.0 : scheme.theta;
        const double explicit_weight = has_gen ? (1.0 - theta) * dt : 0.0;
        for (std::size_t p = 0; p < paths; ++p) {
            const double* yn = yrow(p, step + 1);
            for (std::size_t k = 0; k < m; ++k) {
                buf.target(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(k)) =
                    yn[k] + explicit_weight * buf.g_next(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(k));
            }
        }
        cache.joint(step, buf.target, buf.yhat, buf.z);
        for (std::size_t p = 0; p < paths; ++p) {
            double* zo = zrow(p, step);
            for (std::size_t k = 0; k < md; ++k) {
                zo[k] = buf.z(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(k));
            }
        }
        if (!has_gen) {
            for (std::size_t p = 0; p < paths; ++p) {
                double* yo = yrow(p, step);
                for (std::size_t k = 0; k < m; ++k) {
                    yo[k] = buf.yhat(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(k));
                    if (!std::isfinite(yo[k])) {
                        throw NumericalError("non-finite value in backward sweep", step, p);
                    }
                }
            }
        } else {
            // with theta = 0 the single pass evaluates g at yhat and leaves y = yhat
            const int passes = theta > 0.0 && depends_on_y ? 1 + scheme.inner_corrections : 1;
            for (std::size_t p = 0; p < paths; ++p) {
                const auto pi = static_cast<Eigen::Index>(p);
                const double* zo = zrow(p, step);
                for (std::size_t k = 0; k < md; ++k) {
                    zv[k] = zo[k];
                }
                for (std::size_t k = 0; k < m; ++k) {
                    yv[k] = buf.yhat(pi, static_cast<Eigen::Index>(k));
                }
                for (int pass = 0; pass < passes; ++pass) {
                    gen(step, p, yv.data(), zv.data(), gv.data());
                    for (std::size_t k = 0; k < m; ++k) {
                        yv[k] = buf.yhat(pi, static_cast<Eigen::Index>(k)) + theta * dt * gv[k];
                    }
                }
                double* yo = yrow(p, step);
                for (std::size_t k = 0; k < m; ++k) {
                    if (!std::isfinite(yv[k])) {
                        throw NumericalError("non-finite value in backward sweep", step, p);
                    }
                    yo[k] = yv[k];
                    buf.g(pi, static_cast<Eigen::Index>(k)) = gv[k];
                }
            }
            buf.g_next.swap(buf.g);
            buf.g.resize(rows, cols);
        }
    }
    if (first < n) {
        for (std::size_t p = 0; p < paths; ++p) {
            const double* src = zrow(p, n - 1);
            double* dst = zrow(p, n);
            for (std::size_t k = 0; k < md; ++k) {
                dst[k] = src[k];
            }
        }
    }
}

/// Runs f(i, worker) for i in [0, count) over OpenMP threads, worker in [0, worker_count()).
/// The exception from the lowest failing index is rethrown after the loop.
void parallel_for(std::size_t count, const std::function<void(std::size_t, std::size_t)>& f);
std::size_t worker_count();

}  // namespace ebsvie
