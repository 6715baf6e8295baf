#include "ebsvie/reference.hpp"

#include <cmath>
#include <stdexcept>

namespace ebsvie::reference {

namespace {

Eigen::MatrixXd features(const PathEnsemble& ens, const RegressionBasis& basis, std::size_t node) {
    const std::size_t vars = basis.kind == BasisKind::brownian ? ens.dim() : basis.state->dim();
    const auto exps = monomial_exponents(vars, basis.degree);
    Eigen::MatrixXd phi(static_cast<Eigen::Index>(ens.paths()), static_cast<Eigen::Index>(exps.size()));
    std::vector<double> v(vars);
    for (std::size_t p = 0; p < ens.paths(); ++p) {
        for (std::size_t c = 0; c < vars; ++c) {
            v[c] = basis.kind == BasisKind::brownian ? ens.brownian(p, node, c) : basis.state->at(p, node, c);
        }
        for (std::size_t f = 0; f < exps.size(); ++f) {
            double term = 1.0;
            for (std::size_t c = 0; c < vars; ++c) {
                for (int e = 0; e < exps[f][c]; ++e) {
                    term *= v[c];
                }
            }
            phi(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(f)) = term;
        }
    }
    return phi;
}

/// y and z on one path-major block: y[(p * width + s - first) * m + k].
struct Block {
    std::size_t first = 0;
    std::size_t width = 0;
    std::vector<double> y;
    std::vector<double> z;
    std::size_t deficient = 0;
};

using Gen = std::function<void(std::size_t s, std::size_t p, const double* y, const double* z, double* g)>;
using Term = std::function<void(std::size_t p, double* out)>;

Block sweep(const PathEnsemble& ens, const RegressionBasis& basis, std::size_t first, std::size_t m,
            const Term& terminal, const Gen& gen, bool depends_on_y, const SchemeOptions& scheme) {
    const std::size_t n = ens.steps();
    const std::size_t d = ens.dim();
    const std::size_t paths = ens.paths();
    const double dt = ens.grid().dt();
    Block b;
    b.first = first;
    b.width = n + 1 - first;
    b.y.assign(paths * b.width * m, 0.0);
    b.z.assign(paths * b.width * m * d, 0.0);
    auto yat = [&](std::size_t p, std::size_t s) { return b.y.data() + (p * b.width + s - first) * m; };
    auto zat = [&](std::size_t p, std::size_t s) { return b.z.data() + (p * b.width + s - first) * m * d; };
    for (std::size_t p = 0; p < paths; ++p) {
        terminal(p, yat(p, n));
    }
    std::vector<double> g_next(paths * m, 0.0);
    std::vector<double> g_cur(paths * m, 0.0);
    std::vector<double> yv(m), gv(m);
    for (std::size_t step = n; step-- > first;) {
        const double theta = step + 1 == n ? 1.0 : scheme.theta;
        const Eigen::MatrixXd phi = features(ens, basis, step);
        const Eigen::Index f = phi.cols();
        Eigen::MatrixXd design(phi.rows(), f * static_cast<Eigen::Index>(1 + d));
        design.leftCols(f) = phi;
        for (std::size_t c = 0; c < d; ++c) {
            for (std::size_t p = 0; p < paths; ++p) {
                design.block(static_cast<Eigen::Index>(p), f * static_cast<Eigen::Index>(1 + c), 1, f) =
                    phi.row(static_cast<Eigen::Index>(p)) * ens.increment(p, step, c);
            }
        }
        Eigen::MatrixXd target(static_cast<Eigen::Index>(paths), static_cast<Eigen::Index>(m));
        for (std::size_t p = 0; p < paths; ++p) {
            for (std::size_t k = 0; k < m; ++k) {
                const double explicit_part = gen ? (1.0 - theta) * dt * g_next[p * m + k] : 0.0;
                target(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(k)) = yat(p, step + 1)[k] + explicit_part;
            }
        }
        Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(design);
        cod.setThreshold(1e-10);
        cod.compute(design);
        if (cod.rank() < design.cols()) {
            ++b.deficient;
        }
        const Eigen::MatrixXd coef = cod.solve(target);
        const Eigen::MatrixXd yhat = phi * coef.topRows(f);
        for (std::size_t c = 0; c < d; ++c) {
            const Eigen::MatrixXd zc = phi * coef.middleRows(f * static_cast<Eigen::Index>(1 + c), f);
            for (std::size_t p = 0; p < paths; ++p) {
                for (std::size_t k = 0; k < m; ++k) {
                    zat(p, step)[k * d + c] = zc(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(k));
                }
            }
        }
        const int passes = gen && theta > 0.0 && depends_on_y ? 1 + scheme.inner_corrections : 1;
        for (std::size_t p = 0; p < paths; ++p) {
            for (std::size_t k = 0; k < m; ++k) {
                yv[k] = yhat(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(k));
            }
            if (gen) {
                for (int pass = 0; pass < passes; ++pass) {
                    gen(step, p, yv.data(), zat(p, step), gv.data());
                    for (std::size_t k = 0; k < m; ++k) {
                        yv[k] = yhat(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(k)) + theta * dt * gv[k];
                    }
                }
                for (std::size_t k = 0; k < m; ++k) {
                    g_cur[p * m + k] = gv[k];
                }
            }
            for (std::size_t k = 0; k < m; ++k) {
                if (!std::isfinite(yv[k])) {
                    throw NumericalError("non-finite value in reference sweep", step, p);
                }
                yat(p, step)[k] = yv[k];
            }
        }
        std::swap(g_next, g_cur);
    }
    // z at the terminal node copies the last step
    for (std::size_t p = 0; p < paths && first < n; ++p) {
        for (std::size_t k = 0; k < m * d; ++k) {
            zat(p, n)[k] = zat(p, n - 1)[k];
        }
    }
    return b;
}

GeneratorPoint point(const PathEnsemble& ens, std::size_t t, std::size_t s, std::size_t p) {
    return {ens.grid().node(t), ens.grid().node(s), t, s, p, &ens};
}

Block ebsvie_slice(const EbsvieSpec& spec, const PathEnsemble& ens, const RegressionBasis& basis,
                   const SchemeOptions& scheme, const AdaptedField& eta, std::size_t t, std::size_t first,
                   double shift) {
    const std::size_t n = ens.steps();
    const std::size_t m = spec.m;
    const std::size_t md = spec.m * spec.d;
    Term terminal = [&](std::size_t p, double* out) {
        spec.free_term(point(ens, t, n, p), {out, m});
        for (std::size_t k = 0; k < m; ++k) {
            out[k] += shift;
        }
    };
    Gen gen;
    if (spec.generator) {
        gen = [&](std::size_t s, std::size_t p, const double* y, const double* z, double* g) {
            spec.generator(point(ens, t, s, p), eta.cell(p, s), {y, m}, {z, md}, {g, m});
        };
    }
    return sweep(ens, basis, first, m, terminal, gen, spec.depends_on_y, scheme);
}

}  // namespace

BsdeSolution solve_bsde(const BsdeSpec& spec, const PathEnsemble& ensemble, const RegressionBasis& basis,
                        const SchemeOptions& scheme) {
    basis.validate(ensemble);
    scheme.validate();
    if (spec.d != ensemble.dim() || !spec.terminal) {
        throw std::invalid_argument("BSDE spec does not match the ensemble");
    }
    const std::size_t n = ensemble.steps();
    const std::size_t m = spec.m;
    const std::size_t md = spec.m * spec.d;
    Term terminal = [&](std::size_t p, double* out) { spec.terminal(point(ensemble, 0, n, p), {out, m}); };
    Gen gen;
    if (spec.generator) {
        gen = [&](std::size_t s, std::size_t p, const double* y, const double* z, double* g) {
            spec.generator(point(ensemble, 0, s, p), {y, m}, {z, md}, {g, m});
        };
    }
    const Block b = sweep(ensemble, basis, 0, m, terminal, gen, spec.depends_on_y, scheme);
    BsdeSolution out{AdaptedField(ensemble.grid(), ensemble.paths(), m),
                     AdaptedField(ensemble.grid(), ensemble.paths(), md), b.deficient};
    std::copy(b.y.begin(), b.y.end(), out.y.raw().begin());
    std::copy(b.z.begin(), b.z.end(), out.z.raw().begin());
    return out;
}

EbsvieSolution solve_ebsvie(const EbsvieSpec& spec, const PathEnsemble& ensemble, const RegressionBasis& basis,
                            const SolverOptions& options) {
    basis.validate(ensemble);
    options.validate();
    if (spec.d != ensemble.dim() || !spec.free_term) {
        throw std::invalid_argument("EBSVIE spec does not match the ensemble");
    }
    const TimeGrid& grid = ensemble.grid();
    const std::size_t paths = ensemble.paths();
    const std::size_t m = spec.m;
    const std::size_t md = spec.m * spec.d;
    EbsvieSolution sol{BiTemporalField(grid, paths, m, options.domain), BiTemporalField(grid, paths, md, options.domain),
                       AdaptedField(grid, paths, m), {}};
    SolveReport& report = sol.report;

    double beta = options.norm.beta;
    if (options.auto_beta) {
        beta = 1.0;
        if (spec.generator && spec.lipschitz > 0.0) {
            const AdaptedField zero(grid, paths, m);
            const Block a = ebsvie_slice(spec, ensemble, basis, options.scheme, zero, 0, 0, 0.0);
            const Block b = ebsvie_slice(spec, ensemble, basis, options.scheme, zero, 0, 0, 1.0);
            double acc = 0.0;
            for (std::size_t p = 0; p < paths; ++p) {
                double sup = 0.0;
                double zint = 0.0;
                for (std::size_t s = 0; s < grid.size(); ++s) {
                    double dy = 0.0;
                    for (std::size_t k = 0; k < m; ++k) {
                        const double v = a.y[(p * a.width + s) * m + k] - b.y[(p * a.width + s) * m + k];
                        dy += v * v;
                    }
                    sup = std::max(sup, dy);
                    if (s < grid.steps()) {
                        for (std::size_t k = 0; k < md; ++k) {
                            const double v = a.z[(p * a.width + s) * md + k] - b.z[(p * a.width + s) * md + k];
                            zint += v * v * grid.dt();
                        }
                    }
                }
                acc += sup + zint;
            }
            beta = std::max(1.0, 4.0 * std::sqrt(acc / static_cast<double>(paths)) * spec.lipschitz);
        }
    }
    report.beta_used = beta;
    const BetaNorm norm{beta, options.norm.p};

    std::vector<SliceMoments> moments(grid.size());
    std::vector<double> dy, dz;
    for (int k = 1; k <= options.max_iter; ++k) {
        const AdaptedField eta = sol.y.diagonal();
        report.deficient_nodes = 0;
        for (std::size_t t = 0; t < grid.size(); ++t) {
            const std::size_t first = sol.y.s_begin(t);
            const Block b = ebsvie_slice(spec, ensemble, basis, options.scheme, eta, t, first, 0.0);
            report.deficient_nodes = std::max(report.deficient_nodes, b.deficient);
            dy.assign(b.y.size(), 0.0);
            dz.assign(b.z.size(), 0.0);
            for (std::size_t p = 0; p < paths; ++p) {
                for (std::size_t s = first; s < grid.size(); ++s) {
                    auto yc = sol.y.cell(t, p, s);
                    auto zc = sol.z.cell(t, p, s);
                    const std::size_t row = p * b.width + s - first;
                    for (std::size_t c = 0; c < m; ++c) {
                        dy[row * m + c] = b.y[row * m + c] - yc[c];
                        yc[c] = b.y[row * m + c];
                    }
                    for (std::size_t c = 0; c < md; ++c) {
                        dz[row * md + c] = b.z[row * md + c] - zc[c];
                        zc[c] = b.z[row * md + c];
                    }
                }
            }
            moments[t] = slice_moments(dy, dz, paths, first, t, grid, m, md, norm.p);
        }
        const double delta = combine_moments(moments, grid, norm);
        if (!report.deltas.empty()) {
            report.contraction_ratios.push_back(delta / report.deltas.back());
        }
        report.deltas.push_back(delta);
        report.picard_iterations = k;
        report.final_delta = delta;
        if (delta <= options.tol) {
            report.converged = true;
            break;
        }
    }
    sol.eta = sol.y.diagonal();
    return sol;
}

}  // namespace ebsvie::reference
