#include "ebsvie/ebsvie.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "ebsvie/philox.hpp"

namespace ebsvie {

void SolverOptions::validate() const {
    norm.validate();
    scheme.validate();
    if (!(tol > 0.0)) {
        throw std::invalid_argument("tolerance must be positive");
    }
    if (max_iter < 1) {
        throw std::invalid_argument("max_iter must be at least 1");
    }
}

namespace {

GeneratorPoint point_at(const PathEnsemble& ens, std::size_t t, std::size_t s, std::size_t path) {
    return {ens.grid().node(t), ens.grid().node(s), t, s, path, &ens};
}

void check_spec(const EbsvieSpec& spec, const PathEnsemble& ens) {
    if (spec.m == 0) {
        throw std::invalid_argument("EBSVIE value dimension must be positive");
    }
    if (spec.d != ens.dim()) {
        throw std::invalid_argument("EBSVIE Brownian dimension does not match the ensemble");
    }
    if (!spec.free_term) {
        throw std::invalid_argument("EBSVIE free term callback is missing");
    }
}

struct Workspace {
    SweepBuffers sweep;
    std::vector<double> y;
    std::vector<double> z;
};

/// Solves slice t with eta frozen into ws.y / ws.z, in the slice layout of `like`.
void solve_slice(const EbsvieSpec& spec, const RegressionCache& cache, const SchemeOptions& scheme,
                 const BiTemporalField& like, const AdaptedField& eta, std::size_t t, Workspace& ws,
                 double psi_shift = 0.0) {
    const PathEnsemble& ens = cache.ensemble();
    const std::size_t n = ens.steps();
    const std::size_t m = spec.m;
    const std::size_t md = spec.m * spec.d;
    const std::size_t first = like.s_begin(t);
    const std::size_t width = n + 1 - first;
    ws.y.assign(ens.paths() * width * m, 0.0);
    ws.z.assign(ens.paths() * width * md, 0.0);
    for (std::size_t p = 0; p < ens.paths(); ++p) {
        std::span<double> out(ws.y.data() + (p * width + (n - first)) * m, m);
        spec.free_term(point_at(ens, t, n, p), out);
        for (double& v : out) {
            v += psi_shift;
        }
    }
    auto gen = [&](std::size_t s, std::size_t p, const double* y, const double* z, double* g) {
        spec.generator(point_at(ens, t, s, p), eta.cell(p, s), {y, m}, {z, md}, {g, m});
    };
    backward_sweep(cache, first, m, gen, static_cast<bool>(spec.generator), spec.depends_on_y, scheme, ws.y, ws.z,
                   ws.sweep);
}

double slice_pair_norm(std::span<const double> y1, std::span<const double> y2, std::span<const double> z1,
                       std::span<const double> z2, std::size_t paths, std::size_t width, std::size_t m,
                       std::size_t md, const TimeGrid& grid) {
    const std::size_t n = grid.steps();
    const std::size_t first = n + 1 - width;
    double acc = 0.0;
    for (std::size_t p = 0; p < paths; ++p) {
        double sup = 0.0;
        double zint = 0.0;
        for (std::size_t k = 0; k < width; ++k) {
            double dy = 0.0;
            for (std::size_t c = 0; c < m; ++c) {
                const std::size_t i = (p * width + k) * m + c;
                dy += (y1[i] - y2[i]) * (y1[i] - y2[i]);
            }
            sup = std::max(sup, dy);
            if (first + k < n) {
                for (std::size_t c = 0; c < md; ++c) {
                    const std::size_t i = (p * width + k) * md + c;
                    zint += (z1[i] - z2[i]) * (z1[i] - z2[i]) * grid.dt();
                }
            }
        }
        acc += sup + zint;
    }
    return std::sqrt(acc / static_cast<double>(paths));
}

}  // namespace

double beta_heuristic(const EbsvieSpec& spec, const RegressionCache& cache, const SchemeOptions& scheme) {
    if (!(spec.lipschitz > 0.0) || !spec.generator) {
        return 1.0;
    }
    const PathEnsemble& ens = cache.ensemble();
    const AdaptedField eta(ens.grid(), ens.paths(), spec.m);
    // only the slice layout matters here, s_begin(0) = 0 for either domain
    BiTemporalField layout(ens.grid(), 0, spec.m);
    Workspace a;
    Workspace b;
    solve_slice(spec, cache, scheme, layout, eta, 0, a);
    solve_slice(spec, cache, scheme, layout, eta, 0, b, 1.0);
    const double c = slice_pair_norm(a.y, b.y, a.z, b.z, ens.paths(), ens.grid().size(), spec.m, spec.m * spec.d,
                                     ens.grid());
    return std::max(1.0, 4.0 * c * spec.lipschitz);
}

EbsvieSolution solve_ebsvie(const EbsvieSpec& spec, const PathEnsemble& ensemble, const RegressionBasis& basis,
                            const SolverOptions& options) {
    const RegressionCache cache(ensemble, basis);
    return solve_ebsvie(spec, cache, options);
}

EbsvieSolution solve_ebsvie(const EbsvieSpec& spec, const RegressionCache& cache, const SolverOptions& options) {
    const PathEnsemble& ens = cache.ensemble();
    check_spec(spec, ens);
    options.validate();
    const TimeGrid& grid = ens.grid();
    const std::size_t nodes = grid.size();
    const std::size_t paths = ens.paths();
    const std::size_t m = spec.m;
    const std::size_t md = spec.m * spec.d;

    EbsvieSolution sol{BiTemporalField(grid, paths, m, options.domain),
                       BiTemporalField(grid, paths, md, options.domain), AdaptedField(grid, paths, m), {}};
    SolveReport& report = sol.report;
    report.beta_used = options.auto_beta ? beta_heuristic(spec, cache, options.scheme) : options.norm.beta;
    report.deficient_nodes = cache.deficient_nodes();
    const BetaNorm norm{report.beta_used, options.norm.p};

    std::vector<Workspace> work(worker_count());
    std::vector<SliceMoments> moments(nodes);
    for (int k = 1; k <= options.max_iter; ++k) {
        const AdaptedField eta = sol.y.diagonal();
        parallel_for(nodes, [&](std::size_t t, std::size_t w) {
            Workspace& ws = work[w];
            solve_slice(spec, cache, options.scheme, sol.y, eta, t, ws);
            // the stored slice becomes the iterate difference, then takes the new values
            std::span<double> ys = sol.y.slice(t);
            std::span<double> zs = sol.z.slice(t);
            for (std::size_t i = 0; i < ys.size(); ++i) {
                ys[i] = ws.y[i] - ys[i];
            }
            for (std::size_t i = 0; i < zs.size(); ++i) {
                zs[i] = ws.z[i] - zs[i];
            }
            moments[t] = slice_moments(ys, zs, paths, sol.y.s_begin(t), t, grid, m, md, norm.p);
            std::copy(ws.y.begin(), ws.y.end(), ys.begin());
            std::copy(ws.z.begin(), ws.z.end(), zs.begin());
        });
        const double delta = combine_moments(moments, grid, norm);
        if (!std::isfinite(delta)) {
            throw NumericalError("non-finite Picard difference", 0, 0);
        }
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

namespace {

void check_y_independence(const EbsvieSpec& spec, const PathEnsemble& ens) {
    if (!spec.generator) {
        return;
    }
    const GaussianStream rng(0x7e57ULL, 0);
    const std::size_t nodes = ens.grid().size();
    const std::size_t m = spec.m;
    const std::size_t md = spec.m * spec.d;
    std::vector<double> eta(m), y(m), y2(m), z(md), g1(m), g2(m);
    std::uint64_t k = 0;
    for (int point = 0; point < 10; ++point) {
        const auto t = static_cast<std::size_t>(rng.uniform(k++) * static_cast<double>(nodes)) % nodes;
        const auto s = static_cast<std::size_t>(rng.uniform(k++) * static_cast<double>(nodes)) % nodes;
        const auto p = static_cast<std::size_t>(rng.uniform(k++) * static_cast<double>(ens.paths())) % ens.paths();
        for (std::size_t i = 0; i < m; ++i) {
            eta[i] = rng.normal(k++);
            y[i] = rng.normal(k++);
            y2[i] = y[i] + 1.0 + rng.normal(k++);
        }
        for (double& v : z) {
            v = rng.normal(k++);
        }
        const GeneratorPoint pt = point_at(ens, t, s, p);
        spec.generator(pt, eta, y, z, g1);
        spec.generator(pt, eta, y2, z, g2);
        if (g1 != g2) {
            throw std::invalid_argument("Type-I BSVIE generator depends on its y argument");
        }
    }
}

}  // namespace

Type1Solution solve_type1_bsvie(const EbsvieSpec& spec, const PathEnsemble& ensemble, const RegressionBasis& basis,
                                const SolverOptions& options) {
    const RegressionCache cache(ensemble, basis);
    return solve_type1_bsvie(spec, cache, options);
}

Type1Solution solve_type1_bsvie(const EbsvieSpec& spec, const RegressionCache& cache, const SolverOptions& options) {
    check_spec(spec, cache.ensemble());
    check_y_independence(spec, cache.ensemble());
    EbsvieSpec local = spec;
    local.depends_on_y = false;
    EbsvieSolution sol = solve_ebsvie(local, cache, options);
    return {std::move(sol.eta), std::move(sol.z), std::move(sol.report)};
}

DerivativeSolution solve_derivative_ebsvie(const EbsvieSpec& spec, const EbsvieSolution& base,
                                           const PathEnsemble& ensemble, const RegressionBasis& basis,
                                           const SchemeOptions& scheme) {
    const RegressionCache cache(ensemble, basis);
    return solve_derivative_ebsvie(spec, base, cache, scheme);
}

DerivativeSolution solve_derivative_ebsvie(const EbsvieSpec& spec, const EbsvieSolution& base,
                                           const RegressionCache& cache, const SchemeOptions& scheme) {
    const PathEnsemble& ens = cache.ensemble();
    check_spec(spec, ens);
    scheme.validate();
    if (!spec.has_derivatives()) {
        throw std::invalid_argument("derivative EBSVIE needs the t-, y- and z-derivative callbacks");
    }
    if (!(base.y.grid() == ens.grid()) || base.y.paths() != ens.paths()) {
        throw std::invalid_argument("base solution does not match the ensemble");
    }
    const TimeGrid& grid = ens.grid();
    const std::size_t n = grid.steps();
    const std::size_t m = spec.m;
    const std::size_t d = spec.d;
    const std::size_t md = m * d;
    const Domain domain = base.y.domain();
    DerivativeSolution out{BiTemporalField(grid, ens.paths(), m, domain), BiTemporalField(grid, ens.paths(), md, domain)};
    const bool has_gen = static_cast<bool>(spec.generator);

    struct Local {
        SweepBuffers sweep;
        std::vector<double> gt, gy, gz;
    };
    std::vector<Local> work(worker_count());
    parallel_for(grid.size(), [&](std::size_t t, std::size_t w) {
        Local& ws = work[w];
        ws.gt.resize(m);
        ws.gy.resize(m * m);
        ws.gz.resize(m * md);
        const std::size_t first = out.dy.s_begin(t);
        for (std::size_t p = 0; p < ens.paths(); ++p) {
            spec.free_term_dt(point_at(ens, t, n, p), out.dy.cell(t, p, n));
        }
        // coefficients only depend on the cell, so the inner passes reuse them
        std::size_t last_s = static_cast<std::size_t>(-1);
        std::size_t last_p = 0;
        auto gen = [&](std::size_t s, std::size_t p, const double* y, const double* z, double* g) {
            if (s != last_s || p != last_p) {
                const GeneratorPoint pt = point_at(ens, t, s, p);
                const auto eta = base.eta.cell(p, s);
                const auto by = base.y.cell(t, p, s);
                const auto bz = base.z.cell(t, p, s);
                spec.generator_dt(pt, eta, by, bz, ws.gt);
                spec.generator_dy(pt, eta, by, bz, ws.gy);
                spec.generator_dz(pt, eta, by, bz, ws.gz);
                last_s = s;
                last_p = p;
            }
            for (std::size_t i = 0; i < m; ++i) {
                double acc = ws.gt[i];
                for (std::size_t j = 0; j < m; ++j) {
                    acc += ws.gy[i * m + j] * y[j];
                }
                for (std::size_t j = 0; j < md; ++j) {
                    acc += ws.gz[i * md + j] * z[j];
                }
                g[i] = acc;
            }
        };
        backward_sweep(cache, first, m, gen, has_gen, true, scheme, out.dy.slice(t), out.dz.slice(t), ws.sweep);
    });
    return out;
}

AdaptedField compute_diag(const BiTemporalField& z, const BiTemporalField& dz) {
    if (!(z.grid() == dz.grid()) || z.paths() != dz.paths() || z.dim() != dz.dim() || z.domain() != dz.domain()) {
        throw std::invalid_argument("compute_diag: field shapes do not match");
    }
    const TimeGrid& grid = z.grid();
    const double dt = grid.dt();
    AdaptedField out(grid, z.paths(), z.dim());
    for (std::size_t p = 0; p < z.paths(); ++p) {
        for (std::size_t j = 0; j < grid.size(); ++j) {
            for (std::size_t c = 0; c < z.dim(); ++c) {
                double acc = 0.0;
                if (j > 0) {
                    acc = 0.5 * (dz.at(0, p, j, c) + dz.at(j, p, j, c));
                    for (std::size_t tau = 1; tau < j; ++tau) {
                        acc += dz.at(tau, p, j, c);
                    }
                }
                out.at(p, j, c) = z.at(0, p, j, c) + dt * acc;
            }
        }
    }
    return out;
}

double loglog_slope(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw std::invalid_argument("log-log slope needs at least two matching points");
    }
    double mx = 0.0;
    double my = 0.0;
    const auto n = static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += std::log(x[i]);
        my += std::log(y[i]);
    }
    mx /= n;
    my /= n;
    double sxy = 0.0;
    double sxx = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = std::log(x[i]) - mx;
        sxy += dx * (std::log(y[i]) - my);
        sxx += dx * dx;
    }
    return sxy / sxx;
}

bool PropertyDReport::any_failure() const {
    return std::ranges::any_of(rows, [](const PropertyDRow& r) { return r.failure; });
}

namespace {

void finish_row(PropertyDRow& row) {
    const double largest = row.integrals.empty() ? 0.0 : *std::ranges::max_element(row.integrals);
    if (row.integrals.empty() || largest <= 1e-14) {
        row.exact_zero = !row.integrals.empty();
        return;
    }
    if (row.eps.size() < 2) {
        row.warnings.emplace_back("fewer than two usable eps values");
        return;
    }
    if (std::ranges::any_of(row.integrals, [](double v) { return !(v > 0.0); })) {
        row.warnings.emplace_back("zero integral at some eps, slope not defined");
        return;
    }
    row.slope = loglog_slope(row.eps, row.integrals);
    row.failure = row.slope <= 1.0;
}

}  // namespace

PropertyDReport property_d_rate(const BiTemporalField& z, const AdaptedField& diag,
                                std::span<const std::size_t> t_nodes, std::span<const std::size_t> eps_steps) {
    if (!(z.grid() == diag.grid()) || z.paths() != diag.paths() || z.dim() != diag.dim()) {
        throw std::invalid_argument("property_d_rate: field shapes do not match");
    }
    const TimeGrid& grid = z.grid();
    const std::size_t n = grid.steps();
    const double dt = grid.dt();
    PropertyDReport report;
    for (std::size_t t : t_nodes) {
        PropertyDRow row;
        row.t_node = t;
        for (std::size_t k : eps_steps) {
            if (k == 0 || t + k > n) {
                std::ostringstream msg;
                msg << "eps = " << k << " steps exceeds the horizon at t-node " << t << ", skipped";
                row.warnings.push_back(msg.str());
                continue;
            }
            double mean = 0.0;
            for (std::size_t p = 0; p < z.paths(); ++p) {
                double integral = 0.0;
                for (std::size_t s = t; s <= t + k; ++s) {
                    double dist = 0.0;
                    for (std::size_t c = 0; c < z.dim(); ++c) {
                        const double v = z.at(t, p, s, c) - diag.at(p, s, c);
                        dist += v * v;
                    }
                    const double w = (s == t || s == t + k) ? 0.5 : 1.0;
                    integral += w * std::sqrt(dist);
                }
                mean += integral * dt;
            }
            mean /= static_cast<double>(z.paths());
            const double eps = static_cast<double>(k) * dt;
            row.eps.push_back(eps);
            row.integrals.push_back(mean);
            row.averages.push_back(mean / eps);
        }
        finish_row(row);
        report.rows.push_back(std::move(row));
    }
    return report;
}

PropertyDReport property_d_rate(const std::function<double(double, double)>& integral, std::span<const double> ts,
                                std::span<const double> eps_set, double horizon) {
    PropertyDReport report;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        PropertyDRow row;
        row.t_node = i;
        for (double eps : eps_set) {
            if (!(eps > 0.0) || ts[i] + eps > horizon) {
                row.warnings.emplace_back("eps beyond the horizon, skipped");
                continue;
            }
            const double value = integral(ts[i], eps);
            row.eps.push_back(eps);
            row.integrals.push_back(value);
            row.averages.push_back(value / eps);
        }
        finish_row(row);
        report.rows.push_back(std::move(row));
    }
    return report;
}

StabilityProbe ebsvie_stability_probe(const EbsvieSpec& spec1, const EbsvieSpec& spec2, const PathEnsemble& ensemble,
                                      const RegressionBasis& basis, const SolverOptions& options) {
    if (spec1.m != spec2.m || spec1.d != spec2.d) {
        throw std::invalid_argument("stability probe needs specs of equal dimensions");
    }
    const RegressionCache cache(ensemble, basis);
    const EbsvieSolution a = solve_ebsvie(spec1, cache, options);
    const EbsvieSolution b = solve_ebsvie(spec2, cache, options);
    const TimeGrid& grid = ensemble.grid();
    const std::size_t n = grid.steps();
    const std::size_t m = spec1.m;
    const std::size_t md = m * spec1.d;
    const double dt = grid.dt();

    double sol = 0.0;
    double data = 0.0;
    std::vector<double> psi1(m), psi2(m), g1(m), g2(m);
    for (std::size_t t = 0; t < grid.size(); ++t) {
        const std::size_t width = a.y.slice_width(t);
        sol = std::max(sol, slice_pair_norm(a.y.slice(t), b.y.slice(t), a.z.slice(t), b.z.slice(t), ensemble.paths(),
                                            width, m, md, grid));
        double acc = 0.0;
        for (std::size_t p = 0; p < ensemble.paths(); ++p) {
            const GeneratorPoint end = point_at(ensemble, t, n, p);
            spec1.free_term(end, psi1);
            spec2.free_term(end, psi2);
            double dpsi = 0.0;
            for (std::size_t k = 0; k < m; ++k) {
                dpsi += (psi1[k] - psi2[k]) * (psi1[k] - psi2[k]);
            }
            double gint = 0.0;
            for (std::size_t r = a.y.s_begin(t); r < n; ++r) {
                std::fill(g1.begin(), g1.end(), 0.0);
                std::fill(g2.begin(), g2.end(), 0.0);
                const GeneratorPoint pt = point_at(ensemble, t, r, p);
                if (spec1.generator) {
                    spec1.generator(pt, a.eta.cell(p, r), a.y.cell(t, p, r), a.z.cell(t, p, r), g1);
                }
                if (spec2.generator) {
                    spec2.generator(pt, a.eta.cell(p, r), a.y.cell(t, p, r), a.z.cell(t, p, r), g2);
                }
                double dg = 0.0;
                for (std::size_t k = 0; k < m; ++k) {
                    dg += (g1[k] - g2[k]) * (g1[k] - g2[k]);
                }
                gint += std::sqrt(dg) * dt;
            }
            acc += dpsi + gint * gint;
        }
        data = std::max(data, std::sqrt(acc / static_cast<double>(ensemble.paths())));
    }
    StabilityProbe out{sol, data, 0.0};
    if (sol == 0.0) {
        out.ratio = 0.0;
    } else if (data == 0.0) {
        out.ratio = std::numeric_limits<double>::infinity();
    } else {
        out.ratio = sol / data;
    }
    return out;
}

double derivative_consistency(const EbsvieSpec& spec, const PathEnsemble& ensemble, std::size_t points, double step,
                              std::uint64_t seed) {
    if (!spec.has_derivatives()) {
        throw std::invalid_argument("derivative callbacks are missing");
    }
    const TimeGrid& grid = ensemble.grid();
    const std::size_t m = spec.m;
    const std::size_t md = m * spec.d;
    const GaussianStream rng(seed, 0);
    std::uint64_t k = 0;
    double worst = 0.0;
    auto rel = [](double fd, double exact) { return std::abs(fd - exact) / std::max(1.0, std::abs(exact)); };
    std::vector<double> eta(m), y(m), z(md), a(m), b(m), gt(m), gy(m * m), gz(m * md);
    for (std::size_t i = 0; i < points; ++i) {
        const auto s_node = static_cast<std::size_t>(rng.uniform(k++) * static_cast<double>(grid.size())) % grid.size();
        const auto path = static_cast<std::size_t>(rng.uniform(k++) * static_cast<double>(ensemble.paths())) %
                          ensemble.paths();
        const double t = grid.lo() + step + rng.uniform(k++) * (grid.hi() - grid.lo() - 2.0 * step);
        GeneratorPoint pt{t, grid.node(s_node), 0, s_node, path, &ensemble};
        for (std::size_t c = 0; c < m; ++c) {
            eta[c] = rng.normal(k++);
            y[c] = rng.normal(k++);
        }
        for (double& v : z) {
            v = rng.normal(k++);
        }

        GeneratorPoint lo = pt;
        GeneratorPoint hi = pt;
        lo.t -= step;
        hi.t += step;
        GeneratorPoint end = pt;
        end.s = grid.hi();
        end.s_node = grid.steps();
        GeneratorPoint end_lo = end;
        GeneratorPoint end_hi = end;
        end_lo.t -= step;
        end_hi.t += step;
        spec.free_term(end_lo, a);
        spec.free_term(end_hi, b);
        spec.free_term_dt(end, gt);
        for (std::size_t c = 0; c < m; ++c) {
            worst = std::max(worst, rel((b[c] - a[c]) / (2.0 * step), gt[c]));
        }
        if (!spec.generator) {
            continue;
        }
        spec.generator(lo, eta, y, z, a);
        spec.generator(hi, eta, y, z, b);
        spec.generator_dt(pt, eta, y, z, gt);
        for (std::size_t c = 0; c < m; ++c) {
            worst = std::max(worst, rel((b[c] - a[c]) / (2.0 * step), gt[c]));
        }
        spec.generator_dy(pt, eta, y, z, gy);
        for (std::size_t j = 0; j < m; ++j) {
            std::vector<double> yl = y;
            std::vector<double> yh = y;
            yl[j] -= step;
            yh[j] += step;
            spec.generator(pt, eta, yl, z, a);
            spec.generator(pt, eta, yh, z, b);
            for (std::size_t c = 0; c < m; ++c) {
                worst = std::max(worst, rel((b[c] - a[c]) / (2.0 * step), gy[c * m + j]));
            }
        }
        spec.generator_dz(pt, eta, y, z, gz);
        for (std::size_t j = 0; j < md; ++j) {
            std::vector<double> zl = z;
            std::vector<double> zh = z;
            zl[j] -= step;
            zh[j] += step;
            spec.generator(pt, eta, y, zl, a);
            spec.generator(pt, eta, y, zh, b);
            for (std::size_t c = 0; c < m; ++c) {
                worst = std::max(worst, rel((b[c] - a[c]) / (2.0 * step), gz[c * md + j]));
            }
        }
    }
    return worst;
}

}  // namespace ebsvie
