#include "ebsvie/bsde.hpp"

#include <algorithm>
#include <exception>
#include <limits>
#include <stdexcept>

#include <omp.h>

namespace ebsvie {

void SchemeOptions::validate() const {
    if (!(theta >= 0.0 && theta <= 1.0)) {
        throw std::invalid_argument("scheme theta must lie in [0, 1]");
    }
    if (inner_corrections < 0) {
        throw std::invalid_argument("inner_corrections must be nonnegative");
    }
}

std::size_t worker_count() { return static_cast<std::size_t>(omp_get_max_threads()); }

void parallel_for(std::size_t count, const std::function<void(std::size_t, std::size_t)>& f) {
    std::exception_ptr error;
    std::size_t error_index = std::numeric_limits<std::size_t>::max();
    const auto n = static_cast<std::ptrdiff_t>(count);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        try {
            f(static_cast<std::size_t>(i), static_cast<std::size_t>(omp_get_thread_num()));
        } catch (...) {
#pragma omp critical(ebsvie_parallel_for_error)
            {
                if (static_cast<std::size_t>(i) < error_index) {
                    error_index = static_cast<std::size_t>(i);
                    error = std::current_exception();
                }
            }
        }
    }
    if (error) {
        std::rethrow_exception(error);
    }
}

namespace {

void check_dims(const BsdeSpec& spec, const PathEnsemble& ensemble) {
    if (spec.m == 0) {
        throw std::invalid_argument("BSDE value dimension must be positive");
    }
    if (spec.d != ensemble.dim()) {
        throw std::invalid_argument("BSDE Brownian dimension does not match the ensemble");
    }
    if (!spec.terminal) {
        throw std::invalid_argument("BSDE terminal callback is missing");
    }
}

GeneratorPoint point_at(const PathEnsemble& ens, std::size_t s_node, std::size_t path) {
    return {ens.grid().lo(), ens.grid().node(s_node), 0, s_node, path, &ens};
}

}  // namespace

BsdeSolution solve_bsde(const BsdeSpec& spec, const PathEnsemble& ensemble, const RegressionBasis& basis,
                        const SchemeOptions& scheme) {
    const RegressionCache cache(ensemble, basis);
    return solve_bsde(spec, cache, scheme);
}

BsdeSolution solve_bsde(const BsdeSpec& spec, const RegressionCache& cache, const SchemeOptions& scheme) {
    const PathEnsemble& ens = cache.ensemble();
    check_dims(spec, ens);
    scheme.validate();
    const std::size_t n = ens.steps();
    BsdeSolution out{AdaptedField(ens.grid(), ens.paths(), spec.m), AdaptedField(ens.grid(), ens.paths(), spec.m * spec.d),
                     cache.deficient_nodes()};
    for (std::size_t p = 0; p < ens.paths(); ++p) {
        spec.terminal(point_at(ens, n, p), out.y.cell(p, n));
    }
    auto gen = [&](std::size_t s, std::size_t p, const double* y, const double* z, double* g) {
        spec.generator(point_at(ens, s, p), {y, spec.m}, {z, spec.m * spec.d}, {g, spec.m});
    };
    SweepBuffers buf;
    backward_sweep(cache, 0, spec.m, gen, static_cast<bool>(spec.generator), spec.depends_on_y, scheme, out.y.raw(),
                   out.z.raw(), buf);
    return out;
}

StabilityProbe bsde_stability_probe(const BsdeSpec& spec1, const BsdeSpec& spec2, const PathEnsemble& ensemble,
                                    const RegressionBasis& basis, const SchemeOptions& scheme) {
    if (spec1.m != spec2.m || spec1.d != spec2.d) {
        throw std::invalid_argument("stability probe needs specs of equal dimensions");
    }
    const RegressionCache cache(ensemble, basis);
    const BsdeSolution a = solve_bsde(spec1, cache, scheme);
    const BsdeSolution b = solve_bsde(spec2, cache, scheme);
    const TimeGrid& grid = ensemble.grid();
    const std::size_t n = grid.steps();
    const std::size_t m = spec1.m;
    const std::size_t md = spec1.m * spec1.d;
    const double dt = grid.dt();

    double sol = 0.0;
    double data = 0.0;
    std::vector<double> psi1(m), psi2(m), g1(m), g2(m);
    for (std::size_t p = 0; p < ensemble.paths(); ++p) {
        double sup = 0.0;
        double zint = 0.0;
        for (std::size_t s = 0; s <= n; ++s) {
            double dy = 0.0;
            for (std::size_t k = 0; k < m; ++k) {
                const double v = a.y.at(p, s, k) - b.y.at(p, s, k);
                dy += v * v;
            }
            sup = std::max(sup, dy);
            if (s < n) {
                for (std::size_t k = 0; k < md; ++k) {
                    const double v = a.z.at(p, s, k) - b.z.at(p, s, k);
                    zint += v * v * dt;
                }
            }
        }
        sol += sup + zint;

        spec1.terminal(point_at(ensemble, n, p), psi1);
        spec2.terminal(point_at(ensemble, n, p), psi2);
        double dpsi = 0.0;
        for (std::size_t k = 0; k < m; ++k) {
            dpsi += (psi1[k] - psi2[k]) * (psi1[k] - psi2[k]);
        }
        double gint = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
            std::fill(g1.begin(), g1.end(), 0.0);
            std::fill(g2.begin(), g2.end(), 0.0);
            if (spec1.generator) {
                spec1.generator(point_at(ensemble, s, p), a.y.cell(p, s), a.z.cell(p, s), g1);
            }
            if (spec2.generator) {
                spec2.generator(point_at(ensemble, s, p), a.y.cell(p, s), a.z.cell(p, s), g2);
            }
            double dg = 0.0;
            for (std::size_t k = 0; k < m; ++k) {
                dg += (g1[k] - g2[k]) * (g1[k] - g2[k]);
            }
            gint += std::sqrt(dg) * dt;
        }
        data += dpsi + gint * gint;
    }
    const auto paths = static_cast<double>(ensemble.paths());
    StabilityProbe out;
    out.solution_diff = std::sqrt(sol / paths);
    out.data_diff = std::sqrt(data / paths);
    if (out.solution_diff == 0.0) {
        out.ratio = 0.0;
    } else if (out.data_diff == 0.0) {
        out.ratio = std::numeric_limits<double>::infinity();
    } else {
        out.ratio = out.solution_diff / out.data_diff;
    }
    return out;
}

}  // namespace ebsvie
