#include "ebsvie/control.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "ebsvie/philox.hpp"

namespace ebsvie {

void ControlProblem::validate() const {
    if (n == 0) {
        throw std::invalid_argument("state dimension must be positive");
    }
    if (!(t0 < horizon)) {
        throw std::invalid_argument("control horizon requires t0 < T");
    }
    if (controls.empty()) {
        throw std::invalid_argument("control set is empty");
    }
    if (!b || !b_x || !b_xx || !sigma || !sigma_x || !sigma_xx) {
        throw std::invalid_argument("state coefficients or their x-derivatives are missing");
    }
    if (!f || !f_t || !f_grad || !f_grad_t || !f_hess) {
        throw std::invalid_argument("running cost or its derivatives are missing");
    }
    if (!h || !h_t || !h_x || !h_xt || !h_xx) {
        throw std::invalid_argument("terminal cost or its derivatives are missing");
    }
    if (!initial_state) {
        throw std::invalid_argument("initial state callback is missing");
    }
}

SolverOptions ControlOptions::default_solver() {
    SolverOptions s;
    s.tol = 1e-6;
    s.domain = Domain::upper;
    // left-endpoint generator matches the left-Riemann sums of piecewise-constant controls
    s.scheme.theta = 1.0;
    return s;
}

ControlPolicy ControlPolicy::tail(std::size_t from) const {
    if (from >= nodes_) {
        throw std::invalid_argument("policy tail beyond the last node");
    }
    ControlPolicy out(paths_, nodes_ - from);
    for (std::size_t p = 0; p < paths_; ++p) {
        for (std::size_t j = from; j < nodes_; ++j) {
            out.at(p, j - from) = at(p, j);
        }
    }
    return out;
}

double control_derivative_consistency(const ControlProblem& problem, std::size_t points, double step,
                                      std::uint64_t seed) {
    problem.validate();
    const std::size_t n = problem.n;
    const std::size_t k = n + 2;
    const GaussianStream rng(seed, 1);
    std::uint64_t c = 0;
    double worst = 0.0;
    auto rel = [](double fd, double exact) { return std::abs(fd - exact) / std::max(1.0, std::abs(exact)); };
    std::vector<double> x(n), xl(n), xh(n), lo(n), hi(n), jac(n * n), hess(n * n * n);
    std::vector<double> g(k), gl(k), gh(k), fh(k * k), gt(k), hx(n), hxl(n), hxh(n), hxx(n * n), hxt(n);
    const double span = problem.horizon - problem.t0;
    for (std::size_t i = 0; i < points; ++i) {
        const double s = problem.t0 + step + rng.uniform(c++) * (span - 2.0 * step);
        const double t = problem.t0 + step + rng.uniform(c++) * (span - 2.0 * step);
        const auto ui = static_cast<std::size_t>(rng.uniform(c++) * static_cast<double>(problem.controls.size())) %
                        problem.controls.size();
        const double u = problem.controls[ui];
        for (double& v : x) {
            v = rng.normal(c++);
        }
        const double y = rng.normal(c++);
        const double z = rng.normal(c++);

        for (const auto* pair : {&problem.b, &problem.sigma}) {
            const auto& fn = *pair;
            const auto& fx = pair == &problem.b ? problem.b_x : problem.sigma_x;
            const auto& fxx = pair == &problem.b ? problem.b_xx : problem.sigma_xx;
            fx(s, u, x, jac);
            fxx(s, u, x, hess);
            for (std::size_t j = 0; j < n; ++j) {
                xl = x;
                xh = x;
                xl[j] -= step;
                xh[j] += step;
                fn(s, u, xl, lo);
                fn(s, u, xh, hi);
                for (std::size_t r = 0; r < n; ++r) {
                    worst = std::max(worst, rel((hi[r] - lo[r]) / (2.0 * step), jac[r * n + j]));
                }
                std::vector<double> jl(n * n), jh(n * n);
                fx(s, u, xl, jl);
                fx(s, u, xh, jh);
                for (std::size_t r = 0; r < n; ++r) {
                    for (std::size_t q = 0; q < n; ++q) {
                        worst = std::max(worst, rel((jh[r * n + q] - jl[r * n + q]) / (2.0 * step),
                                                    hess[(r * n + q) * n + j]));
                    }
                }
            }
        }

        // f in (x, y, z), its t-derivative and the t-derivative of the gradient
        problem.f_grad(t, s, u, x, y, z, g);
        problem.f_hess(t, s, u, x, y, z, fh);
        problem.f_grad_t(t, s, u, x, y, z, gt);
        auto shifted = [&](std::size_t a, double delta, std::span<double> out) {
            xl = x;
            double yy = y;
            double zz = z;
            if (a < n) {
                xl[a] += delta;
            } else if (a == n) {
                yy += delta;
            } else {
                zz += delta;
            }
            problem.f_grad(t, s, u, xl, yy, zz, out);
            return problem.f(t, s, u, xl, yy, zz);
        };
        for (std::size_t a = 0; a < k; ++a) {
            const double fl = shifted(a, -step, gl);
            const double fhv = shifted(a, step, gh);
            worst = std::max(worst, rel((fhv - fl) / (2.0 * step), g[a]));
            for (std::size_t b = 0; b < k; ++b) {
                worst = std::max(worst, rel((gh[b] - gl[b]) / (2.0 * step), fh[b * k + a]));
            }
        }
        worst = std::max(worst, rel((problem.f(t + step, s, u, x, y, z) - problem.f(t - step, s, u, x, y, z)) /
                                        (2.0 * step),
                                    problem.f_t(t, s, u, x, y, z)));
        problem.f_grad(t - step, s, u, x, y, z, gl);
        problem.f_grad(t + step, s, u, x, y, z, gh);
        for (std::size_t a = 0; a < k; ++a) {
            worst = std::max(worst, rel((gh[a] - gl[a]) / (2.0 * step), gt[a]));
        }

        problem.h_x(t, x, hx);
        problem.h_xx(t, x, hxx);
        problem.h_xt(t, x, hxt);
        worst = std::max(worst, rel((problem.h(t + step, x) - problem.h(t - step, x)) / (2.0 * step),
                                    problem.h_t(t, x)));
        problem.h_x(t - step, x, hxl);
        problem.h_x(t + step, x, hxh);
        for (std::size_t j = 0; j < n; ++j) {
            worst = std::max(worst, rel((hxh[j] - hxl[j]) / (2.0 * step), hxt[j]));
            xl = x;
            xh = x;
            xl[j] -= step;
            xh[j] += step;
            worst = std::max(worst, rel((problem.h(t, xh) - problem.h(t, xl)) / (2.0 * step), hx[j]));
            problem.h_x(t, xl, hxl);
            problem.h_x(t, xh, hxh);
            for (std::size_t r = 0; r < n; ++r) {
                worst = std::max(worst, rel((hxh[r] - hxl[r]) / (2.0 * step), hxx[r * n + j]));
            }
        }
    }
    return worst;
}

namespace {

void check_setup(const ControlProblem& problem, const ControlPolicy& policy, const PathEnsemble& ensemble) {
    problem.validate();
    if (ensemble.dim() != 1) {
        throw std::invalid_argument("control problems use a scalar Brownian motion");
    }
    const TimeGrid& grid = ensemble.grid();
    const double tol = 1e-12 * std::max(1.0, std::abs(problem.horizon));
    if (std::abs(grid.lo() - problem.t0) > tol || std::abs(grid.hi() - problem.horizon) > tol) {
        throw std::invalid_argument("ensemble grid does not span the control horizon");
    }
    if (policy.paths() != ensemble.paths() || policy.nodes() != grid.size()) {
        throw std::invalid_argument("policy shape does not match the ensemble");
    }
    for (std::size_t p = 0; p < policy.paths(); ++p) {
        for (std::size_t j = 0; j < policy.nodes(); ++j) {
            if (policy.at(p, j) >= problem.controls.size()) {
                throw std::invalid_argument("policy refers to a control outside the control set");
            }
        }
    }
}

double control_at(const ControlProblem& problem, const ControlPolicy& policy, std::size_t path, std::size_t node) {
    return problem.controls[policy.at(path, node)];
}

/// Per-worker scratch sized for one problem.
struct Scratch {
    explicit Scratch(std::size_t n)
        : a(n * n), b(n * n), grad(n + 2), grad_t(n + 2), hess((n + 2) * (n + 2)), bxx(n * n * n),
          sxx(n * n * n), w(n), c(n * n) {}
    std::vector<double> a, b, grad, grad_t, hess, bxx, sxx, w, c;

    // the Picard passes revisit one cell several times with only the iterate changing
    std::uint64_t key_spec = 0;
    std::size_t key_t = 0, key_s = 0, key_p = 0;
    bool hit(std::uint64_t spec, const GeneratorPoint& pt) {
        if (spec == key_spec && pt.t_node == key_t && pt.s_node == key_s && pt.path == key_p) {
            return true;
        }
        key_spec = spec;
        key_t = pt.t_node;
        key_s = pt.s_node;
        key_p = pt.path;
        return false;
    }
};

std::uint64_t next_spec_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

thread_local std::unique_ptr<Scratch> tls_scratch;

Scratch& scratch(std::size_t n) {
    if (!tls_scratch || tls_scratch->w.size() != n) {
        tls_scratch = std::make_unique<Scratch>(n);
    }
    return *tls_scratch;
}

EbsvieSpec cost_spec(const ControlProblem& problem, const ControlPolicy& policy, const AdaptedField& x) {
    const std::size_t n = problem.n;
    const std::size_t last = x.nodes() - 1;
    EbsvieSpec spec;
    spec.m = 1;
    spec.d = 1;
    spec.lipschitz = problem.lipschitz;
    spec.depends_on_y = false;
    spec.free_term = [&problem, &x, last](const GeneratorPoint& pt, std::span<double> out) {
        out[0] = problem.h(pt.t, x.cell(pt.path, last));
    };
    spec.free_term_dt = [&problem, &x, last](const GeneratorPoint& pt, std::span<double> out) {
        out[0] = problem.h_t(pt.t, x.cell(pt.path, last));
    };
    spec.generator = [&problem, &policy, &x](const GeneratorPoint& pt, std::span<const double> eta,
                                             std::span<const double>, std::span<const double> z,
                                             std::span<double> out) {
        const double u = control_at(problem, policy, pt.path, pt.s_node);
        out[0] = problem.f(pt.t, pt.s, u, x.cell(pt.path, pt.s_node), eta[0], z[0]);
    };
    spec.generator_dt = [&problem, &policy, &x](const GeneratorPoint& pt, std::span<const double> eta,
                                                std::span<const double>, std::span<const double> z,
                                                std::span<double> out) {
        const double u = control_at(problem, policy, pt.path, pt.s_node);
        out[0] = problem.f_t(pt.t, pt.s, u, x.cell(pt.path, pt.s_node), eta[0], z[0]);
    };
    spec.generator_dy = [](const GeneratorPoint&, std::span<const double>, std::span<const double>,
                           std::span<const double>, std::span<double> out) { out[0] = 0.0; };
    spec.generator_dz = [&problem, &policy, &x, n](const GeneratorPoint& pt, std::span<const double> eta,
                                                   std::span<const double>, std::span<const double> z,
                                                   std::span<double> out) {
        Scratch& sc = scratch(n);
        const double u = control_at(problem, policy, pt.path, pt.s_node);
        problem.f_grad(pt.t, pt.s, u, x.cell(pt.path, pt.s_node), eta[0], z[0], sc.grad);
        out[0] = sc.grad[n + 1];
    };
    return spec;
}

double fd_gap(const BiTemporalField& z, const BiTemporalField& dz) {
    const std::size_t n = z.grid().steps();
    const double dt = z.grid().dt();
    double gap = 0.0;
    for (std::size_t t = 1; t + 1 <= n; ++t) {
        for (std::size_t p = 0; p < z.paths(); ++p) {
            for (std::size_t s = t + 1; s <= n; ++s) {
                for (std::size_t c = 0; c < z.dim(); ++c) {
                    const double fd = (z.at(t + 1, p, s, c) - z.at(t - 1, p, s, c)) / (2.0 * dt);
                    gap = std::max(gap, std::abs(fd - dz.at(t, p, s, c)));
                }
            }
        }
    }
    return gap;
}

/// Coefficients of the adjoint equations read along the incumbent trajectory.
struct Along {
    const ControlProblem& problem;
    const ControlPolicy& policy;
    const AdaptedField& x;
    const AdaptedField& y_hat;
    const BiTemporalField& z_hat;

    double u(std::size_t path, std::size_t s) const { return control_at(problem, policy, path, s); }
    std::span<const double> xs(std::size_t path, std::size_t s) const { return x.cell(path, s); }
    /// f_x, f_y, f_z at (t, r) into out.
    void grad(const GeneratorPoint& pt, std::span<double> out) const {
        problem.f_grad(pt.t, pt.s, u(pt.path, pt.s_node), xs(pt.path, pt.s_node), y_hat.at(pt.path, pt.s_node),
                       z_hat.at(pt.t_node, pt.path, pt.s_node), out);
    }
    void hess(const GeneratorPoint& pt, std::span<double> out) const {
        problem.f_hess(pt.t, pt.s, u(pt.path, pt.s_node), xs(pt.path, pt.s_node), y_hat.at(pt.path, pt.s_node),
                       z_hat.at(pt.t_node, pt.path, pt.s_node), out);
    }
    void grad_t(const GeneratorPoint& pt, std::span<double> out) const {
        problem.f_grad_t(pt.t, pt.s, u(pt.path, pt.s_node), xs(pt.path, pt.s_node), y_hat.at(pt.path, pt.s_node),
                         z_hat.at(pt.t_node, pt.path, pt.s_node), out);
    }
};

EbsvieSpec first_order_spec(const Along& al, const BiTemporalField* dz_hat) {
    const ControlProblem& problem = al.problem;
    const std::size_t n = problem.n;
    const std::size_t last = al.x.nodes() - 1;
    EbsvieSpec spec;
    spec.m = n;
    spec.d = 1;
    spec.lipschitz = problem.lipschitz;
    spec.free_term = [&al, last](const GeneratorPoint& pt, std::span<double> out) {
        al.problem.h_x(pt.t, al.x.cell(pt.path, last), out);
    };
    spec.free_term_dt = [&al, last](const GeneratorPoint& pt, std::span<double> out) {
        al.problem.h_xt(pt.t, al.x.cell(pt.path, last), out);
    };
    spec.generator = [&al, n, id = next_spec_id()](const GeneratorPoint& pt, std::span<const double> eta,
                                                   std::span<const double> p, std::span<const double> q,
                                                   std::span<double> out) {
        Scratch& sc = scratch(n);
        if (!sc.hit(id, pt)) {
            const double u = al.u(pt.path, pt.s_node);
            const auto xs = al.xs(pt.path, pt.s_node);
            al.problem.b_x(pt.s, u, xs, sc.a);
            al.problem.sigma_x(pt.s, u, xs, sc.b);
            al.grad(pt, sc.grad);
        }
        const double fy = sc.grad[n];
        const double fz = sc.grad[n + 1];
        for (std::size_t i = 0; i < n; ++i) {
            double bxp = 0.0;
            double sxp = 0.0;
            double sxq = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                bxp += sc.a[j * n + i] * p[j];
                sxp += sc.b[j * n + i] * p[j];
                sxq += sc.b[j * n + i] * q[j];
            }
            out[i] = bxp + sxq + fz * (sxp + q[i]) + fy * eta[i] + sc.grad[i];
        }
    };
    spec.generator_dt = [&al, dz_hat, n](const GeneratorPoint& pt, std::span<const double> eta,
                                         std::span<const double> p, std::span<const double> q,
                                         std::span<double> out) {
        Scratch& sc = scratch(n);
        const double u = al.u(pt.path, pt.s_node);
        al.problem.sigma_x(pt.s, u, al.xs(pt.path, pt.s_node), sc.b);
        al.grad_t(pt, sc.grad_t);
        al.hess(pt, sc.hess);
        const double dz = dz_hat->at(pt.t_node, pt.path, pt.s_node);
        const std::size_t k = n + 2;
        // total t-derivative of f_a(t, r, ..., Z(t, r))
        for (std::size_t a = 0; a < k; ++a) {
            sc.grad_t[a] += sc.hess[a * k + (n + 1)] * dz;
        }
        for (std::size_t i = 0; i < n; ++i) {
            double sxp = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                sxp += sc.b[j * n + i] * p[j];
            }
            out[i] = sc.grad_t[n + 1] * (sxp + q[i]) + sc.grad_t[n] * eta[i] + sc.grad_t[i];
        }
    };
    spec.generator_dy = [&al, n](const GeneratorPoint& pt, std::span<const double>, std::span<const double>,
                                 std::span<const double>, std::span<double> out) {
        Scratch& sc = scratch(n);
        const double u = al.u(pt.path, pt.s_node);
        const auto xs = al.xs(pt.path, pt.s_node);
        al.problem.b_x(pt.s, u, xs, sc.a);
        al.problem.sigma_x(pt.s, u, xs, sc.b);
        al.grad(pt, sc.grad);
        const double fz = sc.grad[n + 1];
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                out[i * n + j] = sc.a[j * n + i] + fz * sc.b[j * n + i];
            }
        }
    };
    spec.generator_dz = [&al, n](const GeneratorPoint& pt, std::span<const double>, std::span<const double>,
                                 std::span<const double>, std::span<double> out) {
        Scratch& sc = scratch(n);
        const double u = al.u(pt.path, pt.s_node);
        al.problem.sigma_x(pt.s, u, al.xs(pt.path, pt.s_node), sc.b);
        al.grad(pt, sc.grad);
        const double fz = sc.grad[n + 1];
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                out[i * n + j] = sc.b[j * n + i] + (i == j ? fz : 0.0);
            }
        }
    };
    return spec;
}

EbsvieSpec second_order_spec(const Along& al, const BiTemporalField& p_field, const BiTemporalField& q_field) {
    const ControlProblem& problem = al.problem;
    const std::size_t n = problem.n;
    const std::size_t last = al.x.nodes() - 1;
    EbsvieSpec spec;
    spec.m = n * n;
    spec.d = 1;
    spec.lipschitz = problem.lipschitz;
    spec.free_term = [&al, last](const GeneratorPoint& pt, std::span<double> out) {
        al.problem.h_xx(pt.t, al.x.cell(pt.path, last), out);
    };
    spec.generator = [&al, &p_field, &q_field, n, id = next_spec_id()](
                         const GeneratorPoint& pt, std::span<const double> eta, std::span<const double> P,
                         std::span<const double> Q, std::span<double> out) {
        Scratch& sc = scratch(n);
        const std::size_t k = n + 2;
        if (!sc.hit(id, pt)) {
            const double u = al.u(pt.path, pt.s_node);
            const auto xs = al.xs(pt.path, pt.s_node);
            const auto p = p_field.cell(pt.t_node, pt.path, pt.s_node);
            const auto q = q_field.cell(pt.t_node, pt.path, pt.s_node);
            const auto prr = p_field.cell(pt.s_node, pt.path, pt.s_node);
            al.problem.b_x(pt.s, u, xs, sc.a);
            al.problem.sigma_x(pt.s, u, xs, sc.b);
            al.problem.b_xx(pt.s, u, xs, sc.bxx);
            al.problem.sigma_xx(pt.s, u, xs, sc.sxx);
            al.grad(pt, sc.grad);
            al.hess(pt, sc.hess);
            const double fz = sc.grad[n + 1];
            // w = sigma_x^T p + q
            for (std::size_t i = 0; i < n; ++i) {
                double acc = q[i];
                for (std::size_t j = 0; j < n; ++j) {
                    acc += sc.b[j * n + i] * p[j];
                }
                sc.w[i] = acc;
            }
            // iterate-free part: sum_l p_l b_xx^l + (f_z p_l + q_l) sigma_xx^l + [I, p(r,r), w] D^2 f [...]^T
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (std::size_t l = 0; l < n; ++l) {
                        acc += p[l] * sc.bxx[(l * n + i) * n + j] + (fz * p[l] + q[l]) * sc.sxx[(l * n + i) * n + j];
                    }
                    for (std::size_t a = 0; a < k; ++a) {
                        const double la = a < n ? (a == i ? 1.0 : 0.0) : (a == n ? prr[i] : sc.w[i]);
                        if (la == 0.0) {
                            continue;
                        }
                        for (std::size_t b = 0; b < k; ++b) {
                            const double lb = b < n ? (b == j ? 1.0 : 0.0) : (b == n ? prr[j] : sc.w[j]);
                            acc += la * sc.hess[a * k + b] * lb;
                        }
                    }
                    sc.c[i * n + j] = acc;
                }
            }
        }
        const double fy = sc.grad[n];
        const double fz = sc.grad[n + 1];
        auto bx = [&](std::size_t i, std::size_t j) { return sc.a[i * n + j]; };
        auto sx = [&](std::size_t i, std::size_t j) { return sc.b[i * n + j]; };
        auto at = [n](std::span<const double> m, std::size_t i, std::size_t j) { return m[i * n + j]; };
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double lin = 0.0;
                double sps = 0.0;
                double sxP = 0.0;
                double Psx = 0.0;
                for (std::size_t l = 0; l < n; ++l) {
                    lin += bx(l, i) * at(P, l, j) + at(P, i, l) * bx(l, j);
                    lin += sx(l, i) * at(Q, l, j) + at(Q, i, l) * sx(l, j);
                    sxP += sx(l, i) * at(P, l, j);
                    Psx += at(P, i, l) * sx(l, j);
                    for (std::size_t r = 0; r < n; ++r) {
                        sps += sx(l, i) * at(P, l, r) * sx(r, j);
                    }
                }
                out[i * n + j] =
                    lin + sps + fz * (sxP + Psx + at(Q, i, j)) + fy * eta[i * n + j] + sc.c[i * n + j];
            }
        }
    };
    return spec;
}

double median_abs(std::vector<double> values) {
    if (values.empty()) {
        return 0.0;
    }
    for (double& v : values) {
        v = std::abs(v);
    }
    const auto mid = values.begin() + static_cast<std::ptrdiff_t>(values.size() / 2);
    std::nth_element(values.begin(), mid, values.end());
    return *mid;
}

RegressionBasis state_basis(const AdaptedField& x, int degree) {
    RegressionBasis basis;
    basis.kind = BasisKind::state;
    basis.degree = degree;
    basis.state = &x;
    return basis;
}

}  // namespace

AdaptedField solve_state_sde(const ControlProblem& problem, const ControlPolicy& policy,
                             const PathEnsemble& ensemble) {
    check_setup(problem, policy, ensemble);
    const TimeGrid& grid = ensemble.grid();
    const std::size_t n = problem.n;
    AdaptedField x(grid, ensemble.paths(), n);
    parallel_for(ensemble.paths(), [&](std::size_t p, std::size_t) {
        std::vector<double> b(n), s(n);
        problem.initial_state(p, x.cell(p, 0));
        for (std::size_t j = 0; j < grid.steps(); ++j) {
            const double u = control_at(problem, policy, p, j);
            const auto xj = x.cell(p, j);
            problem.b(grid.node(j), u, xj, b);
            problem.sigma(grid.node(j), u, xj, s);
            const double dw = ensemble.increment(p, j, 0);
            auto next = x.cell(p, j + 1);
            for (std::size_t i = 0; i < n; ++i) {
                next[i] = xj[i] + b[i] * grid.dt() + s[i] * dw;
                if (!std::isfinite(next[i])) {
                    throw NumericalError("non-finite state", j + 1, p);
                }
            }
        }
    });
    return x;
}

CostSolution solve_cost_bsvie(const ControlProblem& problem, const ControlPolicy& policy, const AdaptedField& x,
                              const RegressionCache& cache, const ControlOptions& options, bool with_diag) {
    check_setup(problem, policy, cache.ensemble());
    const EbsvieSpec spec = cost_spec(problem, policy, x);
    CostSolution out{solve_ebsvie(spec, cache, options.solver), {}, 0.0};
    if (with_diag) {
        const DerivativeSolution der = solve_derivative_ebsvie(spec, out.cost, cache, options.solver.scheme);
        out.diag_z = compute_diag(out.cost.z, der.dz);
        out.dz_fd_gap = fd_gap(out.cost.z, der.dz);
    }
    return out;
}

double eval_h_function(const ControlProblem& problem, const ControlPolicy& policy, const EquilibriumBundle& bundle,
                       std::size_t node, std::size_t path, std::size_t v) {
    if (v >= problem.controls.size()) {
        throw std::invalid_argument("control index outside the control set");
    }
    const std::size_t n = problem.n;
    const double s = bundle.x_hat.grid().node(node);
    const auto x = bundle.x_hat.cell(path, node);
    const auto pss = bundle.p.cell(node, path, node);
    const auto dq = bundle.diag_q.cell(path, node);
    const auto Pss = bundle.P.cell(node, path, node);
    std::vector<double> bv(n), sv(n), sh(n), ds(n);
    problem.b(s, problem.controls[v], x, bv);
    problem.sigma(s, problem.controls[v], x, sv);
    problem.sigma(s, control_at(problem, policy, path, node), x, sh);
    double value = 0.0;
    double shift = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ds[i] = sv[i] - sh[i];
        value += pss[i] * bv[i] + dq[i] * sv[i];
        shift += pss[i] * ds[i];
    }
    value += problem.f(s, s, problem.controls[v], x, bundle.y_hat.at(path, node), bundle.diag_z.at(path, node) + shift);
    double quad = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            quad += Pss[i * n + j] * ds[j] * ds[i];
        }
    }
    return value + 0.5 * quad;
}

EquilibriumBundle build_bundle(const ControlProblem& problem, const ControlPolicy& policy,
                               const PathEnsemble& ensemble, const ControlOptions& options) {
    check_setup(problem, policy, ensemble);
    const TimeGrid& grid = ensemble.grid();
    const std::size_t paths = ensemble.paths();
    const std::size_t steps = grid.steps();
    const std::size_t nu = problem.controls.size();

    EquilibriumBundle bundle;
    bundle.controls = nu;
    bundle.x_hat = solve_state_sde(problem, policy, ensemble);
    const RegressionCache cache(ensemble, state_basis(bundle.x_hat, options.degree),
                                RegressionCache::Needs{true, true});

    {
        const EbsvieSpec spec = cost_spec(problem, policy, bundle.x_hat);
        EbsvieSolution cost = solve_ebsvie(spec, cache, options.solver);
        bundle.cost_report = cost.report;
        DerivativeSolution dcost = solve_derivative_ebsvie(spec, cost, cache, options.solver.scheme);
        bundle.diag_z = compute_diag(cost.z, dcost.dz);
        bundle.dz_fd_gap = fd_gap(cost.z, dcost.dz);
        bundle.y_hat = std::move(cost.eta);
        bundle.z_hat = std::move(cost.z);
        dcost.dy = BiTemporalField();

        const Along along{problem, policy, bundle.x_hat, bundle.y_hat, bundle.z_hat};
        const EbsvieSpec first = first_order_spec(along, &dcost.dz);
        EbsvieSolution adj = solve_ebsvie(first, cache, options.solver);
        bundle.first_order_report = adj.report;
        {
            const DerivativeSolution dadj = solve_derivative_ebsvie(first, adj, cache, options.solver.scheme);
            bundle.diag_q = compute_diag(adj.z, dadj.dz);
            bundle.dq_fd_gap = fd_gap(adj.z, dadj.dz);
        }
        dcost = DerivativeSolution();
        bundle.p = std::move(adj.y);
        bundle.q = std::move(adj.z);

        const EbsvieSpec second = second_order_spec(along, bundle.p, bundle.q);
        EbsvieSolution adj2 = solve_ebsvie(second, cache, options.solver);
        bundle.second_order_report = adj2.report;
        bundle.P = std::move(adj2.y);
        bundle.Q = std::move(adj2.z);
    }

    bundle.h_values.assign(steps * paths * nu, 0.0);
    parallel_for(steps, [&](std::size_t j, std::size_t) {
        for (std::size_t p = 0; p < paths; ++p) {
            for (std::size_t v = 0; v < nu; ++v) {
                bundle.h_values[(j * paths + p) * nu + v] = eval_h_function(problem, policy, bundle, j, p, v);
            }
        }
    });

    std::vector<double> incumbent;
    incumbent.reserve(steps * paths);
    for (std::size_t j = 0; j < steps; ++j) {
        for (std::size_t p = 0; p < paths; ++p) {
            incumbent.push_back(bundle.h_value(j, p, policy.at(p, j)));
        }
    }
    double scale = median_abs(incumbent);
    if (scale == 0.0) {
        scale = median_abs(bundle.h_values);
    }
    if (scale == 0.0) {
        scale = 1.0;
    }
    bundle.tol_h = options.tol_h_factor * scale;

    std::size_t count = 0;
    std::vector<WorstCell> offenders;
    for (std::size_t j = 0; j < steps; ++j) {
        for (std::size_t p = 0; p < paths; ++p) {
            const double base = bundle.h_value(j, p, policy.at(p, j));
            std::size_t best = 0;
            for (std::size_t v = 1; v < nu; ++v) {
                if (bundle.h_value(j, p, v) < bundle.h_value(j, p, best)) {
                    best = v;
                }
            }
            const double gap = bundle.h_value(j, p, best) - base;
            if (gap < -bundle.tol_h) {
                ++count;
                offenders.push_back({j, p, best, gap});
            }
        }
    }
    bundle.violation_measure = static_cast<double>(count) * grid.dt() / static_cast<double>(paths);
    std::ranges::sort(offenders, [](const WorstCell& a, const WorstCell& b) {
        if (a.gap != b.gap) {
            return a.gap < b.gap;
        }
        return a.node != b.node ? a.node < b.node : a.path < b.path;
    });
    if (offenders.size() > options.worst_cells) {
        offenders.resize(options.worst_cells);
    }
    bundle.worst_cells = std::move(offenders);
    return bundle;
}

EquilibriumCheck check_equilibrium(const ControlProblem& problem, const ControlPolicy& policy,
                                   const PathEnsemble& ensemble, const ControlOptions& options) {
    const EquilibriumBundle bundle = build_bundle(problem, policy, ensemble, options);
    return {bundle.violation_measure, bundle.tol_h, bundle.worst_cells};
}

namespace {

std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace

SearchResult search_equilibrium(const ControlProblem& problem, const ControlPolicy& initial,
                                const PathEnsemble& ensemble, const ControlOptions& options) {
    const double measure_tol = options.measure_tolerance(problem.horizon - problem.t0);
    SearchResult result;
    result.policy = initial;
    double damping = options.damping;
    std::vector<ControlPolicy> recent;
    for (int round = 1; round <= options.max_rounds; ++round) {
        const EquilibriumBundle bundle = build_bundle(problem, result.policy, ensemble, options);
        result.history.push_back(bundle.violation_measure);
        result.rounds = round - 1;
        if (bundle.violation_measure <= measure_tol) {
            result.converged = true;
            return result;
        }
        if (round == options.max_rounds) {
            break;
        }
        const std::size_t steps = ensemble.steps();
        ControlPolicy next = result.policy;
        for (std::size_t p = 0; p < ensemble.paths(); ++p) {
            for (std::size_t j = 0; j < steps; ++j) {
                if (damping > 0.0) {
                    const std::uint64_t h = mix((static_cast<std::uint64_t>(round) << 48) ^ (j * ensemble.paths() + p));
                    if (static_cast<double>(h >> 11) * 0x1.0p-53 < damping) {
                        continue;
                    }
                }
                std::size_t best = 0;
                for (std::size_t v = 1; v < problem.controls.size(); ++v) {
                    if (bundle.h_value(j, p, v) < bundle.h_value(j, p, best)) {
                        best = v;
                    }
                }
                next.at(p, j) = best;
            }
            // the last node carries no cell, keep it aligned with the one before
            next.at(p, steps) = next.at(p, steps - 1);
        }
        recent.push_back(result.policy);
        if (recent.size() > 4) {
            recent.erase(recent.begin());
        }
        bool cycle = false;
        for (std::size_t back = 2; back <= recent.size(); ++back) {
            if (recent[recent.size() - back] == next) {
                cycle = true;
            }
        }
        if (cycle) {
            if (options.auto_damping && damping == 0.0) {
                damping = 0.5;
                result.damping_used = true;
            } else {
                result.oscillation = true;
                result.rounds = round;
                result.policy = std::move(next);
                return result;
            }
        }
        result.policy = std::move(next);
    }
    return result;
}

ControlProblem restrict_problem(const ControlProblem& problem, const AdaptedField& x_hat, std::size_t from) {
    ControlProblem out = problem;
    out.t0 = x_hat.grid().node(from);
    auto start = std::make_shared<std::vector<double>>(x_hat.paths() * problem.n);
    for (std::size_t p = 0; p < x_hat.paths(); ++p) {
        for (std::size_t i = 0; i < problem.n; ++i) {
            (*start)[p * problem.n + i] = x_hat.at(p, from, i);
        }
    }
    const std::size_t n = problem.n;
    out.initial_state = [start, n](std::size_t path, std::span<double> x) {
        for (std::size_t i = 0; i < n; ++i) {
            x[i] = (*start)[path * n + i];
        }
    };
    return out;
}

namespace {

AdaptedField tail_field(const AdaptedField& field, const TimeGrid& tail, std::size_t from) {
    AdaptedField out(tail, field.paths(), field.dim());
    for (std::size_t p = 0; p < field.paths(); ++p) {
        for (std::size_t j = 0; j < tail.size(); ++j) {
            std::ranges::copy(field.cell(p, from + j), out.cell(p, j).begin());
        }
    }
    return out;
}

double sup_square_mean(const std::vector<double>& values, std::size_t paths, std::size_t nodes, std::size_t n) {
    double acc = 0.0;
    for (std::size_t p = 0; p < paths; ++p) {
        double sup = 0.0;
        for (std::size_t j = 0; j < nodes; ++j) {
            double sq = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double v = values[(p * nodes + j) * n + i];
                sq += v * v;
            }
            sup = std::max(sup, sq);
        }
        acc += sup;
    }
    return acc / static_cast<double>(paths);
}

double safe_slope(const std::vector<double>& eps, const std::vector<double>& values, const char* name,
                  std::vector<std::string>& warnings) {
    if (eps.size() < 2 || std::ranges::any_of(values, [](double v) { return !(v > 0.0); })) {
        warnings.push_back(std::string(name) + ": slope undefined (fewer than two points or zero values)");
        return 0.0;
    }
    return loglog_slope(eps, values);
}

}  // namespace

VariationalReport variational_rates(const ControlProblem& problem, const ControlPolicy& policy,
                                    const PathEnsemble& ensemble, const ControlOptions& options,
                                    std::size_t tau_node, std::size_t v, std::span<const std::size_t> eps_steps) {
    check_setup(problem, policy, ensemble);
    if (v >= problem.controls.size()) {
        throw std::invalid_argument("spike control outside the control set");
    }
    const TimeGrid& grid = ensemble.grid();
    const std::size_t steps = grid.steps();
    if (tau_node >= steps) {
        throw std::invalid_argument("spike time must lie before the horizon");
    }
    const std::size_t n = problem.n;
    const std::size_t paths = ensemble.paths();
    const double dt = grid.dt();
    VariationalReport report;

    const EquilibriumBundle bundle = build_bundle(problem, policy, ensemble, options);
    const RegressionCache full_cache(ensemble, state_basis(bundle.x_hat, options.degree),
                                     RegressionCache::Needs{false, true});

    const PathEnsemble tail = ensemble.tail(tau_node);
    const TimeGrid& tgrid = tail.grid();
    const std::size_t tnodes = tgrid.size();
    const ControlPolicy tail_policy = policy.tail(tau_node);
    const ControlProblem tail_problem = restrict_problem(problem, bundle.x_hat, tau_node);
    const AdaptedField x_tail = tail_field(bundle.x_hat, tgrid, tau_node);

    std::vector<double> j_hat(paths);
    {
        const RegressionCache cache(tail, state_basis(x_tail, options.degree));
        const CostSolution base = solve_cost_bsvie(tail_problem, tail_policy, x_tail, cache, options, false);
        for (std::size_t p = 0; p < paths; ++p) {
            j_hat[p] = base.cost.eta.at(p, 0);
        }
    }

    for (std::size_t k : eps_steps) {
        if (k == 0 || tau_node + k > steps) {
            report.warnings.push_back("eps of " + std::to_string(k) + " steps exceeds the horizon, skipped");
            continue;
        }
        ControlPolicy spiked = tail_policy;
        for (std::size_t p = 0; p < paths; ++p) {
            for (std::size_t j = 0; j < k; ++j) {
                spiked.at(p, j) = v;
            }
        }
        const AdaptedField x_eps = solve_state_sde(tail_problem, spiked, tail);

        // variational equations along (x_hat, u_hat) on the tail grid
        std::vector<double> x1(paths * tnodes * n, 0.0);
        std::vector<double> x2(paths * tnodes * n, 0.0);
        std::vector<double> rem(paths * tnodes * n, 0.0);
        parallel_for(paths, [&](std::size_t p, std::size_t) {
            std::vector<double> bx(n * n), sx(n * n), bxx(n * n * n), sxx(n * n * n), sxv(n * n);
            std::vector<double> bh(n), bv(n), sh(n), sv(n);
            for (std::size_t j = 0; j + 1 < tnodes; ++j) {
                const double s = tgrid.node(j);
                const double u = control_at(problem, tail_policy, p, j);
                const auto xs = x_tail.cell(p, j);
                problem.b_x(s, u, xs, bx);
                problem.sigma_x(s, u, xs, sx);
                problem.b_xx(s, u, xs, bxx);
                problem.sigma_xx(s, u, xs, sxx);
                const bool spike = j < k;
                if (spike) {
                    problem.b(s, problem.controls[v], xs, bv);
                    problem.b(s, u, xs, bh);
                    problem.sigma(s, problem.controls[v], xs, sv);
                    problem.sigma(s, u, xs, sh);
                    problem.sigma_x(s, problem.controls[v], xs, sxv);
                }
                const double dw = tail.increment(p, j, 0);
                const double* a1 = x1.data() + (p * tnodes + j) * n;
                const double* a2 = x2.data() + (p * tnodes + j) * n;
                double* n1 = x1.data() + (p * tnodes + j + 1) * n;
                double* n2 = x2.data() + (p * tnodes + j + 1) * n;
                for (std::size_t i = 0; i < n; ++i) {
                    double d1 = 0.0;
                    double s1 = spike ? sv[i] - sh[i] : 0.0;
                    double d2 = spike ? bv[i] - bh[i] : 0.0;
                    double s2 = 0.0;
                    for (std::size_t l = 0; l < n; ++l) {
                        d1 += bx[i * n + l] * a1[l];
                        s1 += sx[i * n + l] * a1[l];
                        d2 += bx[i * n + l] * a2[l];
                        s2 += sx[i * n + l] * a2[l];
                        if (spike) {
                            s2 += (sxv[i * n + l] - sx[i * n + l]) * a1[l];
                        }
                        for (std::size_t r = 0; r < n; ++r) {
                            d2 += 0.5 * bxx[(i * n + l) * n + r] * a1[l] * a1[r];
                            s2 += 0.5 * sxx[(i * n + l) * n + r] * a1[l] * a1[r];
                        }
                    }
                    n1[i] = a1[i] + d1 * dt + s1 * dw;
                    n2[i] = a2[i] + d2 * dt + s2 * dw;
                }
            }
            for (std::size_t j = 0; j < tnodes; ++j) {
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t idx = (p * tnodes + j) * n + i;
                    rem[idx] = x_eps.at(p, j, i) - x_tail.at(p, j, i) - x1[idx] - x2[idx];
                }
            }
        });

        std::vector<double> j_eps(paths);
        {
            const RegressionCache cache(tail, state_basis(x_eps, options.degree));
            const CostSolution sol = solve_cost_bsvie(tail_problem, spiked, x_eps, cache, options, false);
            for (std::size_t p = 0; p < paths; ++p) {
                j_eps[p] = sol.cost.eta.at(p, 0);
            }
        }

        Eigen::MatrixXd integral(static_cast<Eigen::Index>(paths), 1);
        for (std::size_t p = 0; p < paths; ++p) {
            double acc = 0.0;
            for (std::size_t j = tau_node; j < tau_node + k; ++j) {
                acc += dt * (bundle.h_value(j, p, v) - bundle.h_value(j, p, policy.at(p, j)));
            }
            integral(static_cast<Eigen::Index>(p), 0) = acc;
        }
        Eigen::MatrixXd conditional;
        full_cache.project(tau_node, integral, conditional);

        double r2 = 0.0;
        double gap = 0.0;
        double hint = 0.0;
        for (std::size_t p = 0; p < paths; ++p) {
            const double c = conditional(static_cast<Eigen::Index>(p), 0);
            const double r = j_eps[p] - j_hat[p] - c;
            r2 += r * r;
            gap += j_eps[p] - j_hat[p];
            hint += c;
        }
        const auto mp = static_cast<double>(paths);
        report.eps.push_back(static_cast<double>(k) * dt);
        report.x1.push_back(sup_square_mean(x1, paths, tnodes, n));
        report.x2.push_back(sup_square_mean(x2, paths, tnodes, n));
        report.remainder.push_back(sup_square_mean(rem, paths, tnodes, n));
        report.residual.push_back(std::sqrt(r2 / mp));
        report.cost_gap.push_back(gap / mp);
        report.h_integral.push_back(hint / mp);
    }
    report.x1_slope = safe_slope(report.eps, report.x1, "first-order variation", report.warnings);
    report.x2_slope = safe_slope(report.eps, report.x2, "second-order variation", report.warnings);
    report.remainder_slope = safe_slope(report.eps, report.remainder, "second-order remainder", report.warnings);
    report.residual_slope = safe_slope(report.eps, report.residual, "cost residual", report.warnings);
    return report;
}

}  // namespace ebsvie
