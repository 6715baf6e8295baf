// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "ebsvie/control.hpp"
#include "ebsvie/ebsvie.hpp"
#include "ebsvie/oracles.hpp"

using namespace ebsvie;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Verdict {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << " [failed: " << what << "]";
        }
    }
};

int failures = 0;

void report(int id, const std::function<void(Verdict&)>& body) {
    Verdict v;
    try {
        body(v);
    } catch (const std::exception& e) {
        v.pass = false;
        v.detail << " [exception: " << e.what() << "]";
    }
    std::printf("criterion %d: %s%s\n", id, v.pass ? "PASS" : "FAIL", v.detail.str().c_str());
    std::fflush(stdout);
    failures += v.pass ? 0 : 1;
}

// eta' = -a eta backward from 1, RK4 with about 10^4 steps; values at the grid nodes
std::vector<double> volterra_reference(double a, const TimeGrid& g) {
    const std::size_t sub = (10000 + g.steps() - 1) / g.steps();
    const double h = g.dt() / static_cast<double>(sub);
    std::vector<double> out(g.size());
    double y = 1.0;
    out[g.steps()] = y;
    for (std::size_t j = g.steps(); j-- > 0;) {
        for (std::size_t k = 0; k < sub; ++k) {
            const double k1 = a * y;
            const double k2 = a * (y + 0.5 * h * k1);
            const double k3 = a * (y + 0.5 * h * k2);
            const double k4 = a * (y + h * k3);
            y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        out[j] = y;
    }
    return out;
}

double volterra_error(std::size_t n) {
    const PathEnsemble one = simulate_paths(make_grid(0.0, 1.0, n), 1, 1, 1);
    const EbsvieSolution sol = solve_ebsvie(oracles::volterra_problem(0.5), one, {BasisKind::brownian, 0});
    const std::vector<double> exact = volterra_reference(0.5, one.grid());
    double err = 0.0;
    for (std::size_t t = 0; t <= n; ++t) {
        for (std::size_t s = t; s <= n; ++s) {
            err = std::max(err, std::abs(sol.y.at(t, 0, s) - exact[s]));
        }
    }
    return err;
}

void criterion1(Verdict& v) {
    omp_set_num_threads(1);
    const auto start = Clock::now();
    const double err64 = volterra_error(64);
    const double elapsed = seconds_since(start);
    omp_set_num_threads(omp_get_num_procs());
    std::vector<double> ns;
    std::vector<double> errs;
    for (std::size_t n : {16u, 32u, 64u, 128u}) {
        ns.push_back(static_cast<double>(n));
        errs.push_back(volterra_error(n));
    }
    const double slope = -loglog_slope(ns, errs);
    v.detail << " max error at N=64 " << err64 << ", single-thread time " << elapsed << " s, slope " << slope;
    v.require(err64 <= 1e-3, "error <= 1e-3");
    v.require(elapsed <= 5.0, "runtime <= 5 s");
    v.require(slope >= 0.9, "slope >= 0.9");
}

void criterion2(Verdict& v) {
    const TimeGrid g = make_grid(0.0, 1.0, 32);
    const PathEnsemble e = simulate_paths(g, 10000, 1, 42);
    const RegressionCache cache(e, {BasisKind::brownian, 1});
    const EbsvieSpec spec = oracles::martingale_problem(e);
    const EbsvieSolution sol = solve_ebsvie(spec, cache);
    const DerivativeSolution d = solve_derivative_ebsvie(spec, sol, cache);
    const AdaptedField diag = compute_diag(sol.z, d.dz);
    double ez = 0.0;
    double ed = 0.0;
    for (std::size_t p = 0; p < e.paths(); ++p) {
        for (std::size_t s = 0; s <= 32; ++s) {
            for (std::size_t t = 0; t <= 32; ++t) {
                ez = std::max(ez, std::abs(sol.z.at(t, p, s) - g.node(t)));
            }
            ed = std::max(ed, std::abs(diag.at(p, s) - g.node(s)));
        }
    }
    const std::vector<std::size_t> t_nodes{0, 8, 16};
    const std::vector<std::size_t> eps_steps{4, 8, 16};
    const PropertyDReport rep = property_d_rate(sol.z, diag, t_nodes, eps_steps);
    double worst_slope = 1e9;
    for (const PropertyDRow& row : rep.rows) {
        worst_slope = std::min(worst_slope, row.slope);
    }
    v.detail << " max |Z - t| " << ez << ", max |Diag - s| " << ed << ", min property (D) slope " << worst_slope;
    v.require(ez <= 0.05, "Z error <= 0.05");
    v.require(ed <= 0.05, "Diag error <= 0.05");
    v.require(rep.rows.size() == t_nodes.size() && worst_slope >= 1.5, "slope >= 1.5");
}

void criterion3(Verdict& v) {
    const auto start = Clock::now();
    const double r = 2.0;
    const std::vector<double> eps{0.04, 0.02, 0.01};
    const std::vector<double> expect{10.0, 10.0 * std::sqrt(2.0), 20.0};
    const std::vector<double> ts{0.0};
    const PropertyDReport rep =
        property_d_rate([r](double, double e) { return oracles::counterexample_integral(r, e); }, ts, eps, 1.0);
    double err = 0.0;
    for (std::size_t k = 0; k < eps.size(); ++k) {
        err = std::max(err, std::abs(rep.rows.at(0).averages.at(k) - expect[k]));
        err = std::max(err, std::abs(oracles::counterexample_average(r, eps[k]) - expect[k]));
    }
    const double elapsed = seconds_since(start);
    v.detail << " max error " << err << ", failure flag " << rep.any_failure() << ", time " << elapsed << " s";
    v.require(err <= 1e-9, "averages within 1e-9");
    v.require(rep.any_failure(), "property (D) failure flagged");
    v.require(elapsed <= 1.0, "runtime <= 1 s");
}

void criterion4(Verdict& v) {
    const PathEnsemble e = simulate_paths(make_grid(0.0, 1.0, 32), 1000, 1, 5);
    const RegressionBasis basis{BasisKind::brownian, 2};
    const EbsvieSolution sol = solve_ebsvie(oracles::stationary_problem(e, 0.5, 0.3), e, basis);
    const BsdeSolution ref = solve_bsde(oracles::stationary_bsde(e, 0.5, 0.3), e, basis);
    double worst = 0.0;
    for (std::size_t t = 0; t <= 32; ++t) {
        for (std::size_t p = 0; p < e.paths(); ++p) {
            for (std::size_t s = 0; s <= 32; ++s) {
                worst = std::max(worst, std::abs(sol.y.at(t, p, s) - ref.y.at(p, s)));
                worst = std::max(worst, std::abs(sol.z.at(t, p, s) - ref.z.at(p, s)));
            }
        }
    }
    v.detail << " max slice gap " << worst << " after " << sol.report.picard_iterations << " iterations";
    v.require(sol.report.converged, "converged");
    v.require(worst <= 1e-12, "gap <= 1e-12");
}

void criterion5(Verdict& v) {
    const PathEnsemble mart = simulate_paths(make_grid(0.0, 1.0, 32), 10000, 1, 42);
    const PathEnsemble one = simulate_paths(make_grid(0.0, 1.0, 64), 1, 1, 1);
    struct Case {
        const char* name;
        EbsvieSpec spec;
        const PathEnsemble* ens;
        RegressionBasis basis;
    };
    const std::vector<Case> cases{{"O2", oracles::martingale_problem(mart), &mart, {BasisKind::brownian, 1}},
                                  {"O3", oracles::volterra_problem(0.5), &one, {BasisKind::brownian, 0}},
                                  {"O4", oracles::exponential_problem(0.5), &one, {BasisKind::brownian, 0}}};
    SolverOptions opt;
    opt.tol = 1e-8;
    for (const Case& c : cases) {
        const EbsvieSolution sol = solve_ebsvie(c.spec, *c.ens, c.basis, opt);
        const auto& r = sol.report;
        const double worst = r.contraction_ratios.empty()
                                 ? 0.0
                                 : *std::max_element(r.contraction_ratios.begin(), r.contraction_ratios.end());
        v.detail << " " << c.name << ": " << r.picard_iterations << " iterations, beta " << r.beta_used
                 << ", final_delta " << r.final_delta << ", max ratio " << worst << ";";
        v.require(worst < 1.0, std::string(c.name) + " ratios < 1");
        v.require(r.converged && r.final_delta <= 1e-8, std::string(c.name) + " final_delta <= 1e-8");
        v.require(r.picard_iterations <= 15, std::string(c.name) + " iterations <= 15");
    }
}

void criterion6(Verdict& v) {
    const PathEnsemble e = simulate_paths(make_grid(0.0, 1.0, 32), 2000, 1, 6);
    const RegressionBasis basis{BasisKind::brownian, 1};
    const EbsvieSpec base = oracles::martingale_problem(e);
    EbsvieSpec shifted = base;
    const double delta = 0.1;
    shifted.free_term = [f = base.free_term, delta](const GeneratorPoint& pt, std::span<double> out) {
        f(pt, out);
        out[0] += delta;
    };
    const EbsvieSolution a = solve_ebsvie(base, e, basis);
    const EbsvieSolution b = solve_ebsvie(shifted, e, basis);
    double gap = 0.0;
    for (std::size_t t = 0; t < a.y.nodes(); ++t) {
        const auto ya = a.y.slice(t);
        const auto yb = b.y.slice(t);
        for (std::size_t i = 0; i < ya.size(); ++i) {
            gap = std::max(gap, std::abs(yb[i] - ya[i] - delta));
        }
    }

    const PathEnsemble one = simulate_paths(make_grid(0.0, 1.0, 64), 1, 1, 1);
    std::vector<double> ratios;
    for (double d : {0.01, 0.005, 0.0025}) {
        ratios.push_back(ebsvie_stability_probe(oracles::volterra_problem(0.5), oracles::volterra_problem(0.5 + d), one,
                                                {BasisKind::brownian, 0})
                             .ratio);
    }
    const auto [lo, hi] = std::minmax_element(ratios.begin(), ratios.end());
    const double spread = *hi / *lo - 1.0;
    v.detail << " shift gap " << gap << ", probe ratios " << ratios[0] << " " << ratios[1] << " " << ratios[2]
             << " (spread " << spread << ")";
    v.require(gap <= 1e-12, "shift gap <= 1e-12");
    v.require(std::isfinite(*hi) && spread <= 0.10, "ratio spread <= 10%");
}

void criterion7(Verdict& v) {
    const auto start = Clock::now();
    const PathEnsemble e = simulate_paths(make_grid(0.0, 1.0, 32), 2000, 1, 11);
    const ControlProblem pr = oracles::control_toy();
    const ControlOptions opt;
    const ControlPolicy zero(e.paths(), e.grid().size(), 1);
    const ControlPolicy one(e.paths(), e.grid().size(), 2);
    const double good = check_equilibrium(pr, zero, e, opt).violation_measure;
    const double bad = check_equilibrium(pr, one, e, opt).violation_measure;
    const SearchResult res = search_equilibrium(pr, one, e, opt);
    const double elapsed = seconds_since(start);
    v.detail << " violation(u=0) " << good << ", violation(u=1) " << bad << ", search rounds " << res.rounds
             << (res.converged ? " converged" : " not converged") << ", time " << elapsed << " s";
    v.require(good <= 0.02, "violation(u=0) <= 0.02");
    v.require(bad >= 0.9, "violation(u=1) >= 0.9");
    v.require(res.converged && res.rounds <= 3 && res.policy == zero, "search reaches u = 0 in <= 3 rounds");
    v.require(elapsed <= 60.0, "runtime <= 60 s");
}

void criterion8(Verdict& v) {
    const auto start = Clock::now();
    const PathEnsemble e = simulate_paths(make_grid(0.0, 1.0, 256), 600, 1, 3);
    const ControlProblem pr = oracles::volatility_toy(0.5, 0.0, 1.0);
    const ControlPolicy zero(e.paths(), e.grid().size(), 1);
    const std::vector<std::size_t> eps{8, 16, 32, 64};
    const VariationalReport rep = variational_rates(pr, zero, e, ControlOptions{}, 0, 2, eps);
    const double elapsed = seconds_since(start);
    v.detail << " slopes: X1 " << rep.x1_slope << ", X2 " << rep.x2_slope << ", remainder " << rep.remainder_slope
             << ", residual " << rep.residual_slope << ", time " << elapsed << " s";
    v.require(rep.x1_slope >= 0.8 && rep.x1_slope <= 1.2, "X1 slope in [0.8, 1.2]");
    v.require(rep.x2_slope >= 1.7 && rep.x2_slope <= 2.3, "X2 slope in [1.7, 2.3]");
    v.require(rep.remainder_slope >= 2.1, "remainder slope >= 2.1");
    v.require(rep.residual_slope >= 1.1, "residual slope >= 1.1");
    v.require(elapsed <= 120.0, "runtime <= 120 s");
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void criterion9(Verdict& v) {
    struct Job {
        const char* command;
        const char* config;
    };
    const std::vector<Job> jobs{
        {"solve-ebsvie", "volterra.ini"},          {"diag", "martingale.ini"},
        {"property-d", "martingale.ini"},          {"property-d", "counterexample.ini"},
        {"solve-bsde", "stationary.ini"},          {"solve-ebsvie", "stationary.ini"},
        {"solve-ebsvie", "martingale.ini"},        {"solve-ebsvie", "exponential.ini"},
        {"solve-bsvie", "volterra.ini"},           {"equilibrium-check", "control_toy.ini"},
        {"equilibrium-search", "control_toy.ini"}, {"variational-rates", "volatility_toy.ini"},
    };
    const fs::path root = fs::temp_directory_path() / "ebsvie_acceptance";
    fs::remove_all(root);
    const std::vector<std::pair<std::string, int>> runs{{"first", 1}, {"second", 1}, {"wide", 4}};
    std::size_t compared = 0;
    for (std::size_t j = 0; j < jobs.size(); ++j) {
        std::vector<fs::path> dirs;
        for (const auto& [label, threads] : runs) {
            const fs::path dir = root / (std::to_string(j) + "_" + label);
            const std::string cmd = std::string(EBSVIE_CLI_PATH) + " " + jobs[j].command + " " EBSVIE_CONFIG_DIR "/" +
                                    jobs[j].config + " --threads " + std::to_string(threads) + " -o " + dir.string() +
                                    " > /dev/null 2>&1";
            if (std::system(cmd.c_str()) != 0) {
                v.require(false, std::string(jobs[j].command) + " " + jobs[j].config + " exit status");
            }
            dirs.push_back(dir);
        }
        std::vector<std::string> names;
        for (const auto& entry : fs::directory_iterator(dirs[0])) {
            if (entry.path().extension() == ".csv") {
                names.push_back(entry.path().filename().string());
            }
        }
        v.require(!names.empty(), std::string(jobs[j].command) + " wrote no CSV");
        for (const std::string& name : names) {
            const std::string ref = slurp(dirs[0] / name);
            for (std::size_t k = 1; k < dirs.size(); ++k) {
                ++compared;
                v.require(fs::exists(dirs[k] / name) && slurp(dirs[k] / name) == ref,
                          std::string(jobs[j].command) + " " + name + " differs in run " + runs[k].first);
            }
        }
    }
    v.detail << " " << jobs.size() << " commands, " << compared << " CSV comparisons (repeat and --threads 1 vs 4)";
    fs::remove_all(root);
}

void criterion10(Verdict& v) {
    const TimeGrid g = make_grid(0.0, 1.0, 16);
    const PathEnsemble e = simulate_paths(g, 500, 1, 10);
    const RegressionBasis basis{BasisKind::brownian, 1};
    const Producer bsde = [&](const PathEnsemble& ens) {
        BsdeSpec spec;
        spec.terminal = [&ens](const GeneratorPoint& pt, std::span<double> out) {
            out[0] = ens.brownian(pt.path, pt.s_node, 0);
        };
        BsdeSolution sol = solve_bsde(spec, ens, basis);
        return ProducerOutput{{std::move(sol.y), std::move(sol.z)}, {}};
    };
    const Producer ebsvie = [&](const PathEnsemble& ens) {
        EbsvieSolution sol = solve_ebsvie(oracles::martingale_problem(ens), ens, basis);
        return ProducerOutput{{std::move(sol.eta)}, {std::move(sol.y), std::move(sol.z)}};
    };
    const Producer diag = [&](const PathEnsemble& ens) {
        const RegressionCache cache(ens, basis);
        const EbsvieSpec spec = oracles::martingale_problem(ens);
        const EbsvieSolution sol = solve_ebsvie(spec, cache);
        const DerivativeSolution d = solve_derivative_ebsvie(spec, sol, cache);
        return ProducerOutput{{compute_diag(sol.z, d.dz)}, {}};
    };
    const std::vector<std::pair<const char*, const Producer*>> producers{
        {"solve_bsde", &bsde}, {"solve_ebsvie", &ebsvie}, {"compute_diag", &diag}};
    int passed = 0;
    for (const auto& [name, producer] : producers) {
        for (std::size_t node : {4u, 8u, 12u}) {
            const bool ok = scramble_test(*producer, e, node);
            passed += ok ? 1 : 0;
            v.require(ok, std::string(name) + " at node " + std::to_string(node));
        }
    }
    v.detail << " " << passed << "/9 scramble checks";
}

}  // namespace

int main() {
    report(1, criterion1);
    report(2, criterion2);
    report(3, criterion3);
    report(4, criterion4);
    report(5, criterion5);
    report(6, criterion6);
    report(7, criterion7);
    report(8, criterion8);
    report(9, criterion9);
    report(10, criterion10);
    std::printf("%d of 10 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
