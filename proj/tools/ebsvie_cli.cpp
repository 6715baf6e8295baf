// Batch front end: one command per process, artifacts under the output directory.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <omp.h>

#include "CLI11.hpp"
#include "ebsvie/config.hpp"
#include "ebsvie/control.hpp"
#include "ebsvie/errors.hpp"
#include "ebsvie/oracles.hpp"

namespace fs = std::filesystem;
using namespace ebsvie;

namespace {

constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNotConverged = 3;
constexpr int kExitResource = 4;

class Run {
public:
    Run(fs::path dir, const RunConfig& cfg, std::string command) : dir_(std::move(dir)), cfg_(cfg), command_(std::move(command)) {
        fs::create_directories(dir_);
    }

    std::ostringstream report;
    bool all_converged = true;
    std::vector<std::string> manifest_extra;

    template <class F>
    auto stage(const std::string& name, F&& f) {
        const auto start = std::chrono::steady_clock::now();
        auto finish = [&] {
            timings_.emplace_back(name, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
        };
        if constexpr (std::is_void_v<decltype(f())>) {
            f();
            finish();
        } else {
            auto out = f();
            finish();
            return out;
        }
    }

    std::ofstream open(const std::string& file) {
        files_.push_back(file);
        std::ofstream os(dir_ / file, std::ios::binary);
        if (!os) {
            throw std::runtime_error("cannot write " + (dir_ / file).string());
        }
        return os;
    }

    template <class Field>
    void field(const std::string& file, const std::string& name, const Field& f) {
        auto os = open(file);
        write_csv(os, f, CsvMeta{name, cfg_.seed, cfg_.export_paths});
    }

    void finish(const std::string& status) {
        {
            auto os = open("report.txt");
            os << "command=" << command_ << "\n" << report.str();
        }
        std::ofstream t(dir_ / "timing.txt", std::ios::binary);
        for (const auto& [name, secs] : timings_) {
            t << name << "=" << secs << "\n";
        }
        std::ofstream m(dir_ / "manifest.txt", std::ios::binary);
        char hash[17];
        std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(cfg_.hash));
        m << "schema=1\ncommand=" << command_ << "\nconfig_hash=" << hash << "\nseed=" << cfg_.seed
          << "\nstatus=" << status << "\ntiming_file=timing.txt\n";
        for (const auto& line : manifest_extra) {
            m << line << "\n";
        }
        for (const auto& f : files_) {
            m << "file=" << f << "\n";
        }
    }

private:
    fs::path dir_;
    const RunConfig& cfg_;
    std::string command_;
    std::vector<std::string> files_;
    std::vector<std::pair<std::string, double>> timings_;
};

std::string fmt(double v) { return format_double(v); }

TimeGrid grid_of(const RunConfig& cfg) { return make_grid(cfg.s_lo, cfg.s_hi, cfg.steps); }

RegressionBasis basis_of(const RunConfig& cfg, const AdaptedField* state = nullptr) {
    RegressionBasis b;
    b.kind = cfg.basis;
    b.degree = cfg.degree;
    b.state = state;
    return b;
}

SolverOptions solver_of(const RunConfig& cfg) {
    SolverOptions o;
    o.auto_beta = cfg.auto_beta;
    o.norm = BetaNorm{cfg.auto_beta ? 1.0 : cfg.beta, cfg.norm_p};
    o.tol = cfg.tol;
    o.max_iter = cfg.max_iter;
    o.scheme.theta = cfg.theta;
    o.scheme.inner_corrections = cfg.corrections;
    o.domain = cfg.domain;
    return o;
}

ControlOptions control_of(const RunConfig& cfg) {
    ControlOptions o;
    o.solver.max_iter = cfg.max_iter;
    o.solver.norm.p = cfg.norm_p;
    if (cfg.tol_set) {
        o.solver.tol = cfg.tol;
    }
    o.degree = cfg.degree;
    o.tol_h_factor = cfg.tol_h;
    o.measure_tol = cfg.measure_tol;
    o.max_rounds = cfg.max_rounds;
    o.damping = cfg.damping;
    o.worst_cells = cfg.worst_cells;
    return o;
}

void describe(Run& run, const std::string& label, const SolveReport& r) {
    run.report << label << ".picard_iterations=" << r.picard_iterations << "\n"
               << label << ".beta=" << fmt(r.beta_used) << "\n"
               << label << ".converged=" << (r.converged ? 1 : 0) << "\n"
               << label << ".final_delta=" << fmt(r.final_delta) << "\n"
               << label << ".deficient_nodes=" << r.deficient_nodes << "\n"
               << label << ".contraction_ratios=";
    for (std::size_t i = 0; i < r.contraction_ratios.size(); ++i) {
        run.report << (i ? "," : "") << fmt(r.contraction_ratios[i]);
    }
    run.report << "\n";
    run.all_converged = run.all_converged && r.converged;
}

/// EBSVIE problems by name, with closed forms where they exist.
struct Problem {
    EbsvieSpec spec;
    std::function<double(const PathEnsemble&, std::size_t t, std::size_t p, std::size_t s)> y_exact;
    std::function<double(const PathEnsemble&, std::size_t t, std::size_t p, std::size_t s)> z_exact;
    std::function<double(const PathEnsemble&, std::size_t p, std::size_t s)> diag_exact;
};

Problem ebsvie_problem(const RunConfig& cfg, const PathEnsemble& ens) {
    const std::string& name = cfg.problem;
    const double a = cfg.a;
    const double T = cfg.s_hi;
    Problem pr;
    auto node = [](const PathEnsemble& e, std::size_t j) { return e.grid().node(j); };
    if (name == "zero") {
        pr.spec = oracles::zero_problem(1, ens.dim());
        pr.y_exact = [](const PathEnsemble&, std::size_t, std::size_t, std::size_t) { return 0.0; };
        pr.z_exact = pr.y_exact;
        pr.diag_exact = [](const PathEnsemble&, std::size_t, std::size_t) { return 0.0; };
    } else if (name == "martingale") {
        pr.spec = oracles::martingale_problem(ens);
        pr.y_exact = [node](const PathEnsemble& e, std::size_t t, std::size_t p, std::size_t s) {
            return node(e, t) * e.brownian(p, s, 0);
        };
        pr.z_exact = [node](const PathEnsemble& e, std::size_t t, std::size_t, std::size_t) { return node(e, t); };
        pr.diag_exact = [node](const PathEnsemble& e, std::size_t, std::size_t s) { return node(e, s); };
    } else if (name == "volterra") {
        pr.spec = oracles::volterra_problem(a);
        pr.y_exact = [a, T, node](const PathEnsemble& e, std::size_t, std::size_t, std::size_t s) {
            return std::exp(a * (T - node(e, s)));
        };
        pr.z_exact = [](const PathEnsemble&, std::size_t, std::size_t, std::size_t) { return 0.0; };
        pr.diag_exact = [](const PathEnsemble&, std::size_t, std::size_t) { return 0.0; };
    } else if (name == "exponential") {
        pr.spec = oracles::exponential_problem(a);
        pr.y_exact = [a, T, node](const PathEnsemble& e, std::size_t, std::size_t, std::size_t s) {
            return std::exp(a * (T - node(e, s)));
        };
        pr.z_exact = [](const PathEnsemble&, std::size_t, std::size_t, std::size_t) { return 0.0; };
        pr.diag_exact = [](const PathEnsemble&, std::size_t, std::size_t) { return 0.0; };
    } else if (name == "stationary") {
        pr.spec = oracles::stationary_problem(ens, a, cfg.b);
    } else {
        throw ConfigError("problem '" + name + "' is not an EBSVIE problem");
    }
    if (pr.spec.d != ens.dim()) {
        throw ConfigError("problem '" + name + "' needs ensemble.dim = " + std::to_string(pr.spec.d));
    }
    return pr;
}

BsdeSpec bsde_problem(const RunConfig& cfg, const PathEnsemble& ens) {
    if (cfg.problem == "exponential") {
        return oracles::exponential_bsde(cfg.a);
    }
    if (cfg.problem == "stationary") {
        return oracles::stationary_bsde(ens, cfg.a, cfg.b);
    }
    if (cfg.problem == "zero") {
        BsdeSpec s;
        s.d = ens.dim();
        s.terminal = [](const GeneratorPoint&, std::span<double> out) { out[0] = 0.0; };
        return s;
    }
    throw ConfigError("problem '" + cfg.problem + "' has no plain BSDE form");
}

ControlProblem control_problem(const RunConfig& cfg) {
    ControlProblem pr;
    if (cfg.problem == "control-toy") {
        pr = oracles::control_toy();
    } else if (cfg.problem == "volatility-toy") {
        pr = oracles::volatility_toy(cfg.c, cfg.kappa, cfg.lambda);
    } else if (cfg.problem == "spike-cost-toy") {
        pr = oracles::spike_cost_toy();
    } else {
        throw ConfigError("problem '" + cfg.problem + "' is not a control problem");
    }
    pr.t0 = cfg.s_lo;
    pr.horizon = cfg.s_hi;
    return pr;
}

std::size_t control_index(const ControlProblem& pr, double value, const std::string& key) {
    for (std::size_t i = 0; i < pr.controls.size(); ++i) {
        if (pr.controls[i] == value) {
            return i;
        }
    }
    throw ConfigError(key + " = " + fmt(value) + " is not in the control set");
}

PathEnsemble ensemble_of(Run& run, const RunConfig& cfg) {
    return run.stage("simulate", [&] { return simulate_paths(grid_of(cfg), cfg.paths, cfg.dim, cfg.seed); });
}

template <class Exact>
double max_error(const BiTemporalField& f, const PathEnsemble& ens, const Exact& exact) {
    double err = 0.0;
    for (std::size_t t = 0; t < f.nodes(); ++t) {
        for (std::size_t p = 0; p < f.paths(); ++p) {
            for (std::size_t s = f.s_begin(t); s < f.nodes(); ++s) {
                err = std::max(err, std::abs(f.at(t, p, s, 0) - exact(ens, t, p, s)));
            }
        }
    }
    return err;
}

void cmd_simulate(Run& run, const RunConfig& cfg) {
    const PathEnsemble ens = ensemble_of(run, cfg);
    const AdaptedField w = brownian_field(ens);
    run.field("W.csv", "W", w);
    double mean = 0.0;
    double second = 0.0;
    for (std::size_t p = 0; p < ens.paths(); ++p) {
        const double v = w.at(p, ens.steps(), 0);
        mean += v;
        second += v * v;
    }
    const auto m = static_cast<double>(ens.paths());
    run.report << "paths=" << ens.paths() << "\nsteps=" << ens.steps() << "\ndim=" << ens.dim()
               << "\nmean_WT=" << fmt(mean / m) << "\nvar_WT=" << fmt(second / m - (mean / m) * (mean / m)) << "\n";
}

void cmd_solve_bsde(Run& run, const RunConfig& cfg) {
    const PathEnsemble ens = ensemble_of(run, cfg);
    const BsdeSpec spec = bsde_problem(cfg, ens);
    SchemeOptions scheme;
    scheme.theta = cfg.theta;
    scheme.inner_corrections = cfg.corrections;
    const BsdeSolution sol = run.stage("solve", [&] { return solve_bsde(spec, ens, basis_of(cfg), scheme); });
    run.field("y.csv", "y", sol.y);
    run.field("z.csv", "z", sol.z);
    run.report << "deficient_nodes=" << sol.deficient_nodes << "\n";
    if (cfg.problem == "exponential") {
        double err = 0.0;
        for (std::size_t p = 0; p < ens.paths(); ++p) {
            for (std::size_t s = 0; s < ens.grid().size(); ++s) {
                err = std::max(err, std::abs(sol.y.at(p, s, 0) - std::exp(cfg.a * (cfg.s_hi - ens.grid().node(s)))));
            }
        }
        run.report << "max_error_y=" << fmt(err) << "\n";
    }
}

void cmd_solve_ebsvie(Run& run, const RunConfig& cfg, bool type1) {
    const PathEnsemble ens = ensemble_of(run, cfg);
    const Problem pr = ebsvie_problem(cfg, ens);
    const RegressionCache cache = run.stage("regression", [&] { return RegressionCache(ens, basis_of(cfg)); });
    if (type1) {
        const Type1Solution sol = run.stage("solve", [&] { return solve_type1_bsvie(pr.spec, cache, solver_of(cfg)); });
        describe(run, "picard", sol.report);
        run.field("eta.csv", "eta", sol.eta);
        run.field("zeta.csv", "zeta", sol.zeta);
        return;
    }
    const EbsvieSolution sol = run.stage("solve", [&] { return solve_ebsvie(pr.spec, cache, solver_of(cfg)); });
    describe(run, "picard", sol.report);
    run.field("Y.csv", "Y", sol.y);
    run.field("Z.csv", "Z", sol.z);
    run.field("eta.csv", "eta", sol.eta);
    if (pr.y_exact) {
        run.report << "max_error_y=" << fmt(max_error(sol.y, ens, pr.y_exact)) << "\n";
        run.report << "max_error_z=" << fmt(max_error(sol.z, ens, pr.z_exact)) << "\n";
    }
}

void cmd_diag(Run& run, const RunConfig& cfg) {
    const PathEnsemble ens = ensemble_of(run, cfg);
    const Problem pr = ebsvie_problem(cfg, ens);
    if (!pr.spec.has_derivatives()) {
        throw ConfigError("problem '" + cfg.problem + "' has no derivative callbacks");
    }
    const RegressionCache cache = run.stage("regression", [&] { return RegressionCache(ens, basis_of(cfg)); });
    const EbsvieSolution sol = run.stage("solve", [&] { return solve_ebsvie(pr.spec, cache, solver_of(cfg)); });
    describe(run, "picard", sol.report);
    const DerivativeSolution der =
        run.stage("derivative", [&] { return solve_derivative_ebsvie(pr.spec, sol, cache, solver_of(cfg).scheme); });
    const AdaptedField diag = compute_diag(sol.z, der.dz);
    run.field("diag.csv", "diag_z", diag);
    run.field("dZ.csv", "dz", der.dz);
    if (pr.diag_exact) {
        double err = 0.0;
        for (std::size_t p = 0; p < ens.paths(); ++p) {
            for (std::size_t s = 0; s < ens.grid().size(); ++s) {
                err = std::max(err, std::abs(diag.at(p, s, 0) - pr.diag_exact(ens, p, s)));
            }
        }
        run.report << "max_error_diag=" << fmt(err) << "\n";
    }
}

void write_property_d(Run& run, const PropertyDReport& rep, bool analytic, const std::vector<double>& ts) {
    {
        auto os = run.open("property_d.csv");
        os << "schema=1\n# table=property_d\n" << (analytic ? "t" : "t_index") << ",eps,integral,average\n";
        for (std::size_t i = 0; i < rep.rows.size(); ++i) {
            const PropertyDRow& row = rep.rows[i];
            for (std::size_t k = 0; k < row.eps.size(); ++k) {
                os << (analytic ? fmt(ts[i]) : std::to_string(row.t_node)) << "," << fmt(row.eps[k]) << ","
                   << fmt(row.integrals[k]) << "," << fmt(row.averages[k]) << "\n";
            }
        }
    }
    {
        auto os = run.open("property_d.gp");
        os << "set datafile separator ','\nset logscale xy\nset xlabel 'eps'\nset ylabel 'integral'\n"
           << "plot 'property_d.csv' skip 3 using 2:3 with linespoints title 'E int |Z - Diag|'\n";
    }
    for (std::size_t i = 0; i < rep.rows.size(); ++i) {
        const PropertyDRow& row = rep.rows[i];
        const std::string label = "row" + std::to_string(i);
        run.report << label << ".t=" << (analytic ? fmt(ts[i]) : std::to_string(row.t_node)) << "\n";
        run.report << label << ".averages=";
        for (std::size_t k = 0; k < row.averages.size(); ++k) {
            run.report << (k ? "," : "") << fmt(row.averages[k]);
        }
        run.report << "\n" << label << ".slope=" << fmt(row.slope) << "\n"
                   << label << ".failure=" << (row.failure ? 1 : 0) << "\n"
                   << label << ".exact_zero=" << (row.exact_zero ? 1 : 0) << "\n";
        for (const auto& w : row.warnings) {
            run.report << label << ".warning=" << w << "\n";
        }
    }
    run.report << "property_d_failure=" << (rep.any_failure() ? 1 : 0) << "\n";
}

void cmd_property_d(Run& run, const RunConfig& cfg) {
    if (cfg.problem == "counterexample") {
        const double r = cfg.r;
        const PropertyDReport rep = run.stage("quadrature", [&] {
            return property_d_rate([r](double, double e) { return oracles::counterexample_integral(r, e); }, cfg.times,
                                   cfg.eps, cfg.s_hi);
        });
        write_property_d(run, rep, true, cfg.times);
        return;
    }
    const PathEnsemble ens = ensemble_of(run, cfg);
    const Problem pr = ebsvie_problem(cfg, ens);
    const RegressionCache cache = run.stage("regression", [&] { return RegressionCache(ens, basis_of(cfg)); });
    const EbsvieSolution sol = run.stage("solve", [&] { return solve_ebsvie(pr.spec, cache, solver_of(cfg)); });
    describe(run, "picard", sol.report);
    const DerivativeSolution der =
        run.stage("derivative", [&] { return solve_derivative_ebsvie(pr.spec, sol, cache, solver_of(cfg).scheme); });
    const AdaptedField diag = compute_diag(sol.z, der.dz);
    const PropertyDReport rep = property_d_rate(sol.z, diag, cfg.t_nodes, cfg.eps_steps);
    write_property_d(run, rep, false, {});
}

void write_bundle(Run& run, const RunConfig& cfg, const EquilibriumBundle& bundle) {
    describe(run, "cost", bundle.cost_report);
    describe(run, "first_order", bundle.first_order_report);
    describe(run, "second_order", bundle.second_order_report);
    run.report << "violation_measure=" << fmt(bundle.violation_measure) << "\ntol_h=" << fmt(bundle.tol_h)
               << "\ndz_fd_gap=" << fmt(bundle.dz_fd_gap) << "\ndq_fd_gap=" << fmt(bundle.dq_fd_gap) << "\n";
    for (std::size_t i = 0; i < bundle.worst_cells.size(); ++i) {
        const WorstCell& w = bundle.worst_cells[i];
        run.report << "worst" << i << "=node:" << w.node << " path:" << w.path << " control:" << w.control
                   << " gap:" << fmt(w.gap) << "\n";
    }
    auto os = run.open("h_surface.csv");
    os << "schema=1\n# table=h_surface controls=" << bundle.controls << "\nnode,path,control,value\n";
    const std::size_t paths =
        cfg.export_paths == 0 ? bundle.x_hat.paths() : std::min(cfg.export_paths, bundle.x_hat.paths());
    for (std::size_t j = 0; j + 1 < bundle.x_hat.nodes(); ++j) {
        for (std::size_t p = 0; p < paths; ++p) {
            for (std::size_t v = 0; v < bundle.controls; ++v) {
                os << j << "," << p << "," << v << "," << fmt(bundle.h_value(j, p, v)) << "\n";
            }
        }
    }
    run.field("x_hat.csv", "x_hat", bundle.x_hat);
}

void cmd_equilibrium_check(Run& run, const RunConfig& cfg) {
    const PathEnsemble ens = ensemble_of(run, cfg);
    const ControlProblem pr = control_problem(cfg);
    const ControlPolicy policy(ens.paths(), ens.grid().size(), control_index(pr, cfg.policy, "problem.policy"));
    const EquilibriumBundle bundle = run.stage("bundle", [&] { return build_bundle(pr, policy, ens, control_of(cfg)); });
    write_bundle(run, cfg, bundle);
}

void cmd_equilibrium_search(Run& run, const RunConfig& cfg) {
    const PathEnsemble ens = ensemble_of(run, cfg);
    const ControlProblem pr = control_problem(cfg);
    const ControlPolicy start(ens.paths(), ens.grid().size(), control_index(pr, cfg.policy, "problem.policy"));
    const SearchResult res = run.stage("search", [&] { return search_equilibrium(pr, start, ens, control_of(cfg)); });
    run.report << "rounds=" << res.rounds << "\nconverged=" << (res.converged ? 1 : 0)
               << "\noscillation=" << (res.oscillation ? 1 : 0) << "\ndamping_used=" << (res.damping_used ? 1 : 0)
               << "\nhistory=";
    for (std::size_t i = 0; i < res.history.size(); ++i) {
        run.report << (i ? "," : "") << fmt(res.history[i]);
    }
    run.report << "\n";
    run.all_converged = run.all_converged && res.converged;
    auto os = run.open("policy.csv");
    os << "schema=1\n# table=policy\nnode,path,control,value\n";
    const std::size_t paths = cfg.export_paths == 0 ? res.policy.paths() : std::min(cfg.export_paths, res.policy.paths());
    for (std::size_t j = 0; j < res.policy.nodes(); ++j) {
        for (std::size_t p = 0; p < paths; ++p) {
            const std::size_t v = res.policy.at(p, j);
            os << j << "," << p << "," << v << "," << fmt(pr.controls[v]) << "\n";
        }
    }
}

void cmd_variational_rates(Run& run, const RunConfig& cfg) {
    const PathEnsemble ens = ensemble_of(run, cfg);
    const ControlProblem pr = control_problem(cfg);
    const ControlPolicy policy(ens.paths(), ens.grid().size(), control_index(pr, cfg.policy, "problem.policy"));
    const std::size_t v = control_index(pr, cfg.spike, "problem.spike");
    const VariationalReport rep = run.stage("variational", [&] {
        return variational_rates(pr, policy, ens, control_of(cfg), cfg.tau, v, cfg.eps_steps);
    });
    {
        auto os = run.open("rates.csv");
        os << "schema=1\n# table=variational_rates\neps,x1,x2,remainder,residual,cost_gap,h_integral\n";
        for (std::size_t i = 0; i < rep.eps.size(); ++i) {
            os << fmt(rep.eps[i]) << "," << fmt(rep.x1[i]) << "," << fmt(rep.x2[i]) << "," << fmt(rep.remainder[i])
               << "," << fmt(rep.residual[i]) << "," << fmt(rep.cost_gap[i]) << "," << fmt(rep.h_integral[i]) << "\n";
        }
    }
    {
        auto os = run.open("rates.gp");
        os << "set datafile separator ','\nset logscale xy\nset xlabel 'eps'\n"
           << "plot 'rates.csv' skip 3 using 1:2 with linespoints title 'E sup |X1|^2', \\\n"
           << "     '' skip 3 using 1:3 with linespoints title 'E sup |X2|^2', \\\n"
           << "     '' skip 3 using 1:4 with linespoints title 'remainder', \\\n"
           << "     '' skip 3 using 1:5 with linespoints title 'cost residual'\n";
    }
    run.report << "slope_x1=" << fmt(rep.x1_slope) << "\nslope_x2=" << fmt(rep.x2_slope)
               << "\nslope_remainder=" << fmt(rep.remainder_slope) << "\nslope_residual=" << fmt(rep.residual_slope)
               << "\n";
    for (const auto& w : rep.warnings) {
        run.report << "warning=" << w << "\n";
    }
}

bool cmd_oracle_suite(Run& run, const RunConfig& cfg) {
    const auto results = run.stage("suite", [&] { return oracles::oracle_suite(cfg.seed); });
    bool ok = true;
    for (const auto& r : results) {
        const std::string verdict = r.passed ? "pass" : "fail";
        run.report << r.id << "=" << verdict << " error=" << fmt(r.error) << " tolerance=" << fmt(r.tolerance) << " "
                   << r.description << "\n";
        run.manifest_extra.push_back("oracle=" + r.id + " " + verdict);
        ok = ok && r.passed;
    }
    return ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Monte Carlo solvers for extended backward stochastic Volterra integral equations"};
    std::string command;
    std::string config_path;
    std::string output_dir;
    int threads = 0;
    bool strict = false;
    const std::vector<std::string> commands{"simulate",          "solve-bsde",          "solve-ebsvie",
                                            "solve-bsvie",       "diag",                "property-d",
                                            "equilibrium-check", "equilibrium-search",  "variational-rates",
                                            "oracle-suite"};
    app.add_option("command", command, "command to run")->required()->check(CLI::IsMember(commands));
    app.add_option("config", config_path, "run configuration (INI)");
    app.add_option("--output-dir,-o", output_dir, "artifact directory");
    app.add_option("--threads,-j", threads, "worker threads (default: all)")->check(CLI::NonNegativeNumber);
    app.add_flag("--strict", strict, "exit 3 when a solver does not converge");
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }
    if (threads > 0) {
        omp_set_num_threads(threads);
    }

    RunConfig cfg;
    try {
        if (!config_path.empty()) {
            cfg = load_config(config_path);
        } else {
            std::istringstream empty;
            cfg = parse_config(empty);
        }
    } catch (const ConfigError& e) {
        std::cerr << "error[config]: " << e.what() << "\n";
        return kExitConfig;
    }
    if (output_dir.empty()) {
        if (const char* env = std::getenv("EBSVIE_OUTPUT_DIR"); env != nullptr && *env != '\0') {
            output_dir = env;
        } else if (!cfg.output_dir.empty()) {
            output_dir = cfg.output_dir;
        } else {
            output_dir = "out";
        }
    }

    std::optional<Run> run;
    try {
        run.emplace(output_dir, cfg, command);
        bool ok = true;
        if (command == "simulate") {
            cmd_simulate(*run, cfg);
        } else if (command == "solve-bsde") {
            cmd_solve_bsde(*run, cfg);
        } else if (command == "solve-ebsvie") {
            cmd_solve_ebsvie(*run, cfg, false);
        } else if (command == "solve-bsvie") {
            cmd_solve_ebsvie(*run, cfg, true);
        } else if (command == "diag") {
            cmd_diag(*run, cfg);
        } else if (command == "property-d") {
            cmd_property_d(*run, cfg);
        } else if (command == "equilibrium-check") {
            cmd_equilibrium_check(*run, cfg);
        } else if (command == "equilibrium-search") {
            cmd_equilibrium_search(*run, cfg);
        } else if (command == "variational-rates") {
            cmd_variational_rates(*run, cfg);
        } else {
            ok = cmd_oracle_suite(*run, cfg);
        }
        const bool converged = run->all_converged;
        run->finish(!ok ? "failed" : (converged ? "ok" : "not_converged"));
        std::cout << run->report.str();
        if (!ok) {
            return kExitOther;
        }
        if (strict && !converged) {
            std::cerr << "error[not_converged]: a solver stopped before reaching its tolerance\n";
            return kExitNotConverged;
        }
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "error[config]: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ResourceError& e) {
        std::cerr << "error[resource]: " << e.what() << "\n";
        return kExitResource;
    } catch (const std::bad_alloc&) {
        std::cerr << "error[resource]: out of memory\n";
        return kExitResource;
    } catch (const std::exception& e) {
        std::cerr << "error[other]: " << e.what() << "\n";
        return kExitOther;
    }
}
