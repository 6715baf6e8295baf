#pragma once

#include <cstdint>
#include <istream>
#include <string>
#include <vector>

#include "ebsvie/fields.hpp"
#include "ebsvie/regression.hpp"

namespace ebsvie {

/// One run of the command-line tool. Sections: [grid] [ensemble] [solver] [problem] [output].
struct RunConfig {
    // [grid]
    double s_lo = 0.0;
    double s_hi = 1.0;
    std::size_t steps = 32;
    // [ensemble]
    std::size_t paths = 1000;
    std::size_t dim = 1;
    std::uint64_t seed = 1;
    // [solver]
    BasisKind basis = BasisKind::brownian;
    int degree = 2;
    bool auto_beta = true;
    double beta = 0.0;
    double norm_p = 2.0;
    double tol = 1e-8;
    bool tol_set = false;  ///< control commands keep their own default unless tol is given
    int max_iter = 50;
    double theta = 0.5;
    int corrections = 2;
    Domain domain = Domain::full;
    double tol_h = 1e-2;
    double measure_tol = -1.0;
    double damping = 0.0;
    int max_rounds = 10;
    std::size_t worst_cells = 10;
    // [problem]
    std::string problem = "volterra";
    double a = 0.5;
    double b = 0.2;
    double r = 2.0;
    double c = 0.5;
    double kappa = 0.0;
    double lambda = 1.0;
    double policy = 0.0;  ///< constant initial control value
    double spike = 1.0;   ///< spike control value
    std::size_t tau = 0;
    std::vector<std::size_t> eps_steps{4, 8, 16};
    std::vector<double> eps{0.04, 0.02, 0.01};
    std::vector<double> times{0.0};
    std::vector<std::size_t> t_nodes{0};
    // [output]
    std::string output_dir;
    std::size_t export_paths = 0;

    std::string text;        ///< raw config text
    std::uint64_t hash = 0;  ///< FNV-1a of text
};

/// Strict parse: unknown sections or keys, malformed numbers and out-of-range values throw ConfigError.
RunConfig parse_config(std::istream& in);
RunConfig load_config(const std::string& path);

/// Canonical problem name for an alias such as "O3", or ConfigError.
std::string canonical_problem(const std::string& name);

std::uint64_t fnv1a(const std::string& text);

}  // namespace ebsvie
