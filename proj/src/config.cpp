#include "ebsvie/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "ebsvie/errors.hpp"

namespace ebsvie {

namespace {

namespace pt = boost::property_tree;

const std::map<std::string, std::set<std::string>>& allowed_keys() {
    static const std::map<std::string, std::set<std::string>> keys{
        {"grid", {"s", "t", "n"}},
        {"ensemble", {"paths", "dim", "seed"}},
        {"solver",
         {"basis", "degree", "beta", "p", "tol", "max_iter", "theta", "corrections", "domain", "tol_h", "measure_tol",
          "damping", "max_rounds", "worst_cells"}},
        {"problem",
         {"name", "a", "b", "r", "c", "kappa", "lambda", "policy", "spike", "tau", "eps_steps", "eps", "times",
          "t_nodes"}},
        {"output", {"dir", "export_paths"}},
    };
    return keys;
}

std::string trim(const std::string& s) {
    const auto lo = s.find_first_not_of(" \t\r");
    if (lo == std::string::npos) {
        return {};
    }
    return s.substr(lo, s.find_last_not_of(" \t\r") - lo + 1);
}

template <class T>
T number(const std::string& key, const std::string& raw) {
    const std::string v = trim(raw);
    T out{};
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) {
        throw ConfigError("bad value for " + key + ": '" + raw + "'");
    }
    return out;
}

template <class T>
std::vector<T> list(const std::string& key, const std::string& raw) {
    std::vector<T> out;
    std::stringstream ss(raw);
    std::string item;
    while (std::getline(ss, item, ',')) {
        out.push_back(number<T>(key, item));
    }
    if (out.empty()) {
        throw ConfigError("empty list for " + key);
    }
    return out;
}

void require(bool ok, const std::string& what) {
    if (!ok) {
        throw ConfigError(what);
    }
}

}  // namespace

std::uint64_t fnv1a(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string canonical_problem(const std::string& name) {
    static const std::map<std::string, std::string> aliases{
        {"O1", "zero"},           {"zero", "zero"},
        {"O2", "martingale"},     {"martingale", "martingale"},
        {"O3", "volterra"},       {"volterra", "volterra"},
        {"O4", "exponential"},    {"exponential", "exponential"},
        {"O5", "counterexample"}, {"counterexample", "counterexample"},
        {"O6", "control-toy"},    {"control-toy", "control-toy"},
        {"stationary", "stationary"},
        {"spike-cost-toy", "spike-cost-toy"},
        {"volatility-toy", "volatility-toy"},
    };
    const auto it = aliases.find(name);
    if (it == aliases.end()) {
        throw ConfigError("unknown problem '" + name + "'");
    }
    return it->second;
}

RunConfig parse_config(std::istream& in) {
    RunConfig cfg;
    std::stringstream buffer;
    buffer << in.rdbuf();
    cfg.text = buffer.str();
    cfg.hash = fnv1a(cfg.text);

    pt::ptree tree;
    try {
        std::istringstream again(cfg.text);
        pt::read_ini(again, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    for (const auto& [section, body] : tree) {
        const auto known = allowed_keys().find(section);
        if (known == allowed_keys().end()) {
            throw ConfigError(body.empty() ? "key outside any section: " + section : "unknown section [" + section + "]");
        }
        for (const auto& [key, value] : body) {
            if (!known->second.contains(key)) {
                throw ConfigError("unknown key " + section + "." + key);
            }
        }
    }
    auto get = [&](const std::string& path) { return tree.get_optional<std::string>(path); };

    if (auto v = get("grid.s")) cfg.s_lo = number<double>("grid.s", *v);
    if (auto v = get("grid.t")) cfg.s_hi = number<double>("grid.t", *v);
    if (auto v = get("grid.n")) cfg.steps = number<std::size_t>("grid.n", *v);
    if (auto v = get("ensemble.paths")) cfg.paths = number<std::size_t>("ensemble.paths", *v);
    if (auto v = get("ensemble.dim")) cfg.dim = number<std::size_t>("ensemble.dim", *v);
    if (auto v = get("ensemble.seed")) cfg.seed = number<std::uint64_t>("ensemble.seed", *v);

    if (auto v = get("solver.basis")) {
        const std::string s = trim(*v);
        require(s == "brownian" || s == "state", "solver.basis must be brownian or state");
        cfg.basis = s == "brownian" ? BasisKind::brownian : BasisKind::state;
    }
    if (auto v = get("solver.degree")) cfg.degree = number<int>("solver.degree", *v);
    if (auto v = get("solver.beta")) {
        if (trim(*v) == "auto") {
            cfg.auto_beta = true;
        } else {
            cfg.auto_beta = false;
            cfg.beta = number<double>("solver.beta", *v);
        }
    }
    if (auto v = get("solver.p")) cfg.norm_p = number<double>("solver.p", *v);
    if (auto v = get("solver.tol")) {
        cfg.tol = number<double>("solver.tol", *v);
        cfg.tol_set = true;
    }
    if (auto v = get("solver.max_iter")) cfg.max_iter = number<int>("solver.max_iter", *v);
    if (auto v = get("solver.theta")) cfg.theta = number<double>("solver.theta", *v);
    if (auto v = get("solver.corrections")) cfg.corrections = number<int>("solver.corrections", *v);
    if (auto v = get("solver.domain")) {
        const std::string s = trim(*v);
        require(s == "full" || s == "upper", "solver.domain must be full or upper");
        cfg.domain = s == "full" ? Domain::full : Domain::upper;
    }
    if (auto v = get("solver.tol_h")) cfg.tol_h = number<double>("solver.tol_h", *v);
    if (auto v = get("solver.measure_tol")) cfg.measure_tol = number<double>("solver.measure_tol", *v);
    if (auto v = get("solver.damping")) cfg.damping = number<double>("solver.damping", *v);
    if (auto v = get("solver.max_rounds")) cfg.max_rounds = number<int>("solver.max_rounds", *v);
    if (auto v = get("solver.worst_cells")) cfg.worst_cells = number<std::size_t>("solver.worst_cells", *v);

    if (auto v = get("problem.name")) cfg.problem = canonical_problem(trim(*v));
    if (auto v = get("problem.a")) cfg.a = number<double>("problem.a", *v);
    if (auto v = get("problem.b")) cfg.b = number<double>("problem.b", *v);
    if (auto v = get("problem.r")) cfg.r = number<double>("problem.r", *v);
    if (auto v = get("problem.c")) cfg.c = number<double>("problem.c", *v);
    if (auto v = get("problem.kappa")) cfg.kappa = number<double>("problem.kappa", *v);
    if (auto v = get("problem.lambda")) cfg.lambda = number<double>("problem.lambda", *v);
    if (auto v = get("problem.policy")) cfg.policy = number<double>("problem.policy", *v);
    if (auto v = get("problem.spike")) cfg.spike = number<double>("problem.spike", *v);
    if (auto v = get("problem.tau")) cfg.tau = number<std::size_t>("problem.tau", *v);
    if (auto v = get("problem.eps_steps")) cfg.eps_steps = list<std::size_t>("problem.eps_steps", *v);
    if (auto v = get("problem.eps")) cfg.eps = list<double>("problem.eps", *v);
    if (auto v = get("problem.times")) cfg.times = list<double>("problem.times", *v);
    if (auto v = get("problem.t_nodes")) cfg.t_nodes = list<std::size_t>("problem.t_nodes", *v);

    if (auto v = get("output.dir")) cfg.output_dir = trim(*v);
    if (auto v = get("output.export_paths")) cfg.export_paths = number<std::size_t>("output.export_paths", *v);

    require(std::isfinite(cfg.s_lo) && std::isfinite(cfg.s_hi) && cfg.s_lo < cfg.s_hi, "grid needs finite s < t");
    require(cfg.steps >= 1 && cfg.steps <= 100000, "grid.n must lie in [1, 100000]");
    require(cfg.paths >= 1 && cfg.paths <= 10000000, "ensemble.paths must lie in [1, 1e7]");
    require(cfg.dim >= 1 && cfg.dim <= 16, "ensemble.dim must lie in [1, 16]");
    require(cfg.degree >= 0 && cfg.degree <= 6, "solver.degree must lie in [0, 6]");
    require(cfg.auto_beta || (std::isfinite(cfg.beta) && cfg.beta >= 0.0), "solver.beta must be auto or >= 0");
    require(cfg.norm_p >= 2.0 && std::isfinite(cfg.norm_p), "solver.p must be >= 2");
    require(cfg.tol > 0.0, "solver.tol must be positive");
    require(cfg.max_iter >= 1 && cfg.max_iter <= 10000, "solver.max_iter must lie in [1, 10000]");
    require(cfg.theta >= 0.0 && cfg.theta <= 1.0, "solver.theta must lie in [0, 1]");
    require(cfg.corrections >= 0 && cfg.corrections <= 20, "solver.corrections must lie in [0, 20]");
    require(cfg.tol_h > 0.0, "solver.tol_h must be positive");
    require(cfg.damping >= 0.0 && cfg.damping < 1.0, "solver.damping must lie in [0, 1)");
    require(cfg.max_rounds >= 1 && cfg.max_rounds <= 1000, "solver.max_rounds must lie in [1, 1000]");
    require(cfg.r > 1.0, "problem.r must exceed 1");
    for (double e : cfg.eps) {
        require(e > 0.0, "problem.eps entries must be positive");
    }
    for (std::size_t k : cfg.eps_steps) {
        require(k >= 1, "problem.eps_steps entries must be positive");
    }
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot read config file " + path);
    }
    return parse_config(in);
}

}  // namespace ebsvie
