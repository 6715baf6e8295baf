#include "ebsvie/grid.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "ebsvie/errors.hpp"
#include "ebsvie/philox.hpp"

namespace ebsvie {

namespace {

std::vector<double> uniform_nodes(double lo, double hi, std::size_t steps) {
    std::vector<double> nodes(steps + 1);
    const double width = hi - lo;
    for (std::size_t i = 0; i <= steps; ++i) {
        nodes[i] = lo + width * (static_cast<double>(i) / static_cast<double>(steps));
    }
    nodes[steps] = hi;
    return nodes;
}

}  // namespace

TimeGrid::TimeGrid(double lo, double hi, std::size_t steps) : lo_(lo), hi_(hi), steps_(steps), dt_(0.0) {
    if (!std::isfinite(lo) || !std::isfinite(hi)) {
        throw std::invalid_argument("time grid bounds must be finite");
    }
    if (!(lo < hi)) {
        throw std::invalid_argument("time grid requires lo < hi");
    }
    if (steps == 0) {
        throw std::invalid_argument("time grid requires at least one step");
    }
    dt_ = (hi - lo) / static_cast<double>(steps);
    nodes_ = uniform_nodes(lo, hi, steps);
}

TimeGrid::TimeGrid(double lo, double hi, std::size_t steps, std::vector<double> nodes)
    : lo_(lo), hi_(hi), steps_(steps), dt_((hi - lo) / static_cast<double>(steps)), nodes_(std::move(nodes)) {}

TimeGrid TimeGrid::tail(std::size_t from) const {
    if (from >= steps_) {
        throw std::invalid_argument("tail grid must keep at least one step");
    }
    std::vector<double> nodes(nodes_.begin() + static_cast<std::ptrdiff_t>(from), nodes_.end());
    const double lo = nodes.front();
    TimeGrid out(lo, hi_, steps_ - from, std::move(nodes));
    // keep the parent's step exactly so tail computations reproduce the parent's arithmetic
    out.dt_ = dt_;
    return out;
}

TimeGrid make_grid(double lo, double hi, std::size_t steps) { return TimeGrid(lo, hi, steps); }

PathEnsemble::PathEnsemble(TimeGrid grid, std::size_t paths, std::size_t dim, std::uint64_t seed,
                           std::vector<double> increments)
    : grid_(std::move(grid)), paths_(paths), dim_(dim), seed_(seed), increments_(std::move(increments)) {
    if (increments_.size() != paths_ * grid_.steps() * dim_) {
        throw std::invalid_argument("increment array does not match ensemble shape");
    }
}

double PathEnsemble::brownian(std::size_t path, std::size_t node, std::size_t coord) const {
    double w = 0.0;
    for (std::size_t i = 0; i < node; ++i) {
        w += increment(path, i, coord);
    }
    return w;
}

namespace {

void fill_increments(std::span<double> out, std::size_t paths, std::size_t steps, std::size_t dim, double dt,
                     std::uint64_t seed, std::size_t from_step) {
    const double scale = std::sqrt(dt);
    const auto n_paths = static_cast<std::ptrdiff_t>(paths);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t m = 0; m < n_paths; ++m) {
        const GaussianStream stream(seed, static_cast<std::uint64_t>(m));
        double* row = out.data() + static_cast<std::size_t>(m) * steps * dim;
        for (std::size_t k = from_step * dim; k < steps * dim; ++k) {
            row[k] = scale * stream.normal(k);
        }
    }
}

}  // namespace

PathEnsemble PathEnsemble::with_resampled_future(std::size_t from_step, std::uint64_t fresh_seed) const {
    std::vector<double> inc = increments_;
    fill_increments(inc, paths_, grid_.steps(), dim_, grid_.dt(), fresh_seed, std::min(from_step, grid_.steps()));
    return PathEnsemble(grid_, paths_, dim_, seed_, std::move(inc));
}

PathEnsemble PathEnsemble::tail(std::size_t from_node) const {
    TimeGrid sub = grid_.tail(from_node);
    const std::size_t steps = sub.steps();
    std::vector<double> inc(paths_ * steps * dim_);
    for (std::size_t m = 0; m < paths_; ++m) {
        for (std::size_t i = 0; i < steps; ++i) {
            for (std::size_t j = 0; j < dim_; ++j) {
                inc[(m * steps + i) * dim_ + j] = increment(m, from_node + i, j);
            }
        }
    }
    return PathEnsemble(std::move(sub), paths_, dim_, seed_, std::move(inc));
}

PathEnsemble simulate_paths(const TimeGrid& grid, std::size_t paths, std::size_t dim, std::uint64_t seed,
                            std::size_t memory_budget) {
    if (paths == 0) {
        throw std::invalid_argument("ensemble needs at least one path");
    }
    if (dim == 0) {
        throw std::invalid_argument("Brownian dimension must be at least one");
    }
    const std::size_t cells_per_path = grid.steps() * dim;
    if (paths > std::numeric_limits<std::size_t>::max() / sizeof(double) / cells_per_path ||
        paths * cells_per_path * sizeof(double) > memory_budget) {
        throw ResourceError("increment array of " + std::to_string(paths) + " x " + std::to_string(grid.steps()) +
                            " x " + std::to_string(dim) + " exceeds the memory budget of " +
                            std::to_string(memory_budget) + " bytes");
    }
    std::vector<double> inc(paths * cells_per_path);
    fill_increments(inc, paths, grid.steps(), dim, grid.dt(), seed, 0);
    return PathEnsemble(grid, paths, dim, seed, std::move(inc));
}

}  // namespace ebsvie
