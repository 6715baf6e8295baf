#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace ebsvie {

/// Uniform partition of [lo, hi] into `steps` intervals.
class TimeGrid {
public:
    TimeGrid(double lo, double hi, std::size_t steps);

    double lo() const noexcept { return lo_; }
    double hi() const noexcept { return hi_; }
    double dt() const noexcept { return dt_; }
    std::size_t steps() const noexcept { return steps_; }
    std::size_t size() const noexcept { return steps_ + 1; }
    double node(std::size_t i) const { return nodes_[i]; }
    std::span<const double> nodes() const noexcept { return nodes_; }

    /// Sub-grid [node(from), hi] sharing this grid's nodes.
    TimeGrid tail(std::size_t from) const;

    bool operator==(const TimeGrid& other) const noexcept {
        return lo_ == other.lo_ && hi_ == other.hi_ && steps_ == other.steps_;
    }

private:
    TimeGrid(double lo, double hi, std::size_t steps, std::vector<double> nodes);

    double lo_;
    double hi_;
    std::size_t steps_;
    double dt_;
    std::vector<double> nodes_;
};

TimeGrid make_grid(double lo, double hi, std::size_t steps);

/// Default cap on the increment array, in bytes.
inline constexpr std::size_t kDefaultMemoryBudget = std::size_t{2} << 30;

/// Brownian increments dW for M paths on a grid, d coordinates each.
/// Storage is path-major: increment(path, step, coord).
class PathEnsemble {
public:
    PathEnsemble(TimeGrid grid, std::size_t paths, std::size_t dim, std::uint64_t seed,
                 std::vector<double> increments);

    const TimeGrid& grid() const noexcept { return grid_; }
    std::size_t paths() const noexcept { return paths_; }
    std::size_t dim() const noexcept { return dim_; }
    std::size_t steps() const noexcept { return grid_.steps(); }
    std::uint64_t seed() const noexcept { return seed_; }

    double increment(std::size_t path, std::size_t step, std::size_t coord) const {
        return increments_[(path * grid_.steps() + step) * dim_ + coord];
    }
    std::span<const double> increments(std::size_t path, std::size_t step) const {
        return {increments_.data() + (path * grid_.steps() + step) * dim_, dim_};
    }
    std::span<const double> raw() const noexcept { return increments_; }

    /// W(node) for one path and coordinate, as a prefix sum of increments.
    double brownian(std::size_t path, std::size_t node, std::size_t coord) const;

    /// Copy with increments at steps >= from_step redrawn from a fresh stream.
    PathEnsemble with_resampled_future(std::size_t from_step, std::uint64_t fresh_seed) const;

    /// Ensemble on grid().tail(from_node) reusing the same increments.
    PathEnsemble tail(std::size_t from_node) const;

private:
    TimeGrid grid_;
    std::size_t paths_;
    std::size_t dim_;
    std::uint64_t seed_;
    std::vector<double> increments_;
};

/// Seeded N(0, dt) increments. Path m uses Philox stream m under `seed`, so the
/// first k paths are identical whatever the number of paths requested.
PathEnsemble simulate_paths(const TimeGrid& grid, std::size_t paths, std::size_t dim, std::uint64_t seed,
                            std::size_t memory_budget = kDefaultMemoryBudget);

}  // namespace ebsvie
