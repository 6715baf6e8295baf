#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ebsvie/grid.hpp"

namespace ebsvie {

/// One-time-parameter process sampled per (path, node), values of size dim.
/// Layout: [path][node][component].
class AdaptedField {
public:
    AdaptedField() = default;
    AdaptedField(TimeGrid grid, std::size_t paths, std::size_t dim, double fill = 0.0);

    const TimeGrid& grid() const noexcept { return grid_; }
    std::size_t paths() const noexcept { return paths_; }
    std::size_t dim() const noexcept { return dim_; }
    std::size_t nodes() const noexcept { return grid_.size(); }

    double& at(std::size_t path, std::size_t node, std::size_t c = 0) { return values_[index(path, node) + c]; }
    double at(std::size_t path, std::size_t node, std::size_t c = 0) const { return values_[index(path, node) + c]; }
    std::span<double> cell(std::size_t path, std::size_t node) { return {values_.data() + index(path, node), dim_}; }
    std::span<const double> cell(std::size_t path, std::size_t node) const {
        return {values_.data() + index(path, node), dim_};
    }
    std::span<double> raw() noexcept { return values_; }
    std::span<const double> raw() const noexcept { return values_; }

private:
    std::size_t index(std::size_t path, std::size_t node) const { return (path * grid_.size() + node) * dim_; }

    TimeGrid grid_{0.0, 1.0, 1};
    std::size_t paths_ = 0;
    std::size_t dim_ = 0;
    std::vector<double> values_;
};

/// Which part of the (t, s) square a bi-temporal field stores.
enum class Domain {
    full,   ///< all of [S,T]^2
    upper,  ///< s >= t only
};

/// Two-time-parameter field on a shared t/s grid.
/// Layout: [t][path][s][component]; under Domain::upper slice t holds s in [t, N].
class BiTemporalField {
public:
    BiTemporalField() = default;
    BiTemporalField(TimeGrid grid, std::size_t paths, std::size_t dim, Domain domain = Domain::full);

    const TimeGrid& grid() const noexcept { return grid_; }
    std::size_t paths() const noexcept { return paths_; }
    std::size_t dim() const noexcept { return dim_; }
    std::size_t nodes() const noexcept { return grid_.size(); }
    Domain domain() const noexcept { return domain_; }

    /// First stored s-node of slice t.
    std::size_t s_begin(std::size_t t) const noexcept { return domain_ == Domain::upper ? t : 0; }
    std::size_t slice_width(std::size_t t) const noexcept { return grid_.size() - s_begin(t); }
    std::size_t slice_size(std::size_t t) const noexcept { return paths_ * slice_width(t) * dim_; }
    bool contains(std::size_t t, std::size_t s) const noexcept { return s >= s_begin(t); }

    double& at(std::size_t t, std::size_t path, std::size_t s, std::size_t c = 0) {
        return values_[index(t, path, s) + c];
    }
    double at(std::size_t t, std::size_t path, std::size_t s, std::size_t c = 0) const {
        return values_[index(t, path, s) + c];
    }
    std::span<double> cell(std::size_t t, std::size_t path, std::size_t s) {
        return {values_.data() + index(t, path, s), dim_};
    }
    std::span<const double> cell(std::size_t t, std::size_t path, std::size_t s) const {
        return {values_.data() + index(t, path, s), dim_};
    }
    std::span<double> slice(std::size_t t) { return {values_.data() + offsets_[t], slice_size(t)}; }
    std::span<const double> slice(std::size_t t) const { return {values_.data() + offsets_[t], slice_size(t)}; }
    std::span<const double> raw() const noexcept { return values_; }

    /// Slice t as an adapted field; under Domain::upper nodes before t are zero.
    AdaptedField slice_field(std::size_t t) const;
    /// The stored diagonal y(s, s) as an adapted field.
    AdaptedField diagonal() const;

private:
    std::size_t index(std::size_t t, std::size_t path, std::size_t s) const {
        return offsets_[t] + (path * slice_width(t) + (s - s_begin(t))) * dim_;
    }

    TimeGrid grid_{0.0, 1.0, 1};
    std::size_t paths_ = 0;
    std::size_t dim_ = 0;
    Domain domain_ = Domain::full;
    std::vector<std::size_t> offsets_;
    std::vector<double> values_;
};

/// Exponent and weight of the exponentially weighted norm on field pairs.
struct BetaNorm {
    double beta = 0.0;
    double p = 2.0;

    void validate() const;
};

/// Ensemble means entering the weighted norm for a single t-slice:
/// upper = E[max_{s>=t}|y|^p + (int_t^T |z|^2)^{p/2}],
/// lower = E[max_{s<=t}|y|^p + (int_S^t |z|^2)^{p/2}].
struct SliceMoments {
    double upper = 0.0;
    double lower = 0.0;
};

/// Slice layout [path][s - s_begin][component]; z integrals use left-endpoint sums.
SliceMoments slice_moments(std::span<const double> y, std::span<const double> z, std::size_t paths,
                           std::size_t s_begin, std::size_t t, const TimeGrid& grid, std::size_t y_dim,
                           std::size_t z_dim, double p);

/// sup_t { e^{beta t} upper_t + lower_t }^{1/p}.
double combine_moments(std::span<const SliceMoments> moments, const TimeGrid& grid, const BetaNorm& norm);

/// sup_t (E[max_s |y(t,s)|^p])^{1/p}.
double empirical_sup_norm(const BiTemporalField& field, double p);

/// Discrete analogue of the exponentially weighted norm of (y, z).
double beta_norm(const BiTemporalField& y, const BiTemporalField& z, const BetaNorm& norm);

/// Brownian path values W(node) for every path, dim = ensemble.dim().
AdaptedField brownian_field(const PathEnsemble& ensemble);

/// Outputs of a producer for the adaptedness check.
struct ProducerOutput {
    std::vector<AdaptedField> adapted;
    std::vector<BiTemporalField> bitemporal;
};

using Producer = std::function<ProducerOutput(const PathEnsemble&)>;

/// True iff redrawing increments at steps >= node leaves every output at
/// s-nodes <= node unchanged to 1e-12.
bool scramble_test(const Producer& producer, const PathEnsemble& ensemble, std::size_t node,
                   std::uint64_t fresh_seed = 0x5eed'f00dULL);

/// Metadata written into CSV headers.
struct CsvMeta {
    std::string name;
    std::uint64_t seed = 0;
    std::size_t export_paths = 0;  ///< 0 = all paths
};

/// schema=1 CSV: rows (t_index, s_index, path, component, value).
void write_csv(std::ostream& os, const BiTemporalField& field, const CsvMeta& meta);
/// schema=1 CSV for an adapted field: rows (s_index, path, component, value).
void write_csv(std::ostream& os, const AdaptedField& field, const CsvMeta& meta);

/// Shortest round-trip decimal form of a double.
std::string format_double(double value);

}  // namespace ebsvie
