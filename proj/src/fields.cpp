#include "ebsvie/fields.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <ostream>
#include <stdexcept>

namespace ebsvie {

AdaptedField::AdaptedField(TimeGrid grid, std::size_t paths, std::size_t dim, double fill)
    : grid_(std::move(grid)), paths_(paths), dim_(dim), values_(paths * grid_.size() * dim, fill) {}

BiTemporalField::BiTemporalField(TimeGrid grid, std::size_t paths, std::size_t dim, Domain domain)
    : grid_(std::move(grid)), paths_(paths), dim_(dim), domain_(domain) {
    offsets_.resize(grid_.size());
    std::size_t total = 0;
    for (std::size_t t = 0; t < grid_.size(); ++t) {
        offsets_[t] = total;
        total += slice_size(t);
    }
    values_.assign(total, 0.0);
}

AdaptedField BiTemporalField::slice_field(std::size_t t) const {
    AdaptedField out(grid_, paths_, dim_);
    for (std::size_t m = 0; m < paths_; ++m) {
        for (std::size_t s = s_begin(t); s < grid_.size(); ++s) {
            std::ranges::copy(cell(t, m, s), out.cell(m, s).begin());
        }
    }
    return out;
}

AdaptedField BiTemporalField::diagonal() const {
    AdaptedField out(grid_, paths_, dim_);
    for (std::size_t m = 0; m < paths_; ++m) {
        for (std::size_t s = 0; s < grid_.size(); ++s) {
            std::ranges::copy(cell(s, m, s), out.cell(m, s).begin());
        }
    }
    return out;
}

void BetaNorm::validate() const {
    if (!(beta >= 0.0) || !std::isfinite(beta)) {
        throw std::invalid_argument("beta must be a finite nonnegative number");
    }
    if (!(p >= 2.0) || !std::isfinite(p)) {
        throw std::invalid_argument("norm exponent p must be at least 2");
    }
}

namespace {

double euclid(std::span<const double> v) {
    double acc = 0.0;
    for (double x : v) {
        acc += x * x;
    }
    return std::sqrt(acc);
}

double power(double x, double p) { return p == 2.0 ? x * x : std::pow(x, p); }

}  // namespace

SliceMoments slice_moments(std::span<const double> y, std::span<const double> z, std::size_t paths,
                           std::size_t s_begin, std::size_t t, const TimeGrid& grid, std::size_t y_dim,
                           std::size_t z_dim, double p) {
    const std::size_t width = grid.size() - s_begin;
    const double dt = grid.dt();
    double upper = 0.0;
    double lower = 0.0;
    for (std::size_t m = 0; m < paths; ++m) {
        const double* yp = y.data() + m * width * y_dim;
        const double* zp = z.data() + m * width * z_dim;
        double sup_up = 0.0;
        double sup_lo = 0.0;
        double int_up = 0.0;
        double int_lo = 0.0;
        for (std::size_t k = 0; k < width; ++k) {
            const std::size_t s = s_begin + k;
            const double ny = euclid({yp + k * y_dim, y_dim});
            if (s >= t) {
                sup_up = std::max(sup_up, ny);
            }
            if (s <= t) {
                sup_lo = std::max(sup_lo, ny);
            }
            if (s < grid.steps()) {
                const double nz = euclid({zp + k * z_dim, z_dim});
                if (s >= t) {
                    int_up += nz * nz * dt;
                } else {
                    int_lo += nz * nz * dt;
                }
            }
        }
        upper += power(sup_up, p) + std::pow(int_up, p / 2.0);
        lower += power(sup_lo, p) + std::pow(int_lo, p / 2.0);
    }
    const auto n = static_cast<double>(paths);
    return {upper / n, lower / n};
}

double combine_moments(std::span<const SliceMoments> moments, const TimeGrid& grid, const BetaNorm& norm) {
    double sup = 0.0;
    for (std::size_t t = 0; t < moments.size(); ++t) {
        const double value = std::exp(norm.beta * grid.node(t)) * moments[t].upper + moments[t].lower;
        sup = std::max(sup, value);
    }
    return std::pow(sup, 1.0 / norm.p);
}

double empirical_sup_norm(const BiTemporalField& field, double p) {
    if (field.paths() == 0) {
        throw std::invalid_argument("empirical norm of an empty ensemble");
    }
    if (!(p >= 1.0)) {
        throw std::invalid_argument("norm exponent must be at least 1");
    }
    double sup = 0.0;
    for (std::size_t t = 0; t < field.nodes(); ++t) {
        double acc = 0.0;
        for (std::size_t m = 0; m < field.paths(); ++m) {
            double path_sup = 0.0;
            for (std::size_t s = field.s_begin(t); s < field.nodes(); ++s) {
                path_sup = std::max(path_sup, euclid(field.cell(t, m, s)));
            }
            acc += std::pow(path_sup, p);
        }
        sup = std::max(sup, std::pow(acc / static_cast<double>(field.paths()), 1.0 / p));
    }
    return sup;
}

double beta_norm(const BiTemporalField& y, const BiTemporalField& z, const BetaNorm& norm) {
    norm.validate();
    if (!(y.grid() == z.grid()) || y.paths() != z.paths() || y.domain() != z.domain()) {
        throw std::invalid_argument("beta_norm: field shapes do not match");
    }
    if (y.paths() == 0) {
        throw std::invalid_argument("beta_norm: empty ensemble");
    }
    std::vector<SliceMoments> moments(y.nodes());
    for (std::size_t t = 0; t < y.nodes(); ++t) {
        moments[t] = slice_moments(y.slice(t), z.slice(t), y.paths(), y.s_begin(t), t, y.grid(), y.dim(), z.dim(),
                                   norm.p);
    }
    return combine_moments(moments, y.grid(), norm);
}

AdaptedField brownian_field(const PathEnsemble& ensemble) {
    AdaptedField w(ensemble.grid(), ensemble.paths(), ensemble.dim());
    for (std::size_t m = 0; m < ensemble.paths(); ++m) {
        for (std::size_t i = 0; i < ensemble.steps(); ++i) {
            for (std::size_t j = 0; j < ensemble.dim(); ++j) {
                w.at(m, i + 1, j) = w.at(m, i, j) + ensemble.increment(m, i, j);
            }
        }
    }
    return w;
}

namespace {

bool close(double a, double b) { return std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(a)); }

}  // namespace

bool scramble_test(const Producer& producer, const PathEnsemble& ensemble, std::size_t node,
                   std::uint64_t fresh_seed) {
    const ProducerOutput base = producer(ensemble);
    const ProducerOutput other = producer(ensemble.with_resampled_future(node, fresh_seed));
    if (base.adapted.size() != other.adapted.size() || base.bitemporal.size() != other.bitemporal.size()) {
        return false;
    }
    for (std::size_t f = 0; f < base.adapted.size(); ++f) {
        const auto& a = base.adapted[f];
        const auto& b = other.adapted[f];
        const std::size_t last = std::min(node, a.nodes() - 1);
        for (std::size_t m = 0; m < a.paths(); ++m) {
            for (std::size_t s = 0; s <= last; ++s) {
                for (std::size_t c = 0; c < a.dim(); ++c) {
                    if (!close(a.at(m, s, c), b.at(m, s, c))) {
                        return false;
                    }
                }
            }
        }
    }
    for (std::size_t f = 0; f < base.bitemporal.size(); ++f) {
        const auto& a = base.bitemporal[f];
        const auto& b = other.bitemporal[f];
        const std::size_t last = std::min(node, a.nodes() - 1);
        for (std::size_t t = 0; t < a.nodes(); ++t) {
            for (std::size_t m = 0; m < a.paths(); ++m) {
                for (std::size_t s = a.s_begin(t); s <= last; ++s) {
                    for (std::size_t c = 0; c < a.dim(); ++c) {
                        if (!close(a.at(t, m, s, c), b.at(t, m, s, c))) {
                            return false;
                        }
                    }
                }
            }
        }
    }
    return true;
}

std::string format_double(double value) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, value);
    return std::string(buf, res.ptr);
}

namespace {

void write_header(std::ostream& os, const TimeGrid& grid, std::size_t paths, std::size_t dim, const CsvMeta& meta,
                  const char* kind) {
    os << "schema=1\n";
    os << "# field=" << meta.name << " kind=" << kind << " s_lo=" << format_double(grid.lo())
       << " s_hi=" << format_double(grid.hi()) << " n_steps=" << grid.steps() << " paths=" << paths
       << " dim=" << dim << " seed=" << meta.seed << '\n';
}

std::size_t exported(std::size_t paths, const CsvMeta& meta) {
    return meta.export_paths == 0 ? paths : std::min(paths, meta.export_paths);
}

}  // namespace

void write_csv(std::ostream& os, const BiTemporalField& field, const CsvMeta& meta) {
    write_header(os, field.grid(), field.paths(), field.dim(), meta, "bitemporal");
    os << "t_index,s_index,path,component,value\n";
    const std::size_t paths = exported(field.paths(), meta);
    for (std::size_t t = 0; t < field.nodes(); ++t) {
        for (std::size_t s = field.s_begin(t); s < field.nodes(); ++s) {
            for (std::size_t m = 0; m < paths; ++m) {
                for (std::size_t c = 0; c < field.dim(); ++c) {
                    os << t << ',' << s << ',' << m << ',' << c << ',' << format_double(field.at(t, m, s, c)) << '\n';
                }
            }
        }
    }
}

void write_csv(std::ostream& os, const AdaptedField& field, const CsvMeta& meta) {
    write_header(os, field.grid(), field.paths(), field.dim(), meta, "adapted");
    os << "s_index,path,component,value\n";
    const std::size_t paths = exported(field.paths(), meta);
    for (std::size_t s = 0; s < field.nodes(); ++s) {
        for (std::size_t m = 0; m < paths; ++m) {
            for (std::size_t c = 0; c < field.dim(); ++c) {
                os << s << ',' << m << ',' << c << ',' << format_double(field.at(m, s, c)) << '\n';
            }
        }
    }
}

}  // namespace ebsvie
