#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ebsvie {

/// Requested allocation exceeds the configured memory budget.
class ResourceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-finite value produced by a coefficient callback or a solver step.
class NumericalError : public std::runtime_error {
public:
    NumericalError(const std::string& what, std::size_t node, std::size_t path)
        : std::runtime_error(what + " (node " + std::to_string(node) + ", path " + std::to_string(path) + ")"),
          node_(node), path_(path) {}

    std::size_t node() const noexcept { return node_; }
    std::size_t path() const noexcept { return path_; }

private:
    std::size_t node_;
    std::size_t path_;
};

/// Malformed or out-of-range run configuration.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace ebsvie
