#pragma once

#include "ebsvie/bsde.hpp"
#include "ebsvie/ebsvie.hpp"

/// Serial solvers kept as a baseline for the parallel ones. They rebuild every design matrix
/// per step and solve it with a complete orthogonal decomposition. Slow, but short enough to audit.
namespace ebsvie::reference {

BsdeSolution solve_bsde(const BsdeSpec& spec, const PathEnsemble& ensemble, const RegressionBasis& basis,
                        const SchemeOptions& scheme = {});

EbsvieSolution solve_ebsvie(const EbsvieSpec& spec, const PathEnsemble& ensemble, const RegressionBasis& basis,
                            const SolverOptions& options = {});

}  // namespace ebsvie::reference
