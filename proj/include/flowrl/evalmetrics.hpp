#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "flowrl/toyworld.hpp"

namespace flowrl::evalm {

struct MatcherTolerances {
  double stol = 0.5;  // normalized-site tolerance
  double ltol = 0.3;  // per-axis relative cell-length tolerance
  int n_max = 8;      // brute-force permutation bound
};

struct RmsdOutcome {
  bool cell_ok;    // false: some cell-length ratio deviates from 1 by > ltol
  double rmsd;     // normalized rmsd (valid when cell_ok)
  bool matched;    // cell_ok && rmsd <= stol
};

/// Brute-force periodic matcher.
///
/// Semantics (this is the full definition; there is no hidden reference
/// algorithm):
///  1. Compositions must be equal as multisets, else an exception.
///  2. If any per-axis ratio cand.cell[a]/ref.cell[a] deviates from 1 by
///     more than ltol, the result is no-match with cell_ok = false.
///  3. Otherwise minimize over all same-species atom permutations
///     (exhaustive, n <= n_max) and over a global fractional translation:
///     for each permutation, the translation starts from the centroid of the
///     per-atom minimum-image displacements, a 5^d grid of offsets
///     {-0.2, -0.1, 0, 0.1, 0.2} per axis is applied around it, and each grid
///     point is recentered once to the mean of its branch-fixed residuals.
///  4. The score is the root-mean-square Cartesian minimum-image
///     displacement (Cartesian via the reference cell), divided by
///     (V_ref / n)^(1/d). Match iff score <= stol.
///
/// The result is invariant under coordinate wrap, global torus translation
/// and same-species permutation of either argument. Swapping the arguments
/// changes only the normalization volume and the Cartesian scale.
RmsdOutcome periodic_rmsd(const world::ToyStructure& cand,
                          const world::ToyStructure& ref,
                          const MatcherTolerances& tol);

struct GeneratedSample {
  int comp_index;
  world::ToyStructure structure;
};

/// Fraction of samples matching the designated reference of their
/// composition, plus mean normalized rmsd over the matched pairs (absent when
/// nothing matched).
std::pair<double, std::optional<double>> match_rate(
    const std::vector<GeneratedSample>& gen, const world::ReferenceSet& refs,
    world::Split split, const MatcherTolerances& tol);

/// Coverage of the reference polymorphs in the split: for each reference,
/// the best match among generated structures of the same composition.
/// Returns (matched fraction, mean best rmsd with unmatched references
/// contributing stol).
std::pair<double, double> metre_crmse(const std::vector<GeneratedSample>& gen,
                                      const world::ReferenceSet& refs,
                                      world::Split split,
                                      const MatcherTolerances& tol);

/// (mean of E/n relative to the composition's reference over valid samples,
/// fraction of invalid samples).
std::pair<double, double> energy_stats(const std::vector<GeneratedSample>& gen,
                                       const world::ReferenceSet& refs,
                                       const world::EnergyModelParams& p,
                                       const world::ValidityThresholds& vt);

struct EvalReport {
  double match_rate = 0.0;
  std::optional<double> rmse;
  double metre = 0.0;
  double crmse = 0.0;
  double mean_rel_energy = 0.0;
  double invalid_rate = 0.0;
  int n_t = 0;
  int sample_count = 0;
};

EvalReport evaluate_samples(const std::vector<GeneratedSample>& gen,
                            const world::ReferenceSet& refs, world::Split split,
                            const MatcherTolerances& tol,
                            const world::EnergyModelParams& p,
                            const world::ValidityThresholds& vt, int n_t);

}  // namespace flowrl::evalm
