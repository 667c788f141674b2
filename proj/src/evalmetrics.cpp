#include "flowrl/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "flowrl/interpolants.hpp"
#include "flowrl/parallel.hpp"

namespace flowrl::evalm {

namespace {

using world::ToyStructure;

// atom indices grouped by species, each group sorted
std::vector<std::vector<int>> species_blocks(const world::Composition& c) {
  std::vector<int> uniq = c.species;
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  std::vector<std::vector<int>> blocks;
  for (int sp : uniq) {
    std::vector<int> idx;
    for (int i = 0; i < c.n(); ++i)
      if (c.species[std::size_t(i)] == sp) idx.push_back(i);
    blocks.push_back(std::move(idx));
  }
  return blocks;
}

bool same_multiset(const world::Composition& a, const world::Composition& b) {
  std::vector<int> sa = a.species, sb = b.species;
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  return sa == sb;
}

// mean squared Cartesian min-image displacement for a fixed atom mapping and
// translation, using the reference cell for the Cartesian scale
double mapping_cost(const ToyStructure& cand, const ToyStructure& ref,
                    const std::vector<int>& cand_for_ref,
                    const std::vector<double>& tau) {
  const int d = ref.dim();
  const int n = ref.comp.n();
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const int j = cand_for_ref[std::size_t(i)];
    for (int a = 0; a < d; ++a) {
      const double df = interp::min_image(cand.frac[std::size_t(j * d + a)] -
                                          ref.frac[std::size_t(i * d + a)] -
                                          tau[std::size_t(a)]);
      const double dc = df * ref.cell[std::size_t(a)];
      acc += dc * dc;
    }
  }
  return acc / double(n);
}

// best translation for a fixed mapping: centroid of min-image displacements,
// refined on the documented 5^d offset grid with one recentering pass
double best_cost_for_mapping(const ToyStructure& cand, const ToyStructure& ref,
                             const std::vector<int>& cand_for_ref) {
  const int d = ref.dim();
  const int n = ref.comp.n();
  std::vector<double> delta(static_cast<std::size_t>(n * d));
  std::vector<double> centroid(std::size_t(d), 0.0);
  for (int i = 0; i < n; ++i) {
    const int j = cand_for_ref[std::size_t(i)];
    for (int a = 0; a < d; ++a) {
      const double df = interp::min_image(cand.frac[std::size_t(j * d + a)] -
                                          ref.frac[std::size_t(i * d + a)]);
      delta[std::size_t(i * d + a)] = df;
      centroid[std::size_t(a)] += df / double(n);
    }
  }

  static const double kOffsets[5] = {-0.2, -0.1, 0.0, 0.1, 0.2};
  const int n_grid = [](int dim) {
    int g = 1;
    for (int k = 0; k < dim; ++k) g *= 5;
    return g;
  }(d);

  double best = std::numeric_limits<double>::infinity();
  std::vector<double> tau(static_cast<std::size_t>(d));
  for (int g = 0; g < n_grid; ++g) {
    int rem = g;
    for (int a = 0; a < d; ++a) {
      const double base = centroid[std::size_t(a)] + kOffsets[rem % 5];
      rem /= 5;
      // recenter on the branch-fixed residuals
      double mean_res = 0.0;
      for (int i = 0; i < n; ++i)
        mean_res += interp::min_image(delta[std::size_t(i * d + a)] - base);
      tau[std::size_t(a)] = base + mean_res / double(n);
    }
    best = std::min(best, mapping_cost(cand, ref, cand_for_ref, tau));
  }
  return best;
}

}  // namespace

RmsdOutcome periodic_rmsd(const ToyStructure& cand, const ToyStructure& ref,
                          const MatcherTolerances& tol) {
  if (!same_multiset(cand.comp, ref.comp))
    throw std::invalid_argument("periodic_rmsd: composition mismatch");
  if (ref.comp.n() > tol.n_max)
    throw std::invalid_argument("periodic_rmsd: structure exceeds n_max");
  if (cand.dim() != ref.dim())
    throw std::invalid_argument("periodic_rmsd: dimension mismatch");

  const int d = ref.dim();
  for (int a = 0; a < d; ++a) {
    const double ratio = cand.cell[std::size_t(a)] / ref.cell[std::size_t(a)];
    if (std::abs(ratio - 1.0) > tol.ltol) return {false, 0.0, false};
  }

  const auto ref_blocks = species_blocks(ref.comp);
  const auto cand_blocks = species_blocks(cand.comp);

  // odometer over per-block permutations of the candidate atoms
  std::vector<std::vector<int>> perms = cand_blocks;
  const int n = ref.comp.n();
  std::vector<int> cand_for_ref(static_cast<std::size_t>(n));

  double best = std::numeric_limits<double>::infinity();
  bool done = false;
  while (!done) {
    for (std::size_t b = 0; b < ref_blocks.size(); ++b)
      for (std::size_t k = 0; k < ref_blocks[b].size(); ++k)
        cand_for_ref[std::size_t(ref_blocks[b][k])] = perms[b][k];
    best = std::min(best, best_cost_for_mapping(cand, ref, cand_for_ref));

    done = true;
    for (auto& block : perms) {
      if (std::next_permutation(block.begin(), block.end())) {
        done = false;
        break;
      }
      // block wrapped to sorted order; carry to the next block
    }
  }

  const double norm = std::pow(ref.volume() / double(n), 1.0 / double(d));
  const double rmsd = std::sqrt(best) / norm;
  return {true, rmsd, rmsd <= tol.stol};
}

std::pair<double, std::optional<double>> match_rate(
    const std::vector<GeneratedSample>& gen, const world::ReferenceSet& refs,
    world::Split split, const MatcherTolerances& tol) {
  (void)split;
  if (gen.empty()) return {0.0, std::nullopt};
  std::vector<int> matched(gen.size(), 0);
  std::vector<double> rmsds(gen.size(), 0.0);
  par::parallel_for(std::int64_t(gen.size()), [&](std::int64_t i) {
    const auto& g = gen[std::size_t(i)];
    const world::RefEntry* ref = refs.reference_for(g.comp_index);
    if (!ref) throw std::runtime_error("match_rate: missing composition");
    auto m = periodic_rmsd(g.structure, ref->structure, tol);
    matched[std::size_t(i)] = m.matched ? 1 : 0;
    rmsds[std::size_t(i)] = m.matched ? m.rmsd : 0.0;
  });
  const int n_matched = std::accumulate(matched.begin(), matched.end(), 0);
  std::optional<double> rmse;
  if (n_matched > 0) {
    double acc = 0.0;
    for (std::size_t i = 0; i < gen.size(); ++i)
      if (matched[i]) acc += rmsds[i];
    rmse = acc / double(n_matched);
  }
  return {double(n_matched) / double(gen.size()), rmse};
}

std::pair<double, double> metre_crmse(const std::vector<GeneratedSample>& gen,
                                      const world::ReferenceSet& refs,
                                      world::Split split,
                                      const MatcherTolerances& tol) {
  // collect reference polymorphs of the split
  std::vector<const world::RefEntry*> targets;
  for (const auto& e : refs.entries)
    if (e.split == split) targets.push_back(&e);
  if (targets.empty()) return {0.0, 0.0};

  std::vector<double> contrib(targets.size(), tol.stol);
  std::vector<int> matched(targets.size(), 0);
  par::parallel_for(std::int64_t(targets.size()), [&](std::int64_t ti) {
    const world::RefEntry* ref = targets[std::size_t(ti)];
    double best = std::numeric_limits<double>::infinity();
    for (const auto& g : gen) {
      if (g.comp_index != ref->comp_index) continue;
      auto m = periodic_rmsd(g.structure, ref->structure, tol);
      if (m.matched) best = std::min(best, m.rmsd);
    }
    if (std::isfinite(best)) {
      matched[std::size_t(ti)] = 1;
      contrib[std::size_t(ti)] = best;
    }
  });
  const double metre =
      double(std::accumulate(matched.begin(), matched.end(), 0)) /
      double(targets.size());
  const double crmse =
      std::accumulate(contrib.begin(), contrib.end(), 0.0) / double(targets.size());
  return {metre, crmse};
}

std::pair<double, double> energy_stats(const std::vector<GeneratedSample>& gen,
                                       const world::ReferenceSet& refs,
                                       const world::EnergyModelParams& p,
                                       const world::ValidityThresholds& vt) {
  if (gen.empty()) return {0.0, 0.0};
  std::vector<double> rel(gen.size(), 0.0);
  std::vector<int> valid(gen.size(), 0);
  par::parallel_for(std::int64_t(gen.size()), [&](std::int64_t i) {
    const auto& g = gen[std::size_t(i)];
    if (!world::validity_check(g.structure, p, vt).valid) return;
    const world::RefEntry* ref = refs.reference_for(g.comp_index);
    if (!ref) throw std::runtime_error("energy_stats: missing composition");
    valid[std::size_t(i)] = 1;
    rel[std::size_t(i)] =
        world::energy(g.structure, p).per_atom - ref->energy_per_atom;
  });
  const int n_valid = std::accumulate(valid.begin(), valid.end(), 0);
  double mean_rel = 0.0;
  if (n_valid > 0) {
    for (std::size_t i = 0; i < gen.size(); ++i)
      if (valid[i]) mean_rel += rel[i];
    mean_rel /= double(n_valid);
  }
  const double invalid_rate = 1.0 - double(n_valid) / double(gen.size());
  return {mean_rel, invalid_rate};
}

EvalReport evaluate_samples(const std::vector<GeneratedSample>& gen,
                            const world::ReferenceSet& refs, world::Split split,
                            const MatcherTolerances& tol,
                            const world::EnergyModelParams& p,
                            const world::ValidityThresholds& vt, int n_t) {
  EvalReport r;
  auto [mr, rmse] = match_rate(gen, refs, split, tol);
  r.match_rate = mr;
  r.rmse = rmse;
  auto [metre, crmse] = metre_crmse(gen, refs, split, tol);
  r.metre = metre;
  r.crmse = crmse;
  auto [rel, inv] = energy_stats(gen, refs, p, vt);
  r.mean_rel_energy = rel;
  r.invalid_rate = inv;
  r.n_t = n_t;
  r.sample_count = int(gen.size());
  return r;
}

}  // namespace flowrl::evalm
