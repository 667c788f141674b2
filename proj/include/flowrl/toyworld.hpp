#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "flowrl/rng.hpp"

namespace flowrl::world {

/// Fixed multiset of species labels (1-based ids) conditioning a structure.
struct Composition {
  std::vector<int> species;
  int n() const { return int(species.size()); }
  bool operator==(const Composition&) const = default;
};

/// Periodic structure on a d-torus with a diagonal cell: fractional
/// coordinates in [0,1) (row-major n x d) plus positive per-axis lengths.
struct ToyStructure {
  Composition comp;
  std::vector<double> frac;
  std::vector<double> cell;
  int dim() const { return int(cell.size()); }
  double volume() const;
};

/// 12-6 pair potential with per-species radii plus a pressure-volume term:
///   E = sum_pairs eps ((s_ij/r)^12 - 2 (s_ij/r)^6) + p V,
/// s_ij = (s_i + s_j)/2. Pairs run over the minimum image and its first
/// image shell, including each particle with its own images; the self terms
/// stop thin cells from collapsing an axis to zero. The pair term has its
/// minimum -eps exactly at r = s_ij.
struct EnergyModelParams {
  std::vector<double> sigma{1.0, 1.2, 1.4};  // indexed by species id - 1
  double eps_well = 1.0;
  double pressure = 0.02;

  int n_species() const { return int(sigma.size()); }
  double sigma_of(int species) const;
  double pair_sigma(int sa, int sb) const;
  double sigma_min() const;
};

struct EnergyResult {
  double total;
  double per_atom;
};

/// Single 12-6 pair term as a function of the squared distance.
double pair_energy(double r2, double sigma, double eps_well);

EnergyResult energy(const ToyStructure& s, const EnergyModelParams& p);

struct EnergyGrad {
  std::vector<double> coord;  // d E / d frac, n x d
  std::vector<double> cell;   // d E / d cell_lengths
};

/// Analytic gradient; throws std::runtime_error on coincident particles.
EnergyGrad energy_grad(const ToyStructure& s, const EnergyModelParams& p);

struct RelaxOptions {
  int steps = 200;
  double step_size = 0.05;
  bool relax_cell = true;
  double grad_tol = 1e-10;
  int max_backtracks = 60;
};

/// Gradient descent with backtracking halving; the energy sequence is
/// monotone non-increasing and the result is wrapped.
ToyStructure relax(const ToyStructure& s, const EnergyModelParams& p,
                   const RelaxOptions& opt);

struct ValidityThresholds {
  double v_min;
  double r_min;
  static ValidityThresholds defaults(const EnergyModelParams& p);
};

struct Validity {
  bool valid;
  std::string reason;  // "volume" or "min-distance" when invalid
};

Validity validity_check(const ToyStructure& s, const EnergyModelParams& p,
                        const ValidityThresholds& t);

/// Base distribution rho_0 parameters: coordinates uniform on the torus,
/// cell lengths log-normal with per-composition mean set so the sampled
/// volume is near pack_area * n * mean_radius^d.
struct BasePrior {
  double pack_area = 1.0;
  double sigma_log = 0.15;
};

double cell_log_mean(const Composition& c, const EnergyModelParams& p,
                     const BasePrior& prior, int dim);

ToyStructure sample_base(const Composition& c, double mu_log_cell,
                         double sigma_log_cell, int dim, CounterRng& rng);

enum class Split { Train, Val, Test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct RefEntry {
  Composition comp;
  ToyStructure structure;
  double energy_per_atom;
  Split split;
  int comp_index;  // composition group id within the set
  int polymorph;   // 0 = designated reference (lowest energy)
};

struct ReferenceSet {
  std::vector<RefEntry> entries;
  bool polymorph_split = true;
  int n_species = 0;
  int dim = 2;

  std::vector<int> comp_indices(std::optional<Split> split) const;
  const RefEntry* reference_for(int comp_index) const;
  std::vector<const RefEntry*> polymorphs_for(int comp_index) const;
  std::vector<const RefEntry*> polymorphs_for(int comp_index, Split split) const;
  const Composition& composition(int comp_index) const;
};

struct DatasetConfig {
  int n_inits = 8;
  int max_polymorphs = 4;
  RelaxOptions relax;
  double distinct_rmsd = 0.25;  // structures closer than this share a basin
  std::array<double, 3> split_fracs{0.6, 0.2, 0.2};
  bool polymorph_split = true;
  BasePrior prior;
  int dim = 2;
};

/// Relaxes several random initializations per composition and keeps distinct
/// local minima as polymorphs; deterministic given the seed, parallel over
/// compositions with per-composition substreams.
ReferenceSet generate_dataset(const std::vector<Composition>& comps,
                              const EnergyModelParams& p,
                              const DatasetConfig& cfg, std::uint64_t seed);

/// All compositions (multisets) over species {1..n_species} with sizes in
/// [n_min, n_max], in lexicographic order.
std::vector<Composition> all_compositions(int n_species, int n_min, int n_max);

void save_reference_set(const ReferenceSet& rs, const std::string& path,
                        const std::string& config_hash);
ReferenceSet load_reference_set(const std::string& path);

}  // namespace flowrl::world
