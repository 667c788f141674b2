#include "flowrl/toyworld.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "flowrl/evalmetrics.hpp"
#include "flowrl/interpolants.hpp"
#include "flowrl/parallel.hpp"
#include "flowrl/version.hpp"

namespace flowrl::world {

using nlohmann::json;

double ToyStructure::volume() const {
  double v = 1.0;
  for (double c : cell) v *= c;
  return v;
}

double EnergyModelParams::sigma_of(int species) const {
  if (species < 1 || species > n_species())
    throw std::out_of_range("species id out of range");
  return sigma[std::size_t(species - 1)];
}

double EnergyModelParams::pair_sigma(int sa, int sb) const {
  return 0.5 * (sigma_of(sa) + sigma_of(sb));
}

double EnergyModelParams::sigma_min() const {
  return *std::min_element(sigma.begin(), sigma.end());
}

double pair_energy(double r2, double sigma, double eps_well) {
  const double q = sigma * sigma / r2;  // (sigma/r)^2; inf at r = 0
  const double q6 = q * q * q;
  return eps_well * (q6 * q6 - 2.0 * q6);
}

namespace {

// dE/dr / r for the 12-6 pair term
inline double pair_coef(double r2, double sigma, double eps_well) {
  const double q = sigma * sigma / r2;
  const double q6 = q * q * q;
  return -12.0 * eps_well * (q6 * q6 - q6) / r2;
}

// image shifts of the first shell: all of {-1,0,1}^d for distinct pairs, the
// lexicographically-positive half (times one) for a particle with its own
// images
std::vector<std::vector<int>> full_shell(int d) {
  std::vector<std::vector<int>> shifts;
  std::vector<int> m(static_cast<std::size_t>(d), -1);
  while (true) {
    shifts.push_back(m);
    int a = 0;
    while (a < d && m[std::size_t(a)] == 1) m[std::size_t(a++)] = -1;
    if (a == d) break;
    m[std::size_t(a)] += 1;
  }
  return shifts;
}

bool lex_positive(const std::vector<int>& m) {
  for (int v : m) {
    if (v > 0) return true;
    if (v < 0) return false;
  }
  return false;
}

}  // namespace

// First-image-shell lattice sum: every pair interacts through its
// minimum-image displacement and the surrounding 3^d - 1 images, and every
// particle interacts with its own images. The self terms keep thin cells
// expensive, so anisotropic collapse is penalized the same way uniform
// collapse is.
EnergyResult energy(const ToyStructure& s, const EnergyModelParams& p) {
  const int n = s.comp.n();
  const int d = s.dim();
  const auto shifts = full_shell(d);
  double e = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const double sij = p.pair_sigma(s.comp.species[std::size_t(i)],
                                      s.comp.species[std::size_t(j)]);
      for (const auto& m : shifts) {
        double r2 = 0.0;
        for (int a = 0; a < d; ++a) {
          const double df = interp::min_image(s.frac[std::size_t(j * d + a)] -
                                              s.frac[std::size_t(i * d + a)]) +
                            double(m[std::size_t(a)]);
          const double dc = df * s.cell[std::size_t(a)];
          r2 += dc * dc;
        }
        e += pair_energy(r2, sij, p.eps_well);
      }
    }
    const double sii = p.sigma_of(s.comp.species[std::size_t(i)]);
    for (const auto& m : shifts) {
      if (!lex_positive(m)) continue;
      double r2 = 0.0;
      for (int a = 0; a < d; ++a) {
        const double dc = double(m[std::size_t(a)]) * s.cell[std::size_t(a)];
        r2 += dc * dc;
      }
      e += pair_energy(r2, sii, p.eps_well);
    }
  }
  e += p.pressure * s.volume();
  return {e, e / double(n)};
}

EnergyGrad energy_grad(const ToyStructure& s, const EnergyModelParams& p) {
  const int n = s.comp.n();
  const int d = s.dim();
  const auto shifts = full_shell(d);
  EnergyGrad g;
  g.coord.assign(std::size_t(n * d), 0.0);
  g.cell.assign(std::size_t(d), 0.0);
  std::vector<double> disp(static_cast<std::size_t>(d));
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const double sij = p.pair_sigma(s.comp.species[std::size_t(i)],
                                      s.comp.species[std::size_t(j)]);
      for (const auto& m : shifts) {
        double r2 = 0.0;
        for (int a = 0; a < d; ++a) {
          const double df = interp::min_image(s.frac[std::size_t(j * d + a)] -
                                              s.frac[std::size_t(i * d + a)]) +
                            double(m[std::size_t(a)]);
          disp[std::size_t(a)] = df * s.cell[std::size_t(a)];
          r2 += disp[std::size_t(a)] * disp[std::size_t(a)];
        }
        if (r2 < 1e-24)
          throw std::runtime_error("energy_grad: coincident particles");
        const double coef = pair_coef(r2, sij, p.eps_well);
        for (int a = 0; a < d; ++a) {
          const double dc = disp[std::size_t(a)];
          const double L = s.cell[std::size_t(a)];
          g.coord[std::size_t(i * d + a)] -= coef * dc * L;
          g.coord[std::size_t(j * d + a)] += coef * dc * L;
          g.cell[std::size_t(a)] += coef * dc * dc / L;
        }
      }
    }
    const double sii = p.sigma_of(s.comp.species[std::size_t(i)]);
    for (const auto& m : shifts) {
      if (!lex_positive(m)) continue;
      double r2 = 0.0;
      for (int a = 0; a < d; ++a) {
        disp[std::size_t(a)] = double(m[std::size_t(a)]) * s.cell[std::size_t(a)];
        r2 += disp[std::size_t(a)] * disp[std::size_t(a)];
      }
      if (r2 < 1e-24) throw std::runtime_error("energy_grad: collapsed cell");
      const double coef = pair_coef(r2, sii, p.eps_well);
      for (int a = 0; a < d; ++a)
        g.cell[std::size_t(a)] +=
            coef * disp[std::size_t(a)] * double(m[std::size_t(a)]);
    }
  }
  const double v = s.volume();
  for (int a = 0; a < d; ++a)
    g.cell[std::size_t(a)] += p.pressure * v / s.cell[std::size_t(a)];
  return g;
}

ToyStructure relax(const ToyStructure& s0, const EnergyModelParams& p,
                   const RelaxOptions& opt) {
  if (opt.steps < 1) throw std::invalid_argument("relax: steps must be >= 1");
  ToyStructure cur = s0;
  interp::wrap_unit(std::span<double>(cur.frac));
  double e_cur = energy(cur, p).total;
  for (int step = 0; step < opt.steps; ++step) {
    EnergyGrad g = energy_grad(cur, p);
    double gnorm2 = 0.0;
    for (double v : g.coord) gnorm2 += v * v;
    if (opt.relax_cell)
      for (double v : g.cell) gnorm2 += v * v;
    if (std::sqrt(gnorm2) < opt.grad_tol) break;

    double step_size = opt.step_size;
    bool accepted = false;
    for (int bt = 0; bt < opt.max_backtracks; ++bt) {
      ToyStructure trial = cur;
      for (std::size_t k = 0; k < trial.frac.size(); ++k)
        trial.frac[k] = interp::wrap_unit(trial.frac[k] - step_size * g.coord[k]);
      bool cell_ok = true;
      if (opt.relax_cell) {
        for (std::size_t a = 0; a < trial.cell.size(); ++a) {
          trial.cell[a] -= step_size * g.cell[a];
          if (trial.cell[a] <= 1e-6) cell_ok = false;
        }
      }
      if (cell_ok) {
        const double e_trial = energy(trial, p).total;
        if (e_trial <= e_cur) {
          cur = std::move(trial);
          e_cur = e_trial;
          accepted = true;
          break;
        }
      }
      step_size *= 0.5;
    }
    if (!accepted) break;  // no descent step found at any scale
  }
  return cur;
}

ValidityThresholds ValidityThresholds::defaults(const EnergyModelParams& p) {
  const double smin = p.sigma_min();
  return {0.05 * smin * smin, 0.25 * smin};
}

Validity validity_check(const ToyStructure& s, const EnergyModelParams& p,
                        const ValidityThresholds& t) {
  if (s.volume() < t.v_min) return {false, "volume"};
  const int n = s.comp.n();
  const int d = s.dim();
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double r2 = 0.0;
      for (int a = 0; a < d; ++a) {
        const double dc = interp::min_image(s.frac[std::size_t(j * d + a)] -
                                            s.frac[std::size_t(i * d + a)]) *
                          s.cell[std::size_t(a)];
        r2 += dc * dc;
      }
      if (r2 < t.r_min * t.r_min) return {false, "min-distance"};
    }
  (void)p;
  return {true, ""};
}

double cell_log_mean(const Composition& c, const EnergyModelParams& p,
                     const BasePrior& prior, int dim) {
  double mean_sigma = 0.0;
  for (int sp : c.species) mean_sigma += p.sigma_of(sp);
  mean_sigma /= double(c.n());
  const double target_volume =
      prior.pack_area * double(c.n()) * std::pow(mean_sigma, double(dim));
  return std::log(target_volume) / double(dim);
}

ToyStructure sample_base(const Composition& c, double mu_log_cell,
                         double sigma_log_cell, int dim, CounterRng& rng) {
  if (sigma_log_cell <= 0.0)
    throw std::invalid_argument("sample_base: sigma_log_cell must be > 0");
  ToyStructure s;
  s.comp = c;
  s.frac.resize(std::size_t(c.n() * dim));
  for (double& v : s.frac) v = rng.uniform();
  s.cell.resize(std::size_t(dim));
  for (double& v : s.cell) v = rng.lognormal(mu_log_cell, sigma_log_cell);
  return s;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw std::invalid_argument("unknown split: " + s);
}

std::vector<int> ReferenceSet::comp_indices(std::optional<Split> split) const {
  std::vector<int> out;
  for (const auto& e : entries) {
    if (split && e.split != *split) continue;
    if (std::find(out.begin(), out.end(), e.comp_index) == out.end())
      out.push_back(e.comp_index);
  }
  return out;
}

const RefEntry* ReferenceSet::reference_for(int comp_index) const {
  for (const auto& e : entries)
    if (e.comp_index == comp_index && e.polymorph == 0) return &e;
  return nullptr;
}

std::vector<const RefEntry*> ReferenceSet::polymorphs_for(int comp_index) const {
  std::vector<const RefEntry*> out;
  for (const auto& e : entries)
    if (e.comp_index == comp_index) out.push_back(&e);
  return out;
}

std::vector<const RefEntry*> ReferenceSet::polymorphs_for(int comp_index,
                                                          Split split) const {
  std::vector<const RefEntry*> out;
  for (const auto& e : entries)
    if (e.comp_index == comp_index && e.split == split) out.push_back(&e);
  return out;
}

const Composition& ReferenceSet::composition(int comp_index) const {
  for (const auto& e : entries)
    if (e.comp_index == comp_index) return e.comp;
  throw std::out_of_range("composition index not in reference set");
}

namespace {

Split draw_split(CounterRng rng, const std::array<double, 3>& fracs) {
  const double u = rng.uniform();
  if (u < fracs[0]) return Split::Train;
  if (u < fracs[0] + fracs[1]) return Split::Val;
  return Split::Test;
}

}  // namespace

ReferenceSet generate_dataset(const std::vector<Composition>& comps,
                              const EnergyModelParams& p,
                              const DatasetConfig& cfg, std::uint64_t seed) {
  if (comps.empty())
    throw std::invalid_argument("generate_dataset: empty composition list");
  CounterRng master(seed);

  struct CompResult {
    std::vector<ToyStructure> polymorphs;  // sorted by energy
    std::vector<double> energy_per_atom;
  };
  std::vector<CompResult> results(comps.size());

  evalm::MatcherTolerances mtol;  // default stol; distinctness uses cfg.distinct_rmsd

  par::parallel_for(std::int64_t(comps.size()), [&](std::int64_t ci) {
    const Composition& comp = comps[std::size_t(ci)];
    CounterRng comp_rng = master.stream(0x0da7a5e7, std::uint64_t(ci));
    const double mu = cell_log_mean(comp, p, cfg.prior, cfg.dim);

    std::vector<std::pair<double, ToyStructure>> relaxed;
    for (int init = 0; init < cfg.n_inits; ++init) {
      CounterRng init_rng = comp_rng.stream(std::uint64_t(init));
      ToyStructure start =
          sample_base(comp, mu, cfg.prior.sigma_log, cfg.dim, init_rng);
      ToyStructure rel = relax(start, p, cfg.relax);
      relaxed.emplace_back(energy(rel, p).per_atom, std::move(rel));
    }
    std::sort(relaxed.begin(), relaxed.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });

    CompResult& res = results[std::size_t(ci)];
    for (auto& [epa, st] : relaxed) {
      if (int(res.polymorphs.size()) >= cfg.max_polymorphs) break;
      bool distinct = true;
      for (const auto& kept : res.polymorphs) {
        auto m = evalm::periodic_rmsd(st, kept, mtol);
        if (m.cell_ok && m.rmsd <= cfg.distinct_rmsd) {
          distinct = false;
          break;
        }
      }
      if (distinct) {
        res.polymorphs.push_back(std::move(st));
        res.energy_per_atom.push_back(epa);
      }
    }
  });

  ReferenceSet rs;
  rs.polymorph_split = cfg.polymorph_split;
  rs.n_species = p.n_species();
  rs.dim = cfg.dim;
  int entry_counter = 0;
  for (std::size_t ci = 0; ci < comps.size(); ++ci) {
    const Split comp_split =
        draw_split(master.stream(0x5b117, std::uint64_t(ci)), cfg.split_fracs);
    for (std::size_t pi = 0; pi < results[ci].polymorphs.size(); ++pi) {
      RefEntry e;
      e.comp = comps[ci];
      e.structure = std::move(results[ci].polymorphs[pi]);
      e.energy_per_atom = results[ci].energy_per_atom[pi];
      e.comp_index = int(ci);
      e.polymorph = int(pi);
      e.split = cfg.polymorph_split
                    ? comp_split
                    : draw_split(master.stream(0x5b117e, std::uint64_t(entry_counter)),
                                 cfg.split_fracs);
      ++entry_counter;
      rs.entries.push_back(std::move(e));
    }
  }
  return rs;
}

std::vector<Composition> all_compositions(int n_species, int n_min, int n_max) {
  std::vector<Composition> out;
  std::vector<int> comp;
  // multisets as non-decreasing sequences
  auto gen = [&](auto&& self, int start, int left) -> void {
    if (left == 0) {
      out.push_back(Composition{comp});
      return;
    }
    for (int sp = start; sp <= n_species; ++sp) {
      comp.push_back(sp);
      self(self, sp, left - 1);
      comp.pop_back();
    }
  };
  for (int n = n_min; n <= n_max; ++n) gen(gen, 1, n);
  return out;
}

namespace {

json structure_to_json(const ToyStructure& s) {
  return json{{"species", s.comp.species}, {"frac", s.frac}, {"cell", s.cell}};
}

ToyStructure structure_from_json(const json& j) {
  ToyStructure s;
  s.comp.species = j.at("species").get<std::vector<int>>();
  s.frac = j.at("frac").get<std::vector<double>>();
  s.cell = j.at("cell").get<std::vector<double>>();
  return s;
}

}  // namespace

void save_reference_set(const ReferenceSet& rs, const std::string& path,
                        const std::string& config_hash) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  json header{{"format_version", kFormatVersion},
              {"kind", "reference_set"},
              {"artifact_version", kArtifactVersion},
              {"config_hash", config_hash},
              {"polymorph_split", rs.polymorph_split},
              {"n_species", rs.n_species},
              {"dim", rs.dim}};
  out << header.dump() << "\n";
  for (const auto& e : rs.entries) {
    json row = structure_to_json(e.structure);
    row["energy_per_atom"] = e.energy_per_atom;
    row["split"] = to_string(e.split);
    row["comp_index"] = e.comp_index;
    row["polymorph"] = e.polymorph;
    out << row.dump() << "\n";
  }
}

ReferenceSet load_reference_set(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset: " + path);
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("dataset file is empty: " + path);
  json header = json::parse(line);
  if (header.value("kind", "") != "reference_set")
    throw std::runtime_error("not a reference-set file: " + path);
  ReferenceSet rs;
  rs.polymorph_split = header.at("polymorph_split").get<bool>();
  rs.n_species = header.at("n_species").get<int>();
  rs.dim = header.at("dim").get<int>();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json row = json::parse(line);
    RefEntry e;
    e.structure = structure_from_json(row);
    e.comp = e.structure.comp;
    e.energy_per_atom = row.at("energy_per_atom").get<double>();
    e.split = split_from_string(row.at("split").get<std::string>());
    e.comp_index = row.at("comp_index").get<int>();
    e.polymorph = row.at("polymorph").get<int>();
    rs.entries.push_back(std::move(e));
  }
  return rs;
}

}  // namespace flowrl::world
