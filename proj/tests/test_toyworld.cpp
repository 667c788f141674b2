#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "flowrl/interpolants.hpp"
#include "flowrl/parallel.hpp"
#include "flowrl/toyworld.hpp"

using namespace flowrl;
using world::Composition;
using world::EnergyModelParams;
using world::ToyStructure;

namespace {

ToyStructure random_separated_structure(const EnergyModelParams& p, int n,
                                        CounterRng& rng) {
  Composition comp;
  for (int i = 0; i < n; ++i)
    comp.species.push_back(1 + int(rng.uniform_int(p.n_species())));
  world::BasePrior roomy;
  roomy.pack_area = 2.5;  // roomy cells so rejection sampling separates quickly
  const double mu = world::cell_log_mean(comp, p, roomy, 2);
  for (int attempt = 0; attempt < 200; ++attempt) {
    CounterRng r = rng.stream(std::uint64_t(attempt));
    ToyStructure s = world::sample_base(comp, mu, 0.1, 2, r);
    double min_r2 = 1e100;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) {
        double r2 = 0.0;
        for (int a = 0; a < 2; ++a) {
          const double d = interp::min_image(s.frac[std::size_t(j * 2 + a)] -
                                             s.frac[std::size_t(i * 2 + a)]) *
                           s.cell[std::size_t(a)];
          r2 += d * d;
        }
        min_r2 = std::min(min_r2, r2);
      }
    if (std::sqrt(min_r2) > 0.8 * p.sigma_min()) return s;
  }
  throw std::runtime_error("could not build a separated structure");
}

}  // namespace

TEST_CASE("pair term hits -eps_well exactly at r = sigma") {
  CHECK(world::pair_energy(1.0, 1.0, 1.0) == -1.0);
  CHECK(world::pair_energy(1.44, 1.2, 0.7) == doctest::Approx(-0.7).epsilon(1e-15));
  // repulsive inside, attractive outside the minimum
  CHECK(world::pair_energy(0.25, 1.0, 1.0) > 0.0);
  CHECK(world::pair_energy(4.0, 1.0, 1.0) < 0.0);

  EnergyModelParams p;
  p.sigma = {1.0};
  p.pressure = 0.0;
  ToyStructure s;
  s.comp.species = {1, 1};
  s.cell = {8.0, 8.0};
  s.frac = {0.0, 0.25, 0.125, 0.25};  // separation 0.125 * 8 = 1 = sigma
  // total = -eps plus the (small) image-shell tail in a large cell
  auto e = world::energy(s, p);
  CHECK(e.total == doctest::Approx(-1.0).epsilon(5e-4));

  ToyStructure lone;
  lone.comp.species = {2};
  lone.frac = {0.3, 0.7};
  lone.cell = {10.0, 10.0};
  EnergyModelParams p3;
  p3.pressure = 0.0;
  // a lone particle sees only its own far images
  CHECK(std::abs(world::energy(lone, p3).total) <= 1e-4);
}

TEST_CASE("energy is invariant under global translation and same-species permutation") {
  EnergyModelParams p;
  CounterRng rng(31);
  for (int rep = 0; rep < 10; ++rep) {
    CounterRng r = rng.stream(std::uint64_t(rep));
    ToyStructure s = random_separated_structure(p, 5, r);
    const double e0 = world::energy(s, p).total;

    ToyStructure shifted = s;
    const double cx = r.uniform(), cy = r.uniform();
    for (int i = 0; i < 5; ++i) {
      shifted.frac[std::size_t(2 * i)] =
          interp::wrap_unit(shifted.frac[std::size_t(2 * i)] + cx);
      shifted.frac[std::size_t(2 * i + 1)] =
          interp::wrap_unit(shifted.frac[std::size_t(2 * i + 1)] + cy);
    }
    CHECK(std::abs(world::energy(shifted, p).total - e0) <= 1e-10);

    // swap two particles (with their species labels): energy is unchanged
    ToyStructure perm = s;
    std::swap(perm.comp.species[0], perm.comp.species[3]);
    for (int a = 0; a < 2; ++a)
      std::swap(perm.frac[std::size_t(a)], perm.frac[std::size_t(6 + a)]);
    CHECK(std::abs(world::energy(perm, p).total - e0) <= 1e-10);
  }
}

TEST_CASE("energy_grad matches central finite differences") {
  EnergyModelParams p;
  CounterRng rng(37);
  const double h = 1e-6;
  for (int rep = 0; rep < 20; ++rep) {
    CounterRng r = rng.stream(std::uint64_t(rep));
    ToyStructure s = random_separated_structure(p, 4, r);
    auto g = world::energy_grad(s, p);
    for (std::size_t k = 0; k < s.frac.size(); ++k) {
      ToyStructure up = s, dn = s;
      up.frac[k] += h;
      dn.frac[k] -= h;
      const double fd =
          (world::energy(up, p).total - world::energy(dn, p).total) / (2 * h);
      CHECK(std::abs(g.coord[k] - fd) <= 1e-6 * std::max(1.0, std::abs(fd)));
    }
    for (std::size_t a = 0; a < s.cell.size(); ++a) {
      ToyStructure up = s, dn = s;
      up.cell[a] += h;
      dn.cell[a] -= h;
      const double fd =
          (world::energy(up, p).total - world::energy(dn, p).total) / (2 * h);
      CHECK(std::abs(g.cell[a] - fd) <= 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("pair forces are antisymmetric and coordinate gradients sum to zero") {
  EnergyModelParams p;
  p.sigma = {1.0};
  p.pressure = 0.0;
  ToyStructure s;
  s.comp.species = {1, 1};
  s.cell = {6.0, 6.0};
  s.frac = {0.1, 0.5, 0.32, 0.5};
  auto g = world::energy_grad(s, p);
  CHECK(g.coord[0] == doctest::Approx(-g.coord[2]).epsilon(1e-12));
  CHECK(g.coord[1] == doctest::Approx(-g.coord[3]).epsilon(1e-12));

  CounterRng rng(41);
  ToyStructure rs = random_separated_structure(p, 6, rng);
  auto rg = world::energy_grad(rs, p);
  for (int a = 0; a < 2; ++a) {
    double sum = 0.0;
    for (int i = 0; i < 6; ++i) sum += rg.coord[std::size_t(2 * i + a)];
    CHECK(std::abs(sum) <= 1e-9);
  }
  CHECK_THROWS_AS(
      [&] {
        ToyStructure bad = rs;
        bad.frac[0] = bad.frac[2];
        bad.frac[1] = bad.frac[3];
        return world::energy_grad(bad, p);
      }(),
      std::runtime_error);
}

TEST_CASE("relax decreases energy monotonically and finds the pair minimum") {
  EnergyModelParams p;
  p.sigma = {1.0};
  p.pressure = 0.0;
  ToyStructure s;
  s.comp.species = {1, 1};
  s.cell = {10.0, 10.0};
  s.frac = {0.40, 0.5, 0.53, 0.5};  // separation 1.3 sigma

  world::RelaxOptions opt;
  opt.steps = 500;
  opt.step_size = 0.02;
  opt.relax_cell = false;
  ToyStructure rel = world::relax(s, p, opt);
  CHECK(world::energy(rel, p).total <= world::energy(s, p).total);
  double d = 0.0;
  for (int a = 0; a < 2; ++a) {
    const double v = interp::min_image(rel.frac[std::size_t(2 + a)] -
                                       rel.frac[std::size_t(a)]) *
                     rel.cell[std::size_t(a)];
    d += v * v;
  }
  CHECK(std::sqrt(d) == doctest::Approx(1.0).epsilon(0.01));

  // already stationary: unchanged
  auto gnorm = [&](const ToyStructure& st) {
    auto g = world::energy_grad(st, p);
    double acc = 0.0;
    for (double v : g.coord) acc += v * v;
    return std::sqrt(acc);
  };
  if (gnorm(rel) < 1e-10) {
    ToyStructure again = world::relax(rel, p, opt);
    CHECK(again.frac == rel.frac);
    CHECK(again.cell == rel.cell);
  }
}

TEST_CASE("relax backtracking keeps the energy sequence non-increasing") {
  EnergyModelParams p;
  CounterRng rng(43);
  ToyStructure s = random_separated_structure(p, 5, rng);
  world::RelaxOptions opt;
  opt.steps = 1;
  opt.step_size = 0.5;  // aggressive step: backtracking must still descend
  double prev = world::energy(s, p).total;
  ToyStructure cur = s;
  for (int k = 0; k < 40; ++k) {
    cur = world::relax(cur, p, opt);
    const double e = world::energy(cur, p).total;
    CHECK(e <= prev + 1e-12);
    prev = e;
  }
}

TEST_CASE("validity_check flags volume collapse and close pairs") {
  EnergyModelParams p;
  p.sigma = {1.0, 1.2, 1.4};
  const auto vt = world::ValidityThresholds::defaults(p);
  CHECK(vt.r_min == doctest::Approx(0.25).epsilon(1e-12));

  ToyStructure close;
  close.comp.species = {1, 1};
  close.cell = {5.0, 5.0};
  close.frac = {0.5, 0.5, 0.5 + 0.1 / 5.0, 0.5};  // distance 0.1 sigma_min
  auto v = world::validity_check(close, p, vt);
  CHECK_FALSE(v.valid);
  CHECK(v.reason == "min-distance");

  ToyStructure tiny;
  tiny.comp.species = {1};
  tiny.cell = {0.1, 0.1};
  tiny.frac = {0.5, 0.5};
  auto v2 = world::validity_check(tiny, p, vt);
  CHECK_FALSE(v2.valid);
  CHECK(v2.reason == "volume");

  ToyStructure fine;
  fine.comp.species = {1, 2};
  fine.cell = {4.0, 4.0};
  fine.frac = {0.1, 0.1, 0.6, 0.6};
  CHECK(world::validity_check(fine, p, vt).valid);
}

TEST_CASE("sample_base ranges, determinism and log-cell moments") {
  Composition c{{1, 2, 3}};
  CounterRng r1(5), r2(5);
  auto s1 = world::sample_base(c, 0.8, 0.2, 2, r1);
  auto s2 = world::sample_base(c, 0.8, 0.2, 2, r2);
  CHECK(s1.frac == s2.frac);
  CHECK(s1.cell == s2.cell);
  for (double f : s1.frac) {
    CHECK(f >= 0.0);
    CHECK(f < 1.0);
  }

  CounterRng rng(6);
  const int n = 10000;
  double mean = 0.0;
  for (int i = 0; i < n; ++i) {
    CounterRng r = rng.stream(std::uint64_t(i));
    auto s = world::sample_base(c, 0.8, 0.2, 2, r);
    mean += std::log(s.cell[0]);
  }
  mean /= n;
  const double se = 0.2 / std::sqrt(double(n));
  CHECK(std::abs(mean - 0.8) <= 3 * se);
}

TEST_CASE("dataset generation is reproducible and polymorph-split consistent") {
  EnergyModelParams p;
  auto comps = world::all_compositions(3, 2, 3);
  CHECK(comps.size() == 6 + 10);

  world::DatasetConfig cfg;
  cfg.n_inits = 4;
  cfg.relax.steps = 120;
  auto rs1 = world::generate_dataset(comps, p, cfg, 99);
  auto rs2 = world::generate_dataset(comps, p, cfg, 99);
  REQUIRE(rs1.entries.size() == rs2.entries.size());
  for (std::size_t i = 0; i < rs1.entries.size(); ++i) {
    CHECK(rs1.entries[i].structure.frac == rs2.entries[i].structure.frac);
    CHECK(rs1.entries[i].energy_per_atom == rs2.entries[i].energy_per_atom);
    CHECK(rs1.entries[i].split == rs2.entries[i].split);
  }

  // one split per composition, stored energies match recomputation
  for (int ci : rs1.comp_indices(std::nullopt)) {
    auto polys = rs1.polymorphs_for(ci);
    for (const auto* e : polys) {
      CHECK(e->split == polys.front()->split);
      CHECK(world::energy(e->structure, p).per_atom ==
            doctest::Approx(e->energy_per_atom).epsilon(1e-12));
    }
    const auto* ref = rs1.reference_for(ci);
    REQUIRE(ref != nullptr);
    for (const auto* e : polys) CHECK(ref->energy_per_atom <= e->energy_per_atom);
  }

  // serial and parallel generation agree bitwise
  par::set_enabled(false);
  auto rs3 = world::generate_dataset(comps, p, cfg, 99);
  par::set_enabled(true);
  REQUIRE(rs3.entries.size() == rs1.entries.size());
  for (std::size_t i = 0; i < rs1.entries.size(); ++i)
    CHECK(rs3.entries[i].structure.frac == rs1.entries[i].structure.frac);
}

TEST_CASE("reference set round-trips through jsonl") {
  EnergyModelParams p;
  auto comps = world::all_compositions(3, 2, 2);
  world::DatasetConfig cfg;
  cfg.n_inits = 2;
  cfg.relax.steps = 60;
  auto rs = world::generate_dataset(comps, p, cfg, 7);
  world::save_reference_set(rs, "toyworld_roundtrip.jsonl", "deadbeef");
  auto loaded = world::load_reference_set("toyworld_roundtrip.jsonl");
  REQUIRE(loaded.entries.size() == rs.entries.size());
  for (std::size_t i = 0; i < rs.entries.size(); ++i) {
    CHECK(loaded.entries[i].structure.frac == rs.entries[i].structure.frac);
    CHECK(loaded.entries[i].structure.cell == rs.entries[i].structure.cell);
    CHECK(loaded.entries[i].energy_per_atom == rs.entries[i].energy_per_atom);
    CHECK(loaded.entries[i].split == rs.entries[i].split);
    CHECK(loaded.entries[i].polymorph == rs.entries[i].polymorph);
  }
}
