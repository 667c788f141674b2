#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "flowrl/evalmetrics.hpp"
#include "flowrl/interpolants.hpp"
#include "flowrl/toyworld.hpp"
#include "naive_matcher.hpp"

using namespace flowrl;
using evalm::GeneratedSample;
using evalm::MatcherTolerances;
using world::Composition;
using world::EnergyModelParams;
using world::ToyStructure;

namespace {

ToyStructure random_structure(int n, CounterRng& rng, double cell = 3.0) {
  ToyStructure s;
  for (int i = 0; i < n; ++i)
    s.comp.species.push_back(1 + int(rng.uniform_int(3)));
  std::sort(s.comp.species.begin(), s.comp.species.end());
  s.cell = {cell * rng.uniform(0.9, 1.1), cell * rng.uniform(0.9, 1.1)};
  s.frac.resize(static_cast<std::size_t>(2 * n));
  for (auto& f : s.frac) f = rng.uniform();
  return s;
}

// wrap + translate + permute within species blocks
ToyStructure orbit_copy(const ToyStructure& s, CounterRng& rng) {
  ToyStructure t = s;
  const double cx = rng.uniform(), cy = rng.uniform();
  const int n = s.comp.n();
  for (int i = 0; i < n; ++i) {
    t.frac[std::size_t(2 * i)] = interp::wrap_unit(s.frac[std::size_t(2 * i)] + cx);
    t.frac[std::size_t(2 * i + 1)] =
        interp::wrap_unit(s.frac[std::size_t(2 * i + 1)] + cy);
  }
  // shuffle atoms of equal species
  for (int rep = 0; rep < 2 * n; ++rep) {
    const int i = int(rng.uniform_int(n)), j = int(rng.uniform_int(n));
    if (t.comp.species[std::size_t(i)] != t.comp.species[std::size_t(j)]) continue;
    for (int a = 0; a < 2; ++a)
      std::swap(t.frac[std::size_t(2 * i + a)], t.frac[std::size_t(2 * j + a)]);
  }
  return t;
}

}  // namespace

TEST_CASE("matcher: identity, wrap, translation and permutation give Match(0)") {
  CounterRng rng(17);
  MatcherTolerances tol;
  for (int rep = 0; rep < 100; ++rep) {
    CounterRng r = rng.stream(std::uint64_t(rep));
    ToyStructure s = random_structure(2 + int(r.uniform_int(5)), r);
    auto self = evalm::periodic_rmsd(s, s, tol);
    CHECK(self.matched);
    CHECK(self.rmsd <= 1e-12);

    ToyStructure moved = orbit_copy(s, r);
    auto m = evalm::periodic_rmsd(moved, s, tol);
    CHECK(m.matched);
    CHECK(m.rmsd <= 1e-9);
  }
}

TEST_CASE("matcher rejects cell mismatch beyond ltol and composition mismatch") {
  CounterRng rng(19);
  ToyStructure s = random_structure(3, rng);
  ToyStructure widened = s;
  widened.cell[0] *= 1.4;
  auto m = evalm::periodic_rmsd(widened, s, {0.5, 0.3, 8});
  CHECK_FALSE(m.cell_ok);
  CHECK_FALSE(m.matched);

  ToyStructure other = s;
  other.comp.species[0] = other.comp.species[0] % 3 + 1;
  CHECK_THROWS_AS(evalm::periodic_rmsd(other, s, {0.5, 0.3, 8}),
                  std::invalid_argument);

  ToyStructure big = random_structure(9, rng);
  CHECK_THROWS_AS(evalm::periodic_rmsd(big, big, {0.5, 0.3, 8}),
                  std::invalid_argument);
}

TEST_CASE("matcher is symmetric up to the normalization convention") {
  CounterRng rng(23);
  MatcherTolerances tol{2.0, 0.3, 8};  // large stol so both directions match
  for (int rep = 0; rep < 20; ++rep) {
    CounterRng r = rng.stream(std::uint64_t(rep));
    ToyStructure a = random_structure(4, r);
    ToyStructure b = a;
    // perturb slightly so the rmsd is nonzero but small
    CounterRng pr = r.stream(1);
    for (auto& f : b.frac) f = interp::wrap_unit(f + 0.02 * pr.normal());
    b.cell = a.cell;  // equal cells: exactly symmetric
    auto ab = evalm::periodic_rmsd(a, b, tol);
    auto ba = evalm::periodic_rmsd(b, a, tol);
    CHECK(std::abs(ab.rmsd - ba.rmsd) <= 1e-10);
  }
}

TEST_CASE("matcher agrees with the naive exhaustive matcher on n <= 6") {
  CounterRng rng(29);
  MatcherTolerances tol;
  int checked = 0;
  for (int rep = 0; rep < 60; ++rep) {
    CounterRng r = rng.stream(std::uint64_t(rep));
    const int n = 2 + int(r.uniform_int(5));
    ToyStructure ref = random_structure(n, r);
    ToyStructure cand;
    if (rep % 3 == 0) {
      cand = random_structure(n, r);
      cand.comp = ref.comp;  // same species multiset, random coordinates
      cand.cell = ref.cell;
    } else {
      cand = orbit_copy(ref, r);
      CounterRng pr = r.stream(7);
      for (auto& f : cand.frac)
        f = interp::wrap_unit(f + 0.05 * pr.normal());
    }
    auto fast = evalm::periodic_rmsd(cand, ref, tol);
    auto slow = naive::match(cand, ref, tol.stol, tol.ltol);
    REQUIRE(fast.cell_ok == slow.cell_ok);
    if (!fast.cell_ok) continue;
    CHECK(fast.matched == slow.matched);
    CHECK(std::abs(fast.rmsd - slow.rmsd) <= 1e-9);
    ++checked;
  }
  CHECK(checked >= 40);
}

namespace {

// tiny reference set: two compositions, one polymorph each, plus one extra
// polymorph for the first composition
world::ReferenceSet tiny_refs(CounterRng& rng) {
  world::ReferenceSet rs;
  rs.polymorph_split = true;
  rs.n_species = 3;
  rs.dim = 2;
  for (int ci = 0; ci < 2; ++ci) {
    ToyStructure s = random_structure(3 + ci, rng);
    world::RefEntry e;
    e.comp = s.comp;
    e.structure = s;
    e.energy_per_atom = -1.0 - ci;
    e.split = world::Split::Test;
    e.comp_index = ci;
    e.polymorph = 0;
    rs.entries.push_back(e);
  }
  // second polymorph of composition 0: a visibly different arrangement
  world::RefEntry extra = rs.entries[0];
  CounterRng r2 = rng.stream(77);
  for (auto& f : extra.structure.frac) f = r2.uniform();
  extra.polymorph = 1;
  extra.energy_per_atom = -0.5;
  rs.entries.push_back(extra);
  return rs;
}

}  // namespace

TEST_CASE("match_rate: exact copies match, random base samples do not") {
  CounterRng rng(31);
  auto rs = tiny_refs(rng);
  MatcherTolerances tol;

  std::vector<GeneratedSample> exact;
  exact.push_back({0, rs.entries[0].structure});
  exact.push_back({1, rs.entries[1].structure});
  auto [mr, rmse] = evalm::match_rate(exact, rs, world::Split::Test, tol);
  CHECK(mr == 1.0);
  REQUIRE(rmse.has_value());
  CHECK(*rmse <= 1e-12);

  MatcherTolerances tiny{1e-6, 0.3, 8};
  std::vector<GeneratedSample> random_gen;
  CounterRng gr = rng.stream(5);
  ToyStructure g0 = rs.entries[0].structure;
  for (auto& f : g0.frac) f = gr.uniform();
  ToyStructure g1 = rs.entries[1].structure;
  for (auto& f : g1.frac) f = gr.uniform();
  random_gen.push_back({0, g0});
  random_gen.push_back({1, g1});
  auto [mr2, rmse2] = evalm::match_rate(random_gen, rs, world::Split::Test, tiny);
  CHECK(mr2 == 0.0);
  CHECK_FALSE(rmse2.has_value());  // no sentinel value when nothing matched
}

TEST_CASE("metre/crmse: full coverage gives (1, 0); no matches give (0, stol)") {
  CounterRng rng(37);
  auto rs = tiny_refs(rng);
  MatcherTolerances tol;

  std::vector<GeneratedSample> all;
  for (const auto& e : rs.entries) all.push_back({e.comp_index, e.structure});
  auto [metre, crmse] = evalm::metre_crmse(all, rs, world::Split::Test, tol);
  CHECK(metre == 1.0);
  CHECK(crmse <= 1e-12);

  MatcherTolerances tiny{1e-6, 0.3, 8};
  std::vector<GeneratedSample> off;
  CounterRng gr = rng.stream(9);
  for (const auto& e : rs.entries) {
    ToyStructure g = e.structure;
    for (auto& f : g.frac) f = gr.uniform();
    off.push_back({e.comp_index, g});
  }
  auto [metre2, crmse2] = evalm::metre_crmse(off, rs, world::Split::Test, tiny);
  CHECK(metre2 == 0.0);
  CHECK(crmse2 == doctest::Approx(tiny.stol).epsilon(1e-12));

  // crmse never exceeds stol by construction
  auto [metre3, crmse3] = evalm::metre_crmse(off, rs, world::Split::Test, tol);
  CHECK(crmse3 <= tol.stol + 1e-12);
  (void)metre3;
}

TEST_CASE("energy_stats: references give zero, an overlapped pair is invalid") {
  EnergyModelParams p;
  auto comps = world::all_compositions(3, 2, 3);
  world::DatasetConfig cfg;
  cfg.n_inits = 3;
  cfg.relax.steps = 150;
  auto rs = world::generate_dataset(comps, p, cfg, 3);
  const auto vt = world::ValidityThresholds::defaults(p);

  std::vector<GeneratedSample> gen;
  for (const auto& e : rs.entries)
    if (e.polymorph == 0) gen.push_back({e.comp_index, e.structure});
  auto [rel, inv] = evalm::energy_stats(gen, rs, p, vt);
  CHECK(rel == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(inv == 0.0);

  // generated relaxed polymorphs sit at or above the designated reference
  std::vector<GeneratedSample> all;
  for (const auto& e : rs.entries) all.push_back({e.comp_index, e.structure});
  auto [rel_all, inv_all] = evalm::energy_stats(all, rs, p, vt);
  CHECK(rel_all >= -1e-10);
  CHECK(inv_all == 0.0);

  GeneratedSample overlapped = gen[0];
  const int d = overlapped.structure.dim();
  for (int a = 0; a < d; ++a)
    overlapped.structure.frac[std::size_t(d + a)] =
        overlapped.structure.frac[std::size_t(a)] +
        (a == 0 ? 1e-4 : 0.0);
  gen.push_back(overlapped);
  auto [rel2, inv2] = evalm::energy_stats(gen, rs, p, vt);
  CHECK(inv2 > 0.0);
  (void)rel2;
}

TEST_CASE("dataset structures validate clean") {
  EnergyModelParams p;
  auto comps = world::all_compositions(3, 2, 4);
  world::DatasetConfig cfg;
  cfg.n_inits = 4;
  cfg.relax.steps = 200;
  auto rs = world::generate_dataset(comps, p, cfg, 5);
  const auto vt = world::ValidityThresholds::defaults(p);
  int invalid = 0;
  for (const auto& e : rs.entries)
    if (!world::validity_check(e.structure, p, vt).valid) ++invalid;
  CHECK(invalid == 0);
}
