#include <doctest.h>

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "flowrl/grpo.hpp"
#include "flowrl/parallel.hpp"
#include "test_models.hpp"

using namespace flowrl;
using testutil::rigged_model;
using testutil::simple_structure;
using testutil::small_feat;

namespace {
const interp::InterpolantSchedule kLinear{interp::ScheduleKind::Linear, 0.25};
const interp::InterpolantSchedule kTrigGamma{interp::ScheduleKind::TrigGamma, 0.25};

// one-step synthetic trajectory with hand-chosen recorded moments
dyn::Trajectory synthetic_traj(const world::ToyStructure& state,
                               std::vector<double> mean_old,
                               std::vector<double> var,
                               std::vector<double> action) {
  dyn::Trajectory traj;
  traj.comp = state.comp;
  traj.x0 = state;
  traj.n_steps = 1;
  traj.dt = 0.1;
  dyn::Transition pos;
  pos.t = 0.0;
  pos.x = state.frac;
  pos.mean = std::move(mean_old);
  pos.var = std::move(var);
  pos.action = std::move(action);
  pos.stochastic = true;
  pos.log_prob = dyn::transition_logprob(pos.mean, pos.var, pos.action,
                                         interp::Geometry::TorusUnit);
  traj.pos.push_back(std::move(pos));
  dyn::Transition lat;
  lat.t = 0.0;
  lat.x = state.cell;
  lat.mean = state.cell;
  lat.action = state.cell;
  lat.stochastic = false;
  traj.lat.push_back(std::move(lat));
  traj.terminal = state;
  return traj;
}

}  // namespace

TEST_CASE("reward clipping core: [-1,-2,-3] maps to [1,2,3], invalids get -penalty") {
  grpo::RewardSpec spec;
  std::vector<std::optional<double>> epa{-1.0, -2.0, -3.0};
  auto r = grpo::reward_from_energies(epa, spec);
  CHECK(r[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(r[1] == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(r[2] == doctest::Approx(3.0).epsilon(1e-14));

  std::vector<std::optional<double>> all_bad{std::nullopt, std::nullopt};
  auto rb = grpo::reward_from_energies(all_bad, spec);
  CHECK(rb[0] == -3.0);
  CHECK(rb[1] == -3.0);

  // an outlier z-score can exceed band_std only once the group is large
  // enough (max z is sqrt(n-1)); with 16 members one diverging energy clips
  std::vector<std::optional<double>> with_outlier(16, -1.0);
  with_outlier[15] = 1e7;
  auto rc = grpo::reward_from_energies(with_outlier, spec);
  CHECK(rc[15] > -1e7 * 0.9);  // clipped well below the raw magnitude
  // invalid members do not perturb the band of the valid ones
  std::vector<std::optional<double>> with_invalid{-1.0, -2.0, -3.0, std::nullopt};
  auto rd = grpo::reward_from_energies(with_invalid, spec);
  CHECK(rd[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(rd[3] == -3.0);
}

TEST_CASE("reward_energy flags overlapping structures invalid") {
  world::EnergyModelParams wp;
  const auto vt = world::ValidityThresholds::defaults(wp);
  grpo::RewardSpec spec;
  auto good = simple_structure(3);
  auto bad = good;
  bad.frac[2] = bad.frac[0] + 1e-5;
  bad.frac[3] = bad.frac[1];
  auto r = grpo::reward_energy({good, good, bad}, wp, vt, spec);
  CHECK(r[2] == -spec.penalty_per_atom);
  CHECK(r[0] == r[1]);
}

TEST_CASE("reward_crmse: perfect copy gets offset, junk gets offset - stol") {
  world::EnergyModelParams wp;
  auto comps = world::all_compositions(3, 2, 3);
  world::DatasetConfig dcfg;
  dcfg.n_inits = 3;
  dcfg.relax.steps = 120;
  auto refs = world::generate_dataset(comps, wp, dcfg, 51);
  const evalm::MatcherTolerances tol{0.5, 0.3, 8};
  grpo::RewardSpec spec;

  const int ci = refs.comp_indices(std::nullopt).front();
  const auto* ref = refs.reference_for(ci);
  world::ToyStructure junk = ref->structure;
  junk.cell[0] *= 3.0;  // cell check fails against every polymorph
  auto r = grpo::reward_crmse({ref->structure, junk}, ci, refs, tol, spec);
  CHECK(r[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(r[1] == doctest::Approx(0.0).epsilon(1e-12));
  for (double v : r) {
    CHECK(v <= spec.crmse_offset + 1e-12);
    CHECK(v >= spec.crmse_offset - spec.stol - 1e-12);
  }
}

TEST_CASE("advantages: the [1,2,3] case, exact normalization, offset invariance") {
  auto res = grpo::advantages({1.0, 2.0, 3.0});
  CHECK_FALSE(res.degenerate);
  CHECK(res.adv[0] == doctest::Approx(-1.22474487).epsilon(1e-8));
  CHECK(res.adv[1] == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(res.adv[2] == doctest::Approx(1.22474487).epsilon(1e-8));

  CounterRng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> r(6);
    for (auto& v : r) v = rng.normal() * 2.0;
    auto a = grpo::advantages(r);
    double mean = 0.0, var = 0.0;
    for (double v : a.adv) mean += v;
    mean /= double(a.adv.size());
    for (double v : a.adv) var += (v - mean) * (v - mean);
    var /= double(a.adv.size());
    CHECK(std::abs(mean) <= 1e-10);
    CHECK(std::abs(std::sqrt(var) - 1.0) <= 1e-10);

    // constant reward offsets cancel
    for (double c : {1.0, 100.0}) {
      std::vector<double> shifted = r;
      for (auto& v : shifted) v += c;
      auto b = grpo::advantages(shifted);
      for (std::size_t i = 0; i < r.size(); ++i)
        CHECK(std::abs(a.adv[i] - b.adv[i]) <= 1e-12);
    }
  }

  auto degen = grpo::advantages({2.5, 2.5, 2.5, 2.5});
  CHECK(degen.degenerate);
  for (double v : degen.adv) CHECK(v == 0.0);
}

TEST_CASE("clipped objective selects the documented branch for both advantage signs") {
  auto feat = small_feat();
  const double dt = 0.1, v = 0.1;
  const double b_bias = 0.8;
  auto model = rigged_model(feat, kLinear, {b_bias, b_bias}, {0.0, 0.0}, false);
  dyn::Policy policy;
  policy.model = model;
  policy.mode = dyn::Mode::PerturbedODE;
  policy.noise_pos = {dyn::NoiseKind::Constant, 1.0};  // recorded vars rule

  world::ToyStructure state;
  state.comp.species = {1};
  state.cell = {3.0, 3.0};
  state.frac = {0.5, 0.5};
  const double mu_new = 0.5 + b_bias * dt;  // 0.58 per component

  grpo::RLConfig cfg;
  cfg.clip_eps = 0.3;
  cfg.policy_weight = 1.0;
  cfg.n_t = 1;
  cfg.normalization = grpo::NormStrategy::AdvantagePerAtom;

  SUBCASE("positive advantage, ratio 1.5 -> clipped branch 1.3") {
    // action at the new mean; old mean displaced so q = exp(dlp) = 1.5
    const double target_q = 1.5;
    const double delta = std::sqrt(2.0 * v * std::log(target_q) / 2.0);
    // two components contribute (a - mu_old)^2 each: split the log evenly
    std::vector<double> action{mu_new, mu_new};
    std::vector<double> mean_old{mu_new - delta, mu_new - delta};
    auto traj = synthetic_traj(state, mean_old, {v, v}, action);
    diffnet::Tape tape(grpo::trainable(policy));
    grpo::TermStats stats;
    auto expr = grpo::policy_term_tape(tape, policy, traj, 1.0, cfg, 1.0, &stats);
    CHECK(tape.value_scalar(expr) == doctest::Approx(1.3).epsilon(1e-12));
    CHECK(stats.ratio_terms == 1);
    CHECK(stats.clipped == 1);
  }

  SUBCASE("negative advantage, ratio 0.5 -> clipped branch -0.7") {
    const double target_q = 0.5;
    const double delta = std::sqrt(-2.0 * v * std::log(target_q) / 2.0);
    std::vector<double> action{mu_new + delta, mu_new + delta};
    std::vector<double> mean_old = action;  // old mean sits on the action
    auto traj = synthetic_traj(state, mean_old, {v, v}, action);
    diffnet::Tape tape(grpo::trainable(policy));
    grpo::TermStats stats;
    auto expr = grpo::policy_term_tape(tape, policy, traj, -1.0, cfg, 1.0, &stats);
    CHECK(tape.value_scalar(expr) == doctest::Approx(-0.7).epsilon(1e-12));
  }
}

namespace {

struct TinyRL {
  world::ReferenceSet refs;
  grpo::RLState state;
  grpo::RLConfig cfg;
};

TinyRL make_tiny_rl(bool score_mode, std::uint64_t seed) {
  TinyRL t;
  world::EnergyModelParams wp;
  auto comps = world::all_compositions(3, 2, 3);
  world::DatasetConfig dcfg;
  dcfg.n_inits = 3;
  dcfg.relax.steps = 100;
  t.refs = world::generate_dataset(comps, wp, dcfg, 31);

  auto feat = small_feat(3, 2);
  auto schedule = score_mode ? kTrigGamma : kLinear;
  auto model = dyn::make_model(feat, schedule, {}, {10}, {8}, score_mode, seed);

  t.state.policy.model = model;
  t.state.policy.mode =
      score_mode ? dyn::Mode::ScoreSDE : dyn::Mode::PerturbedODE;
  t.state.policy.noise_pos = {dyn::NoiseKind::SqrtRatio, 0.01};
  t.state.ref = t.state.policy;  // frozen copy with the same noise
  t.state.refs = &t.refs;
  t.state.world_params = wp;
  t.state.validity = world::ValidityThresholds::defaults(wp);
  t.state.match_tol = {0.5, 0.3, 8};
  t.state.adam = diffnet::AdamState::init(model.param_count(), 1e-3);

  t.cfg.group_size = 3;
  t.cfg.groups_per_iter = 2;
  t.cfg.ppo_epochs = 2;
  t.cfg.n_t = 4;
  t.cfg.kl_weight = 1e-2;
  t.cfg.distill_weight = score_mode ? 1e-3 : 0.0;
  return t;
}

}  // namespace

TEST_CASE("at theta == theta_old the objective reduces to the ratio-1 value") {
  for (bool score : {false, true}) {
    auto t = make_tiny_rl(score, 7);
    auto groups = grpo::collect_groups(t.state, t.cfg, CounterRng(11));
    const double J = grpo::grpo_objective(groups, t.state.policy, t.cfg);
    // q == 1 for every term, so J = scale * sum of normalized advantages
    double expected = 0.0;
    std::size_t n_traj = 0;
    for (const auto& g : groups) n_traj += g.trajs.size();
    for (const auto& g : groups)
      for (std::size_t i = 0; i < g.trajs.size(); ++i)
        expected += t.cfg.n_t * g.adv[i] / double(g.trajs[i].comp.n());
    expected *= t.cfg.policy_weight / (double(n_traj) * double(t.cfg.n_t));
    CHECK(std::abs(J - expected) <= 1e-13);

    // KL and distillation vanish identically at theta == theta_ref
    CHECK(grpo::kl_regularizer(groups, t.state.policy, t.state.ref, t.cfg) == 0.0);
    if (score)
      CHECK(grpo::distill_regularizer(groups, t.state.policy, t.state.ref, t.cfg) ==
            0.0);
  }
}

TEST_CASE("kl closed form: equal variances and monte-carlo agreement") {
  // closed form for diagonal gaussians, checked against sampling
  auto closed = [](double m1, double v1, double m2, double v2) {
    return 0.5 * std::log(v2 / v1) + (v1 + (m1 - m2) * (m1 - m2)) / (2 * v2) - 0.5;
  };
  CHECK(closed(0.3, 0.2, 0.7, 0.2) ==
        doctest::Approx((0.4 * 0.4) / (2 * 0.2)).epsilon(1e-12));

  CounterRng rng(23);
  for (int rep = 0; rep < 5; ++rep) {
    CounterRng r = rng.stream(std::uint64_t(rep));
    const double m1 = r.normal(), m2 = r.normal();
    const double v1 = 0.2 + r.uniform(), v2 = 0.2 + r.uniform();
    const int n = 100000;
    double acc = 0.0, acc2 = 0.0;
    for (int i = 0; i < n; ++i) {
      const double x = m1 + std::sqrt(v1) * r.normal();
      const double lp1 = -0.5 * ((x - m1) * (x - m1) / v1 + std::log(v1));
      const double lp2 = -0.5 * ((x - m2) * (x - m2) / v2 + std::log(v2));
      acc += lp1 - lp2;
      acc2 += (lp1 - lp2) * (lp1 - lp2);
    }
    const double mc = acc / n;
    const double se = std::sqrt((acc2 / n - mc * mc) / n);
    CHECK(std::abs(mc - closed(m1, v1, m2, v2)) <= 3 * se);
  }
}

TEST_CASE("kl term on a crafted trajectory matches the closed form") {
  auto feat = small_feat();
  const double dt = 0.1;
  auto model = rigged_model(feat, kLinear, {0.5, 0.5}, {0.0, 0.0}, false);
  auto ref_model = rigged_model(feat, kLinear, {0.2, 0.2}, {0.0, 0.0}, false);

  dyn::Policy policy;
  policy.model = model;
  policy.mode = dyn::Mode::PerturbedODE;
  policy.noise_pos = {dyn::NoiseKind::Constant, 0.3};
  dyn::Policy ref;
  ref.model = ref_model;
  ref.mode = dyn::Mode::PerturbedODE;
  ref.noise_pos = {dyn::NoiseKind::Constant, 0.4};

  world::ToyStructure state;
  state.comp.species = {1};
  state.cell = {3.0, 3.0};
  state.frac = {0.4, 0.6};
  const double v_theta = 0.3 * 0.3 * dt;
  auto traj = synthetic_traj(state, {0.44, 0.64}, {v_theta, v_theta}, {0.45, 0.65});

  diffnet::Tape tape(grpo::trainable(policy));
  auto expr = grpo::kl_term_tape(tape, policy, ref, traj.pos.empty() ? traj : traj, nullptr);
  const double v_ref = 0.4 * 0.4 * dt;
  const double dmu = (0.5 - 0.2) * dt;  // same per component
  const double kl_c = 0.5 * std::log(v_ref / v_theta) +
                      (v_theta + dmu * dmu) / (2 * v_ref) - 0.5;
  CHECK(tape.value_scalar(expr) == doctest::Approx(2.0 * kl_c).epsilon(1e-12));
}

TEST_CASE("distillation is zero at the reference, nonnegative, linear in the weight") {
  auto t = make_tiny_rl(true, 13);
  auto groups = grpo::collect_groups(t.state, t.cfg, CounterRng(17));
  CHECK(grpo::distill_regularizer(groups, t.state.policy, t.state.ref, t.cfg) == 0.0);

  // perturb the denoiser head of theta: penalty becomes positive
  auto& params = grpo::trainable(t.state.policy);
  CounterRng rng(19);
  for (auto& v : params.values) v += 0.01 * rng.normal();
  const double d1 = grpo::distill_regularizer(groups, t.state.policy, t.state.ref, t.cfg);
  CHECK(d1 > 0.0);
  auto cfg2 = t.cfg;
  cfg2.distill_weight = 2.0 * t.cfg.distill_weight;
  const double d2 = grpo::distill_regularizer(groups, t.state.policy, t.state.ref, cfg2);
  CHECK(d2 == doctest::Approx(2.0 * d1).epsilon(1e-13));
}

TEST_CASE("objective gradients match finite differences across modes and strategies") {
  for (bool score : {false, true}) {
    for (auto strategy : {grpo::NormStrategy::AdvantagePerAtom,
                          grpo::NormStrategy::PerAtomRatioAverage}) {
      auto t = make_tiny_rl(score, 29);
      t.cfg.normalization = strategy;
      auto groups = grpo::collect_groups(t.state, t.cfg, CounterRng(31));
      // move theta off-policy so ratios are informative
      auto& params = grpo::trainable(t.state.policy);
      CounterRng rng(37);
      for (auto& v : params.values) v += 0.02 * rng.normal();

      auto& g0 = groups.front();
      const auto& traj = g0.trajs.front();
      const double adv = 0.8;
      auto objective = [&](diffnet::Tape& tape) {
        dyn::Policy probe = t.state.policy;
        if (probe.mode == dyn::Mode::AnnealedPerturbedODE)
          probe.anneal->params = tape.params();
        else
          probe.model.params = tape.params();
        grpo::TermStats stats;
        auto pol = grpo::policy_term_tape(tape, probe, traj, adv, t.cfg, 1.0, &stats);
        auto kl = grpo::kl_term_tape(tape, probe, t.state.ref, traj, &stats);
        auto total = tape.sub(pol, tape.scale(t.cfg.kl_weight, kl));
        if (score) {
          auto dist = grpo::distill_term_tape(tape, probe, t.state.ref, traj);
          total = tape.sub(total, tape.scale(0.01, dist));
        }
        return total;
      };
      auto [v, g] = diffnet::loss_grad(params, objective);
      (void)v;
      auto fd = diffnet::finite_diff_grad(params, objective, 1e-5);
      CHECK(diffnet::rel_l2_error(g, fd) <= 1e-5);
    }
  }
}

TEST_CASE("rl_iteration: zero learning rate leaves the policy unchanged") {
  auto t = make_tiny_rl(false, 41);
  t.state.adam.lr = 0.0;
  auto before = grpo::trainable(t.state.policy).values;
  auto metrics = grpo::rl_iteration(t.state, t.cfg, CounterRng(43));
  CHECK(grpo::trainable(t.state.policy).values == before);
  CHECK(metrics.clip_fraction >= 0.0);
  CHECK(metrics.clip_fraction <= 1.0);
  CHECK(metrics.invalid_rate >= 0.0);
  CHECK(metrics.invalid_rate <= 1.0);
  CHECK(std::isfinite(metrics.mean_reward));
  CHECK(std::isfinite(metrics.mean_kl));
}

TEST_CASE("rl_iteration is bit-reproducible and thread-count independent") {
  auto run = [&](bool parallel) {
    par::set_enabled(parallel);
    auto t = make_tiny_rl(false, 47);
    auto m1 = grpo::rl_iteration(t.state, t.cfg, CounterRng(53));
    auto m2 = grpo::rl_iteration(t.state, t.cfg, CounterRng(54));
    (void)m1;
    (void)m2;
    return grpo::trainable(t.state.policy).values;
  };
  auto serial = run(false);
  auto parallel = run(true);
  par::set_enabled(true);
  CHECK(serial == parallel);
}
