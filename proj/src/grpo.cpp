#include "flowrl/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "flowrl/parallel.hpp"

namespace flowrl::grpo {

using diffnet::Expr;
using diffnet::Tape;

namespace {
constexpr double kLogTwoPi = 1.8378770664093454836;
constexpr double kEpsStd = 1e-8;
constexpr double kDegenerateStd = 1e-12;
}

std::string to_string(NormStrategy s) {
  return s == NormStrategy::AdvantagePerAtom ? "advantage_per_atom"
                                             : "per_atom_ratio_average";
}

NormStrategy norm_strategy_from_string(const std::string& s) {
  if (s == "advantage_per_atom") return NormStrategy::AdvantagePerAtom;
  if (s == "per_atom_ratio_average") return NormStrategy::PerAtomRatioAverage;
  throw std::invalid_argument("unknown normalization strategy: " + s);
}

std::string to_string(RewardKind k) {
  return k == RewardKind::Energy ? "energy" : "crmse_like";
}

RewardKind reward_kind_from_string(const std::string& s) {
  if (s == "energy") return RewardKind::Energy;
  if (s == "crmse_like") return RewardKind::CrmseLike;
  throw std::invalid_argument("unknown reward kind: " + s);
}

void RLConfig::validate() const {
  if (group_size < 2) throw std::invalid_argument("group_size must be >= 2");
  if (groups_per_iter < 1) throw std::invalid_argument("groups_per_iter must be >= 1");
  if (!(clip_eps > 0.0 && clip_eps < 1.0))
    throw std::invalid_argument("clip_eps must be in (0, 1)");
  if (policy_weight < 0.0 || kl_weight < 0.0 || distill_weight < 0.0 ||
      lat_policy_weight < 0.0)
    throw std::invalid_argument("objective weights must be >= 0");
  if (ppo_epochs < 1) throw std::invalid_argument("ppo_epochs must be >= 1");
  if (n_t < 1) throw std::invalid_argument("n_t must be >= 1");
}

std::vector<double> reward_from_energies(
    const std::vector<std::optional<double>>& energy_per_atom,
    const RewardSpec& spec) {
  const std::size_t g = energy_per_atom.size();
  if (g < 2) throw std::invalid_argument("reward_energy: group size must be >= 2");
  // clip band over the valid members only
  double mean = 0.0;
  int n_valid = 0;
  for (const auto& e : energy_per_atom)
    if (e) {
      mean += *e;
      ++n_valid;
    }
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
  if (n_valid > 0) {
    mean /= double(n_valid);
    double var = 0.0;
    for (const auto& e : energy_per_atom)
      if (e) var += (*e - mean) * (*e - mean);
    var /= double(n_valid);
    const double band = spec.band_std * std::sqrt(var);
    lo = mean - band;
    hi = mean + band;
  }
  std::vector<double> rewards(g, 0.0);
  for (std::size_t i = 0; i < g; ++i) {
    rewards[i] = energy_per_atom[i]
                     ? -std::clamp(*energy_per_atom[i], lo, hi)
                     : -spec.penalty_per_atom;
  }
  return rewards;
}

std::vector<double> reward_energy(const std::vector<world::ToyStructure>& terminals,
                                  const world::EnergyModelParams& p,
                                  const world::ValidityThresholds& vt,
                                  const RewardSpec& spec) {
  std::vector<std::optional<double>> epa(terminals.size());
  for (std::size_t i = 0; i < terminals.size(); ++i)
    if (world::validity_check(terminals[i], p, vt).valid)
      epa[i] = world::energy(terminals[i], p).per_atom;
  return reward_from_energies(epa, spec);
}

std::vector<double> reward_crmse(const std::vector<world::ToyStructure>& terminals,
                                 int comp_index, const world::ReferenceSet& refs,
                                 const evalm::MatcherTolerances& tol,
                                 const RewardSpec& spec) {
  auto polys = refs.polymorphs_for(comp_index);
  if (polys.empty())
    throw std::invalid_argument("reward_crmse: composition not in reference set");
  std::vector<double> rewards(terminals.size(), 0.0);
  for (std::size_t i = 0; i < terminals.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto* ref : polys) {
      auto m = evalm::periodic_rmsd(terminals[i], ref->structure, tol);
      if (m.matched) best = std::min(best, m.rmsd);
    }
    const double crmse = std::isfinite(best) ? best : spec.stol;
    rewards[i] = spec.crmse_offset - crmse;
  }
  return rewards;
}

AdvantageResult advantages(const std::vector<double>& rewards) {
  const std::size_t g = rewards.size();
  if (g < 2) throw std::invalid_argument("advantages: group size must be >= 2");
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= double(g);
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= double(g);  // population variance
  const double std = std::sqrt(var);
  AdvantageResult res;
  res.adv.assign(g, 0.0);
  if (std < kDegenerateStd) {
    res.degenerate = true;
    return res;
  }
  // the guard floors the divisor, so non-degenerate groups normalize exactly
  const double denom = std::max(std, kEpsStd);
  for (std::size_t i = 0; i < g; ++i) res.adv[i] = (rewards[i] - mean) / denom;
  return res;
}

const diffnet::ParameterVector& trainable(const dyn::Policy& p) {
  if (p.mode == dyn::Mode::AnnealedPerturbedODE) {
    if (!p.anneal)
      throw std::logic_error("annealed policy without a learned schedule");
    return p.anneal->params;
  }
  return p.model.params;
}

diffnet::ParameterVector& trainable(dyn::Policy& p) {
  return const_cast<diffnet::ParameterVector&>(
      trainable(static_cast<const dyn::Policy&>(p)));
}

namespace {

// Per-atom Gaussian log density mirrored between tape and plain arithmetic so
// the ratio is exactly 1 at theta == theta_old: sum of (delta^2 * inv_var),
// scaled by -1/2, plus the constant normalization term.
double plain_atom_logprob(std::span<const double> mean,
                          std::span<const double> inv_var,
                          std::span<const double> action, double cterm,
                          bool torus) {
  double acc = 0.0;
  for (std::size_t c = 0; c < mean.size(); ++c) {
    double delta = action[c] - mean[c];
    if (torus) delta = interp::min_image(delta);
    acc += (delta * delta) * inv_var[c];
  }
  return -0.5 * acc + cterm;
}

struct AtomDensity {
  std::vector<double> inv_var;  // per component
  double cterm;                 // -1/2 sum (log var + log 2 pi)
};

AtomDensity atom_density(std::span<const double> var) {
  AtomDensity d;
  d.inv_var.resize(var.size());
  double c = 0.0;
  for (std::size_t i = 0; i < var.size(); ++i) {
    if (!(var[i] > 0.0))
      throw std::invalid_argument("grpo: non-positive recorded variance");
    d.inv_var[i] = 1.0 / var[i];
    c += std::log(var[i]) + kLogTwoPi;
  }
  d.cterm = -0.5 * c;
  return d;
}

// tape log density of the recorded action under mean node `mean`
Expr tape_atom_logprob(Tape& tape, Expr mean, std::span<const double> inv_var,
                       std::span<const double> action, double cterm, bool torus) {
  Expr delta = tape.sub(tape.constant(action), mean);
  if (torus) delta = tape.min_image(delta);
  Expr wsq = tape.mul(tape.square(delta),
                      tape.constant(std::vector<double>(inv_var.begin(), inv_var.end())));
  return tape.add(tape.scale(-0.5, tape.sum(wsq)), tape.constant(cterm));
}

// theta-dependent transition means for one recorded step of one channel,
// grouped per atom (n_units nodes of `dim` components each)
struct StepMeans {
  std::vector<Expr> mean;        // per unit
  std::vector<Expr> denoiser;    // per unit (score mode only)
  bool torus = false;
};

StepMeans pos_step_means(Tape& tape, const dyn::Policy& policy,
                         const dyn::Trajectory& traj, std::size_t step,
                         bool want_denoiser) {
  const auto& m = policy.model;
  const int d = m.feat.dim;
  const int n = traj.comp.n();
  const double dt = traj.dt;
  const auto& tr = traj.pos[step];
  const auto& lat_tr = traj.lat[step];  // cell state at the same step
  StepMeans out;
  out.torus = true;

  std::vector<double> feat(static_cast<std::size_t>(m.pos_spec.input_dim));

  switch (policy.mode) {
    case dyn::Mode::PerturbedODE:
    case dyn::Mode::ScoreSDE: {
      double corr = 0.0;
      if (policy.mode == dyn::Mode::ScoreSDE) {
        const auto sv = interp::schedule_eval(m.schedule, tr.t);
        const double gamma = std::max(sv.gamma, dyn::kGammaFloor);
        const double sigma =
            dyn::noise_sigma(policy.noise_pos, tr.t, 0.5 * dt);
        corr = sigma * sigma / (2.0 * gamma);
      }
      for (int i = 0; i < n; ++i) {
        features::pos_features(m.feat, tr.t, traj.comp, tr.x, lat_tr.x, i, feat);
        Expr net = tape.net_forward(m.pos_spec, m.pos_offset(), feat);
        Expr vel = m.with_denoiser ? tape.slice(net, 0, d) : net;
        Expr drift = vel;
        if (policy.mode == dyn::Mode::ScoreSDE) {
          Expr zhat = tape.slice(net, d, d);
          drift = tape.sub(vel, tape.scale(corr, zhat));
          if (want_denoiser) out.denoiser.push_back(zhat);
        } else if (want_denoiser) {
          throw std::logic_error("denoiser term requires score mode");
        }
        Expr x_atom = tape.constant(std::vector<double>(
            tr.x.begin() + i * d, tr.x.begin() + (i + 1) * d));
        out.mean.push_back(tape.add(x_atom, tape.scale(dt, drift)));
      }
      return out;
    }
    case dyn::Mode::AnnealedPerturbedODE: {
      // trainable vector is the annealing net; the velocity field is frozen
      Expr s_pos;
      if (policy.anneal) {
        Expr t_in = tape.constant(tr.t);
        if (policy.anneal->shared_trunk) {
          Expr s2 = tape.net_forward(policy.anneal->spec, 0, t_in);
          s_pos = tape.slice(s2, 0, 1);
        } else {
          s_pos = tape.net_forward(policy.anneal->spec,
                                   policy.anneal->pos_offset(), t_in);
        }
      } else {
        s_pos = tape.constant((*policy.handcrafted_s)[0] * tr.t);
      }
      Expr one_plus_s = tape.add(s_pos, tape.constant(1.0));
      std::vector<double> b;
      dyn::eval_position_net(m, tr.t, traj.comp, tr.x, lat_tr.x, b, nullptr);
      for (int i = 0; i < n; ++i) {
        std::vector<double> b_dt(static_cast<std::size_t>(d));
        for (int a = 0; a < d; ++a) b_dt[std::size_t(a)] = b[std::size_t(i * d + a)] * dt;
        Expr x_atom = tape.constant(std::vector<double>(
            tr.x.begin() + i * d, tr.x.begin() + (i + 1) * d));
        out.mean.push_back(tape.add(
            x_atom, tape.mul(tape.broadcast(one_plus_s, d), tape.constant(b_dt))));
      }
      return out;
    }
    default:
      throw std::logic_error("policy mode has no stochastic position channel");
  }
}

StepMeans lat_step_means(Tape& tape, const dyn::Policy& policy,
                         const dyn::Trajectory& traj, const dyn::Transition& tr,
                         const dyn::Transition& pos_tr) {
  const auto& m = policy.model;
  const int d = m.feat.dim;
  const double dt = traj.dt;
  StepMeans out;
  out.torus = false;
  if (policy.mode != dyn::Mode::AnnealedPerturbedODE)
    throw std::logic_error("lattice channel is stochastic only in annealed mode");

  Expr s_lat;
  if (policy.anneal) {
    Expr t_in = tape.constant(tr.t);
    if (policy.anneal->shared_trunk) {
      Expr s2 = tape.net_forward(policy.anneal->spec, 0, t_in);
      s_lat = tape.slice(s2, 1, 1);
    } else {
      s_lat = tape.net_forward(policy.anneal->lat_spec,
                               policy.anneal->lat_offset(), t_in);
    }
  } else {
    s_lat = tape.constant((*policy.handcrafted_s)[1] * tr.t);
  }
  Expr one_plus_s = tape.add(s_lat, tape.constant(1.0));
  std::vector<double> b;
  dyn::eval_lattice_net(m, tr.t, traj.comp, pos_tr.x, tr.x, b);
  std::vector<double> b_dt(static_cast<std::size_t>(d));
  for (int a = 0; a < d; ++a) b_dt[std::size_t(a)] = b[std::size_t(a)] * dt;
  out.mean.push_back(tape.add(tape.constant(tr.x),
                              tape.mul(tape.broadcast(one_plus_s, d),
                                       tape.constant(b_dt))));
  return out;
}

// reference-policy transition moments at the recorded state (plain doubles)
struct RefMoments {
  std::vector<double> mean;  // n_units x d
  std::vector<double> var;
  std::vector<double> denoiser;  // score mode
};

RefMoments ref_pos_moments(const dyn::Policy& ref, const dyn::Trajectory& traj,
                           std::size_t step, bool want_denoiser) {
  const auto& m = ref.model;
  const double dt = traj.dt;
  const auto& tr = traj.pos[step];
  const auto& lat_tr = traj.lat[step];
  const double sigma = dyn::noise_sigma(ref.noise_pos, tr.t, 0.5 * dt);
  RefMoments out;
  std::vector<double> b, zhat;
  switch (ref.mode) {
    case dyn::Mode::PerturbedODE: {
      dyn::eval_position_net(m, tr.t, traj.comp, tr.x, lat_tr.x, b, nullptr);
      out.mean.resize(b.size());
      for (std::size_t i = 0; i < b.size(); ++i) out.mean[i] = tr.x[i] + b[i] * dt;
      out.var.assign(b.size(), sigma * sigma * dt);
      break;
    }
    case dyn::Mode::ScoreSDE: {
      const auto sv = interp::schedule_eval(m.schedule, tr.t);
      const double gamma = std::max(sv.gamma, dyn::kGammaFloor);
      const double corr = sigma * sigma / (2.0 * gamma);
      dyn::eval_position_net(m, tr.t, traj.comp, tr.x, lat_tr.x, b, &zhat);
      out.mean.resize(b.size());
      for (std::size_t i = 0; i < b.size(); ++i)
        out.mean[i] = tr.x[i] + (b[i] - corr * zhat[i]) * dt;
      out.var.assign(b.size(), sigma * sigma * dt);
      break;
    }
    case dyn::Mode::AnnealedPerturbedODE: {
      // reference schedule is s = 0
      dyn::eval_position_net(m, tr.t, traj.comp, tr.x, lat_tr.x, b, nullptr);
      out.mean.resize(b.size());
      out.var.resize(b.size());
      const double floor = dyn::kVarFloorScale * dt;
      for (std::size_t i = 0; i < b.size(); ++i) {
        out.mean[i] = tr.x[i] + b[i] * dt;
        out.var[i] = std::max(sigma * sigma * b[i] * b[i] * dt, floor);
      }
      break;
    }
    default:
      throw std::logic_error("reference policy must be stochastic");
  }
  if (want_denoiser) {
    if (zhat.empty())
      dyn::eval_position_net(m, tr.t, traj.comp, tr.x, lat_tr.x, b, &zhat);
    out.denoiser = zhat;
  }
  return out;
}

RefMoments ref_lat_moments(const dyn::Policy& ref, const dyn::Trajectory& traj,
                           const dyn::Transition& tr,
                           const dyn::Transition& pos_tr) {
  const double dt = traj.dt;
  const double sigma = dyn::noise_sigma(ref.noise_lat, tr.t, 0.5 * dt);
  std::vector<double> b;
  dyn::eval_lattice_net(ref.model, tr.t, traj.comp, pos_tr.x, tr.x, b);
  RefMoments out;
  out.mean.resize(b.size());
  out.var.resize(b.size());
  const double floor = dyn::kVarFloorScale * dt;
  for (std::size_t i = 0; i < b.size(); ++i) {
    out.mean[i] = tr.x[i] + b[i] * dt;
    out.var[i] = std::max(sigma * sigma * b[i] * b[i] * dt, floor);
  }
  return out;
}

// clipped-surrogate term for one channel of one step
Expr channel_policy_term(Tape& tape, const StepMeans& means,
                         const dyn::Transition& tr, double advantage,
                         const RLConfig& cfg, TermStats* stats) {
  const int n_units = int(means.mean.size());
  const int d = int(tr.x.size()) / n_units;
  const double lo = 1.0 - cfg.clip_eps, hi = 1.0 + cfg.clip_eps;

  auto count_ratio = [&](double q) {
    if (stats) {
      stats->ratio_terms += 1;
      if (q < lo || q > hi) stats->clipped += 1;
    }
  };

  if (cfg.normalization == NormStrategy::AdvantagePerAtom) {
    const double adv_scaled = advantage / double(n_units);
    Expr lp_struct{};
    double lp_old_struct = 0.0;
    for (int u = 0; u < n_units; ++u) {
      auto var_u = std::span<const double>(tr.var).subspan(std::size_t(u * d),
                                                           std::size_t(d));
      auto act_u = std::span<const double>(tr.action).subspan(std::size_t(u * d),
                                                              std::size_t(d));
      auto mean_old_u = std::span<const double>(tr.mean).subspan(
          std::size_t(u * d), std::size_t(d));
      const AtomDensity den = atom_density(var_u);
      Expr lp = tape_atom_logprob(tape, means.mean[std::size_t(u)], den.inv_var,
                                  act_u, den.cterm, means.torus);
      lp_old_struct += plain_atom_logprob(mean_old_u, den.inv_var, act_u,
                                          den.cterm, means.torus);
      lp_struct = lp_struct.valid() ? tape.add(lp_struct, lp) : lp;
    }
    Expr q = tape.exp(tape.sub(lp_struct, tape.constant(lp_old_struct)));
    count_ratio(tape.value_scalar(q));
    return tape.min(tape.scale(adv_scaled, q),
                    tape.scale(adv_scaled, tape.clip(q, lo, hi)));
  }

  // PerAtomRatioAverage
  Expr acc{};
  for (int u = 0; u < n_units; ++u) {
    auto var_u = std::span<const double>(tr.var).subspan(std::size_t(u * d),
                                                         std::size_t(d));
    auto act_u = std::span<const double>(tr.action).subspan(std::size_t(u * d),
                                                            std::size_t(d));
    auto mean_old_u = std::span<const double>(tr.mean).subspan(std::size_t(u * d),
                                                               std::size_t(d));
    const AtomDensity den = atom_density(var_u);
    Expr lp = tape_atom_logprob(tape, means.mean[std::size_t(u)], den.inv_var,
                                act_u, den.cterm, means.torus);
    const double lp_old =
        plain_atom_logprob(mean_old_u, den.inv_var, act_u, den.cterm, means.torus);
    Expr q = tape.exp(tape.sub(lp, tape.constant(lp_old)));
    count_ratio(tape.value_scalar(q));
    Expr term = tape.min(tape.scale(advantage, q),
                         tape.scale(advantage, tape.clip(q, lo, hi)));
    acc = acc.valid() ? tape.add(acc, term) : term;
  }
  return tape.scale(1.0 / double(n_units), acc);
}

// per-atom-averaged KL of one channel of one step; theta variances are the
// recorded ones, reference variances come from the frozen policy
Expr channel_kl_term(Tape& tape, const StepMeans& means,
                     const dyn::Transition& tr, const RefMoments& ref,
                     TermStats* stats) {
  const int n_units = int(means.mean.size());
  const int d = int(tr.x.size()) / n_units;
  Expr acc{};
  for (int u = 0; u < n_units; ++u) {
    double const_term = 0.0;
    std::vector<double> half_inv_vref(static_cast<std::size_t>(d));
    for (int c = 0; c < d; ++c) {
      const double v_theta = tr.var[std::size_t(u * d + c)];
      const double v_ref = ref.var[std::size_t(u * d + c)];
      if (!(v_ref > 0.0))
        throw std::invalid_argument("kl: non-positive reference variance");
      half_inv_vref[std::size_t(c)] = 0.5 / v_ref;
      const_term += 0.5 * std::log(v_ref / v_theta) + 0.5 * v_theta / v_ref - 0.5;
    }
    Expr delta = tape.sub(means.mean[std::size_t(u)],
                          tape.constant(std::vector<double>(
                              ref.mean.begin() + u * d, ref.mean.begin() + (u + 1) * d)));
    if (means.torus) delta = tape.min_image(delta);
    Expr quad = tape.sum(tape.mul(tape.square(delta), tape.constant(half_inv_vref)));
    Expr kl_u = tape.add(quad, tape.constant(const_term));
    acc = acc.valid() ? tape.add(acc, kl_u) : kl_u;
  }
  Expr avg = tape.scale(1.0 / double(n_units), acc);
  if (stats) {
    stats->kl_sum += tape.value_scalar(avg);
    stats->kl_terms += 1;
  }
  return avg;
}

Expr channel_distill_term(Tape& tape, const StepMeans& means,
                          const RefMoments& ref) {
  const int n_units = int(means.denoiser.size());
  if (n_units == 0)
    throw std::invalid_argument("distillation requires denoiser heads");
  const int d = int(ref.denoiser.size()) / n_units;
  Expr acc{};
  for (int u = 0; u < n_units; ++u) {
    Expr diff = tape.sub(means.denoiser[std::size_t(u)],
                         tape.constant(std::vector<double>(
                             ref.denoiser.begin() + u * d,
                             ref.denoiser.begin() + (u + 1) * d)));
    Expr sse = tape.sum(tape.square(diff));
    acc = acc.valid() ? tape.add(acc, sse) : sse;
  }
  return tape.scale(1.0 / double(n_units), acc);
}

struct TrajTerms {
  Expr policy, kl, distill;
};

TrajTerms build_traj_terms(Tape& tape, const dyn::Policy& policy,
                           const dyn::Policy* ref, const dyn::Trajectory& traj,
                           double advantage, const RLConfig& cfg,
                           bool want_policy, bool want_kl, bool want_distill,
                           TermStats* stats) {
  const bool lat_active = policy.mode == dyn::Mode::AnnealedPerturbedODE &&
                          policy.anneal_lattice && !traj.lat.empty() &&
                          traj.lat.front().stochastic;
  double w_pos = cfg.policy_weight, w_lat = 0.0;
  if (lat_active) {
    const double total = cfg.policy_weight + cfg.lat_policy_weight;
    w_pos = cfg.policy_weight / total;
    w_lat = cfg.lat_policy_weight / total;
  }

  TrajTerms out;
  for (std::size_t k = 0; k < traj.pos.size(); ++k) {
    const auto& ptr = traj.pos[k];
    if (ptr.stochastic) {
      StepMeans means = pos_step_means(tape, policy, traj, k, want_distill);
      if (want_policy) {
        Expr term = tape.scale(w_pos,
                               channel_policy_term(tape, means, ptr, advantage,
                                                   cfg, stats));
        out.policy = out.policy.valid() ? tape.add(out.policy, term) : term;
      }
      if (want_kl) {
        RefMoments rm = ref_pos_moments(*ref, traj, k, false);
        Expr term = channel_kl_term(tape, means, ptr, rm, stats);
        out.kl = out.kl.valid() ? tape.add(out.kl, term) : term;
      }
      if (want_distill) {
        RefMoments rm = ref_pos_moments(*ref, traj, k, true);
        Expr term = channel_distill_term(tape, means, rm);
        out.distill = out.distill.valid() ? tape.add(out.distill, term) : term;
      }
    }
    if (lat_active) {
      const auto& ltr = traj.lat[k];
      StepMeans means = lat_step_means(tape, policy, traj, ltr, ptr);
      if (want_policy) {
        Expr term = tape.scale(w_lat,
                               channel_policy_term(tape, means, ltr, advantage,
                                                   cfg, stats));
        out.policy = out.policy.valid() ? tape.add(out.policy, term) : term;
      }
      if (want_kl) {
        RefMoments rm = ref_lat_moments(*ref, traj, ltr, ptr);
        Expr term = channel_kl_term(tape, means, ltr, rm, stats);
        out.kl = out.kl.valid() ? tape.add(out.kl, term) : term;
      }
    }
  }
  return out;
}

}  // namespace

Expr policy_term_tape(Tape& tape, const dyn::Policy& policy,
                      const dyn::Trajectory& traj, double advantage,
                      const RLConfig& cfg, double norm_scale, TermStats* stats) {
  TrajTerms t = build_traj_terms(tape, policy, nullptr, traj, advantage, cfg,
                                 true, false, false, stats);
  if (!t.policy.valid()) return tape.constant(0.0);
  return tape.scale(norm_scale, t.policy);
}

Expr kl_term_tape(Tape& tape, const dyn::Policy& policy, const dyn::Policy& ref,
                  const dyn::Trajectory& traj, TermStats* stats) {
  TrajTerms t = build_traj_terms(tape, policy, &ref, traj, 0.0, RLConfig{},
                                 false, true, false, stats);
  if (!t.kl.valid()) return tape.constant(0.0);
  return t.kl;
}

Expr distill_term_tape(Tape& tape, const dyn::Policy& policy,
                       const dyn::Policy& ref, const dyn::Trajectory& traj) {
  TrajTerms t = build_traj_terms(tape, policy, &ref, traj, 0.0, RLConfig{},
                                 false, false, true, nullptr);
  if (!t.distill.valid()) return tape.constant(0.0);
  return t.distill;
}

namespace {

std::size_t total_trajectories(const std::vector<GroupRollout>& groups) {
  std::size_t n = 0;
  for (const auto& g : groups) n += g.trajs.size();
  return n;
}

}  // namespace

double grpo_objective(const std::vector<GroupRollout>& groups,
                      const dyn::Policy& policy, const RLConfig& cfg) {
  const std::size_t n_traj = total_trajectories(groups);
  if (n_traj == 0) return 0.0;
  const double norm_scale = 1.0 / (double(n_traj) * double(cfg.n_t));
  double total = 0.0;
  for (const auto& g : groups)
    for (std::size_t i = 0; i < g.trajs.size(); ++i) {
      Tape tape(trainable(policy));
      total += tape.value_scalar(policy_term_tape(tape, policy, g.trajs[i],
                                                  g.adv[i], cfg, norm_scale,
                                                  nullptr));
    }
  return total;
}

double kl_regularizer(const std::vector<GroupRollout>& groups,
                      const dyn::Policy& policy, const dyn::Policy& ref,
                      const RLConfig& cfg) {
  const std::size_t n_traj = total_trajectories(groups);
  if (n_traj == 0) return 0.0;
  const double norm_scale = cfg.kl_weight / (double(n_traj) * double(cfg.n_t));
  double total = 0.0;
  for (const auto& g : groups)
    for (const auto& traj : g.trajs) {
      Tape tape(trainable(policy));
      total += tape.value_scalar(kl_term_tape(tape, policy, ref, traj, nullptr));
    }
  return norm_scale * total;
}

double distill_regularizer(const std::vector<GroupRollout>& groups,
                           const dyn::Policy& policy, const dyn::Policy& ref,
                           const RLConfig& cfg) {
  const std::size_t n_traj = total_trajectories(groups);
  if (n_traj == 0) return 0.0;
  const double norm_scale = cfg.distill_weight / (double(n_traj) * double(cfg.n_t));
  double total = 0.0;
  for (const auto& g : groups)
    for (const auto& traj : g.trajs) {
      Tape tape(trainable(policy));
      total += tape.value_scalar(distill_term_tape(tape, policy, ref, traj));
    }
  return norm_scale * total;
}

std::vector<GroupRollout> collect_groups(const RLState& state, const RLConfig& cfg,
                                         CounterRng rng) {
  const auto train_comps = state.refs->comp_indices(world::Split::Train);
  if (train_comps.empty()) throw std::runtime_error("rl: empty train split");

  std::vector<GroupRollout> groups(static_cast<std::size_t>(cfg.groups_per_iter));
  std::vector<world::ToyStructure> shared_x0(groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    CounterRng comp_rng = rng.stream(0xc0, std::uint64_t(g));
    groups[g].comp_index = train_comps[std::size_t(
        comp_rng.uniform_int(std::int64_t(train_comps.size())))];
    if (cfg.shared_x0) {
      CounterRng x0_rng = rng.stream(0xd0, std::uint64_t(g));
      shared_x0[g] = dyn::sample_x0(state.policy,
                                    state.refs->composition(groups[g].comp_index),
                                    state.world_params, x0_rng);
    }
    groups[g].trajs.resize(std::size_t(cfg.group_size));
  }

  par::parallel_for(std::int64_t(groups.size()) * cfg.group_size,
                    [&](std::int64_t flat) {
                      const std::size_t g = std::size_t(flat / cfg.group_size);
                      const std::size_t i = std::size_t(flat % cfg.group_size);
                      CounterRng traj_rng = rng.stream(0xe0, std::uint64_t(flat));
                      const auto& comp =
                          state.refs->composition(groups[g].comp_index);
                      groups[g].trajs[i] =
                          cfg.shared_x0
                              ? dyn::rollout_from(state.policy, shared_x0[g],
                                                  cfg.n_t, traj_rng, true)
                              : dyn::rollout(state.policy, comp,
                                             state.world_params, cfg.n_t,
                                             traj_rng, true);
                    });

  par::parallel_for(std::int64_t(groups.size()), [&](std::int64_t gi) {
    GroupRollout& g = groups[std::size_t(gi)];
    std::vector<world::ToyStructure> terminals;
    terminals.reserve(g.trajs.size());
    for (const auto& t : g.trajs) terminals.push_back(t.terminal);
    g.rewards = cfg.reward == RewardKind::Energy
                    ? reward_energy(terminals, state.world_params, state.validity,
                                    state.reward_spec)
                    : reward_crmse(terminals, g.comp_index, *state.refs,
                                   state.match_tol, state.reward_spec);
    auto adv = advantages(g.rewards);
    g.adv = std::move(adv.adv);
    g.degenerate = adv.degenerate;
  });
  return groups;
}

IterationMetrics rl_iteration(RLState& state, const RLConfig& cfg, CounterRng rng) {
  cfg.validate();
  auto groups = collect_groups(state, cfg, rng.stream(1));

  IterationMetrics metrics;
  {
    double reward_acc = 0.0, rel_acc = 0.0;
    std::size_t n = 0, n_valid = 0, n_invalid = 0;
    for (const auto& g : groups) {
      if (g.degenerate) metrics.degenerate_groups += 1;
      const world::RefEntry* ref_entry = state.refs->reference_for(g.comp_index);
      for (std::size_t i = 0; i < g.trajs.size(); ++i) {
        reward_acc += g.rewards[i];
        n += 1;
        const auto& term = g.trajs[i].terminal;
        if (world::validity_check(term, state.world_params, state.validity).valid) {
          rel_acc += world::energy(term, state.world_params).per_atom -
                     ref_entry->energy_per_atom;
          n_valid += 1;
        } else {
          n_invalid += 1;
        }
      }
    }
    metrics.mean_reward = reward_acc / double(n);
    metrics.mean_rel_energy = n_valid ? rel_acc / double(n_valid) : 0.0;
    metrics.invalid_rate = double(n_invalid) / double(n);
  }

  // flatten for the epoch loop
  struct Item {
    const dyn::Trajectory* traj;
    double adv;
  };
  std::vector<Item> items;
  for (const auto& g : groups)
    for (std::size_t i = 0; i < g.trajs.size(); ++i)
      items.push_back({&g.trajs[i], g.adv[i]});

  auto& params = trainable(state.policy);
  const std::size_t n_params = params.values.size();
  const double norm_scale = 1.0 / (double(items.size()) * double(cfg.n_t));
  const bool want_kl = cfg.kl_weight > 0.0;
  const bool want_distill = cfg.distill_weight > 0.0;

  std::vector<TermStats> stats(items.size());
  for (int epoch = 0; epoch < cfg.ppo_epochs; ++epoch) {
    const bool last = epoch == cfg.ppo_epochs - 1;
    std::fill(stats.begin(), stats.end(), TermStats{});
    auto [J, grad] = par::sum_value_grads(
        std::int64_t(items.size()), n_params, [&](std::int64_t i) {
          const Item& it = items[std::size_t(i)];
          Tape tape(params);
          TermStats* st = last ? &stats[std::size_t(i)] : nullptr;
          TrajTerms terms = build_traj_terms(
              tape, state.policy, &state.ref, *it.traj, it.adv, cfg, true,
              want_kl, want_distill, st);
          Expr obj = terms.policy.valid()
                         ? tape.scale(norm_scale, terms.policy)
                         : tape.constant(0.0);
          if (want_kl && terms.kl.valid())
            obj = tape.sub(obj, tape.scale(cfg.kl_weight * norm_scale, terms.kl));
          if (want_distill && terms.distill.valid())
            obj = tape.sub(obj,
                           tape.scale(cfg.distill_weight * norm_scale, terms.distill));
          std::vector<double> g(n_params, 0.0);
          tape.backward(obj, g);
          return std::pair<double, std::vector<double>>(tape.value_scalar(obj),
                                                        std::move(g));
        });
    // maximize: Adam minimizes, so feed the negated gradient
    for (double& v : grad) v = -v;
    diffnet::adam_step(state.adam, params, grad);
    if (last) metrics.objective = J;
  }

  std::int64_t clipped = 0, ratio_terms = 0, kl_terms = 0;
  double kl_sum = 0.0;
  for (const auto& st : stats) {
    clipped += st.clipped;
    ratio_terms += st.ratio_terms;
    kl_sum += st.kl_sum;
    kl_terms += st.kl_terms;
  }
  metrics.clip_fraction =
      ratio_terms > 0 ? double(clipped) / double(ratio_terms) : 0.0;
  metrics.mean_kl = kl_terms > 0 ? kl_sum / double(kl_terms) : 0.0;
  return metrics;
}

}  // namespace flowrl::grpo
