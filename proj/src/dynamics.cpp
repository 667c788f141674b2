#include "flowrl/dynamics.hpp"

#include <cmath>
#include <stdexcept>

namespace flowrl::dyn {

namespace {
constexpr double kLogTwoPi = 1.8378770664093454836;
constexpr double kCellFloor = 1e-3;  // applied when materializing structures
}

std::string to_string(NoiseKind k) {
  return k == NoiseKind::Constant ? "constant" : "sqrt_ratio";
}

NoiseKind noise_kind_from_string(const std::string& s) {
  if (s == "constant") return NoiseKind::Constant;
  if (s == "sqrt_ratio") return NoiseKind::SqrtRatio;
  throw std::invalid_argument("unknown noise kind: " + s);
}

double noise_sigma(const NoiseSchedule& n, double t, double t_floor) {
  if (n.kind == NoiseKind::Constant) return n.a;
  const double tc = std::max(t, t_floor);
  if (tc >= 1.0) return 0.0;
  return n.a * std::sqrt((1.0 - tc) / tc);
}

SIModel make_model(const features::FeaturizerConfig& feat,
                   const interp::InterpolantSchedule& schedule,
                   const world::BasePrior& base,
                   const std::vector<int>& pos_hidden,
                   const std::vector<int>& lat_hidden, bool with_denoiser,
                   std::uint64_t seed) {
  SIModel m;
  m.feat = feat;
  m.schedule = schedule;
  m.base = base;
  m.with_denoiser = with_denoiser;
  m.pos_spec.input_dim = features::pos_feature_dim(feat);
  m.pos_spec.hidden_dims = pos_hidden;
  m.pos_spec.output_dim = feat.dim * (with_denoiser ? 2 : 1);
  m.lat_spec.input_dim = features::lat_feature_dim(feat);
  m.lat_spec.hidden_dims = lat_hidden;
  m.lat_spec.output_dim = feat.dim;
  CounterRng rng(seed);
  auto pos_params = diffnet::net_init(m.pos_spec, rng.stream(1).next_u64());
  auto lat_params = diffnet::net_init(m.lat_spec, rng.stream(2).next_u64());
  m.params.values = std::move(pos_params.values);
  m.params.values.insert(m.params.values.end(), lat_params.values.begin(),
                         lat_params.values.end());
  return m;
}

void eval_position_net(const SIModel& m, double t, const world::Composition& c,
                       std::span<const double> frac,
                       std::span<const double> cell, std::vector<double>& b,
                       std::vector<double>* zhat) {
  const int d = m.feat.dim;
  const int n = c.n();
  b.assign(std::size_t(n * d), 0.0);
  if (zhat) {
    if (!m.with_denoiser)
      throw std::logic_error("eval_position_net: model has no denoiser head");
    zhat->assign(std::size_t(n * d), 0.0);
  }
  std::vector<double> in(static_cast<std::size_t>(m.pos_spec.input_dim));
  std::vector<double> out(static_cast<std::size_t>(m.pos_spec.output_dim));
  for (int i = 0; i < n; ++i) {
    features::pos_features(m.feat, t, c, frac, cell, i, in);
    diffnet::net_forward(m.pos_spec, m.params.values, m.pos_offset(), in, out);
    for (int a = 0; a < d; ++a) {
      b[std::size_t(i * d + a)] = out[std::size_t(a)];
      if (zhat) (*zhat)[std::size_t(i * d + a)] = out[std::size_t(d + a)];
    }
  }
}

void eval_lattice_net(const SIModel& m, double t, const world::Composition& c,
                      std::span<const double> frac,
                      std::span<const double> cell, std::vector<double>& b) {
  std::vector<double> in(static_cast<std::size_t>(m.lat_spec.input_dim));
  b.assign(std::size_t(m.feat.dim), 0.0);
  features::lat_features(m.feat, t, c, frac, cell, in);
  diffnet::net_forward(m.lat_spec, m.params.values, m.lat_offset(), in, b);
}

std::array<double, 2> AnnealNet::eval(double t) const {
  std::vector<double> in{t};
  if (shared_trunk) {
    std::vector<double> out(2);
    diffnet::net_forward(spec, params.values, 0, in, out);
    return {out[0], out[1]};
  }
  std::vector<double> s_pos(1), s_lat(1);
  diffnet::net_forward(spec, params.values, pos_offset(), in, s_pos);
  diffnet::net_forward(lat_spec, params.values, lat_offset(), in, s_lat);
  return {s_pos[0], s_lat[0]};
}

AnnealNet make_anneal_net(int hidden_dim, int n_hidden_layers, bool shared_trunk,
                          std::uint64_t seed) {
  AnnealNet a;
  a.shared_trunk = shared_trunk;
  a.spec.input_dim = 1;
  a.spec.hidden_dims.assign(std::size_t(n_hidden_layers), hidden_dim);
  a.spec.output_dim = shared_trunk ? 2 : 1;
  a.spec.final_layer_zero_init = true;
  CounterRng rng(seed);
  a.params = diffnet::net_init(a.spec, rng.stream(1).next_u64());
  if (!shared_trunk) {
    a.lat_spec = a.spec;
    auto lat = diffnet::net_init(a.lat_spec, rng.stream(2).next_u64());
    a.params.values.insert(a.params.values.end(), lat.values.begin(),
                           lat.values.end());
  }
  return a;
}

std::string to_string(Mode m) {
  switch (m) {
    case Mode::DeterministicODE: return "deterministic_ode";
    case Mode::ScoreSDE: return "score_sde";
    case Mode::PerturbedODE: return "perturbed_ode";
    case Mode::AnnealedPerturbedODE: return "annealed_perturbed_ode";
  }
  return "?";
}

Mode mode_from_string(const std::string& s) {
  if (s == "deterministic_ode") return Mode::DeterministicODE;
  if (s == "score_sde") return Mode::ScoreSDE;
  if (s == "perturbed_ode") return Mode::PerturbedODE;
  if (s == "annealed_perturbed_ode") return Mode::AnnealedPerturbedODE;
  throw std::invalid_argument("unknown mode: " + s);
}

void Policy::validate() const {
  if (mode == Mode::ScoreSDE) {
    if (!model.with_denoiser)
      throw std::invalid_argument("score_sde mode requires a denoiser head");
    if (!model.schedule.has_gamma())
      throw std::invalid_argument("score_sde mode requires a gamma schedule");
  }
  if (mode == Mode::AnnealedPerturbedODE && !anneal && !handcrafted_s)
    throw std::invalid_argument(
        "annealed mode requires a learned or handcrafted schedule");
}

double transition_logprob(std::span<const double> mean,
                          std::span<const double> var,
                          std::span<const double> action,
                          interp::Geometry geom) {
  if (mean.size() != var.size() || mean.size() != action.size())
    throw std::invalid_argument("transition_logprob: size mismatch");
  double lp = 0.0;
  for (std::size_t i = 0; i < mean.size(); ++i) {
    if (!(var[i] > 0.0))
      throw std::invalid_argument("transition_logprob: non-positive variance");
    double delta = action[i] - mean[i];
    if (geom == interp::Geometry::TorusUnit) delta = interp::min_image(delta);
    lp += -0.5 * (delta * delta / var[i] + std::log(var[i]) + kLogTwoPi);
  }
  return lp;
}

namespace {

// shared tail: draw action = mean + std * xi, wrap if torus, fill logprob
void finish_stochastic(Transition& tr, std::span<const double> xi,
                       interp::Geometry geom, bool want_logprob) {
  const std::size_t n = tr.mean.size();
  if (xi.size() != n)
    throw std::invalid_argument("policy step: xi size mismatch");
  tr.action.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double a = tr.mean[i] + std::sqrt(tr.var[i]) * xi[i];
    if (geom == interp::Geometry::TorusUnit) a = interp::wrap_unit(a);
    tr.action[i] = a;
  }
  tr.stochastic = true;
  if (want_logprob)
    tr.log_prob = transition_logprob(tr.mean, tr.var, tr.action, geom);
}

double anneal_s(const Policy& p, double t, int channel) {
  if (p.anneal) return p.anneal->eval(t)[std::size_t(channel)];
  return (*p.handcrafted_s)[std::size_t(channel)] * t;  // handcrafted (1 + s t)
}

}  // namespace

Transition policy_pos_step(const Policy& p, double t, double dt,
                           const world::Composition& c,
                           std::span<const double> frac,
                           std::span<const double> cell,
                           std::span<const double> xi, bool want_logprob) {
  Transition tr;
  tr.t = t;
  tr.x.assign(frac.begin(), frac.end());
  std::vector<double> b;
  const double t_floor = 0.5 * dt;

  switch (p.mode) {
    case Mode::DeterministicODE: {
      eval_position_net(p.model, t, c, frac, cell, b, nullptr);
      tr.mean.resize(frac.size());
      for (std::size_t i = 0; i < frac.size(); ++i)
        tr.mean[i] = interp::wrap_unit(frac[i] + b[i] * dt);
      tr.action = tr.mean;
      tr.stochastic = false;
      if (want_logprob)
        throw std::invalid_argument("log_prob undefined for deterministic step");
      return tr;
    }
    case Mode::ScoreSDE: {
      const auto sv = interp::schedule_eval(p.model.schedule, t);
      const double gamma = std::max(sv.gamma, kGammaFloor);
      if (!p.model.schedule.has_gamma())
        throw std::invalid_argument("score_sde step requires gamma > 0");
      std::vector<double> zhat;
      eval_position_net(p.model, t, c, frac, cell, b, &zhat);
      const double sigma = noise_sigma(p.noise_pos, t, t_floor);
      if (sigma == 0.0) {
        // degenerate case: drift only, no score correction noise channel
        tr.mean.resize(frac.size());
        for (std::size_t i = 0; i < frac.size(); ++i)
          tr.mean[i] = interp::wrap_unit(frac[i] + b[i] * dt);
        tr.action = tr.mean;
        tr.stochastic = false;
        if (want_logprob)
          throw std::invalid_argument("log_prob undefined at sigma = 0");
        return tr;
      }
      const double corr = sigma * sigma / (2.0 * gamma);
      tr.mean.resize(frac.size());
      tr.var.assign(frac.size(), sigma * sigma * dt);
      for (std::size_t i = 0; i < frac.size(); ++i)
        tr.mean[i] = frac[i] + (b[i] - corr * zhat[i]) * dt;
      finish_stochastic(tr, xi, interp::Geometry::TorusUnit, want_logprob);
      return tr;
    }
    case Mode::PerturbedODE: {
      eval_position_net(p.model, t, c, frac, cell, b, nullptr);
      const double sigma = noise_sigma(p.noise_pos, t, t_floor);
      tr.mean.resize(frac.size());
      for (std::size_t i = 0; i < frac.size(); ++i)
        tr.mean[i] = frac[i] + b[i] * dt;
      if (sigma == 0.0) {
        for (double& m : tr.mean) m = interp::wrap_unit(m);
        tr.action = tr.mean;
        tr.stochastic = false;
        if (want_logprob)
          throw std::invalid_argument("log_prob undefined at sigma = 0");
        return tr;
      }
      tr.var.assign(frac.size(), sigma * sigma * dt);
      finish_stochastic(tr, xi, interp::Geometry::TorusUnit, want_logprob);
      return tr;
    }
    case Mode::AnnealedPerturbedODE: {
      eval_position_net(p.model, t, c, frac, cell, b, nullptr);
      const double s = anneal_s(p, t, 0);
      const double sigma = noise_sigma(p.noise_pos, t, t_floor);
      tr.mean.resize(frac.size());
      for (std::size_t i = 0; i < frac.size(); ++i)
        tr.mean[i] = frac[i] + (1.0 + s) * b[i] * dt;
      if (sigma == 0.0) {  // plain annealed ODE
        for (double& m : tr.mean) m = interp::wrap_unit(m);
        tr.action = tr.mean;
        tr.stochastic = false;
        if (want_logprob)
          throw std::invalid_argument("log_prob undefined at sigma = 0");
        return tr;
      }
      const double var_floor = kVarFloorScale * dt;
      tr.var.resize(frac.size());
      for (std::size_t i = 0; i < frac.size(); ++i)
        tr.var[i] = std::max(sigma * sigma * b[i] * b[i] * dt, var_floor);
      finish_stochastic(tr, xi, interp::Geometry::TorusUnit, want_logprob);
      return tr;
    }
  }
  throw std::logic_error("unreachable");
}

Transition policy_lat_step(const Policy& p, double t, double dt,
                           const world::Composition& c,
                           std::span<const double> frac,
                           std::span<const double> cell,
                           std::span<const double> xi, bool want_logprob) {
  Transition tr;
  tr.t = t;
  tr.x.assign(cell.begin(), cell.end());
  std::vector<double> b;
  eval_lattice_net(p.model, t, c, frac, cell, b);

  const bool stochastic =
      p.mode == Mode::AnnealedPerturbedODE && p.anneal_lattice;
  if (!stochastic) {
    tr.mean.resize(cell.size());
    for (std::size_t i = 0; i < cell.size(); ++i)
      tr.mean[i] = cell[i] + b[i] * dt;
    tr.action = tr.mean;
    tr.stochastic = false;
    if (want_logprob)
      throw std::invalid_argument("log_prob undefined for deterministic step");
    return tr;
  }

  const double s = anneal_s(p, t, 1);
  const double sigma = noise_sigma(p.noise_lat, t, 0.5 * dt);
  tr.mean.resize(cell.size());
  for (std::size_t i = 0; i < cell.size(); ++i)
    tr.mean[i] = cell[i] + (1.0 + s) * b[i] * dt;
  if (sigma == 0.0) {
    tr.action = tr.mean;
    tr.stochastic = false;
    if (want_logprob)
      throw std::invalid_argument("log_prob undefined at sigma = 0");
    return tr;
  }
  const double var_floor = kVarFloorScale * dt;
  tr.var.resize(cell.size());
  for (std::size_t i = 0; i < cell.size(); ++i)
    tr.var[i] = std::max(sigma * sigma * b[i] * b[i] * dt, var_floor);
  finish_stochastic(tr, xi, interp::Geometry::Euclidean, want_logprob);
  return tr;
}

world::ToyStructure sample_x0(const Policy& p, const world::Composition& c,
                              const world::EnergyModelParams& world_params,
                              CounterRng& rng) {
  const double mu = world::cell_log_mean(c, world_params, p.model.base,
                                         p.model.feat.dim);
  return world::sample_base(c, mu, p.model.base.sigma_log, p.model.feat.dim, rng);
}

Trajectory rollout_from(const Policy& p, const world::ToyStructure& x0, int n_t,
                        CounterRng rng, bool record) {
  if (n_t < 1) throw std::invalid_argument("rollout: n_t must be >= 1");
  p.validate();
  const double dt = 1.0 / double(n_t);
  const int d = p.model.feat.dim;
  const int n = x0.comp.n();

  Trajectory traj;
  traj.comp = x0.comp;
  traj.x0 = x0;
  traj.n_steps = n_t;
  traj.dt = dt;

  std::vector<double> frac = x0.frac;
  std::vector<double> cell = x0.cell;
  CounterRng noise = rng.stream(0x0a0c71);

  const bool pos_stochastic =
      p.mode != Mode::DeterministicODE && p.noise_pos.a > 0.0;
  const bool lat_stochastic = p.mode == Mode::AnnealedPerturbedODE &&
                              p.anneal_lattice && p.noise_lat.a > 0.0;

  std::vector<double> xi_pos(static_cast<std::size_t>(n * d)), xi_lat(static_cast<std::size_t>(d));
  for (int k = 0; k < n_t; ++k) {
    const double t = double(k) * dt;
    CounterRng step_rng = noise.stream(std::uint64_t(k));
    if (pos_stochastic) {
      CounterRng r = step_rng.stream(0);
      for (double& v : xi_pos) v = r.normal();
    }
    if (lat_stochastic) {
      CounterRng r = step_rng.stream(1);
      for (double& v : xi_lat) v = r.normal();
    }
    Transition pt = policy_pos_step(
        p, t, dt, traj.comp, frac, cell,
        pos_stochastic ? std::span<const double>(xi_pos) : std::span<const double>(),
        record && pos_stochastic);
    Transition lt = policy_lat_step(
        p, t, dt, traj.comp, frac, cell,
        lat_stochastic ? std::span<const double>(xi_lat) : std::span<const double>(),
        record && lat_stochastic);
    frac = pt.action;
    cell = lt.action;
    if (record) {
      traj.pos.push_back(std::move(pt));
      traj.lat.push_back(std::move(lt));
    }
  }

  traj.terminal.comp = traj.comp;
  traj.terminal.frac = std::move(frac);
  interp::wrap_unit(std::span<double>(traj.terminal.frac));
  traj.terminal.cell = std::move(cell);
  for (double& v : traj.terminal.cell) v = std::max(v, kCellFloor);
  return traj;
}

Trajectory rollout(const Policy& p, const world::Composition& c,
                   const world::EnergyModelParams& world_params, int n_t,
                   CounterRng rng, bool record) {
  CounterRng init = rng.stream(0xba5e);
  world::ToyStructure x0 = sample_x0(p, c, world_params, init);
  return rollout_from(p, x0, n_t, rng, record);
}

std::vector<double> integrate_euler(
    const std::function<void(double, std::span<const double>, std::span<double>)>& drift,
    std::vector<double> x0, int n_t, interp::Geometry geom) {
  const double dt = 1.0 / double(n_t);
  std::vector<double> x = std::move(x0);
  std::vector<double> dx(x.size());
  for (int k = 0; k < n_t; ++k) {
    drift(double(k) * dt, x, dx);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] += dx[i] * dt;
      if (geom == interp::Geometry::TorusUnit) x[i] = interp::wrap_unit(x[i]);
    }
  }
  return x;
}

}  // namespace flowrl::dyn
