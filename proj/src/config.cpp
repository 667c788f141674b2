#include "flowrl/config.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "flowrl/checkpoint.hpp"

namespace flowrl::harness {

std::string to_string(RLVariant v) {
  switch (v) {
    case RLVariant::Score: return "score";
    case RLVariant::Velocity: return "velocity";
    case RLVariant::Anneal: return "anneal";
  }
  return "?";
}

RLVariant rl_variant_from_string(const std::string& s) {
  if (s == "score") return RLVariant::Score;
  if (s == "velocity") return RLVariant::Velocity;
  if (s == "anneal") return RLVariant::Anneal;
  throw std::invalid_argument("unknown rl variant: " + s);
}

namespace {

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  return j.at(key).get<T>();
}

dyn::NoiseSchedule noise_from(const json& j, dyn::NoiseSchedule fallback) {
  if (j.is_null()) return fallback;
  dyn::NoiseSchedule n;
  n.kind = dyn::noise_kind_from_string(j.value("kind", "constant"));
  n.a = j.value("a", 0.0);
  if (n.a < 0.0) throw std::invalid_argument("noise scale must be >= 0");
  return n;
}

interp::InterpolantSchedule schedule_from(const json& j) {
  interp::InterpolantSchedule s;
  s.kind = interp::schedule_kind_from_string(j.value("schedule", "linear"));
  s.a_gamma = j.value("a_gamma", 0.25);
  return s;
}

std::optional<std::array<double, 2>> handcrafted_from(const json& j) {
  if (!j.contains("handcrafted_s") || j.at("handcrafted_s").is_null())
    return std::nullopt;
  auto v = j.at("handcrafted_s").get<std::vector<double>>();
  if (v.size() != 2)
    throw std::invalid_argument("handcrafted_s must have two entries");
  return std::array<double, 2>{v[0], v[1]};
}

}  // namespace

void apply_override(json& tree, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("override must look like key.path=value: " +
                                assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  json* node = &tree;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (key.empty()) throw std::invalid_argument("bad override path: " + path);
    if (dot == std::string::npos) {
      json parsed = json::parse(value, nullptr, false);
      (*node)[key] = parsed.is_discarded() ? json(value) : parsed;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig cfg;
  cfg.raw = j;
  cfg.config_hash = io::hash_hex(j);
  cfg.out_dir = j.value("out_dir", std::string("out"));
  cfg.master_seed = j.value("master_seed", std::uint64_t(1));

  if (j.contains("world")) {
    const json& w = j.at("world");
    if (w.contains("sigma"))
      cfg.world.params.sigma = w.at("sigma").get<std::vector<double>>();
    cfg.world.params.eps_well = w.value("eps_well", 1.0);
    cfg.world.params.pressure = w.value("pressure", 0.02);
    cfg.world.dim = w.value("dim", 2);
    cfg.world.n_max = w.value("n_max", 8);
    for (double s : cfg.world.params.sigma)
      if (s <= 0.0) throw std::invalid_argument("species radii must be > 0");
    if (cfg.world.params.eps_well <= 0.0)
      throw std::invalid_argument("eps_well must be > 0");
    if (cfg.world.params.pressure < 0.0)
      throw std::invalid_argument("pressure must be >= 0");
  }

  {
    const json d = j.value("dataset", json::object());
    cfg.dataset.path = d.value("path", std::string("dataset.jsonl"));
    cfg.dataset.n_min_atoms = d.value("n_min_atoms", 2);
    cfg.dataset.n_max_atoms = d.value("n_max_atoms", 6);
    cfg.dataset.gen.n_inits = d.value("n_inits", 8);
    cfg.dataset.gen.max_polymorphs = d.value("max_polymorphs", 4);
    cfg.dataset.gen.relax.steps = d.value("relax_steps", 300);
    cfg.dataset.gen.relax.step_size = d.value("relax_step_size", 0.05);
    cfg.dataset.gen.distinct_rmsd = d.value("distinct_rmsd", 0.25);
    if (d.contains("split_fracs")) {
      auto f = d.at("split_fracs").get<std::vector<double>>();
      if (f.size() != 3) throw std::invalid_argument("split_fracs needs 3 entries");
      cfg.dataset.gen.split_fracs = {f[0], f[1], f[2]};
    }
    const double frac_sum = cfg.dataset.gen.split_fracs[0] +
                            cfg.dataset.gen.split_fracs[1] +
                            cfg.dataset.gen.split_fracs[2];
    if (std::abs(frac_sum - 1.0) > 1e-9)
      throw std::invalid_argument("split_fracs must sum to 1");
    cfg.dataset.gen.polymorph_split = d.value("polymorph_split", true);
    cfg.dataset.gen.prior.pack_area = d.value("pack_area", 1.0);
    cfg.dataset.gen.prior.sigma_log = d.value("sigma_log", 0.15);
    cfg.dataset.gen.dim = cfg.world.dim;
    if (cfg.dataset.n_max_atoms > cfg.world.n_max)
      throw std::invalid_argument("dataset compositions exceed n_max");
    if (cfg.dataset.n_min_atoms < 1 ||
        cfg.dataset.n_min_atoms > cfg.dataset.n_max_atoms)
      throw std::invalid_argument("bad dataset size range");
  }

  {
    const json p = j.value("pretrain", json::object());
    auto& pc = cfg.pretrain.cfg;
    pc.feat.n_species = cfg.world.params.n_species();
    pc.feat.dim = cfg.world.dim;
    pc.feat.n_max = cfg.world.n_max;
    pc.schedule = schedule_from(p);
    pc.base = cfg.dataset.gen.prior;
    pc.with_denoiser = p.value("with_denoiser", false);
    pc.pos_hidden = get_or(p, "pos_hidden", std::vector<int>{64, 64});
    pc.lat_hidden = get_or(p, "lat_hidden", std::vector<int>{32, 32});
    pc.batch_size = p.value("batch_size", 64);
    pc.steps = p.value("steps", 2000);
    pc.lr = p.value("lr", 1e-3);
    pc.t_min = p.value("t_min", 1e-3);
    pc.loss_weight_pos = p.value("loss_weight_pos", 0.5);
    pc.loss_weight_lat = p.value("loss_weight_lat", 0.5);
    pc.val_every = p.value("val_every", 200);
    pc.val_n_t = p.value("val_n_t", 50);
    pc.val_max_comps = p.value("val_max_comps", 32);
    pc.seed = cfg.master_seed;
    if (pc.batch_size < 1 || pc.steps < 1)
      throw std::invalid_argument("pretrain batch and steps must be >= 1");
    cfg.pretrain.checkpoint = p.value("checkpoint", std::string());
  }

  {
    const json r = j.value("rl", json::object());
    auto& rs = cfg.rl;
    rs.variant = rl_variant_from_string(r.value("variant", "velocity"));
    rs.cfg.group_size = r.value("group_size", 8);
    rs.cfg.groups_per_iter = r.value("groups_per_iter", 8);
    rs.cfg.ppo_epochs = r.value("ppo_epochs", 2);
    rs.cfg.clip_eps = r.value("clip_eps", 0.2);
    rs.cfg.policy_weight = r.value("policy_weight", 1.0);
    rs.cfg.kl_weight = r.value("kl_weight", 1e-3);
    rs.cfg.distill_weight = r.value("distill_weight", 0.0);
    rs.cfg.lat_policy_weight = r.value("lat_policy_weight", 1.0);
    rs.cfg.normalization = grpo::norm_strategy_from_string(
        r.value("normalization", "advantage_per_atom"));
    rs.cfg.lr = r.value("lr", 3e-4);
    rs.cfg.reward = grpo::reward_kind_from_string(r.value("reward", "energy"));
    rs.cfg.shared_x0 = r.value("shared_x0", false);
    rs.cfg.n_t = r.value("n_t", 50);
    rs.cfg.iterations = r.value("iterations", 200);
    rs.cfg.validate();
    rs.reward_spec.penalty_per_atom = r.value("penalty_per_atom", 3.0);
    rs.reward_spec.band_std = r.value("band_std", 3.0);
    rs.reward_spec.crmse_offset = r.value("crmse_offset", 0.5);
    rs.reward_spec.stol = r.value("stol", 0.5);
    if (r.contains("seeds")) {
      rs.seeds.clear();
      for (const auto& s : r.at("seeds")) rs.seeds.push_back(s.get<std::uint64_t>());
    }
    rs.val_every = r.value("val_every", 10);
    rs.val_max_comps = r.value("val_max_comps", 32);
    rs.rollout_noise = noise_from(r.value("rollout_noise", json()),
                                  {dyn::NoiseKind::SqrtRatio, 0.02});
    rs.ref_noise = noise_from(r.value("ref_noise", json()), rs.rollout_noise);
    rs.lat_noise = noise_from(r.value("lat_noise", json()),
                              {dyn::NoiseKind::Constant, 0.0});
    rs.lat_ref_noise = noise_from(r.value("lat_ref_noise", json()), rs.lat_noise);
    rs.anneal_hidden = r.value("anneal_hidden", 64);
    rs.anneal_layers = r.value("anneal_layers", 2);
    rs.anneal_shared_trunk = r.value("anneal_shared_trunk", true);
    rs.anneal_lattice = r.value("anneal_lattice", true);
  }

  {
    const json e = j.value("eval", json::object());
    cfg.eval.checkpoint = e.value("checkpoint", std::string());
    cfg.eval.split = world::split_from_string(e.value("split", "test"));
    cfg.eval.n_t = e.value("n_t", 50);
    cfg.eval.mode = dyn::mode_from_string(e.value("mode", "deterministic_ode"));
    cfg.eval.noise = noise_from(e.value("noise", json()),
                                {dyn::NoiseKind::Constant, 0.0});
    cfg.eval.lat_noise = noise_from(e.value("lat_noise", json()),
                                    {dyn::NoiseKind::Constant, 0.0});
    cfg.eval.handcrafted_s = handcrafted_from(e);
    cfg.eval.tol.stol = e.value("stol", 0.5);
    cfg.eval.tol.ltol = e.value("ltol", 0.3);
    cfg.eval.tol.n_max = cfg.world.n_max;
    cfg.eval.max_comps = e.value("max_comps", 0);
  }

  {
    const json n = j.value("noise_sweep", json::object());
    auto& ns = cfg.noise_sweep;
    ns.checkpoint = n.value("checkpoint", std::string());
    if (n.contains("schedules")) {
      ns.schedules.clear();
      for (const auto& s : n.at("schedules"))
        ns.schedules.push_back(dyn::noise_kind_from_string(s.get<std::string>()));
    }
    if (n.contains("scales"))
      ns.scales = n.at("scales").get<std::vector<double>>();
    ns.n_t = n.value("n_t", 50);
    ns.split = world::split_from_string(n.value("split", "val"));
    if (n.contains("bands")) {
      auto b = n.at("bands").get<std::vector<double>>();
      if (b.size() != 3) throw std::invalid_argument("bands needs 3 entries");
      ns.bands = {b[0], b[1], b[2]};
    }
    ns.include_score_sde = n.value("include_score_sde", true);
    ns.max_comps = n.value("max_comps", 0);
  }

  {
    const json s = j.value("step_sweep", json::object());
    auto& ss = cfg.step_sweep;
    ss.checkpoint = s.value("checkpoint", std::string());
    if (s.contains("n_t_list"))
      ss.n_t_list = s.at("n_t_list").get<std::vector<int>>();
    for (int n_t : ss.n_t_list)
      if (n_t < 1) throw std::invalid_argument("step sweep n_t must be >= 1");
    ss.split = world::split_from_string(s.value("split", "test"));
    ss.mode = dyn::mode_from_string(s.value("mode", "deterministic_ode"));
    ss.handcrafted_s = handcrafted_from(s);
    ss.max_comps = s.value("max_comps", 0);
  }

  {
    const json s = j.value("search", json::object());
    cfg.search.budget = s.value("budget", 16);
    cfg.search.iterations_per_trial = s.value("iterations_per_trial", 30);
    if (cfg.search.budget < 1) throw std::invalid_argument("budget must be >= 1");
    if (s.contains("space")) {
      for (const auto& [key, spec] : s.at("space").items()) {
        SearchDistribution d;
        const std::string kind = spec.value("kind", "uniform");
        if (kind == "choice") {
          d.kind = SearchDistribution::Kind::Choice;
          for (const auto& c : spec.at("choices")) d.choices.push_back(c);
          if (d.choices.empty())
            throw std::invalid_argument("choice space is empty: " + key);
        } else {
          d.kind = kind == "log_uniform" ? SearchDistribution::Kind::LogUniform
                                         : SearchDistribution::Kind::Uniform;
          d.lo = spec.at("lo").get<double>();
          d.hi = spec.at("hi").get<double>();
          if (!(d.lo < d.hi))
            throw std::invalid_argument("search space needs lo < hi: " + key);
        }
        cfg.search.space[key] = std::move(d);
      }
    }
  }

  {
    const json a = j.value("anneal_baseline", json::object());
    auto& ab = cfg.anneal_baseline;
    ab.checkpoint = a.value("checkpoint", std::string());
    ab.n_t = a.value("n_t", 10);
    ab.budget = a.value("budget", 50);
    if (a.contains("range")) {
      auto r = a.at("range").get<std::vector<double>>();
      if (r.size() != 2 || !(r[0] < r[1]))
        throw std::invalid_argument("anneal_baseline range needs [lo, hi]");
      ab.range = {r[0], r[1]};
    }
    ab.split = world::split_from_string(a.value("split", "val"));
    ab.noise = noise_from(a.value("noise", json()),
                          {dyn::NoiseKind::Constant, 0.0});
    ab.max_comps = a.value("max_comps", 0);
  }

  return cfg;
}

ExperimentConfig load_config_file(const std::string& path,
                                  const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw std::runtime_error("config parse error: " + std::string(e.what()));
  }
  for (const auto& o : overrides) apply_override(j, o);
  return parse_config(j);
}

double max_step_std(const dyn::NoiseSchedule& n, int n_t) {
  const double dt = 1.0 / double(n_t);
  double worst = 0.0;
  for (int k = 0; k < n_t; ++k) {
    const double sigma = dyn::noise_sigma(n, double(k) * dt, 0.5 * dt);
    worst = std::max(worst, sigma * std::sqrt(dt));
  }
  return worst;
}

void validate_for_run(const ExperimentConfig& cfg) {
  constexpr double kTorusStdBound = 0.05;
  const auto check_bound = [&](const dyn::NoiseSchedule& n, int n_t,
                               const char* what) {
    const double worst = max_step_std(n, n_t);
    if (worst > kTorusStdBound)
      throw std::invalid_argument(
          std::string(what) +
          ": per-step position noise sigma*sqrt(dt) exceeds 0.05 (got " +
          std::to_string(worst) + ")");
  };
  check_bound(cfg.rl.rollout_noise, cfg.rl.cfg.n_t, "rl.rollout_noise");
  check_bound(cfg.rl.ref_noise, cfg.rl.cfg.n_t, "rl.ref_noise");
  if (cfg.eval.mode != dyn::Mode::DeterministicODE)
    check_bound(cfg.eval.noise, cfg.eval.n_t, "eval.noise");
  if (cfg.rl.variant == RLVariant::Score &&
      cfg.pretrain.cfg.schedule.kind != interp::ScheduleKind::TrigGamma)
    throw std::invalid_argument(
        "score variant requires the trig_gamma schedule");
}

}  // namespace flowrl::harness
