#include "flowrl/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "flowrl/parallel.hpp"
#include "flowrl/version.hpp"

namespace flowrl::harness {

namespace fs = std::filesystem;

json report_meta(const ExperimentConfig& cfg) {
  return json{{"artifact_version", kArtifactVersion},
              {"config_hash", cfg.config_hash},
              {"format_version", kFormatVersion}};
}

namespace {

json eval_report_json(const evalm::EvalReport& r) {
  json j{{"match_rate", r.match_rate}, {"metre", r.metre},
         {"crmse", r.crmse},           {"mean_rel_energy", r.mean_rel_energy},
         {"invalid_rate", r.invalid_rate}, {"n_t", r.n_t},
         {"sample_count", r.sample_count}};
  if (r.rmse) j["rmse"] = *r.rmse;  // omitted when nothing matched
  return j;
}

class JsonlWriter {
 public:
  JsonlWriter(const std::string& path, const json& header) : out_(path) {
    if (!out_) throw std::runtime_error("cannot open " + path + " for writing");
    out_ << header.dump() << "\n";
  }
  void write(const json& row) { out_ << row.dump() << "\n"; }

 private:
  std::ofstream out_;
};

void write_csv(const std::string& path, const ExperimentConfig& cfg,
               const std::vector<std::string>& header,
               const std::vector<std::vector<json>>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << "# artifact_version=" << kArtifactVersion
      << " config_hash=" << cfg.config_hash << "\n";
  for (std::size_t i = 0; i < header.size(); ++i)
    out << header[i] << (i + 1 < header.size() ? "," : "\n");
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (row[i].is_string())
        out << row[i].get<std::string>();
      else
        out << row[i].dump();
      out << (i + 1 < row.size() ? "," : "\n");
    }
  }
}

world::ReferenceSet load_dataset(const ExperimentConfig& cfg) {
  return world::load_reference_set(cfg.dataset.path);
}

void ensure_out_dir(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir);
}

std::string out_path(const ExperimentConfig& cfg, const std::string& name) {
  return (fs::path(cfg.out_dir) / name).string();
}

}  // namespace

std::vector<evalm::GeneratedSample> generate_split_samples(
    const dyn::Policy& policy, const world::ReferenceSet& refs,
    const world::EnergyModelParams& wp, world::Split split, int n_t,
    std::uint64_t seed, int max_comps) {
  std::vector<int> comps = refs.comp_indices(split);
  if (max_comps > 0 && int(comps.size()) > max_comps)
    comps.resize(std::size_t(max_comps));
  std::vector<evalm::GeneratedSample> gen(comps.size());
  CounterRng master(seed);
  par::parallel_for(std::int64_t(comps.size()), [&](std::int64_t i) {
    const int ci = comps[std::size_t(i)];
    auto traj = dyn::rollout(policy, refs.composition(ci), wp, n_t,
                             master.stream(std::uint64_t(ci)), false);
    gen[std::size_t(i)] = {ci, std::move(traj.terminal)};
  });
  return gen;
}

dyn::Policy policy_from_checkpoint(const io::Checkpoint& ckpt, dyn::Mode mode,
                                   const dyn::NoiseSchedule& noise_pos,
                                   const dyn::NoiseSchedule& noise_lat,
                                   std::optional<std::array<double, 2>> handcrafted,
                                   bool anneal_lattice) {
  dyn::Policy p;
  p.model = ckpt.model;
  p.mode = mode;
  p.noise_pos = noise_pos;
  p.noise_lat = noise_lat;
  p.anneal_lattice = anneal_lattice;
  if (mode == dyn::Mode::AnnealedPerturbedODE) {
    if (handcrafted)
      p.handcrafted_s = handcrafted;
    else if (ckpt.anneal)
      p.anneal = ckpt.anneal;
    else
      p.handcrafted_s = std::array<double, 2>{0.0, 0.0};
  }
  p.validate();
  return p;
}

evalm::EvalReport evaluate_policy(const dyn::Policy& policy,
                                  const world::ReferenceSet& refs,
                                  const world::EnergyModelParams& wp,
                                  world::Split split,
                                  const evalm::MatcherTolerances& tol, int n_t,
                                  std::uint64_t seed, int max_comps) {
  auto gen = generate_split_samples(policy, refs, wp, split, n_t, seed, max_comps);
  const auto vt = world::ValidityThresholds::defaults(wp);
  return evalm::evaluate_samples(gen, refs, split, tol, wp, vt, n_t);
}

NoiseSweepResult noise_sweep(const ExperimentConfig& cfg,
                             const world::ReferenceSet& refs,
                             const io::Checkpoint& ckpt) {
  const auto& ns = cfg.noise_sweep;
  const auto vt = world::ValidityThresholds::defaults(cfg.world.params);
  const std::uint64_t seed = CounterRng(cfg.master_seed).stream(0x5eed).next_u64();

  auto eval_one = [&](const dyn::Policy& p) {
    auto gen = generate_split_samples(p, refs, cfg.world.params, ns.split,
                                      ns.n_t, seed, ns.max_comps);
    NoiseSweepRow row;
    row.report = evalm::evaluate_samples(gen, refs, ns.split, cfg.eval.tol,
                                         cfg.world.params, vt, ns.n_t);
    double epa_acc = 0.0;
    int n_valid = 0;
    for (const auto& g : gen) {
      if (!world::validity_check(g.structure, cfg.world.params, vt).valid) continue;
      epa_acc += world::energy(g.structure, cfg.world.params).per_atom;
      ++n_valid;
    }
    row.mean_epa = n_valid ? epa_acc / double(n_valid) : 0.0;
    return row;
  };

  NoiseSweepResult result;
  {
    dyn::Policy det = policy_from_checkpoint(ckpt, dyn::Mode::DeterministicODE,
                                             {}, {}, std::nullopt, false);
    result.baseline = eval_one(det);
    result.baseline.mode = to_string(dyn::Mode::DeterministicODE);
    result.baseline.schedule = "none";
    result.baseline.scale = 0.0;
  }

  std::vector<dyn::Mode> modes{dyn::Mode::PerturbedODE};
  if (ns.include_score_sde && ckpt.model.with_denoiser &&
      ckpt.model.schedule.has_gamma())
    modes.push_back(dyn::Mode::ScoreSDE);

  for (dyn::Mode mode : modes) {
    for (dyn::NoiseKind kind : ns.schedules) {
      for (double a : ns.scales) {
        if (max_step_std({kind, a}, ns.n_t) > 0.05) continue;  // torus bound
        dyn::Policy p = policy_from_checkpoint(ckpt, mode, {kind, a}, {},
                                               std::nullopt, false);
        NoiseSweepRow row = eval_one(p);
        row.mode = to_string(mode);
        row.schedule = to_string(kind);
        row.scale = a;
        result.rows.push_back(std::move(row));
      }
      NoiseDesignation des;
      des.mode = to_string(mode);
      des.schedule = to_string(kind);
      const double e_det = result.baseline.mean_epa;
      const double denom = std::abs(e_det);
      std::optional<double>* slots[3] = {&des.a_s, &des.a_m, &des.a_l};
      for (int bi = 0; bi < 3; ++bi) {
        for (const auto& row : result.rows) {
          if (row.mode != des.mode || row.schedule != des.schedule) continue;
          const double worsening = row.mean_epa - e_det;  // higher is worse
          if (worsening <= ns.bands[std::size_t(bi)] * denom) {
            if (!slots[bi]->has_value() || row.scale > **slots[bi])
              *slots[bi] = row.scale;
          }
        }
      }
      result.designations.push_back(std::move(des));
    }
  }
  return result;
}

RLValidation rl_validation(const dyn::Policy& policy,
                           const world::ReferenceSet& refs,
                           const world::EnergyModelParams& wp,
                           const RLSection& rl, std::uint64_t seed) {
  auto gen = generate_split_samples(policy, refs, wp, world::Split::Val,
                                    rl.cfg.n_t, seed, rl.val_max_comps);
  const auto vt = world::ValidityThresholds::defaults(wp);
  RLValidation v;
  double reward_acc = 0.0, rel_acc = 0.0;
  int n_valid = 0;
  evalm::MatcherTolerances tol{rl.reward_spec.stol, 0.3, 0};
  tol.n_max = policy.model.feat.n_max;
  for (const auto& g : gen) {
    const bool valid = world::validity_check(g.structure, wp, vt).valid;
    const auto* ref = refs.reference_for(g.comp_index);
    if (valid) {
      const double epa = world::energy(g.structure, wp).per_atom;
      rel_acc += epa - ref->energy_per_atom;
      ++n_valid;
    }
    if (rl.cfg.reward == grpo::RewardKind::Energy) {
      reward_acc += valid ? -world::energy(g.structure, wp).per_atom
                          : -rl.reward_spec.penalty_per_atom;
    } else {
      double best = std::numeric_limits<double>::infinity();
      for (const auto* poly : refs.polymorphs_for(g.comp_index)) {
        auto m = evalm::periodic_rmsd(g.structure, poly->structure, tol);
        if (m.matched) best = std::min(best, m.rmsd);
      }
      const double crmse = std::isfinite(best) ? best : rl.reward_spec.stol;
      reward_acc += rl.reward_spec.crmse_offset - crmse;
    }
  }
  v.mean_reward = gen.empty() ? 0.0 : reward_acc / double(gen.size());
  v.mean_rel_energy = n_valid ? rel_acc / double(n_valid) : 0.0;
  v.invalid_rate = gen.empty() ? 0.0 : 1.0 - double(n_valid) / double(gen.size());
  auto [mr, rmse] = evalm::match_rate(gen, refs, world::Split::Val, tol);
  (void)rmse;
  v.match_rate = mr;
  return v;
}

namespace {

grpo::RLState make_rl_state(const ExperimentConfig& cfg,
                            const world::ReferenceSet& refs,
                            const io::Checkpoint& start, std::uint64_t seed) {
  const auto& rl = cfg.rl;
  grpo::RLState state;
  state.refs = &refs;
  state.world_params = cfg.world.params;
  state.validity = world::ValidityThresholds::defaults(cfg.world.params);
  state.match_tol = cfg.eval.tol;
  state.reward_spec = rl.reward_spec;

  switch (rl.variant) {
    case RLVariant::Score:
      state.policy = policy_from_checkpoint(start, dyn::Mode::ScoreSDE,
                                            rl.rollout_noise, {}, std::nullopt,
                                            false);
      state.ref = policy_from_checkpoint(start, dyn::Mode::ScoreSDE, rl.ref_noise,
                                         {}, std::nullopt, false);
      break;
    case RLVariant::Velocity:
      state.policy = policy_from_checkpoint(start, dyn::Mode::PerturbedODE,
                                            rl.rollout_noise, {}, std::nullopt,
                                            false);
      state.ref = policy_from_checkpoint(start, dyn::Mode::PerturbedODE,
                                         rl.ref_noise, {}, std::nullopt, false);
      break;
    case RLVariant::Anneal: {
      state.policy = policy_from_checkpoint(
          start, dyn::Mode::AnnealedPerturbedODE, rl.rollout_noise, rl.lat_noise,
          std::nullopt, rl.anneal_lattice);
      state.policy.anneal =
          dyn::make_anneal_net(rl.anneal_hidden, rl.anneal_layers,
                               rl.anneal_shared_trunk, seed ^ 0xa55);
      state.policy.handcrafted_s.reset();
      state.ref = policy_from_checkpoint(start, dyn::Mode::AnnealedPerturbedODE,
                                         rl.ref_noise, rl.lat_ref_noise,
                                         std::array<double, 2>{0.0, 0.0},
                                         rl.anneal_lattice);
      break;
    }
  }
  state.adam = diffnet::AdamState::init(
      int(grpo::trainable(state.policy).values.size()), rl.cfg.lr);
  return state;
}

}  // namespace

SeedRunResult reinforce_seed_run(const ExperimentConfig& cfg,
                                 const world::ReferenceSet& refs,
                                 const io::Checkpoint& start,
                                 std::uint64_t seed) {
  const auto& rl = cfg.rl;
  grpo::RLState state = make_rl_state(cfg, refs, start, seed);
  CounterRng master(cfg.master_seed ^ (seed * 0x9e3779b97f4a7c15ull));

  SeedRunResult out;
  out.seed = seed;
  const std::uint64_t val_seed = master.stream(0x7a1).next_u64();

  out.baseline = rl_validation(state.policy, refs, cfg.world.params, rl, val_seed);
  out.best = out.baseline;
  out.best_iteration = 0;
  out.best_policy = state.policy;
  out.log_rows.push_back(json{{"seed", seed},
                              {"iteration", 0},
                              {"val_mean_reward", out.baseline.mean_reward},
                              {"val_mean_rel_energy", out.baseline.mean_rel_energy},
                              {"val_invalid_rate", out.baseline.invalid_rate},
                              {"val_match_rate", out.baseline.match_rate}});

  for (int it = 1; it <= rl.cfg.iterations; ++it) {
    auto metrics =
        grpo::rl_iteration(state, rl.cfg, master.stream(0x17e7, std::uint64_t(it)));
    json row{{"seed", seed},
             {"iteration", it},
             {"mean_reward", metrics.mean_reward},
             {"mean_rel_energy", metrics.mean_rel_energy},
             {"invalid_rate", metrics.invalid_rate},
             {"mean_kl", metrics.mean_kl},
             {"clip_fraction", metrics.clip_fraction},
             {"objective", metrics.objective},
             {"degenerate_groups", metrics.degenerate_groups}};
    if (it % rl.val_every == 0 || it == rl.cfg.iterations) {
      RLValidation v =
          rl_validation(state.policy, refs, cfg.world.params, rl, val_seed);
      row["val_mean_reward"] = v.mean_reward;
      row["val_mean_rel_energy"] = v.mean_rel_energy;
      row["val_invalid_rate"] = v.invalid_rate;
      row["val_match_rate"] = v.match_rate;
      if (v.mean_reward > out.best.mean_reward) {
        out.best = v;
        out.best_iteration = it;
        out.best_policy = state.policy;
      }
    }
    out.log_rows.push_back(std::move(row));
  }
  return out;
}

AnnealBaselineResult anneal_baseline_sweep(const ExperimentConfig& cfg,
                                           const world::ReferenceSet& refs,
                                           const io::Checkpoint& ckpt) {
  const auto& ab = cfg.anneal_baseline;
  const auto vt = world::ValidityThresholds::defaults(cfg.world.params);
  const std::uint64_t seed = CounterRng(cfg.master_seed).stream(0xab).next_u64();

  std::vector<std::array<double, 2>> points;
  points.push_back({0.0, 0.0});  // forced control point
  CounterRng rng = CounterRng(cfg.master_seed).stream(0xab5eed);
  for (int i = 0; i < ab.budget; ++i)
    points.push_back({rng.uniform(ab.range[0], ab.range[1]),
                      rng.uniform(ab.range[0], ab.range[1])});

  AnnealBaselineResult result;
  result.rows.resize(points.size());
  par::parallel_for(std::int64_t(points.size()), [&](std::int64_t i) {
    const auto s = points[std::size_t(i)];
    dyn::Policy p = policy_from_checkpoint(ckpt, dyn::Mode::AnnealedPerturbedODE,
                                           ab.noise, ab.noise, s, true);
    auto gen = generate_split_samples(p, refs, cfg.world.params, ab.split,
                                      ab.n_t, seed, ab.max_comps);
    auto [metre, crmse] =
        evalm::metre_crmse(gen, refs, ab.split, cfg.eval.tol);
    result.rows[std::size_t(i)] = {s[0], s[1], metre, crmse};
  });

  result.best_index = 0;
  for (std::size_t i = 1; i < result.rows.size(); ++i)
    if (result.rows[i].crmse < result.rows[std::size_t(result.best_index)].crmse)
      result.best_index = int(i);
  return result;
}

SearchResult random_search(const ExperimentConfig& cfg,
                           const world::ReferenceSet& refs,
                           const io::Checkpoint& start) {
  if (cfg.search.space.empty())
    throw std::invalid_argument("random search: empty space");
  SearchResult result;
  CounterRng rng = CounterRng(cfg.master_seed).stream(0x5ea4c4);

  for (int trial = 0; trial < cfg.search.budget; ++trial) {
    CounterRng trial_rng = rng.stream(std::uint64_t(trial));
    json draws = json::object();
    // space is an ordered map, so the draw sequence is deterministic
    for (const auto& [key, dist] : cfg.search.space) {
      switch (dist.kind) {
        case SearchDistribution::Kind::Choice:
          draws[key] = dist.choices[std::size_t(
              trial_rng.uniform_int(std::int64_t(dist.choices.size())))];
          break;
        case SearchDistribution::Kind::Uniform:
          draws[key] = trial_rng.uniform(dist.lo, dist.hi);
          break;
        case SearchDistribution::Kind::LogUniform:
          draws[key] = std::exp(
              trial_rng.uniform(std::log(dist.lo), std::log(dist.hi)));
          break;
      }
    }

    TrialResult tr;
    tr.index = trial;
    tr.draws = draws;
    try {
      json trial_json = cfg.raw;
      for (const auto& [key, value] : draws.items()) trial_json["rl"][key] = value;
      trial_json["rl"]["iterations"] = cfg.search.iterations_per_trial;
      ExperimentConfig trial_cfg = parse_config(trial_json);
      validate_for_run(trial_cfg);
      auto run = reinforce_seed_run(trial_cfg, refs, start,
                                    trial_cfg.rl.seeds.empty()
                                        ? 1
                                        : trial_cfg.rl.seeds.front());
      tr.score = run.best.mean_reward;
    } catch (const std::exception& e) {
      tr.failed = true;
      tr.error = e.what();
      tr.score = -std::numeric_limits<double>::infinity();
    }
    result.trials.push_back(std::move(tr));
  }

  result.best_index = 0;
  for (std::size_t i = 1; i < result.trials.size(); ++i)
    if (result.trials[i].score > result.trials[std::size_t(result.best_index)].score)
      result.best_index = int(i);
  return result;
}

int run_gen_dataset(const ExperimentConfig& cfg) {
  ensure_out_dir(cfg);
  auto comps = world::all_compositions(cfg.world.params.n_species(),
                                       cfg.dataset.n_min_atoms,
                                       cfg.dataset.n_max_atoms);
  auto rs = world::generate_dataset(comps, cfg.world.params, cfg.dataset.gen,
                                    cfg.master_seed);
  fs::path p(cfg.dataset.path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  world::save_reference_set(rs, cfg.dataset.path, cfg.config_hash);
  json summary = report_meta(cfg);
  summary["kind"] = "dataset_summary";
  summary["n_compositions"] = comps.size();
  summary["n_entries"] = rs.entries.size();
  int train = 0, val = 0, test = 0;
  for (const auto& e : rs.entries) {
    if (e.split == world::Split::Train) ++train;
    if (e.split == world::Split::Val) ++val;
    if (e.split == world::Split::Test) ++test;
  }
  summary["n_train"] = train;
  summary["n_val"] = val;
  summary["n_test"] = test;
  io::write_json_file(summary, out_path(cfg, "dataset_summary.json"));
  return 0;
}

int run_pretrain(const ExperimentConfig& cfg) {
  ensure_out_dir(cfg);
  auto refs = load_dataset(cfg);
  auto result = pretrain::pretrain_loop(cfg.pretrain.cfg, cfg.world.params, refs);

  json header = report_meta(cfg);
  header["kind"] = "pretrain_log";
  JsonlWriter log(out_path(cfg, "pretrain_log.jsonl"), header);
  for (const auto& row : result.log) log.write(row);

  io::Checkpoint best{result.best_model, std::nullopt, std::nullopt,
                      cfg.config_hash};
  io::save_checkpoint(best, out_path(cfg, "checkpoint_best.json"));
  io::Checkpoint final{result.final_model, std::nullopt, std::nullopt,
                       cfg.config_hash};
  io::save_checkpoint(final, out_path(cfg, "checkpoint_final.json"));
  return 0;
}

int run_evaluate(const ExperimentConfig& cfg) {
  ensure_out_dir(cfg);
  auto refs = load_dataset(cfg);
  auto ckpt = io::load_checkpoint(cfg.eval.checkpoint);
  dyn::Policy p = policy_from_checkpoint(ckpt, cfg.eval.mode, cfg.eval.noise,
                                         cfg.eval.lat_noise,
                                         cfg.eval.handcrafted_s, true);
  const std::uint64_t seed = CounterRng(cfg.master_seed).stream(0xe7a1).next_u64();
  auto report = evaluate_policy(p, refs, cfg.world.params, cfg.eval.split,
                                cfg.eval.tol, cfg.eval.n_t, seed,
                                cfg.eval.max_comps);
  json j = report_meta(cfg);
  j["kind"] = "eval_report";
  j["split"] = world::to_string(cfg.eval.split);
  j["report"] = eval_report_json(report);
  io::write_json_file(j, out_path(cfg, "eval_report.json"));
  return 0;
}

int run_noise_sweep(const ExperimentConfig& cfg) {
  ensure_out_dir(cfg);
  auto refs = load_dataset(cfg);
  auto ckpt = io::load_checkpoint(cfg.noise_sweep.checkpoint);
  auto result = noise_sweep(cfg, refs, ckpt);

  std::vector<std::vector<json>> rows;
  auto push_row = [&](const NoiseSweepRow& r) {
    rows.push_back({r.mode, r.schedule, r.scale, r.mean_epa,
                    r.report.mean_rel_energy, r.report.invalid_rate,
                    r.report.match_rate, r.report.metre, r.report.crmse});
  };
  push_row(result.baseline);
  for (const auto& r : result.rows) push_row(r);
  write_csv(out_path(cfg, "noise_sweep.csv"), cfg,
            {"mode", "schedule", "scale", "mean_epa", "mean_rel_energy",
             "invalid_rate", "match_rate", "metre", "crmse"},
            rows);

  json des = report_meta(cfg);
  des["kind"] = "noise_scales";
  des["baseline_mean_epa"] = result.baseline.mean_epa;
  des["designations"] = json::array();
  for (const auto& d : result.designations) {
    json dj{{"mode", d.mode}, {"schedule", d.schedule}};
    dj["a_s"] = d.a_s ? json(*d.a_s) : json();
    dj["a_m"] = d.a_m ? json(*d.a_m) : json();
    dj["a_l"] = d.a_l ? json(*d.a_l) : json();
    des["designations"].push_back(dj);
  }
  io::write_json_file(des, out_path(cfg, "noise_scales.json"));
  return 0;
}

int run_step_sweep(const ExperimentConfig& cfg) {
  ensure_out_dir(cfg);
  auto refs = load_dataset(cfg);
  auto ckpt = io::load_checkpoint(cfg.step_sweep.checkpoint);
  dyn::Policy p = policy_from_checkpoint(ckpt, cfg.step_sweep.mode, {}, {},
                                         cfg.step_sweep.handcrafted_s, true);
  const std::uint64_t seed = CounterRng(cfg.master_seed).stream(0x57e9).next_u64();

  std::vector<std::vector<json>> rows;
  json reports = json::array();
  for (int n_t : cfg.step_sweep.n_t_list) {
    auto report = evaluate_policy(p, refs, cfg.world.params, cfg.step_sweep.split,
                                  cfg.eval.tol, n_t, seed,
                                  cfg.step_sweep.max_comps);
    rows.push_back({n_t, report.match_rate, report.metre, report.crmse,
                    report.mean_rel_energy, report.invalid_rate});
    json rj = eval_report_json(report);
    reports.push_back(rj);
  }
  write_csv(out_path(cfg, "step_sweep.csv"), cfg,
            {"n_t", "match_rate", "metre", "crmse", "mean_rel_energy",
             "invalid_rate"},
            rows);
  json j = report_meta(cfg);
  j["kind"] = "step_sweep";
  j["reports"] = reports;
  io::write_json_file(j, out_path(cfg, "step_sweep.json"));
  return 0;
}

int run_reinforce(const ExperimentConfig& cfg) {
  ensure_out_dir(cfg);
  auto refs = load_dataset(cfg);
  auto start = io::load_checkpoint(cfg.pretrain.checkpoint);

  json header = report_meta(cfg);
  header["kind"] = "rl_log";
  header["variant"] = to_string(cfg.rl.variant);
  JsonlWriter log(out_path(cfg, "rl_log.jsonl"), header);

  json summary = report_meta(cfg);
  summary["kind"] = "rl_summary";
  summary["variant"] = to_string(cfg.rl.variant);
  summary["seeds"] = json::array();

  const std::uint64_t eval_seed =
      CounterRng(cfg.master_seed).stream(0x7e57).next_u64();

  for (std::uint64_t seed : cfg.rl.seeds) {
    auto run = reinforce_seed_run(cfg, refs, start, seed);
    for (const auto& row : run.log_rows) log.write(row);

    const std::string ckpt_path =
        out_path(cfg, "checkpoint_best_seed" + std::to_string(seed) + ".json");
    io::Checkpoint best{run.best_policy.model, run.best_policy.anneal,
                        std::nullopt, cfg.config_hash};
    io::save_checkpoint(best, ckpt_path);

    auto report = evaluate_policy(run.best_policy, refs, cfg.world.params,
                                  world::Split::Test, cfg.eval.tol, cfg.rl.cfg.n_t,
                                  eval_seed, cfg.eval.max_comps);
    json sj{{"seed", seed},
            {"best_iteration", run.best_iteration},
            {"baseline_val_mean_reward", run.baseline.mean_reward},
            {"baseline_val_mean_rel_energy", run.baseline.mean_rel_energy},
            {"baseline_val_match_rate", run.baseline.match_rate},
            {"best_val_mean_reward", run.best.mean_reward},
            {"best_val_mean_rel_energy", run.best.mean_rel_energy},
            {"best_val_match_rate", run.best.match_rate},
            {"checkpoint", ckpt_path},
            {"test_report", eval_report_json(report)}};

    if (cfg.rl.variant == RLVariant::Anneal && run.best_policy.anneal) {
      // learned schedule on a fixed time grid (both channels)
      std::vector<std::vector<json>> rows;
      bool positive = true;
      for (int k = 0; k <= 100; ++k) {
        const double t = double(k) / 100.0;
        auto s = run.best_policy.anneal->eval(t);
        const bool pos_ok = 1.0 + s[0] > 0.0 && 1.0 + s[1] > 0.0;
        positive = positive && pos_ok;
        rows.push_back({t, s[0], s[1], pos_ok});
      }
      write_csv(out_path(cfg, "anneal_schedule_seed" + std::to_string(seed) + ".csv"),
                cfg, {"t", "s_pos", "s_lat", "one_plus_s_positive"}, rows);
      sj["schedule_positive"] = positive;
    }
    summary["seeds"].push_back(std::move(sj));
  }
  io::write_json_file(summary, out_path(cfg, "rl_summary.json"));
  return 0;
}

int run_search(const ExperimentConfig& cfg) {
  ensure_out_dir(cfg);
  auto refs = load_dataset(cfg);
  auto start = io::load_checkpoint(cfg.pretrain.checkpoint);
  auto result = random_search(cfg, refs, start);

  json header = report_meta(cfg);
  header["kind"] = "search_log";
  JsonlWriter log(out_path(cfg, "trials.jsonl"), header);
  for (const auto& t : result.trials) {
    json row{{"trial", t.index}, {"draws", t.draws}};
    if (t.failed) {
      row["failed"] = true;
      row["error"] = t.error;
    } else {
      row["score"] = t.score;
    }
    log.write(row);
  }
  const auto& best = result.trials[std::size_t(result.best_index)];
  json bj = report_meta(cfg);
  bj["kind"] = "best_trial";
  bj["trial"] = best.index;
  bj["draws"] = best.draws;
  bj["score"] = best.score;
  io::write_json_file(bj, out_path(cfg, "best_trial.json"));
  return 0;
}

int run_anneal_baseline(const ExperimentConfig& cfg) {
  ensure_out_dir(cfg);
  auto refs = load_dataset(cfg);
  auto ckpt = io::load_checkpoint(cfg.anneal_baseline.checkpoint);
  auto result = anneal_baseline_sweep(cfg, refs, ckpt);

  std::vector<std::vector<json>> rows;
  for (const auto& r : result.rows)
    rows.push_back({r.s_pos, r.s_lat, r.metre, r.crmse});
  write_csv(out_path(cfg, "anneal_baseline.csv"), cfg,
            {"s_pos", "s_lat", "metre", "crmse"}, rows);

  const auto& best = result.rows[std::size_t(result.best_index)];
  json j = report_meta(cfg);
  j["kind"] = "anneal_baseline_best";
  j["s_pos"] = best.s_pos;
  j["s_lat"] = best.s_lat;
  j["metre"] = best.metre;
  j["crmse"] = best.crmse;
  j["control_crmse"] = result.rows[0].crmse;
  io::write_json_file(j, out_path(cfg, "anneal_baseline_best.json"));
  return 0;
}

}  // namespace flowrl::harness
