#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowrl/dynamics.hpp"
#include "flowrl/evalmetrics.hpp"
#include "flowrl/grpo.hpp"
#include "flowrl/pretrain.hpp"
#include "flowrl/toyworld.hpp"

namespace flowrl::harness {

using nlohmann::json;

struct WorldConfig {
  world::EnergyModelParams params;
  int dim = 2;
  int n_max = 8;
};

struct DatasetSection {
  std::string path = "dataset.jsonl";
  int n_min_atoms = 2;
  int n_max_atoms = 6;
  world::DatasetConfig gen;
};

struct PretrainSection {
  pretrain::PretrainConfig cfg;
  std::string checkpoint;  // produced by `pretrain`, consumed downstream
};

enum class RLVariant { Score, Velocity, Anneal };
std::string to_string(RLVariant v);
RLVariant rl_variant_from_string(const std::string& s);

struct RLSection {
  RLVariant variant = RLVariant::Velocity;
  grpo::RLConfig cfg;
  grpo::RewardSpec reward_spec;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  int val_every = 10;
  int val_max_comps = 32;
  dyn::NoiseSchedule rollout_noise{dyn::NoiseKind::SqrtRatio, 0.02};
  dyn::NoiseSchedule ref_noise{dyn::NoiseKind::SqrtRatio, 0.02};
  dyn::NoiseSchedule lat_noise{dyn::NoiseKind::Constant, 0.0};
  dyn::NoiseSchedule lat_ref_noise{dyn::NoiseKind::Constant, 0.0};
  int anneal_hidden = 64;
  int anneal_layers = 2;
  bool anneal_shared_trunk = true;
  bool anneal_lattice = true;
};

struct EvalSection {
  std::string checkpoint;
  world::Split split = world::Split::Test;
  int n_t = 50;
  dyn::Mode mode = dyn::Mode::DeterministicODE;
  dyn::NoiseSchedule noise{dyn::NoiseKind::Constant, 0.0};
  dyn::NoiseSchedule lat_noise{dyn::NoiseKind::Constant, 0.0};
  std::optional<std::array<double, 2>> handcrafted_s;
  evalm::MatcherTolerances tol;
  int max_comps = 0;  // 0 = all
};

struct NoiseSweepSection {
  std::string checkpoint;
  std::vector<dyn::NoiseKind> schedules{dyn::NoiseKind::Constant,
                                        dyn::NoiseKind::SqrtRatio};
  std::vector<double> scales{0.0025, 0.005, 0.01, 0.02, 0.04, 0.08};
  int n_t = 50;
  world::Split split = world::Split::Val;
  std::array<double, 3> bands{0.01, 0.05, 0.15};  // a_s / a_m / a_l
  bool include_score_sde = true;
  int max_comps = 0;
};

struct StepSweepSection {
  std::string checkpoint;
  std::vector<int> n_t_list{10, 20, 50, 100, 200, 500};
  world::Split split = world::Split::Test;
  dyn::Mode mode = dyn::Mode::DeterministicODE;
  std::optional<std::array<double, 2>> handcrafted_s;
  int max_comps = 0;
};

struct SearchDistribution {
  enum class Kind { Choice, Uniform, LogUniform } kind = Kind::Uniform;
  std::vector<json> choices;
  double lo = 0.0, hi = 1.0;
};

struct SearchSection {
  int budget = 16;
  int iterations_per_trial = 30;
  std::map<std::string, SearchDistribution> space;
};

struct AnnealBaselineSection {
  std::string checkpoint;
  int n_t = 10;
  int budget = 50;
  std::array<double, 2> range{0.0, 15.0};
  world::Split split = world::Split::Val;
  dyn::NoiseSchedule noise{dyn::NoiseKind::Constant, 0.0};
  int max_comps = 0;
};

struct ExperimentConfig {
  std::string out_dir = "out";
  std::uint64_t master_seed = 1;
  WorldConfig world;
  DatasetSection dataset;
  PretrainSection pretrain;
  RLSection rl;
  EvalSection eval;
  NoiseSweepSection noise_sweep;
  StepSweepSection step_sweep;
  SearchSection search;
  AnnealBaselineSection anneal_baseline;

  json raw;                 // resolved config as parsed (post-overrides)
  std::string config_hash;  // hash of `raw`
};

/// Parses the config tree, fills defaults, stores the resolved json and its
/// hash. Throws std::invalid_argument / std::runtime_error with a one-line
/// message on invalid input.
ExperimentConfig parse_config(const json& j);
ExperimentConfig load_config_file(const std::string& path,
                                  const std::vector<std::string>& overrides);

/// Applies "dotted.path=value" overrides onto the json tree; values parse as
/// json when possible and fall back to strings.
void apply_override(json& tree, const std::string& assignment);

/// Shared validation used by every subcommand: mode/head compatibility, the
/// per-step torus noise bound sigma(t) sqrt(dt) <= 0.05, composition sizes.
void validate_for_run(const ExperimentConfig& cfg);

double max_step_std(const dyn::NoiseSchedule& n, int n_t);

}  // namespace flowrl::harness
