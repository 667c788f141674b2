#pragma once

#include <optional>
#include <string>
#include <vector>

#include "flowrl/checkpoint.hpp"
#include "flowrl/config.hpp"
#include "flowrl/evalmetrics.hpp"
#include "flowrl/grpo.hpp"

namespace flowrl::harness {

json report_meta(const ExperimentConfig& cfg);

/// One generated structure per composition of the split, rolled out with
/// per-composition substreams of `seed`, so the same seed gives identical
/// samples for every n_t and every policy mode that ignores its noise draws.
std::vector<evalm::GeneratedSample> generate_split_samples(
    const dyn::Policy& policy, const world::ReferenceSet& refs,
    const world::EnergyModelParams& wp, world::Split split, int n_t,
    std::uint64_t seed, int max_comps = 0);

dyn::Policy policy_from_checkpoint(const io::Checkpoint& ckpt, dyn::Mode mode,
                                   const dyn::NoiseSchedule& noise_pos,
                                   const dyn::NoiseSchedule& noise_lat,
                                   std::optional<std::array<double, 2>> handcrafted,
                                   bool anneal_lattice);

evalm::EvalReport evaluate_policy(const dyn::Policy& policy,
                                  const world::ReferenceSet& refs,
                                  const world::EnergyModelParams& wp,
                                  world::Split split,
                                  const evalm::MatcherTolerances& tol, int n_t,
                                  std::uint64_t seed, int max_comps = 0);

struct NoiseSweepRow {
  std::string mode;
  std::string schedule;
  double scale = 0.0;
  double mean_epa = 0.0;
  evalm::EvalReport report;
};

struct NoiseDesignation {
  std::string mode;
  std::string schedule;
  std::optional<double> a_s, a_m, a_l;
};

struct NoiseSweepResult {
  NoiseSweepRow baseline;  // deterministic ODE
  std::vector<NoiseSweepRow> rows;
  std::vector<NoiseDesignation> designations;
};

NoiseSweepResult noise_sweep(const ExperimentConfig& cfg,
                             const world::ReferenceSet& refs,
                             const io::Checkpoint& ckpt);

struct RLValidation {
  double mean_reward = 0.0;
  double mean_rel_energy = 0.0;
  double invalid_rate = 0.0;
  double match_rate = 0.0;
};

RLValidation rl_validation(const dyn::Policy& policy,
                           const world::ReferenceSet& refs,
                           const world::EnergyModelParams& wp,
                           const RLSection& rl, std::uint64_t seed);

struct SeedRunResult {
  std::uint64_t seed = 0;
  dyn::Policy best_policy;
  RLValidation baseline;  // iteration-0 validation of the starting policy
  RLValidation best;
  int best_iteration = -1;
  std::vector<json> log_rows;
};

/// Full RL run for one seed: iteration 0 validation, `iterations` GRPO
/// iterations with periodic validation, best-validation policy kept (highest
/// mean validation reward).
SeedRunResult reinforce_seed_run(const ExperimentConfig& cfg,
                                 const world::ReferenceSet& refs,
                                 const io::Checkpoint& start,
                                 std::uint64_t seed);

struct AnnealBaselineRow {
  double s_pos = 0.0, s_lat = 0.0;
  double metre = 0.0, crmse = 0.0;
};

struct AnnealBaselineResult {
  std::vector<AnnealBaselineRow> rows;  // rows[0] is the (0, 0) control
  int best_index = 0;                   // argmin crmse
};

AnnealBaselineResult anneal_baseline_sweep(const ExperimentConfig& cfg,
                                           const world::ReferenceSet& refs,
                                           const io::Checkpoint& ckpt);

struct TrialResult {
  int index = 0;
  json draws;
  double score = 0.0;  // validation reward; -inf for failed trials
  bool failed = false;
  std::string error;
};

struct SearchResult {
  std::vector<TrialResult> trials;
  int best_index = 0;
};

SearchResult random_search(const ExperimentConfig& cfg,
                           const world::ReferenceSet& refs,
                           const io::Checkpoint& start);

// CLI entry points: run, write artifacts under cfg.out_dir, return 0 on
// success.
int run_gen_dataset(const ExperimentConfig& cfg);
int run_pretrain(const ExperimentConfig& cfg);
int run_evaluate(const ExperimentConfig& cfg);
int run_noise_sweep(const ExperimentConfig& cfg);
int run_step_sweep(const ExperimentConfig& cfg);
int run_reinforce(const ExperimentConfig& cfg);
int run_search(const ExperimentConfig& cfg);
int run_anneal_baseline(const ExperimentConfig& cfg);

}  // namespace flowrl::harness
