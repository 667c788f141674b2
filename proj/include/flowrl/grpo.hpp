#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "flowrl/dynamics.hpp"
#include "flowrl/evalmetrics.hpp"
#include "flowrl/tape.hpp"
#include "flowrl/toyworld.hpp"

namespace flowrl::grpo {

/// Size normalization for variable atom counts: either scale the advantage by
/// 1/n (structure-level likelihood ratio), or compute the clipped term per
/// atom and average. KL and distillation penalties are always per-atom
/// averages.
enum class NormStrategy { AdvantagePerAtom, PerAtomRatioAverage };
enum class RewardKind { Energy, CrmseLike };

std::string to_string(NormStrategy s);
NormStrategy norm_strategy_from_string(const std::string& s);
std::string to_string(RewardKind k);
RewardKind reward_kind_from_string(const std::string& s);

struct RewardSpec {
  double penalty_per_atom = 3.0;  // reward of an invalid structure is -penalty
  double band_std = 3.0;          // clip band in group standard deviations
  double crmse_offset = 0.5;
  double stol = 0.5;              // no-match penalty distance
};

struct RLConfig {
  int group_size = 8;
  int groups_per_iter = 8;
  int ppo_epochs = 2;
  double clip_eps = 0.2;
  double policy_weight = 1.0;
  double kl_weight = 1e-3;
  double distill_weight = 0.0;
  double lat_policy_weight = 1.0;  // annealed mode; rescaled to sum to one
  NormStrategy normalization = NormStrategy::AdvantagePerAtom;
  double lr = 3e-4;
  RewardKind reward = RewardKind::Energy;
  bool shared_x0 = false;
  int n_t = 50;
  int iterations = 200;

  void validate() const;
};

/// Clipping core: entries are energies per atom, absent for invalid
/// structures. Valid values are clipped to mean +- band_std * std over the
/// valid members only and negated; invalid entries get -penalty.
std::vector<double> reward_from_energies(
    const std::vector<std::optional<double>>& energy_per_atom,
    const RewardSpec& spec);

std::vector<double> reward_energy(const std::vector<world::ToyStructure>& terminals,
                                  const world::EnergyModelParams& p,
                                  const world::ValidityThresholds& vt,
                                  const RewardSpec& spec);

/// offset - (best normalized rmsd against the composition's reference
/// polymorphs, or stol when nothing matches). With a polymorph-aware split
/// the candidates of a train composition are exactly the train entries.
std::vector<double> reward_crmse(const std::vector<world::ToyStructure>& terminals,
                                 int comp_index, const world::ReferenceSet& refs,
                                 const evalm::MatcherTolerances& tol,
                                 const RewardSpec& spec);

struct AdvantageResult {
  std::vector<double> adv;
  bool degenerate = false;  // reward std below 1e-12; advantages all zero
};

/// (r - mean) / max(population std, 1e-8) within the group; groups with
/// reward std below 1e-12 are degenerate and get all-zero advantages.
AdvantageResult advantages(const std::vector<double>& rewards);

struct GroupRollout {
  int comp_index = -1;
  std::vector<dyn::Trajectory> trajs;
  std::vector<double> rewards;
  std::vector<double> adv;
  bool degenerate = false;
};

struct TermStats {
  std::int64_t clipped = 0;  // ratio terms outside [1-eps, 1+eps]
  std::int64_t ratio_terms = 0;
  double kl_sum = 0.0;  // per-atom-averaged KL summed over steps
  std::int64_t kl_terms = 0;
};

/// Clipped-surrogate contribution (to maximize) of one trajectory, already
/// scaled by norm_scale and the channel policy weights. The tape must be
/// bound to the policy's trainable parameter vector.
diffnet::Expr policy_term_tape(diffnet::Tape& tape, const dyn::Policy& policy,
                               const dyn::Trajectory& traj, double advantage,
                               const RLConfig& cfg, double norm_scale,
                               TermStats* stats);

/// Sum over steps of the per-atom-averaged Gaussian KL between the policy
/// transition and the frozen reference transition at the recorded states
/// (unweighted; caller applies beta and norm_scale).
diffnet::Expr kl_term_tape(diffnet::Tape& tape, const dyn::Policy& policy,
                           const dyn::Policy& ref, const dyn::Trajectory& traj,
                           TermStats* stats);

/// Sum over steps of the per-atom-averaged squared denoiser deviation from
/// the reference model (unweighted).
diffnet::Expr distill_term_tape(diffnet::Tape& tape, const dyn::Policy& policy,
                                const dyn::Policy& ref,
                                const dyn::Trajectory& traj);

const diffnet::ParameterVector& trainable(const dyn::Policy& p);
diffnet::ParameterVector& trainable(dyn::Policy& p);

/// Value-only wrappers over whole group lists (the objective pieces as
/// weighted scalars).
double grpo_objective(const std::vector<GroupRollout>& groups,
                      const dyn::Policy& policy, const RLConfig& cfg);
double kl_regularizer(const std::vector<GroupRollout>& groups,
                      const dyn::Policy& policy, const dyn::Policy& ref,
                      const RLConfig& cfg);
double distill_regularizer(const std::vector<GroupRollout>& groups,
                           const dyn::Policy& policy, const dyn::Policy& ref,
                           const RLConfig& cfg);

struct RLState {
  dyn::Policy policy;  // theta; trainable() selects the optimized vector
  dyn::Policy ref;     // frozen reference with its own noise schedules
  diffnet::AdamState adam;
  const world::ReferenceSet* refs = nullptr;
  world::EnergyModelParams world_params;
  world::ValidityThresholds validity;
  evalm::MatcherTolerances match_tol;
  RewardSpec reward_spec;
};

struct IterationMetrics {
  double mean_reward = 0.0;
  double mean_rel_energy = 0.0;
  double invalid_rate = 0.0;
  double mean_kl = 0.0;
  double clip_fraction = 0.0;
  double objective = 0.0;
  int degenerate_groups = 0;
};

std::vector<GroupRollout> collect_groups(const RLState& state, const RLConfig& cfg,
                                         CounterRng rng);

/// One GRPO iteration: rollout groups under the current policy, compute
/// rewards and advantages, then run the configured PPO epochs of Adam on the
/// clipped objective plus regularizers. Deterministic given the rng.
IterationMetrics rl_iteration(RLState& state, const RLConfig& cfg, CounterRng rng);

}  // namespace flowrl::grpo
