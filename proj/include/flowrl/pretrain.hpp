#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <json.hpp>

#include "flowrl/dynamics.hpp"
#include "flowrl/evalmetrics.hpp"
#include "flowrl/tape.hpp"
#include "flowrl/toyworld.hpp"

namespace flowrl::pretrain {

/// One training sample: interpolation time, endpoint pair, latent noise and
/// the precomputed interpolated state / conditional-velocity targets.
/// Positions live on the torus; the lattice channel is Euclidean and uses the
/// gamma-free counterpart of the schedule (the noise-injected path and the
/// denoiser exist for positions only, matching the integration protocol).
struct BatchItem {
  double t = 0.0;
  world::Composition comp;
  std::vector<double> x0_frac, x1_frac, z_pos;
  std::vector<double> x0_cell, x1_cell;
  std::vector<double> xt_frac, xt_cell;
  std::vector<double> target_pos, target_lat;
};

interp::InterpolantSchedule lattice_schedule(const interp::InterpolantSchedule& s);

BatchItem make_batch_item(const interp::InterpolantSchedule& schedule, double t,
                          const world::ToyStructure& x0,
                          const world::ToyStructure& x1,
                          std::span<const double> z_pos);

struct PretrainConfig {
  features::FeaturizerConfig feat;
  interp::InterpolantSchedule schedule;
  world::BasePrior base;
  bool with_denoiser = false;
  std::vector<int> pos_hidden{64, 64};
  std::vector<int> lat_hidden{32, 32};
  int batch_size = 64;
  int steps = 2000;
  double lr = 1e-3;
  double t_min = 1e-3;  // truncation for gamma schedules
  double loss_weight_pos = 0.5;
  double loss_weight_lat = 0.5;
  int val_every = 200;
  int val_n_t = 50;
  int val_max_comps = 32;
  std::uint64_t seed = 1;
};

/// Velocity regression loss per channel, averaged over batch and components,
/// then combined with the configured channel weights. Tape builder plus a
/// value-only wrapper.
diffnet::Expr velocity_loss_tape(diffnet::Tape& tape, const dyn::SIModel& m,
                                 const std::vector<BatchItem>& batch,
                                 double w_pos, double w_lat);
double loss_b(const dyn::SIModel& m, const std::vector<BatchItem>& batch,
              double w_pos, double w_lat);

/// Denoiser regression loss (positions channel); throws std::invalid_argument
/// for schedules without a gamma term.
diffnet::Expr denoiser_loss_tape(diffnet::Tape& tape, const dyn::SIModel& m,
                                 const std::vector<BatchItem>& batch);
double loss_z(const dyn::SIModel& m, const std::vector<BatchItem>& batch);

std::vector<BatchItem> assemble_batch(const PretrainConfig& cfg,
                                      const world::EnergyModelParams& wp,
                                      const world::ReferenceSet& refs,
                                      int batch_size, CounterRng rng);

struct ValMetrics {
  double mean_rel_energy = 0.0;
  double invalid_rate = 0.0;
  double match_rate = 0.0;
};

ValMetrics validate_model(const dyn::SIModel& m,
                          const world::EnergyModelParams& wp,
                          const world::ReferenceSet& refs, world::Split split,
                          int n_t, int max_comps,
                          const evalm::MatcherTolerances& tol,
                          const world::ValidityThresholds& vt,
                          std::uint64_t seed);

struct PretrainResult {
  dyn::SIModel best_model;
  dyn::SIModel final_model;
  double best_val_energy = 0.0;
  std::vector<nlohmann::json> log;
};

/// Adam on loss_b (+ loss_z when configured) over batches drawn from the
/// train split; periodic validation on the val split keeps the best
/// checkpoint. Deterministic given the seed.
PretrainResult pretrain_loop(const PretrainConfig& cfg,
                             const world::EnergyModelParams& wp,
                             const world::ReferenceSet& refs);

}  // namespace flowrl::pretrain
