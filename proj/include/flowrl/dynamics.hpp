#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flowrl/diffnet.hpp"
#include "flowrl/features.hpp"
#include "flowrl/interpolants.hpp"
#include "flowrl/rng.hpp"
#include "flowrl/toyworld.hpp"

namespace flowrl::dyn {

/// sigma(t) applied per integration step. SqrtRatio decays to zero as t -> 1
/// and is evaluated at max(t, t_floor); rollouts use t_floor = dt/2.
enum class NoiseKind { Constant, SqrtRatio };

std::string to_string(NoiseKind k);
NoiseKind noise_kind_from_string(const std::string& s);

struct NoiseSchedule {
  NoiseKind kind = NoiseKind::Constant;
  double a = 0.0;
};

double noise_sigma(const NoiseSchedule& n, double t, double t_floor = 0.0);

/// Velocity model (and optional denoiser head) for both channels. The
/// position net runs per particle and its output is [velocity | denoiser]
/// of width dim each; the lattice net predicts the cell-length velocity.
/// Parameters are one flat vector: [position net | lattice net].
struct SIModel {
  diffnet::NetworkSpec pos_spec, lat_spec;
  bool with_denoiser = false;
  features::FeaturizerConfig feat;
  interp::InterpolantSchedule schedule;
  world::BasePrior base;
  diffnet::ParameterVector params;

  int pos_offset() const { return 0; }
  int lat_offset() const { return pos_spec.param_count(); }
  int param_count() const {
    return pos_spec.param_count() + lat_spec.param_count();
  }
};

SIModel make_model(const features::FeaturizerConfig& feat,
                   const interp::InterpolantSchedule& schedule,
                   const world::BasePrior& base,
                   const std::vector<int>& pos_hidden,
                   const std::vector<int>& lat_hidden, bool with_denoiser,
                   std::uint64_t seed);

/// b (and optionally the denoiser zhat) for all particles, flattened n x d.
void eval_position_net(const SIModel& m, double t, const world::Composition& c,
                       std::span<const double> frac,
                       std::span<const double> cell, std::vector<double>& b,
                       std::vector<double>* zhat);

void eval_lattice_net(const SIModel& m, double t, const world::Composition& c,
                      std::span<const double> frac,
                      std::span<const double> cell, std::vector<double>& b);

/// Learned annealing schedule s(t) for the two channels. With a shared trunk
/// one net maps t -> (s_pos, s_lat); otherwise two nets are stacked in the
/// same parameter vector. Zero-initialized by construction (final layer zero)
/// so s(t) == 0 before any training.
struct AnnealNet {
  bool shared_trunk = true;
  diffnet::NetworkSpec spec;      // t -> 2 outputs when shared, else t -> 1
  diffnet::NetworkSpec lat_spec;  // used when !shared_trunk
  diffnet::ParameterVector params;

  int pos_offset() const { return 0; }
  int lat_offset() const { return shared_trunk ? 0 : spec.param_count(); }
  std::array<double, 2> eval(double t) const;
};

AnnealNet make_anneal_net(int hidden_dim, int n_hidden_layers, bool shared_trunk,
                          std::uint64_t seed);

enum class Mode { DeterministicODE, ScoreSDE, PerturbedODE, AnnealedPerturbedODE };

std::string to_string(Mode m);
Mode mode_from_string(const std::string& s);

/// One sampling policy: the model, the integration mode and its noise, and
/// (annealed mode) the learned or handcrafted schedule. In
/// AnnealedPerturbedODE the model is the frozen pretrained field; only the
/// annealing net is trainable.
struct Policy {
  SIModel model;
  Mode mode = Mode::DeterministicODE;
  NoiseSchedule noise_pos, noise_lat;
  std::optional<AnnealNet> anneal;
  std::optional<std::array<double, 2>> handcrafted_s;  // s(t) = s * t
  bool anneal_lattice = true;

  void validate() const;  // mode/head/schedule compatibility
};

/// One recorded channel update: Gaussian moments, the sampled action and its
/// log density. Deterministic channels carry empty var and log_prob = 0 with
/// stochastic = false.
struct Transition {
  double t = 0.0;
  std::vector<double> x, mean, var, action;
  double log_prob = 0.0;
  bool stochastic = false;
};

/// Sum over components of the Gaussian log density; on the torus the density
/// is evaluated at the minimum-image displacement action - mean (valid for
/// sqrt(var) << 0.5, which config validation enforces).
double transition_logprob(std::span<const double> mean,
                          std::span<const double> var,
                          std::span<const double> action,
                          interp::Geometry geom);

inline constexpr double kGammaFloor = 1e-4;   // TrigGamma endpoint guard
inline constexpr double kVarFloorScale = 1e-12;  // annealed var floor = scale * dt

/// Position-channel update at state (frac, cell); xi must hold n*dim draws
/// for stochastic modes and may be empty for DeterministicODE.
Transition policy_pos_step(const Policy& p, double t, double dt,
                           const world::Composition& c,
                           std::span<const double> frac,
                           std::span<const double> cell,
                           std::span<const double> xi, bool want_logprob);

/// Lattice-channel update; stochastic only in annealed mode with
/// anneal_lattice set, deterministic Euler otherwise.
Transition policy_lat_step(const Policy& p, double t, double dt,
                           const world::Composition& c,
                           std::span<const double> frac,
                           std::span<const double> cell,
                           std::span<const double> xi, bool want_logprob);

struct Trajectory {
  world::Composition comp;
  world::ToyStructure x0;
  std::vector<Transition> pos, lat;  // filled when recording
  world::ToyStructure terminal;
  int n_steps = 0;
  double dt = 0.0;
};

world::ToyStructure sample_x0(const Policy& p, const world::Composition& c,
                              const world::EnergyModelParams& world_params,
                              CounterRng& rng);

/// Integrates both channels from t=0 to t=1 in n_t Euler steps. Noise and the
/// initial state come from independent substreams of rng, so trajectories are
/// reproducible regardless of scheduling and a zero noise scale reproduces
/// the deterministic ODE exactly.
Trajectory rollout(const Policy& p, const world::Composition& c,
                   const world::EnergyModelParams& world_params, int n_t,
                   CounterRng rng, bool record);

/// Same, but from a caller-supplied initial state (shared-x0 groups).
Trajectory rollout_from(const Policy& p, const world::ToyStructure& x0, int n_t,
                        CounterRng rng, bool record);

/// Plain Euler integration of dx/dt = drift(t, x); test and oracle helper.
std::vector<double> integrate_euler(
    const std::function<void(double, std::span<const double>, std::span<double>)>& drift,
    std::vector<double> x0, int n_t, interp::Geometry geom);

}  // namespace flowrl::dyn
