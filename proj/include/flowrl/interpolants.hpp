#pragma once

#include <span>
#include <string>
#include <vector>

namespace flowrl::interp {

/// Schedules bridging the base distribution (t=0) and the data (t=1):
///   Linear:    alpha = 1-t, beta = t, gamma = 0
///   Trig:      alpha = cos(pi t/2), beta = sin(pi t/2), gamma = 0
///   TrigGamma: Trig plus gamma(t) = sqrt(a_gamma t (1-t))
/// All satisfy alpha(0)=beta(1)=1 and alpha(1)=beta(0)=gamma(0)=gamma(1)=0.
/// For TrigGamma, dgamma diverges at the endpoints; training samples t away
/// from them (see pretrain t_min).
enum class ScheduleKind { Linear, Trig, TrigGamma };

std::string to_string(ScheduleKind k);
ScheduleKind schedule_kind_from_string(const std::string& s);

struct InterpolantSchedule {
  ScheduleKind kind = ScheduleKind::Linear;
  double a_gamma = 0.25;
  bool has_gamma() const { return kind == ScheduleKind::TrigGamma; }
};

struct ScheduleValues {
  double alpha, beta, gamma;
  double dalpha, dbeta, dgamma;
};

/// Throws std::domain_error for t outside [0, 1].
ScheduleValues schedule_eval(const InterpolantSchedule& s, double t);

enum class Geometry { TorusUnit, Euclidean };

/// Wrap into [0, 1).
double wrap_unit(double x);
/// Displacement to the nearest periodic image, in (-0.5, 0.5].
double min_image(double x);

void wrap_unit(std::span<double> x);

/// x_t. Euclidean: alpha x0 + beta x1 + gamma z. Torus: wrap(x0 + beta d +
/// gamma z) with d the per-component minimum-image displacement from x0 to
/// x1. z may be empty when gamma == 0.
std::vector<double> interpolate(const InterpolantSchedule& s, double t,
                                std::span<const double> x0,
                                std::span<const double> x1,
                                std::span<const double> z, Geometry geom);

/// d/dt of interpolate at fixed (x0, x1, z).
std::vector<double> conditional_velocity(const InterpolantSchedule& s, double t,
                                         std::span<const double> x0,
                                         std::span<const double> x1,
                                         std::span<const double> z,
                                         Geometry geom);

}  // namespace flowrl::interp
