#include "flowrl/interpolants.hpp"

#include <cmath>
#include <stdexcept>

namespace flowrl::interp {

namespace {
constexpr double kHalfPi = 1.5707963267948966192313217;
}

std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::Linear: return "linear";
    case ScheduleKind::Trig: return "trig";
    case ScheduleKind::TrigGamma: return "trig_gamma";
  }
  return "?";
}

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear") return ScheduleKind::Linear;
  if (s == "trig") return ScheduleKind::Trig;
  if (s == "trig_gamma") return ScheduleKind::TrigGamma;
  throw std::invalid_argument("unknown schedule kind: " + s);
}

ScheduleValues schedule_eval(const InterpolantSchedule& s, double t) {
  if (!(t >= 0.0 && t <= 1.0))
    throw std::domain_error("schedule_eval: t outside [0, 1]");
  ScheduleValues v{};
  switch (s.kind) {
    case ScheduleKind::Linear:
      v = {1.0 - t, t, 0.0, -1.0, 1.0, 0.0};
      break;
    case ScheduleKind::Trig:
    case ScheduleKind::TrigGamma:
      v.alpha = std::cos(kHalfPi * t);
      v.beta = std::sin(kHalfPi * t);
      v.dalpha = -kHalfPi * std::sin(kHalfPi * t);
      v.dbeta = kHalfPi * std::cos(kHalfPi * t);
      v.gamma = 0.0;
      v.dgamma = 0.0;
      // boundary identities hold exactly, not just to rounding
      if (t == 0.0) {
        v.alpha = 1.0;
        v.beta = 0.0;
      } else if (t == 1.0) {
        v.alpha = 0.0;
        v.beta = 1.0;
      }
      break;
  }
  if (s.kind == ScheduleKind::TrigGamma) {
    const double q = s.a_gamma * t * (1.0 - t);
    v.gamma = std::sqrt(q);  // exactly 0 at t in {0, 1}
    // diverges at the endpoints; returned as +-inf there
    v.dgamma = s.a_gamma * (1.0 - 2.0 * t) / (2.0 * v.gamma);
  }
  return v;
}

double wrap_unit(double x) {
  double r = x - std::floor(x);
  return r < 1.0 ? r : 0.0;  // guard against floor rounding giving exactly 1
}

double min_image(double x) { return x - std::ceil(x - 0.5); }

void wrap_unit(std::span<double> x) {
  for (double& v : x) v = wrap_unit(v);
}

namespace {
void check_shapes(std::span<const double> x0, std::span<const double> x1,
                  std::span<const double> z) {
  if (x0.size() != x1.size())
    throw std::invalid_argument("interpolate: shape mismatch");
  if (!z.empty() && z.size() != x0.size())
    throw std::invalid_argument("interpolate: z shape mismatch");
}
}  // namespace

std::vector<double> interpolate(const InterpolantSchedule& s, double t,
                                std::span<const double> x0,
                                std::span<const double> x1,
                                std::span<const double> z, Geometry geom) {
  check_shapes(x0, x1, z);
  const ScheduleValues v = schedule_eval(s, t);
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const double zi = z.empty() ? 0.0 : z[i];
    if (geom == Geometry::Euclidean) {
      out[i] = v.alpha * x0[i] + v.beta * x1[i] + v.gamma * zi;
    } else {
      const double d = min_image(x1[i] - x0[i]);
      out[i] = wrap_unit(x0[i] + v.beta * d + v.gamma * zi);
    }
  }
  return out;
}

std::vector<double> conditional_velocity(const InterpolantSchedule& s, double t,
                                         std::span<const double> x0,
                                         std::span<const double> x1,
                                         std::span<const double> z,
                                         Geometry geom) {
  check_shapes(x0, x1, z);
  const ScheduleValues v = schedule_eval(s, t);
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const double zi = z.empty() ? 0.0 : z[i];
    if (geom == Geometry::Euclidean) {
      out[i] = v.dalpha * x0[i] + v.dbeta * x1[i] + v.dgamma * zi;
    } else {
      const double d = min_image(x1[i] - x0[i]);
      out[i] = v.dbeta * d + v.dgamma * zi;
    }
  }
  return out;
}

}  // namespace flowrl::interp
