#include "flowrl/features.hpp"

#include <cmath>
#include <stdexcept>

namespace flowrl::features {

namespace {
constexpr double kTwoPi = 6.283185307179586476925287;
constexpr double kCellFloor = 1e-8;  // keeps log finite on degenerate states
}

int pos_feature_dim(const FeaturizerConfig& f) {
  return 1 + f.n_species + 2 * f.dim + 2 * f.dim + 2 * f.dim * f.n_species + f.dim;
}

int lat_feature_dim(const FeaturizerConfig& f) {
  return 1 + f.dim + f.n_species + 2 * f.dim + 1;
}

namespace {

// global and per-species means of (sin, cos) per axis
void trig_means(const FeaturizerConfig& f, const world::Composition& comp,
                std::span<const double> frac, std::vector<double>& global,
                std::vector<double>& per_species) {
  const int d = f.dim;
  const int n = comp.n();
  global.assign(std::size_t(2 * d), 0.0);
  per_species.assign(std::size_t(2 * d * f.n_species), 0.0);
  std::vector<int> counts(std::size_t(f.n_species), 0);
  for (int i = 0; i < n; ++i) {
    const int sp = comp.species[std::size_t(i)];
    if (sp < 1 || sp > f.n_species)
      throw std::out_of_range("featurizer: species id out of range");
    counts[std::size_t(sp - 1)] += 1;
    for (int a = 0; a < d; ++a) {
      const double ang = kTwoPi * frac[std::size_t(i * d + a)];
      const double s = std::sin(ang), c = std::cos(ang);
      global[std::size_t(2 * a)] += s;
      global[std::size_t(2 * a + 1)] += c;
      per_species[std::size_t((sp - 1) * 2 * d + 2 * a)] += s;
      per_species[std::size_t((sp - 1) * 2 * d + 2 * a + 1)] += c;
    }
  }
  for (double& v : global) v /= double(n);
  for (int k = 0; k < f.n_species; ++k) {
    if (counts[std::size_t(k)] == 0) continue;
    for (int a = 0; a < 2 * d; ++a)
      per_species[std::size_t(k * 2 * d + a)] /= double(counts[std::size_t(k)]);
  }
}

}  // namespace

void pos_features(const FeaturizerConfig& f, double t,
                  const world::Composition& comp, std::span<const double> frac,
                  std::span<const double> cell, int particle,
                  std::span<double> out) {
  const int d = f.dim;
  if (int(out.size()) != pos_feature_dim(f))
    throw std::invalid_argument("pos_features: output size mismatch");
  std::vector<double> global, per_species;
  trig_means(f, comp, frac, global, per_species);

  std::size_t k = 0;
  out[k++] = t;
  for (int sp = 1; sp <= f.n_species; ++sp)
    out[k++] = comp.species[std::size_t(particle)] == sp ? 1.0 : 0.0;
  for (int a = 0; a < d; ++a) {
    const double ang = kTwoPi * frac[std::size_t(particle * d + a)];
    out[k++] = std::sin(ang);
    out[k++] = std::cos(ang);
  }
  for (double v : global) out[k++] = v;
  for (double v : per_species) out[k++] = v;
  for (int a = 0; a < d; ++a)
    out[k++] = std::log(std::max(cell[std::size_t(a)], kCellFloor));
}

void lat_features(const FeaturizerConfig& f, double t,
                  const world::Composition& comp, std::span<const double> frac,
                  std::span<const double> cell, std::span<double> out) {
  const int d = f.dim;
  if (int(out.size()) != lat_feature_dim(f))
    throw std::invalid_argument("lat_features: output size mismatch");
  std::vector<double> global, per_species;
  trig_means(f, comp, frac, global, per_species);

  std::size_t k = 0;
  out[k++] = t;
  for (int a = 0; a < d; ++a)
    out[k++] = std::log(std::max(cell[std::size_t(a)], kCellFloor));
  std::vector<int> counts(std::size_t(f.n_species), 0);
  for (int sp : comp.species) counts[std::size_t(sp - 1)] += 1;
  for (int c : counts) out[k++] = double(c) / double(comp.n());
  for (double v : global) out[k++] = v;
  out[k++] = double(comp.n()) / double(f.n_max);
}

}  // namespace flowrl::features
