#pragma once

#include <span>
#include <vector>

#include "flowrl/toyworld.hpp"

namespace flowrl::features {

/// Inputs for the per-particle position net and the global lattice net.
/// Coordinates enter only through sin/cos of 2 pi x, so features are
/// invariant under coordinate wrap; neighbor information enters through
/// per-species means, so applying the same per-particle net to every row is
/// equivariant under same-species permutation.
struct FeaturizerConfig {
  int n_species = 3;
  int dim = 2;
  int n_max = 8;
};

/// [t | species one-hot | sin/cos(2 pi x_i) | global mean sin/cos |
///  per-species mean sin/cos | log cell]
int pos_feature_dim(const FeaturizerConfig& f);

/// [t | log cell | species count fractions | global mean sin/cos | n/n_max]
int lat_feature_dim(const FeaturizerConfig& f);

void pos_features(const FeaturizerConfig& f, double t,
                  const world::Composition& comp, std::span<const double> frac,
                  std::span<const double> cell, int particle,
                  std::span<double> out);

void lat_features(const FeaturizerConfig& f, double t,
                  const world::Composition& comp, std::span<const double> frac,
                  std::span<const double> cell, std::span<double> out);

}  // namespace flowrl::features
