#include "flowrl/parallel.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace flowrl::par {

namespace {
bool g_enabled = true;
}

bool enabled() {
#ifdef _OPENMP
  return g_enabled;
#else
  return false;
#endif
}

void set_enabled(bool on) { g_enabled = on; }

int max_threads() {
#ifdef _OPENMP
  return enabled() ? omp_get_max_threads() : 1;
#else
  return 1;
#endif
}

void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn) {
#ifdef _OPENMP
  if (enabled() && n > 1) {
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
#endif
  for (std::int64_t i = 0; i < n; ++i) fn(i);
}

std::pair<double, std::vector<double>> sum_value_grads(
    std::int64_t n, std::size_t grad_dim,
    const std::function<std::pair<double, std::vector<double>>(std::int64_t)>& f) {
  std::vector<double> values(std::size_t(n), 0.0);
  std::vector<std::vector<double>> grads;
  grads.resize(std::size_t(n));
  parallel_for(n, [&](std::int64_t i) {
    auto [v, g] = f(i);
    values[std::size_t(i)] = v;
    grads[std::size_t(i)] = std::move(g);
  });
  double total = 0.0;
  std::vector<double> grad(grad_dim, 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    total += values[std::size_t(i)];
    const auto& g = grads[std::size_t(i)];
    for (std::size_t k = 0; k < grad_dim; ++k) grad[k] += g[k];
  }
  return {total, std::move(grad)};
}

}  // namespace flowrl::par
