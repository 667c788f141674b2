#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

namespace flowrl::par {

/// Runtime switch between the OpenMP kernels and the serial reference path.
/// Every parallel loop in this project writes only to slot-local state, so
/// flipping the switch (or changing OMP_NUM_THREADS) never changes results.
bool enabled();
void set_enabled(bool on);
int max_threads();

/// Runs fn(i) for i in [0, n), possibly across threads. fn must only touch
/// state owned by iteration i.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);

/// Evaluates f(i) -> (value_i, grad_i) for every i in parallel, then sums the
/// results serially in index order so the reduction is bit-reproducible.
std::pair<double, std::vector<double>> sum_value_grads(
    std::int64_t n, std::size_t grad_dim,
    const std::function<std::pair<double, std::vector<double>>(std::int64_t)>& f);

}  // namespace flowrl::par
