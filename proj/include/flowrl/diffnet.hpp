#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flowrl/rng.hpp"

namespace flowrl::diffnet {

enum class Activation { Tanh, Gelu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

/// Fully connected net: per layer, weights (out x in, row-major) followed by
/// biases (out). Hidden layers apply the activation; the final layer is
/// linear, so with all-zero weights the output equals the last bias vector.
struct NetworkSpec {
  int input_dim = 1;
  std::vector<int> hidden_dims;
  int output_dim = 1;
  Activation activation = Activation::Tanh;
  bool final_layer_zero_init = false;

  int n_layers() const { return int(hidden_dims.size()) + 1; }
  int layer_in(int l) const;
  int layer_out(int l) const;
  int weight_offset(int l) const;
  int bias_offset(int l) const;
  int param_count() const;
  void validate() const;  // throws std::invalid_argument on bad dims
};

struct ParameterVector {
  std::vector<double> values;
  int size() const { return int(values.size()); }
};

/// Deterministic Glorot-uniform init; if final_layer_zero_init, the last
/// layer's weights and biases are exactly zero (output is identically zero).
ParameterVector net_init(const NetworkSpec& spec, std::uint64_t seed);

void net_forward(const NetworkSpec& spec, std::span<const double> params,
                 int base_offset, std::span<const double> input,
                 std::span<double> output);
std::vector<double> net_forward(const NetworkSpec& spec,
                                const ParameterVector& params,
                                const std::vector<double>& input);

struct AdamState {
  std::vector<double> first_moment, second_moment;
  std::int64_t step_count = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_adam = 1e-8;

  static AdamState init(int n, double lr);
};

/// Standard Adam update with bias correction; increments step_count.
void adam_step(AdamState& state, ParameterVector& params,
               std::span<const double> grad);

double apply_activation(Activation a, double x);
double activation_derivative(Activation a, double x);

}  // namespace flowrl::diffnet
