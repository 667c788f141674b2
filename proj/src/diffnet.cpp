#include "flowrl/diffnet.hpp"

#include <cmath>
#include <stdexcept>

namespace flowrl::diffnet {

std::string to_string(Activation a) {
  return a == Activation::Tanh ? "tanh" : "gelu";
}

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "gelu") return Activation::Gelu;
  throw std::invalid_argument("unknown activation: " + s);
}

int NetworkSpec::layer_in(int l) const {
  return l == 0 ? input_dim : hidden_dims[std::size_t(l - 1)];
}

int NetworkSpec::layer_out(int l) const {
  return l == n_layers() - 1 ? output_dim : hidden_dims[std::size_t(l)];
}

int NetworkSpec::weight_offset(int l) const {
  int off = 0;
  for (int k = 0; k < l; ++k) off += layer_out(k) * (layer_in(k) + 1);
  return off;
}

int NetworkSpec::bias_offset(int l) const {
  return weight_offset(l) + layer_out(l) * layer_in(l);
}

int NetworkSpec::param_count() const {
  return weight_offset(n_layers() - 1) +
         layer_out(n_layers() - 1) * (layer_in(n_layers() - 1) + 1);
}

void NetworkSpec::validate() const {
  if (input_dim < 1 || output_dim < 1)
    throw std::invalid_argument("network dims must be >= 1");
  if (hidden_dims.empty())
    throw std::invalid_argument("hidden_dims must be non-empty");
  for (int h : hidden_dims)
    if (h < 1) throw std::invalid_argument("hidden dims must be >= 1");
}

ParameterVector net_init(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  ParameterVector p;
  p.values.assign(std::size_t(spec.param_count()), 0.0);
  CounterRng rng(seed);
  for (int l = 0; l < spec.n_layers(); ++l) {
    const bool zero = spec.final_layer_zero_init && l == spec.n_layers() - 1;
    const int in = spec.layer_in(l), out = spec.layer_out(l);
    const double lim = std::sqrt(6.0 / double(in + out));
    double* w = p.values.data() + spec.weight_offset(l);
    for (int k = 0; k < out * in; ++k) w[k] = zero ? 0.0 : rng.uniform(-lim, lim);
    // biases start at zero for every layer
  }
  return p;
}

double apply_activation(Activation a, double x) {
  if (a == Activation::Tanh) return std::tanh(x);
  // exact gelu: x * Phi(x)
  return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
}

double activation_derivative(Activation a, double x) {
  if (a == Activation::Tanh) {
    double y = std::tanh(x);
    return 1.0 - y * y;
  }
  double phi = std::exp(-0.5 * x * x) * 0.3989422804014326779;
  double Phi = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
  return Phi + x * phi;
}

void net_forward(const NetworkSpec& spec, std::span<const double> params,
                 int base_offset, std::span<const double> input,
                 std::span<double> output) {
  if (int(input.size()) != spec.input_dim)
    throw std::invalid_argument("net_forward: input dim mismatch");
  if (int(output.size()) != spec.output_dim)
    throw std::invalid_argument("net_forward: output dim mismatch");
  std::vector<double> cur(input.begin(), input.end());
  std::vector<double> next;
  for (int l = 0; l < spec.n_layers(); ++l) {
    const int in = spec.layer_in(l), out = spec.layer_out(l);
    const double* w = params.data() + base_offset + spec.weight_offset(l);
    const double* b = params.data() + base_offset + spec.bias_offset(l);
    next.assign(std::size_t(out), 0.0);
    for (int r = 0; r < out; ++r) {
      double acc = b[r];
      const double* wr = w + r * in;
      for (int c = 0; c < in; ++c) acc += wr[c] * cur[std::size_t(c)];
      next[std::size_t(r)] = acc;
    }
    if (l < spec.n_layers() - 1)
      for (double& v : next) v = apply_activation(spec.activation, v);
    cur.swap(next);
  }
  for (int i = 0; i < spec.output_dim; ++i) output[std::size_t(i)] = cur[std::size_t(i)];
}

std::vector<double> net_forward(const NetworkSpec& spec,
                                const ParameterVector& params,
                                const std::vector<double>& input) {
  std::vector<double> out(std::size_t(spec.output_dim), 0.0);
  net_forward(spec, params.values, 0, input, out);
  return out;
}

AdamState AdamState::init(int n, double lr_) {
  AdamState s;
  s.first_moment.assign(std::size_t(n), 0.0);
  s.second_moment.assign(std::size_t(n), 0.0);
  s.lr = lr_;
  return s;
}

void adam_step(AdamState& state, ParameterVector& params,
               std::span<const double> grad) {
  const std::size_t n = params.values.size();
  if (state.first_moment.size() != n || grad.size() != n)
    throw std::invalid_argument("adam_step: size mismatch");
  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, double(state.step_count));
  const double bc2 = 1.0 - std::pow(state.beta2, double(state.step_count));
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad[i];
    state.first_moment[i] = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * g;
    state.second_moment[i] = state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * g * g;
    const double mhat = state.first_moment[i] / bc1;
    const double vhat = state.second_moment[i] / bc2;
    params.values[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps_adam);
  }
}

}  // namespace flowrl::diffnet
