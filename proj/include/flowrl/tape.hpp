#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "flowrl/diffnet.hpp"

namespace flowrl::diffnet {

/// Reverse-mode differentiation over a closed primitive set. Nodes hold
/// vector values; scalars are length-1 vectors. Parameters enter only through
/// ParamSlice and Affine nodes, so backward() accumulates directly into a
/// flat gradient the size of the parameter vector.
///
/// Kink conventions (documented contract, covered by tests):
///  - clip(x, lo, hi): derivative is 1 strictly inside (lo, hi) and 0
///    otherwise, including exactly at the boundaries.
///  - min(a, b): at a == b the gradient flows to the first argument.
///  - min_image(x) = x - nearest integer: derivative is 1 everywhere.
enum class Op : std::uint8_t {
  Const,
  ParamSlice,
  Affine,
  Tanh,
  Gelu,
  Add,
  Sub,
  Mul,
  Scale,
  Square,
  Exp,
  Log,
  Sum,
  Min,
  Clip,
  MinImage,
  Broadcast,
  Slice,
};

const char* op_name(Op op);

struct Expr {
  std::int32_t idx = -1;
  bool valid() const { return idx >= 0; }
};

class Tape {
 public:
  explicit Tape(const ParameterVector& params) : params_(&params) {}

  Expr constant(std::vector<double> v);
  Expr constant(double v) { return constant(std::vector<double>{v}); }
  Expr constant(std::span<const double> v) {
    return constant(std::vector<double>(v.begin(), v.end()));
  }
  Expr param_slice(int offset, int len);
  /// y = W x + b with W (out x in, row-major) at w_off and b at b_off in the
  /// parameter vector.
  Expr affine(int w_off, int b_off, int in, int out, Expr x);
  Expr tanh(Expr x);
  Expr gelu(Expr x);
  Expr activation(Activation a, Expr x) {
    return a == Activation::Tanh ? tanh(x) : gelu(x);
  }
  Expr add(Expr a, Expr b);
  Expr sub(Expr a, Expr b);
  Expr mul(Expr a, Expr b);
  Expr scale(double c, Expr x);
  Expr square(Expr x);
  Expr exp(Expr x);
  Expr log(Expr x);
  Expr sum(Expr x);
  Expr min(Expr a, Expr b);
  Expr clip(Expr x, double lo, double hi);
  Expr min_image(Expr x);
  Expr broadcast(Expr scalar, int n);
  Expr slice(Expr x, int offset, int len);

  /// MLP forward built from Affine + activation nodes; the net's parameters
  /// live at [base_offset, base_offset + spec.param_count()) in the
  /// parameter vector bound to this tape.
  Expr net_forward(const NetworkSpec& spec, int base_offset, Expr input);
  Expr net_forward(const NetworkSpec& spec, int base_offset,
                   std::span<const double> input) {
    return net_forward(spec, base_offset, constant(input));
  }

  double value_scalar(Expr e) const;
  const std::vector<double>& value(Expr e) const;
  int size(Expr e) const { return int(value(e).size()); }

  /// Reverse pass from a scalar root; adds into grad (len = params size).
  void backward(Expr root, std::vector<double>& grad) const;

  const ParameterVector& params() const { return *params_; }
  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Op op;
    std::int32_t a = -1, b = -1;
    int i0 = 0, i1 = 0, i2 = 0, i3 = 0;
    double c0 = 0.0, c1 = 0.0;
    std::vector<double> val;
  };

  Expr push(Node n);
  void check_finite(const Node& n) const;

  const ParameterVector* params_;
  std::vector<Node> nodes_;
};

/// Scalar objective expressed as a composition of tape primitives.
using Objective = std::function<Expr(Tape&)>;

/// Forward-only evaluation of an objective at the given parameters.
double objective_value(const ParameterVector& params, const Objective& f);

/// Exact reverse-mode value and gradient of the objective.
std::pair<double, std::vector<double>> loss_grad(const ParameterVector& params,
                                                 const Objective& f);

/// Central finite differences, component-wise; test oracle for loss_grad.
std::vector<double> finite_diff_grad(const ParameterVector& params,
                                     const Objective& f, double h);

double rel_l2_error(std::span<const double> a, std::span<const double> b);

}  // namespace flowrl::diffnet
