#include "flowrl/tape.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace flowrl::diffnet {

const char* op_name(Op op) {
  switch (op) {
    case Op::Const: return "const";
    case Op::ParamSlice: return "param_slice";
    case Op::Affine: return "affine";
    case Op::Tanh: return "tanh";
    case Op::Gelu: return "gelu";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::Square: return "square";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Sum: return "sum";
    case Op::Min: return "min";
    case Op::Clip: return "clip";
    case Op::MinImage: return "min_image";
    case Op::Broadcast: return "broadcast";
    case Op::Slice: return "slice";
  }
  return "?";
}

void Tape::check_finite(const Node& n) const {
  for (double v : n.val)
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("non-finite value in primitive '") +
                               op_name(n.op) + "'");
}

Expr Tape::push(Node n) {
  check_finite(n);
  nodes_.push_back(std::move(n));
  return Expr{std::int32_t(nodes_.size() - 1)};
}

Expr Tape::constant(std::vector<double> v) {
  Node n;
  n.op = Op::Const;
  n.val = std::move(v);
  return push(std::move(n));
}

Expr Tape::param_slice(int offset, int len) {
  if (offset < 0 || offset + len > params_->size())
    throw std::invalid_argument("param_slice out of range");
  Node n;
  n.op = Op::ParamSlice;
  n.i0 = offset;
  n.val.assign(params_->values.begin() + offset,
               params_->values.begin() + offset + len);
  return push(std::move(n));
}

Expr Tape::affine(int w_off, int b_off, int in, int out, Expr x) {
  const auto& xv = value(x);
  if (int(xv.size()) != in) throw std::invalid_argument("affine: input size mismatch");
  Node n;
  n.op = Op::Affine;
  n.a = x.idx;
  n.i0 = w_off;
  n.i1 = b_off;
  n.i2 = in;
  n.i3 = out;
  n.val.assign(std::size_t(out), 0.0);
  const double* w = params_->values.data() + w_off;
  const double* b = params_->values.data() + b_off;
  for (int r = 0; r < out; ++r) {
    double acc = b[r];
    const double* wr = w + r * in;
    for (int c = 0; c < in; ++c) acc += wr[c] * xv[std::size_t(c)];
    n.val[std::size_t(r)] = acc;
  }
  return push(std::move(n));
}

namespace {
std::vector<double> unary_apply(const std::vector<double>& x, double (*f)(double)) {
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return y;
}
}  // namespace

Expr Tape::tanh(Expr x) {
  Node n;
  n.op = Op::Tanh;
  n.a = x.idx;
  n.val = unary_apply(value(x), [](double v) { return std::tanh(v); });
  return push(std::move(n));
}

Expr Tape::gelu(Expr x) {
  Node n;
  n.op = Op::Gelu;
  n.a = x.idx;
  n.val = unary_apply(value(x), [](double v) {
    return 0.5 * v * (1.0 + std::erf(v * 0.7071067811865475244));
  });
  return push(std::move(n));
}

Expr Tape::add(Expr a, Expr b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  if (av.size() != bv.size()) throw std::invalid_argument("add: size mismatch");
  Node n;
  n.op = Op::Add;
  n.a = a.idx;
  n.b = b.idx;
  n.val.resize(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) n.val[i] = av[i] + bv[i];
  return push(std::move(n));
}

Expr Tape::sub(Expr a, Expr b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  if (av.size() != bv.size()) throw std::invalid_argument("sub: size mismatch");
  Node n;
  n.op = Op::Sub;
  n.a = a.idx;
  n.b = b.idx;
  n.val.resize(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) n.val[i] = av[i] - bv[i];
  return push(std::move(n));
}

Expr Tape::mul(Expr a, Expr b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  if (av.size() != bv.size()) throw std::invalid_argument("mul: size mismatch");
  Node n;
  n.op = Op::Mul;
  n.a = a.idx;
  n.b = b.idx;
  n.val.resize(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) n.val[i] = av[i] * bv[i];
  return push(std::move(n));
}

Expr Tape::scale(double c, Expr x) {
  Node n;
  n.op = Op::Scale;
  n.a = x.idx;
  n.c0 = c;
  n.val = value(x);
  for (double& v : n.val) v *= c;
  return push(std::move(n));
}

Expr Tape::square(Expr x) {
  Node n;
  n.op = Op::Square;
  n.a = x.idx;
  n.val = value(x);
  for (double& v : n.val) v *= v;
  return push(std::move(n));
}

Expr Tape::exp(Expr x) {
  Node n;
  n.op = Op::Exp;
  n.a = x.idx;
  n.val = unary_apply(value(x), [](double v) { return std::exp(v); });
  return push(std::move(n));
}

Expr Tape::log(Expr x) {
  Node n;
  n.op = Op::Log;
  n.a = x.idx;
  n.val = unary_apply(value(x), [](double v) { return std::log(v); });
  return push(std::move(n));
}

Expr Tape::sum(Expr x) {
  Node n;
  n.op = Op::Sum;
  n.a = x.idx;
  double acc = 0.0;
  for (double v : value(x)) acc += v;
  n.val = {acc};
  return push(std::move(n));
}

Expr Tape::min(Expr a, Expr b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  if (av.size() != bv.size()) throw std::invalid_argument("min: size mismatch");
  Node n;
  n.op = Op::Min;
  n.a = a.idx;
  n.b = b.idx;
  n.val.resize(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) n.val[i] = av[i] <= bv[i] ? av[i] : bv[i];
  return push(std::move(n));
}

Expr Tape::clip(Expr x, double lo, double hi) {
  Node n;
  n.op = Op::Clip;
  n.a = x.idx;
  n.c0 = lo;
  n.c1 = hi;
  n.val = value(x);
  for (double& v : n.val) v = v < lo ? lo : (v > hi ? hi : v);
  return push(std::move(n));
}

Expr Tape::min_image(Expr x) {
  Node n;
  n.op = Op::MinImage;
  n.a = x.idx;
  n.val = value(x);
  for (double& v : n.val) v = v - std::ceil(v - 0.5);  // -> (-0.5, 0.5]
  return push(std::move(n));
}

Expr Tape::broadcast(Expr scalar, int count) {
  if (size(scalar) != 1) throw std::invalid_argument("broadcast: input must be scalar");
  Node n;
  n.op = Op::Broadcast;
  n.a = scalar.idx;
  n.val.assign(std::size_t(count), value(scalar)[0]);
  return push(std::move(n));
}

Expr Tape::slice(Expr x, int offset, int len) {
  const auto& xv = value(x);
  if (offset < 0 || offset + len > int(xv.size()))
    throw std::invalid_argument("slice out of range");
  Node n;
  n.op = Op::Slice;
  n.a = x.idx;
  n.i0 = offset;
  n.val.assign(xv.begin() + offset, xv.begin() + offset + len);
  return push(std::move(n));
}

Expr Tape::net_forward(const NetworkSpec& spec, int base_offset, Expr input) {
  Expr cur = input;
  for (int l = 0; l < spec.n_layers(); ++l) {
    cur = affine(base_offset + spec.weight_offset(l),
                 base_offset + spec.bias_offset(l), spec.layer_in(l),
                 spec.layer_out(l), cur);
    if (l < spec.n_layers() - 1) cur = activation(spec.activation, cur);
  }
  return cur;
}

double Tape::value_scalar(Expr e) const {
  const auto& v = value(e);
  if (v.size() != 1) throw std::invalid_argument("value_scalar on non-scalar node");
  return v[0];
}

const std::vector<double>& Tape::value(Expr e) const {
  if (!e.valid() || e.idx >= std::int32_t(nodes_.size()))
    throw std::invalid_argument("invalid tape expr");
  return nodes_[std::size_t(e.idx)].val;
}

void Tape::backward(Expr root, std::vector<double>& grad) const {
  if (value(root).size() != 1)
    throw std::invalid_argument("backward: root must be scalar");
  if (grad.size() != params_->values.size())
    grad.assign(params_->values.size(), 0.0);

  std::vector<std::vector<double>> adj(nodes_.size());
  auto touch = [&](std::int32_t i) -> std::vector<double>& {
    auto& a = adj[std::size_t(i)];
    if (a.empty()) a.assign(nodes_[std::size_t(i)].val.size(), 0.0);
    return a;
  };
  touch(root.idx)[0] = 1.0;

  for (std::int32_t i = root.idx; i >= 0; --i) {
    const Node& n = nodes_[std::size_t(i)];
    const auto& g = adj[std::size_t(i)];
    if (g.empty()) continue;
    switch (n.op) {
      case Op::Const:
        break;
      case Op::ParamSlice:
        for (std::size_t k = 0; k < g.size(); ++k)
          grad[std::size_t(n.i0) + k] += g[k];
        break;
      case Op::Affine: {
        const int in = n.i2, out = n.i3;
        const auto& xv = nodes_[std::size_t(n.a)].val;
        auto& gx = touch(n.a);
        const double* w = params_->values.data() + n.i0;
        for (int r = 0; r < out; ++r) {
          const double gr = g[std::size_t(r)];
          if (gr == 0.0) continue;
          const double* wr = w + r * in;
          double* gw = grad.data() + n.i0 + r * in;
          for (int c = 0; c < in; ++c) {
            gx[std::size_t(c)] += wr[c] * gr;
            gw[c] += xv[std::size_t(c)] * gr;
          }
          grad[std::size_t(n.i1 + r)] += gr;
        }
        break;
      }
      case Op::Tanh: {
        auto& gx = touch(n.a);
        for (std::size_t k = 0; k < g.size(); ++k)
          gx[k] += g[k] * (1.0 - n.val[k] * n.val[k]);
        break;
      }
      case Op::Gelu: {
        const auto& xv = nodes_[std::size_t(n.a)].val;
        auto& gx = touch(n.a);
        for (std::size_t k = 0; k < g.size(); ++k) {
          const double x = xv[k];
          const double phi = std::exp(-0.5 * x * x) * 0.3989422804014326779;
          const double Phi = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
          gx[k] += g[k] * (Phi + x * phi);
        }
        break;
      }
      case Op::Add: {
        auto& ga = touch(n.a);
        auto& gb = touch(n.b);
        for (std::size_t k = 0; k < g.size(); ++k) {
          ga[k] += g[k];
          gb[k] += g[k];
        }
        break;
      }
      case Op::Sub: {
        auto& ga = touch(n.a);
        auto& gb = touch(n.b);
        for (std::size_t k = 0; k < g.size(); ++k) {
          ga[k] += g[k];
          gb[k] -= g[k];
        }
        break;
      }
      case Op::Mul: {
        const auto& av = nodes_[std::size_t(n.a)].val;
        const auto& bv = nodes_[std::size_t(n.b)].val;
        auto& ga = touch(n.a);
        auto& gb = touch(n.b);
        for (std::size_t k = 0; k < g.size(); ++k) {
          ga[k] += g[k] * bv[k];
          gb[k] += g[k] * av[k];
        }
        break;
      }
      case Op::Scale: {
        auto& gx = touch(n.a);
        for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] * n.c0;
        break;
      }
      case Op::Square: {
        const auto& xv = nodes_[std::size_t(n.a)].val;
        auto& gx = touch(n.a);
        for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] * 2.0 * xv[k];
        break;
      }
      case Op::Exp: {
        auto& gx = touch(n.a);
        for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] * n.val[k];
        break;
      }
      case Op::Log: {
        const auto& xv = nodes_[std::size_t(n.a)].val;
        auto& gx = touch(n.a);
        for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] / xv[k];
        break;
      }
      case Op::Sum: {
        auto& gx = touch(n.a);
        for (std::size_t k = 0; k < gx.size(); ++k) gx[k] += g[0];
        break;
      }
      case Op::Min: {
        const auto& av = nodes_[std::size_t(n.a)].val;
        const auto& bv = nodes_[std::size_t(n.b)].val;
        auto& ga = touch(n.a);
        auto& gb = touch(n.b);
        for (std::size_t k = 0; k < g.size(); ++k) {
          if (av[k] <= bv[k])
            ga[k] += g[k];
          else
            gb[k] += g[k];
        }
        break;
      }
      case Op::Clip: {
        const auto& xv = nodes_[std::size_t(n.a)].val;
        auto& gx = touch(n.a);
        for (std::size_t k = 0; k < g.size(); ++k)
          if (xv[k] > n.c0 && xv[k] < n.c1) gx[k] += g[k];
        break;
      }
      case Op::MinImage: {
        auto& gx = touch(n.a);
        for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k];
        break;
      }
      case Op::Broadcast: {
        auto& gx = touch(n.a);
        for (std::size_t k = 0; k < g.size(); ++k) gx[0] += g[k];
        break;
      }
      case Op::Slice: {
        auto& gx = touch(n.a);
        for (std::size_t k = 0; k < g.size(); ++k)
          gx[std::size_t(n.i0) + k] += g[k];
        break;
      }
    }
  }
}

double objective_value(const ParameterVector& params, const Objective& f) {
  Tape tape(params);
  return tape.value_scalar(f(tape));
}

std::pair<double, std::vector<double>> loss_grad(const ParameterVector& params,
                                                 const Objective& f) {
  Tape tape(params);
  Expr root = f(tape);
  std::vector<double> grad(params.values.size(), 0.0);
  tape.backward(root, grad);
  return {tape.value_scalar(root), std::move(grad)};
}

std::vector<double> finite_diff_grad(const ParameterVector& params,
                                     const Objective& f, double h) {
  if (h <= 0.0) throw std::invalid_argument("finite_diff_grad: h must be > 0");
  ParameterVector p = params;
  std::vector<double> grad(p.values.size(), 0.0);
  for (std::size_t i = 0; i < p.values.size(); ++i) {
    const double orig = p.values[i];
    p.values[i] = orig + h;
    const double fp = objective_value(p, f);
    p.values[i] = orig - h;
    const double fm = objective_value(p, f);
    p.values[i] = orig;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

double rel_l2_error(std::span<const double> a, std::span<const double> b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / (std::sqrt(den) + 1e-300);
}

}  // namespace flowrl::diffnet
