#include "flipguard/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace flipguard {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& s) {
  std::size_t n = 1;
  for (std::size_t d : s) {
    if (d == 0) throw ShapeError("tensor: zero-sized dimension");
    n *= d;
  }
  return n;
}

// {m,n} -> (m, n); {n} -> (1, n). Row-wise primitives use this view.
std::pair<std::size_t, std::size_t> row_view(const Tensor& t) {
  if (t.rank() == 1) return {1, t.shape[0]};
  if (t.rank() == 2) return {t.shape[0], t.shape[1]};
  throw ShapeError("row-wise primitive: rank > 2 unsupported, shape " +
                   t.shape_str());
}

[[noreturn]] void shape_fail(const char* prim, const Tensor& a,
                             const Tensor& b) {
  throw ShapeError(std::string(prim) + ": shapes " + a.shape_str() + " vs " +
                   b.shape_str() + " do not conform");
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
  data.assign(shape_product(shape), 0.0);
}

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
  if (shape_product(shape) != data.size())
    throw ShapeError("tensor: shape " + shape_str() + " does not match " +
                     std::to_string(data.size()) + " elements");
}

Tensor Tensor::vector(std::vector<double> d) {
  const std::size_t n = d.size();
  return Tensor({n}, std::move(d));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> d) {
  return Tensor({rows, cols}, std::move(d));
}

double Tensor::item() const {
  if (!is_scalar())
    throw ShapeError("item(): tensor of shape " + shape_str() +
                     " is not scalar");
  return data[0];
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "{";
  for (std::size_t i = 0; i < shape.size(); ++i)
    os << (i ? "," : "") << shape[i];
  os << "}";
  return os.str();
}

bool same_shape(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape;
}

const char* primitive_name(Primitive p) {
  switch (p) {
    case Primitive::Leaf: return "leaf";
    case Primitive::Add: return "add";
    case Primitive::Sub: return "sub";
    case Primitive::Mul: return "mul";
    case Primitive::MatMul: return "matmul";
    case Primitive::Relu: return "relu";
    case Primitive::Exp: return "exp";
    case Primitive::Log: return "log";
    case Primitive::Sum: return "sum";
    case Primitive::SumRows: return "sum_rows";
    case Primitive::Mean: return "mean";
    case Primitive::MaxOverAxis: return "max_over_axis";
    case Primitive::LogSumExpRows: return "logsumexp_rows";
    case Primitive::Softmax: return "softmax";
    case Primitive::SquaredL2: return "squared_l2";
    case Primitive::Sign: return "sign";
    case Primitive::Clamp: return "clamp";
    case Primitive::Scale: return "scale";
    case Primitive::Dlr: return "dlr";
  }
  return "?";
}

// ---------------------------------------------------------------------
//  Shared forward kernels
// ---------------------------------------------------------------------

namespace detail {

void matmul_kernel(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  // Fixed i,j,k order; the k-loop is the documented reduction order.
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t)
        acc += a.data[i * k + t] * b.data[t * n + j];
      out.data[i * n + j] = acc;
    }
  }
}

void add_rowbias_kernel(const Tensor& a, const Tensor& bias, Tensor& out) {
  const std::size_t m = a.shape[0], n = a.shape[1];
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.data[i * n + j] = a.data[i * n + j] + bias.data[j];
}

void relu_kernel(const Tensor& a, Tensor& out) {
  for (std::size_t i = 0; i < a.size(); ++i)
    out.data[i] = a.data[i] > 0.0 ? a.data[i] : 0.0;
}

void logsumexp_rows_kernel(const Tensor& z, Tensor& out) {
  const auto [m, n] = row_view(z);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = z.data.data() + i * n;
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += std::exp(row[j] - mx);
    out.data[i] = mx + std::log(acc);
  }
}

void softmax_rows(const Tensor& z, Tensor& out) {
  const auto [m, n] = row_view(z);
  Tensor lse({m});
  logsumexp_rows_kernel(z, lse);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.data[i * n + j] = std::exp(z.data[i * n + j] - lse.data[i]);
}

}  // namespace detail

// ---------------------------------------------------------------------
//  Tape
// ---------------------------------------------------------------------

Tape::NodeId Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

Tape::NodeId Tape::leaf(Tensor t) {
  Node n;
  n.kind = Primitive::Leaf;
  n.requires_grad = t.requires_grad;
  n.value = std::move(t);
  return push(std::move(n));
}

Tape::NodeId Tape::apply(Primitive kind, const std::vector<NodeId>& in,
                         double p0, double p1) {
  switch (kind) {
    case Primitive::Add: return add(in.at(0), in.at(1));
    case Primitive::Sub: return sub(in.at(0), in.at(1));
    case Primitive::Mul: return mul(in.at(0), in.at(1));
    case Primitive::MatMul: return matmul(in.at(0), in.at(1));
    case Primitive::Relu: return relu(in.at(0));
    case Primitive::Exp: return exp(in.at(0));
    case Primitive::Log: return log(in.at(0));
    case Primitive::Sum: return sum(in.at(0));
    case Primitive::SumRows: return sum_rows(in.at(0));
    case Primitive::Mean: return mean(in.at(0));
    case Primitive::MaxOverAxis: return max_over_axis(in.at(0));
    case Primitive::LogSumExpRows: return logsumexp_rows(in.at(0));
    case Primitive::Softmax: return softmax(in.at(0));
    case Primitive::SquaredL2: return squared_l2(in.at(0));
    case Primitive::Sign: return sign(in.at(0));
    case Primitive::Clamp: return clamp(in.at(0), p0, p1);
    case Primitive::Scale: return scale(in.at(0), p0);
    case Primitive::Dlr: return dlr(in.at(0), static_cast<int>(p0));
    case Primitive::Leaf: break;
  }
  throw DomainError("apply: leaf is not an applicable primitive");
}

namespace {

Pairing classify_pair(const char* prim, const Tensor& a, const Tensor& b,
                      bool allow_rowbias) {
  if (same_shape(a, b)) return Pairing::Same;
  if (b.is_scalar()) return Pairing::ScalarRight;
  if (a.is_scalar()) return Pairing::ScalarLeft;
  if (allow_rowbias && a.rank() == 2 && b.rank() == 1 &&
      a.shape[1] == b.shape[0])
    return Pairing::RowBias;
  shape_fail(prim, a, b);
}

}  // namespace

Tape::NodeId Tape::add(NodeId a, NodeId b) {
  Node n;
  n.kind = Primitive::Add;
  n.pairing = classify_pair("add", nodes_[a].value, nodes_[b].value, true);
  n.in = {a, b};
  n.n_in = 2;
  n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
  forward_node(n);
  return push(std::move(n));
}

Tape::NodeId Tape::sub(NodeId a, NodeId b) {
  Node n;
  n.kind = Primitive::Sub;
  n.pairing = classify_pair("sub", nodes_[a].value, nodes_[b].value, false);
  n.in = {a, b};
  n.n_in = 2;
  n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
  forward_node(n);
  return push(std::move(n));
}

Tape::NodeId Tape::mul(NodeId a, NodeId b) {
  Node n;
  n.kind = Primitive::Mul;
  n.pairing = classify_pair("mul", nodes_[a].value, nodes_[b].value, false);
  n.in = {a, b};
  n.n_in = 2;
  n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
  forward_node(n);
  return push(std::move(n));
}

Tape::NodeId Tape::matmul(NodeId a, NodeId b) {
  const Tensor& va = nodes_[a].value;
  const Tensor& vb = nodes_[b].value;
  if (va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[0])
    shape_fail("matmul", va, vb);
  Node n;
  n.kind = Primitive::MatMul;
  n.in = {a, b};
  n.n_in = 2;
  n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
  forward_node(n);
  return push(std::move(n));
}

#define FLIPGUARD_UNARY(fname, prim)                    \
  Tape::NodeId Tape::fname(NodeId a) {                  \
    Node n;                                             \
    n.kind = Primitive::prim;                           \
    n.in = {a, 0};                                      \
    n.n_in = 1;                                         \
    n.requires_grad = nodes_[a].requires_grad;          \
    forward_node(n);                                    \
    return push(std::move(n));                          \
  }

FLIPGUARD_UNARY(relu, Relu)
FLIPGUARD_UNARY(exp, Exp)
FLIPGUARD_UNARY(log, Log)
FLIPGUARD_UNARY(sum, Sum)
FLIPGUARD_UNARY(sum_rows, SumRows)
FLIPGUARD_UNARY(mean, Mean)
FLIPGUARD_UNARY(max_over_axis, MaxOverAxis)
FLIPGUARD_UNARY(logsumexp_rows, LogSumExpRows)
FLIPGUARD_UNARY(softmax, Softmax)
FLIPGUARD_UNARY(squared_l2, SquaredL2)
FLIPGUARD_UNARY(sign, Sign)

#undef FLIPGUARD_UNARY

Tape::NodeId Tape::clamp(NodeId a, double lo, double hi) {
  if (!(lo < hi))
    throw DomainError("clamp: lo must be < hi");
  Node n;
  n.kind = Primitive::Clamp;
  n.in = {a, 0};
  n.n_in = 1;
  n.p0 = lo;
  n.p1 = hi;
  n.requires_grad = nodes_[a].requires_grad;
  forward_node(n);
  return push(std::move(n));
}

Tape::NodeId Tape::scale(NodeId a, double s) {
  Node n;
  n.kind = Primitive::Scale;
  n.in = {a, 0};
  n.n_in = 1;
  n.p0 = s;
  n.requires_grad = nodes_[a].requires_grad;
  forward_node(n);
  return push(std::move(n));
}

Tape::NodeId Tape::dlr(NodeId logits, int y) {
  const Tensor& z = nodes_[logits].value;
  const auto [rows, c] = row_view(z);
  if (rows != 1 || c < 4)
    throw ShapeError("dlr: needs one logit row with >= 4 classes, got " +
                     z.shape_str());
  if (y < 0 || static_cast<std::size_t>(y) >= c)
    throw DomainError("dlr: label out of range");
  Node n;
  n.kind = Primitive::Dlr;
  n.in = {logits, 0};
  n.n_in = 1;
  n.p0 = static_cast<double>(y);
  n.requires_grad = nodes_[logits].requires_grad;
  forward_node(n);
  return push(std::move(n));
}

// ---------------------------------------------------------------------
//  Forward
// ---------------------------------------------------------------------

void Tape::forward_node(Node& n) {
  const Tensor& a = nodes_[n.in[0]].value;
  switch (n.kind) {
    case Primitive::Leaf:
      return;
    case Primitive::Add: {
      const Tensor& b = nodes_[n.in[1]].value;
      switch (n.pairing) {
        case Pairing::Same:
          n.value = Tensor(a.shape);
          for (std::size_t i = 0; i < a.size(); ++i)
            n.value.data[i] = a.data[i] + b.data[i];
          break;
        case Pairing::ScalarRight:
          n.value = Tensor(a.shape);
          for (std::size_t i = 0; i < a.size(); ++i)
            n.value.data[i] = a.data[i] + b.data[0];
          break;
        case Pairing::ScalarLeft:
          n.value = Tensor(b.shape);
          for (std::size_t i = 0; i < b.size(); ++i)
            n.value.data[i] = a.data[0] + b.data[i];
          break;
        case Pairing::RowBias:
          n.value = Tensor(a.shape);
          detail::add_rowbias_kernel(a, b, n.value);
          break;
      }
      return;
    }
    case Primitive::Sub: {
      const Tensor& b = nodes_[n.in[1]].value;
      switch (n.pairing) {
        case Pairing::Same:
          n.value = Tensor(a.shape);
          for (std::size_t i = 0; i < a.size(); ++i)
            n.value.data[i] = a.data[i] - b.data[i];
          break;
        case Pairing::ScalarRight:
          n.value = Tensor(a.shape);
          for (std::size_t i = 0; i < a.size(); ++i)
            n.value.data[i] = a.data[i] - b.data[0];
          break;
        case Pairing::ScalarLeft:
          n.value = Tensor(b.shape);
          for (std::size_t i = 0; i < b.size(); ++i)
            n.value.data[i] = a.data[0] - b.data[i];
          break;
        case Pairing::RowBias:
          shape_fail("sub", a, b);
      }
      return;
    }
    case Primitive::Mul: {
      const Tensor& b = nodes_[n.in[1]].value;
      switch (n.pairing) {
        case Pairing::Same:
          n.value = Tensor(a.shape);
          for (std::size_t i = 0; i < a.size(); ++i)
            n.value.data[i] = a.data[i] * b.data[i];
          break;
        case Pairing::ScalarRight:
          n.value = Tensor(a.shape);
          for (std::size_t i = 0; i < a.size(); ++i)
            n.value.data[i] = a.data[i] * b.data[0];
          break;
        case Pairing::ScalarLeft:
          n.value = Tensor(b.shape);
          for (std::size_t i = 0; i < b.size(); ++i)
            n.value.data[i] = a.data[0] * b.data[i];
          break;
        case Pairing::RowBias:
          shape_fail("mul", a, b);
      }
      return;
    }
    case Primitive::MatMul: {
      const Tensor& b = nodes_[n.in[1]].value;
      n.value = Tensor({a.shape[0], b.shape[1]});
      detail::matmul_kernel(a, b, n.value);
      return;
    }
    case Primitive::Relu:
      n.value = Tensor(a.shape);
      detail::relu_kernel(a, n.value);
      return;
    case Primitive::Exp:
      n.value = Tensor(a.shape);
      for (std::size_t i = 0; i < a.size(); ++i)
        n.value.data[i] = std::exp(a.data[i]);
      return;
    case Primitive::Log:
      n.value = Tensor(a.shape);
      for (std::size_t i = 0; i < a.size(); ++i) {
        if (!(a.data[i] > 0.0))
          throw DomainError("log: non-positive input " +
                            std::to_string(a.data[i]) + " at index " +
                            std::to_string(i));
        n.value.data[i] = std::log(a.data[i]);
      }
      return;
    case Primitive::Sum: {
      double acc = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) acc += a.data[i];
      n.value = Tensor::scalar(acc);
      return;
    }
    case Primitive::SumRows: {
      const auto [m, w] = row_view(a);
      n.value = Tensor({m});
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < w; ++j) acc += a.data[i * w + j];
        n.value.data[i] = acc;
      }
      return;
    }
    case Primitive::Mean: {
      double acc = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) acc += a.data[i];
      n.value = Tensor::scalar(acc / static_cast<double>(a.size()));
      return;
    }
    case Primitive::MaxOverAxis: {
      const auto [m, w] = row_view(a);
      n.value = Tensor({m});
      n.saved_idx.assign(m, 0);
      for (std::size_t i = 0; i < m; ++i) {
        const double* row = a.data.data() + i * w;
        std::size_t best = 0;
        for (std::size_t j = 1; j < w; ++j)
          if (row[j] > row[best]) best = j;  // strict: ties keep lowest
        n.value.data[i] = row[best];
        n.saved_idx[i] = static_cast<int>(best);
      }
      return;
    }
    case Primitive::LogSumExpRows: {
      const auto [m, w] = row_view(a);
      (void)w;
      n.value = Tensor({m});
      detail::logsumexp_rows_kernel(a, n.value);
      return;
    }
    case Primitive::Softmax:
      n.value = Tensor(a.shape);
      detail::softmax_rows(a, n.value);
      return;
    case Primitive::SquaredL2: {
      double acc = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i)
        acc += a.data[i] * a.data[i];
      n.value = Tensor::scalar(acc);
      return;
    }
    case Primitive::Sign:
      n.value = Tensor(a.shape);
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double v = a.data[i];
        n.value.data[i] = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
      }
      return;
    case Primitive::Clamp:
      n.value = Tensor(a.shape);
      for (std::size_t i = 0; i < a.size(); ++i)
        n.value.data[i] = std::min(n.p1, std::max(n.p0, a.data[i]));
      return;
    case Primitive::Scale:
      n.value = Tensor(a.shape);
      for (std::size_t i = 0; i < a.size(); ++i)
        n.value.data[i] = n.p0 * a.data[i];
      return;
    case Primitive::Dlr: {
      const int y = static_cast<int>(n.p0);
      const std::size_t c = a.size();
      // Order statistics with index tie-break (value desc, index asc).
      std::vector<int> order(c);
      for (std::size_t i = 0; i < c; ++i) order[i] = static_cast<int>(i);
      std::stable_sort(order.begin(), order.end(), [&](int i, int j) {
        return a.data[i] > a.data[j];
      });
      const int i1 = order[0], i3 = order[2];
      int m = -1;
      for (std::size_t r = 0; r < c; ++r)
        if (order[r] != y) {
          m = order[r];
          break;
        }
      const double u = a.data[y] - a.data[m];
      const double v = a.data[i1] - a.data[i3];
      if (std::abs(v) < 1e-12)
        throw DomainError("dlr: degenerate denominator |z(1)-z(3)| < 1e-12");
      n.saved_idx = {y, m, i1, i3};
      n.value = Tensor::scalar(-u / v);
      return;
    }
  }
}

// ---------------------------------------------------------------------
//  Backward
// ---------------------------------------------------------------------

std::vector<double>& Tape::grad_buf(NodeId id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Tape::backward(NodeId output) {
  Node& out = nodes_[output];
  if (!out.value.is_scalar())
    throw ShapeError("backward: output has shape " + out.value.shape_str() +
                     ", expected a scalar");
  for (auto& n : nodes_) n.grad.clear();
  grad_buf(output)[0] = 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (n.kind == Primitive::Leaf || !n.requires_grad) continue;
    if (n.grad.empty()) continue;  // not on any path to the output
    backward_node(n);
  }
}

void Tape::backward_node(Node& n) {
  const std::vector<double>& g = n.grad;
  const Tensor& a = nodes_[n.in[0]].value;

  auto ga = [&]() -> std::vector<double>& { return grad_buf(n.in[0]); };
  auto gb = [&]() -> std::vector<double>& { return grad_buf(n.in[1]); };

  switch (n.kind) {
    case Primitive::Leaf:
      return;
    case Primitive::Add: {
      switch (n.pairing) {
        case Pairing::Same: {
          auto& da = ga();
          auto& db = gb();
          for (std::size_t i = 0; i < g.size(); ++i) {
            da[i] += g[i];
            db[i] += g[i];
          }
          break;
        }
        case Pairing::ScalarRight: {
          auto& da = ga();
          auto& db = gb();
          for (std::size_t i = 0; i < g.size(); ++i) {
            da[i] += g[i];
            db[0] += g[i];
          }
          break;
        }
        case Pairing::ScalarLeft: {
          auto& da = ga();
          auto& db = gb();
          for (std::size_t i = 0; i < g.size(); ++i) {
            da[0] += g[i];
            db[i] += g[i];
          }
          break;
        }
        case Pairing::RowBias: {
          auto& da = ga();
          auto& db = gb();
          const std::size_t m = a.shape[0], w = a.shape[1];
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) {
              da[i * w + j] += g[i * w + j];
              db[j] += g[i * w + j];
            }
          break;
        }
      }
      return;
    }
    case Primitive::Sub: {
      switch (n.pairing) {
        case Pairing::Same: {
          auto& da = ga();
          auto& db = gb();
          for (std::size_t i = 0; i < g.size(); ++i) {
            da[i] += g[i];
            db[i] -= g[i];
          }
          break;
        }
        case Pairing::ScalarRight: {
          auto& da = ga();
          auto& db = gb();
          for (std::size_t i = 0; i < g.size(); ++i) {
            da[i] += g[i];
            db[0] -= g[i];
          }
          break;
        }
        case Pairing::ScalarLeft: {
          auto& da = ga();
          auto& db = gb();
          for (std::size_t i = 0; i < g.size(); ++i) {
            da[0] += g[i];
            db[i] -= g[i];
          }
          break;
        }
        case Pairing::RowBias:
          break;
      }
      return;
    }
    case Primitive::Mul: {
      const Tensor& b = nodes_[n.in[1]].value;
      switch (n.pairing) {
        case Pairing::Same: {
          auto& da = ga();
          auto& db = gb();
          for (std::size_t i = 0; i < g.size(); ++i) {
            da[i] += g[i] * b.data[i];
            db[i] += g[i] * a.data[i];
          }
          break;
        }
        case Pairing::ScalarRight: {
          auto& da = ga();
          auto& db = gb();
          for (std::size_t i = 0; i < g.size(); ++i) {
            da[i] += g[i] * b.data[0];
            db[0] += g[i] * a.data[i];
          }
          break;
        }
        case Pairing::ScalarLeft: {
          auto& da = ga();
          auto& db = gb();
          for (std::size_t i = 0; i < g.size(); ++i) {
            da[0] += g[i] * b.data[i];
            db[i] += g[i] * a.data[0];
          }
          break;
        }
        case Pairing::RowBias:
          break;
      }
      return;
    }
    case Primitive::MatMul: {
      const Tensor& b = nodes_[n.in[1]].value;
      const std::size_t m = a.shape[0], k = a.shape[1], w = b.shape[1];
      auto& da = ga();
      auto& db = gb();
      // dA = G B^T, dB = A^T G, accumulated in fixed index order.
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t t = 0; t < k; ++t) {
          double acc = 0.0;
          for (std::size_t j = 0; j < w; ++j)
            acc += g[i * w + j] * b.data[t * w + j];
          da[i * k + t] += acc;
        }
      for (std::size_t t = 0; t < k; ++t)
        for (std::size_t j = 0; j < w; ++j) {
          double acc = 0.0;
          for (std::size_t i = 0; i < m; ++i)
            acc += a.data[i * k + t] * g[i * w + j];
          db[t * w + j] += acc;
        }
      return;
    }
    case Primitive::Relu: {
      auto& da = ga();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (a.data[i] > 0.0) da[i] += g[i];  // relu'(0) = 0
      return;
    }
    case Primitive::Exp: {
      auto& da = ga();
      for (std::size_t i = 0; i < g.size(); ++i)
        da[i] += g[i] * n.value.data[i];
      return;
    }
    case Primitive::Log: {
      auto& da = ga();
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] / a.data[i];
      return;
    }
    case Primitive::Sum: {
      auto& da = ga();
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[0];
      return;
    }
    case Primitive::SumRows: {
      const auto [m, w] = row_view(a);
      auto& da = ga();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) da[i * w + j] += g[i];
      return;
    }
    case Primitive::Mean: {
      auto& da = ga();
      const double s = g[0] / static_cast<double>(a.size());
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += s;
      return;
    }
    case Primitive::MaxOverAxis: {
      const auto [m, w] = row_view(a);
      auto& da = ga();
      for (std::size_t i = 0; i < m; ++i)
        da[i * w + static_cast<std::size_t>(n.saved_idx[i])] += g[i];
      return;
    }
    case Primitive::LogSumExpRows: {
      const auto [m, w] = row_view(a);
      auto& da = ga();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j)
          da[i * w + j] +=
              g[i] * std::exp(a.data[i * w + j] - n.value.data[i]);
      return;
    }
    case Primitive::Softmax: {
      const auto [m, w] = row_view(a);
      auto& da = ga();
      const std::vector<double>& p = n.value.data;
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < w; ++j)
          dot += g[i * w + j] * p[i * w + j];
        for (std::size_t j = 0; j < w; ++j)
          da[i * w + j] += p[i * w + j] * (g[i * w + j] - dot);
      }
      return;
    }
    case Primitive::SquaredL2: {
      auto& da = ga();
      for (std::size_t i = 0; i < da.size(); ++i)
        da[i] += 2.0 * a.data[i] * g[0];
      return;
    }
    case Primitive::Sign:
      return;  // zero derivative everywhere
    case Primitive::Clamp: {
      auto& da = ga();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (a.data[i] > n.p0 && a.data[i] < n.p1) da[i] += g[i];
      return;
    }
    case Primitive::Scale: {
      auto& da = ga();
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += n.p0 * g[i];
      return;
    }
    case Primitive::Dlr: {
      auto& da = ga();
      const int y = n.saved_idx[0], m = n.saved_idx[1];
      const int i1 = n.saved_idx[2], i3 = n.saved_idx[3];
      const double u = a.data[y] - a.data[m];
      const double v = a.data[i1] - a.data[i3];
      const double g0 = g[0];
      da[y] += -g0 / v;
      da[m] += g0 / v;
      da[i1] += g0 * u / (v * v);
      da[i3] -= g0 * u / (v * v);
      return;
    }
  }
}

Tensor Tape::grad(NodeId id) const {
  const Node& n = nodes_[id];
  Tensor out(n.value.shape);
  if (!n.grad.empty()) out.data = n.grad;
  return out;
}

void Tape::replay() {
  for (auto& n : nodes_) {
    if (n.kind == Primitive::Leaf) continue;
    n.saved_idx.clear();
    forward_node(n);
  }
}

// ---------------------------------------------------------------------
//  Finite differences
// ---------------------------------------------------------------------

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f,
                              const Tensor& point, double h) {
  if (!(h > 0.0)) throw DomainError("finite_difference_grad: h must be > 0");
  Tensor g(point.shape);
  Tensor x = point;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x.data[i];
    x.data[i] = orig + h;
    const double fp = f(x);
    x.data[i] = orig - h;
    const double fm = f(x);
    x.data[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericalError(
          "finite_difference_grad: non-finite evaluation at coordinate " +
          std::to_string(i));
    g.data[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace flipguard
