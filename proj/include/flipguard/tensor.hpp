#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "flipguard/errors.hpp"

namespace flipguard {

// =====================================================================
//  Dense 64-bit float tensors with reverse-mode automatic
//  differentiation. Rank 1 and 2 only; row-major storage. Reductions
//  run in fixed index order so every forward and backward pass is
//  bit-reproducible.
// =====================================================================

struct Tensor {
  std::vector<std::size_t> shape;  // product(shape) == data.size()
  std::vector<double> data;        // row-major
  bool requires_grad = false;
  std::vector<double> grad;  // empty, or same length as data

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s);
  Tensor(std::vector<std::size_t> s, std::vector<double> d);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vector(std::vector<double> d);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> d);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  bool is_scalar() const { return data.size() == 1; }
  double item() const;  // scalar value; throws ShapeError otherwise

  double& at(std::size_t i, std::size_t j) {
    return data[i * shape[1] + j];
  }
  double at(std::size_t i, std::size_t j) const {
    return data[i * shape[1] + j];
  }

  std::string shape_str() const;
};

bool same_shape(const Tensor& a, const Tensor& b);

// Supported primitive kinds. Sign and clamp carry zero derivative at
// their kinks; relu'(0) = 0. These conventions are fixed so training
// traces reproduce exactly across runs.
enum class Primitive : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  MatMul,
  Relu,
  Exp,
  Log,
  Sum,
  SumRows,
  Mean,
  MaxOverAxis,
  LogSumExpRows,
  Softmax,
  SquaredL2,
  Sign,
  Clamp,
  Scale,
  Dlr,
};

const char* primitive_name(Primitive p);

// How a two-input elementwise primitive pairs its operands.
enum class Pairing : std::uint8_t {
  Same,         // identical shapes
  ScalarRight,  // rhs is a 1-element tensor
  ScalarLeft,   // lhs is a 1-element tensor
  RowBias,      // {m,n} + {n}: rhs added to every row (add only)
};

// One recorded primitive application. Forward values are computed
// eagerly when the node is created; replay() recomputes them from the
// record and must reproduce the same bits.
class Tape {
 public:
  using NodeId = std::uint32_t;

  struct Node {
    Primitive kind = Primitive::Leaf;
    std::array<NodeId, 2> in{0, 0};
    std::uint8_t n_in = 0;
    Pairing pairing = Pairing::Same;
    double p0 = 0.0, p1 = 0.0;  // clamp bounds / scale factor / dlr target
    Tensor value;
    std::vector<double> grad;     // allocated lazily by backward()
    std::vector<int> saved_idx;   // argmax / order statistics indices
    bool requires_grad = false;
  };

  NodeId leaf(Tensor t);
  NodeId constant(Tensor t) {
    t.requires_grad = false;
    return leaf(std::move(t));
  }

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId matmul(NodeId a, NodeId b);
  NodeId relu(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId sum(NodeId a);
  NodeId sum_rows(NodeId a);       // last axis: {m,n} -> {m}, {n} -> {1}
  NodeId mean(NodeId a);
  NodeId max_over_axis(NodeId a);  // last axis; ties go to lowest index
  NodeId logsumexp_rows(NodeId a);
  NodeId softmax(NodeId a);  // last axis, max-subtracted for stability
  NodeId squared_l2(NodeId a);
  NodeId sign(NodeId a);
  NodeId clamp(NodeId a, double lo, double hi);
  NodeId scale(NodeId a, double s);
  // Difference-of-logit-ratio attack objective; y is the true class.
  // Requires >= 4 classes and a non-degenerate denominator.
  NodeId dlr(NodeId logits, int y);

  // Generic dispatch over the primitive set above (Leaf excluded).
  NodeId apply(Primitive kind, const std::vector<NodeId>& inputs,
               double p0 = 0.0, double p1 = 0.0);

  // Node storage never relocates, so value references stay valid while
  // further nodes are recorded.
  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }

  // Reverse-mode sweep from a scalar output. Gradients accumulate in
  // fixed node order; leaves that do not influence the output keep a
  // zero gradient (that is not an error).
  void backward(NodeId output);

  // Gradient of the last backward() output w.r.t. node `id`, as a
  // tensor shaped like the node's value. Zeros if untouched.
  Tensor grad(NodeId id) const;

  // Recomputes every forward value in recording order. Used to check
  // that the tape is a faithful, bit-exact record.
  void replay();

  const Node& node(NodeId id) const { return nodes_[id]; }

 private:
  NodeId push(Node n);
  void forward_node(Node& n);
  void backward_node(Node& n);
  std::vector<double>& grad_buf(NodeId id);

  std::deque<Node> nodes_;
};

// Central finite differences (f(x+h e_i) - f(x-h e_i)) / (2h) per
// coordinate. Independent oracle for gradient checks; throws
// NumericalError naming the coordinate if an evaluation is non-finite.
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f,
                              const Tensor& point, double h);

namespace detail {
// Forward kernels shared by the tape and by plain (untaped) model
// evaluation, so both paths produce identical bits.
void matmul_kernel(const Tensor& a, const Tensor& b, Tensor& out);
void add_rowbias_kernel(const Tensor& a, const Tensor& bias, Tensor& out);
void relu_kernel(const Tensor& a, Tensor& out);
void softmax_rows(const Tensor& z, Tensor& out);
void logsumexp_rows_kernel(const Tensor& z, Tensor& out);
}  // namespace detail

}  // namespace flipguard
