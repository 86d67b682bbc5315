#pragma once

#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "e2mpl/numerics.hpp"

namespace e2mpl::ad {

class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  double scalar() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

// Matrix-valued reverse-mode tape. Nodes are appended in evaluation order, so
// a single reverse sweep propagates adjoints. Nodes that do not depend on any
// variable carry no backward closure.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

  Var constant(Matrix value);
  Var variable(Matrix value);

  // Appends a node computed from `parents`. `backward` is dropped when none of
  // the parents needs a gradient.
  Var record(Matrix value, std::initializer_list<Var> parents, Backward backward);
  Var record(Matrix value, std::span<const Var> parents, Backward backward);

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  // Seeds d(root)/d(root) = seed. Root must be 1x1.
  void backward(Var root, double seed = 1.0);

  // Gradient of the last backward() root with respect to `v`; zeros if untouched.
  Matrix grad(Var v) const;

  void accumulate(int id, const Matrix& g);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    bool has_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

// Arithmetic
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double c);
Var mul_scalar(Var a, Var s);  // s is 1x1
Var hadamard(Var a, Var b);
Var add_row(Var a, Var row);  // row is 1 x cols, broadcast down
Var broadcast_rows(Var row, Eigen::Index n);
Var scale_rows(Var a, Var col);  // col is rows x 1
Var affine(Var x, Var w, Var b);

// Structure
Var hcat(std::span<const Var> parts);
Var vcat(std::span<const Var> parts);
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var gather_rows(Var a, std::span<const int> rows);
Var gather_elems(Var a, std::span<const std::pair<int, int>> idx);  // -> n x 1

// Elementwise
Var tanh(Var a);
Var exp(Var a);
Var sqrt(Var a);
Var reciprocal(Var a);
Var softplus(Var a);
Var sigmoid(Var a);
Var affine_scalar(Var a, double mul, double add);  // mul*a + add
// Passes values above `floor` through; below it the output is pinned at
// `floor` and no gradient flows.
Var clamp_min(Var a, double floor);

// Reductions
Var sum(Var a);
Var sum_squares(Var a);
Var row_sums(Var a);

// Kernels
Var sq_dist(Var x, Var y);  // q x n matrix of squared row distances
Var log_normalize_rows(Var log_a, double log_target);
Var log_normalize_cols(Var log_a, double log_target);
Var normalize_rows_safe(Var a);  // unit rows; zero rows stay zero
Var spd_solve(Var m, Var ridge, Var b);
Var shifted_solve(Var m, Var ridge, Var b);
Var softmax_rows(Var logits);
Var cross_entropy(Var probs, std::span<const std::int64_t> labels);
Var entropy_rows(Var probs);

}  // namespace e2mpl::ad
