#include "e2mpl/autodiff.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

namespace e2mpl::ad {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw NumericsError(std::string("autodiff: ") + what);
}

Tape& tape_of(Var a) {
  require(a.tape != nullptr, "unbound variable");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  require(a.tape != nullptr && a.tape == b.tape, "operands live on different tapes");
  return *a.tape;
}

}  // namespace

const Matrix& Var::value() const { return tape->value(id); }

double Var::scalar() const {
  const Matrix& v = value();
  require(v.rows() == 1 && v.cols() == 1, "scalar() on non-1x1 node");
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), false, false, {}});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), true, false, {}});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, Backward backward) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(backward));
}

Var Tape::record(Matrix value, std::span<const Var> parents, Backward backward) {
  bool needs = false;
  for (const Var& p : parents) {
    require(p.tape == this, "parent from another tape");
    needs = needs || needs_grad(p.id);
  }
  Node node{std::move(value), Matrix(), needs, false, {}};
  if (needs) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::accumulate(int id, const Matrix& g) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.needs_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var root, double seed) {
  require(root.tape == this, "root from another tape");
  require(value(root.id).size() == 1, "backward root must be 1x1");
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  accumulate(root.id, Matrix::Constant(1, 1, seed));
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.has_grad || !n.backward) continue;
    // Closures only touch lower-indexed nodes, so n.grad stays put.
    n.backward(*this, n.grad);
  }
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (!n.has_grad) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

// ---------------------------------------------------------------- arithmetic

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require(a.cols() == b.rows(), "matmul shape mismatch");
  Matrix out = a.value() * b.value();
  return t.record(std::move(out), {a, b}, [ia = a.id, ib = b.id](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
    if (tp.needs_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().transpose();
  return t.record(std::move(out), {a},
                  [ia = a.id](Tape& tp, const Matrix& g) { tp.accumulate(ia, g.transpose()); });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add shape mismatch");
  Matrix out = a.value() + b.value();
  return t.record(std::move(out), {a, b}, [ia = a.id, ib = b.id](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub shape mismatch");
  Matrix out = a.value() - b.value();
  return t.record(std::move(out), {a, b}, [ia = a.id, ib = b.id](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    if (tp.needs_grad(ib)) tp.accumulate(ib, -g);
  });
}

Var scale(Var a, double c) {
  Tape& t = tape_of(a);
  Matrix out = c * a.value();
  return t.record(std::move(out), {a},
                  [ia = a.id, c](Tape& tp, const Matrix& g) { tp.accumulate(ia, c * g); });
}

Var mul_scalar(Var a, Var s) {
  Tape& t = tape_of(a, s);
  require(s.value().size() == 1, "mul_scalar expects a 1x1 factor");
  Matrix out = s.value()(0, 0) * a.value();
  return t.record(std::move(out), {a, s}, [ia = a.id, is = s.id](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(ia)) tp.accumulate(ia, tp.value(is)(0, 0) * g);
    if (tp.needs_grad(is)) {
      tp.accumulate(is, Matrix::Constant(1, 1, g.cwiseProduct(tp.value(ia)).sum()));
    }
  });
}

Var hadamard(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard shape mismatch");
  Matrix out = a.value().cwiseProduct(b.value());
  return t.record(std::move(out), {a, b}, [ia = a.id, ib = b.id](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(ia)) tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
    if (tp.needs_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
  });
}

Var add_row(Var a, Var row) {
  Tape& t = tape_of(a, row);
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row shape mismatch");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return t.record(std::move(out), {a, row}, [ia = a.id, ir = row.id](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    if (tp.needs_grad(ir)) tp.accumulate(ir, g.colwise().sum());
  });
}

Var broadcast_rows(Var row, Eigen::Index n) {
  Tape& t = tape_of(row);
  require(row.rows() == 1, "broadcast_rows expects a single row");
  Matrix out = row.value().replicate(n, 1);
  return t.record(std::move(out), {row}, [ir = row.id](Tape& tp, const Matrix& g) {
    tp.accumulate(ir, g.colwise().sum());
  });
}

Var scale_rows(Var a, Var col) {
  Tape& t = tape_of(a, col);
  require(col.cols() == 1 && col.rows() == a.rows(), "scale_rows shape mismatch");
  Matrix out = col.value().col(0).asDiagonal() * a.value();
  return t.record(std::move(out), {a, col}, [ia = a.id, ic = col.id](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(ia)) tp.accumulate(ia, tp.value(ic).col(0).asDiagonal() * g);
    if (tp.needs_grad(ic)) tp.accumulate(ic, g.cwiseProduct(tp.value(ia)).rowwise().sum());
  });
}

Var affine(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

// ----------------------------------------------------------------- structure

Var hcat(std::span<const Var> parts) {
  require(!parts.empty(), "hcat of nothing");
  Tape& t = tape_of(parts[0]);
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    require(p.rows() == rows, "hcat row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> layout;
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    layout.emplace_back(p.id, at);
    at += p.cols();
  }
  return t.record(std::move(out), parts, [layout](Tape& tp, const Matrix& g) {
    for (const auto& [id, start] : layout) {
      if (tp.needs_grad(id)) tp.accumulate(id, g.middleCols(start, tp.value(id).cols()));
    }
  });
}

Var vcat(std::span<const Var> parts) {
  require(!parts.empty(), "vcat of nothing");
  Tape& t = tape_of(parts[0]);
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const Var& p : parts) {
    require(p.cols() == cols, "vcat column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> layout;
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    layout.emplace_back(p.id, at);
    at += p.rows();
  }
  return t.record(std::move(out), parts, [layout](Tape& tp, const Matrix& g) {
    for (const auto& [id, start] : layout) {
      if (tp.needs_grad(id)) tp.accumulate(id, g.middleRows(start, tp.value(id).rows()));
    }
  });
}

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  Tape& t = tape_of(a);
  require(rows * cols == a.value().size(), "reshape size mismatch");
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return t.record(std::move(out), {a}, [ia = a.id](Tape& tp, const Matrix& g) {
    const Matrix& src = tp.value(ia);
    tp.accumulate(ia, Eigen::Map<const Matrix>(g.data(), src.rows(), src.cols()));
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  Tape& t = tape_of(a);
  require(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows out of range");
  Matrix out = a.value().middleRows(start, count);
  return t.record(std::move(out), {a}, [ia = a.id, start](Tape& tp, const Matrix& g) {
    const Matrix& src = tp.value(ia);
    Matrix full = Matrix::Zero(src.rows(), src.cols());
    full.middleRows(start, g.rows()) = g;
    tp.accumulate(ia, full);
  });
}

Var gather_rows(Var a, std::span<const int> rows) {
  Tape& t = tape_of(a);
  Matrix out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < a.rows(), "gather_rows index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return t.record(std::move(out), {a}, [ia = a.id, idx](Tape& tp, const Matrix& g) {
    const Matrix& src = tp.value(ia);
    Matrix full = Matrix::Zero(src.rows(), src.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) full.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    tp.accumulate(ia, full);
  });
}

Var gather_elems(Var a, std::span<const std::pair<int, int>> idx) {
  Tape& t = tape_of(a);
  Matrix out(static_cast<Eigen::Index>(idx.size()), 1);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto [r, c] = idx[i];
    require(r >= 0 && r < a.rows() && c >= 0 && c < a.cols(), "gather_elems index out of range");
    out(static_cast<Eigen::Index>(i), 0) = a.value()(r, c);
  }
  std::vector<std::pair<int, int>> where(idx.begin(), idx.end());
  return t.record(std::move(out), {a}, [ia = a.id, where](Tape& tp, const Matrix& g) {
    const Matrix& src = tp.value(ia);
    Matrix full = Matrix::Zero(src.rows(), src.cols());
    for (std::size_t i = 0; i < where.size(); ++i) {
      full(where[i].first, where[i].second) += g(static_cast<Eigen::Index>(i), 0);
    }
    tp.accumulate(ia, full);
  });
}

// --------------------------------------------------------------- elementwise

Var tanh(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().array().tanh().matrix();
  const int self = static_cast<int>(t.size());
  return t.record(std::move(out), {a}, [ia = a.id, self](Tape& tp, const Matrix& g) {
    const Matrix& y = tp.value(self);
    tp.accumulate(ia, (g.array() * (1.0 - y.array().square())).matrix());
  });
}

Var exp(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().array().exp().matrix();
  const int self = static_cast<int>(t.size());
  return t.record(std::move(out), {a}, [ia = a.id, self](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g.cwiseProduct(tp.value(self)));
  });
}

Var sqrt(Var a) {
  Tape& t = tape_of(a);
  require((a.value().array() > 0.0).all(), "sqrt of non-positive entry");
  Matrix out = a.value().array().sqrt().matrix();
  const int self = static_cast<int>(t.size());
  return t.record(std::move(out), {a}, [ia = a.id, self](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, (g.array() / (2.0 * tp.value(self).array())).matrix());
  });
}

Var reciprocal(Var a) {
  Tape& t = tape_of(a);
  require((a.value().array() != 0.0).all(), "reciprocal of zero");
  Matrix out = a.value().array().inverse().matrix();
  return t.record(std::move(out), {a}, [ia = a.id](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, (-g.array() / tp.value(ia).array().square()).matrix());
  });
}

Var softplus(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().unaryExpr([](double x) { return numerics::softplus(x); });
  return t.record(std::move(out), {a}, [ia = a.id](Tape& tp, const Matrix& g) {
    const Matrix s = tp.value(ia).unaryExpr([](double x) { return numerics::sigmoid(x); });
    tp.accumulate(ia, g.cwiseProduct(s));
  });
}

Var sigmoid(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().unaryExpr([](double x) { return numerics::sigmoid(x); });
  const int self = static_cast<int>(t.size());
  return t.record(std::move(out), {a}, [ia = a.id, self](Tape& tp, const Matrix& g) {
    const Matrix& y = tp.value(self);
    tp.accumulate(ia, (g.array() * y.array() * (1.0 - y.array())).matrix());
  });
}

Var affine_scalar(Var a, double mul, double add_c) {
  Tape& t = tape_of(a);
  Matrix out = (mul * a.value().array() + add_c).matrix();
  return t.record(std::move(out), {a},
                  [ia = a.id, mul](Tape& tp, const Matrix& g) { tp.accumulate(ia, mul * g); });
}

Var clamp_min(Var a, double floor) {
  Tape& t = tape_of(a);
  Matrix out = a.value().cwiseMax(floor);
  return t.record(std::move(out), {a}, [ia = a.id, floor](Tape& tp, const Matrix& g) {
    const Matrix& x = tp.value(ia);
    tp.accumulate(ia, (x.array() > floor).select(g, 0.0).matrix());
  });
}

// ---------------------------------------------------------------- reductions

Var sum(Var a) {
  Tape& t = tape_of(a);
  Matrix out = Matrix::Constant(1, 1, a.value().sum());
  return t.record(std::move(out), {a}, [ia = a.id](Tape& tp, const Matrix& g) {
    const Matrix& src = tp.value(ia);
    tp.accumulate(ia, Matrix::Constant(src.rows(), src.cols(), g(0, 0)));
  });
}

Var sum_squares(Var a) {
  Tape& t = tape_of(a);
  Matrix out = Matrix::Constant(1, 1, a.value().squaredNorm());
  return t.record(std::move(out), {a}, [ia = a.id](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, 2.0 * g(0, 0) * tp.value(ia));
  });
}

Var row_sums(Var a) {
  Tape& t = tape_of(a);
  Matrix out = a.value().rowwise().sum();
  return t.record(std::move(out), {a}, [ia = a.id](Tape& tp, const Matrix& g) {
    const Matrix& src = tp.value(ia);
    tp.accumulate(ia, g.col(0).replicate(1, src.cols()));
  });
}

// ------------------------------------------------------------------- kernels

Var sq_dist(Var x, Var y) {
  Tape& t = tape_of(x, y);
  require(x.cols() == y.cols(), "sq_dist feature dimension mismatch");
  const Matrix& xv = x.value();
  const Matrix& yv = y.value();
  Matrix out(xv.rows(), yv.rows());
  for (Eigen::Index i = 0; i < xv.rows(); ++i) {
    for (Eigen::Index k = 0; k < yv.rows(); ++k) {
      out(i, k) = (xv.row(i) - yv.row(k)).squaredNorm();
    }
  }
  return t.record(std::move(out), {x, y}, [ix = x.id, iy = y.id](Tape& tp, const Matrix& g) {
    const Matrix& xv2 = tp.value(ix);
    const Matrix& yv2 = tp.value(iy);
    if (tp.needs_grad(ix)) {
      Matrix gx = 2.0 * (g.rowwise().sum().col(0).asDiagonal() * xv2 - g * yv2);
      tp.accumulate(ix, gx);
    }
    if (tp.needs_grad(iy)) {
      Matrix gy = 2.0 * (g.colwise().sum().transpose().col(0).asDiagonal() * yv2 -
                         g.transpose() * xv2);
      tp.accumulate(iy, gy);
    }
  });
}

Var log_normalize_rows(Var log_a, double log_target) {
  Tape& t = tape_of(log_a);
  const Matrix& l = log_a.value();
  Matrix out(l.rows(), l.cols());
  for (Eigen::Index i = 0; i < l.rows(); ++i) {
    const double peak = l.row(i).maxCoeff();
    const double lse = peak + std::log((l.row(i).array() - peak).exp().sum());
    out.row(i) = l.row(i).array() - lse + log_target;
  }
  const int self = static_cast<int>(t.size());
  return t.record(std::move(out), {log_a},
                  [il = log_a.id, self, log_target](Tape& tp, const Matrix& g) {
                    const Matrix p = (tp.value(self).array() - log_target).exp().matrix();
                    Matrix gl = g - (g.rowwise().sum().col(0).asDiagonal() * p);
                    tp.accumulate(il, gl);
                  });
}

Var log_normalize_cols(Var log_a, double log_target) {
  Tape& t = tape_of(log_a);
  const Matrix& l = log_a.value();
  Matrix out(l.rows(), l.cols());
  for (Eigen::Index j = 0; j < l.cols(); ++j) {
    const double peak = l.col(j).maxCoeff();
    const double lse = peak + std::log((l.col(j).array() - peak).exp().sum());
    out.col(j) = l.col(j).array() - lse + log_target;
  }
  const int self = static_cast<int>(t.size());
  return t.record(std::move(out), {log_a},
                  [il = log_a.id, self, log_target](Tape& tp, const Matrix& g) {
                    const Matrix p = (tp.value(self).array() - log_target).exp().matrix();
                    Matrix gl = g - p * g.colwise().sum().transpose().col(0).asDiagonal();
                    tp.accumulate(il, gl);
                  });
}

Var normalize_rows_safe(Var a) {
  Tape& t = tape_of(a);
  const Matrix& x = a.value();
  Matrix out = Matrix::Zero(x.rows(), x.cols());
  Vector norms(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    norms(i) = x.row(i).norm();
    if (norms(i) > 0.0) out.row(i) = x.row(i) / norms(i);
  }
  const int self = static_cast<int>(t.size());
  return t.record(std::move(out), {a}, [ia = a.id, self, norms](Tape& tp, const Matrix& g) {
    const Matrix& y = tp.value(self);
    Matrix gx = Matrix::Zero(y.rows(), y.cols());
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      if (norms(i) == 0.0) continue;
      gx.row(i) = (g.row(i) - y.row(i) * y.row(i).dot(g.row(i))) / norms(i);
    }
    tp.accumulate(ia, gx);
  });
}

Var spd_solve(Var m, Var ridge, Var b) {
  Tape& t = tape_of(m, b);
  require(ridge.tape == &t && ridge.value().size() == 1, "spd_solve ridge must be 1x1");
  const Matrix& mv = m.value();
  require(mv.rows() == mv.cols() && b.rows() == mv.rows(), "spd_solve shape mismatch");
  numerics::require_finite(mv, "spd_solve");
  numerics::require_finite(b.value(), "spd_solve");
  Matrix a = numerics::symmetrize(mv);
  a.diagonal().array() += ridge.scalar();
  auto ldlt = std::make_shared<Eigen::LDLT<Matrix>>(a);
  if (ldlt->info() != Eigen::Success) throw NumericsError("spd_solve: factorization failed");
  numerics::SolveCounter::bump();
  Matrix out = ldlt->solve(b.value());
  const int self = static_cast<int>(t.size());
  return t.record(std::move(out), {m, ridge, b},
                  [im = m.id, ir = ridge.id, ib = b.id, self, ldlt](Tape& tp, const Matrix& g) {
                    const Matrix gb = ldlt->solve(g);
                    if (tp.needs_grad(ib)) tp.accumulate(ib, gb);
                    const Matrix& x = tp.value(self);
                    if (tp.needs_grad(im)) {
                      Matrix ga = -gb * x.transpose();
                      tp.accumulate(im, numerics::symmetrize(ga));
                    }
                    if (tp.needs_grad(ir)) {
                      tp.accumulate(ir, Matrix::Constant(1, 1, -gb.cwiseProduct(x).sum()));
                    }
                  });
}

Var shifted_solve(Var m, Var ridge, Var b) {
  Tape& t = tape_of(m, b);
  require(ridge.tape == &t && ridge.value().size() == 1, "shifted_solve ridge must be 1x1");
  const Matrix& mv = m.value();
  require(mv.rows() == mv.cols() && b.rows() == mv.rows(), "shifted_solve shape mismatch");
  numerics::require_finite(mv, "shifted_solve");
  numerics::require_finite(b.value(), "shifted_solve");
  Matrix a = mv;
  a.diagonal().array() += ridge.scalar();
  auto lu = std::make_shared<Eigen::PartialPivLU<Matrix>>(a);
  numerics::SolveCounter::bump();
  Matrix out = lu->solve(b.value());
  const int self = static_cast<int>(t.size());
  return t.record(std::move(out), {m, ridge, b},
                  [im = m.id, ir = ridge.id, ib = b.id, self, lu](Tape& tp, const Matrix& g) {
                    const Matrix gb = lu->transpose().solve(g);
                    if (tp.needs_grad(ib)) tp.accumulate(ib, gb);
                    const Matrix& x = tp.value(self);
                    if (tp.needs_grad(im)) tp.accumulate(im, -gb * x.transpose());
                    if (tp.needs_grad(ir)) {
                      tp.accumulate(ir, Matrix::Constant(1, 1, -gb.cwiseProduct(x).sum()));
                    }
                  });
}

Var softmax_rows(Var logits) {
  Tape& t = tape_of(logits);
  Matrix out = numerics::softmax_rows(logits.value());
  const int self = static_cast<int>(t.size());
  return t.record(std::move(out), {logits}, [il = logits.id, self](Tape& tp, const Matrix& g) {
    const Matrix& y = tp.value(self);
    const Vector inner = g.cwiseProduct(y).rowwise().sum();
    Matrix gl = y.cwiseProduct(g - inner.replicate(1, g.cols()));
    tp.accumulate(il, gl);
  });
}

Var cross_entropy(Var probs, std::span<const std::int64_t> labels) {
  Tape& t = tape_of(probs);
  const double loss = numerics::cross_entropy(probs.value(), labels);
  std::vector<std::int64_t> y(labels.begin(), labels.end());
  return t.record(Matrix::Constant(1, 1, loss), {probs},
                  [ip = probs.id, y](Tape& tp, const Matrix& g) {
                    const Matrix& p = tp.value(ip);
                    Matrix gp = Matrix::Zero(p.rows(), p.cols());
                    const double n = static_cast<double>(p.rows());
                    for (Eigen::Index i = 0; i < p.rows(); ++i) {
                      const double pi = p(i, y[static_cast<std::size_t>(i)]);
                      if (pi > numerics::kLogFloor) {
                        gp(i, y[static_cast<std::size_t>(i)]) = -g(0, 0) / (n * pi);
                      }
                    }
                    tp.accumulate(ip, gp);
                  });
}

Var entropy_rows(Var probs) {
  Tape& t = tape_of(probs);
  const double h = numerics::shannon_entropy_rows(probs.value());
  return t.record(Matrix::Constant(1, 1, h), {probs}, [ip = probs.id](Tape& tp, const Matrix& g) {
    const Matrix& p = tp.value(ip);
    const double n = static_cast<double>(p.rows());
    Matrix gp = p.unaryExpr([](double v) {
      if (v <= 0.0) return 0.0;
      return -(std::log(std::max(v, numerics::kLogFloor)) + (v > numerics::kLogFloor ? 1.0 : 0.0));
    });
    tp.accumulate(ip, (g(0, 0) / n) * gp);
  });
}

}  // namespace e2mpl::ad
