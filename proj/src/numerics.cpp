#include "e2mpl/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace e2mpl::numerics {

namespace {
thread_local std::int64_t tl_solve_count = 0;

void require_square_conforming(const Matrix& m, const Matrix& b, const char* who) {
  if (m.rows() != m.cols()) {
    throw NumericsError(std::string(who) + ": matrix is " + std::to_string(m.rows()) + "x" +
                        std::to_string(m.cols()) + ", expected square");
  }
  if (b.rows() != m.rows()) {
    throw NumericsError(std::string(who) + ": right-hand side has " + std::to_string(b.rows()) +
                        " rows, expected " + std::to_string(m.rows()));
  }
}
}  // namespace

bool all_finite(const Matrix& m) { return m.allFinite(); }

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) {
    throw NumericsError(std::string(what) + ": non-finite entry");
  }
}

SolveCounter::SolveCounter() : start_(tl_solve_count) {}

std::int64_t SolveCounter::count() const { return tl_solve_count - start_; }

void SolveCounter::bump() { ++tl_solve_count; }

Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

Matrix spd_solve(const Matrix& m, double ridge, const Matrix& b) {
  require_square_conforming(m, b, "spd_solve");
  require_finite(m, "spd_solve");
  require_finite(b, "spd_solve");
  if (!std::isfinite(ridge)) {
    throw NumericsError("spd_solve: non-finite ridge");
  }
  Matrix a = symmetrize(m);
  a.diagonal().array() += ridge;
  SolveCounter::bump();
  Eigen::LDLT<Matrix> ldlt(a);
  if (ldlt.info() != Eigen::Success) {
    throw NumericsError("spd_solve: factorization failed");
  }
  return ldlt.solve(b);
}

Matrix shifted_solve(const Matrix& m, double ridge, const Matrix& b) {
  require_square_conforming(m, b, "shifted_solve");
  require_finite(m, "shifted_solve");
  require_finite(b, "shifted_solve");
  if (!std::isfinite(ridge)) {
    throw NumericsError("shifted_solve: non-finite ridge");
  }
  Matrix a = m;
  a.diagonal().array() += ridge;
  SolveCounter::bump();
  return a.partialPivLu().solve(b);
}

Matrix softmax_rows(const Matrix& logits) {
  require_finite(logits, "softmax_rows");
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double peak = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - peak).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

double cross_entropy(const Matrix& probs, std::span<const std::int64_t> labels) {
  if (static_cast<Eigen::Index>(labels.size()) != probs.rows()) {
    throw NumericsError("cross_entropy: label count does not match rows");
  }
  if (probs.rows() == 0) return 0.0;
  double total = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const auto y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= probs.cols()) {
      throw NumericsError("cross_entropy: label " + std::to_string(y) + " out of range [0, " +
                          std::to_string(probs.cols()) + ")");
    }
    total -= std::log(std::max(probs(i, y), kLogFloor));
  }
  return total / static_cast<double>(probs.rows());
}

double shannon_entropy_rows(const Matrix& probs) {
  if (probs.rows() == 0) return 0.0;
  double total = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    for (Eigen::Index j = 0; j < probs.cols(); ++j) {
      const double p = probs(i, j);
      if (p > 0.0) total -= p * std::log(std::max(p, kLogFloor));
    }
  }
  return total / static_cast<double>(probs.rows());
}

double cosine_similarity(const RowVector& u, const RowVector& v) {
  if (u.size() != v.size()) {
    throw NumericsError("cosine_similarity: length mismatch");
  }
  const double nu = u.norm();
  const double nv = v.norm();
  if (nu == 0.0 || nv == 0.0) return 0.0;
  return std::clamp(u.dot(v) / (nu * nv), -1.0, 1.0);
}

Matrix one_hot(std::span<const std::int64_t> labels, int num_classes) {
  Matrix y = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw NumericsError("one_hot: label out of range");
    }
    y(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  }
  return y;
}

std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()), 0);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < m.cols(); ++j) {
      if (m(i, j) > m(i, best)) best = j;
    }
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

double softplus(double x) {
  // log(1 + e^x) without overflow
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double inverse_softplus(double y) {
  if (!(y > 0.0)) {
    throw NumericsError("inverse_softplus: argument must be positive");
  }
  // log(e^y - 1) = y + log(1 - e^-y)
  return y + std::log(-std::expm1(-y));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace e2mpl::numerics
