#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace e2mpl {

// Row-major so that reshapes between [b*t x d] and [b x t*d] are free.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Labels = std::vector<std::int64_t>;

class NumericsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace numerics {

inline constexpr double kLogFloor = 1e-12;
inline constexpr double kSymmetryTolerance = 1e-10;

bool all_finite(const Matrix& m);

void require_finite(const Matrix& m, const char* what);

// Counts forward linear solves issued on the calling thread. Backward passes
// do not count; the number is used to audit per-task adaptation cost.
class SolveCounter {
 public:
  SolveCounter();
  std::int64_t count() const;

  static void bump();

 private:
  std::int64_t start_;
};

Matrix symmetrize(const Matrix& m);

// X = (M + ridge*I)^{-1} B for symmetric M. M is symmetrized before factoring.
Matrix spd_solve(const Matrix& m, double ridge, const Matrix& b);

// X = (M + ridge*I)^{-1} B for a general square M (partial-pivot LU).
Matrix shifted_solve(const Matrix& m, double ridge, const Matrix& b);

Matrix softmax_rows(const Matrix& logits);

// Mean over rows of -log(max(p_true, kLogFloor)).
double cross_entropy(const Matrix& probs, std::span<const std::int64_t> labels);

// Mean over rows of -sum p log p, with 0 log 0 := 0.
double shannon_entropy_rows(const Matrix& probs);

// Zero-norm input yields 0.
double cosine_similarity(const RowVector& u, const RowVector& v);

Matrix one_hot(std::span<const std::int64_t> labels, int num_classes);

// Row-wise argmax, ties to the lowest column index.
std::vector<int> argmax_rows(const Matrix& m);

double softplus(double x);
double inverse_softplus(double y);
double sigmoid(double x);

}  // namespace numerics
}  // namespace e2mpl
