#pragma once

#include <optional>

#include "e2mpl/autodiff.hpp"
#include "e2mpl/numerics.hpp"

namespace e2mpl {

// Ridge regularizers are clamped here before solving; below the floor no
// gradient reaches the learnable scalar.
inline constexpr double kGammaFloor = 1e-8;

enum class SolveForm {
  Auto,    // whichever system is smaller
  Dual,    // Woodbury form, system size = number of rows of Z
  Primal,  // normal equations, system size = feature dimension
};

struct SinkhornOptions {
  int max_iters = 100;
  double tol = 1e-6;
  // Replays exactly this many iterations with no convergence test.
  std::optional<int> fixed_iters;
};

struct ClassifierSolution {
  Matrix theta;  // m x N
  double gamma_used = 0.0;
};

struct AdapterSolution {
  Matrix theta;   // m x m
  Matrix a_norm;  // q x n
  Vector d_a;     // row sums of a_norm
  double gamma_used = 0.0;
  int sinkhorn_iters = 0;
};

class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace solvers {

// theta = Z^T (Z Z^T + gamma I)^{-1} Y, or the primal equivalent.
ad::Var ridge_classifier(ad::Var z_sup, const Matrix& y_sup, ad::Var gamma,
                         SolveForm form = SolveForm::Auto);

// log A_ik = -||z_t,i - z_s,k||^2
ad::Var log_similarity(ad::Var z_tq, ad::Var z_ss);

struct Normalized {
  ad::Var a;  // q x n, rows -> 1, columns -> q/n
  int iters = 0;
};

// Alternating row/column scaling carried out in the log domain so that
// kernels that underflow in linear space stay strictly positive.
Normalized normalize_log_similarity(ad::Var log_a, const SinkhornOptions& options);

// theta_T = Z_t^T (D Z_t Z_t^T + gamma I)^{-1} A Z_s, or the primal equivalent.
ad::Var domain_adapter(ad::Var z_tq, ad::Var z_ss, ad::Var a_norm, ad::Var gamma,
                       SolveForm form = SolveForm::Auto);

}  // namespace solvers

ClassifierSolution fit_ridge_classifier(const Matrix& z_sup, const Matrix& y_sup, double gamma_w,
                                        SolveForm form = SolveForm::Auto);

Matrix similarity_matrix(const Matrix& z_tq, const Matrix& z_ss);

struct NormalizeResult {
  Matrix a;
  int iters = 0;
};

NormalizeResult normalize_similarity(const Matrix& a, const SinkhornOptions& options = {});

AdapterSolution fit_domain_adapter(const Matrix& z_tq, const Matrix& z_ss, const Matrix& a_norm,
                                   double gamma_p, SolveForm form = SolveForm::Auto);

Matrix predict_target(const Matrix& z_tq, const AdapterSolution& adapter, const ClassifierSolution& clf);
Matrix predict_source(const Matrix& z_sq, const ClassifierSolution& clf);

}  // namespace e2mpl
