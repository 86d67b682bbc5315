#include "e2mpl/solvers.hpp"

#include <cmath>
#include <string>

namespace e2mpl {

namespace {

bool use_dual(SolveForm form, Eigen::Index rows, Eigen::Index features) {
  switch (form) {
    case SolveForm::Dual:
      return true;
    case SolveForm::Primal:
      return false;
    case SolveForm::Auto:
      break;
  }
  return rows <= features;
}

void require_positive(double gamma, const char* name) {
  if (!(gamma > 0.0) || !std::isfinite(gamma)) {
    throw SolverError(std::string(name) + " must be positive and finite");
  }
}

// Largest deviation of row sums from 1 and column sums from q/n.
std::pair<double, double> marginal_error(const Matrix& a) {
  const double col_target = static_cast<double>(a.rows()) / static_cast<double>(a.cols());
  const double row_err = (a.rowwise().sum().array() - 1.0).abs().maxCoeff();
  const double col_err = (a.colwise().sum().array() - col_target).abs().maxCoeff();
  return {row_err, col_err};
}

}  // namespace

namespace solvers {

ad::Var ridge_classifier(ad::Var z_sup, const Matrix& y_sup, ad::Var gamma, SolveForm form) {
  if (z_sup.rows() < 1) throw SolverError("ridge classifier: empty support set");
  if (y_sup.rows() != z_sup.rows()) {
    throw SolverError("ridge classifier: " + std::to_string(y_sup.rows()) + " label rows for " +
                      std::to_string(z_sup.rows()) + " support rows");
  }
  ad::Tape& tape = *z_sup.tape;
  ad::Var g = ad::clamp_min(gamma, kGammaFloor);
  ad::Var zt = ad::transpose(z_sup);
  if (use_dual(form, z_sup.rows(), z_sup.cols())) {
    ad::Var gram = ad::matmul(z_sup, zt);
    ad::Var alpha = ad::spd_solve(gram, g, tape.constant(y_sup));
    return ad::matmul(zt, alpha);
  }
  ad::Var cov = ad::matmul(zt, z_sup);
  ad::Var rhs = ad::matmul(zt, tape.constant(y_sup));
  return ad::spd_solve(cov, g, rhs);
}

ad::Var log_similarity(ad::Var z_tq, ad::Var z_ss) {
  if (z_tq.cols() != z_ss.cols()) throw SolverError("similarity: feature dimensions differ");
  return ad::scale(ad::sq_dist(z_tq, z_ss), -1.0);
}

Normalized normalize_log_similarity(ad::Var log_a, const SinkhornOptions& options) {
  const Eigen::Index q = log_a.rows();
  const Eigen::Index n = log_a.cols();
  if (q < 1 || n < 1) throw SolverError("normalize: empty similarity matrix");
  if (options.max_iters < 1) throw SolverError("normalize: max_iters must be >= 1");
  if (!log_a.value().allFinite()) throw SolverError("normalize: similarity entries must be positive and finite");
  const double log_col_target = std::log(static_cast<double>(q) / static_cast<double>(n));

  ad::Var l = log_a;
  int iters = 0;
  const int limit = options.fixed_iters ? *options.fixed_iters : options.max_iters;
  while (iters < limit) {
    l = ad::log_normalize_rows(l, 0.0);
    l = ad::log_normalize_cols(l, log_col_target);
    ++iters;
    if (options.fixed_iters) continue;
    const auto [row_err, col_err] = marginal_error(l.value().array().exp().matrix());
    if (row_err <= options.tol && col_err <= options.tol) break;
  }
  return {ad::exp(l), iters};
}

ad::Var domain_adapter(ad::Var z_tq, ad::Var z_ss, ad::Var a_norm, ad::Var gamma, SolveForm form) {
  if (z_tq.cols() != z_ss.cols()) throw SolverError("adapter: feature dimensions differ");
  if (a_norm.rows() != z_tq.rows() || a_norm.cols() != z_ss.rows()) {
    throw SolverError("adapter: similarity matrix must be " + std::to_string(z_tq.rows()) + "x" +
                      std::to_string(z_ss.rows()));
  }
  ad::Var g = ad::clamp_min(gamma, kGammaFloor);
  ad::Var d = ad::row_sums(a_norm);
  ad::Var zt = ad::transpose(z_tq);
  ad::Var pulled = ad::matmul(a_norm, z_ss);  // q x m
  if (use_dual(form, z_tq.rows(), z_tq.cols())) {
    ad::Var system = ad::scale_rows(ad::matmul(z_tq, zt), d);  // D Z Z^T, not symmetric
    ad::Var x = ad::shifted_solve(system, g, pulled);
    return ad::matmul(zt, x);
  }
  ad::Var cov = ad::matmul(zt, ad::scale_rows(z_tq, d));  // Z^T D Z
  return ad::spd_solve(cov, g, ad::matmul(zt, pulled));
}

}  // namespace solvers

ClassifierSolution fit_ridge_classifier(const Matrix& z_sup, const Matrix& y_sup, double gamma_w,
                                        SolveForm form) {
  require_positive(gamma_w, "gamma_w");
  ad::Tape tape;
  const double g = std::max(gamma_w, kGammaFloor);
  ad::Var theta = solvers::ridge_classifier(tape.constant(z_sup), y_sup,
                                            tape.constant(Matrix::Constant(1, 1, g)), form);
  return {theta.value(), g};
}

Matrix similarity_matrix(const Matrix& z_tq, const Matrix& z_ss) {
  ad::Tape tape;
  return solvers::log_similarity(tape.constant(z_tq), tape.constant(z_ss)).value().array().exp();
}

NormalizeResult normalize_similarity(const Matrix& a, const SinkhornOptions& options) {
  if (!((a.array() > 0.0).all())) throw SolverError("normalize: entries must be positive");
  ad::Tape tape;
  const auto out = solvers::normalize_log_similarity(tape.constant(a.array().log().matrix()), options);
  return {out.a.value(), out.iters};
}

AdapterSolution fit_domain_adapter(const Matrix& z_tq, const Matrix& z_ss, const Matrix& a_norm,
                                   double gamma_p, SolveForm form) {
  require_positive(gamma_p, "gamma_p");
  ad::Tape tape;
  const double g = std::max(gamma_p, kGammaFloor);
  ad::Var theta = solvers::domain_adapter(tape.constant(z_tq), tape.constant(z_ss), tape.constant(a_norm),
                                          tape.constant(Matrix::Constant(1, 1, g)), form);
  AdapterSolution out;
  out.theta = theta.value();
  out.a_norm = a_norm;
  out.d_a = a_norm.rowwise().sum();
  out.gamma_used = g;
  return out;
}

Matrix predict_target(const Matrix& z_tq, const AdapterSolution& adapter, const ClassifierSolution& clf) {
  if (z_tq.cols() != adapter.theta.rows() || adapter.theta.cols() != clf.theta.rows()) {
    throw SolverError("predict_target: dimension mismatch");
  }
  return (z_tq * adapter.theta) * clf.theta;
}

Matrix predict_source(const Matrix& z_sq, const ClassifierSolution& clf) {
  if (z_sq.cols() != clf.theta.rows()) throw SolverError("predict_source: dimension mismatch");
  return z_sq * clf.theta;
}

}  // namespace e2mpl
