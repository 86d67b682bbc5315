#pragma once

// Measurements shared by the unit tests and the acceptance runner. Each
// function returns the raw numbers; callers decide the thresholds.

#include <chrono>
#include <cmath>

#include "e2mpl/objective.hpp"
#include "e2mpl/solvers.hpp"
#include "oracles.hpp"

namespace criteria {

using namespace e2mpl;

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

inline double log_uniform(Rng& rng, double lo, double hi) {
  return std::exp(std::uniform_real_distribution<double>(std::log(lo), std::log(hi))(rng));
}

inline Matrix random_one_hot(Rng& rng, int rows, int classes) {
  Matrix y = Matrix::Zero(rows, classes);
  for (int i = 0; i < rows; ++i) y(i, uniform_int(rng, 0, classes - 1)) = 1.0;
  return y;
}

inline Matrix random_plan(Rng& rng, int q, int n) {
  Matrix a(q, n);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = u(rng);
  return normalize_similarity(a).a;
}

struct Woodbury {
  double classifier_rel = 0.0;
  double adapter_rel = 0.0;
  double seconds = 0.0;
};

// Dual vs primal on random sizes (n <= 25, m <= 128 and q, n <= 25).
inline Woodbury woodbury(std::uint64_t seed, int instances) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(seed);
  Woodbury w;
  for (int t = 0; t < instances; ++t) {
    const int n = uniform_int(rng, 1, 25);
    const int m = uniform_int(rng, 1, 128);
    const int classes = uniform_int(rng, 1, 5);
    const Matrix z = oracle::random_matrix(rng, n, m);
    const Matrix y = random_one_hot(rng, n, classes);
    const double g = log_uniform(rng, 1e-2, 1e2);
    const Matrix dual = fit_ridge_classifier(z, y, g, SolveForm::Dual).theta;
    const Matrix primal = fit_ridge_classifier(z, y, g, SolveForm::Primal).theta;
    w.classifier_rel = std::max(w.classifier_rel, oracle::rel_err(dual, primal));
  }
  for (int t = 0; t < instances; ++t) {
    const int q = uniform_int(rng, 1, 25);
    const int n = uniform_int(rng, 1, 25);
    const int m = uniform_int(rng, 1, 128);
    const Matrix zt = oracle::random_matrix(rng, q, m);
    const Matrix zs = oracle::random_matrix(rng, n, m);
    const Matrix a = random_plan(rng, q, n);
    const double g = log_uniform(rng, 1e-2, 1e3);
    const Matrix dual = fit_domain_adapter(zt, zs, a, g, SolveForm::Dual).theta;
    const Matrix primal = fit_domain_adapter(zt, zs, a, g, SolveForm::Primal).theta;
    w.adapter_rel = std::max(w.adapter_rel, oracle::rel_err(dual, primal));
  }
  w.seconds = seconds_since(t0);
  return w;
}

// Gradient of ||Z theta - Y||^2 + g ||theta||^2, by loops.
inline Matrix ridge_objective_grad(const Matrix& z, const Matrix& y, const Matrix& theta, double g) {
  const Matrix r = oracle::matmul(z, theta) - y;
  return 2.0 * (oracle::matmul(oracle::transpose(z), r) + g * theta);
}

// Gradient of sum_ik A_ik ||z_t,i theta - z_s,k||^2 + g ||theta||^2, by loops.
inline Matrix adapter_objective_grad(const Matrix& zt, const Matrix& zs, const Matrix& a, const Matrix& theta,
                                     double g) {
  Matrix grad = 2.0 * g * theta;
  const Matrix proj = oracle::matmul(zt, theta);
  for (Eigen::Index i = 0; i < zt.rows(); ++i) {
    for (Eigen::Index k = 0; k < zs.rows(); ++k) {
      const Matrix diff = proj.row(i) - zs.row(k);
      grad += 2.0 * a(i, k) * oracle::matmul(oracle::transpose(Matrix(zt.row(i))), diff);
    }
  }
  return grad;
}

// Plain gradient descent from zero with step 1/L.
template <typename Grad>
Matrix gradient_descent(Grad grad, Eigen::Index rows, Eigen::Index cols, double lipschitz, int iters) {
  Matrix theta = Matrix::Zero(rows, cols);
  for (int it = 0; it < iters; ++it) theta -= grad(theta) / lipschitz;
  return theta;
}

struct Optimality {
  double classifier_grad = 0.0;
  double adapter_grad = 0.0;
  double classifier_gd = 0.0;
  double adapter_gd = 0.0;
  double seconds = 0.0;
};

inline double spectral_bound(const Matrix& m) {
  // Frobenius norm bounds the largest eigenvalue of a PSD matrix.
  return m.norm();
}

inline Optimality optimality(std::uint64_t seed, int gd_instances, int grad_instances) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(seed);
  Optimality o;
  for (int t = 0; t < grad_instances; ++t) {
    const int n = uniform_int(rng, 2, 25);
    const int m = uniform_int(rng, 2, 64);
    const Matrix z = oracle::random_matrix(rng, n, m);
    const Matrix y = random_one_hot(rng, n, 5);
    const double g = log_uniform(rng, 1e-1, 1e1);
    const auto clf = fit_ridge_classifier(z, y, g);
    o.classifier_grad = std::max(o.classifier_grad, ridge_objective_grad(z, y, clf.theta, g).norm());

    const int q = uniform_int(rng, 2, 25);
    const Matrix zt = oracle::random_matrix(rng, q, m);
    const Matrix a = random_plan(rng, q, n);
    const double gp = log_uniform(rng, 1e-1, 1e3);
    const auto ad = fit_domain_adapter(zt, z, a, gp);
    o.adapter_grad = std::max(o.adapter_grad, adapter_objective_grad(zt, z, a, ad.theta, gp).norm());
  }
  for (int t = 0; t < gd_instances; ++t) {
    const int n = uniform_int(rng, 2, 4);
    const int m = uniform_int(rng, 2, 4);
    const int q = uniform_int(rng, 2, 4);
    const Matrix z = oracle::random_matrix(rng, n, m);
    const Matrix y = random_one_hot(rng, n, 3);
    const double g = 0.5;
    const double lc = 2.0 * (spectral_bound(oracle::matmul(oracle::transpose(z), z)) + g);
    const Matrix gd = gradient_descent([&](const Matrix& th) { return ridge_objective_grad(z, y, th, g); }, m, 3, lc,
                                       20000);
    o.classifier_gd = std::max(o.classifier_gd, oracle::max_abs(gd - fit_ridge_classifier(z, y, g).theta));

    const Matrix zt = oracle::random_matrix(rng, q, m);
    const Matrix a = random_plan(rng, q, n);
    Matrix dz = zt;
    for (Eigen::Index i = 0; i < q; ++i) dz.row(i) *= a.row(i).sum();
    const double la = 2.0 * (spectral_bound(oracle::matmul(oracle::transpose(zt), dz)) + g);
    const Matrix gda = gradient_descent([&](const Matrix& th) { return adapter_objective_grad(zt, z, a, th, g); }, m,
                                        m, la, 20000);
    o.adapter_gd = std::max(o.adapter_gd, oracle::max_abs(gda - fit_domain_adapter(zt, z, a, g).theta));
  }
  o.seconds = seconds_since(t0);
  return o;
}

struct Normalization {
  double marginal = 0.0;     // worst |row sum - 1| or |col sum - q/n|
  double oracle_gap = 0.0;   // worst difference to the long-run oracle
  int max_iters_used = 0;
};

inline Normalization normalization(std::uint64_t seed, int instances, double tol) {
  Rng rng(seed);
  Normalization out;
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int t = 0; t < instances; ++t) {
    const int q = uniform_int(rng, 1, 30);
    const int n = uniform_int(rng, 1, 30);
    Matrix a(q, n);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = u(rng);
    SinkhornOptions opt;
    opt.max_iters = 100;
    opt.tol = tol;
    const auto r = normalize_similarity(a, opt);
    const double col_target = static_cast<double>(q) / n;
    out.marginal = std::max(out.marginal, (r.a.rowwise().sum().array() - 1.0).abs().maxCoeff());
    out.marginal = std::max(out.marginal, (r.a.colwise().sum().array() - col_target).abs().maxCoeff());
    out.oracle_gap = std::max(out.oracle_gap, oracle::max_abs(r.a - oracle::sinkhorn(a, 1000)));
    out.max_iters_used = std::max(out.max_iters_used, r.iters);
  }
  return out;
}

// Tiny configuration used by the finite-difference checks.
inline PromptNetConfig fd_model() {
  PromptNetConfig c;
  c.raw_dim = 8;
  c.token_dim = 8;
  c.backbone_hidden = 8;
  c.backbone_out = 8;
  c.head_out = 8;
  c.gamma_w_init = 0.5;
  c.gamma_p_init = 0.5;
  return c;
}

struct FiniteDifference {
  double max_rel = 0.0;
  int episodes_with_pairs = 0;
  double seconds = 0.0;
};

// Analytic outer gradient vs central differences of the total, every entry of
// every trainable tensor, with the discrete choices of the forward pass pinned.
inline FiniteDifference outer_fd(int episodes, bool soft, double h = 1e-5) {
  const auto t0 = std::chrono::steady_clock::now();
  const PromptNetConfig cfg = fd_model();
  SyntheticSpec ss;
  ss.num_classes = 6;
  ss.per_class = 8;
  ss.raw_dim = 8;
  ss.shift.rotation_angle = 0.3;
  ss.shift.translation = 0.5;
  const auto dom = synth_domains(ss, 3);
  const std::vector<std::int64_t> classes{0, 1, 2, 3, 4, 5};
  const EpisodeSpec spec{3, 2, 2};
  ObjectiveOptions opt;
  opt.lambda_d = 0.5;
  opt.lambda_f = 0.5;
  opt.soft_pseudo_labels = soft;
  const auto backbone = FrozenBackbone::create(cfg, 5);

  FiniteDifference out;
  for (int t = 0; t < episodes; ++t) {
    Rng rng = make_rng(100, "fd", static_cast<std::uint64_t>(t));
    const Episode ep = sample_episode(dom.source, dom.target, classes, spec, rng);
    PromptParams params = init_params(cfg, 11 + static_cast<std::uint64_t>(t));
    const auto g = outer_gradient(ep, params, backbone, cfg, opt);
    if (!g.plan.assignment.pairs.empty()) ++out.episodes_with_pairs;
    std::vector<Matrix*> ps;
    params.for_each([&](const char*, Matrix& m) { ps.push_back(&m); });
    std::vector<const Matrix*> gs;
    g.grads.for_each([&](const char*, const Matrix& m) { gs.push_back(&m); });
    for (std::size_t p = 0; p < ps.size(); ++p) {
      for (Eigen::Index i = 0; i < ps[p]->size(); ++i) {
        double& x = ps[p]->data()[i];
        const double x0 = x;
        x = x0 + h;
        const double fp = episode_loss(ep, params, backbone, cfg, opt, &g.plan).total;
        x = x0 - h;
        const double fm = episode_loss(ep, params, backbone, cfg, opt, &g.plan).total;
        x = x0;
        const double num = (fp - fm) / (2 * h);
        const double a = gs[p]->data()[i];
        out.max_rel = std::max(out.max_rel, std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-6}));
      }
    }
  }
  out.seconds = seconds_since(t0);
  return out;
}

}  // namespace criteria
