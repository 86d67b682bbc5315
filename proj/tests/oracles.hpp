#pragma once

// Reference implementations used only by tests. Written with plain loops and
// no calls into the library, so agreement is evidence rather than tautology.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "e2mpl/numerics.hpp"
#include "e2mpl/rng.hpp"

namespace oracle {

using e2mpl::Matrix;

inline Matrix random_matrix(e2mpl::Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline Matrix random_spd(e2mpl::Rng& rng, Eigen::Index n) {
  const Matrix a = random_matrix(rng, n, n);
  Matrix m = a * a.transpose();
  for (Eigen::Index i = 0; i < n; ++i) m(i, i) += 0.5;
  return m;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c = Matrix::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index k = 0; k < a.cols(); ++k)
      for (Eigen::Index j = 0; j < b.cols(); ++j) c(i, j) += a(i, k) * b(k, j);
  return c;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// Gauss-Jordan with partial pivoting.
inline Matrix inverse(Matrix a) {
  const Eigen::Index n = a.rows();
  Matrix inv = Matrix::Identity(n, n);
  for (Eigen::Index c = 0; c < n; ++c) {
    Eigen::Index p = c;
    for (Eigen::Index r = c + 1; r < n; ++r)
      if (std::abs(a(r, c)) > std::abs(a(p, c))) p = r;
    a.row(c).swap(a.row(p));
    inv.row(c).swap(inv.row(p));
    const double d = a(c, c);
    for (Eigen::Index j = 0; j < n; ++j) {
      a(c, j) /= d;
      inv(c, j) /= d;
    }
    for (Eigen::Index r = 0; r < n; ++r) {
      if (r == c) continue;
      const double f = a(r, c);
      if (f == 0.0) continue;
      for (Eigen::Index j = 0; j < n; ++j) {
        a(r, j) -= f * a(c, j);
        inv(r, j) -= f * inv(c, j);
      }
    }
  }
  return inv;
}

inline Matrix add_ridge(Matrix m, double ridge) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, i) += ridge;
  return m;
}

// Primal ridge: (Z^T Z + g I)^{-1} Z^T Y.
inline Matrix ridge_primal(const Matrix& z, const Matrix& y, double g) {
  const Matrix zt = transpose(z);
  return matmul(inverse(add_ridge(matmul(zt, z), g)), matmul(zt, y));
}

// Primal adapter: (Z_t^T D Z_t + g I)^{-1} Z_t^T A Z_s.
inline Matrix adapter_primal(const Matrix& zt, const Matrix& zs, const Matrix& a, double g) {
  Matrix dzt = zt;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    double d = 0.0;
    for (Eigen::Index k = 0; k < a.cols(); ++k) d += a(i, k);
    dzt.row(i) *= d;
  }
  const Matrix ztt = transpose(zt);
  return matmul(inverse(add_ridge(matmul(ztt, dzt), g)), matmul(ztt, matmul(a, zs)));
}

// Alternating scaling in the linear domain.
inline Matrix sinkhorn(Matrix a, int iters) {
  const double col_target = static_cast<double>(a.rows()) / static_cast<double>(a.cols());
  for (int it = 0; it < iters; ++it) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      double s = 0.0;
      for (Eigen::Index k = 0; k < a.cols(); ++k) s += a(i, k);
      for (Eigen::Index k = 0; k < a.cols(); ++k) a(i, k) /= s;
    }
    for (Eigen::Index k = 0; k < a.cols(); ++k) {
      double s = 0.0;
      for (Eigen::Index i = 0; i < a.rows(); ++i) s += a(i, k);
      for (Eigen::Index i = 0; i < a.rows(); ++i) a(i, k) *= col_target / s;
    }
  }
  return a;
}

inline double max_abs(const Matrix& m) {
  double v = 0.0;
  for (Eigen::Index i = 0; i < m.size(); ++i) v = std::max(v, std::abs(m.data()[i]));
  return v;
}

inline double rel_err(const Matrix& a, const Matrix& b) {
  return max_abs(a - b) / std::max(max_abs(b), 1e-300);
}

// Trace scatter, unweighted: S_w = sum ||x - mu_c||^2, S_b = sum n_c ||mu_c - mu||^2.
struct Scatter {
  double within = 0.0;
  double between = 0.0;
};

inline Scatter scatter(const std::vector<std::vector<double>>& x, const std::vector<std::int64_t>& labels) {
  const std::size_t d = x.front().size();
  std::vector<double> grand(d, 0.0);
  for (const auto& r : x)
    for (std::size_t j = 0; j < d; ++j) grand[j] += r[j] / static_cast<double>(x.size());
  std::vector<std::int64_t> classes = labels;
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  Scatter s;
  for (const auto c : classes) {
    std::vector<double> mu(d, 0.0);
    int n = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (labels[i] == c) {
        ++n;
        for (std::size_t j = 0; j < d; ++j) mu[j] += x[i][j];
      }
    for (auto& v : mu) v /= n;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (labels[i] == c)
        for (std::size_t j = 0; j < d; ++j) s.within += (x[i][j] - mu[j]) * (x[i][j] - mu[j]);
    for (std::size_t j = 0; j < d; ++j) s.between += n * (mu[j] - grand[j]) * (mu[j] - grand[j]);
  }
  return s;
}

// Percentile by 1-based rank h = 1 + (n-1)p, interpolating between the
// neighbouring order statistics.
inline double percentile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double h = 1.0 + (static_cast<double>(v.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = static_cast<std::size_t>(std::ceil(h));
  return v[lo - 1] + (h - static_cast<double>(lo)) * (v[hi - 1] - v[lo - 1]);
}

// Textbook Adam on a scalar.
struct Adam {
  double lr, b1, b2, eps;
  double m = 0.0, v = 0.0;
  int t = 0;
  double step(double x, double g) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    return x - lr * mh / (std::sqrt(vh) + eps);
  }
};

}  // namespace oracle
