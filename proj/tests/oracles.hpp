#pragma once

// Independent reference implementations used only by the tests. They favour
// the most literal formula over speed and never call into the code they check.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

namespace oracle {

inline double log_normal_pdf(const Eigen::VectorXd& x, const Eigen::VectorXd& mu, const Eigen::MatrixXd& S) {
  const auto d = static_cast<double>(x.size());
  const Eigen::VectorXd r = x - mu;
  const double quad = r.dot(S.inverse() * r);
  return -0.5 * (d * std::log(2.0 * std::numbers::pi) + std::log(S.determinant()) + quad);
}

/// log sum_i w_i N(x; mu_i, S_i) by direct summation in long double.
inline double mixture_log_density(const Eigen::VectorXd& x, const std::vector<double>& w,
                                  const std::vector<Eigen::VectorXd>& mu, const std::vector<Eigen::MatrixXd>& S) {
  long double acc = 0.0L;
  for (std::size_t i = 0; i < w.size(); ++i) acc += w[i] * std::exp(static_cast<long double>(log_normal_pdf(x, mu[i], S[i])));
  return static_cast<double>(std::log(acc));
}

/// Brute-force double loop a^T M b.
inline double bilinear(const Eigen::VectorXd& a, const Eigen::MatrixXd& M, const Eigen::VectorXd& b) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    for (Eigen::Index j = 0; j < b.size(); ++j) s += a[i] * M(i, j) * b[j];
  }
  return s;
}

/// min |v|_G subject to <v, s>_G = 0 and <w, v>_G = gain, via the KKT system
/// of the equality-constrained least squares problem.
inline Eigen::VectorXd constrained_min_energy(const Eigen::VectorXd& w, const Eigen::VectorXd& s, const Eigen::MatrixXd& G,
                                              double gain) {
  const auto d = w.size();
  Eigen::MatrixXd A(2, d);
  A.row(0) = (G * s).transpose();
  A.row(1) = (G * w).transpose();
  Eigen::MatrixXd K = Eigen::MatrixXd::Zero(d + 2, d + 2);
  K.topLeftCorner(d, d) = 2.0 * G;
  K.topRightCorner(d, 2) = A.transpose();
  K.bottomLeftCorner(2, d) = A;
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(d + 2);
  rhs[d + 1] = gain;
  return K.fullPivLu().solve(rhs).head(d);
}

/// Random symmetric positive definite matrix with condition number bounded by ~ (1 + spread)^2.
inline Eigen::MatrixXd random_spd(std::mt19937_64& gen, int d, double spread = 1.0) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd A(d, d);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) A(i, j) = n(gen);
  }
  const Eigen::MatrixXd Q = A.householderQr().householderQ();
  std::uniform_real_distribution<double> u(1.0, 1.0 + spread);
  Eigen::VectorXd ev(d);
  for (int i = 0; i < d; ++i) ev[i] = u(gen);
  Eigen::MatrixXd S = Q * ev.asDiagonal() * Q.transpose();
  return 0.5 * (S + S.transpose());
}

inline Eigen::VectorXd random_vector(std::mt19937_64& gen, int d, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Eigen::VectorXd v(d);
  for (int i = 0; i < d; ++i) v[i] = n(gen);
  return v;
}

/// Minimum over all permutations of the mean squared matched distance.
inline double brute_force_w2_squared(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  std::vector<int> perm(static_cast<std::size_t>(a.rows()));
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
  double best = 1e300;
  do {
    double c = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) c += (a.row(i) - b.row(perm[static_cast<std::size_t>(i)])).squaredNorm();
    best = std::min(best, c / static_cast<double>(a.rows()));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

/// Symmetric square root through an independent route (Denman-Beavers iteration).
inline Eigen::MatrixXd sqrtm_denman_beavers(const Eigen::MatrixXd& A) {
  Eigen::MatrixXd Y = A, Z = Eigen::MatrixXd::Identity(A.rows(), A.cols());
  for (int i = 0; i < 100; ++i) {
    const Eigen::MatrixXd Yn = 0.5 * (Y + Z.inverse());
    const Eigen::MatrixXd Zn = 0.5 * (Z + Y.inverse());
    Y = Yn;
    Z = Zn;
  }
  return Y;
}

/// KL(N(m1,S1) || N(m0,S0)) straight from the textbook formula.
inline double gaussian_kl(const Eigen::VectorXd& m1, const Eigen::MatrixXd& S1, const Eigen::VectorXd& m0, const Eigen::MatrixXd& S0) {
  const auto d = static_cast<double>(m1.size());
  const Eigen::MatrixXd S0i = S0.inverse();
  const Eigen::VectorXd dm = m0 - m1;
  return 0.5 * ((S0i * S1).trace() + dm.dot(S0i * dm) - d + std::log(S0.determinant() / S1.determinant()));
}

/// Composite Simpson rule on [a, b] with n (even) panels.
template <class F>
double simpson(F&& f, double a, double b, int n) {
  const double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * f(a + i * h);
  return s * h / 3.0;
}

}  // namespace oracle
