#pragma once

#include "dpaclab/core.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace dpaclab {

inline constexpr double kEigenFloor = 1e-12;

struct Gaussian {
  StateVector mean;
  Matrix covariance;
};

/// Symmetric eigendecomposition with eigenvalues floored at kEigenFloor.
struct SymmetricEigen {
  Matrix vectors;
  StateVector values;

  explicit SymmetricEigen(const Matrix& A) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (A + A.transpose()));
    if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
    vectors = es.eigenvectors();
    values = es.eigenvalues().cwiseMax(kEigenFloor);
  }

  Matrix sqrt() const { return vectors * values.cwiseSqrt().asDiagonal() * vectors.transpose(); }
  Matrix inverse() const { return vectors * values.cwiseInverse().asDiagonal() * vectors.transpose(); }
  double log_det() const { return values.array().log().sum(); }
};

inline Matrix sqrtm_spd(const Matrix& A) { return SymmetricEigen(A).sqrt(); }

// ---------------------------------------------------------------------------
// Gaussian mixture
// ---------------------------------------------------------------------------

/// Analytic mixture sum_i w_i N(mu_i, Sigma_i). Every query accepts an extra
/// isotropic variance v so the same object answers for the diffused marginal
/// sum_i w_i N(mu_i, Sigma_i + v I).
class GaussianMixture {
 public:
  GaussianMixture(std::vector<double> weights, std::vector<StateVector> means, std::vector<Matrix> covariances)
      : weights_(std::move(weights)), means_(std::move(means)), covs_(std::move(covariances)) {
    if (weights_.empty()) throw std::invalid_argument("GaussianMixture: need at least one component");
    if (weights_.size() != means_.size() || weights_.size() != covs_.size()) {
      throw std::invalid_argument("GaussianMixture: weights, means and covariances differ in length");
    }
    double total = 0.0;
    for (double w : weights_) {
      if (!(w > 0.0)) throw std::invalid_argument("GaussianMixture: weights must be positive");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("GaussianMixture: weights must sum to 1");
    d_ = means_.front().size();
    if (d_ < 1) throw std::invalid_argument("GaussianMixture: dimension must be >= 1");
    for (std::size_t i = 0; i < means_.size(); ++i) {
      if (means_[i].size() != d_ || covs_[i].rows() != d_ || covs_[i].cols() != d_) {
        throw std::invalid_argument("GaussianMixture: component " + std::to_string(i) + " has wrong dimension");
      }
      if (!means_[i].allFinite() || !covs_[i].allFinite()) {
        throw std::invalid_argument("GaussianMixture: component " + std::to_string(i) + " is not finite");
      }
      if ((covs_[i] - covs_[i].transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, covs_[i].cwiseAbs().maxCoeff())) {
        throw std::invalid_argument("GaussianMixture: covariance " + std::to_string(i) + " is not symmetric");
      }
      Eigen::SelfAdjointEigenSolver<Matrix> es(covs_[i]);
      if (!(es.eigenvalues().minCoeff() > kEigenFloor)) {
        throw std::invalid_argument("GaussianMixture: covariance " + std::to_string(i) + " is not positive definite");
      }
      basis_.push_back(es.eigenvectors());
      spectra_.push_back(es.eigenvalues());
      log_w_.push_back(std::log(weights_[i]));
    }
  }

  /// Equal-weight mixture of isotropic components.
  static GaussianMixture isotropic(const std::vector<StateVector>& means, double variance) {
    const auto k = means.size();
    const Eigen::Index d = means.at(0).size();
    return GaussianMixture(std::vector<double>(k, 1.0 / static_cast<double>(k)), means,
                           std::vector<Matrix>(k, variance * Matrix::Identity(d, d)));
  }

  Eigen::Index dimension() const { return d_; }
  std::size_t components() const { return weights_.size(); }
  const std::vector<double>& weights() const { return weights_; }
  const std::vector<StateVector>& means() const { return means_; }
  const std::vector<Matrix>& covariances() const { return covs_; }

  double log_density(const StateVector& x, double extra_var = 0.0) const {
    check_input(x, "gmm_log_density");
    const auto terms = component_terms(x, extra_var, nullptr);
    return log_sum_exp(terms);
  }

  StateVector score(const StateVector& x, double extra_var = 0.0) const {
    check_input(x, "gmm_score");
    std::vector<StateVector> grads;
    auto terms = component_terms(x, extra_var, &grads);
    const double lse = log_sum_exp(terms);
    StateVector s = StateVector::Zero(d_);
    for (std::size_t i = 0; i < terms.size(); ++i) s += std::exp(terms[i] - lse) * grads[i];
    return s;
  }

  /// Mean and covariance of the mixture (moment matched), with extra variance.
  Gaussian moments(double extra_var = 0.0) const {
    StateVector m = StateVector::Zero(d_);
    for (std::size_t i = 0; i < weights_.size(); ++i) m += weights_[i] * means_[i];
    Matrix C = Matrix::Zero(d_, d_);
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      const StateVector dm = means_[i] - m;
      C += weights_[i] * (covs_[i] + dm * dm.transpose());
    }
    C += extra_var * Matrix::Identity(d_, d_);
    return {m, C};
  }

  StateVector sample(RngStream& rng, double extra_var = 0.0) const {
    const double u = rng.uniform();
    std::size_t comp = weights_.size() - 1;
    double acc = 0.0;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      acc += weights_[i];
      if (u < acc) {
        comp = i;
        break;
      }
    }
    StateVector z = rng.normal_vector(d_);
    const StateVector scale = (spectra_[comp].array() + extra_var).sqrt().matrix();
    return means_[comp] + basis_[comp] * scale.cwiseProduct(z);
  }

 private:
  void check_input(const StateVector& x, const char* what) const {
    if (x.size() != d_) {
      throw std::invalid_argument(std::string(what) + ": dimension mismatch (" + std::to_string(x.size()) +
                                  " vs " + std::to_string(d_) + ")");
    }
    if (!x.allFinite()) throw NumericError(std::string(what) + ": non-finite input");
  }

  std::vector<double> component_terms(const StateVector& x, double extra_var, std::vector<StateVector>* grads) const {
    std::vector<double> terms(weights_.size());
    if (grads) grads->resize(weights_.size());
    const double log2pi = std::log(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      const StateVector lam = (spectra_[i].array() + extra_var).matrix();
      if (!(lam.minCoeff() > kEigenFloor)) throw NumericError("GaussianMixture: singular covariance");
      const StateVector z = basis_[i].transpose() * (x - means_[i]);
      const StateVector zl = z.cwiseQuotient(lam);
      terms[i] = log_w_[i] - 0.5 * (z.dot(zl) + lam.array().log().sum() + static_cast<double>(d_) * log2pi);
      if (grads) (*grads)[i] = -(basis_[i] * zl);
    }
    return terms;
  }

  static double log_sum_exp(const std::vector<double>& terms) {
    double m = -std::numeric_limits<double>::infinity();
    for (double t : terms) m = std::max(m, t);
    if (!std::isfinite(m)) throw NumericError("gmm: log density underflow");
    double s = 0.0;
    for (double t : terms) s += std::exp(t - m);
    return m + std::log(s);
  }

  std::vector<double> weights_;
  std::vector<StateVector> means_;
  std::vector<Matrix> covs_;
  std::vector<Matrix> basis_;
  std::vector<StateVector> spectra_;
  std::vector<double> log_w_;
  Eigen::Index d_ = 0;
};

inline double gmm_log_density(const StateVector& x, const GaussianMixture& m) { return m.log_density(x); }
inline StateVector gmm_score(const StateVector& x, const GaussianMixture& m) { return m.score(x); }

/// Two equal isotropic components at (+-1.5, 0) with unit covariance.
inline GaussianMixture default_mixture_2d() {
  StateVector a(2), b(2);
  a << -1.5, 0.0;
  b << 1.5, 0.0;
  return GaussianMixture::isotropic({a, b}, 1.0);
}

// ---------------------------------------------------------------------------
// Ornstein-Uhlenbeck test bed
// ---------------------------------------------------------------------------

/// dX = (-a X + g u) dt + g dW, X_0 ~ N(m_0, Sigma_0).
struct OuProcess {
  double rate = 1.0;
  double diffusion = 1.0;
  Gaussian initial;

  void validate() const {
    if (!(diffusion > 0.0)) throw std::invalid_argument("OuProcess: diffusion must be > 0");
    if (!std::isfinite(rate)) throw std::invalid_argument("OuProcess: rate must be finite");
    if (initial.mean.size() < 1 || initial.covariance.rows() != initial.mean.size() ||
        initial.covariance.cols() != initial.mean.size()) {
      throw std::invalid_argument("OuProcess: initial Gaussian has inconsistent dimensions");
    }
  }
  Eigen::Index dimension() const { return initial.mean.size(); }
};

/// Draw from N(mean, cov); cov may be singular (eigenvalues clamped at 0).
inline StateVector sample_gaussian(const Gaussian& g, RngStream& rng) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (g.covariance + g.covariance.transpose()));
  const StateVector z = rng.normal_vector(g.mean.size());
  return g.mean + es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().cwiseProduct(z);
}

inline constexpr double kSmallRate = 1e-10;

inline Gaussian ou_marginal(double t, const OuProcess& p) {
  p.validate();
  if (t < 0.0) throw std::invalid_argument("ou_marginal: t must be >= 0");
  const auto d = p.dimension();
  const double a = p.rate;
  const double g2 = p.diffusion * p.diffusion;
  const double decay = std::exp(-a * t);
  const double noise = std::abs(a) < kSmallRate ? g2 * t : g2 / (2.0 * a) * (1.0 - std::exp(-2.0 * a * t));
  return {decay * p.initial.mean, decay * decay * p.initial.covariance + noise * Matrix::Identity(d, d)};
}

/// Mean shift produced by a constant control u entering the drift as +g u.
inline StateVector ou_control_shift(double t, const OuProcess& p, const StateVector& u) {
  const double a = p.rate;
  const double factor = std::abs(a) < kSmallRate ? t : (1.0 - std::exp(-a * t)) / a;
  return p.diffusion * factor * u;
}

inline Gaussian ou_controlled_marginal(double t, const OuProcess& p, const StateVector& u) {
  require_same_dim(u, p.initial.mean, "ou_controlled_marginal");
  Gaussian out = ou_marginal(t, p);
  out.mean += ou_control_shift(t, p, u);
  return out;
}

/// Exact law of the Euler-Maruyama chain for the OU bed with constant
/// control: mean' = (1 - a dt) mean + g u dt, cov' = (1 - a dt)^2 cov + g^2 dt I.
inline Gaussian ou_em_marginal(const TimeGrid& grid, const OuProcess& p, const StateVector& u) {
  p.validate();
  require_same_dim(u, p.initial.mean, "ou_em_marginal");
  const auto d = p.dimension();
  Gaussian out = p.initial;
  const double g = p.diffusion;
  for (int k = 1; k <= grid.steps(); ++k) {
    const double dt = grid.dt(k);
    const double c = 1.0 - p.rate * dt;
    out.mean = c * out.mean + g * dt * u;
    out.covariance = c * c * out.covariance + g * g * dt * Matrix::Identity(d, d);
  }
  return out;
}

}  // namespace dpaclab
