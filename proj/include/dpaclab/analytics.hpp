#pragma once

#include "dpaclab/assignment.hpp"
#include "dpaclab/core.hpp"
#include "dpaclab/guidance.hpp"
#include "dpaclab/sampler.hpp"
#include "dpaclab/score.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dpaclab {

struct Series {
  std::vector<double> x;
  std::vector<double> y;
  void push(double a, double b) {
    x.push_back(a);
    y.push_back(b);
  }
  std::size_t size() const { return x.size(); }
};

inline double sample_sd(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double m = compensated_mean(xs);
  CompensatedSum s;
  for (double x : xs) s.add((x - m) * (x - m));
  return std::sqrt(s.value() / static_cast<double>(xs.size() - 1));
}

// ---------------------------------------------------------------------------
// Path energies
// ---------------------------------------------------------------------------

struct PathKl {
  double value = 0.0;            ///< mean of 1/2 sum |u|^2 dt
  double standard_error = 0.0;
  double log_ratio = 0.0;        ///< mean Girsanov log-likelihood ratio along controlled paths
  double log_ratio_se = 0.0;
  Series cumulative;             ///< (time, cumulative energy)
  Series cumulative_log_ratio;   ///< (time, cumulative mean log-likelihood ratio)
};

inline PathKl girsanov_path_kl(const CoupledEnsemble& ens) {
  if (ens.estimator != EnergyEstimator::Girsanov) {
    throw std::invalid_argument(
        "girsanov_path_kl: ensemble comes from Denoise-then-Perturb sampling; report CPE instead");
  }
  PathKl out;
  std::vector<double> e(ens.totals.size()), lr(ens.totals.size());
  for (std::size_t i = 0; i < ens.totals.size(); ++i) {
    e[i] = ens.totals[i].girsanov;
    lr[i] = ens.totals[i].log_ratio;
  }
  out.value = compensated_mean(e);
  out.standard_error = sample_sd(e) / std::sqrt(static_cast<double>(e.size()));
  out.log_ratio = compensated_mean(lr);
  out.log_ratio_se = sample_sd(lr) / std::sqrt(static_cast<double>(lr.size()));
  CompensatedSum cum, cum_lr;
  const double t0 = ens.steps.empty() ? 0.0 : ens.steps.front().t_from;
  out.cumulative.push(t0, 0.0);
  out.cumulative_log_ratio.push(t0, 0.0);
  for (const auto& s : ens.steps) {
    cum.add(s.girsanov);
    cum_lr.add(s.log_ratio);
    out.cumulative.push(s.t_to, cum.value());
    out.cumulative_log_ratio.push(s.t_to, cum_lr.value());
  }
  return out;
}

/// 1/2 sum_k |eta_k u_k|^2 for one explicit sequence.
inline double cpe(std::span<const double> etas, std::span<const StateVector> us) {
  if (etas.size() != us.size()) throw std::invalid_argument("cpe: eta and control sequences differ in length");
  CompensatedSum s;
  for (std::size_t k = 0; k < etas.size(); ++k) s.add(0.5 * etas[k] * etas[k] * us[k].squaredNorm());
  return s.value();
}

struct CpeSummary {
  double kind = 0.0;      ///< CPE of the control the run actually used
  double raw = 0.0;       ///< CPE of the raw guidance vector on the same steps
  double parallel = 0.0;
  double perpendicular = 0.0;
  double sin2_weighted = 0.0;  ///< sum eta^2 |Pi_perp w|_G^2 / sum eta^2 |w|_G^2
};

/// Ensemble CPE from per-trajectory totals, accumulated in trajectory order.
inline CpeSummary cpe(const CoupledEnsemble& ens) {
  CpeSummary out;
  CompensatedSum k, r, p, q, gr, gq;
  for (const auto& t : ens.totals) {
    k.add(t.cpe_kind);
    r.add(t.cpe_raw);
    p.add(t.cpe_par);
    q.add(t.cpe_perp);
    gr.add(t.eta2_raw_g);
    gq.add(t.eta2_perp_g);
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, ens.totals.size()));
  out.kind = k.value() / n;
  out.raw = r.value() / n;
  out.parallel = p.value() / n;
  out.perpendicular = q.value() / n;
  out.sin2_weighted = gr.value() > 0.0 ? gq.value() / gr.value() : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian summaries and distances
// ---------------------------------------------------------------------------

struct GaussianSummary {
  StateVector mean;
  Matrix covariance;
  std::size_t n = 0;
};

inline GaussianSummary summary_of(const Gaussian& g, std::size_t n = 0) { return {g.mean, g.covariance, n}; }

inline GaussianSummary fit_gaussian(const SampleSet& x) {
  const auto n = x.rows();
  const auto d = x.cols();
  if (n < d + 1) {
    throw std::invalid_argument("fit_gaussian: need at least d+1 samples (" + std::to_string(n) + " < " +
                                std::to_string(d + 1) + ")");
  }
  GaussianSummary s;
  s.n = static_cast<std::size_t>(n);
  s.mean = StateVector::Zero(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    CompensatedSum c;
    for (Eigen::Index i = 0; i < n; ++i) c.add(x(i, j));
    s.mean[j] = c.value() / static_cast<double>(n);
  }
  s.covariance.resize(d, d);
  for (Eigen::Index a = 0; a < d; ++a) {
    for (Eigen::Index b = a; b < d; ++b) {
      CompensatedSum c;
      for (Eigen::Index i = 0; i < n; ++i) c.add((x(i, a) - s.mean[a]) * (x(i, b) - s.mean[b]));
      s.covariance(a, b) = s.covariance(b, a) = c.value() / static_cast<double>(n - 1);
    }
  }
  return s;
}

inline double gaussian_kl(const GaussianSummary& p, const GaussianSummary& q) {
  if (p.mean.size() != q.mean.size()) throw std::invalid_argument("gaussian_kl: dimension mismatch");
  const auto d = static_cast<double>(p.mean.size());
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (q.covariance + q.covariance.transpose()));
  if (!(es.eigenvalues().minCoeff() > kEigenFloor)) throw NumericError("gaussian_kl: q covariance is singular");
  const SymmetricEigen qe(q.covariance);
  const SymmetricEigen pe(p.covariance);
  const Matrix qinv = qe.inverse();
  const StateVector dm = q.mean - p.mean;
  const double v = 0.5 * ((qinv * p.covariance).trace() + dm.dot(qinv * dm) - d + qe.log_det() - pe.log_det());
  return std::max(0.0, v);
}

inline double gaussian_w2_squared(const GaussianSummary& p, const GaussianSummary& q) {
  if (p.mean.size() != q.mean.size()) throw std::invalid_argument("gaussian_w2: dimension mismatch");
  const Matrix sq = sqrtm_spd(q.covariance);
  const Matrix inner = sq * p.covariance * sq;
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (inner + inner.transpose()));
  const double scale = std::max(1.0, inner.cwiseAbs().maxCoeff());
  if (es.eigenvalues().minCoeff() < -1e-9 * scale) throw NumericError("gaussian_w2: inner matrix is not PSD");
  const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double v = (p.mean - q.mean).squaredNorm() + p.covariance.trace() + q.covariance.trace() - 2.0 * cross;
  return std::max(0.0, v);
}

inline double gaussian_w2(const GaussianSummary& p, const GaussianSummary& q) {
  return std::sqrt(gaussian_w2_squared(p, q));
}

inline SampleSet apply_embedding(const SampleSet& x, const std::optional<Matrix>& embed) {
  if (!embed) return x;
  if (embed->cols() != x.cols()) throw std::invalid_argument("embedding: column count does not match dimension");
  return x * embed->transpose();
}

/// Squared W2 between Gaussian fits of the (embedded) sample sets.
inline double frechet_fit_distance(const SampleSet& a, const SampleSet& b, const std::optional<Matrix>& embed = std::nullopt) {
  if (a.rows() == 0 || b.rows() == 0) throw std::invalid_argument("frechet_fit_distance: empty sample set");
  if (a.cols() != b.cols()) throw std::invalid_argument("frechet_fit_distance: dimension mismatch");
  return gaussian_w2_squared(fit_gaussian(apply_embedding(a, embed)), fit_gaussian(apply_embedding(b, embed)));
}

inline double lipschitz_constant(const std::optional<Matrix>& embed) {
  if (!embed) return 1.0;
  Eigen::JacobiSVD<Matrix> svd(*embed);
  return svd.singularValues()(0);
}

// ---------------------------------------------------------------------------
// Empirical Wasserstein
// ---------------------------------------------------------------------------

inline constexpr Eigen::Index kExactMatchingMax = 512;
inline constexpr int kSliceCount = 64;

enum class W2Method { Sorted1D, ExactMatching, Sliced };

inline const char* w2_method_name(W2Method m) {
  switch (m) {
    case W2Method::Sorted1D: return "sorted_1d";
    case W2Method::ExactMatching: return "exact_matching";
    case W2Method::Sliced: return "sliced";
  }
  return "?";
}

struct EmpiricalW2 {
  double value = 0.0;  ///< W2 (not squared)
  W2Method method = W2Method::Sorted1D;
};

inline double sorted_w2_squared(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  CompensatedSum s;
  for (std::size_t i = 0; i < a.size(); ++i) s.add((a[i] - b[i]) * (a[i] - b[i]));
  return s.value() / static_cast<double>(a.size());
}

/// Fixed unit directions for sliced W2, drawn from the experiment seed.
inline Matrix slice_directions(Eigen::Index d, std::uint64_t seed, int count = kSliceCount) {
  RngStream rng(seed, kAuxiliaryStreamBase + 1);
  Matrix dirs(count, d);
  for (int p = 0; p < count; ++p) {
    StateVector z = rng.normal_vector(d);
    dirs.row(p) = (z / z.norm()).transpose();
  }
  return dirs;
}

inline EmpiricalW2 empirical_w2(const SampleSet& a, const SampleSet& b, std::uint64_t seed = 0) {
  if (a.rows() != b.rows()) throw std::invalid_argument("empirical_w2: sample counts differ");
  if (a.cols() != b.cols()) throw std::invalid_argument("empirical_w2: dimension mismatch");
  if (a.rows() == 0) throw std::invalid_argument("empirical_w2: empty sample set");
  const auto n = a.rows();
  const auto d = a.cols();
  EmpiricalW2 out;
  if (d == 1) {
    std::vector<double> va(a.data(), a.data() + n), vb(b.data(), b.data() + n);
    out.value = std::sqrt(sorted_w2_squared(std::move(va), std::move(vb)));
    out.method = W2Method::Sorted1D;
    return out;
  }
  if (n <= kExactMatchingMax) {
    Matrix cost(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) cost(i, j) = (a.row(i) - b.row(j)).squaredNorm();
    }
    const auto col = hungarian_assign(cost);
    CompensatedSum s;
    for (Eigen::Index i = 0; i < n; ++i) s.add(cost(i, col[static_cast<std::size_t>(i)]));
    out.value = std::sqrt(s.value() / static_cast<double>(n));
    out.method = W2Method::ExactMatching;
    return out;
  }
  const Matrix dirs = slice_directions(d, seed);
  CompensatedSum s;
  for (Eigen::Index p = 0; p < dirs.rows(); ++p) {
    const StateVector pa = a * dirs.row(p).transpose();
    const StateVector pb = b * dirs.row(p).transpose();
    s.add(sorted_w2_squared(std::vector<double>(pa.data(), pa.data() + n), std::vector<double>(pb.data(), pb.data() + n)));
  }
  // The mean over directions of a projected squared distance is 1/d of the
  // full one for isotropic displacements; rescale so the estimate is on the
  // W2 scale.
  out.value = std::sqrt(static_cast<double>(d) * s.value() / static_cast<double>(dirs.rows()));
  out.method = W2Method::Sliced;
  return out;
}

// ---------------------------------------------------------------------------
// Density drift
// ---------------------------------------------------------------------------

inline constexpr int kKdeGridPoints = 256;

struct KdeGrid {
  std::vector<StateVector> axes;  ///< one vector of grid coordinates per dimension
  double cell = 1.0;
};

/// Grid spanning reference mean +- 5 sd per axis.
inline KdeGrid kde_grid_for(const GaussianMixture& reference, double extra_var = 0.0, int points = kKdeGridPoints) {
  const Gaussian m = reference.moments(extra_var);
  KdeGrid g;
  for (Eigen::Index j = 0; j < m.mean.size(); ++j) {
    const double sd = std::sqrt(m.covariance(j, j));
    g.axes.push_back(StateVector::LinSpaced(points, m.mean[j] - 5.0 * sd, m.mean[j] + 5.0 * sd));
    g.cell *= 10.0 * sd / (points - 1);
  }
  return g;
}

inline StateVector silverman_bandwidth(const SampleSet& x) {
  const auto n = static_cast<double>(x.rows());
  const auto d = static_cast<double>(x.cols());
  const GaussianSummary s = fit_gaussian(x);
  const double factor = std::pow(4.0 / ((d + 2.0) * n), 1.0 / (d + 4.0));
  StateVector h(x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) h[j] = std::max(1e-12, std::sqrt(s.covariance(j, j)) * factor);
  return h;
}

/// Product-Gaussian KDE on the grid, as a (points x points) matrix for d=2
/// or a (points x 1) matrix for d=1.
inline Matrix kde_on_grid(const SampleSet& x, const KdeGrid& grid) {
  const auto n = x.rows();
  const auto d = x.cols();
  if (static_cast<std::size_t>(d) != grid.axes.size()) throw std::invalid_argument("kde: grid dimension mismatch");
  const StateVector h = silverman_bandwidth(x);
  auto kernel = [&](Eigen::Index j) {
    const StateVector& ax = grid.axes[static_cast<std::size_t>(j)];
    Matrix Kj(ax.size(), n);
    const double norm = 1.0 / (std::sqrt(2.0 * std::numbers::pi) * h[j]);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index g = 0; g < ax.size(); ++g) {
        const double z = (ax[g] - x(i, j)) / h[j];
        Kj(g, i) = norm * std::exp(-0.5 * z * z);
      }
    }
    return Kj;
  };
  if (d == 1) return kernel(0).rowwise().sum() / static_cast<double>(n);
  const Matrix K0 = kernel(0);
  const Matrix K1 = kernel(1);
  return (K0 * K1.transpose()) / static_cast<double>(n);
}

inline double density_drift(const SampleSet& nominal_terminal, const SampleSet& controlled_terminal, const KdeGrid& grid) {
  if (nominal_terminal.rows() == 0 || controlled_terminal.rows() == 0) {
    throw std::invalid_argument("density_drift: empty sample set");
  }
  if (nominal_terminal.cols() > 2) throw std::invalid_argument("density_drift: requires d <= 2");
  const Matrix fa = kde_on_grid(nominal_terminal, grid);
  const Matrix fb = kde_on_grid(controlled_terminal, grid);
  return (fa - fb).cwiseAbs().sum() * grid.cell;
}

inline double density_drift(const SampleSet& nominal_terminal, const SampleSet& controlled_terminal,
                            const GaussianMixture& reference) {
  return density_drift(nominal_terminal, controlled_terminal, kde_grid_for(reference));
}

// ---------------------------------------------------------------------------
// Bound checks
// ---------------------------------------------------------------------------

struct BoundCheck {
  std::string name;
  double lhs = 0.0;
  double rhs = 0.0;
  double slack = 0.0;
  bool satisfied = true;
  bool skipped = false;
  double margin() const { return rhs + slack - lhs; }
};

inline BoundCheck make_check(std::string name, double lhs, double rhs, double slack) {
  BoundCheck c;
  c.name = std::move(name);
  c.lhs = lhs;
  c.rhs = rhs;
  c.slack = slack;
  c.satisfied = lhs <= rhs + slack;
  return c;
}

inline BoundCheck skipped_check(std::string name) {
  BoundCheck c;
  c.name = std::move(name);
  c.skipped = true;
  c.satisfied = true;
  return c;
}

/// Relative tolerance for closed-form comparisons.
inline constexpr double kClosedFormTol = 1e-12;

/// (i) KL(p0u || p00) <= pathKL and (ii) W2^2(p0u, p00) <= 2 C KL(p0u || p00).
inline std::vector<BoundCheck> check_dpi_and_talagrand(double path_kl, const GaussianSummary& p0u,
                                                       const GaussianSummary& p00, double C) {
  std::vector<BoundCheck> out;
  const double kl = gaussian_kl(p0u, p00);
  out.push_back(make_check("dpi", kl, path_kl, kClosedFormTol * std::max(1.0, path_kl)));
  const auto d = p00.covariance.rows();
  const double sigma2 = p00.covariance.trace() / static_cast<double>(d);
  const bool isotropic =
      (p00.covariance - sigma2 * Matrix::Identity(d, d)).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, sigma2);
  if (!isotropic) {
    out.push_back(skipped_check("talagrand"));
    return out;
  }
  const double w2sq = gaussian_w2_squared(p0u, p00);
  const double rhs = 2.0 * C * kl;
  out.push_back(make_check("talagrand", w2sq, rhs, kClosedFormTol * std::max(1.0, rhs)));
  return out;
}

inline constexpr int kBootstrapResamples = 32;

/// sqrt(Frechet(a, b)) <= L sqrt(2 C pathKL), slack from a paired bootstrap
/// of the left side (3 standard deviations over 32 resamples).
inline BoundCheck fid_chain_check(double path_kl, const SampleSet& a, const SampleSet& b,
                                  const std::optional<Matrix>& embed, double C, std::uint64_t seed,
                                  const std::string& name = "fid_chain") {
  if (a.rows() != b.rows()) throw std::invalid_argument("fid_chain_check: paired samples must have equal counts");
  const double lhs = std::sqrt(frechet_fit_distance(a, b, embed));
  const double L = lipschitz_constant(embed);
  const double rhs = L * std::sqrt(2.0 * C) * std::sqrt(std::max(0.0, path_kl));
  RngStream rng(seed, kAuxiliaryStreamBase + 2);
  const auto n = a.rows();
  std::vector<double> boots;
  SampleSet ra(n, a.cols()), rb(n, b.cols());
  for (int r = 0; r < kBootstrapResamples; ++r) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto j = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
      ra.row(i) = a.row(j);
      rb.row(i) = b.row(j);
    }
    boots.push_back(std::sqrt(frechet_fit_distance(ra, rb, embed)));
  }
  return make_check(name, lhs, rhs, 3.0 * sample_sd(boots));
}

/// Bootstrap standard deviation of Frechet(a, b) under paired resampling.
inline double frechet_bootstrap_sd(const SampleSet& a, const SampleSet& b, std::uint64_t seed,
                                   int resamples = kBootstrapResamples) {
  RngStream rng(seed, kAuxiliaryStreamBase + 3);
  const auto n = a.rows();
  std::vector<double> boots;
  SampleSet ra(n, a.cols()), rb(n, b.cols());
  for (int r = 0; r < resamples; ++r) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto j = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
      ra.row(i) = a.row(j);
      rb.row(i) = b.row(j);
    }
    boots.push_back(frechet_fit_distance(ra, rb));
  }
  return sample_sd(boots);
}

// ---------------------------------------------------------------------------
// Adjoint sensitivity
// ---------------------------------------------------------------------------

struct AdjointGain {
  double predicted = 0.0;
  double measured = 0.0;
  double standard_error = 0.0;
};

/// h_t = g Phi(T, t)^T a_loss for dX = -a X dt + g dW on [0, T].
inline StateVector adjoint_sensitivity(const OuProcess& p, const StateVector& loss_weight, double t, double horizon) {
  return p.diffusion * std::exp(-p.rate * (horizon - t)) * loss_weight;
}

/// Predicted first-order gain eps int_0^T <h_t, v> dt (composite Simpson) versus
/// the shared-noise Monte-Carlo change in E[a_loss . X_T] under control eps v.
inline AdjointGain adjoint_gain_check(const OuProcess& p, const StateVector& loss_weight, const StateVector& v,
                                      double eps, const TimeGrid& grid, int N, std::uint64_t seed, int workers = 1) {
  require_same_dim(loss_weight, p.initial.mean, "adjoint_gain_check");
  require_same_dim(v, p.initial.mean, "adjoint_gain_check");
  const double T = grid.t_end();
  const int M = 2000;
  CompensatedSum q;
  for (int i = 0; i <= M; ++i) {
    const double t = grid.t_start() + (T - grid.t_start()) * i / M;
    const double w = (i == 0 || i == M) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
    q.add(w * adjoint_sensitivity(p, loss_weight, t, T).dot(v));
  }
  AdjointGain out;
  out.predicted = eps * q.value() * (T - grid.t_start()) / (3.0 * M);

  const SdeSpec spec = ou_sde(p);
  ControlSpec c;
  c.kind = ControlKind::Prescribed;
  const StateVector u = eps * v;
  c.field = [u](const StateVector&, double) { return u; };
  const auto initial = [p](RngStream& rng) { return sample_gaussian(p.initial, rng); };
  SimulationOptions opt;
  opt.workers = workers;
  const CoupledEnsemble ens = simulate_coupled(spec, c, grid, N, seed, initial, opt);
  std::vector<double> diff(static_cast<std::size_t>(N));
  for (int i = 0; i < N; ++i) {
    diff[static_cast<std::size_t>(i)] =
        loss_weight.dot(ens.controlled_terminal.row(i).transpose()) - loss_weight.dot(ens.nominal_terminal.row(i).transpose());
  }
  out.measured = compensated_mean(diff);
  out.standard_error = sample_sd(diff) / std::sqrt(static_cast<double>(N));
  return out;
}

// ---------------------------------------------------------------------------
// Slopes
// ---------------------------------------------------------------------------

struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

inline SlopeFit loglog_slope(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("loglog_slope: length mismatch");
  if (xs.size() < 3) throw std::invalid_argument("loglog_slope: need at least 3 points");
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!(xs[i] > 0.0) || !(ys[i] > 0.0)) throw std::invalid_argument("loglog_slope: values must be positive");
    lx.push_back(std::log(xs[i]));
    ly.push_back(std::log(ys[i]));
  }
  const double mx = compensated_mean(lx);
  const double my = compensated_mean(ly);
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
    syy += (ly[i] - my) * (ly[i] - my);
  }
  if (sxx == 0.0) throw std::invalid_argument("loglog_slope: x values must not all coincide");
  SlopeFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.r2 = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
  return f;
}

}  // namespace dpaclab
