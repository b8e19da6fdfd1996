#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <exception>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace dpaclab {

using StateVector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Rows are samples, columns are state coordinates.
using SampleSet = Eigen::MatrixXd;

/// Raised when a computation produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline bool all_finite(const StateVector& v) { return v.allFinite(); }

inline void require_finite(const StateVector& v, const char* what) {
  if (!v.allFinite()) throw NumericError(std::string(what) + ": non-finite value");
}

inline void require_same_dim(const StateVector& a, const StateVector& b, const char* what) {
  if (a.size() != b.size()) {
    throw std::invalid_argument(std::string(what) + ": dimension mismatch (" +
                                std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  }
}

// ---------------------------------------------------------------------------
// Compensated summation
// ---------------------------------------------------------------------------

/// Neumaier summation. Reductions over trajectories always feed values in
/// ascending trajectory order so results do not depend on worker count.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

inline double compensated_mean(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  CompensatedSum s;
  for (double x : xs) s.add(x);
  return s.value() / static_cast<double>(xs.size());
}

// ---------------------------------------------------------------------------
// Time grid
// ---------------------------------------------------------------------------

/// Increasing list of diffusion times t_0 < t_1 < ... < t_K. Step k (1-based)
/// covers [t_{k-1}, t_k] and has width dt(k) = t_k - t_{k-1}.
class TimeGrid {
 public:
  TimeGrid() = default;

  explicit TimeGrid(std::vector<double> times) : times_(std::move(times)) {
    if (times_.size() < 2) throw std::invalid_argument("TimeGrid: need at least one step");
    for (std::size_t k = 1; k < times_.size(); ++k) {
      if (!(times_[k] > times_[k - 1])) {
        throw std::invalid_argument("TimeGrid: times must be strictly increasing");
      }
    }
  }

  int steps() const { return static_cast<int>(times_.size()) - 1; }
  double time(int k) const { return times_.at(static_cast<std::size_t>(k)); }
  double dt(int k) const { return time(k) - time(k - 1); }
  double t_start() const { return times_.front(); }
  double t_end() const { return times_.back(); }
  double span() const { return t_end() - t_start(); }
  const std::vector<double>& times() const { return times_; }

  double dt_max() const {
    double m = 0.0;
    for (int k = 1; k <= steps(); ++k) m = std::max(m, dt(k));
    return m;
  }

 private:
  std::vector<double> times_;
};

enum class GridSpacing { Uniform };

/// Diffusion-time grid on [t_min, 1]. t_min must be strictly positive because
/// log-time drifts and Girsanov integrands are singular at zero.
inline TimeGrid make_time_grid(int K, double t_min, GridSpacing spacing = GridSpacing::Uniform) {
  if (K < 1) throw std::invalid_argument("make_time_grid: K must be >= 1");
  if (!(t_min > 0.0)) throw std::invalid_argument("make_time_grid: t_min must be > 0");
  if (!(t_min < 1.0)) throw std::invalid_argument("make_time_grid: t_min must be < 1");
  std::vector<double> times(static_cast<std::size_t>(K) + 1);
  switch (spacing) {
    case GridSpacing::Uniform: {
      const double h = (1.0 - t_min) / K;
      for (int k = 0; k <= K; ++k) times[static_cast<std::size_t>(k)] = t_min + h * k;
      times.back() = 1.0;
      break;
    }
  }
  return TimeGrid(std::move(times));
}

/// Grid on [0, horizon] for time-homogeneous test beds (OU, Brownian) where
/// nothing is singular at the origin.
inline TimeGrid make_horizon_grid(int K, double horizon) {
  if (K < 1) throw std::invalid_argument("make_horizon_grid: K must be >= 1");
  if (!(horizon > 0.0)) throw std::invalid_argument("make_horizon_grid: horizon must be > 0");
  std::vector<double> times(static_cast<std::size_t>(K) + 1);
  for (int k = 0; k <= K; ++k) times[static_cast<std::size_t>(k)] = horizon * k / K;
  times.back() = horizon;
  return TimeGrid(std::move(times));
}

// ---------------------------------------------------------------------------
// Metric
// ---------------------------------------------------------------------------

enum class MetricKind { Identity, NoiseScaled, DenseSPD };

/// Inner-product weight G_t used by projections and energy splits.
class Metric {
 public:
  using AlphaSchedule = std::function<double(double)>;

  static Metric identity() { return Metric(MetricKind::Identity); }

  /// G_t = (1 - alpha_bar(t))^{-1} I.
  static Metric noise_scaled(AlphaSchedule alpha_bar) {
    if (!alpha_bar) throw std::invalid_argument("Metric: noise-scaled metric needs an alpha schedule");
    Metric m(MetricKind::NoiseScaled);
    m.alpha_ = std::move(alpha_bar);
    return m;
  }

  static Metric dense(Matrix M) {
    if (M.rows() != M.cols() || M.rows() == 0) throw std::invalid_argument("Metric: matrix must be square");
    if (!M.allFinite()) throw std::invalid_argument("Metric: matrix has non-finite entries");
    const double asym = (M - M.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-12 * std::max(1.0, M.cwiseAbs().maxCoeff())) {
      throw std::invalid_argument("Metric: matrix is not symmetric");
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(M);
    if (!(es.eigenvalues().minCoeff() > 0.0)) {
      throw std::invalid_argument("Metric: matrix is not positive definite");
    }
    Metric m(MetricKind::DenseSPD);
    m.matrix_ = std::move(M);
    return m;
  }

  MetricKind kind() const { return kind_; }
  bool diagonal() const { return kind_ != MetricKind::DenseSPD; }
  const Matrix& matrix() const { return matrix_; }

  /// Scalar weight of the diagonal kinds at time t.
  double scale(double t) const {
    switch (kind_) {
      case MetricKind::Identity:
        return 1.0;
      case MetricKind::NoiseScaled: {
        const double a = alpha_(t);
        if (!(a > 0.0 && a < 1.0)) {
          throw std::domain_error("Metric: noise-scaled metric needs alpha_bar in (0,1), got " +
                                  std::to_string(a));
        }
        return 1.0 / (1.0 - a);
      }
      case MetricKind::DenseSPD:
        break;
    }
    throw std::logic_error("Metric::scale called on a dense metric");
  }

  /// G_t v.
  StateVector apply(const StateVector& v, double t) const {
    if (kind_ == MetricKind::DenseSPD) {
      if (matrix_.rows() != v.size()) throw std::invalid_argument("Metric: dimension mismatch");
      return matrix_ * v;
    }
    return scale(t) * v;
  }

  /// Dense representation at time t (used by tests and perturbation studies).
  Matrix materialize(double t, Eigen::Index d) const {
    if (kind_ == MetricKind::DenseSPD) return matrix_;
    return scale(t) * Matrix::Identity(d, d);
  }

 private:
  explicit Metric(MetricKind k) : kind_(k) {}

  MetricKind kind_;
  AlphaSchedule alpha_;
  Matrix matrix_;
};

/// a^T G_t b.
inline double metric_inner(const StateVector& a, const StateVector& b, const Metric& G, double t) {
  require_same_dim(a, b, "metric_inner");
  if (!a.allFinite() || !b.allFinite()) throw NumericError("metric_inner: non-finite input");
  if (G.kind() == MetricKind::DenseSPD) {
    if (G.matrix().rows() != a.size()) throw std::invalid_argument("metric_inner: metric dimension mismatch");
    return a.dot(G.matrix() * b);
  }
  return G.scale(t) * a.dot(b);
}

inline double metric_norm_sq(const StateVector& a, const Metric& G, double t) {
  return metric_inner(a, a, G, t);
}

// ---------------------------------------------------------------------------
// Counter-based randomness
// ---------------------------------------------------------------------------

/// Philox4x32-10 block function.
inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                               std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t kM0 = 0xD2511F53u;
  constexpr std::uint32_t kM1 = 0xCD9E8D57u;
  constexpr std::uint32_t kW0 = 0x9E3779B9u;
  constexpr std::uint32_t kW1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kM0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kM1) * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kW0;
    key[1] += kW1;
  }
  return ctr;
}

/// Deterministic stream of draws keyed by (seed, stream_index). Draw n of a
/// stream depends only on (seed, stream_index, n), so trajectories that own
/// their stream are reproducible under any scheduling.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_index)
      : seed_(seed), stream_(stream_index) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_index() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

  /// Two 64-bit words from one Philox block.
  std::array<std::uint64_t, 2> next_block() {
    const std::array<std::uint32_t, 4> ctr = {
        static_cast<std::uint32_t>(counter_), static_cast<std::uint32_t>(counter_ >> 32),
        static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)};
    const std::array<std::uint32_t, 2> key = {static_cast<std::uint32_t>(seed_),
                                              static_cast<std::uint32_t>(seed_ >> 32)};
    ++counter_;
    const auto r = philox4x32(ctr, key);
    return {(static_cast<std::uint64_t>(r[1]) << 32) | r[0],
            (static_cast<std::uint64_t>(r[3]) << 32) | r[2]};
  }

  /// Uniform on the open interval (0, 1).
  double uniform() {
    if (!spare_uniform_) {
      const auto b = next_block();
      spare_uniform_ = to_open_unit(b[1]);
      return to_open_unit(b[0]);
    }
    const double u = *spare_uniform_;
    spare_uniform_.reset();
    return u;
  }

  /// Standard normal via Box-Muller; pairs come from a single Philox block.
  double normal() {
    if (spare_normal_) {
      const double z = *spare_normal_;
      spare_normal_.reset();
      return z;
    }
    const auto b = next_block();
    const double u1 = to_open_unit(b[0]);
    const double u2 = to_open_unit(b[1]);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double phi = 2.0 * std::numbers::pi * u2;
    spare_normal_ = r * std::sin(phi);
    return r * std::cos(phi);
  }

  StateVector normal_vector(Eigen::Index d) {
    StateVector z(d);
    for (Eigen::Index i = 0; i < d; ++i) z[i] = normal();
    return z;
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("RngStream::below: n must be positive");
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
  }

 private:
  static double to_open_unit(std::uint64_t w) {
    return (static_cast<double>(w >> 11) + 0.5) * 0x1.0p-53;
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  std::optional<double> spare_normal_;
  std::optional<double> spare_uniform_;
};

/// Stream indices at or above this value are reserved for estimator-internal
/// randomness (bootstrap resamples, slicing directions) so they never collide
/// with trajectory streams.
inline constexpr std::uint64_t kAuxiliaryStreamBase = 0x8000'0000'0000'0000ull;

// ---------------------------------------------------------------------------
// Parallel execution
// ---------------------------------------------------------------------------

/// Runs fn(i) for i in [begin, end) on `workers` threads with static
/// contiguous chunks. fn must only write to slots owned by index i.
template <class Fn>
void parallel_for(std::size_t begin, std::size_t end, int workers, Fn&& fn) {
  if (end <= begin) return;
  const std::size_t n = end - begin;
  const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, workers)), n);
  if (w == 1) {
    for (std::size_t i = begin; i < end; ++i) fn(i);
    return;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(w);
  threads.reserve(w);
  for (std::size_t j = 0; j < w; ++j) {
    const std::size_t lo = begin + n * j / w;
    const std::size_t hi = begin + n * (j + 1) / w;
    threads.emplace_back([&, lo, hi, j] {
      try {
        for (std::size_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        errors[j] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace dpaclab
