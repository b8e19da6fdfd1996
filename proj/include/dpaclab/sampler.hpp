#pragma once

#include "dpaclab/core.hpp"
#include "dpaclab/guidance.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dpaclab {

enum class Direction { Forward, Reverse };

/// Dynamics in the direction of integration: one step advances
/// x -> x + drift(x, t) dt + g(t) u dt + g(t) sqrt(dt) eps with dt > 0. For a
/// reverse diffusion run the drift is therefore g^2 s - f.
struct SdeSpec {
  VectorField drift;
  std::function<double(double)> diffusion;
  VectorField score;
  Eigen::Index dimension = 1;
  Direction direction = Direction::Reverse;

  void validate() const {
    if (!drift) throw std::invalid_argument("SdeSpec: drift not set");
    if (!diffusion) throw std::invalid_argument("SdeSpec: diffusion not set");
    if (dimension < 1) throw std::invalid_argument("SdeSpec: dimension must be >= 1");
  }
};

/// Reverse-time SDE for the variance-exploding forward process dX = g dW:
/// integration drift g^2 s_t(x), where s_t is the score of p_data * N(0, g^2 t I).
inline SdeSpec ve_reverse_sde(const GaussianMixture& data, double g = 1.0) {
  SdeSpec spec;
  const double g2 = g * g;
  spec.score = [data, g2](const StateVector& x, double t) { return data.score(x, g2 * t); };
  spec.drift = [data, g2](const StateVector& x, double t) -> StateVector { return g2 * data.score(x, g2 * t); };
  spec.diffusion = [g](double) { return g; };
  spec.dimension = data.dimension();
  spec.direction = Direction::Reverse;
  return spec;
}

/// Forward OU dynamics dX = -a X dt + g dW with the exact Gaussian score.
inline SdeSpec ou_sde(const OuProcess& p) {
  p.validate();
  SdeSpec spec;
  const double a = p.rate;
  const double g = p.diffusion;
  spec.drift = [a](const StateVector& x, double) -> StateVector { return -a * x; };
  spec.diffusion = [g](double) { return g; };
  spec.score = [p](const StateVector& x, double t) -> StateVector {
    const Gaussian m = ou_marginal(t, p);
    return SymmetricEigen(m.covariance).inverse() * (m.mean - x);
  };
  spec.dimension = p.dimension();
  spec.direction = Direction::Forward;
  return spec;
}

struct StepContext {
  int step = -1;
  long long trajectory = -1;
};

inline StateVector em_step(const StateVector& x, double t_k, double dt, const SdeSpec& spec, const StateVector& u,
                           const StateVector& eps, StepContext ctx = {}) {
  if (!(dt > 0.0)) throw std::invalid_argument("em_step: dt must be > 0");
  require_same_dim(x, eps, "em_step");
  require_same_dim(x, u, "em_step");
  const double g = spec.diffusion(t_k);
  if (!(g > 0.0)) throw std::domain_error("em_step: diffusion must be > 0 at t=" + std::to_string(t_k));
  StateVector out = x + spec.drift(x, t_k) * dt + (g * dt) * u + (g * std::sqrt(dt)) * eps;
  if (!out.allFinite()) {
    throw NumericError("em_step: non-finite state at step " + std::to_string(ctx.step) + " of trajectory " +
                       std::to_string(ctx.trajectory));
  }
  return out;
}

/// Per-step control bookkeeping. Energies with suffix _g are squared
/// G-norms of the guidance vector and its split; applied_sq is the squared
/// Euclidean norm of what was actually added (u for drift-injected controls,
/// eta * direction for perturbation steps). Prescribed controls have no
/// split and are recorded entirely in the perpendicular slot.
struct StepRecord {
  int k = 0;
  double t_k = 0.0;
  double dt = 0.0;
  double eta = 0.0;
  double u_raw_sq = 0.0;
  double u_par_sq = 0.0;
  double u_perp_sq = 0.0;
  double u_applied_sq = 0.0;
  bool degenerate = false;
};

enum class EnergyEstimator { Girsanov, Cpe };

inline const char* estimator_name(EnergyEstimator e) { return e == EnergyEstimator::Girsanov ? "girsanov" : "cpe"; }

/// Per-step ensemble means in integration order.
struct StepSummary {
  int k = 0;
  double t_from = 0.0;
  double t_to = 0.0;
  double dt = 0.0;
  double eta = 0.0;
  double girsanov = 0.0;
  double log_ratio = 0.0;
  double raw_sq = 0.0;
  double par_sq = 0.0;
  double perp_sq = 0.0;
  double applied_sq = 0.0;
  StateVector nominal_mean;
  StateVector controlled_mean;
};

/// Per-trajectory accumulated totals.
struct TrajectoryTotals {
  double girsanov = 0.0;     ///< 1/2 sum |u|^2 dt
  double log_ratio = 0.0;    ///< sum (1/2 |u|^2 dt + sqrt(dt) u.eps)
  double cpe_kind = 0.0;     ///< 1/2 sum |eta u_kind|^2
  double cpe_raw = 0.0;      ///< 1/2 sum |eta w|^2
  double cpe_par = 0.0;
  double cpe_perp = 0.0;
  double eta2_raw_g = 0.0;   ///< sum eta^2 |w|_G^2
  double eta2_par_g = 0.0;
  double eta2_perp_g = 0.0;
  int degenerate = 0;
};

struct CoupledEnsemble {
  TimeGrid grid;
  std::uint64_t seed = 0;
  int N = 0;
  Eigen::Index d = 0;
  Direction direction = Direction::Reverse;
  ControlKind kind = ControlKind::Zero;
  EnergyEstimator estimator = EnergyEstimator::Girsanov;

  SampleSet initial;
  SampleSet nominal_terminal;
  SampleSet controlled_terminal;
  std::vector<TrajectoryTotals> totals;
  std::vector<StepSummary> steps;

  /// Optional: per trajectory a (K+1) x d array, row k is the state at t_k.
  std::vector<Matrix> nominal_paths;
  std::vector<Matrix> controlled_paths;
  /// Optional: per trajectory K records in integration order.
  std::vector<std::vector<StepRecord>> records;

  int degenerate_steps() const {
    int n = 0;
    for (const auto& t : totals) n += t.degenerate;
    return n;
  }
};

enum class ControlTiming { StepStart, Midpoint };

struct SimulationOptions {
  int workers = 1;
  bool keep_paths = false;
  bool keep_records = false;
  /// When positive, every coarse increment is the normalized sum of
  /// fine_steps / K draws of a fixed fine Brownian path, so runs at
  /// different K share the same underlying noise. Requires K | fine_steps.
  int fine_steps = 0;
  ControlTiming prescribed_timing = ControlTiming::Midpoint;
};

using InitialSampler = std::function<StateVector(RngStream&)>;

namespace detail {

inline constexpr std::size_t kBlockSize = 256;

struct StepAccumulator {
  CompensatedSum girsanov, log_ratio, raw, par, perp, applied;
  std::vector<CompensatedSum> nominal, controlled;
};

struct StepOrder {
  int k;
  double t_from, t_to, t_eval, dt;
};

inline std::vector<StepOrder> step_order(const TimeGrid& grid, Direction dir) {
  const int K = grid.steps();
  std::vector<StepOrder> out;
  out.reserve(static_cast<std::size_t>(K));
  for (int i = 0; i < K; ++i) {
    if (dir == Direction::Reverse) {
      const int k = K - i;
      out.push_back({k, grid.time(k), grid.time(k - 1), grid.time(k), grid.dt(k)});
    } else {
      const int k = i + 1;
      out.push_back({k, grid.time(k - 1), grid.time(k), grid.time(k - 1), grid.dt(k)});
    }
  }
  return out;
}

class NoiseSource {
 public:
  NoiseSource(RngStream& rng, Eigen::Index d, int K, int fine_steps) : rng_(rng), d_(d), m_(1) {
    if (fine_steps > 0) {
      if (fine_steps % K != 0) {
        throw std::invalid_argument("fine_steps (" + std::to_string(fine_steps) + ") must be a multiple of K (" +
                                    std::to_string(K) + ")");
      }
      m_ = fine_steps / K;
    }
  }
  StateVector next() {
    if (m_ == 1) return rng_.normal_vector(d_);
    StateVector z = StateVector::Zero(d_);
    for (int j = 0; j < m_; ++j) z += rng_.normal_vector(d_);
    return z / std::sqrt(static_cast<double>(m_));
  }

 private:
  RngStream& rng_;
  Eigen::Index d_;
  int m_;
};

/// Shared driver: `advance` performs one step of both chains for one
/// trajectory and fills the record and the totals.
template <class Advance>
CoupledEnsemble run_ensemble(const SdeSpec& spec, const TimeGrid& grid, int N, std::uint64_t seed,
                             const InitialSampler& initial, const SimulationOptions& opt, ControlKind kind,
                             EnergyEstimator estimator, Advance&& advance) {
  spec.validate();
  if (N < 1) throw std::invalid_argument("simulate: N must be >= 1");
  if (!initial) throw std::invalid_argument("simulate: initial sampler not set");
  const auto d = spec.dimension;
  const int K = grid.steps();
  const auto order = step_order(grid, spec.direction);

  CoupledEnsemble ens;
  ens.grid = grid;
  ens.seed = seed;
  ens.N = N;
  ens.d = d;
  ens.direction = spec.direction;
  ens.kind = kind;
  ens.estimator = estimator;
  ens.initial.resize(N, d);
  ens.nominal_terminal.resize(N, d);
  ens.controlled_terminal.resize(N, d);
  ens.totals.assign(static_cast<std::size_t>(N), {});
  if (opt.keep_paths) {
    ens.nominal_paths.assign(static_cast<std::size_t>(N), Matrix());
    ens.controlled_paths.assign(static_cast<std::size_t>(N), Matrix());
  }
  if (opt.keep_records) ens.records.assign(static_cast<std::size_t>(N), {});

  const std::size_t nblocks = (static_cast<std::size_t>(N) + kBlockSize - 1) / kBlockSize;
  std::vector<std::vector<StepAccumulator>> acc(nblocks);
  std::vector<std::vector<CompensatedSum>> init_acc(nblocks, std::vector<CompensatedSum>(static_cast<std::size_t>(d)));

  parallel_for(0, nblocks, opt.workers, [&](std::size_t b) {
    auto& blk = acc[b];
    blk.resize(static_cast<std::size_t>(K));
    for (auto& a : blk) {
      a.nominal.resize(static_cast<std::size_t>(d));
      a.controlled.resize(static_cast<std::size_t>(d));
    }
    const std::size_t lo = b * kBlockSize;
    const std::size_t hi = std::min<std::size_t>(lo + kBlockSize, static_cast<std::size_t>(N));
    for (std::size_t n = lo; n < hi; ++n) {
      RngStream rng(seed, n);
      StateVector x0 = initial(rng);
      if (x0.size() != d) throw std::invalid_argument("simulate: initial sampler returned wrong dimension");
      require_finite(x0, "initial state");
      ens.initial.row(static_cast<Eigen::Index>(n)) = x0.transpose();
      for (Eigen::Index j = 0; j < d; ++j) init_acc[b][static_cast<std::size_t>(j)].add(x0[j]);
      NoiseSource noise(rng, d, K, opt.fine_steps);
      StateVector xn = x0;
      StateVector xc = x0;
      Matrix* pn = nullptr;
      Matrix* pc = nullptr;
      if (opt.keep_paths) {
        pn = &ens.nominal_paths[n];
        pc = &ens.controlled_paths[n];
        pn->resize(K + 1, d);
        pc->resize(K + 1, d);
        const int k0 = spec.direction == Direction::Reverse ? K : 0;
        pn->row(k0) = x0.transpose();
        pc->row(k0) = x0.transpose();
      }
      std::vector<StepRecord>* recs = opt.keep_records ? &ens.records[n] : nullptr;
      if (recs) recs->reserve(static_cast<std::size_t>(K));
      TrajectoryTotals& tot = ens.totals[n];
      for (int i = 0; i < K; ++i) {
        const StepOrder& st = order[static_cast<std::size_t>(i)];
        const StateVector eps = noise.next();
        StepRecord rec;
        rec.k = st.k;
        rec.t_k = st.t_eval;
        rec.dt = st.dt;
        const StepContext ctx{st.k, static_cast<long long>(n)};
        const double g_before = tot.girsanov;
        const double lr_before = tot.log_ratio;
        advance(i, st, xn, xc, eps, rec, tot, ctx);
        auto& a = blk[static_cast<std::size_t>(i)];
        a.girsanov.add(tot.girsanov - g_before);
        a.log_ratio.add(tot.log_ratio - lr_before);
        a.raw.add(rec.u_raw_sq);
        a.par.add(rec.u_par_sq);
        a.perp.add(rec.u_perp_sq);
        a.applied.add(rec.u_applied_sq);
        for (Eigen::Index j = 0; j < d; ++j) {
          a.nominal[static_cast<std::size_t>(j)].add(xn[j]);
          a.controlled[static_cast<std::size_t>(j)].add(xc[j]);
        }
        if (pn) {
          const int row = spec.direction == Direction::Reverse ? st.k - 1 : st.k;
          pn->row(row) = xn.transpose();
          pc->row(row) = xc.transpose();
        }
        if (rec.degenerate) ++tot.degenerate;
        if (recs) recs->push_back(rec);
      }
      ens.nominal_terminal.row(static_cast<Eigen::Index>(n)) = xn.transpose();
      ens.controlled_terminal.row(static_cast<Eigen::Index>(n)) = xc.transpose();
    }
  });

  // Deterministic combination: blocks are fixed by N, not by worker count.
  const double invN = 1.0 / static_cast<double>(N);
  ens.steps.resize(static_cast<std::size_t>(K));
  for (int i = 0; i < K; ++i) {
    const StepOrder& st = order[static_cast<std::size_t>(i)];
    CompensatedSum g, lr, r, p, q, ap;
    std::vector<CompensatedSum> mn(static_cast<std::size_t>(d)), mc(static_cast<std::size_t>(d));
    for (std::size_t b = 0; b < nblocks; ++b) {
      const auto& a = acc[b][static_cast<std::size_t>(i)];
      g.add(a.girsanov.value());
      lr.add(a.log_ratio.value());
      r.add(a.raw.value());
      p.add(a.par.value());
      q.add(a.perp.value());
      ap.add(a.applied.value());
      for (std::size_t j = 0; j < static_cast<std::size_t>(d); ++j) {
        mn[j].add(a.nominal[j].value());
        mc[j].add(a.controlled[j].value());
      }
    }
    StepSummary s;
    s.k = st.k;
    s.t_from = st.t_from;
    s.t_to = st.t_to;
    s.dt = st.dt;
    s.girsanov = g.value() * invN;
    s.log_ratio = lr.value() * invN;
    s.raw_sq = r.value() * invN;
    s.par_sq = p.value() * invN;
    s.perp_sq = q.value() * invN;
    s.applied_sq = ap.value() * invN;
    s.nominal_mean.resize(d);
    s.controlled_mean.resize(d);
    for (Eigen::Index j = 0; j < d; ++j) {
      s.nominal_mean[j] = mn[static_cast<std::size_t>(j)].value() * invN;
      s.controlled_mean[j] = mc[static_cast<std::size_t>(j)].value() * invN;
    }
    ens.steps[static_cast<std::size_t>(i)] = std::move(s);
  }
  return ens;
}

inline void accumulate_split(const ControlSplit& sp, double eta, ControlKind kind, TrajectoryTotals& tot) {
  const double e2 = eta * eta;
  tot.cpe_raw += 0.5 * e2 * sp.raw.squaredNorm();
  tot.cpe_par += 0.5 * e2 * sp.par_sq;
  tot.cpe_perp += 0.5 * e2 * sp.perp_sq;
  tot.cpe_kind += 0.5 * e2 * sp.selected.squaredNorm();
  tot.eta2_raw_g += e2 * sp.raw_sq_g;
  tot.eta2_par_g += e2 * sp.par_sq_g;
  tot.eta2_perp_g += e2 * sp.perp_sq_g;
  (void)kind;
}

}  // namespace detail

/// Nominal and drift-injected controlled chains driven by identical noise.
inline CoupledEnsemble simulate_coupled(const SdeSpec& spec, const ControlSpec& control, const TimeGrid& grid, int N,
                                        std::uint64_t seed, const InitialSampler& initial,
                                        const SimulationOptions& opt = {}) {
  control.validate();
  const auto d = spec.dimension;
  const StateVector zero = StateVector::Zero(d);
  const bool gradient = is_gradient_kind(control.kind);
  if (gradient) control.schedule.validate();
  if (gradient && control.schedule.K != grid.steps()) {
    throw std::invalid_argument("simulate_coupled: schedule K does not match the grid");
  }

  auto advance = [&](int i, const detail::StepOrder& st, StateVector& xn, StateVector& xc, const StateVector& eps,
                     StepRecord& rec, TrajectoryTotals& tot, const StepContext& ctx) {
    xn = em_step(xn, st.t_eval, st.dt, spec, zero, eps, ctx);
    StateVector u = zero;
    switch (control.kind) {
      case ControlKind::Zero:
        break;
      case ControlKind::Prescribed: {
        const double tc = opt.prescribed_timing == ControlTiming::Midpoint ? 0.5 * (st.t_from + st.t_to) : st.t_eval;
        u = control.field(xc, tc);
        if (u.size() != d) throw std::invalid_argument("prescribed control returned wrong dimension");
        rec.u_raw_sq = u.squaredNorm();
        rec.u_perp_sq = rec.u_raw_sq;
        break;
      }
      default: {
        rec.eta = eta_at(i, control.schedule);
        if (rec.eta > 0.0) {
          const StateVector w = control.sensitivity(xc, st.t_eval);
          const StateVector s = control.kind == ControlKind::RawGradient && !control.score
                                    ? StateVector::Zero(d)
                                    : control.score(xc, st.t_eval);
          const ControlSplit sp = split_control(control.kind, w, s, control.metric, st.t_eval, control.projection_eps);
          rec.u_raw_sq = sp.raw_sq_g;
          rec.u_par_sq = sp.par_sq_g;
          rec.u_perp_sq = sp.perp_sq_g;
          u = rec.eta * (control.normalize ? normalize_direction(sp.selected) : sp.selected);
          detail::accumulate_split(sp, rec.eta, control.kind, tot);
        }
        break;
      }
    }
    rec.u_applied_sq = u.squaredNorm();
    if (control.kind == ControlKind::Zero) {
      xc = em_step(xc, st.t_eval, st.dt, spec, zero, eps, ctx);
    } else {
      xc = em_step(xc, st.t_eval, st.dt, spec, u, eps, ctx);
      tot.girsanov += 0.5 * rec.u_applied_sq * st.dt;
      tot.log_ratio += 0.5 * rec.u_applied_sq * st.dt + std::sqrt(st.dt) * u.dot(eps);
    }
  };
  return detail::run_ensemble(spec, grid, N, seed, initial, opt, control.kind, EnergyEstimator::Girsanov, advance);
}

/// Denoise-then-Perturb guided sampling. The nominal chain is the unguided
/// sampler on the same noise; the controlled chain is the guided one.
inline CoupledEnsemble dpac_guided_sample(const SdeSpec& spec, const ControlSpec& guidance, const TimeGrid& grid, int N,
                                          std::uint64_t seed, const InitialSampler& initial,
                                          const SimulationOptions& opt = {}) {
  if (!is_gradient_kind(guidance.kind)) {
    throw std::invalid_argument("dpac_guided_sample: guidance must be raw, tangential or normal");
  }
  guidance.validate();
  guidance.schedule.validate();
  if (guidance.schedule.K != grid.steps()) throw std::invalid_argument("dpac_guided_sample: schedule K does not match the grid");
  if (!spec.score) throw std::invalid_argument("dpac_guided_sample: spec has no score");
  const auto d = spec.dimension;
  const StateVector zero = StateVector::Zero(d);

  auto advance = [&](int i, const detail::StepOrder& st, StateVector& xn, StateVector& xc, const StateVector& eps,
                     StepRecord& rec, TrajectoryTotals& tot, const StepContext& ctx) {
    xn = em_step(xn, st.t_eval, st.dt, spec, zero, eps, ctx);
    rec.eta = eta_at(i, guidance.schedule);
    if (rec.eta <= 0.0) {
      xc = em_step(xc, st.t_eval, st.dt, spec, zero, eps, ctx);
      return;
    }
    const StateVector s = spec.score(xc, st.t_eval);
    const StateVector x_clean = em_step(xc, st.t_eval, st.dt, spec, zero, eps, ctx);
    const StateVector w = guidance.sensitivity(x_clean, st.t_to);
    const ControlSplit sp = split_control(guidance.kind, w, s, guidance.metric, st.t_eval, guidance.projection_eps);
    rec.u_raw_sq = sp.raw_sq_g;
    rec.u_par_sq = sp.par_sq_g;
    rec.u_perp_sq = sp.perp_sq_g;
    detail::accumulate_split(sp, rec.eta, guidance.kind, tot);
    const double wn = sp.raw.norm();
    if (guidance.normalize && (wn == 0.0 || sp.selected.norm() <= kProjectionEps * wn)) {
      rec.degenerate = true;
      xc = x_clean;
      return;
    }
    const StateVector dir = guidance.normalize ? normalize_direction(sp.selected) : sp.selected;
    const StateVector step = rec.eta * dir;
    rec.u_applied_sq = step.squaredNorm();
    xc = x_clean + step;
    if (!xc.allFinite()) {
      throw NumericError("dpac_guided_sample: non-finite state at step " + std::to_string(ctx.step) +
                         " of trajectory " + std::to_string(ctx.trajectory));
    }
  };
  return detail::run_ensemble(spec, grid, N, seed, initial, opt, guidance.kind, EnergyEstimator::Cpe, advance);
}

/// One row per (trajectory, time index); requires keep_paths.
inline void write_trajectory_csv(const CoupledEnsemble& ens, const std::string& path) {
  if (ens.nominal_paths.empty()) throw std::invalid_argument("write_trajectory_csv: ensemble has no stored paths");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << "traj,k,t";
  for (Eigen::Index j = 0; j < ens.d; ++j) out << ",x" << j << "_nominal";
  for (Eigen::Index j = 0; j < ens.d; ++j) out << ",x" << j << "_controlled";
  out << "\n";
  char buf[64];
  for (int n = 0; n < ens.N; ++n) {
    const Matrix& pn = ens.nominal_paths[static_cast<std::size_t>(n)];
    const Matrix& pc = ens.controlled_paths[static_cast<std::size_t>(n)];
    for (int k = 0; k <= ens.grid.steps(); ++k) {
      std::snprintf(buf, sizeof buf, "%.9g", ens.grid.time(k));
      out << n << "," << k << "," << buf;
      for (Eigen::Index j = 0; j < ens.d; ++j) {
        std::snprintf(buf, sizeof buf, "%.9g", pn(k, j));
        out << "," << buf;
      }
      for (Eigen::Index j = 0; j < ens.d; ++j) {
        std::snprintf(buf, sizeof buf, "%.9g", pc(k, j));
        out << "," << buf;
      }
      out << "\n";
    }
  }
}

}  // namespace dpaclab
