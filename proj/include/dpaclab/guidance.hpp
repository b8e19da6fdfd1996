#pragma once

#include "dpaclab/core.hpp"
#include "dpaclab/score.hpp"

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dpaclab {

inline constexpr double kProjectionEps = 1e-8;
inline constexpr double kNormalizeEps = 1e-8;

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

enum class ScheduleKind { LateWindowLinear, Constant, Custom };

struct EtaSchedule {
  ScheduleKind kind = ScheduleKind::LateWindowLinear;
  double window_fraction = 0.2;
  double eta_max = 0.0;
  int K = 1;
  std::vector<double> custom;

  void validate() const {
    if (K < 1) throw std::invalid_argument("EtaSchedule: K must be >= 1");
    if (!(eta_max >= 0.0) || !std::isfinite(eta_max)) throw std::invalid_argument("EtaSchedule: eta_max must be >= 0");
    if (!(window_fraction > 0.0 && window_fraction <= 1.0)) {
      throw std::invalid_argument("EtaSchedule: window_fraction must lie in (0, 1]");
    }
    if (kind == ScheduleKind::Custom) {
      if (static_cast<int>(custom.size()) != K) throw std::invalid_argument("EtaSchedule: custom schedule needs K values");
      for (double e : custom) {
        if (!(e >= 0.0) || !std::isfinite(e)) throw std::invalid_argument("EtaSchedule: custom values must be >= 0");
      }
    }
  }

  int window_length() const { return static_cast<int>(std::ceil(window_fraction * K - 1e-12)); }
};

inline EtaSchedule late_window(int K, double eta_max, double window_fraction = 0.2) {
  EtaSchedule s;
  s.kind = ScheduleKind::LateWindowLinear;
  s.K = K;
  s.eta_max = eta_max;
  s.window_fraction = window_fraction;
  return s;
}

inline EtaSchedule constant_schedule(int K, double eta) {
  EtaSchedule s;
  s.kind = ScheduleKind::Constant;
  s.K = K;
  s.eta_max = eta;
  return s;
}

/// i counts sampler progress: 0 is the first step taken, K-1 the last.
inline double eta_at(int i, const EtaSchedule& sched) {
  if (i < 0 || i >= sched.K) {
    throw std::out_of_range("eta_at: index " + std::to_string(i) + " outside [0, " + std::to_string(sched.K) + ")");
  }
  switch (sched.kind) {
    case ScheduleKind::Constant:
      return sched.eta_max;
    case ScheduleKind::Custom:
      return sched.custom.at(static_cast<std::size_t>(i));
    case ScheduleKind::LateWindowLinear: {
      const int L = sched.window_length();
      const int j = i - (sched.K - L);
      if (j < 0) return 0.0;
      return sched.eta_max * static_cast<double>(j + 1) / static_cast<double>(L);
    }
  }
  throw std::logic_error("eta_at: unknown schedule kind");
}

// ---------------------------------------------------------------------------
// Projections
// ---------------------------------------------------------------------------

/// (<u,s>_G / (<s,s>_G + eps)) s. Returns zero and sets *degenerate when the
/// score has G-norm at or below eps.
inline StateVector project_parallel(const StateVector& u, const StateVector& s, const Metric& G, double t,
                                    double eps = kProjectionEps, bool* degenerate = nullptr) {
  require_same_dim(u, s, "project_parallel");
  const double ss = metric_norm_sq(s, G, t);
  const double us = metric_inner(u, s, G, t);
  if (degenerate) *degenerate = false;
  if (!(std::sqrt(ss) > eps)) {
    if (degenerate) *degenerate = true;
    return StateVector::Zero(u.size());
  }
  return (us / (ss + eps)) * s;
}

inline StateVector project_tangential(const StateVector& u, const StateVector& s, const Metric& G, double t,
                                      double eps = kProjectionEps, bool* degenerate = nullptr) {
  return u - project_parallel(u, s, G, t, eps, degenerate);
}

/// u / (|u| + 1e-8).
inline StateVector normalize_direction(const StateVector& u) {
  if (!u.allFinite()) throw NumericError("normalize_direction: non-finite input");
  return u / (u.norm() + kNormalizeEps);
}

inline Eigen::Matrix2d rotation_j() {
  Eigen::Matrix2d J;
  J << 0.0, -1.0, 1.0, 0.0;
  return J;
}

/// J grad p / p = J score. Divergence-free against p by construction.
inline StateVector rotated_score_field(const StateVector& x, const GaussianMixture& m, double extra_var = 0.0) {
  if (m.dimension() != 2 || x.size() != 2) throw std::invalid_argument("rotated_score_field: requires d = 2");
  const StateVector s = m.score(x, extra_var);
  StateVector r(2);
  r << -s[1], s[0];
  return r;
}

// ---------------------------------------------------------------------------
// Sensitivity oracles
// ---------------------------------------------------------------------------

struct SensitivityOracle {
  std::function<double(const StateVector&)> loss;
  std::function<StateVector(const StateVector&)> gradient;
};

inline double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// loss(x) = softplus(-sign (w.x + b)), the cross-entropy toward the side
/// sign (w.x + b) > 0.
inline SensitivityOracle make_logistic_target_loss(const StateVector& weight, double bias, int target_sign) {
  if (weight.size() < 1 || weight.norm() == 0.0) throw std::invalid_argument("logistic loss: weight must be nonzero");
  if (target_sign != 1 && target_sign != -1) throw std::invalid_argument("logistic loss: target_sign must be +1 or -1");
  const double sg = static_cast<double>(target_sign);
  SensitivityOracle o;
  o.loss = [weight, bias, sg](const StateVector& x) {
    require_same_dim(x, weight, "logistic loss");
    return softplus(-sg * (weight.dot(x) + bias));
  };
  o.gradient = [weight, bias, sg](const StateVector& x) -> StateVector {
    require_same_dim(x, weight, "logistic loss");
    return -sg * sigmoid(-sg * (weight.dot(x) + bias)) * weight;
  };
  return o;
}

/// Signed margin toward the target side; positive means attained.
inline double logistic_margin(const StateVector& x, const StateVector& weight, double bias, int target_sign) {
  return static_cast<double>(target_sign) * (weight.dot(x) + bias);
}

// ---------------------------------------------------------------------------
// Controls
// ---------------------------------------------------------------------------

enum class ControlKind { Zero, RawGradient, TangentialProjected, NormalOnly, Prescribed };

inline const char* control_kind_name(ControlKind k) {
  switch (k) {
    case ControlKind::Zero: return "zero";
    case ControlKind::RawGradient: return "raw";
    case ControlKind::TangentialProjected: return "tangential";
    case ControlKind::NormalOnly: return "normal";
    case ControlKind::Prescribed: return "prescribed";
  }
  return "?";
}

inline ControlKind parse_control_kind(const std::string& s) {
  if (s == "zero") return ControlKind::Zero;
  if (s == "raw") return ControlKind::RawGradient;
  if (s == "tangential") return ControlKind::TangentialProjected;
  if (s == "normal") return ControlKind::NormalOnly;
  if (s == "prescribed") return ControlKind::Prescribed;
  throw std::invalid_argument("unknown control kind '" + s + "'");
}

inline bool is_gradient_kind(ControlKind k) {
  return k == ControlKind::RawGradient || k == ControlKind::TangentialProjected || k == ControlKind::NormalOnly;
}

using VectorField = std::function<StateVector(const StateVector&, double)>;

/// Everything the sampler needs to form u_k. For the gradient kinds the
/// guidance vector is w = sensitivity(x, t); by convention it already points
/// in the direction that lowers the target loss.
struct ControlSpec {
  ControlKind kind = ControlKind::Zero;
  VectorField sensitivity;
  VectorField field;
  VectorField score;
  Metric metric = Metric::identity();
  EtaSchedule schedule;
  bool normalize = true;
  double projection_eps = kProjectionEps;

  void validate() const {
    switch (kind) {
      case ControlKind::Zero:
        break;
      case ControlKind::Prescribed:
        if (!field) throw std::invalid_argument("ControlSpec: prescribed control needs a field");
        break;
      default:
        if (!sensitivity) throw std::invalid_argument("ControlSpec: gradient control needs a sensitivity");
        if (kind != ControlKind::RawGradient && !score) {
          throw std::invalid_argument("ControlSpec: projected control needs a score");
        }
        break;
    }
  }
};

/// One evaluation of a gradient control: the split energies and the vector
/// selected by the kind (before normalization and scaling).
struct ControlSplit {
  StateVector raw;
  StateVector parallel;
  StateVector perpendicular;
  StateVector selected;
  double raw_sq_g = 0.0;
  double par_sq_g = 0.0;
  double perp_sq_g = 0.0;
  double par_sq = 0.0;   ///< Euclidean, exact split
  double perp_sq = 0.0;  ///< Euclidean, exact split
  bool degenerate_score = false;
};

inline ControlSplit split_control(ControlKind kind, const StateVector& w, const StateVector& s, const Metric& G, double t,
                                  double eps = kProjectionEps) {
  ControlSplit out;
  out.raw = w;
  out.parallel = project_parallel(w, s, G, t, eps, &out.degenerate_score);
  out.perpendicular = w - out.parallel;
  // Recorded norms come from the exact G-orthogonal split of w, so they add up
  // to the raw norm; the applied directions keep the eps denominator.
  out.raw_sq_g = metric_norm_sq(w, G, t);
  if (out.degenerate_score) {
    out.perp_sq_g = out.raw_sq_g;
    out.perp_sq = w.squaredNorm();
  } else {
    const StateVector exact_par = project_parallel(w, s, G, t, 0.0);
    const StateVector exact_perp = w - exact_par;
    out.par_sq_g = metric_norm_sq(exact_par, G, t);
    out.perp_sq_g = metric_norm_sq(exact_perp, G, t);
    out.par_sq = exact_par.squaredNorm();
    out.perp_sq = exact_perp.squaredNorm();
  }
  switch (kind) {
    case ControlKind::RawGradient: out.selected = out.raw; break;
    case ControlKind::TangentialProjected: out.selected = out.perpendicular; break;
    case ControlKind::NormalOnly: out.selected = out.parallel; break;
    default: throw std::invalid_argument("split_control: not a gradient kind");
  }
  return out;
}

/// Builds a gradient control. The guidance vector is the loss descent
/// direction -grad(loss), evaluated at the supplied state.
inline ControlSpec build_control_field(ControlKind kind, const SensitivityOracle& oracle, VectorField score, Metric G,
                                       EtaSchedule sched, bool normalize = true) {
  if (!is_gradient_kind(kind) && kind != ControlKind::Zero) {
    throw std::invalid_argument("build_control_field: unsupported kind " + std::string(control_kind_name(kind)));
  }
  if (!oracle.gradient) throw std::invalid_argument("build_control_field: oracle has no gradient");
  ControlSpec c;
  c.kind = kind;
  auto grad = oracle.gradient;
  c.sensitivity = [grad](const StateVector& x, double) -> StateVector { return -grad(x); };
  c.score = std::move(score);
  c.metric = std::move(G);
  c.schedule = std::move(sched);
  c.normalize = normalize;
  c.validate();
  return c;
}

/// Pointwise field selected by a gradient control, pre-normalization.
inline StateVector control_field_value(const ControlSpec& c, const StateVector& x, double t) {
  if (c.kind == ControlKind::Zero) return StateVector::Zero(x.size());
  if (c.kind == ControlKind::Prescribed) return c.field(x, t);
  const StateVector w = c.sensitivity(x, t);
  if (c.kind == ControlKind::RawGradient) return w;
  return split_control(c.kind, w, c.score(x, t), c.metric, t, c.projection_eps).selected;
}

}  // namespace dpaclab
