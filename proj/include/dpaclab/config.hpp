#pragma once

#include "dpaclab/core.hpp"
#include "dpaclab/guidance.hpp"
#include "dpaclab/score.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dpaclab {

/// Configuration problem located at a dotted path such as density.covariances[1].
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string path, const std::string& message)
      : std::runtime_error(path + ": " + message), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

struct DensityConfig {
  std::string type = "mixture";  // mixture | ou
  std::vector<double> weights;
  std::vector<std::vector<double>> means;
  std::vector<std::vector<std::vector<double>>> covariances;
  double diffusion = 1.0;
  double rate = 1.0;
  double horizon = 1.0;
  std::vector<double> initial_mean;
  std::vector<std::vector<double>> initial_covariance;
};

struct LogisticConfig {
  std::vector<double> weight;
  double bias = 0.0;
  int target_sign = 1;
};

struct ControlConfig {
  std::string kind = "zero";
  double magnitude = 1.0;
  bool normalize = true;
  std::optional<LogisticConfig> logistic;
};

struct MetricConfig {
  std::string kind = "identity";  // identity | noise_scaled | dense
  std::vector<std::vector<double>> matrix;
};

struct ScheduleConfig {
  std::string kind = "late_window_linear";  // late_window_linear | constant
  double window_fraction = 0.2;
  double eta_max = 0.0;
};

struct ExperimentConfig {
  std::string name;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds;
  int N = 1000;
  int K = 100;
  double t_min = 1e-3;
  int dimension = 2;
  int fine_steps = 0;
  DensityConfig density;
  ControlConfig control;
  MetricConfig metric;
  ScheduleConfig schedule;
  std::vector<double> sweep;
  std::string output_dir;
};

// ---------------------------------------------------------------------------
// Conversions to library objects
// ---------------------------------------------------------------------------

inline StateVector to_vector(const std::vector<double>& v) {
  StateVector out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[i];
  return out;
}

inline Matrix to_matrix(const std::vector<std::vector<double>>& rows, const std::string& path) {
  const auto r = static_cast<Eigen::Index>(rows.size());
  if (r == 0) throw ConfigError(path, "matrix is empty");
  const auto c = static_cast<Eigen::Index>(rows[0].size());
  Matrix M(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    if (static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)].size()) != c) {
      throw ConfigError(path + "[" + std::to_string(i) + "]", "ragged matrix row");
    }
    for (Eigen::Index j = 0; j < c; ++j) M(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  return M;
}

inline std::vector<std::vector<double>> from_matrix(const Matrix& M) {
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(M.rows()));
  for (Eigen::Index i = 0; i < M.rows(); ++i) {
    for (Eigen::Index j = 0; j < M.cols(); ++j) rows[static_cast<std::size_t>(i)].push_back(M(i, j));
  }
  return rows;
}

inline void check_spd(const Matrix& M, const std::string& path) {
  if (M.rows() != M.cols()) throw ConfigError(path, "matrix must be square");
  if (!M.allFinite()) throw ConfigError(path, "matrix has non-finite entries");
  if ((M - M.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, M.cwiseAbs().maxCoeff())) {
    throw ConfigError(path, "matrix is not symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(M);
  if (!(es.eigenvalues().minCoeff() > kEigenFloor)) throw ConfigError(path, "matrix is not positive definite");
}

inline GaussianMixture mixture_from(const DensityConfig& d, int dimension) {
  if (d.type != "mixture") throw ConfigError("density.type", "expected a mixture density");
  const std::size_t k = d.weights.size();
  if (k == 0) throw ConfigError("density.weights", "at least one component is required");
  if (d.means.size() != k) throw ConfigError("density.means", "must have one entry per weight");
  if (d.covariances.size() != k) throw ConfigError("density.covariances", "must have one entry per weight");
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    if (!(d.weights[i] > 0.0)) throw ConfigError("density.weights[" + std::to_string(i) + "]", "weights must be positive");
    total += d.weights[i];
  }
  if (std::abs(total - 1.0) > 1e-12) {
    std::ostringstream os;
    os << "weights must sum to 1 (got " << total << ")";
    throw ConfigError("density.weights", os.str());
  }
  std::vector<StateVector> means;
  std::vector<Matrix> covs;
  for (std::size_t i = 0; i < k; ++i) {
    const std::string mp = "density.means[" + std::to_string(i) + "]";
    const std::string cp = "density.covariances[" + std::to_string(i) + "]";
    if (static_cast<int>(d.means[i].size()) != dimension) throw ConfigError(mp, "length must equal dimension");
    means.push_back(to_vector(d.means[i]));
    Matrix C = to_matrix(d.covariances[i], cp);
    if (C.rows() != dimension) throw ConfigError(cp, "size must equal dimension");
    check_spd(C, cp);
    covs.push_back(std::move(C));
  }
  return GaussianMixture(d.weights, means, covs);
}

inline OuProcess ou_from(const DensityConfig& d, int dimension) {
  if (d.type != "ou") throw ConfigError("density.type", "expected an ou density");
  if (!(d.diffusion > 0.0)) throw ConfigError("density.diffusion", "must be > 0");
  if (!std::isfinite(d.rate)) throw ConfigError("density.rate", "must be finite");
  if (!(d.horizon > 0.0)) throw ConfigError("density.horizon", "must be > 0");
  if (static_cast<int>(d.initial_mean.size()) != dimension) {
    throw ConfigError("density.initial_mean", "length must equal dimension");
  }
  OuProcess p;
  p.rate = d.rate;
  p.diffusion = d.diffusion;
  p.initial.mean = to_vector(d.initial_mean);
  p.initial.covariance = to_matrix(d.initial_covariance, "density.initial_covariance");
  const Matrix& C = p.initial.covariance;
  if (C.rows() != dimension || C.cols() != dimension) {
    throw ConfigError("density.initial_covariance", "size must equal dimension");
  }
  if ((C - C.transpose()).cwiseAbs().maxCoeff() > 1e-12) throw ConfigError("density.initial_covariance", "not symmetric");
  Eigen::SelfAdjointEigenSolver<Matrix> es(C);
  if (es.eigenvalues().minCoeff() < 0.0) throw ConfigError("density.initial_covariance", "not positive semidefinite");
  return p;
}

/// Metric from config. The noise-scaled metric uses alpha_bar(t) = 1 / (1 + g^2 t),
/// the signal fraction of the variance-exploding process started at unit scale.
inline Metric metric_from(const MetricConfig& m, int dimension, double diffusion = 1.0) {
  if (m.kind == "identity") return Metric::identity();
  if (m.kind == "noise_scaled") {
    const double g2 = diffusion * diffusion;
    return Metric::noise_scaled([g2](double t) { return 1.0 / (1.0 + g2 * t); });
  }
  if (m.kind == "dense") {
    Matrix M = to_matrix(m.matrix, "metric.matrix");
    if (M.rows() != dimension) throw ConfigError("metric.matrix", "size must equal dimension");
    check_spd(M, "metric.matrix");
    return Metric::dense(std::move(M));
  }
  throw ConfigError("metric.kind", "unknown metric kind '" + m.kind + "'");
}

inline EtaSchedule schedule_from(const ScheduleConfig& s, int K) {
  EtaSchedule e;
  if (s.kind == "late_window_linear") {
    e.kind = ScheduleKind::LateWindowLinear;
  } else if (s.kind == "constant") {
    e.kind = ScheduleKind::Constant;
  } else {
    throw ConfigError("schedule.kind", "unknown schedule kind '" + s.kind + "'");
  }
  e.K = K;
  e.eta_max = s.eta_max;
  e.window_fraction = s.window_fraction;
  return e;
}

inline SensitivityOracle logistic_from(const ControlConfig& c, int dimension) {
  if (!c.logistic) throw ConfigError("control.logistic", "required for this scenario");
  const auto& l = *c.logistic;
  if (static_cast<int>(l.weight.size()) != dimension) throw ConfigError("control.logistic.weight", "length must equal dimension");
  if (to_vector(l.weight).norm() == 0.0) throw ConfigError("control.logistic.weight", "must be nonzero");
  if (l.target_sign != 1 && l.target_sign != -1) throw ConfigError("control.logistic.target_sign", "must be +1 or -1");
  return make_logistic_target_loss(to_vector(l.weight), l.bias, l.target_sign);
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& scenario_names() {
  static const std::vector<std::string> names = {"toy1d_girsanov",       "gmm2d_fields",      "dt_scaling",
                                                 "robustness_quadratic", "dpi_talagrand_ou", "guided_attack"};
  return names;
}

inline bool is_scenario(const std::string& name) {
  for (const auto& n : scenario_names()) {
    if (n == name) return true;
  }
  return false;
}

inline void validate_config(const ExperimentConfig& c) {
  if (!is_scenario(c.name)) throw ConfigError("name", "unknown scenario '" + c.name + "'");
  if (c.N < 1) throw ConfigError("N", "must be >= 1");
  if (c.K < 1) throw ConfigError("K", "must be >= 1");
  if (!(c.t_min > 0.0)) throw ConfigError("t_min", "must be > 0");
  if (!(c.t_min < 1.0)) throw ConfigError("t_min", "must be < 1 (steps would have non-positive width)");
  if (c.dimension < 1) throw ConfigError("dimension", "must be >= 1");
  if (c.fine_steps < 0) throw ConfigError("fine_steps", "must be >= 0");
  for (std::size_t i = 0; i < c.sweep.size(); ++i) {
    const std::string p = "sweep[" + std::to_string(i) + "]";
    if (!(c.sweep[i] > 0.0) || !std::isfinite(c.sweep[i])) throw ConfigError(p, "sweep values must be positive");
    if (i > 0 && !(c.sweep[i] > c.sweep[i - 1])) throw ConfigError(p, "sweep values must be strictly increasing");
  }
  if (c.density.type == "mixture") {
    (void)mixture_from(c.density, c.dimension);
  } else if (c.density.type == "ou") {
    (void)ou_from(c.density, c.dimension);
  } else {
    throw ConfigError("density.type", "unknown density type '" + c.density.type + "'");
  }
  if (!(c.density.diffusion > 0.0)) throw ConfigError("density.diffusion", "must be > 0");
  try {
    (void)parse_control_kind(c.control.kind);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("control.kind", e.what());
  }
  if (!std::isfinite(c.control.magnitude) || c.control.magnitude < 0.0) throw ConfigError("control.magnitude", "must be >= 0");
  if (c.control.logistic) (void)logistic_from(c.control, c.dimension);
  (void)metric_from(c.metric, c.dimension, c.density.diffusion);
  if (!(c.schedule.window_fraction > 0.0 && c.schedule.window_fraction <= 1.0)) {
    throw ConfigError("schedule.window_fraction", "must lie in (0, 1]");
  }
  if (!(c.schedule.eta_max >= 0.0) || !std::isfinite(c.schedule.eta_max)) throw ConfigError("schedule.eta_max", "must be >= 0");
  (void)schedule_from(c.schedule, c.K);
}

// ---------------------------------------------------------------------------
// JSON parsing (strict)
// ---------------------------------------------------------------------------

namespace detail {

using nlohmann::json;

inline void reject_unknown(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(path.empty() ? "<root>" : path, "expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!ok.count(it.key())) throw ConfigError(path.empty() ? it.key() : path + "." + it.key(), "unknown key");
  }
}

inline std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

inline double get_number(const json& j, const std::string& path) {
  if (!j.is_number()) throw ConfigError(path, "expected a number");
  return j.get<double>();
}

inline int get_int(const json& j, const std::string& path) {
  if (!j.is_number_integer()) throw ConfigError(path, "expected an integer");
  const auto v = j.get<long long>();
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) throw ConfigError(path, "integer out of range");
  return static_cast<int>(v);
}

inline std::uint64_t get_u64(const json& j, const std::string& path) {
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  if (j.is_number_integer()) {
    const auto v = j.get<long long>();
    if (v < 0) throw ConfigError(path, "expected a non-negative integer");
    return static_cast<std::uint64_t>(v);
  }
  throw ConfigError(path, "expected a non-negative integer");
}

inline std::string get_string(const json& j, const std::string& path) {
  if (!j.is_string()) throw ConfigError(path, "expected a string");
  return j.get<std::string>();
}

inline bool get_bool(const json& j, const std::string& path) {
  if (!j.is_boolean()) throw ConfigError(path, "expected a boolean");
  return j.get<bool>();
}

inline std::vector<double> get_vector(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path, "expected an array of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(get_number(j[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

inline std::vector<std::vector<double>> get_matrix(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path, "expected an array of rows");
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(get_vector(j[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

inline void parse_density(const json& j, DensityConfig& d) {
  reject_unknown(j, "density", {"type", "weights", "means", "covariances", "diffusion", "rate", "horizon",
                                "initial_mean", "initial_covariance"});
  if (j.contains("type")) d.type = get_string(j["type"], "density.type");
  if (j.contains("weights")) d.weights = get_vector(j["weights"], "density.weights");
  if (j.contains("means")) d.means = get_matrix(j["means"], "density.means");
  if (j.contains("covariances")) {
    const auto& c = j["covariances"];
    if (!c.is_array()) throw ConfigError("density.covariances", "expected an array of matrices");
    d.covariances.clear();
    for (std::size_t i = 0; i < c.size(); ++i) {
      d.covariances.push_back(get_matrix(c[i], "density.covariances[" + std::to_string(i) + "]"));
    }
  }
  if (j.contains("diffusion")) d.diffusion = get_number(j["diffusion"], "density.diffusion");
  if (j.contains("rate")) d.rate = get_number(j["rate"], "density.rate");
  if (j.contains("horizon")) d.horizon = get_number(j["horizon"], "density.horizon");
  if (j.contains("initial_mean")) d.initial_mean = get_vector(j["initial_mean"], "density.initial_mean");
  if (j.contains("initial_covariance")) {
    d.initial_covariance = get_matrix(j["initial_covariance"], "density.initial_covariance");
  }
}

inline void parse_control(const json& j, ControlConfig& c) {
  reject_unknown(j, "control", {"kind", "magnitude", "normalize", "logistic"});
  if (j.contains("kind")) c.kind = get_string(j["kind"], "control.kind");
  if (j.contains("magnitude")) c.magnitude = get_number(j["magnitude"], "control.magnitude");
  if (j.contains("normalize")) c.normalize = get_bool(j["normalize"], "control.normalize");
  if (j.contains("logistic")) {
    const auto& l = j["logistic"];
    if (l.is_null()) {
      c.logistic.reset();
    } else {
      reject_unknown(l, "control.logistic", {"weight", "bias", "target_sign"});
      LogisticConfig lc = c.logistic.value_or(LogisticConfig{});
      if (l.contains("weight")) lc.weight = get_vector(l["weight"], "control.logistic.weight");
      if (l.contains("bias")) lc.bias = get_number(l["bias"], "control.logistic.bias");
      if (l.contains("target_sign")) lc.target_sign = get_int(l["target_sign"], "control.logistic.target_sign");
      c.logistic = lc;
    }
  }
}

}  // namespace detail

inline ExperimentConfig default_config(const std::string& name);

/// Parses a config document. Keys not present keep the scenario defaults;
/// unknown keys are rejected with their path.
inline ExperimentConfig parse_config(const std::string& text) {
  using nlohmann::json;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("<document>", std::string("invalid JSON: ") + e.what());
  }
  detail::reject_unknown(j, "", {"name", "seed", "seeds", "N", "K", "t_min", "dimension", "fine_steps", "density",
                                 "control", "metric", "schedule", "sweep", "output_dir"});
  if (!j.contains("name")) throw ConfigError("name", "missing scenario name");
  const std::string name = detail::get_string(j["name"], "name");
  if (!is_scenario(name)) throw ConfigError("name", "unknown scenario '" + name + "'");
  ExperimentConfig c = default_config(name);
  if (j.contains("seed")) c.seed = detail::get_u64(j["seed"], "seed");
  if (j.contains("seeds")) {
    const auto& s = j["seeds"];
    if (!s.is_array()) throw ConfigError("seeds", "expected an array of integers");
    c.seeds.clear();
    for (std::size_t i = 0; i < s.size(); ++i) c.seeds.push_back(detail::get_u64(s[i], "seeds[" + std::to_string(i) + "]"));
  }
  if (j.contains("N")) c.N = detail::get_int(j["N"], "N");
  if (j.contains("K")) c.K = detail::get_int(j["K"], "K");
  if (j.contains("t_min")) c.t_min = detail::get_number(j["t_min"], "t_min");
  if (j.contains("dimension")) c.dimension = detail::get_int(j["dimension"], "dimension");
  if (j.contains("fine_steps")) c.fine_steps = detail::get_int(j["fine_steps"], "fine_steps");
  if (j.contains("density")) detail::parse_density(j["density"], c.density);
  if (j.contains("control")) detail::parse_control(j["control"], c.control);
  if (j.contains("metric")) {
    const auto& m = j["metric"];
    detail::reject_unknown(m, "metric", {"kind", "matrix"});
    if (m.contains("kind")) c.metric.kind = detail::get_string(m["kind"], "metric.kind");
    if (m.contains("matrix")) c.metric.matrix = detail::get_matrix(m["matrix"], "metric.matrix");
  }
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    detail::reject_unknown(s, "schedule", {"kind", "window_fraction", "eta_max"});
    if (s.contains("kind")) c.schedule.kind = detail::get_string(s["kind"], "schedule.kind");
    if (s.contains("window_fraction")) c.schedule.window_fraction = detail::get_number(s["window_fraction"], "schedule.window_fraction");
    if (s.contains("eta_max")) c.schedule.eta_max = detail::get_number(s["eta_max"], "schedule.eta_max");
  }
  if (j.contains("sweep")) c.sweep = detail::get_vector(j["sweep"], "sweep");
  if (j.contains("output_dir")) c.output_dir = detail::get_string(j["output_dir"], "output_dir");
  validate_config(c);
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("<file>", "cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// ---------------------------------------------------------------------------
// Scenario defaults
// ---------------------------------------------------------------------------

inline std::vector<std::vector<double>> identity_rows(int d, double scale = 1.0) {
  std::vector<std::vector<double>> m(static_cast<std::size_t>(d), std::vector<double>(static_cast<std::size_t>(d), 0.0));
  for (int i = 0; i < d; ++i) m[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] = scale;
  return m;
}

inline DensityConfig default_mixture_density() {
  DensityConfig d;
  d.type = "mixture";
  d.weights = {0.5, 0.5};
  d.means = {{-1.5, 0.0}, {1.5, 0.0}};
  d.covariances = {identity_rows(2), identity_rows(2)};
  return d;
}

inline ExperimentConfig default_config(const std::string& name) {
  ExperimentConfig c;
  c.name = name;
  if (name == "toy1d_girsanov") {
    c.seed = 42;
    c.seeds = {42, 43, 44};
    c.N = 5000;
    c.K = 1000;
    c.t_min = 1e-3;
    c.dimension = 1;
    c.density.type = "mixture";
    c.density.weights = {1.0};
    c.density.means = {{0.0}};
    c.density.covariances = {{{0.25}}};
    c.control.kind = "prescribed";
    c.control.magnitude = 1.0;
    c.control.normalize = false;
  } else if (name == "gmm2d_fields") {
    c.seed = 7;
    c.N = 4096;
    c.K = 200;
    c.density = default_mixture_density();
    c.control.kind = "tangential";
    c.control.magnitude = 1.0;
    c.control.normalize = false;
  } else if (name == "dt_scaling") {
    c.seed = 1;
    c.N = 4096;
    c.K = 400;
    c.fine_steps = 400;
    c.density = default_mixture_density();
    c.control.kind = "tangential";
    c.control.magnitude = 10.0;
    c.control.normalize = false;
    c.sweep = {25, 50, 100, 200, 400};
  } else if (name == "robustness_quadratic") {
    c.seed = 11;
    c.N = 256;
    c.K = 100;
    c.dimension = 4;
    c.density.type = "mixture";
    c.density.weights = {0.5, 0.5};
    c.density.means = {{1.0, 0.5, 0.0, 0.0}, {-1.0, -0.5, 0.0, 0.0}};
    c.density.covariances = {identity_rows(4, 0.5), identity_rows(4, 0.5)};
    c.control.kind = "tangential";
    c.control.normalize = false;
    c.control.logistic = LogisticConfig{{1.0, -0.5, 0.75, 0.25}, 0.0, 1};
    c.metric.kind = "dense";
    c.metric.matrix = {{1.5, 0.2, 0.0, 0.1}, {0.2, 1.0, 0.1, 0.0}, {0.0, 0.1, 0.8, 0.05}, {0.1, 0.0, 0.05, 1.2}};
    c.sweep = {0.0125, 0.025, 0.05, 0.1, 0.2};
  } else if (name == "dpi_talagrand_ou") {
    c.seed = 5;
    c.N = 4096;
    c.K = 1000;
    c.t_min = 1e-3;
    c.density.type = "ou";
    c.density.rate = 1.0;
    c.density.diffusion = 1.0;
    c.density.horizon = 1.0;
    c.density.initial_mean = {0.0, 0.0};
    c.density.initial_covariance = identity_rows(2, 0.0);
    c.control.kind = "prescribed";
    c.control.normalize = false;
    c.sweep = {0.25, 0.5, 1.0, 2.0};
  } else if (name == "guided_attack") {
    c.seed = 3;
    c.N = 2048;
    c.K = 200;
    c.density.type = "mixture";
    c.density.weights = {0.5, 0.5};
    c.density.means = {{-1.5, 0.0}, {1.5, 0.0}};
    c.density.covariances = {{{0.25, 0.0}, {0.0, 9.0}}, {{0.25, 0.0}, {0.0, 9.0}}};
    c.control.kind = "tangential";
    c.control.normalize = true;
    c.control.logistic = LogisticConfig{{0.0, 1.0}, 0.0, 1};
    c.schedule.kind = "late_window_linear";
    c.schedule.window_fraction = 0.2;
    c.schedule.eta_max = 0.05;
    c.sweep = {0.01, 0.02, 0.05, 0.1};
  } else {
    throw ConfigError("name", "unknown scenario '" + name + "'");
  }
  return c;
}

}  // namespace dpaclab
