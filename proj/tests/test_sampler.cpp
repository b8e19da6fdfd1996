#include "dpaclab/analytics.hpp"
#include "dpaclab/sampler.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace dpaclab;

namespace {

StateVector vec(std::initializer_list<double> v) {
  StateVector x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double a : v) x[i++] = a;
  return x;
}

SdeSpec null_spec(double g) {
  SdeSpec s;
  s.dimension = 1;
  s.direction = Direction::Forward;
  s.drift = [](const StateVector& x, double) -> StateVector { return StateVector::Zero(x.size()); };
  s.diffusion = [g](double) { return g; };
  return s;
}

SdeSpec toy_spec() {
  SdeSpec s = null_spec(1.0);
  s.drift = [](const StateVector&, double t) -> StateVector { return StateVector::Constant(1, std::log(t)); };
  return s;
}

ControlSpec prescribed(std::function<StateVector(const StateVector&, double)> f) {
  ControlSpec c;
  c.kind = ControlKind::Prescribed;
  c.field = std::move(f);
  return c;
}

InitialSampler normal_prior(double sd, int d = 1) {
  return [sd, d](RngStream& r) -> StateVector { return sd * r.normal_vector(d); };
}

ControlSpec guided(ControlKind kind, const GaussianMixture&, const SdeSpec& spec, int K, double eta, bool normalize = true) {
  const SensitivityOracle o = make_logistic_target_loss(vec({0.0, 1.0}), 0.0, 1);
  return build_control_field(kind, o, spec.score, Metric::identity(), late_window(K, eta), normalize);
}

}  // namespace

TEST(EmStep, NullDynamics) {
  EXPECT_EQ(em_step(vec({0.7}), 0.5, 0.1, null_spec(1.0), vec({0.0}), vec({0.0})), vec({0.7}));
}

TEST(EmStep, DriftOnly) { EXPECT_DOUBLE_EQ(em_step(vec({0}), 0.5, 0.25, null_spec(1.0), vec({2.0}), vec({0.0}))[0], 0.5); }

TEST(EmStep, NoiseOnly) { EXPECT_DOUBLE_EQ(em_step(vec({0}), 0.5, 0.25, null_spec(2.0), vec({0.0}), vec({1.0}))[0], 1.0); }

TEST(EmStep, RejectsNonPositiveDt) {
  EXPECT_THROW(em_step(vec({0}), 0.5, 0.0, null_spec(1.0), vec({0}), vec({0})), std::invalid_argument);
}

TEST(EmStep, NonFiniteNamesStep) {
  SdeSpec s = null_spec(1.0);
  s.drift = [](const StateVector& x, double) -> StateVector { return StateVector::Constant(x.size(), 1e308); };
  try {
    em_step(vec({1e308}), 0.5, 10.0, s, vec({0}), vec({0}), StepContext{7, 3});
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 7"), std::string::npos);
  }
}

TEST(SimulateCoupled, ZeroControlChainsIdentical) {
  const GaussianMixture mix = default_mixture_2d();
  const SdeSpec spec = ve_reverse_sde(mix);
  const CoupledEnsemble ens =
      simulate_coupled(spec, ControlSpec{}, make_time_grid(50, 1e-3), 300, 4,
                       [mix](RngStream& r) { return mix.sample(r, 1.0); }, {.keep_paths = true, .keep_records = true});
  for (int n = 0; n < 300; ++n) {
    EXPECT_EQ(ens.nominal_paths[static_cast<std::size_t>(n)], ens.controlled_paths[static_cast<std::size_t>(n)]);
    for (const auto& r : ens.records[static_cast<std::size_t>(n)]) {
      EXPECT_EQ(r.u_raw_sq, 0.0);
      EXPECT_EQ(r.u_applied_sq, 0.0);
    }
  }
  EXPECT_EQ(girsanov_path_kl(ens).value, 0.0);
}

TEST(SimulateCoupled, WorkerCountInvariance) {
  const GaussianMixture mix = default_mixture_2d();
  const SdeSpec spec = ve_reverse_sde(mix);
  const ControlSpec c = guided(ControlKind::TangentialProjected, mix, spec, 40, 0.3, false);
  ControlSpec drift = c;
  drift.schedule = constant_schedule(40, 0.5);
  const auto prior = [mix](RngStream& r) { return mix.sample(r, 1.0); };
  const TimeGrid grid = make_time_grid(40, 1e-3);
  const CoupledEnsemble a = simulate_coupled(spec, drift, grid, 700, 9, prior, {.workers = 1, .keep_paths = true});
  const CoupledEnsemble b = simulate_coupled(spec, drift, grid, 700, 9, prior, {.workers = 8, .keep_paths = true});
  EXPECT_EQ(a.controlled_terminal, b.controlled_terminal);
  EXPECT_EQ(a.controlled_paths, b.controlled_paths);
  EXPECT_EQ(girsanov_path_kl(a).value, girsanov_path_kl(b).value);
  for (std::size_t k = 0; k < a.steps.size(); ++k) EXPECT_EQ(a.steps[k].girsanov, b.steps[k].girsanov);
  const CoupledEnsemble ga = dpac_guided_sample(spec, c, grid, 700, 9, prior, {.workers = 1});
  const CoupledEnsemble gb = dpac_guided_sample(spec, c, grid, 700, 9, prior, {.workers = 8});
  EXPECT_EQ(ga.controlled_terminal, gb.controlled_terminal);
  EXPECT_EQ(cpe(ga).kind, cpe(gb).kind);
}

TEST(SimulateCoupled, SharedNoiseAcrossKinds) {
  const GaussianMixture mix = default_mixture_2d();
  const SdeSpec spec = ve_reverse_sde(mix);
  const auto prior = [mix](RngStream& r) { return mix.sample(r, 1.0); };
  const TimeGrid grid = make_time_grid(30, 1e-3);
  const CoupledEnsemble a = dpac_guided_sample(spec, guided(ControlKind::RawGradient, mix, spec, 30, 0.2), grid, 100, 2, prior);
  const CoupledEnsemble b =
      dpac_guided_sample(spec, guided(ControlKind::TangentialProjected, mix, spec, 30, 0.2), grid, 100, 2, prior);
  EXPECT_EQ(a.nominal_terminal, b.nominal_terminal);
  EXPECT_EQ(a.initial, b.initial);
}

// Toy of the log-drift diffusion: deterministic integrand and mean gap.
TEST(SimulateCoupled, ToyEnergyAndMeanGap) {
  const TimeGrid grid = make_time_grid(1000, 1e-3);
  const CoupledEnsemble ens =
      simulate_coupled(toy_spec(), prescribed([](const StateVector&, double t) { return vec({-2.0 * std::log(t)}); }), grid, 5000,
                       42, normal_prior(0.5));
  // Midpoint-rule sums of 2 ln^2 t and -2 ln t on the same grid.
  double e = 0.0, gap = 0.0;
  for (int k = 1; k <= 1000; ++k) {
    const double tm = 0.5 * (grid.time(k - 1) + grid.time(k));
    e += 2.0 * std::log(tm) * std::log(tm) * grid.dt(k);
    gap += -2.0 * std::log(tm) * grid.dt(k);
  }
  const PathKl kl = girsanov_path_kl(ens);
  EXPECT_NEAR(kl.value, e, 1e-10);
  EXPECT_EQ(kl.standard_error, 0.0);
  const double analytic = 2.0 * (2.0 - 1e-3 * (std::log(1e-3) * std::log(1e-3) - 2 * std::log(1e-3) + 2));
  EXPECT_NEAR(kl.value, analytic, 2e-3);
  std::vector<double> d(5000);
  for (int i = 0; i < 5000; ++i) d[static_cast<std::size_t>(i)] = ens.controlled_terminal(i, 0) - ens.nominal_terminal(i, 0);
  EXPECT_NEAR(compensated_mean(d), gap, 1e-10);
  EXPECT_NEAR(compensated_mean(d), 2.0 * (1.0 - 1e-3 + 1e-3 * std::log(1e-3)), 1e-3);
  // The log-likelihood-ratio estimator agrees within three standard errors.
  EXPECT_LT(std::abs(kl.log_ratio - kl.value), 3.0 * kl.log_ratio_se);
  // Cumulative energy ends at the terminal value.
  EXPECT_NEAR(kl.cumulative.y.back(), kl.value, 1e-12);
}

TEST(SimulateCoupled, OuConstantControlEnergyExact) {
  OuProcess p{1.0, 1.0, {vec({0.0}), Matrix::Zero(1, 1)}};
  const TimeGrid grid = make_horizon_grid(1000, 1.0);
  for (double c : {0.25, 0.5, 1.0, 2.0}) {
    const CoupledEnsemble ens = simulate_coupled(ou_sde(p), prescribed([c](const StateVector&, double) { return vec({c}); }), grid,
                                                 500, 1, [p](RngStream& r) { return sample_gaussian(p.initial, r); });
    EXPECT_NEAR(girsanov_path_kl(ens).value, 0.5 * c * c, 1e-9);
  }
}

TEST(SimulateCoupled, FineBrownianPathSharedAcrossK) {
  // Brownian motion with zero drift: terminal state is the sum of all fine
  // increments whatever the coarse step count.
  const SdeSpec spec = null_spec(1.0);
  SimulationOptions o;
  o.fine_steps = 64;
  const auto prior = normal_prior(0.0);
  const CoupledEnsemble a = simulate_coupled(spec, ControlSpec{}, make_time_grid(8, 0.5), 50, 3, prior, o);
  const CoupledEnsemble b = simulate_coupled(spec, ControlSpec{}, make_time_grid(64, 0.5), 50, 3, prior, o);
  EXPECT_LT((a.nominal_terminal - b.nominal_terminal).cwiseAbs().maxCoeff(), 1e-12);
  o.fine_steps = 60;
  EXPECT_THROW(simulate_coupled(spec, ControlSpec{}, make_time_grid(8, 0.5), 50, 3, prior, o), std::invalid_argument);
}

TEST(SimulateCoupled, ScheduleLengthMustMatchGrid) {
  const GaussianMixture mix = default_mixture_2d();
  const SdeSpec spec = ve_reverse_sde(mix);
  EXPECT_THROW(simulate_coupled(spec, guided(ControlKind::RawGradient, mix, spec, 20, 0.1), make_time_grid(30, 1e-3), 10, 1,
                                [mix](RngStream& r) { return mix.sample(r, 1.0); }),
               std::invalid_argument);
}

TEST(DpacGuidedSample, ZeroEtaIsNominal) {
  const GaussianMixture mix = default_mixture_2d();
  const SdeSpec spec = ve_reverse_sde(mix);
  const CoupledEnsemble ens = dpac_guided_sample(spec, guided(ControlKind::RawGradient, mix, spec, 50, 0.0), make_time_grid(50, 1e-3),
                                                 200, 3, [mix](RngStream& r) { return mix.sample(r, 1.0); });
  EXPECT_EQ(ens.controlled_terminal, ens.nominal_terminal);
  EXPECT_EQ(cpe(ens).kind, 0.0);
}

TEST(DpacGuidedSample, RecordsSatisfyPythagorasAndCpeSplit) {
  const GaussianMixture mix = default_mixture_2d();
  const SdeSpec spec = ve_reverse_sde(mix);
  const auto prior = [mix](RngStream& r) { return mix.sample(r, 1.0); };
  const TimeGrid grid = make_time_grid(60, 1e-3);
  SimulationOptions o;
  o.keep_records = true;
  const CoupledEnsemble raw = dpac_guided_sample(spec, guided(ControlKind::RawGradient, mix, spec, 60, 0.2), grid, 300, 5, prior, o);
  for (const auto& recs : raw.records) {
    for (const auto& r : recs) {
      if (r.eta == 0.0) continue;
      EXPECT_NEAR(r.u_par_sq + r.u_perp_sq, r.u_raw_sq, 1e-9 * r.u_raw_sq);
    }
  }
  // Raw CPE splits into the normal and tangential parts of the same vectors.
  const CpeSummary s = cpe(raw);
  EXPECT_NEAR(s.parallel + s.perpendicular, s.raw, 1e-9 * s.raw);
  EXPECT_EQ(s.kind, s.raw);
}

TEST(DpacGuidedSample, TangentialDirectionOrthogonalToScore) {
  const GaussianMixture mix = default_mixture_2d();
  const SdeSpec spec = ve_reverse_sde(mix);
  const SensitivityOracle o = make_logistic_target_loss(vec({0.0, 1.0}), 0.0, 1);
  std::mt19937_64 gen(41);
  for (int i = 0; i < 300; ++i) {
    const StateVector x = oracle::random_vector(gen, 2, 2.0);
    const double t = 0.01 + 0.9 * (i % 10) / 10.0;
    const StateVector s = spec.score(x, t);
    const StateVector w = -o.gradient(x);
    const ControlSplit sp = split_control(ControlKind::TangentialProjected, w, s, Metric::identity(), t);
    const StateVector dir = normalize_direction(sp.selected);
    // Residual normal part left by the eps denominator: |<w,s>| eps / (|s|^2 + eps).
    const double residual = std::abs(w.dot(s)) * kProjectionEps / (s.squaredNorm() + kProjectionEps);
    EXPECT_LE(std::abs(dir.dot(s)), residual / sp.selected.norm() + 1e-14 * s.norm());
  }
}

TEST(DpacGuidedSample, TargetLogitGainPositive) {
  const GaussianMixture mix = default_mixture_2d();
  const SdeSpec spec = ve_reverse_sde(mix);
  const auto prior = [mix](RngStream& r) { return mix.sample(r, 1.0); };
  const TimeGrid grid = make_time_grid(200, 1e-3);
  for (ControlKind k : {ControlKind::RawGradient, ControlKind::TangentialProjected}) {
    const CoupledEnsemble ens = dpac_guided_sample(spec, guided(k, mix, spec, 200, 0.05), grid, 2000, 7, prior);
    std::vector<double> gain(2000);
    for (int i = 0; i < 2000; ++i) gain[static_cast<std::size_t>(i)] = ens.controlled_terminal(i, 1) - ens.nominal_terminal(i, 1);
    const double m = compensated_mean(gain);
    EXPECT_GT(m, 3.0 * sample_sd(gain) / std::sqrt(2000.0)) << control_kind_name(k);
  }
}

TEST(DpacGuidedSample, RejectsNonGradientKinds) {
  const GaussianMixture mix = default_mixture_2d();
  const SdeSpec spec = ve_reverse_sde(mix);
  EXPECT_THROW(dpac_guided_sample(spec, ControlSpec{}, make_time_grid(10, 1e-3), 10, 1,
                                  [mix](RngStream& r) { return mix.sample(r, 1.0); }),
               std::invalid_argument);
}

TEST(TrajectoryCsv, HeaderAndRowCount) {
  const auto path = std::filesystem::temp_directory_path() / "dpaclab_traj_test.csv";
  const CoupledEnsemble ens = simulate_coupled(null_spec(1.0), ControlSpec{}, make_time_grid(5, 0.5), 3, 1, normal_prior(1.0),
                                               {.keep_paths = true});
  write_trajectory_csv(ens, path.string());
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "traj,k,t,x0_nominal,x0_controlled");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 3 * 6);
  std::filesystem::remove(path);
}
