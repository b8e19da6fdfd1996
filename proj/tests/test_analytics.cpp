#include "dpaclab/analytics.hpp"
#include "dpaclab/assignment.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace dpaclab;

namespace {

StateVector vec(std::initializer_list<double> v) {
  StateVector x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double a : v) x[i++] = a;
  return x;
}

GaussianSummary gs(const StateVector& m, const Matrix& S) { return {m, S, 0}; }

Matrix scalar(double v) { return Matrix::Constant(1, 1, v); }

SampleSet gaussian_samples(std::uint64_t seed, int n, const StateVector& mean, double sd) {
  RngStream r(seed, 0);
  SampleSet x(n, mean.size());
  for (int i = 0; i < n; ++i) x.row(i) = (mean + sd * r.normal_vector(mean.size())).transpose();
  return x;
}

}  // namespace

TEST(Cpe, AllZeroEta) {
  const std::vector<double> eta = {0.0, 0.0};
  const std::vector<StateVector> u = {vec({1, 2}), vec({3, 4})};
  EXPECT_EQ(cpe(eta, u), 0.0);
}

TEST(Cpe, SingleStepArithmetic) {
  const std::vector<double> eta = {2.0};
  const std::vector<StateVector> u = {vec({1, 1})};
  EXPECT_EQ(cpe(eta, u), 4.0);
}

TEST(GaussianKl, Identical) {
  EXPECT_EQ(gaussian_kl(gs(vec({1, 2}), Matrix::Identity(2, 2)), gs(vec({1, 2}), Matrix::Identity(2, 2))), 0.0);
}

TEST(GaussianKl, MeanShift) { EXPECT_NEAR(gaussian_kl(gs(vec({1}), scalar(1)), gs(vec({0}), scalar(1))), 0.5, 1e-15); }

TEST(GaussianKl, VarianceRatio) {
  EXPECT_NEAR(gaussian_kl(gs(vec({0}), scalar(2)), gs(vec({0}), scalar(1))), 0.1534264097200273, 1e-15);
}

TEST(GaussianKl, MatchesTextbookFormula) {
  std::mt19937_64 gen(51);
  for (int i = 0; i < 50; ++i) {
    const int d = 1 + i % 4;
    const StateVector m1 = oracle::random_vector(gen, d), m0 = oracle::random_vector(gen, d);
    const Matrix S1 = oracle::random_spd(gen, d, 2.0), S0 = oracle::random_spd(gen, d, 2.0);
    EXPECT_NEAR(gaussian_kl(gs(m1, S1), gs(m0, S0)), oracle::gaussian_kl(m1, S1, m0, S0), 1e-10);
  }
}

TEST(GaussianW2, Identical) { EXPECT_EQ(gaussian_w2(gs(vec({1}), scalar(2)), gs(vec({1}), scalar(2))), 0.0); }

TEST(GaussianW2, Translation) {
  std::mt19937_64 gen(5);
  const Matrix S = oracle::random_spd(gen, 3);
  EXPECT_NEAR(gaussian_w2(gs(vec({1, 2, 3}), S), gs(vec({1, 0, 3}), S)), 2.0, 1e-7);
}

TEST(GaussianW2, OneDimensionalScale) { EXPECT_NEAR(gaussian_w2(gs(vec({0}), scalar(1)), gs(vec({0}), scalar(4))), 1.0, 1e-12); }

// Commuting covariances: W2^2 = |dm|^2 + sum (sqrt(a_i) - sqrt(b_i))^2.
TEST(GaussianW2, CommutingCovariances) {
  std::mt19937_64 gen(52);
  for (int i = 0; i < 20; ++i) {
    const Matrix Q = oracle::random_spd(gen, 3).householderQr().householderQ();
    const Eigen::Vector3d a(0.5, 2.0, 3.0), b(1.5, 0.2, 4.0);
    const Matrix A = Q * a.asDiagonal() * Q.transpose(), B = Q * b.asDiagonal() * Q.transpose();
    double ref = 1.0;
    for (int j = 0; j < 3; ++j) ref += std::pow(std::sqrt(a[j]) - std::sqrt(b[j]), 2);
    EXPECT_NEAR(gaussian_w2_squared(gs(vec({1, 0, 0}), A), gs(vec({0, 0, 0}), B)), ref, 1e-10);
  }
}

TEST(FitGaussian, NeedsEnoughSamples) { EXPECT_THROW(fit_gaussian(SampleSet::Zero(2, 2)), std::invalid_argument); }

TEST(FrechetFitDistance, SelfIsZero) {
  const SampleSet a = gaussian_samples(1, 500, vec({0, 0}), 1.0);
  EXPECT_NEAR(frechet_fit_distance(a, a), 0.0, 1e-12);
}

TEST(FrechetFitDistance, TranslationCase) {
  const int n = 20000;
  const SampleSet a = gaussian_samples(2, n, vec({0}), 1.0), b = gaussian_samples(3, n, vec({1}), 1.0);
  // Mean difference has sd sqrt(2/n); squared distance near 1 within a few of 2 sqrt(2/n).
  EXPECT_NEAR(frechet_fit_distance(a, b), 1.0, 8.0 * std::sqrt(2.0 / n));
}

TEST(FrechetFitDistance, ScalingByTwoQuadruples) {
  const SampleSet a = gaussian_samples(4, 3000, vec({0, 0}), 1.0), b = gaussian_samples(5, 3000, vec({0.5, -0.2}), 1.3);
  const Matrix E = 2.0 * Matrix::Identity(2, 2);
  EXPECT_NEAR(frechet_fit_distance(a, b, E), 4.0 * frechet_fit_distance(a, b), 1e-9);
}

TEST(FrechetFitDistance, Symmetric) {
  const SampleSet a = gaussian_samples(6, 1000, vec({0, 0}), 1.0), b = gaussian_samples(7, 1000, vec({1, 0}), 2.0);
  EXPECT_NEAR(frechet_fit_distance(a, b), frechet_fit_distance(b, a), 1e-10);
}

TEST(HungarianAssign, MatchesBruteForce) {
  std::mt19937_64 gen(53);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + trial % 7;
    Eigen::MatrixXd C(n, n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) C(i, j) = u(gen);
    }
    const auto col = hungarian_assign(C);
    double got = 0.0;
    for (int i = 0; i < n; ++i) got += C(i, col[static_cast<std::size_t>(i)]);
    std::vector<int> perm(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
    double best = 1e300;
    do {
      double c = 0.0;
      for (int i = 0; i < n; ++i) c += C(i, perm[static_cast<std::size_t>(i)]);
      best = std::min(best, c);
    } while (std::next_permutation(perm.begin(), perm.end()));
    EXPECT_NEAR(got, best, 1e-9);
  }
}

TEST(EmpiricalW2, SelfIsZero) {
  const SampleSet a = gaussian_samples(8, 30, vec({0, 0}), 1.0);
  EXPECT_EQ(empirical_w2(a, a).value, 0.0);
}

TEST(EmpiricalW2, UniformShift1D) {
  SampleSet a(2, 1), b(2, 1);
  a << 0, 0;
  b << 1, 1;
  const EmpiricalW2 w = empirical_w2(a, b);
  EXPECT_EQ(w.value, 1.0);
  EXPECT_EQ(w.method, W2Method::Sorted1D);
}

TEST(EmpiricalW2, HandInstanceMatchesEnumeration) {
  SampleSet a(4, 2), b(4, 2);
  a << 0, 0, 1, 0, 0, 1, 2, 2;
  b << 1, 1, -1, 0, 3, 1, 0, 2;
  const EmpiricalW2 w = empirical_w2(a, b);
  EXPECT_EQ(w.method, W2Method::ExactMatching);
  EXPECT_NEAR(w.value * w.value, oracle::brute_force_w2_squared(a, b), 1e-12);
}

TEST(EmpiricalW2, RandomSmallInstancesMatchEnumeration) {
  std::mt19937_64 gen(54);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 2 + trial % 6;
    SampleSet a(n, 3), b(n, 3);
    for (int i = 0; i < n; ++i) {
      a.row(i) = oracle::random_vector(gen, 3).transpose();
      b.row(i) = oracle::random_vector(gen, 3, 2.0).transpose();
    }
    const double w = empirical_w2(a, b).value;
    EXPECT_NEAR(w * w, oracle::brute_force_w2_squared(a, b), 1e-10);
  }
}

TEST(EmpiricalW2, AgreesWithGaussianW2OnLargeSamples) {
  const int n = 4096;
  for (int d : {1, 2}) {
    const StateVector shift = StateVector::Constant(d, 1.5);
    const SampleSet a = gaussian_samples(9, n, StateVector::Zero(d), 1.0), b = gaussian_samples(10, n, shift, 1.0);
    const EmpiricalW2 e = empirical_w2(a, b, 3);
    const double g = gaussian_w2(fit_gaussian(a), fit_gaussian(b));
    EXPECT_LT(std::abs(e.value - g) / g, 0.05) << "d=" << d << " method " << w2_method_name(e.method);
  }
}

TEST(DensityDrift, IdenticalIsZero) {
  const GaussianMixture m = default_mixture_2d();
  RngStream r(1, 1);
  SampleSet a(500, 2);
  for (int i = 0; i < 500; ++i) a.row(i) = m.sample(r).transpose();
  EXPECT_EQ(density_drift(a, a, m), 0.0);
}

TEST(DensityDrift, IndependentEnsemblesGiveSmallFloor) {
  const GaussianMixture m = default_mixture_2d();
  RngStream r1(1, 1), r2(2, 1);
  SampleSet a(4000, 2), b(4000, 2), c(4000, 2);
  for (int i = 0; i < 4000; ++i) {
    a.row(i) = m.sample(r1).transpose();
    b.row(i) = m.sample(r2).transpose();
    c.row(i) = (m.sample(r2) + vec({1.0, 0.0})).transpose();
  }
  const double floor = density_drift(a, b, m);
  EXPECT_GT(floor, 0.0);
  EXPECT_LT(floor, 0.15);
  EXPECT_GT(density_drift(a, c, m), 3.0 * floor);
}

TEST(DensityDrift, L1OfKdeIsAtMostTwo) {
  const GaussianMixture m = default_mixture_2d();
  // Disjoint supports on a grid that resolves the bandwidth: each estimate
  // carries unit mass, so the distance saturates at 2.
  const SampleSet a = gaussian_samples(11, 500, vec({-6, 0}), 1.0), b = gaussian_samples(12, 500, vec({6, 0}), 1.0);
  const KdeGrid g = kde_grid_for(GaussianMixture({1.0}, {vec({0, 0})}, {Matrix::Identity(2, 2) * 16.0}));
  const double d = density_drift(a, b, g);
  EXPECT_LE(d, 2.0 + 1e-6);
  EXPECT_GT(d, 1.99);
}

TEST(LoglogSlope, ExactSquare) {
  const std::vector<double> x = {0.1, 0.2, 0.4, 0.8}, y = {0.01, 0.04, 0.16, 0.64};
  const SlopeFit f = loglog_slope(x, y);
  EXPECT_NEAR(f.slope, 2.0, 1e-12);
  EXPECT_NEAR(f.r2, 1.0, 1e-12);
}

TEST(LoglogSlope, Constant) {
  const std::vector<double> x = {0.1, 0.2, 0.4, 0.8}, y = {3, 3, 3, 3};
  EXPECT_NEAR(loglog_slope(x, y).slope, 0.0, 1e-14);
}

TEST(LoglogSlope, NoisyPowerLaw) {
  std::mt19937_64 gen(55);
  std::normal_distribution<double> n(0.0, 0.01);
  std::vector<double> x, y;
  for (int i = 0; i < 8; ++i) {
    x.push_back(0.01 * std::pow(2.0, i));
    y.push_back(3.0 * std::pow(x.back(), 1.5) * (1.0 + n(gen)));
  }
  EXPECT_NEAR(loglog_slope(x, y).slope, 1.5, 0.1);
}

TEST(LoglogSlope, RejectsNonPositive) {
  const std::vector<double> x = {0.1, 0.2, 0.3}, y = {1.0, 0.0, 1.0};
  EXPECT_THROW(loglog_slope(x, y), std::invalid_argument);
}

TEST(BoundChecks, ZeroControlTrivial) {
  const GaussianSummary p = gs(vec({0, 0}), Matrix::Identity(2, 2));
  for (const auto& c : check_dpi_and_talagrand(0.0, p, p, 1.0)) {
    EXPECT_TRUE(c.satisfied) << c.name;
    EXPECT_EQ(c.lhs, 0.0);
  }
}

TEST(BoundChecks, OuClosedFormDpiStrict) {
  OuProcess p{1.0, 1.0, {vec({0.0}), Matrix::Zero(1, 1)}};
  const GaussianSummary pu = summary_of(ou_controlled_marginal(1.0, p, vec({1.0})));
  const GaussianSummary p0 = summary_of(ou_marginal(1.0, p));
  const double shift = 1.0 - std::exp(-1.0), var = 0.5 * (1.0 - std::exp(-2.0));
  const double kl = shift * shift / (2.0 * var);
  EXPECT_NEAR(gaussian_kl(pu, p0), kl, 1e-15);
  EXPECT_NEAR(kl, 0.46211715726000974, 1e-15);
  const auto checks = check_dpi_and_talagrand(0.5, pu, p0, var);
  EXPECT_TRUE(checks[0].satisfied);
  EXPECT_LT(checks[0].lhs, checks[0].rhs);
}

TEST(BoundChecks, TalagrandEqualityUnderTranslation) {
  const double s2 = 0.7;
  const GaussianSummary a = gs(vec({0.3, -0.4}), s2 * Matrix::Identity(2, 2)), b = gs(vec({0, 0}), s2 * Matrix::Identity(2, 2));
  const double w2 = gaussian_w2_squared(a, b);
  const double rhs = 2.0 * s2 * gaussian_kl(a, b);
  EXPECT_NEAR(w2, 0.25, 1e-12);
  EXPECT_NEAR(w2, rhs, 1e-12);
  EXPECT_TRUE(check_dpi_and_talagrand(1.0, a, b, s2)[1].satisfied);
}

TEST(BoundChecks, NonIsotropicTalagrandSkipped) {
  Matrix S(2, 2);
  S << 1, 0, 0, 2;
  const auto checks = check_dpi_and_talagrand(1.0, gs(vec({0.1, 0}), S), gs(vec({0, 0}), S), 1.0);
  EXPECT_TRUE(checks[1].skipped);
}

TEST(FidChain, ZeroControlWithinSlackAndHomogeneous) {
  const SampleSet a = gaussian_samples(13, 2000, vec({0, 0}), 1.0);
  const BoundCheck c = fid_chain_check(0.0, a, a, std::nullopt, 1.0, 1);
  EXPECT_LE(c.lhs, c.slack + 1e-7);

  const SampleSet b = gaussian_samples(13, 2000, vec({0.3, 0}), 1.0);
  const BoundCheck c1 = fid_chain_check(0.1, b, a, std::nullopt, 1.0, 1);
  const BoundCheck c2 = fid_chain_check(0.1, b, a, Matrix(2.0 * Matrix::Identity(2, 2)), 1.0, 1);
  EXPECT_NEAR(c2.lhs, 2.0 * c1.lhs, 1e-9);
  EXPECT_NEAR(c2.rhs, 2.0 * c1.rhs, 1e-12);
  EXPECT_EQ(c1.satisfied, c2.satisfied);
}

TEST(AdjointGain, ZeroPerturbation) {
  OuProcess p{1.0, 1.0, {vec({0.0}), Matrix::Zero(1, 1)}};
  const AdjointGain g = adjoint_gain_check(p, vec({1.0}), vec({0.0}), 0.1, make_horizon_grid(100, 1.0), 200, 1);
  EXPECT_EQ(g.predicted, 0.0);
  EXPECT_EQ(g.measured, 0.0);
}

TEST(AdjointGain, BrownianBed) {
  OuProcess p{0.0, 1.0, {vec({0.0}), Matrix::Zero(1, 1)}};
  const AdjointGain g = adjoint_gain_check(p, vec({1.0}), vec({1.0}), 0.1, make_horizon_grid(200, 1.0), 1000, 1);
  EXPECT_NEAR(g.predicted, 0.1, 1e-12);
  EXPECT_LE(std::abs(g.measured - g.predicted), 3.0 * g.standard_error + 1e-12);
}

TEST(AdjointGain, OuBedPrediction) {
  OuProcess p{1.0, 1.0, {vec({0.0}), Matrix::Zero(1, 1)}};
  const AdjointGain g = adjoint_gain_check(p, vec({1.0}), vec({1.0}), 0.1, make_horizon_grid(1000, 1.0), 1000, 1);
  const double ref = oracle::simpson([](double t) { return 0.1 * std::exp(-(1.0 - t)); }, 0.0, 1.0, 4000);
  EXPECT_NEAR(g.predicted, 0.06321205588285577, 1e-12);
  EXPECT_NEAR(g.predicted, ref, 1e-12);
  EXPECT_LE(std::abs(g.measured - g.predicted), 3.0 * g.standard_error + 5.0 * 0.01);
}

TEST(GirsanovPathKl, RejectsCpeEnsembles) {
  CoupledEnsemble e;
  e.estimator = EnergyEstimator::Cpe;
  EXPECT_THROW(girsanov_path_kl(e), std::invalid_argument);
}
