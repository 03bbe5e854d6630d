#include <gtest/gtest.h>

#include <numbers>

#include "support.hpp"

using namespace annofa;

TEST(RegularizedScale, LimitCases) {
  EXPECT_NEAR(regularized_scale(1.0, 1.0, 1.0), 1.0 / std::sqrt(2.0), 1e-9);
  EXPECT_NEAR(regularized_scale(2.0, 1.0, 1e9), 2.0, 1e-9);
  EXPECT_NEAR(regularized_scale(1e9, 1.0, 0.05), 0.05, 1e-9);
}

TEST(RegularizedScale, MatchesSquaredForm) {
  Rng rng = make_rng(3, 3);
  std::lognormal_distribution<double> pos(0.0, 2.0);
  for (int i = 0; i < 1000; ++i) {
    const double l = pos(rng), t = pos(rng), c = pos(rng);
    const double direct = std::sqrt(c * c * l * l / (c * c + t * t * l * l));
    EXPECT_NEAR(regularized_scale(l, t, c), direct, 1e-12 * direct);
  }
}

TEST(RegularizedScale, MonotoneOnGrid) {
  auto axis = [](int i) { return std::pow(10.0, -3.0 + 6.0 * i / 49.0); };
  for (int a = 0; a < 50; ++a)
    for (int b = 0; b < 50; ++b)
      for (int c = 1; c < 50; ++c) {
        // nondecreasing in lambda and in c, nonincreasing in tau
        EXPECT_GE(regularized_scale(axis(c), axis(a), axis(b)), regularized_scale(axis(c - 1), axis(a), axis(b)));
        EXPECT_GE(regularized_scale(axis(a), axis(b), axis(c)), regularized_scale(axis(a), axis(b), axis(c - 1)));
        EXPECT_LE(regularized_scale(axis(a), axis(c), axis(b)), regularized_scale(axis(a), axis(c - 1), axis(b)));
      }
}

TEST(RegularizedScale, TwoRegimeBound) {
  Rng rng = make_rng(4, 4);
  std::lognormal_distribution<double> pos(0.0, 3.0);
  for (int i = 0; i < 10000; ++i) {
    const double l = pos(rng), t = pos(rng), c = pos(rng);
    EXPECT_LT(regularized_scale(l, t, c), std::min(l, c / t) + 1e-12);
  }
}

TEST(RegularizedScale, RejectsBadInput) {
  EXPECT_THROW(regularized_scale(0.0, 1.0, 1.0), DomainError);
  EXPECT_THROW(regularized_scale(1.0, -1.0, 1.0), DomainError);
  EXPECT_THROW(regularized_scale(1.0, 1.0, std::numeric_limits<double>::infinity()), DomainError);
  EXPECT_THROW(regularized_scale(std::nan(""), 1.0, 1.0), DomainError);
}

TEST(SlabWidths, KindRules) {
  AnnotationMask mask;
  mask.active.resize(3, 3);
  mask.active.col(0) << true, false, true;
  mask.active.col(1).setConstant(false);
  mask.active.col(2).setConstant(true);
  mask.kinds = {FactorKind::annotated, FactorKind::sparse, FactorKind::dense};
  mask.factor_names = {"a", "s", "d"};
  const Matrix c = slab_widths(mask, mask.matching_config());
  Matrix expected(3, 3);
  expected << 1.0, 0.05, 1.0, 0.05, 0.05, 1.0, 1.0, 0.05, 1.0;
  EXPECT_EQ(c, expected);
  for (Index i = 0; i < c.size(); ++i) EXPECT_TRUE(c.data()[i] == 1.0 || c.data()[i] == 0.05);
}

TEST(SlabWidths, CountMismatchThrows) {
  AnnotationMask mask = testing_support::all_annotated(BoolMatrix::Constant(3, 2, true));
  FactorConfig c = mask.matching_config();
  c.n_annotated = 1;
  c.n_dense_unannotated = 1;
  EXPECT_THROW(slab_widths(mask, c), ConfigError);
}

TEST(WeightPriorScale, Examples) {
  auto s = HorseshoeState::make(1.0, Matrix::Ones(2, 2), Matrix::Constant(2, 2, 1e12));
  EXPECT_LT((weight_prior_scale(s) - Matrix::Ones(2, 2)).cwiseAbs().maxCoeff(), 1e-9);
  s = HorseshoeState::make(0.1, Matrix::Ones(1, 1), Matrix::Ones(1, 1));
  EXPECT_NEAR(weight_prior_scale(s)(0, 0), 0.1 * std::sqrt(1.0 / 1.01), 1e-12);
  EXPECT_NEAR(weight_prior_scale(s)(0, 0), 0.09950, 1e-5);
}

TEST(WeightPriorScale, ScalarRecomputation) {
  Rng rng = make_rng(7, 7);
  Matrix lambda(6, 4), slab(6, 4);
  std::lognormal_distribution<double> pos(0.0, 1.5);
  for (Index i = 0; i < lambda.size(); ++i) {
    lambda.data()[i] = pos(rng);
    slab.data()[i] = pos(rng);
  }
  const double tau = 0.3;
  const auto s = HorseshoeState::make(tau, lambda, slab);
  EXPECT_TRUE(validate(s).empty());
  const Matrix scale = weight_prior_scale(s);
  for (Index g = 0; g < 6; ++g)
    for (Index k = 0; k < 4; ++k) {
      const double l = lambda(g, k), c = slab(g, k);
      const double lt2 = c * c * l * l / (c * c + tau * tau * l * l);
      EXPECT_NEAR(scale(g, k), tau * std::sqrt(lt2), 1e-12);
      EXPECT_LE(scale(g, k), c * (1.0 + 1e-12));
    }
}

TEST(HorseshoeState, ValidateFlagsBrokenDerivedScale) {
  auto s = HorseshoeState::make(1.0, Matrix::Ones(2, 1), Matrix::Ones(2, 1));
  s.lambda_tilde(1, 0) = 2.0;
  EXPECT_EQ(validate(s).size(), 2u);
}

TEST(HalfCauchy, PointValues) {
  EXPECT_NEAR(half_cauchy_log_density(1e-12, 1.0), std::log(2.0 / std::numbers::pi), 1e-9);
  EXPECT_NEAR(half_cauchy_log_density(1e-12, 1.0), -0.45158, 1e-5);
  EXPECT_NEAR(half_cauchy_log_density(1.0, 1.0), -1.14473, 1e-5);
  EXPECT_THROW(half_cauchy_log_density(0.0, 1.0), DomainError);
  EXPECT_THROW(half_cauchy_log_density(1.0, -2.0), DomainError);
}

TEST(HalfCauchy, IntegratesToOne) {
  // x = scale * u / (1 - u) maps (0, 1) onto (0, inf); composite Simpson in u.
  for (double scale : {0.1, 1.0, 7.0}) {
    const int n = 20000;
    const double h = 1.0 / n;
    auto f = [&](double u) {
      if (u >= 1.0) return 0.0;
      const double x = std::max(scale * u / (1.0 - u), 1e-300);
      return std::exp(half_cauchy_log_density(x, scale)) * scale / ((1.0 - u) * (1.0 - u));
    };
    double sum = f(0.0) + 2.0 / std::numbers::pi;  // integrand tends to 2/pi at u = 1
    for (int i = 1; i < n; ++i) sum += (i % 2 ? 4.0 : 2.0) * f(i * h);
    EXPECT_NEAR(sum * h / 3.0, 1.0, 1e-6) << "scale " << scale;
  }
}

TEST(PriorSampling, ShrinkageLimit) {
  auto s = HorseshoeState::make(1.0, Matrix::Ones(500, 1), Matrix::Constant(500, 1, 1e-6));
  const Matrix w = sample_weights_from_prior(s, 1);
  double ss = w.squaredNorm() / 500.0;
  EXPECT_LT(std::sqrt(ss), 1e-6 * 1.2);
  EXPECT_LT(w.cwiseAbs().maxCoeff(), 1e-5);
}

TEST(PriorSampling, UnitScaleMoment) {
  auto s = HorseshoeState::make(1.0, Matrix::Constant(1000, 100, 1e12), Matrix::Constant(1000, 100, 1e12));
  s.lambda_tilde.setOnes();
  const Matrix w = sample_weights_from_prior(s, 5);
  const double mean = w.mean();
  const double sd = std::sqrt((w.array() - mean).square().sum() / static_cast<double>(w.size() - 1));
  EXPECT_NEAR(sd, 1.0, 0.01);
}

TEST(PriorSampling, Deterministic) {
  auto s = HorseshoeState::make(0.5, Matrix::Ones(10, 3), Matrix::Ones(10, 3));
  EXPECT_EQ(sample_weights_from_prior(s, 9), sample_weights_from_prior(s, 9));
  EXPECT_NE(sample_weights_from_prior(s, 9), sample_weights_from_prior(s, 10));
}
