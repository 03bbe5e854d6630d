#include <gtest/gtest.h>

#include <set>

#include "support.hpp"

using namespace annofa;

namespace {

struct Tiny {
  ExpressionMatrix y;
  AnnotationMask mask;
  FactorConfig config;
  Matrix slab;
};

// N x G data with a mixed-kind mask (annotated columns first, then one dense).
Tiny tiny(Index N, Index G, Index K, std::uint64_t seed, bool missing = false) {
  Tiny t;
  Rng rng = make_rng(seed, 99);
  t.y = ExpressionMatrix::from_dense(normal_matrix(N, G, rng));
  if (missing) {
    t.y.observed = BoolMatrix::Constant(N, G, true);
    t.y.observed(0, 0) = false;
    t.y.observed(N - 1, G - 1) = false;
  }
  t.mask.active = BoolMatrix::Constant(G, K, true);
  for (Index k = 0; k + 1 < K; ++k) {
    t.mask.kinds.push_back(FactorKind::annotated);
    for (Index g = 0; g < G; ++g) t.mask.active(g, k) = (g + k) % 2 == 0;
  }
  t.mask.kinds.push_back(FactorKind::dense);
  for (Index k = 0; k < K; ++k) t.mask.factor_names.push_back("f" + std::to_string(k));
  t.config = t.mask.matching_config();
  t.slab = slab_widths(t.mask, t.config);
  return t;
}

VariationalPosterior random_point(const Tiny& t, std::uint64_t seed) {
  auto q = init_posterior(t.y, t.mask, t.config, seed);
  Rng rng = make_rng(seed, 5);
  std::normal_distribution<double> loc(0.0, 0.5), ls(-1.0, 0.3);
  for (auto* b : {&q.z, &q.x, &q.log_lambda, &q.log_sigma2, &q.log_tau}) {
    for (Index i = 0; i < b->loc.size(); ++i) b->loc.data()[i] = loc(rng);
    for (Index i = 0; i < b->log_scale.size(); ++i) b->log_scale.data()[i] = ls(rng);
  }
  return q;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double se_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

}  // namespace

TEST(InitPosterior, ShapesAndDeterminism) {
  auto t = tiny(3, 2, 1, 1);
  const auto q = init_posterior(t.y, t.mask, t.config, 4);
  EXPECT_EQ(q.x.loc.rows(), 3);
  EXPECT_EQ(q.x.loc.cols(), 1);
  EXPECT_EQ(q.z.loc.rows(), 2);
  EXPECT_EQ(q.z.loc.cols(), 1);
  EXPECT_EQ(q.log_sigma2.loc.size(), 2);
  EXPECT_EQ(q.log_tau.loc.size(), 1);
  EXPECT_EQ(q.flatten(), init_posterior(t.y, t.mask, t.config, 4).flatten());
  EXPECT_NE(q.flatten(), init_posterior(t.y, t.mask, t.config, 5).flatten());
  EXPECT_DOUBLE_EQ(q.z.log_scale(0, 0), std::log(0.1));
}

TEST(InitPosterior, LocationsAreSmall) {
  auto t = tiny(2500, 2, 2, 1);
  const auto q = init_posterior(t.y, t.mask, t.config, 8);
  ASSERT_GE(q.x.loc.size(), 5000);
  EXPECT_LT(q.x.loc.cwiseAbs().maxCoeff(), 1.0);
  const double sd = std::sqrt(q.x.loc.squaredNorm() / static_cast<double>(q.x.loc.size()));
  EXPECT_NEAR(sd, 0.1, 0.005);
}

TEST(InitPosterior, ShapeMismatch) {
  auto t = tiny(3, 2, 2, 1);
  FactorConfig bad = t.config;
  bad.n_annotated += 1;
  EXPECT_THROW(init_posterior(t.y, t.mask, bad, 1), ShapeError);
}

TEST(MakeBatches, FullBatchIsPermutation) {
  const auto b = make_batches(10, 10, 1, 0);
  ASSERT_EQ(b.size(), 1u);
  std::set<Index> s(b[0].begin(), b[0].end());
  EXPECT_EQ(s.size(), 10u);
  EXPECT_EQ(*s.begin(), 0);
  EXPECT_EQ(*s.rbegin(), 9);
}

TEST(MakeBatches, PartitionSizes) {
  const auto b = make_batches(10, 3, 2, 0);
  ASSERT_EQ(b.size(), 4u);
  EXPECT_EQ(b[0].size(), 3u);
  EXPECT_EQ(b[1].size(), 3u);
  EXPECT_EQ(b[2].size(), 3u);
  EXPECT_EQ(b[3].size(), 1u);
  std::vector<int> seen(10, 0);
  for (const auto& chunk : b)
    for (Index i : chunk) ++seen[static_cast<std::size_t>(i)];
  for (int c : seen) EXPECT_EQ(c, 1);
}

TEST(MakeBatches, DeterministicPerSeedAndEpoch) {
  EXPECT_EQ(make_batches(50, 7, 3, 2), make_batches(50, 7, 3, 2));
  EXPECT_NE(make_batches(50, 7, 3, 2), make_batches(50, 7, 3, 3));
  EXPECT_THROW(make_batches(10, 0, 1, 0), DomainError);
  EXPECT_THROW(make_batches(10, 11, 1, 0), DomainError);
}

TEST(Elbo, RejectsBadArguments) {
  auto t = tiny(4, 3, 2, 1);
  const auto q = init_posterior(t.y, t.mask, t.config, 1);
  EXPECT_THROW(elbo_estimate(q, t.y, Batch::full(4), t.slab, t.config, 0, 1), DomainError);
  EXPECT_THROW(elbo_estimate(q, t.y, Batch::of({}, 4), t.slab, t.config, 1, 1), DomainError);
}

TEST(ElboGradient, MatchesFiniteDifferences) {
  for (bool missing : {false, true}) {
    auto t = tiny(4, 3, 2, 17, missing);
    for (std::uint64_t point = 0; point < 5; ++point) {
      auto q = random_point(t, 100 + point);
      Batch batch = point % 2 ? Batch::of({2, 0}, 4) : Batch::full(4);
      const std::uint64_t seed = 555 + point;
      const auto grad = elbo_gradient(q, t.y, batch, t.slab, t.config, 2, seed).flatten();
      auto params = q.flatten();
      const double h = 1e-5;
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto qp = q, qm = q;
        auto pp = params, pm = params;
        pp[i] += h;
        pm[i] -= h;
        qp.assign_flat(pp);
        qm.assign_flat(pm);
        const double fd = (elbo_estimate(qp, t.y, batch, t.slab, t.config, 2, seed) -
                           elbo_estimate(qm, t.y, batch, t.slab, t.config, 2, seed)) /
                          (2 * h);
        const double rel = std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-3});
        EXPECT_LT(rel, 1e-4) << "coordinate " << i << " fd " << fd << " analytic " << grad[i];
      }
    }
  }
}

TEST(ElboGradient, ZeroOutsideBatch) {
  auto t = tiny(6, 3, 2, 3);
  const auto q = random_point(t, 4);
  const auto g = elbo_gradient(q, t.y, Batch::of({1, 4}, 6), t.slab, t.config, 1, 9);
  for (Index i : {0, 2, 3, 5}) {
    EXPECT_EQ(g.x.loc.row(i).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(g.x.log_scale.row(i).cwiseAbs().maxCoeff(), 0.0);
  }
  EXPECT_GT(g.x.loc.row(1).cwiseAbs().maxCoeff(), 0.0);
}

TEST(ElboGradient, LocationsStationaryAtSymmetricPoint) {
  // Zero data and zero locations: the location gradients are odd in the
  // draws and average to zero.
  auto t = tiny(5, 3, 2, 1);
  t.y.data.setZero();
  auto q = init_posterior(t.y, t.mask, t.config, 1);
  q.z.loc.setZero();
  q.x.loc.setZero();
  std::vector<double> gz, gx;
  for (std::uint64_t s = 0; s < 4000; ++s) {
    const auto g = elbo_gradient(q, t.y, Batch::full(5), t.slab, t.config, 1, s);
    gz.push_back(g.z.loc(1, 0));
    gx.push_back(g.x.loc(2, 1));
  }
  EXPECT_LT(std::abs(mean_of(gz)), 4 * se_of(gz) + 1e-12);
  EXPECT_LT(std::abs(mean_of(gx)), 4 * se_of(gx) + 1e-12);
}

TEST(ElboEstimate, SubsamplingIsUnbiased) {
  auto t = tiny(8, 3, 2, 21);
  const auto q = random_point(t, 22);
  std::vector<double> full, half;
  for (std::uint64_t s = 0; s < 10000; ++s) {
    full.push_back(elbo_estimate(q, t.y, Batch::full(8), t.slab, t.config, 1, s));
    auto rows = make_batches(8, 4, s, 0)[0];
    half.push_back(elbo_estimate(q, t.y, Batch::of(std::move(rows), 8), t.slab, t.config, 1, s + 1000000));
  }
  const double diff = mean_of(full) - mean_of(half);
  EXPECT_LT(std::abs(diff), 3.0 * std::hypot(se_of(full), se_of(half)));
}

TEST(ElboEstimate, DuplicatedSamplesWithHalfWeight) {
  auto t = tiny(5, 3, 2, 31);
  const auto q = random_point(t, 32);
  Tiny d = t;
  d.y = ExpressionMatrix::from_dense(Matrix(10, 3));
  d.y.data << t.y.data, t.y.data;
  auto q2 = q;
  q2.x.loc.resize(10, 2);
  q2.x.loc << q.x.loc, q.x.loc;
  q2.x.log_scale.resize(10, 2);
  q2.x.log_scale << q.x.log_scale, q.x.log_scale;
  Batch halved = Batch::full(10);
  halved.identity = false;
  halved.scale = 0.5;
  std::vector<double> a, b;
  for (std::uint64_t s = 0; s < 10000; ++s) {
    a.push_back(elbo_estimate(q, t.y, Batch::full(5), t.slab, t.config, 1, s));
    b.push_back(elbo_estimate(q2, d.y, halved, d.slab, d.config, 1, s + 7777777));
  }
  EXPECT_LT(std::abs(mean_of(a) - mean_of(b)), 3.0 * std::hypot(se_of(a), se_of(b)));
}

TEST(ConjugateToy, ElboBelowEvidenceWithSmallGap) {
  // One feature, loadings pinned near zero: only the noise variance matters and
  // log p(y) has the inverse-gamma/Gaussian closed form.
  const Index N = 50;
  Rng rng = make_rng(77, 1);
  const Matrix data = normal_matrix(N, 1, rng, 0.0, std::sqrt(2.0));
  const auto y = ExpressionMatrix::from_dense(data);
  AnnotationMask mask = testing_support::all_annotated(BoolMatrix::Constant(1, 1, true));
  FactorConfig config = mask.matching_config();
  const double a = config.noise_prior_shape, b = config.noise_prior_rate;
  const double S = data.squaredNorm();
  const double log_evidence = a * std::log(b) - std::lgamma(a) + std::lgamma(a + 0.5 * N) -
                              0.5 * N * std::log(2.0 * std::numbers::pi) - (a + 0.5 * N) * std::log(b + 0.5 * S);

  const Matrix slab = Matrix::Constant(1, 1, 1e-8);
  TrainOptions opts;
  opts.max_iters = 20000;
  opts.learning_rate = 0.05;
  opts.lr_decay = true;
  opts.lr_decay_factor = 0.97;
  opts.n_mc = 4;
  opts.convergence_window = 0;
  opts.checkpoint_every = 1000;
  VariationalPosterior q;
  opts.final_posterior = &q;
  fit_with_slab(y, mask, config, slab, opts);

  ElboEvaluator eval(y, slab, config);
  std::vector<double> chunks;
  for (std::uint64_t s = 0; s < 100; ++s) chunks.push_back(eval.evaluate(q, Batch::full(N), 10000, s, nullptr));
  const double elbo = mean_of(chunks), se = se_of(chunks);
  const double gap = log_evidence - elbo;
  EXPECT_GT(gap, -3 * se);
  EXPECT_LT(gap, 0.05) << "elbo " << elbo << " evidence " << log_evidence << " se " << se;
}

TEST(Adam, ZeroGradientLeavesParams) {
  OptimizerState opt;
  std::vector<double> p{1.5, -2.0}, g{0.0, 0.0};
  adam_step(opt, p, g);
  EXPECT_EQ(p, (std::vector<double>{1.5, -2.0}));
  EXPECT_EQ(opt.step_count, 1);
}

TEST(Adam, FirstStepIsLearningRate) {
  OptimizerState opt;
  opt.learning_rate = 0.1;
  std::vector<double> p{0.0}, g{1.0};
  adam_step(opt, p, g);
  EXPECT_NEAR(p[0], 0.1, 1e-6);
}

TEST(Adam, ConvergesOnConcaveQuadratic) {
  OptimizerState opt;
  opt.learning_rate = 0.1;
  std::vector<double> p{0.0}, g{0.0};
  for (int i = 0; i < 100; ++i) {
    g[0] = -2.0 * (p[0] - 3.0);
    adam_step(opt, p, g);
  }
  EXPECT_LT(std::abs(p[0] - 3.0), 0.05);
}

TEST(Adam, Errors) {
  OptimizerState opt;
  std::vector<double> p{0.0, 1.0}, g{1.0};
  EXPECT_THROW(adam_step(opt, p, g), ShapeError);
  std::vector<double> bad{std::numeric_limits<double>::infinity(), 0.0};
  EXPECT_THROW(adam_step(opt, p, bad), NumericalError);
}

TEST(LoadingMoments, QuadratureMatchesMonteCarlo) {
  auto t = tiny(4, 3, 2, 41);
  const auto q = random_point(t, 42);
  Matrix wm, ws;
  loading_moments(q, t.slab, wm, ws);
  Rng rng = make_rng(43, 1);
  std::normal_distribution<double> n01;
  const int M = 400000;
  Matrix sum = Matrix::Zero(3, 2), sum2 = Matrix::Zero(3, 2);
  for (int m = 0; m < M; ++m) {
    const double tau = std::exp(q.log_tau.loc(0, 0) + std::exp(q.log_tau.log_scale(0, 0)) * n01(rng));
    for (Index k = 0; k < 2; ++k)
      for (Index g = 0; g < 3; ++g) {
        const double lam = std::exp(q.log_lambda.loc(g, k) + std::exp(q.log_lambda.log_scale(g, k)) * n01(rng));
        const double z = q.z.loc(g, k) + std::exp(q.z.log_scale(g, k)) * n01(rng);
        const double w = z * tau * regularized_scale(lam, tau, t.slab(g, k));
        sum(g, k) += w;
        sum2(g, k) += w * w;
      }
  }
  const Matrix mean = sum / M;
  const Matrix sd = ((sum2 / M).array() - mean.array().square()).sqrt().matrix();
  for (Index i = 0; i < mean.size(); ++i) {
    EXPECT_NEAR(wm.data()[i], mean.data()[i], 5 * sd.data()[i] / std::sqrt(double(M)) + 1e-4);
    EXPECT_NEAR(ws.data()[i], sd.data()[i], 0.01 * sd.data()[i] + 1e-4);
  }
}
