#pragma once

// Stochastic variational inference for the annotated factor model.
//
// Generative model (non-centred):
//   x_{i,k} ~ N(0, 1)                    factor states
//   z_{g,k} ~ N(0, 1)                    standardized loadings
//   lambda_{g,k} ~ HalfCauchy(1)         local scales
//   tau ~ HalfCauchy(tau0)               global scale
//   sigma2_g ~ InvGamma(a0, b0)          residual variances
//   w_{g,k} = z_{g,k} * tau * lambda_tilde(lambda_{g,k}, tau, c_{g,k})
//   y_{i,g} ~ N(sum_k x_{i,k} w_{g,k}, sigma2_g)    observed entries only
//
// The variational family is a fully factorized Gaussian over
// (z, x, log lambda, log sigma2, log tau). Gaussian KL terms are analytic,
// half-Cauchy terms use the reparameterized draw, and the inverse-gamma term
// is analytic through log-normal moments.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "evaluation.hpp"
#include "model.hpp"
#include "priors.hpp"
#include "random.hpp"
#include "types.hpp"

namespace annofa {

// ---------------------------------------------------------------------------
// Variational posterior
// ---------------------------------------------------------------------------

struct GaussianBlock {
  Matrix loc;
  Matrix log_scale;

  static GaussianBlock zeros(Index rows, Index cols) {
    return {Matrix::Zero(rows, cols), Matrix::Zero(rows, cols)};
  }
};

struct VariationalPosterior {
  GaussianBlock z;           // G x K
  GaussianBlock x;           // N x K
  GaussianBlock log_lambda;  // G x K
  GaussianBlock log_sigma2;  // G x 1
  GaussianBlock log_tau;     // 1 x 1

  Index n_samples() const { return x.loc.rows(); }
  Index n_features() const { return z.loc.rows(); }
  Index n_factors() const { return z.loc.cols(); }

  /// Visits every parameter array in a fixed order (loc before log_scale).
  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    for (auto* block : {&self.z, &self.x, &self.log_lambda, &self.log_sigma2, &self.log_tau}) {
      f(block->loc);
      f(block->log_scale);
    }
  }
  template <typename F> void for_each_array(F&& f) { visit(*this, f); }
  template <typename F> void for_each_array(F&& f) const { visit(*this, f); }

  Index parameter_count() const {
    Index n = 0;
    for_each_array([&](const Matrix& m) { n += m.size(); });
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(parameter_count()));
    for_each_array([&](const Matrix& m) { out.insert(out.end(), m.data(), m.data() + m.size()); });
    return out;
  }

  void assign_flat(std::span<const double> flat) {
    require_shape(static_cast<Index>(flat.size()) == parameter_count(), "assign_flat: length mismatch");
    std::size_t off = 0;
    for_each_array([&](Matrix& m) {
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), m.size(), m.data());
      off += static_cast<std::size_t>(m.size());
    });
  }

  static VariationalPosterior zeros_like(const VariationalPosterior& p) {
    VariationalPosterior out;
    auto z = [](const GaussianBlock& b) { return GaussianBlock::zeros(b.loc.rows(), b.loc.cols()); };
    out.z = z(p.z);
    out.x = z(p.x);
    out.log_lambda = z(p.log_lambda);
    out.log_sigma2 = z(p.log_sigma2);
    out.log_tau = z(p.log_tau);
    return out;
  }
};

namespace stream {
inline constexpr std::uint64_t init = 0x696e6974ULL;
inline constexpr std::uint64_t elbo = 0x656c626fULL;
inline constexpr std::uint64_t step = 0x73746570ULL;
inline constexpr std::uint64_t batches = 0x62617463ULL;
}  // namespace stream

/// Locations ~ N(0, 0.1^2), log-scales log(0.1).
inline VariationalPosterior init_posterior(const ExpressionMatrix& y, const AnnotationMask& mask,
                                           const FactorConfig& config, std::uint64_t seed) {
  const Index K = mask.n_factors();
  require_shape(config.n_factors() == K, "init_posterior: config has " + std::to_string(config.n_factors()) +
                                             " factors, mask has " + std::to_string(K));
  require_shape(mask.n_features() == y.n_features(), "init_posterior: mask and data feature counts differ");
  const Index N = y.n_samples(), G = y.n_features();
  Rng rng = make_rng(seed, stream::init);
  const double ls0 = std::log(0.1);
  auto block = [&](Index r, Index c) {
    GaussianBlock b{normal_matrix(r, c, rng, 0.0, 0.1), Matrix::Constant(r, c, ls0)};
    return b;
  };
  VariationalPosterior q;
  q.z = block(G, K);
  q.x = block(N, K);
  q.log_lambda = block(G, K);
  q.log_sigma2 = block(G, 1);
  q.log_tau = block(1, 1);
  return q;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Rows of one stochastic step; `scale` multiplies the per-sample terms so
/// that a batch estimate is unbiased for the full-data objective.
struct Batch {
  std::vector<Index> rows;
  double scale = 1.0;
  bool identity = false;

  static Batch full(Index n) {
    Batch b;
    b.rows.resize(static_cast<std::size_t>(n));
    std::iota(b.rows.begin(), b.rows.end(), Index{0});
    b.identity = true;
    return b;
  }
  static Batch of(std::vector<Index> rows, Index n_total) {
    Batch b;
    b.scale = rows.empty() ? 1.0 : static_cast<double>(n_total) / static_cast<double>(rows.size());
    b.identity = static_cast<Index>(rows.size()) == n_total;
    for (std::size_t i = 0; b.identity && i < rows.size(); ++i) b.identity = rows[i] == static_cast<Index>(i);
    b.rows = std::move(rows);
    return b;
  }
};

/// Random permutation of [0, n) cut into consecutive chunks of batch_size
/// (the last chunk may be shorter).
inline std::vector<std::vector<Index>> make_batches(Index n, Index batch_size, std::uint64_t seed,
                                                    std::uint64_t epoch) {
  if (batch_size < 1) throw DomainError("make_batches: batch_size must be positive");
  if (n < 1 || batch_size > n) throw DomainError("make_batches: need 1 <= batch_size <= n");
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  Rng rng = make_rng(seed, stream::batches, epoch);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<Index>> out;
  for (Index start = 0; start < n; start += batch_size) {
    const Index end = std::min(n, start + batch_size);
    out.emplace_back(perm.begin() + start, perm.begin() + end);
  }
  return out;
}

// ---------------------------------------------------------------------------
// ELBO and its reparameterization gradient
// ---------------------------------------------------------------------------

namespace detail {
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline const double kHalfLog2PiE = 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e);
inline const double kLog2Pi = std::log(2.0 * std::numbers::pi);
inline const double kLog2OverPi = std::log(2.0 / std::numbers::pi);
}  // namespace detail

/// Evaluates the Monte Carlo ELBO and, optionally, its exact gradient for the
/// same draws. Holds reusable buffers so one instance serves a training run
/// without per-step allocation; not shareable between threads.
class ElboEvaluator {
 public:
  ElboEvaluator(const ExpressionMatrix& y, Matrix slab, FactorConfig config)
      : y_(y), slab_(std::move(slab)), config_(config), fully_observed_(y.fully_observed()) {
    require_shape(slab_.rows() == y.n_features(), "ElboEvaluator: slab rows must equal G");
    require_shape(config.n_factors() == slab_.cols(), "ElboEvaluator: slab columns must equal K");
    for (Index k = 0; k < slab_.cols(); ++k)
      for (Index g = 0; g < slab_.rows(); ++g)
        if (!(slab_(g, k) > 0.0)) throw DomainError("ElboEvaluator: slab widths must be positive");
  }

  const Matrix& slab() const { return slab_; }
  const FactorConfig& config() const { return config_; }

  /// `grad`, when given, receives d ELBO / d parameters with the x block
  /// shaped |batch| x K (row j belongs to sample batch.rows[j]).
  double evaluate(const VariationalPosterior& q, const Batch& batch, int n_mc, std::uint64_t seed,
                  VariationalPosterior* grad) {
    if (n_mc < 1) throw DomainError("elbo: n_mc must be at least 1");
    if (batch.rows.empty()) throw DomainError("elbo: empty batch");
    const Index N = y_.n_samples(), G = y_.n_features(), K = slab_.cols();
    const Index b = static_cast<Index>(batch.rows.size());
    check_shapes(q, N, G, K);
    for (Index r : batch.rows)
      if (r < 0 || r >= N) throw DomainError("elbo: batch row out of range");
    const double rho = batch.scale;
    const double inv_mc = 1.0 / n_mc;

    // Batch views of data and local parameters.
    if (!batch.identity) {
      yb_ = y_.data(batch.rows, Eigen::all);
      if (!fully_observed_) ob_ = y_.observed(batch.rows, Eigen::all);
    }
    const Matrix& Y = batch.identity ? y_.data : yb_;
    const BoolMatrix& O = batch.identity ? y_.observed : ob_;
    if (fully_observed_) {
      nobs_.setConstant(G, static_cast<double>(b));
    } else {
      nobs_ = O.cast<double>().colwise().sum().transpose().matrix();
    }
    if (batch.identity) {
      mux_ = q.x.loc;
      sx_ = q.x.log_scale.array().exp().matrix();
    } else {
      mux_ = q.x.loc(batch.rows, Eigen::all);
      sx_ = q.x.log_scale(batch.rows, Eigen::all).array().exp().matrix();
    }
    sz_ = q.z.log_scale.array().exp().matrix();
    sl_ = q.log_lambda.log_scale.array().exp().matrix();
    ss_ = q.log_sigma2.log_scale.array().exp().matrix();
    const double st = std::exp(q.log_tau.log_scale(0, 0));

    if (grad) {
      grad->z = GaussianBlock::zeros(G, K);
      grad->x = GaussianBlock::zeros(b, K);
      grad->log_lambda = GaussianBlock::zeros(G, K);
      grad->log_sigma2 = GaussianBlock::zeros(G, 1);
      grad->log_tau = GaussianBlock::zeros(1, 1);
    }

    ex_.resize(b, K);
    ez_.resize(G, K);
    el_.resize(G, K);
    es_.resize(G, 1);
    S_.resize(G, K);
    D_.resize(G, K);

    const double tau0 = config_.tau0;
    const double log_tau0 = std::log(tau0);
    double mc_sum = 0.0;

    for (int m = 0; m < n_mc; ++m) {
      Rng rng = make_rng(seed, stream::elbo, static_cast<std::uint64_t>(m));
      fill_normal(ex_, rng);
      fill_normal(ez_, rng);
      fill_normal(el_, rng);
      fill_normal(es_, rng);
      std::normal_distribution<double> unit;
      const double et = unit(rng);

      X_.noalias() = mux_ + sx_.cwiseProduct(ex_);
      Z_.noalias() = q.z.loc + sz_.cwiseProduct(ez_);
      U_.noalias() = q.log_lambda.loc + sl_.cwiseProduct(el_);
      const double t = q.log_tau.loc(0, 0) + st * et;
      const double tau = std::exp(t);
      lv_.noalias() = q.log_sigma2.loc + ss_.cwiseProduct(es_);
      inv_v_ = (-lv_.array()).exp().matrix();

      // Prior scale S = tau * lambda_tilde and D = dS/dlog(lambda) = dS/dlog(tau).
      double log_prior = 0.0;
      for (Index k = 0; k < K; ++k)
        for (Index g = 0; g < G; ++g) {
          const double u = U_(g, k);
          const double a = tau * std::exp(u);
          const double h = std::hypot(1.0, a / slab_(g, k));
          const double s = a / h;
          S_(g, k) = s;
          D_(g, k) = s / (h * h);
          log_prior += detail::kLog2OverPi - detail::softplus(2.0 * u) + u;
        }
      log_prior += detail::kLog2OverPi - log_tau0 - detail::softplus(2.0 * (t - log_tau0)) + t;
      W_.noalias() = Z_.cwiseProduct(S_);

      // Residuals on observed entries.
      R_.noalias() = X_ * W_.transpose();
      R_ = Y - R_;
      if (!fully_observed_) R_ = O.select(R_.array(), 0.0).matrix();
      colsq_ = R_.colwise().squaredNorm().transpose();

      double lik = 0.0;
      for (Index g = 0; g < G; ++g)
        lik += -0.5 * nobs_[g] * (detail::kLog2Pi + lv_(g, 0)) - 0.5 * colsq_[g] * inv_v_(g, 0);
      lik *= rho;
      mc_sum += lik + log_prior;

      if (!grad) continue;
      R_ = R_ * inv_v_.col(0).asDiagonal();  // now R V^-1
      GX_.noalias() = rho * (R_ * W_);
      GW_.noalias() = rho * (R_.transpose() * X_);

      grad->x.loc.noalias() += inv_mc * GX_;
      grad->x.log_scale.array() += inv_mc * GX_.array() * ex_.array() * sx_.array();

      const auto gz = (GW_.array() * S_.array()).eval();
      grad->z.loc.array() += inv_mc * gz;
      grad->z.log_scale.array() += inv_mc * gz * ez_.array() * sz_.array();

      const auto gs_shared = (GW_.array() * Z_.array() * D_.array()).eval();
      const auto gu = (gs_shared - U_.array().tanh()).eval();
      grad->log_lambda.loc.array() += inv_mc * gu;
      grad->log_lambda.log_scale.array() += inv_mc * gu * el_.array() * sl_.array();

      const double r2 = std::exp(2.0 * (t - log_tau0));
      const double gt = gs_shared.sum() + (std::isfinite(r2) ? (1.0 - r2) / (1.0 + r2) : -1.0);
      grad->log_tau.loc(0, 0) += inv_mc * gt;
      grad->log_tau.log_scale(0, 0) += inv_mc * gt * et * st;

      for (Index g = 0; g < G; ++g) {
        const double gsg = rho * (-0.5 * nobs_[g] + 0.5 * colsq_[g] * inv_v_(g, 0));
        grad->log_sigma2.loc(g, 0) += inv_mc * gsg;
        grad->log_sigma2.log_scale(g, 0) += inv_mc * gsg * es_(g, 0) * ss_(g, 0);
      }
    }

    double value = inv_mc * mc_sum;
    value += analytic_terms(q, rho, grad);
    return value;
  }

 private:
  static void check_shapes(const VariationalPosterior& q, Index N, Index G, Index K) {
    auto same = [](const GaussianBlock& b, Index r, Index c) {
      return b.loc.rows() == r && b.loc.cols() == c && b.log_scale.rows() == r && b.log_scale.cols() == c;
    };
    require_shape(same(q.z, G, K) && same(q.x, N, K) && same(q.log_lambda, G, K) &&
                      same(q.log_sigma2, G, 1) && same(q.log_tau, 1, 1),
                  "elbo: posterior shapes do not match data (N=" + std::to_string(N) +
                      ", G=" + std::to_string(G) + ", K=" + std::to_string(K) + ")");
  }

  // Entropies, Gaussian KLs and the expected inverse-gamma log prior.
  double analytic_terms(const VariationalPosterior& q, double rho, VariationalPosterior* grad) const {
    double value = 0.0;

    // -KL(q(x) || N(0,1)) over batch rows, scaled like the likelihood.
    const auto sx2 = (sx_.array().square()).eval();
    value -= rho * (0.5 * (mux_.array().square() + sx2 - 1.0) - sx_.array().log()).sum();
    const auto sz2 = (sz_.array().square()).eval();
    value -= (0.5 * (q.z.loc.array().square() + sz2 - 1.0) - q.z.log_scale.array()).sum();

    // Entropies of the log-scale blocks.
    const double n_lambda = static_cast<double>(q.log_lambda.log_scale.size());
    value += n_lambda * detail::kHalfLog2PiE + q.log_lambda.log_scale.sum();
    value += detail::kHalfLog2PiE + q.log_tau.log_scale(0, 0);

    const double a0 = config_.noise_prior_shape, b0 = config_.noise_prior_rate;
    const double G = static_cast<double>(q.log_sigma2.loc.size());
    const auto ss2 = (ss_.array().square()).eval();
    const auto e_inv = ((-q.log_sigma2.loc.array() + 0.5 * ss2).exp()).eval();  // E[1/sigma2]
    value += G * detail::kHalfLog2PiE + q.log_sigma2.log_scale.sum();
    value += G * (a0 * std::log(b0) - std::lgamma(a0)) - a0 * q.log_sigma2.loc.sum() - b0 * e_inv.sum();

    if (grad) {
      grad->x.loc.array() -= rho * mux_.array();
      grad->x.log_scale.array() -= rho * (sx2 - 1.0);
      grad->z.loc.array() -= q.z.loc.array();
      grad->z.log_scale.array() -= sz2 - 1.0;
      grad->log_lambda.log_scale.array() += 1.0;
      grad->log_tau.log_scale(0, 0) += 1.0;
      grad->log_sigma2.loc.array() += -a0 + b0 * e_inv;
      grad->log_sigma2.log_scale.array() += 1.0 - b0 * e_inv * ss2;
    }
    return value;
  }

  const ExpressionMatrix& y_;
  Matrix slab_;
  FactorConfig config_;
  bool fully_observed_;

  Matrix yb_;
  BoolMatrix ob_;
  Vector nobs_;
  Matrix mux_, sx_, sz_, sl_, ss_;
  Matrix ex_, ez_, el_, es_;
  Matrix X_, Z_, U_, lv_, inv_v_, S_, D_, W_, R_;
  Vector colsq_;
  Matrix GX_, GW_;
};

/// Monte Carlo ELBO estimate for one batch.
inline double elbo_estimate(const VariationalPosterior& q, const ExpressionMatrix& y, const Batch& batch,
                            const Matrix& slab, const FactorConfig& config, int n_mc, std::uint64_t seed) {
  ElboEvaluator eval(y, slab, config);
  return eval.evaluate(q, batch, n_mc, seed, nullptr);
}

/// Gradient of elbo_estimate with the same seed. The x block is N x K and
/// exactly zero on rows outside the batch.
inline VariationalPosterior elbo_gradient(const VariationalPosterior& q, const ExpressionMatrix& y,
                                          const Batch& batch, const Matrix& slab, const FactorConfig& config,
                                          int n_mc, std::uint64_t seed) {
  ElboEvaluator eval(y, slab, config);
  VariationalPosterior g;
  eval.evaluate(q, batch, n_mc, seed, &g);
  GaussianBlock gx = GaussianBlock::zeros(q.x.loc.rows(), q.x.loc.cols());
  for (std::size_t j = 0; j < batch.rows.size(); ++j) {
    gx.loc.row(batch.rows[j]) += g.x.loc.row(static_cast<Index>(j));
    gx.log_scale.row(batch.rows[j]) += g.x.log_scale.row(static_cast<Index>(j));
  }
  g.x = std::move(gx);
  return g;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct OptimizerState {
  long step_count = 0;
  Vector first_moment;
  Vector second_moment;
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam step, applied as ascent (params move along +grad).
inline void adam_step(OptimizerState& opt, std::span<double> params, std::span<const double> grads) {
  require_shape(params.size() == grads.size(), "adam_step: params and grads differ in length");
  const auto n = static_cast<Index>(params.size());
  if (opt.first_moment.size() == 0 && opt.second_moment.size() == 0) {
    opt.first_moment = Vector::Zero(n);
    opt.second_moment = Vector::Zero(n);
  }
  require_shape(opt.first_moment.size() == n && opt.second_moment.size() == n,
                "adam_step: moment vectors do not match parameter length");
  for (Index i = 0; i < n; ++i)
    if (!std::isfinite(grads[i]))
      throw NumericalError("adam_step: non-finite gradient at coordinate " + std::to_string(i));
  ++opt.step_count;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step_count));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step_count));
  for (Index i = 0; i < n; ++i) {
    const double g = grads[i];
    double& m = opt.first_moment[i];
    double& v = opt.second_moment[i];
    m = opt.beta1 * m + (1.0 - opt.beta1) * g;
    v = opt.beta2 * v + (1.0 - opt.beta2) * g * g;
    params[i] += opt.learning_rate * (m / c1) / (std::sqrt(v / c2) + opt.epsilon);
  }
}

namespace detail {

inline std::span<double> span_of(Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
inline std::span<const double> span_of(const Matrix& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

// Adam over a whole posterior. Global blocks share one step counter; rows of
// the local x block keep their own counters and are only touched when they
// appear in a batch.
class PosteriorOptimizer {
 public:
  PosteriorOptimizer(const VariationalPosterior& q, double beta1, double beta2, double eps) {
    auto init = [&](const Matrix& m) {
      OptimizerState s;
      s.beta1 = beta1;
      s.beta2 = beta2;
      s.epsilon = eps;
      s.first_moment = Vector::Zero(m.size());
      s.second_moment = Vector::Zero(m.size());
      return s;
    };
    for (const Matrix* m : globals(q)) global_.push_back(init(*m));
    const Index N = q.x.loc.rows(), K = q.x.loc.cols();
    beta1_ = beta1;
    beta2_ = beta2;
    eps_ = eps;
    xm_loc_ = Matrix::Zero(N, K);
    xv_loc_ = Matrix::Zero(N, K);
    xm_ls_ = Matrix::Zero(N, K);
    xv_ls_ = Matrix::Zero(N, K);
    row_steps_.assign(static_cast<std::size_t>(N), 0);
  }

  void step(VariationalPosterior& q, const VariationalPosterior& g, const Batch& batch, double lr) {
    auto params = globals(q);
    auto grads = globals(g);
    for (std::size_t i = 0; i < params.size(); ++i) {
      global_[i].learning_rate = lr;
      adam_step(global_[i], span_of(*params[i]), span_of(*grads[i]));
    }
    const Index K = q.x.loc.cols();
    for (std::size_t j = 0; j < batch.rows.size(); ++j) {
      const Index i = batch.rows[j];
      const long t = ++row_steps_[static_cast<std::size_t>(i)];
      const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t));
      const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t));
      for (Index k = 0; k < K; ++k) {
        update(q.x.loc(i, k), xm_loc_(i, k), xv_loc_(i, k), g.x.loc(static_cast<Index>(j), k), lr, c1, c2);
        update(q.x.log_scale(i, k), xm_ls_(i, k), xv_ls_(i, k), g.x.log_scale(static_cast<Index>(j), k), lr,
               c1, c2);
      }
    }
  }

 private:
  template <typename P>
  static std::vector<P*> globals_impl(auto& q) {
    return {&q.z.loc, &q.z.log_scale, &q.log_lambda.loc, &q.log_lambda.log_scale,
            &q.log_sigma2.loc, &q.log_sigma2.log_scale, &q.log_tau.loc, &q.log_tau.log_scale};
  }
  static std::vector<Matrix*> globals(VariationalPosterior& q) { return globals_impl<Matrix>(q); }
  static std::vector<const Matrix*> globals(const VariationalPosterior& q) {
    return globals_impl<const Matrix>(q);
  }

  void update(double& p, double& m, double& v, double g, double lr, double c1, double c2) const {
    if (!std::isfinite(g)) throw NumericalError("adam_step: non-finite gradient in factor states");
    m = beta1_ * m + (1.0 - beta1_) * g;
    v = beta2_ * v + (1.0 - beta2_) * g * g;
    p += lr * (m / c1) / (std::sqrt(v / c2) + eps_);
  }

  std::vector<OptimizerState> global_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  Matrix xm_loc_, xv_loc_, xm_ls_, xv_ls_;
  std::vector<long> row_steps_;
};

// Probabilists' Gauss-Hermite rule (weight exp(-x^2/2)/sqrt(2 pi)) via the
// Golub-Welsch eigenproblem.
inline std::pair<Vector, Vector> gauss_hermite(int n) {
  Matrix J = Matrix::Zero(n, n);
  for (int i = 1; i < n; ++i) J(i, i - 1) = J(i - 1, i) = std::sqrt(static_cast<double>(i));
  Eigen::SelfAdjointEigenSolver<Matrix> es(J);
  Vector w = es.eigenvectors().row(0).transpose().array().square();
  return {es.eigenvalues(), w / w.sum()};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Posterior summaries and training
// ---------------------------------------------------------------------------

/// Posterior means and standard deviations of the loadings
/// w = z * tau * lambda_tilde, integrating the scale over q(log lambda) and
/// q(log tau) by tensor Gauss-Hermite quadrature.
inline void loading_moments(const VariationalPosterior& q, const Matrix& slab, Matrix& w_mean, Matrix& w_scale,
                            int nodes = 10) {
  static thread_local std::pair<Vector, Vector> rule;
  if (rule.first.size() != nodes) rule = detail::gauss_hermite(nodes);
  const auto& [xi, wi] = rule;
  const Index G = q.z.loc.rows(), K = q.z.loc.cols();
  const double mt = q.log_tau.loc(0, 0), st = std::exp(q.log_tau.log_scale(0, 0));
  Vector taus(nodes);
  for (int a = 0; a < nodes; ++a) taus[a] = std::exp(mt + st * xi[a]);
  w_mean.resize(G, K);
  w_scale.resize(G, K);
  for (Index k = 0; k < K; ++k)
    for (Index g = 0; g < G; ++g) {
      const double ml = q.log_lambda.loc(g, k), sl = std::exp(q.log_lambda.log_scale(g, k));
      const double c = slab(g, k);
      double es = 0.0, es2 = 0.0;
      for (int b = 0; b < nodes; ++b) {
        const double lam = std::exp(ml + sl * xi[b]);
        for (int a = 0; a < nodes; ++a) {
          const double av = taus[a] * lam;
          const double s = av / std::hypot(1.0, av / c);
          const double wt = wi[a] * wi[b];
          es += wt * s;
          es2 += wt * s * s;
        }
      }
      const double mz = q.z.loc(g, k), sz = std::exp(q.z.log_scale(g, k));
      w_mean(g, k) = mz * es;
      const double var_s = std::max(es2 - es * es, 0.0);
      w_scale(g, k) = std::sqrt(sz * sz * es2 + mz * mz * var_s);
    }
}

inline TrainedModel summarize(const VariationalPosterior& q, const Matrix& slab, const FactorConfig& config,
                              const AnnotationMask& mask, TrainingTrace trace = {}) {
  TrainedModel m;
  loading_moments(q, slab, m.w_mean, m.w_scale);
  m.x_mean = q.x.loc;
  m.x_scale = q.x.log_scale.array().exp().matrix();
  m.sigma2 = (q.log_sigma2.loc.array() + 0.5 * (2.0 * q.log_sigma2.log_scale.array()).exp()).exp().matrix();
  m.tau_mean = std::exp(q.log_tau.loc(0, 0) + 0.5 * std::exp(2.0 * q.log_tau.log_scale(0, 0)));
  m.config = config;
  m.mask = mask;
  m.trace = std::move(trace);
  return m;
}

struct TrainOptions {
  long max_iters = 5000;
  /// Rows per step once N exceeds batch_threshold (0: use batch_threshold).
  Index batch_size = 0;
  Index batch_threshold = 10000;
  double learning_rate = 0.01;
  /// Multiply the learning rate by lr_decay_factor every 100 steps.
  bool lr_decay = false;
  double lr_decay_factor = 0.999;
  int n_mc = 1;
  std::uint64_t seed = 42;
  long checkpoint_every = 10;
  /// G x K ground truth for F1 tracking; pooled over annotated columns.
  std::optional<BoolMatrix> truth_mask;
  double active_threshold = 0.1;
  double convergence_tol = 1e-5;
  long convergence_window = 100;
  /// Clamp floor on every variational standard deviation.
  double min_scale = 1e-6;
  std::ostream* checkpoint_stream = nullptr;
  std::function<void(const Checkpoint&)> on_checkpoint;
  /// When set, receives the variational parameters at the end of training.
  VariationalPosterior* final_posterior = nullptr;
};

struct DivergenceError : NumericalError {
  DivergenceError(const std::string& what, std::shared_ptr<const TrainedModel> last)
      : NumericalError(what), last_finite(std::move(last)) {}
  std::shared_ptr<const TrainedModel> last_finite;
};

inline void write_checkpoint_record(std::ostream& os, const Checkpoint& c) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "{\"iteration\": %ld, \"elbo\": %.17g", c.iteration, c.elbo);
  os << buf;
  if (c.f1) {
    std::snprintf(buf, sizeof buf, ", \"f1\": %.17g", *c.f1);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, ", \"seconds\": %.6f}\n", c.seconds);
  os << buf;
}

/// Trains with an explicit slab-width matrix (G x K).
inline TrainedModel fit_with_slab(const ExpressionMatrix& y, const AnnotationMask& mask, const FactorConfig& config,
                                  const Matrix& slab, const TrainOptions& opts = {}) {
  if (auto v = validate(y); !v.empty()) throw ConfigError("fit: invalid data\n" + format_violations(v));
  require_shape(mask.n_features() == y.n_features(), "fit: mask has " + std::to_string(mask.n_features()) +
                                                         " features, data has " + std::to_string(y.n_features()));
  require_shape(mask.n_factors() == config.n_factors(), "fit: mask and config factor counts differ");
  require_shape(slab.rows() == mask.n_features() && slab.cols() == mask.n_factors(),
                "fit: slab matrix shape does not match mask");
  if (opts.truth_mask)
    require_shape(opts.truth_mask->rows() == mask.n_features() && opts.truth_mask->cols() == mask.n_factors(),
                  "fit: truth mask shape does not match mask");
  if (opts.max_iters < 1 || opts.checkpoint_every < 1) throw ConfigError("fit: iteration counts must be positive");

  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  const Index N = y.n_samples();
  VariationalPosterior q = init_posterior(y, mask, config, opts.seed);
  ElboEvaluator eval(y, slab, config);
  detail::PosteriorOptimizer optimizer(q, 0.9, 0.999, 1e-8);
  VariationalPosterior grad;
  const double log_floor = std::log(opts.min_scale);
  const auto annotated = mask.columns_of(FactorKind::annotated);

  const bool batched = N > opts.batch_threshold;
  const Index batch_size = batched ? (opts.batch_size > 0 ? opts.batch_size : opts.batch_threshold) : N;
  Batch current = Batch::full(N);
  std::vector<std::vector<Index>> epoch_batches;
  std::size_t next_batch = 0;
  std::uint64_t epoch = 0;

  TrainingTrace trace;
  std::optional<VariationalPosterior> last_finite;
  double last_finite_elbo = 0.0;
  std::vector<double> window_elbos;
  Matrix w_mean, w_scale;

  for (long it = 1; it <= opts.max_iters; ++it) {
    if (batched) {
      if (next_batch == epoch_batches.size()) {
        epoch_batches = make_batches(N, std::min(batch_size, N), opts.seed, epoch++);
        next_batch = 0;
      }
      current = Batch::of(std::move(epoch_batches[next_batch++]), N);
    }
    const double lr = opts.lr_decay
                          ? opts.learning_rate * std::pow(opts.lr_decay_factor, static_cast<double>(it / 100))
                          : opts.learning_rate;
    const double elbo = eval.evaluate(q, current, opts.n_mc, derive_seed(opts.seed, stream::step, it), &grad);
    if (!std::isfinite(elbo)) {
      std::shared_ptr<const TrainedModel> last;
      if (last_finite) last = std::make_shared<TrainedModel>(summarize(*last_finite, slab, config, mask, trace));
      throw DivergenceError("fit: non-finite ELBO at iteration " + std::to_string(it) +
                                " (last finite checkpoint ELBO " + std::to_string(last_finite_elbo) + ")",
                            std::move(last));
    }
    optimizer.step(q, grad, current, lr);
    for (Matrix* ls : {&q.z.log_scale, &q.x.log_scale, &q.log_lambda.log_scale, &q.log_sigma2.log_scale,
                       &q.log_tau.log_scale})
      *ls = ls->cwiseMax(log_floor);

    if (it % opts.checkpoint_every == 0 || it == opts.max_iters) {
      Checkpoint c;
      c.iteration = it;
      c.elbo = elbo;
      c.seconds = std::chrono::duration<double>(clock::now() - t0).count();
      if (opts.truth_mask) {
        loading_moments(q, slab, w_mean, w_scale);
        const auto f1 = mask_f1(*opts.truth_mask, w_mean, opts.active_threshold, annotated);
        c.f1 = f1.overall;
        c.factor_f1 = f1.per_factor;
      }
      if (opts.checkpoint_stream) write_checkpoint_record(*opts.checkpoint_stream, c);
      if (opts.on_checkpoint) opts.on_checkpoint(c);
      trace.checkpoints.push_back(std::move(c));
      last_finite = q;
      last_finite_elbo = elbo;

      // Converged when the mean ELBO of the latest window moved by less than
      // tol (relative) against the window before it.
      window_elbos.push_back(elbo);
      const auto w = static_cast<std::size_t>(opts.convergence_window);
      if (w > 0 && window_elbos.size() >= 2 * w) {
        double recent = 0.0, before = 0.0;
        for (std::size_t i = 0; i < w; ++i) {
          recent += window_elbos[window_elbos.size() - 1 - i];
          before += window_elbos[window_elbos.size() - 1 - w - i];
        }
        recent /= static_cast<double>(w);
        before /= static_cast<double>(w);
        if (std::abs(recent - before) <= opts.convergence_tol * std::abs(recent)) {
          trace.converged = true;
          break;
        }
      }
    }
  }
  if (opts.final_posterior) *opts.final_posterior = q;
  return summarize(q, slab, config, mask, std::move(trace));
}

/// Trains with slab widths derived from the mask and config.
inline TrainedModel fit(const ExpressionMatrix& y, const AnnotationMask& mask, const FactorConfig& config,
                        const TrainOptions& opts = {}) {
  if (auto v = validate(config); !v.empty()) throw ConfigError("fit: invalid config\n" + format_violations(v));
  if (auto v = validate(mask); !v.empty()) throw ConfigError("fit: invalid mask\n" + format_violations(v));
  return fit_with_slab(y, mask, config, slab_widths(mask, config), opts);
}

}  // namespace annofa
