#pragma once

#include <cmath>
#include <numbers>
#include <string>

#include "model.hpp"
#include "random.hpp"
#include "types.hpp"

namespace annofa {

namespace detail {
inline void require_positive(double v, const char* name) {
  if (!(v > 0.0) || !std::isfinite(v))
    throw DomainError(std::string(name) + " must be positive and finite (got " + std::to_string(v) + ")");
}
}  // namespace detail

/// Regularized horseshoe local scale:
///   lambda_tilde = sqrt(c^2 lambda^2 / (c^2 + tau^2 lambda^2)).
/// Behaves like lambda when tau*lambda << c and saturates at c/tau.
inline double regularized_scale(double lambda, double tau, double c) {
  detail::require_positive(lambda, "lambda");
  detail::require_positive(tau, "tau");
  detail::require_positive(c, "c");
  // Evaluated as 1 / sqrt(1/lambda^2 + (tau/c)^2): each step is a correctly
  // rounded monotone operation, so the result stays monotone in every
  // argument. The hypot form covers inputs where the squares overflow.
  const double u = 1.0 / lambda, v = tau / c;
  const double s = u * u + v * v;
  if (std::isfinite(s) && s > 0.0) return 1.0 / std::sqrt(s);
  return lambda / std::hypot(1.0, tau * lambda / c);
}

/// Slab widths c_{g,k} from the annotation pattern: annotated columns get the
/// wide slab on active genes, dense columns everywhere, sparse columns nowhere.
inline Matrix slab_widths(const AnnotationMask& mask, const FactorConfig& config) {
  require_shape(static_cast<Index>(mask.kinds.size()) == mask.n_factors(),
                "slab_widths: mask kinds do not match its column count");
  if (mask.count(FactorKind::annotated) != config.n_annotated ||
      mask.count(FactorKind::sparse) != config.n_sparse_unannotated ||
      mask.count(FactorKind::dense) != config.n_dense_unannotated)
    throw ConfigError("slab_widths: mask factor kinds do not match configured counts");
  detail::require_positive(config.slab_annotated, "slab_annotated");
  detail::require_positive(config.slab_unannotated, "slab_unannotated");

  Matrix c(mask.n_features(), mask.n_factors());
  for (Index k = 0; k < mask.n_factors(); ++k) {
    switch (mask.kinds[static_cast<std::size_t>(k)]) {
      case FactorKind::annotated:
        for (Index g = 0; g < mask.n_features(); ++g)
          c(g, k) = mask.active(g, k) ? config.slab_annotated : config.slab_unannotated;
        break;
      case FactorKind::dense: c.col(k).setConstant(config.slab_annotated); break;
      case FactorKind::sparse: c.col(k).setConstant(config.slab_unannotated); break;
    }
  }
  return c;
}

struct HorseshoeState {
  double tau = 1.0;
  Matrix lambda;
  Matrix slab;
  Matrix lambda_tilde;

  static HorseshoeState make(double tau, Matrix lambda, Matrix slab) {
    require_shape(lambda.rows() == slab.rows() && lambda.cols() == slab.cols(),
                  "HorseshoeState: lambda and slab shapes differ");
    HorseshoeState s;
    s.tau = tau;
    s.lambda_tilde.resize(lambda.rows(), lambda.cols());
    for (Index k = 0; k < lambda.cols(); ++k)
      for (Index g = 0; g < lambda.rows(); ++g)
        s.lambda_tilde(g, k) = regularized_scale(lambda(g, k), tau, slab(g, k));
    s.lambda = std::move(lambda);
    s.slab = std::move(slab);
    return s;
  }
};

inline Violations validate(const HorseshoeState& s) {
  Violations out;
  constexpr double slack = 1e-12;
  if (!(s.tau > 0.0)) out.push_back({"tau", "must be positive"});
  for (Index k = 0; k < s.lambda.cols(); ++k)
    for (Index g = 0; g < s.lambda.rows(); ++g) {
      const std::string at = "(" + std::to_string(g) + "," + std::to_string(k) + ")";
      if (!(s.lambda(g, k) > 0.0) || !(s.slab(g, k) > 0.0) || !(s.lambda_tilde(g, k) > 0.0))
        out.push_back({at, "scales must be positive"});
      if (s.lambda_tilde(g, k) > s.lambda(g, k) * (1.0 + slack) + slack)
        out.push_back({at, "lambda_tilde exceeds lambda"});
      if (s.lambda_tilde(g, k) * s.tau > s.slab(g, k) * (1.0 + slack) + slack)
        out.push_back({at, "tau*lambda_tilde exceeds slab"});
    }
  return out;
}

/// Conditional prior standard deviation tau * lambda_tilde of each weight.
inline Matrix weight_prior_scale(const HorseshoeState& s) { return s.tau * s.lambda_tilde; }

/// log density of HalfCauchy(0, scale) at x.
inline double half_cauchy_log_density(double x, double scale) {
  detail::require_positive(x, "x");
  detail::require_positive(scale, "scale");
  const double r = x / scale;
  return std::log(2.0 / (std::numbers::pi * scale)) - std::log1p(r * r);
}

/// Prior-predictive weights w_{g,k} ~ N(0, (tau * lambda_tilde_{g,k})^2).
inline Matrix sample_weights_from_prior(const HorseshoeState& s, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x77656967ULL);
  Matrix w(s.lambda_tilde.rows(), s.lambda_tilde.cols());
  fill_normal(w, rng);
  return w.cwiseProduct(weight_prior_scale(s));
}

}  // namespace annofa
