#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "types.hpp"

namespace annofa {

/// Posterior-mean reconstruction X W^T (residual term excluded).
inline Matrix reconstruct(const TrainedModel& model) {
  require_shape(model.x_mean.cols() == model.w_mean.cols(),
                "reconstruct: x_mean has " + std::to_string(model.x_mean.cols()) +
                    " factors, w_mean has " + std::to_string(model.w_mean.cols()));
  return model.x_mean * model.w_mean.transpose();
}

namespace detail {
inline void require_matching(const TrainedModel& model, const ExpressionMatrix& y, const char* op) {
  require_shape(y.n_samples() == model.n_samples() && y.n_features() == model.n_features(),
                std::string(op) + ": data is " + std::to_string(y.n_samples()) + "x" +
                    std::to_string(y.n_features()) + ", model expects " +
                    std::to_string(model.n_samples()) + "x" + std::to_string(model.n_features()));
  require_shape(y.observed.size() == 0 ||
                    (y.observed.rows() == y.data.rows() && y.observed.cols() == y.data.cols()),
                std::string(op) + ": observed mask does not match data");
}
}  // namespace detail

/// y - reconstruct(model), zero at missing entries.
inline Matrix residuals(const TrainedModel& model, const ExpressionMatrix& y) {
  detail::require_matching(model, y, "residuals");
  Matrix r = y.data - reconstruct(model);
  if (!y.fully_observed()) r = y.observed.select(r.array(), 0.0).matrix();
  return r;
}

/// Fills missing cells with the posterior-mean reconstruction. Observed
/// cells pass through unchanged.
inline ExpressionMatrix impute(const TrainedModel& model, const ExpressionMatrix& y) {
  detail::require_matching(model, y, "impute");
  ExpressionMatrix out = y;
  if (!y.fully_observed()) {
    const Matrix rec = reconstruct(model);
    out.data = y.observed.select(y.data.array(), rec.array()).matrix();
  }
  out.observed = BoolMatrix::Constant(y.n_samples(), y.n_features(), true);
  return out;
}

// ---------------------------------------------------------------------------
// Invariant checks
// ---------------------------------------------------------------------------

struct Violation {
  std::string where;
  std::string what;
};

using Violations = std::vector<Violation>;

inline std::string format_violations(const Violations& v) {
  std::ostringstream os;
  for (const auto& e : v) os << e.where << ": " << e.what << "\n";
  return os.str();
}

inline Violations validate(const ExpressionMatrix& y) {
  Violations out;
  if (y.n_samples() < 1 || y.n_features() < 1) {
    out.push_back({"data", "empty matrix"});
    return out;
  }
  if (y.observed.size() != 0 &&
      (y.observed.rows() != y.data.rows() || y.observed.cols() != y.data.cols()))
    out.push_back({"observed", "mask shape does not match data"});
  if (static_cast<Index>(y.sample_names.size()) != y.n_samples())
    out.push_back({"sample_names", "expected " + std::to_string(y.n_samples()) + " names, got " +
                                       std::to_string(y.sample_names.size())});
  if (static_cast<Index>(y.feature_names.size()) != y.n_features())
    out.push_back({"feature_names", "expected " + std::to_string(y.n_features()) + " names, got " +
                                        std::to_string(y.feature_names.size())});
  const bool has_mask = y.observed.rows() == y.data.rows() && y.observed.cols() == y.data.cols();
  for (Index g = 0; g < y.n_features(); ++g)
    for (Index i = 0; i < y.n_samples(); ++i)
      if ((!has_mask || y.observed(i, g)) && !std::isfinite(y.data(i, g)))
        out.push_back({"data(" + std::to_string(i) + "," + std::to_string(g) + ")",
                       "non-finite observed value"});
  return out;
}

inline Violations validate(const FactorConfig& c) {
  Violations out;
  if (c.n_annotated < 0 || c.n_sparse_unannotated < 0 || c.n_dense_unannotated < 0)
    out.push_back({"config", "negative factor count"});
  if (c.n_factors() < 1) out.push_back({"config", "K must be at least 1"});
  if (!(c.slab_unannotated > 0.0 && c.slab_unannotated < 0.1))
    out.push_back({"config.slab_unannotated", "must lie in (0, 0.1)"});
  if (!(c.slab_annotated >= 0.1) || !std::isfinite(c.slab_annotated))
    out.push_back({"config.slab_annotated", "must be finite and >= 0.1"});
  if (!(c.tau0 > 0.0) || !std::isfinite(c.tau0)) out.push_back({"config.tau0", "must be positive"});
  if (!(c.noise_prior_shape > 0.0 && c.noise_prior_rate > 0.0))
    out.push_back({"config.noise_prior", "shape and rate must be positive"});
  return out;
}

inline Violations validate(const AnnotationMask& m) {
  Violations out;
  if (static_cast<Index>(m.kinds.size()) != m.n_factors())
    out.push_back({"mask.kinds", "expected " + std::to_string(m.n_factors()) + " kinds, got " +
                                     std::to_string(m.kinds.size())});
  if (static_cast<Index>(m.factor_names.size()) != m.n_factors())
    out.push_back({"mask.factor_names", "expected " + std::to_string(m.n_factors()) +
                                            " names, got " + std::to_string(m.factor_names.size())});
  const Index k_max = std::min<Index>(m.n_factors(), static_cast<Index>(m.kinds.size()));
  for (Index k = 0; k < k_max; ++k) {
    const auto col = m.active.col(k);
    const std::string where = "mask column " + std::to_string(k);
    switch (m.kinds[static_cast<std::size_t>(k)]) {
      case FactorKind::dense:
        if (!col.all()) out.push_back({where, "dense factor has inactive entries"});
        break;
      case FactorKind::sparse:
        if (col.any()) out.push_back({where, "sparse factor has active entries"});
        break;
      case FactorKind::annotated:
        if (!col.any()) out.push_back({where, "annotated factor is empty"});
        break;
    }
  }
  return out;
}

inline Violations validate(const TrainedModel& model) {
  Violations out;
  const Index n = model.x_mean.rows(), g = model.w_mean.rows(), k = model.w_mean.cols();
  auto shape = [&](const Matrix& m, Index r, Index c, const char* name) {
    if (m.rows() != r || m.cols() != c)
      out.push_back({name, "shape " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                               ", expected " + std::to_string(r) + "x" + std::to_string(c)});
  };
  shape(model.x_mean, n, k, "x_mean");
  shape(model.x_scale, n, k, "x_scale");
  shape(model.w_scale, g, k, "w_scale");
  if (model.sigma2.size() != g) out.push_back({"sigma2", "length does not match G"});
  for (Index i = 0; i < model.sigma2.size(); ++i)
    if (!(model.sigma2[i] > 0.0) || !std::isfinite(model.sigma2[i]))
      out.push_back({"sigma2[" + std::to_string(i) + "]", "must be positive and finite"});
  auto positive = [&](const Matrix& m, const char* name) {
    for (Index c = 0; c < m.cols(); ++c)
      for (Index r = 0; r < m.rows(); ++r)
        if (!(m(r, c) > 0.0))
          out.push_back({std::string(name) + "(" + std::to_string(r) + "," + std::to_string(c) + ")",
                         "scale must be positive"});
  };
  positive(model.w_scale, "w_scale");
  positive(model.x_scale, "x_scale");
  if (model.mask.n_factors() != k || model.mask.n_features() != g)
    out.push_back({"mask", "shape does not match loadings"});
  if (model.config.n_factors() != k) out.push_back({"config", "factor count does not match K"});
  for (auto& v : validate(model.mask)) out.push_back(v);
  return out;
}

}  // namespace annofa
