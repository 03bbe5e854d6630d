#pragma once

#include <algorithm>
#include <cmath>
#include <iterator>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "types.hpp"

namespace annofa {

// ---------------------------------------------------------------------------
// Mask recovery
// ---------------------------------------------------------------------------

struct F1Score {
  std::vector<double> per_factor;
  double overall = 0.0;
};

namespace detail {
inline double f1_from_counts(double tp, double fp, double fn) {
  const double denom = 2.0 * tp + fp + fn;
  return denom > 0.0 ? 2.0 * tp / denom : 0.0;
}
}  // namespace detail

/// Predicted-active is |w| > threshold. Per-factor scores cover every column;
/// `overall` pools entries of `columns` (all columns when empty).
inline F1Score mask_f1(const BoolMatrix& truth, const Matrix& w, double threshold,
                       std::span<const Index> columns = {}) {
  require_shape(truth.rows() == w.rows() && truth.cols() == w.cols(),
                "mask_f1: truth is " + std::to_string(truth.rows()) + "x" + std::to_string(truth.cols()) +
                    ", weights are " + std::to_string(w.rows()) + "x" + std::to_string(w.cols()));
  if (!(threshold > 0.0)) throw DomainError("mask_f1: threshold must be positive");

  F1Score out;
  std::vector<double> tp(static_cast<std::size_t>(w.cols())), fp(tp.size()), fn(tp.size());
  for (Index k = 0; k < w.cols(); ++k) {
    for (Index g = 0; g < w.rows(); ++g) {
      const bool pred = std::abs(w(g, k)) > threshold;
      const bool act = truth(g, k);
      tp[k] += pred && act;
      fp[k] += pred && !act;
      fn[k] += !pred && act;
    }
    out.per_factor.push_back(detail::f1_from_counts(tp[k], fp[k], fn[k]));
  }
  double TP = 0, FP = 0, FN = 0;
  auto pool = [&](Index k) { TP += tp[k]; FP += fp[k]; FN += fn[k]; };
  if (columns.empty())
    for (Index k = 0; k < w.cols(); ++k) pool(k);
  else
    for (Index k : columns) {
      require_shape(k >= 0 && k < w.cols(), "mask_f1: column index out of range");
      pool(k);
    }
  out.overall = detail::f1_from_counts(TP, FP, FN);
  return out;
}

inline F1Score mask_f1(const AnnotationMask& truth, const Matrix& w, double threshold) {
  return mask_f1(truth.active, w, threshold);
}

// ---------------------------------------------------------------------------
// Variance explained
// ---------------------------------------------------------------------------

/// R^2_k = 1 - ||Y - x_k w_k^T||^2 / ||Y||^2 over observed entries, using
/// posterior means. Not mean-centred: inputs are expected to be standardized.
inline double factor_r2(const ExpressionMatrix& y, const TrainedModel& model, Index k) {
  if (k < 0 || k >= model.n_factors()) throw DomainError("factor_r2: factor index out of range");
  require_shape(y.n_samples() == model.n_samples() && y.n_features() == model.n_features(),
                "factor_r2: data and model dimensions differ");
  const auto x = model.x_mean.col(k);
  const auto w = model.w_mean.col(k);
  double total = 0.0, resid = 0.0;
  if (y.fully_observed()) {
    total = y.data.squaredNorm();
    if (y.n_samples() == 0 || y.n_features() == 0) throw DomainError("factor_r2: empty data");
    // ||Y - x w^T||^2 = ||Y||^2 - 2 x^T Y w + ||x||^2 ||w||^2
    resid = total - 2.0 * x.dot(y.data * w) + x.squaredNorm() * w.squaredNorm();
  } else {
    Index n_obs = 0;
    for (Index g = 0; g < y.n_features(); ++g)
      for (Index i = 0; i < y.n_samples(); ++i) {
        if (!y.observed(i, g)) continue;
        ++n_obs;
        const double v = y.data(i, g);
        const double r = v - x[i] * w[g];
        total += v * v;
        resid += r * r;
      }
    if (n_obs == 0) throw DomainError("factor_r2: no observed entries");
  }
  if (!(total > 0.0)) throw DomainError("factor_r2: data has zero total sum of squares");
  return 1.0 - resid / total;
}

struct FactorReport {
  Index index = 0;
  std::string name;
  FactorKind kind = FactorKind::annotated;
  double r2 = 0.0;
  Index n_active = 0;
  std::vector<std::pair<std::string, double>> top_weights;
};

/// Factors ordered by R^2 descending, ties by index ascending.
inline std::vector<FactorReport> rank_factors(const ExpressionMatrix& y, const TrainedModel& model,
                                              Index top_n, double threshold = 0.1, Index n_top_weights = 10) {
  if (top_n < 0 || top_n > model.n_factors())
    throw DomainError("rank_factors: top_n must lie in [0, K]");
  std::vector<FactorReport> all;
  for (Index k = 0; k < model.n_factors(); ++k) {
    FactorReport r;
    r.index = k;
    r.name = k < static_cast<Index>(model.mask.factor_names.size()) ? model.mask.factor_names[k]
                                                                      : "factor_" + std::to_string(k);
    r.kind = k < static_cast<Index>(model.mask.kinds.size()) ? model.mask.kinds[k] : FactorKind::annotated;
    r.r2 = factor_r2(y, model, k);
    const auto w = model.w_mean.col(k);
    r.n_active = (w.array().abs() > threshold).count();
    std::vector<Index> order(static_cast<std::size_t>(w.size()));
    std::iota(order.begin(), order.end(), Index{0});
    const auto n_keep = std::min<Index>(n_top_weights, w.size());
    std::partial_sort(order.begin(), order.begin() + n_keep, order.end(), [&](Index a, Index b) {
      const double wa = std::abs(w[a]), wb = std::abs(w[b]);
      return wa != wb ? wa > wb : a < b;
    });
    for (Index j = 0; j < n_keep; ++j) {
      const Index g = order[j];
      const std::string fname =
          g < static_cast<Index>(y.feature_names.size()) ? y.feature_names[g] : "g" + std::to_string(g);
      r.top_weights.emplace_back(fname, w[g]);
    }
    all.push_back(std::move(r));
  }
  std::stable_sort(all.begin(), all.end(), [](const FactorReport& a, const FactorReport& b) {
    return a.r2 != b.r2 ? a.r2 > b.r2 : a.index < b.index;
  });
  all.resize(static_cast<std::size_t>(top_n));
  return all;
}

// ---------------------------------------------------------------------------
// AUROC
// ---------------------------------------------------------------------------

/// Probability that a random positive outscores a random negative, ties
/// counted one half. Computed from average ranks.
template <typename Scores, typename Labels>
double auroc(const Scores& scores, const Labels& labels) {
  const std::size_t n = static_cast<std::size_t>(std::size(scores));
  require_shape(n == static_cast<std::size_t>(std::size(labels)), "auroc: scores and labels differ in length");
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (std::isnan(static_cast<double>(scores[i]))) throw DomainError("auroc: NaN score");
    n_pos += static_cast<bool>(labels[i]);
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw DomainError("auroc: labels must contain both classes");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based
    for (std::size_t t = i; t <= j; ++t)
      if (labels[order[t]]) pos_rank_sum += avg_rank;
    i = j + 1;
  }
  const double P = static_cast<double>(n_pos), Nn = static_cast<double>(n_neg);
  return (pos_rank_sum - P * (P + 1.0) / 2.0) / (P * Nn);
}

// ---------------------------------------------------------------------------
// Factor matching
// ---------------------------------------------------------------------------

struct FactorMatch {
  Index true_index = 0;
  Index learned_index = 0;
  double abs_corr = 0.0;
  /// Sign of the correlation; learned factors are identified only up to sign.
  int sign = 1;
};

/// Pearson correlation; 0 when either side is constant.
inline double pearson(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b) {
  require_shape(a.size() == b.size(), "pearson: length mismatch");
  const Index n = a.size();
  if (n < 2) return 0.0;
  const Vector da = a.array() - a.mean();
  const Vector db = b.array() - b.mean();
  const double sa = da.norm(), sb = db.norm();
  if (sa == 0.0 || sb == 0.0) return 0.0;
  return std::clamp(da.dot(db) / (sa * sb), -1.0, 1.0);
}

namespace detail {
// Minimum-cost assignment of every row to a distinct column (rows <= cols).
// Shortest augmenting path with potentials, O(rows^2 cols).
inline std::vector<Index> hungarian(const Matrix& cost) {
  const Index n = cost.rows(), m = cost.cols();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<Index> p(m + 1, 0), way(m + 1, 0);
  for (Index i = 1; i <= n; ++i) {
    p[0] = i;
    Index j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const Index i0 = p[j0];
      double delta = inf;
      Index j1 = 0;
      for (Index j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (Index j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const Index j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<Index> row_to_col(static_cast<std::size_t>(n), -1);
  for (Index j = 1; j <= m; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}
}  // namespace detail

/// One-to-one matching of true loading columns to learned columns maximizing
/// the summed absolute correlation. Exact for K <= exact_limit, greedy above.
inline std::vector<FactorMatch> match_factors(const Matrix& w_true, const Matrix& w_learned,
                                              Index exact_limit = 25) {
  require_shape(w_true.rows() == w_learned.rows(), "match_factors: feature counts differ");
  const Index K = w_true.cols(), Kp = w_learned.cols();
  if (K > Kp) throw ShapeError("match_factors: more true factors than learned factors");

  Matrix corr(K, Kp);
  for (Index a = 0; a < K; ++a)
    for (Index b = 0; b < Kp; ++b) corr(a, b) = pearson(w_true.col(a), w_learned.col(b));

  std::vector<Index> assign(static_cast<std::size_t>(K), -1);
  if (K <= exact_limit) {
    assign = detail::hungarian(-corr.cwiseAbs());
  } else {
    std::vector<std::tuple<double, Index, Index>> pairs;
    for (Index a = 0; a < K; ++a)
      for (Index b = 0; b < Kp; ++b) pairs.emplace_back(-std::abs(corr(a, b)), a, b);
    std::sort(pairs.begin(), pairs.end());
    std::vector<char> used_a(K, 0), used_b(Kp, 0);
    for (auto& [score, a, b] : pairs) {
      if (used_a[a] || used_b[b]) continue;
      used_a[a] = used_b[b] = 1;
      assign[a] = b;
    }
  }
  std::vector<FactorMatch> out;
  for (Index a = 0; a < K; ++a) {
    const Index b = assign[a];
    const double c = corr(a, b);
    out.push_back({a, b, std::abs(c), c < 0.0 ? -1 : 1});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Annotation refinement
// ---------------------------------------------------------------------------

struct RefinedFactor {
  Index index = 0;
  std::string name;
  std::vector<Index> added;
  std::vector<Index> removed;
};

/// added = learned-active and not in the prior mask; removed = in the mask
/// but not learned-active.
inline std::vector<RefinedFactor> refined_annotations(const TrainedModel& model, double threshold = 0.1) {
  require_shape(model.mask.n_features() == model.n_features() && model.mask.n_factors() == model.n_factors(),
                "refined_annotations: model mask does not match loadings");
  std::vector<RefinedFactor> out;
  for (Index k = 0; k < model.n_factors(); ++k) {
    RefinedFactor r;
    r.index = k;
    r.name = k < static_cast<Index>(model.mask.factor_names.size()) ? model.mask.factor_names[k] : "";
    for (Index g = 0; g < model.n_features(); ++g) {
      const bool learned = std::abs(model.w_mean(g, k)) > threshold;
      const bool prior = model.mask.active(g, k);
      if (learned && !prior) r.added.push_back(g);
      if (prior && !learned) r.removed.push_back(g);
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace annofa
