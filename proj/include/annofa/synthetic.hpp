#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "evaluation.hpp"
#include "inference.hpp"
#include "random.hpp"
#include "types.hpp"

namespace annofa {

struct SyntheticSpec {
  Index n_samples = 1000;
  Index n_features = 200;
  Index n_factors = 10;
  double loading_sd = 2.0;
  double min_abs_loading = 0.5;
  double sparsity_min = 0.85;
  double sparsity_max = 0.95;
  double noise_variance = 1.0;
  std::uint64_t seed = 42;
};

struct SyntheticDataset {
  ExpressionMatrix y;
  Matrix x_true;
  Matrix w_true;
  AnnotationMask mask_true;
};

inline void check(const SyntheticSpec& s) {
  if (s.n_samples < 1 || s.n_features < 1 || s.n_factors < 1) throw ConfigError("synthetic: dimensions must be positive");
  if (!(s.sparsity_min >= 0.0 && s.sparsity_min <= s.sparsity_max && s.sparsity_max < 1.0))
    throw ConfigError("synthetic: sparsity range must satisfy 0 <= min <= max < 1");
  if (!(s.min_abs_loading >= 0.0)) throw ConfigError("synthetic: min_abs_loading must be nonnegative");
  if (!(s.loading_sd > 0.0) || !(s.noise_variance >= 0.0)) throw ConfigError("synthetic: bad loading_sd/noise_variance");
}

namespace detail {
// k distinct indices from [0, n), sorted.
inline std::vector<Index> sample_without_replacement(std::vector<Index> pool, Index k, Rng& rng) {
  k = std::clamp<Index>(k, 0, static_cast<Index>(pool.size()));
  for (Index i = 0; i < k; ++i) {
    std::uniform_int_distribution<Index> pick(i, static_cast<Index>(pool.size()) - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(static_cast<std::size_t>(k));
  std::sort(pool.begin(), pool.end());
  return pool;
}

inline Index round_count(double v) { return static_cast<Index>(std::llround(v)); }
}  // namespace detail

/// X ~ N(0, I); W ~ N(0, loading_sd^2) with |w| < min_abs_loading zeroed and
/// then a per-factor fraction (uniform in the sparsity range) of all
/// loadings zeroed; Y = X W^T + N(0, noise_variance). A factor left with no
/// active loading keeps its largest pre-sparsification entry.
inline SyntheticDataset generate(const SyntheticSpec& spec) {
  check(spec);
  const Index N = spec.n_samples, G = spec.n_features, K = spec.n_factors;
  SyntheticDataset d;
  {
    Rng rng = make_rng(spec.seed, 0x78ULL);
    d.x_true = normal_matrix(N, K, rng);
  }
  Rng wrng = make_rng(spec.seed, 0x77ULL);
  Matrix w = normal_matrix(G, K, wrng, 0.0, spec.loading_sd);
  Rng srng = make_rng(spec.seed, 0x73ULL);
  std::uniform_real_distribution<double> sparsity(spec.sparsity_min, spec.sparsity_max);
  std::vector<Index> all(static_cast<std::size_t>(G));
  std::iota(all.begin(), all.end(), Index{0});
  for (Index k = 0; k < K; ++k) {
    Index fallback = 0;
    w.col(k).cwiseAbs().maxCoeff(&fallback);
    const double keep_value = w(fallback, k);
    for (Index g = 0; g < G; ++g)
      if (std::abs(w(g, k)) < spec.min_abs_loading) w(g, k) = 0.0;
    const double frac = spec.sparsity_max > spec.sparsity_min ? sparsity(srng) : spec.sparsity_min;
    for (Index g : detail::sample_without_replacement(all, detail::round_count(frac * G), srng)) w(g, k) = 0.0;
    if ((w.col(k).array() == 0.0).all() && std::abs(keep_value) >= spec.min_abs_loading) w(fallback, k) = keep_value;
  }
  d.w_true = std::move(w);

  Matrix y = d.x_true * d.w_true.transpose();
  if (spec.noise_variance > 0.0) {
    Rng nrng = make_rng(spec.seed, 0x6eULL);
    std::normal_distribution<double> noise(0.0, std::sqrt(spec.noise_variance));
    for (Index g = 0; g < G; ++g)
      for (Index i = 0; i < N; ++i) y(i, g) += noise(nrng);
  }
  d.y = ExpressionMatrix::from_dense(std::move(y));

  d.mask_true.active = (d.w_true.array() != 0.0);
  d.mask_true.kinds.assign(static_cast<std::size_t>(K), FactorKind::annotated);
  for (Index k = 0; k < K; ++k) d.mask_true.factor_names.push_back("factor_" + std::to_string(k + 1));
  return d;
}

/// Flips, per annotated column, exactly round(f * n_active) active entries
/// off and round(f * n_inactive) inactive entries on.
inline AnnotationMask inject_noise(const AnnotationMask& mask, double noise_fraction, std::uint64_t seed) {
  if (!(noise_fraction >= 0.0 && noise_fraction < 1.0))
    throw DomainError("inject_noise: noise fraction must lie in [0, 1)");
  AnnotationMask out = mask;
  for (Index k = 0; k < mask.n_factors(); ++k) {
    if (mask.kinds[static_cast<std::size_t>(k)] != FactorKind::annotated) continue;
    std::vector<Index> on, off;
    for (Index g = 0; g < mask.n_features(); ++g) (mask.active(g, k) ? on : off).push_back(g);
    Rng rng = make_rng(seed, 0x6e6f6973ULL, static_cast<std::uint64_t>(k));
    const auto n_off = detail::round_count(noise_fraction * static_cast<double>(on.size()));
    const auto n_on = detail::round_count(noise_fraction * static_cast<double>(off.size()));
    for (Index g : detail::sample_without_replacement(on, n_off, rng)) out.active(g, k) = false;
    for (Index g : detail::sample_without_replacement(off, n_on, rng)) out.active(g, k) = true;
  }
  return out;
}

/// Inserts round(fraction * A) random annotated columns after the last
/// annotated column (A = number of annotated columns). Each new column's
/// active rate is resampled from the original annotated columns' rates.
inline AnnotationMask add_redundant_factors(const AnnotationMask& mask, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0)) throw DomainError("add_redundant_factors: fraction must be nonnegative");
  const auto annotated = mask.columns_of(FactorKind::annotated);
  const Index n_new = detail::round_count(fraction * static_cast<double>(annotated.size()));
  if (n_new == 0) return mask;
  if (annotated.empty()) throw ConfigError("add_redundant_factors: mask has no annotated columns");
  const Index G = mask.n_features();

  std::vector<double> rates;
  for (Index k : annotated) rates.push_back(mask.active.col(k).cast<double>().mean());
  Rng rng = make_rng(seed, 0x72656475ULL);
  std::uniform_int_distribution<std::size_t> pick_rate(0, rates.size() - 1);
  std::vector<Index> all(static_cast<std::size_t>(G));
  std::iota(all.begin(), all.end(), Index{0});

  const Index insert_at = annotated.back() + 1;
  const Index K = mask.n_factors();
  AnnotationMask out;
  out.active.resize(G, K + n_new);
  out.active.leftCols(insert_at) = mask.active.leftCols(insert_at);
  out.active.rightCols(K - insert_at) = mask.active.rightCols(K - insert_at);
  out.kinds.assign(mask.kinds.begin(), mask.kinds.begin() + insert_at);
  out.factor_names.assign(mask.factor_names.begin(), mask.factor_names.begin() + insert_at);
  for (Index r = 0; r < n_new; ++r) {
    const double rate = rates[pick_rate(rng)];
    const Index n_active = std::max<Index>(1, detail::round_count(rate * static_cast<double>(G)));
    auto col = out.active.col(insert_at + r);
    col.setConstant(false);
    for (Index g : detail::sample_without_replacement(all, n_active, rng)) col(g) = true;
    out.kinds.push_back(FactorKind::annotated);
    out.factor_names.push_back("redundant-" + std::to_string(r + 1));
  }
  out.kinds.insert(out.kinds.end(), mask.kinds.begin() + insert_at, mask.kinds.end());
  out.factor_names.insert(out.factor_names.end(), mask.factor_names.begin() + insert_at, mask.factor_names.end());
  return out;
}

/// Appends all-false sparse and all-true dense placeholder columns.
inline AnnotationMask append_unannotated(const AnnotationMask& mask, Index n_sparse, Index n_dense) {
  AnnotationMask out = mask;
  const Index G = mask.n_features(), K = mask.n_factors();
  out.active.conservativeResize(G, K + n_sparse + n_dense);
  for (Index j = 0; j < n_sparse; ++j) {
    out.active.col(K + j).setConstant(false);
    out.kinds.push_back(FactorKind::sparse);
    out.factor_names.push_back("sparse-" + std::to_string(j + 1));
  }
  for (Index j = 0; j < n_dense; ++j) {
    out.active.col(K + n_sparse + j).setConstant(true);
    out.kinds.push_back(FactorKind::dense);
    out.factor_names.push_back("dense-" + std::to_string(j + 1));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Noise-robustness experiment
// ---------------------------------------------------------------------------

struct ExperimentOptions {
  TrainOptions train;
  FactorConfig config;  // slab widths and hyperparameters; counts are derived
  Index n_sparse = 0;
  Index n_dense = 0;
};

struct ExperimentCell {
  double noise = 0.0;
  double redundant = 0.0;
  /// F1 of the perturbed prior mask itself against the truth.
  double mask_f1 = 0.0;
  double final_f1 = 0.0;
  std::vector<double> final_factor_f1;
  std::vector<double> factor_r2;
  std::vector<Index> redundant_columns;
  TrainingTrace trace;
};

struct ExperimentReport {
  std::vector<ExperimentCell> cells;
};

/// Trains one model per (noise, redundant) pair on the same generated data
/// and records the F1-versus-truth trajectory of each.
inline ExperimentReport noise_experiment(const SyntheticSpec& spec, const std::vector<double>& noise_levels,
                                         const std::vector<double>& redundant_levels, const ExperimentOptions& opts) {
  const SyntheticDataset data = generate(spec);
  ExperimentReport report;
  std::uint64_t cell_id = 0;
  for (double noise : noise_levels)
    for (double redundant : redundant_levels) {
      const std::uint64_t cell_seed = derive_seed(spec.seed, 0x63656c6cULL, cell_id++);
      AnnotationMask prior = inject_noise(data.mask_true, noise, cell_seed);
      prior = add_redundant_factors(prior, redundant, cell_seed);
      prior = append_unannotated(prior, opts.n_sparse, opts.n_dense);

      // Truth in the prior's layout: redundant and unannotated columns are
      // inactive everywhere; F1 pools annotated columns only.
      BoolMatrix truth = BoolMatrix::Constant(prior.n_features(), prior.n_factors(), false);
      const Index K_true = data.mask_true.n_factors();
      truth.leftCols(K_true) = data.mask_true.active;

      ExperimentCell cell;
      cell.noise = noise;
      cell.redundant = redundant;
      const auto annotated = prior.columns_of(FactorKind::annotated);
      for (Index k : annotated)
        if (k >= K_true) cell.redundant_columns.push_back(k);
      cell.mask_f1 = mask_f1(truth, prior.active.cast<double>().matrix(), 0.5, annotated).overall;

      TrainOptions train = opts.train;
      train.truth_mask = truth;
      train.seed = cell_seed;
      const FactorConfig config = prior.matching_config(opts.config);
      TrainedModel model = fit(data.y, prior, config, train);

      const auto f1 = mask_f1(truth, model.w_mean, train.active_threshold, annotated);
      cell.final_f1 = f1.overall;
      cell.final_factor_f1 = f1.per_factor;
      for (Index k = 0; k < model.n_factors(); ++k) cell.factor_r2.push_back(factor_r2(data.y, model, k));
      cell.trace = std::move(model.trace);
      report.cells.push_back(std::move(cell));
    }
  return report;
}

}  // namespace annofa
