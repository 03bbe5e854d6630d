#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace annofa {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Array = Eigen::ArrayXXd;
using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;
using Index = Eigen::Index;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct DomainError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ParseError : Error {
  using Error::Error;
};
struct VersionError : Error {
  using Error::Error;
};
struct ChecksumError : Error {
  using Error::Error;
};
struct NumericalError : Error {
  using Error::Error;
};

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

// ---------------------------------------------------------------------------
// Observations
// ---------------------------------------------------------------------------

/// Dense N x G observation matrix. `observed(i, g) == false` marks a missing
/// cell; the value stored in `data` at such a cell is ignored everywhere.
struct ExpressionMatrix {
  Matrix data;
  BoolMatrix observed;
  std::vector<std::string> sample_names;
  std::vector<std::string> feature_names;

  Index n_samples() const { return data.rows(); }
  Index n_features() const { return data.cols(); }
  bool fully_observed() const { return observed.size() == 0 || observed.all(); }

  /// Builds a fully observed matrix with generated names ("s0".., "g0"..).
  static ExpressionMatrix from_dense(Matrix values) {
    ExpressionMatrix y;
    y.observed = BoolMatrix::Constant(values.rows(), values.cols(), true);
    for (Index i = 0; i < values.rows(); ++i) y.sample_names.push_back("s" + std::to_string(i));
    for (Index g = 0; g < values.cols(); ++g) y.feature_names.push_back("g" + std::to_string(g));
    y.data = std::move(values);
    return y;
  }
};

// ---------------------------------------------------------------------------
// Factor layout
// ---------------------------------------------------------------------------

enum class FactorKind { annotated, sparse, dense };

inline const char* to_string(FactorKind kind) {
  switch (kind) {
    case FactorKind::annotated: return "annotated";
    case FactorKind::sparse: return "sparse";
    case FactorKind::dense: return "dense";
  }
  return "?";
}

inline FactorKind factor_kind_from_string(const std::string& s) {
  if (s == "annotated") return FactorKind::annotated;
  if (s == "sparse") return FactorKind::sparse;
  if (s == "dense") return FactorKind::dense;
  throw ParseError("unknown factor kind '" + s + "'");
}

struct FactorConfig {
  Index n_annotated = 0;
  Index n_sparse_unannotated = 0;
  Index n_dense_unannotated = 0;
  double slab_annotated = 1.0;
  double slab_unannotated = 0.05;
  /// Scale of the half-Cauchy prior on the global shrinkage tau.
  double tau0 = 0.1;
  /// Inverse-gamma(shape, rate) prior on each residual variance.
  double noise_prior_shape = 1.0;
  double noise_prior_rate = 1.0;

  Index n_factors() const { return n_annotated + n_sparse_unannotated + n_dense_unannotated; }
};

/// G x K prior activity pattern. Columns of kind `dense` are all-true,
/// columns of kind `sparse` all-false.
struct AnnotationMask {
  BoolMatrix active;
  std::vector<FactorKind> kinds;
  std::vector<std::string> factor_names;

  Index n_features() const { return active.rows(); }
  Index n_factors() const { return active.cols(); }

  Index count(FactorKind kind) const {
    Index n = 0;
    for (auto k : kinds) n += (k == kind);
    return n;
  }

  std::vector<Index> columns_of(FactorKind kind) const {
    std::vector<Index> out;
    for (std::size_t k = 0; k < kinds.size(); ++k)
      if (kinds[k] == kind) out.push_back(static_cast<Index>(k));
    return out;
  }

  /// Config whose factor counts match this mask, other fields from `base`.
  FactorConfig matching_config(FactorConfig base = {}) const {
    base.n_annotated = count(FactorKind::annotated);
    base.n_sparse_unannotated = count(FactorKind::sparse);
    base.n_dense_unannotated = count(FactorKind::dense);
    return base;
  }
};

// ---------------------------------------------------------------------------
// Training output
// ---------------------------------------------------------------------------

struct Checkpoint {
  long iteration = 0;
  double elbo = 0.0;
  double seconds = 0.0;
  std::optional<double> f1;
  std::vector<double> factor_f1;
};

struct TrainingTrace {
  std::vector<Checkpoint> checkpoints;
  bool converged = false;
};

/// Posterior summaries of a fitted model. Loadings are G x K, factor states
/// N x K, residual variances length G.
struct TrainedModel {
  Matrix w_mean;
  Matrix w_scale;
  Matrix x_mean;
  Matrix x_scale;
  Vector sigma2;
  double tau_mean = 0.0;
  FactorConfig config;
  AnnotationMask mask;
  TrainingTrace trace;

  Index n_samples() const { return x_mean.rows(); }
  Index n_features() const { return w_mean.rows(); }
  Index n_factors() const { return w_mean.cols(); }
};

}  // namespace annofa
