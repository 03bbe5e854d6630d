#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <unistd.h>

#include "annofa/annofa.hpp"

namespace testing_support {

using namespace annofa;

/// Random model of the given shape with a valid all-annotated mask.
inline TrainedModel random_model(Index N, Index G, Index K, std::uint64_t seed) {
  Rng rng = make_rng(seed, 1);
  TrainedModel m;
  m.x_mean = normal_matrix(N, K, rng);
  m.w_mean = normal_matrix(G, K, rng);
  m.x_scale = Matrix::Constant(N, K, 0.1);
  m.w_scale = Matrix::Constant(G, K, 0.1);
  m.sigma2 = Vector::Constant(G, 1.0);
  m.tau_mean = 0.1;
  m.mask.active = BoolMatrix::Constant(G, K, true);
  m.mask.kinds.assign(static_cast<std::size_t>(K), FactorKind::annotated);
  for (Index k = 0; k < K; ++k) m.mask.factor_names.push_back("f" + std::to_string(k));
  m.config = m.mask.matching_config();
  return m;
}

inline AnnotationMask all_annotated(const BoolMatrix& active) {
  AnnotationMask m;
  m.active = active;
  m.kinds.assign(static_cast<std::size_t>(active.cols()), FactorKind::annotated);
  for (Index k = 0; k < active.cols(); ++k) m.factor_names.push_back("f" + std::to_string(k));
  return m;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("annofa_" + tag + "_" + std::to_string(std::hash<std::string>{}(tag + std::to_string(::getpid()))));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

}  // namespace testing_support
