#pragma once

#include <cstdint>
#include <random>

#include "types.hpp"

namespace annofa {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; used to derive independent streams from one seed.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
  return mix_seed(mix_seed(mix_seed(seed) ^ stream) ^ index);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
  return Rng(derive_seed(seed, stream, index));
}

/// Fills column-major with iid N(mean, sd^2) draws.
template <typename Derived>
void fill_normal(Eigen::DenseBase<Derived>& out, Rng& rng, double mean = 0.0, double sd = 1.0) {
  std::normal_distribution<double> dist(mean, sd);
  for (Index c = 0; c < out.cols(); ++c)
    for (Index r = 0; r < out.rows(); ++r) out(r, c) = dist(rng);
}

inline Matrix normal_matrix(Index rows, Index cols, Rng& rng, double mean = 0.0, double sd = 1.0) {
  Matrix m(rows, cols);
  fill_normal(m, rng, mean, sd);
  return m;
}

}  // namespace annofa
