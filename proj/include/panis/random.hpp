#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <span>

namespace panis {

using Rng = std::mt19937_64;

inline void fillStandardNormal(Rng& rng, std::span<double> out) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : out) v = normal(rng);
}

inline Eigen::VectorXd standardNormalVector(Rng& rng, Eigen::Index n) {
  Eigen::VectorXd v(n);
  fillStandardNormal(rng, {v.data(), static_cast<std::size_t>(n)});
  return v;
}

/// Derives an independent stream from a base seed and a stream id.
inline Rng deriveRng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

}  // namespace panis
