#pragma once

#include "panis/error.hpp"
#include "panis/harness.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace panis::test {

inline double relErr(double a, double b, double floor = 1e-300) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double relNorm(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).norm() / std::max(b.norm(), 1e-300);
}

/// Small PANIS problem: 33-pixel inputs, 9x9 coarse nodes, 16x16 trial basis.
inline RunConfig deskConfig() { return RunConfig::fromPreset("desk-panis"); }

/// Small mPANIS problem reusing the 33-pixel net so tests stay fast.
inline RunConfig smallMultiscaleConfig(int atoms) {
  RunConfig c = RunConfig::fromPreset("desk-panis");
  c.mode = SurrogateMode::Mpanis;
  c.surrogate.mode = SurrogateMode::Mpanis;
  c.surrogate.atomCount = atoms;
  c.weightSide = 16;
  c.train.lambda = 1e4;
  c.train.R = 4;
  c.train.adam.lrAtoms = 3e-2;
  return c;
}

}  // namespace panis::test
