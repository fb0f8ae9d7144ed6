#pragma once

#include "panis/mesh_fem.hpp"
#include "panis/random.hpp"

#include <Eigen/Dense>

#include <vector>

namespace panis {

/// 1D profile of a separable Gaussian RBF family: side centers on [0,1] with
/// scale 1/(side-1). eta_{a*side+b}(s) = e_a(s1) e_b(s2).
struct RbfGrid {
  int side = 0;
  double scale = 0.0;
  Eigen::VectorXd centers;

  static RbfGrid regular(int side);
  int count() const noexcept { return side * side; }
  /// value(p, a) = exp(-(t_p - c_a)^2 / scale^2), and its t-derivative.
  Eigen::MatrixXd values(const Eigen::VectorXd& t) const;
  Eigen::MatrixXd derivatives(const Eigen::VectorXd& t) const;
};

using TrialBasis = RbfGrid;

/// Weight functions w_j = tau * eta_j with tau = s1(1-s1)s2(1-s2).
struct WeightBank {
  RbfGrid rbf;
  bool boundaryFactor = true;  // off only to exercise the boundary-flux term

  int count() const noexcept { return rbf.count(); }
};

/// Tensor trapezoidal rule on points x points nodes of [0,1]^2.
struct QuadratureGrid {
  Eigen::VectorXd nodes;
  Eigen::VectorXd weights1d;

  static QuadratureGrid trapezoidal(int points);
  int points() const noexcept { return static_cast<int>(nodes.size()); }
  Eigen::MatrixXd weights() const { return weights1d * weights1d.transpose(); }
};

/// u and its gradient at every quadrature node, entry (p, q) at (s_p, s_q).
struct TrialField {
  Eigen::MatrixXd u;
  Eigen::MatrixXd ux;
  Eigen::MatrixXd uy;
};

struct ResidualValue {
  double value = 0.0;
  Eigen::VectorXd dRdy;
};

struct ResidualProblem {
  ConstitutiveLaw law;
  double source = 0.0;
  bool hasNeumann = false;
  double neumannFlux = 0.0;  // constant q0 on the whole boundary
};

/// Evaluates all weighted residuals r_j(y, c) through separable matrix products.
class ResidualEngine {
 public:
  ResidualEngine(TrialBasis trial, WeightBank weights, QuadratureGrid quadrature);

  int trialDimension() const noexcept { return trial_.count(); }
  int weightCount() const noexcept { return weights_.count(); }
  const TrialBasis& trial() const noexcept { return trial_; }
  const WeightBank& weights() const noexcept { return weights_; }
  const QuadratureGrid& quadrature() const noexcept { return quad_; }

  /// Trial basis on the quadrature grid: E(p, a) = e_a(s_p).
  const Eigen::MatrixXd& trialValues() const noexcept { return e_; }
  const Eigen::MatrixXd& trialDerivatives() const noexcept { return de_; }

  TrialField evalTrial(const Eigen::VectorXd& y) const;

  /// Integral of w_j over the domain, for all j.
  Eigen::VectorXd weightIntegrals() const;

  /// All N residuals; c must be sampled on the quadrature grid.
  Eigen::VectorXd residuals(const Eigen::VectorXd& y, const Eigen::MatrixXd& c, const ResidualProblem& problem) const;

  /// Vector-Jacobian product: given dL/dr for all N residuals, returns dL/dy.
  Eigen::VectorXd residualsVjp(const Eigen::VectorXd& y, const Eigen::MatrixXd& c, const ResidualProblem& problem,
                               const Eigen::VectorXd& dLdr) const;

  ResidualValue evalResidual(int j, const Eigen::VectorXd& y, const Eigen::MatrixXd& c,
                             const ResidualProblem& problem) const;

  /// Scalar field y -> u(s) at arbitrary tensor points.
  Eigen::MatrixXd trialAt(const Eigen::VectorXd& y, const Eigen::VectorXd& s1, const Eigen::VectorXd& s2) const;

 private:
  void checkInputs(const Eigen::VectorXd& y, const Eigen::MatrixXd& c) const;
  Eigen::MatrixXd coefficient(const TrialField& field, const Eigen::MatrixXd& c, const ConstitutiveLaw& law) const;

  TrialBasis trial_;
  WeightBank weights_;
  QuadratureGrid quad_;
  Eigen::MatrixXd e_, de_;  // Q x trial side
  Eigen::MatrixXd w_, dw_;  // Q x weight side
  Eigen::VectorXd wBoundary0_, wBoundary1_;  // weight profile at t = 0 and t = 1
};

/// Reshapes a coefficient vector with index a*side + b into a side x side matrix.
Eigen::MatrixXd toGrid(const Eigen::VectorXd& v, int side);
Eigen::VectorXd fromGrid(const Eigen::MatrixXd& m);

/// M independent uniform draws from {0..N-1}, with replacement.
std::vector<int> subsampleResiduals(int n, int m, Rng& rng);

}  // namespace panis
