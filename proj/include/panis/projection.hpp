#pragma once

#include "panis/mesh_fem.hpp"
#include "panis/residual.hpp"

#include <Eigen/Dense>

namespace panis {

struct ProjectionOptions {
  double conditionLimit = 1e12;
  bool allowTikhonov = true;
  double rankTolerance = 1e-10;
};

/// Coarse-to-fine map A = a^-1 B between coarse nodal values Y and trial
/// coefficients y, minimizing the L2 misfit of the two fields, and an
/// orthonormal basis of the complement of col(A).
class ProjectionOperators {
 public:
  static ProjectionOperators build(const TrialBasis& trial, const TriMesh& mesh, const QuadratureGrid& quad,
                                   const ProjectionOptions& options = {});
  /// Rebuilds from stored A and Aperp, without the Gram matrices.
  static ProjectionOperators fromStored(Eigen::MatrixXd A, Eigen::MatrixXd Aperp);
  /// Recomputes the (cheap) 1D Gram factors so fitTrial works on stored operators.
  void attachGram(const TrialBasis& trial, const QuadratureGrid& quad, const ProjectionOptions& options = {});

  const Eigen::MatrixXd& A() const noexcept { return a_; }
  const Eigen::MatrixXd& Aperp() const noexcept { return aperp_; }
  /// Cross-Gram B_kJ = integral of eta_k H_J.
  const Eigen::MatrixXd& B() const noexcept { return b_; }
  /// 1D factor of the Gram matrix: a = a1 (x) a1.
  const Eigen::MatrixXd& gram1d() const noexcept { return gram1d_; }
  Eigen::MatrixXd gram() const;
  double tikhonovShift() const noexcept { return shift_; }
  double gramCondition() const noexcept { return condition_; }

  int fineDimension() const noexcept { return static_cast<int>(a_.rows()); }
  int coarseDimension() const noexcept { return static_cast<int>(a_.cols()); }

  /// Least-squares coefficients (A^T A)^-1 A^T y.
  Eigen::VectorXd coarseProject(const Eigen::VectorXd& y) const;

  /// Solves a x = rhs through the Kronecker eigendecomposition.
  Eigen::VectorXd applyGramInverse(const Eigen::VectorXd& rhs) const;

  /// L2 projection of a field sampled on the quadrature grid onto the trial space.
  Eigen::VectorXd fitTrial(const Eigen::MatrixXd& field, const ResidualEngine& engine) const;

 private:
  void factorA(double rankTolerance);
  void factorGram(const TrialBasis& trial, const QuadratureGrid& quad, const ProjectionOptions& options);

  Eigen::MatrixXd a_, aperp_, b_, gram1d_;
  Eigen::MatrixXd q1_;
  Eigen::VectorXd lambda1_;
  double shift_ = 0.0;
  double condition_ = 1.0;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr_;
};

/// Hat function values of every coarse node on the quadrature grid:
/// column J holds H_J at point (p, q), row index p*Q + q.
std::vector<std::vector<std::pair<int, double>>> hatFunctionsOnGrid(const TriMesh& mesh, const QuadratureGrid& quad);

}  // namespace panis
