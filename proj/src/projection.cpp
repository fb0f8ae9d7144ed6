#include "panis/projection.hpp"

#include "panis/error.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>
#include <string>

namespace panis {

std::vector<std::vector<std::pair<int, double>>> hatFunctionsOnGrid(const TriMesh& mesh, const QuadratureGrid& quad) {
  const int q = quad.points();
  std::vector<std::vector<std::pair<int, double>>> cols(static_cast<std::size_t>(mesh.nodeCount()));
  for (int p = 0; p < q; ++p)
    for (int r = 0; r < q; ++r) {
      const P1Location loc = locateP1(mesh, quad.nodes[p], quad.nodes[r]);
      for (int k = 0; k < 3; ++k)
        if (loc.weights[static_cast<std::size_t>(k)] != 0.0)
          cols[static_cast<std::size_t>(loc.nodes[static_cast<std::size_t>(k)])].emplace_back(
              p * q + r, loc.weights[static_cast<std::size_t>(k)]);
    }
  return cols;
}

ProjectionOperators ProjectionOperators::build(const TrialBasis& trial, const TriMesh& mesh,
                                               const QuadratureGrid& quad, const ProjectionOptions& options) {
  const int q = quad.points();
  if (q < trial.side || q < mesh.nodesPerSide()) {
    fail(ErrorKind::Config, "quadrature grid of " + std::to_string(q) + " points does not resolve the trial grid (" +
                                std::to_string(trial.side) + ") and the coarse mesh (" +
                                std::to_string(mesh.nodesPerSide()) + ")");
  }
  ProjectionOperators ops;
  const Eigen::MatrixXd e = trial.values(quad.nodes);
  ops.factorGram(trial, quad, options);

  const int dY = mesh.nodeCount();
  const auto hats = hatFunctionsOnGrid(mesh, quad);
  const Eigen::MatrixXd omega = quad.weights();
  ops.b_.resize(trial.count(), dY);
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(q, q);
  for (int j = 0; j < dY; ++j) {
    h.setZero();
    for (const auto& [idx, v] : hats[static_cast<std::size_t>(j)]) h(idx / q, idx % q) = v * omega(idx / q, idx % q);
    ops.b_.col(j) = fromGrid(e.transpose() * h * e);
  }
  ops.a_.resize(trial.count(), dY);
  for (int j = 0; j < dY; ++j) ops.a_.col(j) = ops.applyGramInverse(ops.b_.col(j));
  ops.factorA(options.rankTolerance);
  return ops;
}

void ProjectionOperators::factorGram(const TrialBasis& trial, const QuadratureGrid& quad,
                                     const ProjectionOptions& options) {
  const Eigen::MatrixXd e = trial.values(quad.nodes);
  gram1d_ = e.transpose() * quad.weights1d.asDiagonal() * e;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram1d_);
  if (eig.info() != Eigen::Success) fail(ErrorKind::Numerical, "eigensolver failed on the trial Gram matrix");
  q1_ = eig.eigenvectors();
  lambda1_ = eig.eigenvalues();
  const double lmax = lambda1_.maxCoeff(), lmin = lambda1_.minCoeff();
  condition_ = lmin > 0.0 ? (lmax * lmax) / (lmin * lmin) : std::numeric_limits<double>::infinity();
  shift_ = 0.0;
  if (condition_ > options.conditionLimit) {
    if (!options.allowTikhonov) {
      fail(ErrorKind::Numerical, "trial Gram matrix has condition number " + std::to_string(condition_) + " above " +
                                     std::to_string(options.conditionLimit) +
                                     "; enable the Tikhonov floor or coarsen the trial basis");
    }
    shift_ = 1e-10 * gram1d_.trace() * gram1d_.trace() / trial.count();
  }
}

void ProjectionOperators::attachGram(const TrialBasis& trial, const QuadratureGrid& quad,
                                     const ProjectionOptions& options) {
  if (trial.count() != a_.rows()) fail(ErrorKind::Contract, "trial basis does not match the stored operators");
  factorGram(trial, quad, options);
}

ProjectionOperators ProjectionOperators::fromStored(Eigen::MatrixXd A, Eigen::MatrixXd Aperp) {
  if (Aperp.rows() != A.rows() || Aperp.cols() + A.cols() != A.rows()) {
    fail(ErrorKind::Contract, "stored projection operators have inconsistent shapes");
  }
  ProjectionOperators ops;
  ops.a_ = std::move(A);
  ops.qr_.setThreshold(1e-10);
  ops.qr_.compute(ops.a_);
  ops.aperp_ = std::move(Aperp);
  return ops;
}

void ProjectionOperators::factorA(double rankTolerance) {
  qr_.setThreshold(rankTolerance);
  qr_.compute(a_);
  const Eigen::Index rank = qr_.rank();
  if (rank < a_.cols()) {
    fail(ErrorKind::Numerical, "coarse-to-fine map is rank deficient: numerical rank " + std::to_string(rank) +
                                   " of " + std::to_string(a_.cols()) + " columns");
  }
  const Eigen::Index n = a_.rows(), r = a_.cols();
  Eigen::MatrixXd sel = Eigen::MatrixXd::Zero(n, n - r);
  sel.bottomRows(n - r).setIdentity();
  aperp_ = qr_.householderQ() * sel;
}

Eigen::MatrixXd ProjectionOperators::gram() const {
  const Eigen::Index s = gram1d_.rows();
  Eigen::MatrixXd g(s * s, s * s);
  for (Eigen::Index a = 0; a < s; ++a)
    for (Eigen::Index b = 0; b < s; ++b) g.block(a * s, b * s, s, s) = gram1d_(a, b) * gram1d_;
  return g;
}

Eigen::VectorXd ProjectionOperators::applyGramInverse(const Eigen::VectorXd& rhs) const {
  if (q1_.size() == 0) fail(ErrorKind::Contract, "Gram factors are not available for stored operators");
  const int side = static_cast<int>(q1_.rows());
  const Eigen::MatrixXd m = q1_.transpose() * toGrid(rhs, side) * q1_;
  Eigen::MatrixXd scaled(side, side);
  for (int a = 0; a < side; ++a)
    for (int b = 0; b < side; ++b) scaled(a, b) = m(a, b) / (lambda1_[a] * lambda1_[b] + shift_);
  return fromGrid(q1_ * scaled * q1_.transpose());
}

Eigen::VectorXd ProjectionOperators::coarseProject(const Eigen::VectorXd& y) const {
  if (y.size() != a_.rows()) fail(ErrorKind::Contract, "fine vector has the wrong length");
  return qr_.solve(y);
}

Eigen::VectorXd ProjectionOperators::fitTrial(const Eigen::MatrixXd& field, const ResidualEngine& engine) const {
  const Eigen::MatrixXd& e = engine.trialValues();
  const QuadratureGrid& quad = engine.quadrature();
  if (field.rows() != quad.points() || field.cols() != quad.points()) {
    fail(ErrorKind::Contract, "field does not match the quadrature grid");
  }
  const Eigen::MatrixXd weighted = (quad.weights().array() * field.array()).matrix();
  return applyGramInverse(fromGrid(e.transpose() * weighted * e));
}

}  // namespace panis
