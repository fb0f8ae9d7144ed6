#pragma once

#include "panis/cnn.hpp"
#include "panis/container.hpp"
#include "panis/mesh_fem.hpp"
#include "panis/projection.hpp"
#include "panis/residual.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <unordered_map>
#include <vector>

namespace panis {

enum class SurrogateMode { Panis, Mpanis };

/// Where the low-rank factor L lives for PANIS: on the coarse nodal space and
/// lifted by A (d_Y x d'), or directly on the trial space (d_y x d').
enum class CovarianceSpace { Coarse, Fine };

struct SurrogateOptions {
  SurrogateMode mode = SurrogateMode::Panis;
  CovarianceSpace covariance = CovarianceSpace::Coarse;
  int rank = 10;
  int atomCount = 0;
  double xFloor = 1e-6;
  double initialSigma = 1e-2;
  double initialLScale = 1e-3;
  double boundaryMaskTolerance = 1e-6;
};

/// Fixed operators shared by every evaluation of the surrogate.
struct SurrogateContext {
  std::shared_ptr<const ConvNet> net;
  std::shared_ptr<const TriMesh> mesh;
  std::shared_ptr<const ProjectionOperators> projection;
  std::shared_ptr<const ResidualEngine> engine;
  double source = 100.0;
  NewtonOptions newton;
};

/// Offsets of the parameter groups in the flat vector psi = [net | L | log sigma | atoms].
struct ParameterLayout {
  int netCount = 0;
  int lOffset = 0, lRows = 0, lCols = 0;
  int logSigmaOffset = 0;
  int atomsOffset = 0, atomDim = 0, atomCount = 0;
  int total = 0;
};

struct EntropyValue {
  double value = 0.0;
  Eigen::MatrixXd dL;
  double dLogSigma = 0.0;
};

/// Mean pipeline for a batch: X = net(c), Y = solve(X), mu = A Y.
struct MeanBatch {
  Tape tape;
  std::vector<Eigen::VectorXd> X;
  std::vector<CoarseModel> models;
  std::vector<CoarseSolution> solutions;
  std::vector<Eigen::VectorXd> mu;
};

struct PosteriorSample {
  Eigen::VectorXd y;
  Eigen::VectorXd yc;
  Eigen::VectorXd yfPrime;           // mPANIS only, masked
  Eigen::VectorXd perturbedX;        // mPANIS only
  std::vector<bool> clamped;         // mPANIS only
  CoarseModel model;                 // mPANIS only: the perturbed solve
  CoarseSolution solution;           // mPANIS only
  int clampCount = 0;
};

struct PredictionBands {
  Eigen::VectorXd coefficients;  // posterior mean in the trial basis
  Eigen::MatrixXd mean, sd, upper, lower;
};

std::uint64_t hashInput(const std::vector<double>& x);

class Surrogate {
 public:
  Surrogate(SurrogateContext context, SurrogateOptions options);

  const SurrogateContext& context() const noexcept { return ctx_; }
  const SurrogateOptions& options() const noexcept { return opt_; }
  const ParameterLayout& layout() const noexcept { return layout_; }
  int fineDimension() const noexcept { return ctx_.projection->fineDimension(); }
  int coarseDimension() const noexcept { return ctx_.projection->coarseDimension(); }

  Eigen::VectorXd initialParameters(Rng& rng) const;

  Eigen::MatrixXd covFactor(const Eigen::VectorXd& psi) const;
  double logSigma(const Eigen::VectorXd& psi) const { return psi[layout_.logSigmaOffset]; }
  Eigen::VectorXd atom(const Eigen::VectorXd& psi, int k) const;

  /// Half log-determinant of the posterior covariance (Gaussian constant dropped).
  /// PANIS: Sigma = B L L^T B^T + sigma^2 I on the trial space. mPANIS: the inner
  /// coarse covariance S = L L^T + sigma^2 I.
  EntropyValue entropy(const Eigen::VectorXd& psi) const;

  /// Nodal X of a network output grid.
  Eigen::VectorXd nodalField(const Eigen::MatrixXd& netOutput) const;
  Eigen::VectorXd dirichlet(const BoundaryCondition& bc) const;

  MeanBatch meanSolve(const Eigen::VectorXd& psi, BatchNormBuffers& buffers, const std::vector<Eigen::MatrixXd>& c,
                      const BoundaryCondition& bc, const ConstitutiveLaw& law, NetMode mode) const;

  /// PANIS: y = mu + B L eps1 + sigma eps2. mPANIS: y = A Y(max(X + L eps1 +
  /// sigma eps2, floor)) + complement (mask .* y'_k); atom < 0 means no fluctuation.
  PosteriorSample samplePosterior(const Eigen::VectorXd& psi, const MeanBatch& mean, int item,
                                  const BoundaryCondition& bc, const ConstitutiveLaw& law, const Eigen::VectorXd& eps1,
                                  const Eigen::VectorXd& eps2, int atom) const;

  /// Closed-form mean and +/- 2 sd bands on the tensor grid s x s.
  PredictionBands predict(const Eigen::VectorXd& psi, const BatchNormBuffers& buffers, const Eigen::MatrixXd& c,
                          const BoundaryCondition& bc, const ConstitutiveLaw& law, const Eigen::VectorXd& s) const;
  /// Closed-form variance field of the trial expansion of y for a mean.
  Eigen::MatrixXd varianceField(const Eigen::VectorXd& psi, const Eigen::MatrixXd& evalBasis) const;

  /// Orthonormal complement of col(A), rotated so that the first
  /// boundaryActiveCount() columns carry all boundary trace.
  const Eigen::MatrixXd& complement() const noexcept { return complement_; }
  const Eigen::VectorXd& complementMask() const noexcept { return mask_; }
  int boundaryActiveCount() const noexcept { return boundaryActive_; }

  void registerAtoms(const std::vector<std::vector<double>>& xs);
  int atomIndex(const std::vector<double>& x) const;
  const std::vector<std::uint64_t>& atomHashes() const noexcept { return atomHashes_; }

  void save(ArrayBox& box, const Eigen::VectorXd& psi, const BatchNormBuffers& buffers) const;
  void load(const ArrayBox& box, Eigen::VectorXd& psi, BatchNormBuffers& buffers);

 private:
  Eigen::MatrixXd liftedFactor(const Eigen::VectorXd& psi) const;

  SurrogateContext ctx_;
  SurrogateOptions opt_;
  ParameterLayout layout_;
  Eigen::MatrixXd gramA_;  // A^T A
  Eigen::MatrixXd complement_;
  Eigen::VectorXd mask_;
  int boundaryActive_ = 0;
  std::vector<std::uint64_t> atomHashes_;
  std::unordered_map<std::uint64_t, int> atomLookup_;
};

}  // namespace panis
