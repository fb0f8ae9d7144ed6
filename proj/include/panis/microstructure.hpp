#pragma once

#include "panis/random.hpp"

#include <Eigen/Dense>

#include <memory>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace panis {

/// Squared-exponential covariance k(s, s') = exp(-|s - s'|^2 / l^2) sampled on
/// a uniform grid of `gridResolution` points per side of [0,1]^2.
struct KernelSpec {
  double lengthScale = 0.25;
  int gridResolution = 129;
};

/// Truncated discrete Karhunen-Loeve basis of the kernel on the pixel grid.
///
/// Built by the Nystrom method with uniform cell measure h = 1/gridResolution
/// per point. The kernel factorizes over the two coordinates, so the 2D
/// eigenpairs are products of 1D eigenpairs; the top `dx` products are kept.
/// Eigenfunctions are normalized so that sum_p h^2 v_i(p) v_j(p) = delta_ij.
class KleBasis {
 public:
  static KleBasis build(const KernelSpec& kernel, int dx);

  int dimension() const noexcept { return static_cast<int>(modes_.size()); }
  int gridResolution() const noexcept { return static_cast<int>(points_.size()); }
  double lengthScale() const noexcept { return lengthScale_; }
  const Eigen::VectorXd& gridPoints() const noexcept { return points_; }

  /// 2D eigenvalues, descending.
  const std::vector<double>& eigenvalues() const noexcept { return eigenvalues_; }

  /// Eigenfunction i sampled on the grid, entry (a, b) at (s1_a, s2_b).
  Eigen::MatrixXd eigenfunction(int i) const;

  /// All eigenfunctions as columns of a (G*G x dx) matrix, row index a*G + b.
  Eigen::MatrixXd eigenfunctionMatrix() const;

  /// Gaussian field G(s; x) = sum_i sqrt(lambda_i) x_i v_i(s) on the grid.
  Eigen::MatrixXd gaussianField(std::span<const double> x) const;

  /// Same field at an arbitrary tensor grid s1 x s2, via Nystrom extension of
  /// the 1D eigenfunctions.
  Eigen::MatrixXd gaussianFieldAt(std::span<const double> x, const Eigen::VectorXd& s1,
                                  const Eigen::VectorXd& s2) const;

  /// Direct kernel evaluation, used as an oracle.
  double kernel(double s1, double s2, double t1, double t2) const;

 private:
  Eigen::MatrixXd modeCoefficients(std::span<const double> x) const;
  Eigen::MatrixXd extend1d(const Eigen::VectorXd& t) const;

  double lengthScale_ = 0.0;
  double cellMeasure_ = 0.0;
  Eigen::VectorXd points_;
  Eigen::VectorXd eigenvalues1d_;
  Eigen::MatrixXd eigenvectors1d_;  // G x G, columns normalized with weight h
  std::vector<std::pair<int, int>> modes_;
  std::vector<double> eigenvalues_;
};

/// Standard normal CDF.
double normalCdf(double t);

/// Standard normal quantile Phi^{-1}(p). Rational approximation refined by
/// one Halley step. Throws a domain error unless floor <= p <= 1 - floor.
double thresholdForVf(double volumeFraction, double floor = 1e-12);

/// Parametric binary medium: c = 1 in phase 1, 1/CR in phase 2.
struct MicrostructureSpec {
  std::shared_ptr<const KleBasis> kle;
  double volumeFraction = 0.5;
  double contrastRatio = 10.0;
  double threshold = 0.0;

  static MicrostructureSpec make(std::shared_ptr<const KleBasis> kle, double volumeFraction,
                                 double contrastRatio);

  /// Binary map applied pointwise to a Gaussian field. Phase 1 is G <= t, so
  /// the phase-1 area fraction is VF; ties go to phase 1.
  double phaseValue(double gaussian) const noexcept {
    return gaussian <= threshold ? 1.0 : 1.0 / contrastRatio;
  }
};

/// One draw of the input: coefficients x and the binary field c on the grid.
struct FieldSample {
  std::vector<double> x;
  Eigen::MatrixXd c;
};

/// Draws x ~ N(0, I) when x is not supplied.
FieldSample sampleField(const MicrostructureSpec& spec, std::optional<std::vector<double>> x, Rng& rng);
FieldSample sampleField(const MicrostructureSpec& spec, std::vector<double> x);

/// Binary permeability of the input x at an arbitrary tensor grid.
Eigen::MatrixXd permeabilityAt(const MicrostructureSpec& spec, std::span<const double> x,
                               const Eigen::VectorXd& s1, const Eigen::VectorXd& s2);

/// Uniform field of value one on a grid; used where c is not random.
FieldSample constantField(int gridResolution, double value = 1.0);

}  // namespace panis
