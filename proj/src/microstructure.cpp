#include "panis/microstructure.hpp"

#include "panis/error.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace panis {

KleBasis KleBasis::build(const KernelSpec& kernel, int dx) {
  if (!(kernel.lengthScale > 0.0)) fail(ErrorKind::Domain, "kernel length scale must be positive");
  const int g = kernel.gridResolution;
  if (g < 2) fail(ErrorKind::Domain, "grid resolution must be at least 2");
  if (dx < 1 || static_cast<long long>(dx) > static_cast<long long>(g) * g) {
    fail(ErrorKind::Domain, "KLE truncation d_x=" + std::to_string(dx) + " must lie in [1, " +
                                std::to_string(static_cast<long long>(g) * g) + "]");
  }

  KleBasis basis;
  basis.lengthScale_ = kernel.lengthScale;
  basis.cellMeasure_ = 1.0 / g;
  basis.points_ = Eigen::VectorXd::LinSpaced(g, 0.0, 1.0);

  const double h = basis.cellMeasure_;
  const double l2 = kernel.lengthScale * kernel.lengthScale;
  Eigen::MatrixXd weighted(g, g);
  for (int i = 0; i < g; ++i)
    for (int j = 0; j < g; ++j) {
      const double d = basis.points_[i] - basis.points_[j];
      weighted(i, j) = h * std::exp(-d * d / l2);
    }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(weighted);
  if (solver.info() != Eigen::Success) {
    fail(ErrorKind::Numerical, "KLE eigensolver did not converge for a " + std::to_string(g) + "x" +
                                   std::to_string(g) + " kernel matrix");
  }
  // Eigen returns ascending order; flip to descending.
  basis.eigenvalues1d_ = solver.eigenvalues().reverse();
  basis.eigenvectors1d_ = solver.eigenvectors().rowwise().reverse() / std::sqrt(h);
  for (int a = 0; a < g; ++a) {
    // Fix the sign so that the largest-magnitude entry is positive.
    Eigen::Index arg = 0;
    basis.eigenvectors1d_.col(a).cwiseAbs().maxCoeff(&arg);
    if (basis.eigenvectors1d_(arg, a) < 0.0) basis.eigenvectors1d_.col(a) *= -1.0;
    basis.eigenvalues1d_[a] = std::max(basis.eigenvalues1d_[a], 0.0);
  }

  std::vector<std::pair<int, int>> all;
  all.reserve(static_cast<std::size_t>(g) * g);
  for (int a = 0; a < g; ++a)
    for (int b = 0; b < g; ++b) all.emplace_back(a, b);
  const auto& ev = basis.eigenvalues1d_;
  std::stable_sort(all.begin(), all.end(), [&](const auto& p, const auto& q) {
    return ev[p.first] * ev[p.second] > ev[q.first] * ev[q.second];
  });
  all.resize(static_cast<std::size_t>(dx));
  basis.modes_ = std::move(all);
  for (const auto& [a, b] : basis.modes_) basis.eigenvalues_.push_back(ev[a] * ev[b]);
  return basis;
}

Eigen::MatrixXd KleBasis::eigenfunction(int i) const {
  const auto [a, b] = modes_.at(static_cast<std::size_t>(i));
  return eigenvectors1d_.col(a) * eigenvectors1d_.col(b).transpose();
}

Eigen::MatrixXd KleBasis::eigenfunctionMatrix() const {
  const int g = gridResolution();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(g) * g, dimension());
  for (int i = 0; i < dimension(); ++i) {
    const Eigen::MatrixXd v = eigenfunction(i);
    for (int a = 0; a < g; ++a)
      for (int b = 0; b < g; ++b) out(static_cast<Eigen::Index>(a) * g + b, i) = v(a, b);
  }
  return out;
}

Eigen::MatrixXd KleBasis::modeCoefficients(std::span<const double> x) const {
  if (x.size() != modes_.size()) {
    fail(ErrorKind::Domain, "coefficient vector has length " + std::to_string(x.size()) + ", expected d_x=" +
                                std::to_string(modes_.size()));
  }
  const int g = gridResolution();
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(g, g);
  for (std::size_t i = 0; i < modes_.size(); ++i) {
    const auto [a, b] = modes_[i];
    z(a, b) += std::sqrt(eigenvalues_[i]) * x[i];
  }
  return z;
}

Eigen::MatrixXd KleBasis::gaussianField(std::span<const double> x) const {
  const Eigen::MatrixXd z = modeCoefficients(x);
  return eigenvectors1d_ * z * eigenvectors1d_.transpose();
}

Eigen::MatrixXd KleBasis::extend1d(const Eigen::VectorXd& t) const {
  // v_a(t) = (1 / mu_a) sum_j h k(t, t_j) v_a(t_j)
  const int g = gridResolution();
  const double l2 = lengthScale_ * lengthScale_;
  Eigen::MatrixXd k(t.size(), g);
  for (Eigen::Index i = 0; i < t.size(); ++i)
    for (int j = 0; j < g; ++j) {
      const double d = t[i] - points_[j];
      k(i, j) = cellMeasure_ * std::exp(-d * d / l2);
    }
  Eigen::MatrixXd out = k * eigenvectors1d_;
  for (int a = 0; a < g; ++a) {
    out.col(a) = eigenvalues1d_[a] > 0.0 ? Eigen::VectorXd(out.col(a) / eigenvalues1d_[a])
                                         : Eigen::VectorXd::Zero(t.size());
  }
  return out;
}

Eigen::MatrixXd KleBasis::gaussianFieldAt(std::span<const double> x, const Eigen::VectorXd& s1,
                                          const Eigen::VectorXd& s2) const {
  const Eigen::MatrixXd z = modeCoefficients(x);
  return extend1d(s1) * z * extend1d(s2).transpose();
}

double KleBasis::kernel(double s1, double s2, double t1, double t2) const {
  const double d1 = s1 - t1, d2 = s2 - t2;
  return std::exp(-(d1 * d1 + d2 * d2) / (lengthScale_ * lengthScale_));
}

double normalCdf(double t) { return 0.5 * std::erfc(-t / std::numbers::sqrt2); }

double thresholdForVf(double p, double floor) {
  if (!(p > 0.0 && p < 1.0)) fail(ErrorKind::Domain, "volume fraction must lie in (0, 1), got " + std::to_string(p));
  if (p < floor || p > 1.0 - floor) {
    fail(ErrorKind::Domain, "volume fraction " + std::to_string(p) + " is outside the configured floor " +
                                std::to_string(floor) + "; the threshold diverges");
  }
  // Acklam's rational approximation.
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01,  -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                 -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  constexpr double low = 0.02425;
  double x = 0.0;
  if (p < low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - low) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  // Halley refinement.
  const double e = normalCdf(x) - p;
  const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
  return x - u / (1.0 + 0.5 * x * u);
}

MicrostructureSpec MicrostructureSpec::make(std::shared_ptr<const KleBasis> kle, double volumeFraction,
                                            double contrastRatio) {
  if (!kle) fail(ErrorKind::Config, "microstructure needs a KLE basis");
  if (!(contrastRatio > 0.0)) fail(ErrorKind::Domain, "contrast ratio must be positive");
  MicrostructureSpec spec;
  spec.kle = std::move(kle);
  spec.volumeFraction = volumeFraction;
  spec.contrastRatio = contrastRatio;
  spec.threshold = thresholdForVf(volumeFraction);
  return spec;
}

FieldSample sampleField(const MicrostructureSpec& spec, std::vector<double> x) {
  FieldSample out;
  out.c = spec.kle->gaussianField(x).unaryExpr([&](double gv) { return spec.phaseValue(gv); });
  out.x = std::move(x);
  return out;
}

FieldSample sampleField(const MicrostructureSpec& spec, std::optional<std::vector<double>> x, Rng& rng) {
  if (!x) {
    std::vector<double> draw(static_cast<std::size_t>(spec.kle->dimension()));
    fillStandardNormal(rng, draw);
    x = std::move(draw);
  }
  return sampleField(spec, std::move(*x));
}

Eigen::MatrixXd permeabilityAt(const MicrostructureSpec& spec, std::span<const double> x,
                               const Eigen::VectorXd& s1, const Eigen::VectorXd& s2) {
  return spec.kle->gaussianFieldAt(x, s1, s2).unaryExpr([&](double gv) { return spec.phaseValue(gv); });
}

FieldSample constantField(int gridResolution, double value) {
  return FieldSample{{}, Eigen::MatrixXd::Constant(gridResolution, gridResolution, value)};
}

}  // namespace panis
