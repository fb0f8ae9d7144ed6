#include "panis/residual.hpp"

#include "panis/error.hpp"

#include <cmath>
#include <string>

namespace panis {

RbfGrid RbfGrid::regular(int side) {
  if (side < 2) fail(ErrorKind::Config, "an RBF grid needs at least 2 centers per side");
  RbfGrid g;
  g.side = side;
  g.scale = 1.0 / (side - 1);
  g.centers = Eigen::VectorXd::LinSpaced(side, 0.0, 1.0);
  return g;
}

Eigen::MatrixXd RbfGrid::values(const Eigen::VectorXd& t) const {
  Eigen::MatrixXd out(t.size(), side);
  const double inv = 1.0 / (scale * scale);
  for (Eigen::Index p = 0; p < t.size(); ++p)
    for (int a = 0; a < side; ++a) {
      const double d = t[p] - centers[a];
      out(p, a) = std::exp(-d * d * inv);
    }
  return out;
}

Eigen::MatrixXd RbfGrid::derivatives(const Eigen::VectorXd& t) const {
  Eigen::MatrixXd out = values(t);
  const double inv = 1.0 / (scale * scale);
  for (Eigen::Index p = 0; p < t.size(); ++p)
    for (int a = 0; a < side; ++a) out(p, a) *= -2.0 * (t[p] - centers[a]) * inv;
  return out;
}

QuadratureGrid QuadratureGrid::trapezoidal(int points) {
  if (points < 2) fail(ErrorKind::Config, "quadrature needs at least 2 points per side");
  QuadratureGrid q;
  q.nodes = Eigen::VectorXd::LinSpaced(points, 0.0, 1.0);
  const double h = 1.0 / (points - 1);
  q.weights1d = Eigen::VectorXd::Constant(points, h);
  q.weights1d[0] = q.weights1d[points - 1] = 0.5 * h;
  return q;
}

ResidualEngine::ResidualEngine(TrialBasis trial, WeightBank weights, QuadratureGrid quadrature)
    : trial_(std::move(trial)), weights_(std::move(weights)), quad_(std::move(quadrature)) {
  const Eigen::VectorXd& t = quad_.nodes;
  e_ = trial_.values(t);
  de_ = trial_.derivatives(t);
  const Eigen::MatrixXd ev = weights_.rbf.values(t);
  const Eigen::MatrixXd dev = weights_.rbf.derivatives(t);
  if (weights_.boundaryFactor) {
    const Eigen::ArrayXd tau = t.array() * (1.0 - t.array());
    const Eigen::ArrayXd dtau = 1.0 - 2.0 * t.array();
    w_ = ev.array().colwise() * tau;
    dw_ = dev.array().colwise() * tau + ev.array().colwise() * dtau;
  } else {
    w_ = ev;
    dw_ = dev;
  }
  const int q = quad_.points();
  wBoundary0_ = w_.row(0).transpose();
  wBoundary1_ = w_.row(q - 1).transpose();
}

Eigen::MatrixXd toGrid(const Eigen::VectorXd& v, int side) {
  if (v.size() != static_cast<Eigen::Index>(side) * side) fail(ErrorKind::Contract, "vector does not match grid size");
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(v.data(), side, side);
}

Eigen::VectorXd fromGrid(const Eigen::MatrixXd& m) {
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> r = m;
  return Eigen::Map<const Eigen::VectorXd>(r.data(), r.size());
}

TrialField ResidualEngine::evalTrial(const Eigen::VectorXd& y) const {
  if (y.size() != trial_.count()) {
    fail(ErrorKind::Contract, "trial coefficients have length " + std::to_string(y.size()) + ", expected " +
                                  std::to_string(trial_.count()));
  }
  const Eigen::MatrixXd ym = toGrid(y, trial_.side);
  const Eigen::MatrixXd yet = ym * e_.transpose();
  TrialField f;
  f.u = e_ * yet;
  f.ux = de_ * yet;
  f.uy = e_ * (ym * de_.transpose());
  return f;
}

Eigen::MatrixXd ResidualEngine::trialAt(const Eigen::VectorXd& y, const Eigen::VectorXd& s1,
                                        const Eigen::VectorXd& s2) const {
  return trial_.values(s1) * toGrid(y, trial_.side) * trial_.values(s2).transpose();
}

Eigen::VectorXd ResidualEngine::weightIntegrals() const {
  const Eigen::VectorXd m = w_.transpose() * quad_.weights1d;
  return fromGrid(m * m.transpose());
}

void ResidualEngine::checkInputs(const Eigen::VectorXd& y, const Eigen::MatrixXd& c) const {
  if (y.size() != trial_.count()) {
    fail(ErrorKind::Contract, "trial coefficients have length " + std::to_string(y.size()) + ", expected " +
                                  std::to_string(trial_.count()));
  }
  if (c.rows() != quad_.points() || c.cols() != quad_.points()) {
    fail(ErrorKind::Config, "permeability field is " + std::to_string(c.rows()) + "x" + std::to_string(c.cols()) +
                                " but the quadrature grid is " + std::to_string(quad_.points()) + "x" +
                                std::to_string(quad_.points()));
  }
}

Eigen::MatrixXd ResidualEngine::coefficient(const TrialField& field, const Eigen::MatrixXd& c,
                                            const ConstitutiveLaw& law) const {
  if (law.alpha == 0.0) return c;
  return (c.array() * (law.alpha * (field.u.array() - law.uBar)).exp()).matrix();
}

Eigen::VectorXd ResidualEngine::residuals(const Eigen::VectorXd& y, const Eigen::MatrixXd& c,
                                          const ResidualProblem& problem) const {
  checkInputs(y, c);
  const TrialField field = evalTrial(y);
  const Eigen::ArrayXXd wk = quad_.weights().array() * coefficient(field, c, problem.law).array();
  const Eigen::MatrixXd q1 = (wk * field.ux.array()).matrix();
  const Eigen::MatrixXd q2 = (wk * field.uy.array()).matrix();
  Eigen::MatrixXd r = dw_.transpose() * q1 * w_ + w_.transpose() * q2 * dw_;
  Eigen::VectorXd out = fromGrid(r) - problem.source * weightIntegrals();
  if (problem.hasNeumann && problem.neumannFlux != 0.0) {
    // Sum of w_j over the four edges, each a 1D trapezoidal integral.
    const Eigen::VectorXd m = w_.transpose() * quad_.weights1d;
    const Eigen::VectorXd edge = wBoundary0_ + wBoundary1_;
    const Eigen::MatrixXd boundary = edge * m.transpose() + m * edge.transpose();
    out += problem.neumannFlux * fromGrid(boundary);
  }
  return out;
}

Eigen::VectorXd ResidualEngine::residualsVjp(const Eigen::VectorXd& y, const Eigen::MatrixXd& c,
                                             const ResidualProblem& problem, const Eigen::VectorXd& dLdr) const {
  checkInputs(y, c);
  if (dLdr.size() != weights_.count()) fail(ErrorKind::Contract, "residual cotangent has the wrong length");
  const TrialField field = evalTrial(y);
  const Eigen::MatrixXd g = toGrid(dLdr, weights_.rbf.side);
  const Eigen::ArrayXXd dq1 = (dw_ * g * w_.transpose()).array();
  const Eigen::ArrayXXd dq2 = (w_ * g * dw_.transpose()).array();
  const Eigen::ArrayXXd omega = quad_.weights().array();
  const Eigen::ArrayXXd k = coefficient(field, c, problem.law).array();
  const Eigen::MatrixXd dux = (omega * k * dq1).matrix();
  const Eigen::MatrixXd duy = (omega * k * dq2).matrix();
  Eigen::MatrixXd dy = de_.transpose() * dux * e_ + e_.transpose() * duy * de_;
  if (problem.law.alpha != 0.0) {
    const Eigen::MatrixXd du =
        (problem.law.alpha * omega * k * (field.ux.array() * dq1 + field.uy.array() * dq2)).matrix();
    dy += e_.transpose() * du * e_;
  }
  return fromGrid(dy);
}

ResidualValue ResidualEngine::evalResidual(int j, const Eigen::VectorXd& y, const Eigen::MatrixXd& c,
                                           const ResidualProblem& problem) const {
  if (j < 0 || j >= weights_.count()) fail(ErrorKind::Contract, "weight index out of range");
  ResidualValue out;
  out.value = residuals(y, c, problem)[j];
  Eigen::VectorXd onehot = Eigen::VectorXd::Zero(weights_.count());
  onehot[j] = 1.0;
  out.dRdy = residualsVjp(y, c, problem, onehot);
  return out;
}

std::vector<int> subsampleResiduals(int n, int m, Rng& rng) {
  if (m < 1) fail(ErrorKind::Domain, "at least one residual must be drawn");
  if (n < 1 || m > n) fail(ErrorKind::Domain, "residual subsample size M must satisfy 1 <= M <= N");
  std::uniform_int_distribution<int> pick(0, n - 1);
  std::vector<int> out(static_cast<std::size_t>(m));
  for (int& v : out) v = pick(rng);
  return out;
}

}  // namespace panis
