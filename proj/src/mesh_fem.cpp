#include "panis/mesh_fem.hpp"

#include "panis/error.hpp"

#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <string>

namespace panis {

namespace {

using Triplets = std::vector<Eigen::Triplet<double>>;

Eigen::Vector3d localValues(const TriMesh& mesh, int e, const Eigen::VectorXd& v) {
  const auto& t = mesh.elements[static_cast<std::size_t>(e)];
  return {v[t[0]], v[t[1]], v[t[2]]};
}

double elementFactor(const ConstitutiveLaw& law, const Eigen::Vector3d& ye) {
  if (law.alpha == 0.0) return 1.0;
  return std::exp(law.alpha * (ye.mean() - law.uBar));
}

// Residual R(Y) = sum_e X_e E_e K0_e Y_e - F and, optionally, its Jacobian,
// both restricted to interior rows and columns.
void residualAndJacobian(const CoarseModel& model, const ConstitutiveLaw& law, const Eigen::VectorXd& Y,
                         Eigen::VectorXd& residual, Eigen::SparseMatrix<double>* jacobian) {
  const TriMesh& mesh = *model.mesh;
  const int ni = static_cast<int>(mesh.interiorNodes.size());
  residual.setZero(ni);
  Triplets trip;
  if (jacobian) trip.reserve(static_cast<std::size_t>(mesh.elementCount()) * 9);
  const double f = model.sourceValue;
  for (int e = 0; e < mesh.elementCount(); ++e) {
    const auto& t = mesh.elements[static_cast<std::size_t>(e)];
    const Eigen::Matrix3d& k0 = mesh.unitStiffness[static_cast<std::size_t>(e)];
    const Eigen::Vector3d ye = localValues(mesh, e, Y);
    const double xe = model.elementPermeability[e];
    const double ee = elementFactor(law, ye);
    const Eigen::Vector3d ky = k0 * ye;
    const Eigen::Vector3d re = xe * ee * ky;
    const double load = f * mesh.areas[static_cast<std::size_t>(e)] / 3.0;
    Eigen::Matrix3d je = xe * ee * k0;
    if (law.alpha != 0.0) je += (xe * ee * law.alpha / 3.0) * ky * Eigen::RowVector3d::Ones();
    for (int a = 0; a < 3; ++a) {
      const int ra = mesh.reducedIndex[static_cast<std::size_t>(t[a])];
      if (ra < 0) continue;
      residual[ra] += re[a] - load;
      if (!jacobian) continue;
      for (int b = 0; b < 3; ++b) {
        const int rb = mesh.reducedIndex[static_cast<std::size_t>(t[b])];
        if (rb >= 0) trip.emplace_back(ra, rb, je(a, b));
      }
    }
  }
  if (jacobian) {
    jacobian->resize(ni, ni);
    jacobian->setFromTriplets(trip.begin(), trip.end());
  }
}

Eigen::VectorXd liftedStart(const CoarseModel& model, const Eigen::VectorXd* guess) {
  const TriMesh& mesh = *model.mesh;
  Eigen::VectorXd Y = guess ? *guess : Eigen::VectorXd::Zero(mesh.nodeCount());
  if (Y.size() != mesh.nodeCount()) fail(ErrorKind::Contract, "initial guess has the wrong length");
  for (int b : mesh.boundaryNodes) Y[b] = model.dirichletValues[b];
  return Y;
}

void scatterInterior(const TriMesh& mesh, const Eigen::VectorXd& reduced, Eigen::VectorXd& full, double scale) {
  for (std::size_t k = 0; k < mesh.interiorNodes.size(); ++k)
    full[mesh.interiorNodes[k]] += scale * reduced[static_cast<Eigen::Index>(k)];
}

Eigen::VectorXd symmetricSolve(const Eigen::SparseMatrix<double>& k, const Eigen::VectorXd& rhs) {
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(k);
  if (ldlt.info() != Eigen::Success) fail(ErrorKind::Numerical, "sparse LDLT factorization failed");
  const Eigen::VectorXd& d = ldlt.vectorD();
  const double scale = d.cwiseAbs().maxCoeff();
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    if (!(std::abs(d[i]) > 1e-14 * scale)) {
      fail(ErrorKind::Numerical, "singular operator: zero pivot at position " + std::to_string(i) +
                                     " of the permuted interior system (original unknown " +
                                     std::to_string(ldlt.permutationPinv().indices()[i]) + ")");
    }
  }
  return ldlt.solve(rhs);
}

}  // namespace

Eigen::Matrix3d elementStiffness(const Eigen::Vector2d& p0, const Eigen::Vector2d& p1, const Eigen::Vector2d& p2,
                                 double areaTolerance) {
  const Eigen::Vector2d e1 = p1 - p0, e2 = p2 - p0;
  const double twiceArea = e1.x() * e2.y() - e1.y() * e2.x();
  if (!(0.5 * twiceArea > areaTolerance)) {
    fail(ErrorKind::Mesh, "degenerate element with signed area " + std::to_string(0.5 * twiceArea));
  }
  // Rows of g are the constant gradients of the three hat functions.
  Eigen::Matrix<double, 3, 2> g;
  g << p1.y() - p2.y(), p2.x() - p1.x(),
       p2.y() - p0.y(), p0.x() - p2.x(),
       p0.y() - p1.y(), p1.x() - p0.x();
  g /= twiceArea;
  return 0.5 * twiceArea * g * g.transpose();
}

TriMesh TriMesh::structured(int n) {
  if (n < 1) fail(ErrorKind::Mesh, "mesh needs at least one cell per side");
  TriMesh mesh;
  mesh.cellsPerSide = n;
  const int side = n + 1;
  mesh.nodes.resize(static_cast<std::size_t>(side) * side);
  mesh.reducedIndex.assign(mesh.nodes.size(), -1);
  for (int i = 0; i < side; ++i)
    for (int j = 0; j < side; ++j) {
      const int k = mesh.nodeIndex(i, j);
      mesh.nodes[static_cast<std::size_t>(k)] = {static_cast<double>(i) / n, static_cast<double>(j) / n};
      if (i == 0 || j == 0 || i == n || j == n) {
        mesh.boundaryNodes.push_back(k);
      } else {
        mesh.reducedIndex[static_cast<std::size_t>(k)] = static_cast<int>(mesh.interiorNodes.size());
        mesh.interiorNodes.push_back(k);
      }
    }
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const int p00 = mesh.nodeIndex(i, j), p10 = mesh.nodeIndex(i + 1, j);
      const int p11 = mesh.nodeIndex(i + 1, j + 1), p01 = mesh.nodeIndex(i, j + 1);
      mesh.elements.push_back({p00, p10, p11});
      mesh.elements.push_back({p00, p11, p01});
    }
  for (const auto& t : mesh.elements) {
    const auto& a = mesh.nodes[static_cast<std::size_t>(t[0])];
    const auto& b = mesh.nodes[static_cast<std::size_t>(t[1])];
    const auto& c = mesh.nodes[static_cast<std::size_t>(t[2])];
    mesh.unitStiffness.push_back(elementStiffness(a, b, c));
    mesh.areas.push_back(0.5 * ((b - a).x() * (c - a).y() - (b - a).y() * (c - a).x()));
  }
  return mesh;
}

Eigen::Vector2d TriMesh::centroid(int e) const {
  const auto& t = elements[static_cast<std::size_t>(e)];
  return (nodes[static_cast<std::size_t>(t[0])] + nodes[static_cast<std::size_t>(t[1])] +
          nodes[static_cast<std::size_t>(t[2])]) / 3.0;
}

CoarseModel CoarseModel::fromNodal(std::shared_ptr<const TriMesh> mesh, const Eigen::VectorXd& nodalX,
                                   Eigen::VectorXd dirichlet, double f) {
  if (!mesh) fail(ErrorKind::Contract, "coarse model needs a mesh");
  if (nodalX.size() != mesh->nodeCount()) {
    fail(ErrorKind::Contract, "nodal X has length " + std::to_string(nodalX.size()) + ", mesh has " +
                                  std::to_string(mesh->nodeCount()) + " nodes");
  }
  for (Eigen::Index i = 0; i < nodalX.size(); ++i)
    if (!(nodalX[i] > 0.0) || !std::isfinite(nodalX[i])) {
      fail(ErrorKind::Numerical, "nodal permeability at node " + std::to_string(i) + " is not positive and finite");
    }
  Eigen::VectorXd ex(mesh->elementCount());
  for (int e = 0; e < mesh->elementCount(); ++e) ex[e] = localValues(*mesh, e, nodalX).mean();
  CoarseModel model = fromElements(std::move(mesh), std::move(ex), std::move(dirichlet), f);
  model.input = PermeabilityInput::Nodal;
  return model;
}

CoarseModel CoarseModel::fromElements(std::shared_ptr<const TriMesh> mesh, Eigen::VectorXd elementX,
                                      Eigen::VectorXd dirichlet, double f) {
  if (!mesh) fail(ErrorKind::Contract, "coarse model needs a mesh");
  CoarseModel model;
  model.mesh = std::move(mesh);
  model.input = PermeabilityInput::PerElement;
  model.elementPermeability = std::move(elementX);
  model.dirichletValues = std::move(dirichlet);
  model.sourceValue = f;
  model.validate();
  return model;
}

void CoarseModel::validate() const {
  if (elementPermeability.size() != mesh->elementCount()) {
    fail(ErrorKind::Contract, "element permeability has length " + std::to_string(elementPermeability.size()) +
                                  ", mesh has " + std::to_string(mesh->elementCount()) + " elements");
  }
  if (dirichletValues.size() != mesh->nodeCount()) fail(ErrorKind::Contract, "Dirichlet vector has the wrong length");
  for (Eigen::Index e = 0; e < elementPermeability.size(); ++e) {
    if (!(elementPermeability[e] > 0.0)) {
      fail(ErrorKind::Domain, "non-positive permeability " + std::to_string(elementPermeability[e]) +
                                  " on element " + std::to_string(e));
    }
  }
}

BoundaryCondition BoundaryCondition::parse(const std::string& text) {
  if (text == "sinusoidal") return sinusoidal();
  const std::string prefix = "constant:";
  if (text.rfind(prefix, 0) == 0) {
    try {
      std::size_t used = 0;
      const double v = std::stod(text.substr(prefix.size()), &used);
      if (used == text.size() - prefix.size()) return constant(v);
    } catch (const std::exception&) {
    }
  }
  fail(ErrorKind::Config, "unknown boundary condition '" + text + "' (expected constant:<value> or sinusoidal)");
}

std::string BoundaryCondition::name() const {
  if (kind == Kind::Sinusoidal) return "sinusoidal";
  std::ostringstream os;
  os << "constant:" << value;
  return os.str();
}

double BoundaryCondition::operator()(double s1, double s2) const {
  if (kind == Kind::Constant) return value;
  const double h = std::numbers::pi / 2.0;
  constexpr double eps = 1e-12;
  if (s1 <= eps) return 10.0 + 5.0 * std::sin(h * s2);
  if (s2 >= 1.0 - eps) return 10.0 + 5.0 * std::sin(h * (s1 + 1.0));
  if (s1 >= 1.0 - eps) return 10.0 - 5.0 * std::sin(h * (s2 + 1.0));
  if (s2 <= eps) return 10.0 - 5.0 * std::sin(h * s1);
  fail(ErrorKind::Contract, "boundary condition evaluated at an interior point");
}

Eigen::VectorXd dirichletFromFunction(const TriMesh& mesh, const std::function<double(double, double)>& g) {
  Eigen::VectorXd u0 = Eigen::VectorXd::Zero(mesh.nodeCount());
  for (int b : mesh.boundaryNodes) {
    const auto& p = mesh.nodes[static_cast<std::size_t>(b)];
    u0[b] = g(p.x(), p.y());
  }
  return u0;
}

AssembledSystem assemble(const CoarseModel& model, const ConstitutiveLaw& law, const Eigen::VectorXd* Y) {
  model.validate();
  if (law.alpha != 0.0 && !Y) fail(ErrorKind::Contract, "a nonlinear law needs the state Y to assemble");
  const TriMesh& mesh = *model.mesh;
  const int nn = mesh.nodeCount();
  Triplets trip;
  trip.reserve(static_cast<std::size_t>(mesh.elementCount()) * 9);
  AssembledSystem sys;
  sys.loadFull = Eigen::VectorXd::Zero(nn);
  for (int e = 0; e < mesh.elementCount(); ++e) {
    const auto& t = mesh.elements[static_cast<std::size_t>(e)];
    const double ee = law.alpha == 0.0 ? 1.0 : elementFactor(law, localValues(mesh, e, *Y));
    const Eigen::Matrix3d ke = model.elementPermeability[e] * ee * mesh.unitStiffness[static_cast<std::size_t>(e)];
    for (int a = 0; a < 3; ++a) {
      sys.loadFull[t[a]] += model.sourceValue * mesh.areas[static_cast<std::size_t>(e)] / 3.0;
      for (int b = 0; b < 3; ++b) trip.emplace_back(t[a], t[b], ke(a, b));
    }
  }
  sys.operatorFull.resize(nn, nn);
  sys.operatorFull.setFromTriplets(trip.begin(), trip.end());

  const int ni = static_cast<int>(mesh.interiorNodes.size());
  Eigen::VectorXd u0b = Eigen::VectorXd::Zero(nn);
  for (int b : mesh.boundaryNodes) u0b[b] = model.dirichletValues[b];
  const Eigen::VectorXd lift = sys.operatorFull * u0b;
  Triplets red;
  for (int col = 0; col < sys.operatorFull.outerSize(); ++col) {
    const int rc = mesh.reducedIndex[static_cast<std::size_t>(col)];
    if (rc < 0) continue;
    for (Eigen::SparseMatrix<double>::InnerIterator it(sys.operatorFull, col); it; ++it) {
      const int rr = mesh.reducedIndex[static_cast<std::size_t>(it.row())];
      if (rr >= 0) red.emplace_back(rr, rc, it.value());
    }
  }
  sys.operatorReduced.resize(ni, ni);
  sys.operatorReduced.setFromTriplets(red.begin(), red.end());
  sys.loadReduced.resize(ni);
  for (int k = 0; k < ni; ++k) {
    const int node = mesh.interiorNodes[static_cast<std::size_t>(k)];
    sys.loadReduced[k] = sys.loadFull[node] - lift[node];
  }
  return sys;
}

CoarseSolution solveLinear(const CoarseModel& model) {
  const AssembledSystem sys = assemble(model, ConstitutiveLaw{});
  const Eigen::VectorXd yi = symmetricSolve(sys.operatorReduced, sys.loadReduced);
  CoarseSolution sol;
  sol.Y = liftedStart(model, nullptr);
  scatterInterior(*model.mesh, yi, sol.Y, 1.0);
  sol.iterations = 1;
  sol.residualNorm = (sys.operatorReduced * yi - sys.loadReduced).norm();
  const double scale = std::max(sys.loadReduced.norm(), 1e-300);
  if (sol.residualNorm > 1e-10 * scale && sol.residualNorm > 1e-12) {
    fail(ErrorKind::Numerical, "linear solve residual " + std::to_string(sol.residualNorm) + " exceeds tolerance");
  }
  return sol;
}

Eigen::VectorXd nonlinearResidual(const CoarseModel& model, const ConstitutiveLaw& law, const Eigen::VectorXd& Y) {
  Eigen::VectorXd r;
  residualAndJacobian(model, law, Y, r, nullptr);
  return r;
}

CoarseSolution solveNewton(const CoarseModel& model, const ConstitutiveLaw& law, const NewtonOptions& options,
                           const Eigen::VectorXd* initialGuess) {
  model.validate();
  if (!(options.tol > 0.0)) fail(ErrorKind::Config, "Newton tolerance must be positive");
  const TriMesh& mesh = *model.mesh;
  CoarseSolution sol;
  sol.Y = liftedStart(model, initialGuess);
  Eigen::VectorXd r;
  Eigen::SparseMatrix<double> jac;
  residualAndJacobian(model, law, sol.Y, r, &jac);
  double norm = r.norm();
  while (norm > options.tol) {
    if (sol.iterations >= options.maxIter) {
      throw NonConvergenceError("Newton did not converge in " + std::to_string(options.maxIter) +
                                    " iterations; last residual norm " + std::to_string(norm),
                                norm);
    }
    Eigen::VectorXd step;
    if (law.alpha == 0.0) {
      step = symmetricSolve(jac, r);
    } else {
      Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
      lu.compute(jac);
      if (lu.info() != Eigen::Success) fail(ErrorKind::Numerical, "Newton Jacobian is singular: " + lu.lastErrorMessage());
      step = lu.solve(r);
    }
    double scale = 1.0;
    Eigen::VectorXd trial = sol.Y;
    Eigen::VectorXd rTrial;
    for (int halving = 0; halving < 30; ++halving) {
      trial = sol.Y;
      scatterInterior(mesh, step, trial, -scale);
      residualAndJacobian(model, law, trial, rTrial, nullptr);
      if (rTrial.norm() <= norm) break;
      scale *= 0.5;
    }
    sol.Y = trial;
    ++sol.iterations;
    residualAndJacobian(model, law, sol.Y, r, &jac);
    const double next = r.norm();
    if (next >= norm && scale < 1e-8) {
      throw NonConvergenceError("Newton line search stalled; residual norm " + std::to_string(next), next);
    }
    norm = next;
  }
  sol.residualNorm = norm;
  return sol;
}

CoarseSolution solve(const CoarseModel& model, const ConstitutiveLaw& law, const NewtonOptions& options,
                     const Eigen::VectorXd* initialGuess) {
  if (law.alpha == 0.0) return solveLinear(model);
  return solveNewton(model, law, options, initialGuess);
}

Eigen::VectorXd elementToNodalGradient(const TriMesh& mesh, const Eigen::VectorXd& g) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(mesh.nodeCount());
  for (int e = 0; e < mesh.elementCount(); ++e)
    for (int v : mesh.elements[static_cast<std::size_t>(e)]) out[v] += g[e] / 3.0;
  return out;
}

Eigen::VectorXd adjointGradient(const CoarseModel& model, const ConstitutiveLaw& law, const CoarseSolution& solution,
                                const Eigen::VectorXd& dLossdY) {
  const TriMesh& mesh = *model.mesh;
  if (dLossdY.size() != mesh.nodeCount()) fail(ErrorKind::Contract, "dLoss/dY has the wrong length");
  const int ni = static_cast<int>(mesh.interiorNodes.size());
  Eigen::VectorXd gi(ni);
  for (int k = 0; k < ni; ++k) gi[k] = dLossdY[mesh.interiorNodes[static_cast<std::size_t>(k)]];

  Eigen::VectorXd ge = Eigen::VectorXd::Zero(mesh.elementCount());
  if (gi.cwiseAbs().maxCoeff() > 0.0) {
    Eigen::VectorXd r;
    Eigen::SparseMatrix<double> jac;
    residualAndJacobian(model, law, solution.Y, r, &jac);
    Eigen::VectorXd lambda;
    if (law.alpha == 0.0) {
      lambda = symmetricSolve(jac, gi);
    } else {
      Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
      lu.compute(jac);
      if (lu.info() != Eigen::Success) fail(ErrorKind::Numerical, "adjoint Jacobian is singular: " + lu.lastErrorMessage());
      lambda = lu.transpose().solve(gi);
    }
    for (int e = 0; e < mesh.elementCount(); ++e) {
      const auto& t = mesh.elements[static_cast<std::size_t>(e)];
      const Eigen::Vector3d ye = localValues(mesh, e, solution.Y);
      const Eigen::Vector3d dr = elementFactor(law, ye) * (mesh.unitStiffness[static_cast<std::size_t>(e)] * ye);
      double acc = 0.0;
      for (int a = 0; a < 3; ++a) {
        const int ra = mesh.reducedIndex[static_cast<std::size_t>(t[a])];
        if (ra >= 0) acc += lambda[ra] * dr[a];
      }
      ge[e] = -acc;
    }
  }
  return model.input == PermeabilityInput::Nodal ? elementToNodalGradient(mesh, ge) : ge;
}

P1Location locateP1(const TriMesh& mesh, double s1, double s2) {
  const int n = mesh.cellsPerSide;
  const double u = std::clamp(s1, 0.0, 1.0) * n, v = std::clamp(s2, 0.0, 1.0) * n;
  const int i = std::min(static_cast<int>(u), n - 1), j = std::min(static_cast<int>(v), n - 1);
  const double xi = u - i, zeta = v - j;
  P1Location loc;
  const int base = 2 * (i * n + j);
  if (xi >= zeta) {
    loc.element = base;
    loc.weights = {1.0 - xi, xi - zeta, zeta};
  } else {
    loc.element = base + 1;
    loc.weights = {1.0 - zeta, xi, zeta - xi};
  }
  loc.nodes = mesh.elements[static_cast<std::size_t>(loc.element)];
  return loc;
}

Eigen::MatrixXd interpolateP1(const TriMesh& mesh, const Eigen::VectorXd& Y, const Eigen::VectorXd& s1,
                              const Eigen::VectorXd& s2) {
  if (Y.size() != mesh.nodeCount()) fail(ErrorKind::Contract, "nodal vector has the wrong length");
  Eigen::MatrixXd out(s1.size(), s2.size());
  for (Eigen::Index p = 0; p < s1.size(); ++p)
    for (Eigen::Index q = 0; q < s2.size(); ++q) {
      const P1Location loc = locateP1(mesh, s1[p], s2[q]);
      out(p, q) = loc.weights[0] * Y[loc.nodes[0]] + loc.weights[1] * Y[loc.nodes[1]] + loc.weights[2] * Y[loc.nodes[2]];
    }
  return out;
}

}  // namespace panis
