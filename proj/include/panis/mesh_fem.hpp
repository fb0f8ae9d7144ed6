#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <array>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace panis {

/// Structured triangulation of [0,1]^2: n x n squares, each split along the
/// (i,j)-(i+1,j+1) diagonal. Node (i, j) sits at (i/n, j/n), index i*(n+1)+j.
struct TriMesh {
  int cellsPerSide = 0;
  std::vector<Eigen::Vector2d> nodes;
  std::vector<std::array<int, 3>> elements;
  std::vector<int> boundaryNodes;
  std::vector<int> interiorNodes;
  std::vector<int> reducedIndex;  // node -> interior slot, -1 on the boundary
  std::vector<double> areas;
  std::vector<Eigen::Matrix3d> unitStiffness;

  static TriMesh structured(int cellsPerSide);

  int nodeCount() const noexcept { return static_cast<int>(nodes.size()); }
  int elementCount() const noexcept { return static_cast<int>(elements.size()); }
  int nodesPerSide() const noexcept { return cellsPerSide + 1; }
  int nodeIndex(int i, int j) const noexcept { return i * (cellsPerSide + 1) + j; }
  bool isBoundary(int node) const noexcept { return reducedIndex[static_cast<std::size_t>(node)] < 0; }
  Eigen::Vector2d centroid(int element) const;
};

/// P1 stiffness of one triangle with unit coefficient: area * G^T G.
/// Throws a mesh error for a degenerate or clockwise triangle.
Eigen::Matrix3d elementStiffness(const Eigen::Vector2d& p0, const Eigen::Vector2d& p1, const Eigen::Vector2d& p2,
                                 double areaTolerance = 1e-14);

/// Flux q = -c exp(alpha (u - uBar)) grad u. alpha = 0 is linear Darcy.
struct ConstitutiveLaw {
  double alpha = 0.0;
  double uBar = 0.0;
};

enum class PermeabilityInput { Nodal, PerElement };

struct CoarseModel {
  std::shared_ptr<const TriMesh> mesh;
  PermeabilityInput input = PermeabilityInput::Nodal;
  Eigen::VectorXd elementPermeability;
  Eigen::VectorXd dirichletValues;  // length nodeCount; only boundary entries are read
  double sourceValue = 0.0;

  /// Element values are the mean of the three vertex values of X.
  static CoarseModel fromNodal(std::shared_ptr<const TriMesh> mesh, const Eigen::VectorXd& nodalX,
                               Eigen::VectorXd dirichlet, double f);
  static CoarseModel fromElements(std::shared_ptr<const TriMesh> mesh, Eigen::VectorXd elementX,
                                  Eigen::VectorXd dirichlet, double f);
  void validate() const;
};

/// Dirichlet data on the unit square: a constant, or the piecewise
/// sinusoidal profile 10 +/- 5 sin(pi/2 ...) along the four edges.
struct BoundaryCondition {
  enum class Kind { Constant, Sinusoidal };
  Kind kind = Kind::Constant;
  double value = 0.0;

  static BoundaryCondition constant(double v) { return {Kind::Constant, v}; }
  static BoundaryCondition sinusoidal() { return {Kind::Sinusoidal, 10.0}; }
  /// "constant:<v>" or "sinusoidal".
  static BoundaryCondition parse(const std::string& text);
  std::string name() const;
  double operator()(double s1, double s2) const;
};

/// Boundary values g(s) on the boundary nodes, zero elsewhere.
Eigen::VectorXd dirichletFromFunction(const TriMesh& mesh, const std::function<double(double, double)>& g);

/// Reduced system on interior nodes after eliminating the Dirichlet data.
struct AssembledSystem {
  Eigen::SparseMatrix<double> operatorFull;  // nodeCount x nodeCount
  Eigen::VectorXd loadFull;
  Eigen::SparseMatrix<double> operatorReduced;  // interior x interior
  Eigen::VectorXd loadReduced;                  // F_I - K_IB u0_B
};

/// For alpha != 0 the coefficient is frozen at Y (secant operator).
AssembledSystem assemble(const CoarseModel& model, const ConstitutiveLaw& law, const Eigen::VectorXd* Y = nullptr);

struct CoarseSolution {
  Eigen::VectorXd Y;
  int iterations = 0;
  double residualNorm = 0.0;
};

CoarseSolution solveLinear(const CoarseModel& model);

struct NewtonOptions {
  double tol = 1e-10;
  int maxIter = 50;
};

CoarseSolution solveNewton(const CoarseModel& model, const ConstitutiveLaw& law, const NewtonOptions& options = {},
                           const Eigen::VectorXd* initialGuess = nullptr);

/// Solves with solveLinear for alpha = 0 and solveNewton otherwise.
CoarseSolution solve(const CoarseModel& model, const ConstitutiveLaw& law, const NewtonOptions& options = {},
                     const Eigen::VectorXd* initialGuess = nullptr);

/// Nonlinear residual on interior nodes at a full nodal vector Y.
Eigen::VectorXd nonlinearResidual(const CoarseModel& model, const ConstitutiveLaw& law, const Eigen::VectorXd& Y);

/// Gradient of a scalar loss through Y(X) by one adjoint solve. The result is
/// with respect to the model's input: nodal X or per-element X.
Eigen::VectorXd adjointGradient(const CoarseModel& model, const ConstitutiveLaw& law, const CoarseSolution& solution,
                                const Eigen::VectorXd& dLossdY);

/// Containing triangle of a point of the structured mesh, with barycentric weights.
struct P1Location {
  int element = 0;
  std::array<int, 3> nodes{};
  std::array<double, 3> weights{};
};
P1Location locateP1(const TriMesh& mesh, double s1, double s2);

/// Piecewise-linear field of nodal values Y at the tensor points s1 x s2.
Eigen::MatrixXd interpolateP1(const TriMesh& mesh, const Eigen::VectorXd& Y, const Eigen::VectorXd& s1,
                              const Eigen::VectorXd& s2);

/// Transpose of the nodal-to-element averaging map.
Eigen::VectorXd elementToNodalGradient(const TriMesh& mesh, const Eigen::VectorXd& elementGradient);

}  // namespace panis
