#include "doctest.h"
#include "support.hpp"

using namespace panis;

namespace {

struct Fixture {
  TriMesh mesh;
  TrialBasis trial;
  QuadratureGrid quad;
  ResidualEngine engine;
  ProjectionOperators ops;

  Fixture(int trialSide, int cells, int points)
      : mesh(TriMesh::structured(cells)),
        trial(RbfGrid::regular(trialSide)),
        quad(QuadratureGrid::trapezoidal(points)),
        engine(trial, WeightBank{RbfGrid::regular(5), true}, quad),
        ops(ProjectionOperators::build(trial, mesh, quad)) {}

  // E(y) = 1/2 integral of (u_CG - u_y)^2 by the shared quadrature.
  double misfit(const Eigen::VectorXd& y, const Eigen::VectorXd& Y) const {
    const Eigen::MatrixXd ucg = interpolateP1(mesh, Y, quad.nodes, quad.nodes);
    const Eigen::MatrixXd uy = engine.evalTrial(y).u;
    return 0.5 * (quad.weights().array() * (ucg - uy).array().square()).sum();
  }
};

void checkIdentities(const ProjectionOperators& ops) {
  const Eigen::MatrixXd& A = ops.A();
  const Eigen::MatrixXd& P = ops.Aperp();
  const Eigen::Index n = A.rows();
  CHECK(P.cols() == n - A.cols());
  CHECK((A.transpose() * P).cwiseAbs().maxCoeff() <= 1e-10);
  CHECK((P.transpose() * P - Eigen::MatrixXd::Identity(P.cols(), P.cols())).cwiseAbs().maxCoeff() <= 1e-10);
  const Eigen::MatrixXd proj = A * (A.transpose() * A).ldlt().solve(A.transpose());
  CHECK((proj + P * P.transpose() - Eigen::MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff() <= 1e-8);
}

}  // namespace

TEST_SUITE("projection") {
  TEST_CASE("published dimensions") {
    const Fixture panis(64, 16, 129);
    CHECK(panis.ops.A().rows() == 4096);
    CHECK(panis.ops.A().cols() == 289);
    CHECK(panis.ops.Aperp().cols() == 4096 - 289);
    const Fixture mpanis(64, 8, 129);
    CHECK(mpanis.ops.Aperp().rows() == 4096);
    CHECK(mpanis.ops.Aperp().cols() == 4015);
    CHECK((mpanis.ops.A().transpose() * mpanis.ops.Aperp()).cwiseAbs().maxCoeff() <= 1e-10);
  }

  TEST_CASE("gram matrix is symmetric positive definite and a A equals B") {
    const Fixture f(16, 8, 33);
    const Eigen::MatrixXd a = f.ops.gram();
    CHECK((a - a.transpose()).cwiseAbs().maxCoeff() == 0.0);
    CHECK(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(a).eigenvalues().minCoeff() > 0.0);
    CHECK(f.ops.tikhonovShift() == 0.0);
    CHECK((a * f.ops.A() - f.ops.B()).cwiseAbs().maxCoeff() <= 1e-8);
  }

  TEST_CASE("cross gram matches direct quadrature of the hat functions") {
    const Fixture f(8, 4, 33);
    const Eigen::MatrixXd e = f.trial.values(f.quad.nodes);
    const Eigen::MatrixXd w = f.quad.weights();
    for (int J : {0, 7, 12, 24}) {
      Eigen::VectorXd Y = Eigen::VectorXd::Unit(25, J);
      const Eigen::MatrixXd hat = interpolateP1(f.mesh, Y, f.quad.nodes, f.quad.nodes);
      for (int k : {0, 9, 27, 63}) {
        const int a = k / 8, b = k % 8;
        double acc = 0.0;
        for (int p = 0; p < 33; ++p)
          for (int q = 0; q < 33; ++q) acc += w(p, q) * e(p, a) * e(q, b) * hat(p, q);
        CHECK(std::abs(f.ops.B()(k, J) - acc) <= 1e-14);
      }
    }
  }

  TEST_CASE("complement identities") {
    checkIdentities(Fixture(16, 8, 33).ops);
    checkIdentities(Fixture(12, 4, 33).ops);
  }

  TEST_CASE("constant coarse field lifts to a near constant") {
    const Fixture f(64, 16, 129);
    const double kappa = 3.5;
    const Eigen::VectorXd y = f.ops.A() * Eigen::VectorXd::Constant(289, kappa);
    const Eigen::MatrixXd u = f.engine.evalTrial(y).u;
    double worst = 0.0;
    for (int p = 0; p < 129; ++p)
      for (int q = 0; q < 129; ++q) {
        const double s1 = f.quad.nodes[p], s2 = f.quad.nodes[q];
        if (s1 >= 0.1 && s1 <= 0.9 && s2 >= 0.1 && s2 <= 0.9) worst = std::max(worst, std::abs(u(p, q) - kappa));
      }
    CHECK(worst < 0.01 * kappa);
  }

  TEST_CASE("the lift minimizes the quadrature misfit") {
    const Fixture f(16, 8, 33);
    Rng rng = deriveRng(1, 0);
    const Eigen::VectorXd Y = standardNormalVector(rng, 81);
    const Eigen::VectorXd y = f.ops.A() * Y;
    CHECK((f.ops.gram() * y - f.ops.B() * Y).cwiseAbs().maxCoeff() <= 1e-10);
    const double e0 = f.misfit(y, Y);
    for (int k = 0; k < 20; ++k) {
      const Eigen::VectorXd d = 1e-3 * standardNormalVector(rng, 256);
      CHECK(f.misfit(y + d, Y) > e0);
    }
  }

  TEST_CASE("coarse projection round trips and annihilates the complement") {
    const Fixture f(16, 8, 33);
    Rng rng = deriveRng(2, 0);
    for (int k = 0; k < 100; ++k) {
      const Eigen::VectorXd Y = standardNormalVector(rng, 81);
      CHECK((f.ops.coarseProject(f.ops.A() * Y) - Y).cwiseAbs().maxCoeff() <= 1e-10);
    }
    const Eigen::VectorXd z = f.ops.Aperp() * standardNormalVector(rng, f.ops.Aperp().cols());
    CHECK(f.ops.coarseProject(z).cwiseAbs().maxCoeff() <= 1e-10);
    const Eigen::VectorXd y = standardNormalVector(rng, 256);
    const Eigen::VectorXd r = y - f.ops.A() * f.ops.coarseProject(y);
    CHECK((f.ops.A().transpose() * r).cwiseAbs().maxCoeff() <= 1e-8);
  }

  TEST_CASE("trial fit recovers a field in the span") {
    const Fixture f(16, 8, 33);
    Rng rng = deriveRng(3, 0);
    const Eigen::VectorXd y = standardNormalVector(rng, 256);
    const Eigen::VectorXd back = f.ops.fitTrial(f.engine.evalTrial(y).u, f.engine);
    CHECK((back - y).cwiseAbs().maxCoeff() <= 1e-6 * y.cwiseAbs().maxCoeff());
  }

  TEST_CASE("stored operators reproduce the built ones") {
    const Fixture f(16, 8, 33);
    ProjectionOperators stored = ProjectionOperators::fromStored(f.ops.A(), f.ops.Aperp());
    Rng rng = deriveRng(4, 0);
    const Eigen::VectorXd y = standardNormalVector(rng, 256);
    CHECK((stored.coarseProject(y) - f.ops.coarseProject(y)).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK_THROWS_AS(stored.fitTrial(Eigen::MatrixXd::Ones(33, 33), f.engine), panis::Error);
    stored.attachGram(f.trial, f.quad);
    const Eigen::MatrixXd field = Eigen::MatrixXd::Random(33, 33);
    CHECK((stored.fitTrial(field, f.engine) - f.ops.fitTrial(field, f.engine)).cwiseAbs().maxCoeff() <= 1e-12);
  }

  TEST_CASE("failure modes") {
    const TriMesh mesh = TriMesh::structured(8);
    const QuadratureGrid quad = QuadratureGrid::trapezoidal(33);
    try {
      ProjectionOperators::build(RbfGrid::regular(4), mesh, quad);
      CHECK(false);
    } catch (const panis::Error& e) {
      CHECK((e.kind() == ErrorKind::Numerical));
      CHECK(std::string(e.what()).find("rank") != std::string::npos);
    }
    CHECK_THROWS_AS(ProjectionOperators::build(RbfGrid::regular(16), mesh, QuadratureGrid::trapezoidal(9)), panis::Error);
    ProjectionOptions strict;
    strict.conditionLimit = 1.0;
    strict.allowTikhonov = false;
    CHECK_THROWS_AS(ProjectionOperators::build(RbfGrid::regular(16), mesh, quad, strict), panis::Error);
    ProjectionOptions floored;
    floored.conditionLimit = 1.0;
    const ProjectionOperators ops = ProjectionOperators::build(RbfGrid::regular(16), mesh, quad, floored);
    CHECK(ops.tikhonovShift() > 0.0);
  }
}
