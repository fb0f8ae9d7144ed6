#include "doctest.h"
#include "support.hpp"

#include <limits>

using namespace panis;
using panis::test::relErr;

namespace {

Problem deskProblem(double source = 100.0) {
  RunConfig c = panis::test::deskConfig();
  c.source = source;
  return Problem::build(c);
}

Eigen::VectorXd randomPsi(const Surrogate& s, std::uint64_t seed, double lScale = 0.05) {
  Rng rng = deriveRng(seed, 0);
  Eigen::VectorXd psi = s.initialParameters(rng);
  const auto& lay = s.layout();
  psi.segment(lay.lOffset, lay.lRows * lay.lCols) = lScale * standardNormalVector(rng, lay.lRows * lay.lCols);
  psi[lay.logSigmaOffset] = std::log(0.03);
  return psi;
}

double denseHalfLogDet(const Eigen::MatrixXd& sigma) {
  const Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  REQUIRE(llt.info() == Eigen::Success);
  return llt.matrixLLT().diagonal().array().log().sum();
}

}  // namespace

TEST_SUITE("surrogate") {
  TEST_CASE("published parameter totals") {
    const Problem panis = Problem::build(RunConfig::fromPreset("full-panis"));
    const ParameterLayout& a = panis.surrogate->layout();
    CHECK(a.total == 7956);
    CHECK(a.netCount == 5065);
    CHECK(a.lRows * a.lCols == 289 * 10);
    CHECK(a.atomCount == 0);
    const Problem mpanis = Problem::build(RunConfig::fromPreset("full-mpanis"));
    const ParameterLayout& b = mpanis.surrogate->layout();
    CHECK(b.total == 415112);
    CHECK(b.netCount == 12801);
    CHECK(b.lRows * b.lCols == 81 * 10);
    CHECK(b.atomCount == 100);
    CHECK(b.atomDim == 4015);
    CHECK(b.lCols < mpanis.surrogate->coarseDimension());
  }

  TEST_CASE("fine space covariance switch changes the factor shape") {
    RunConfig c = panis::test::deskConfig();
    c.surrogate.covariance = CovarianceSpace::Fine;
    const Problem p = Problem::build(c);
    CHECK(p.surrogate->layout().lRows == 256);
  }

  TEST_CASE("constant boundary data without source gives a constant mean") {
    const Problem p = deskProblem(0.0);
    const Surrogate& s = *p.surrogate;
    const Eigen::VectorXd psi = randomPsi(s, 1);
    BatchNormBuffers buf = p.net->initBuffers();
    Rng rng = deriveRng(2, 0);
    const FieldSample f = sampleField(p.micro, std::nullopt, rng);
    const MeanBatch m = s.meanSolve(psi, buf, {f.c}, BoundaryCondition::constant(10.0), p.law(), NetMode::Eval);
    CHECK((m.solutions[0].Y.array() - 10.0).abs().maxCoeff() < 1e-12);
    CHECK((m.mu[0] - p.projection->A() * Eigen::VectorXd::Constant(81, 10.0)).cwiseAbs().maxCoeff() < 1e-10);
  }

  TEST_CASE("a new boundary condition only changes the dirichlet data") {
    const Problem p = deskProblem();
    const Surrogate& s = *p.surrogate;
    const Eigen::VectorXd psi = randomPsi(s, 3), before = psi;
    BatchNormBuffers buf = p.net->initBuffers();
    Rng rng = deriveRng(4, 0);
    const FieldSample f = sampleField(p.micro, std::nullopt, rng);
    const BoundaryCondition sine = BoundaryCondition::sinusoidal();
    const MeanBatch a = s.meanSolve(psi, buf, {f.c}, BoundaryCondition::constant(0.0), p.law(), NetMode::Eval);
    const MeanBatch b = s.meanSolve(psi, buf, {f.c}, sine, p.law(), NetMode::Eval);
    CHECK(psi == before);
    CHECK(a.X[0] == b.X[0]);
    const Eigen::VectorXd g = s.dirichlet(sine);
    for (int n : p.mesh->boundaryNodes) CHECK(b.solutions[0].Y[n] == g[n]);
    CHECK(b.solutions[0].Y[0] == doctest::Approx(sine(0.0, 0.0)));
  }

  TEST_CASE("the mean depends on the input only through X") {
    const Problem p = deskProblem();
    const Surrogate& s = *p.surrogate;
    Eigen::VectorXd psi = randomPsi(s, 5);
    // Zero every network weight so X is the same constant for every input.
    const LayerInfo& last = p.net->layers().back();
    psi.head(p.net->parameterCount()).setZero();
    psi[last.paramOffset + last.weightCount] = 0.7;
    BatchNormBuffers buf = p.net->initBuffers();
    Rng rng = deriveRng(6, 0);
    const FieldSample f1 = sampleField(p.micro, std::nullopt, rng), f2 = sampleField(p.micro, std::nullopt, rng);
    REQUIRE(f1.c != f2.c);
    const MeanBatch m = s.meanSolve(psi, buf, {f1.c, f2.c}, BoundaryCondition::constant(0.0), p.law(), NetMode::Eval);
    CHECK(m.X[0] == m.X[1]);
    CHECK(m.mu[0] == m.mu[1]);
  }

  TEST_CASE("zero noise sample equals the mean") {
    const Problem p = deskProblem();
    const Surrogate& s = *p.surrogate;
    const Eigen::VectorXd psi = randomPsi(s, 7);
    BatchNormBuffers buf = p.net->initBuffers();
    Rng rng = deriveRng(8, 0);
    const FieldSample f = sampleField(p.micro, std::nullopt, rng);
    const MeanBatch m = s.meanSolve(psi, buf, {f.c}, p.config.bc, p.law(), NetMode::Eval);
    const PosteriorSample y = s.samplePosterior(psi, m, 0, p.config.bc, p.law(), Eigen::VectorXd::Zero(10),
                                                Eigen::VectorXd::Zero(256), -1);
    CHECK(y.y == m.mu[0]);
  }

  TEST_CASE("sample covariance matches the low rank plus diagonal form") {
    const Problem p = deskProblem();
    const Surrogate& s = *p.surrogate;
    const Eigen::VectorXd psi = randomPsi(s, 9, 0.5);
    BatchNormBuffers buf = p.net->initBuffers();
    Rng rng = deriveRng(10, 0);
    const FieldSample f = sampleField(p.micro, std::nullopt, rng);
    const MeanBatch m = s.meanSolve(psi, buf, {f.c}, p.config.bc, p.law(), NetMode::Eval);
    const Eigen::MatrixXd bl = p.projection->A() * s.covFactor(psi);
    const double sigma2 = std::exp(2.0 * s.logSigma(psi));
    const Eigen::MatrixXd cov = bl * bl.transpose() + sigma2 * Eigen::MatrixXd::Identity(256, 256);
    std::uniform_int_distribution<int> pick(0, 255);
    std::vector<std::pair<int, int>> pairs;
    for (int k = 0; k < 20; ++k) pairs.emplace_back(pick(rng), pick(rng));
    const int n = 100000;
    std::vector<Eigen::VectorXd> draws;
    draws.reserve(n);
    for (int k = 0; k < n; ++k) {
      const Eigen::VectorXd e1 = standardNormalVector(rng, 10), e2 = standardNormalVector(rng, 256);
      draws.push_back(s.samplePosterior(psi, m, 0, p.config.bc, p.law(), e1, e2, -1).y - m.mu[0]);
    }
    for (const auto& [i, j] : pairs) {
      double mean = 0.0, m2 = 0.0;
      for (int k = 0; k < n; ++k) {
        const double v = draws[k][i] * draws[k][j];
        const double d = v - mean;
        mean += d / (k + 1);
        m2 += d * (v - mean);
      }
      const double se = std::sqrt(m2 / (n - 1) / n);
      CHECK(std::abs(mean - cov(i, j)) <= 4.0 * se);
    }
  }

  TEST_CASE("entropy closed form") {
    const Problem p = deskProblem();
    const Surrogate& s = *p.surrogate;
    const auto& lay = s.layout();
    Eigen::VectorXd psi = randomPsi(s, 11);
    psi.segment(lay.lOffset, lay.lRows * lay.lCols).setZero();
    CHECK(s.entropy(psi).value == doctest::Approx(0.5 * 256 * 2.0 * s.logSigma(psi)).epsilon(1e-12));

    psi = randomPsi(s, 12, 0.3);
    const Eigen::MatrixXd bl = p.projection->A() * s.covFactor(psi);
    const double sigma2 = std::exp(2.0 * s.logSigma(psi));
    const Eigen::MatrixXd dense = bl * bl.transpose() + sigma2 * Eigen::MatrixXd::Identity(256, 256);
    CHECK(std::abs(s.entropy(psi).value - denseHalfLogDet(dense)) <= 1e-10 * std::abs(denseHalfLogDet(dense)));

    double prev = -std::numeric_limits<double>::infinity();
    for (double ls : {-6.0, -4.0, -2.0, 0.0}) {
      psi[lay.logSigmaOffset] = ls;
      const double h = s.entropy(psi).value;
      CHECK(h > prev);
      prev = h;
    }
    psi[lay.logSigmaOffset] = -std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(s.entropy(psi), panis::Error);
  }

  TEST_CASE("entropy gradient matches finite differences") {
    const Problem p = deskProblem();
    const Surrogate& s = *p.surrogate;
    const auto& lay = s.layout();
    const Eigen::VectorXd psi = randomPsi(s, 13, 0.3);
    const EntropyValue h = s.entropy(psi);
    Rng rng = deriveRng(14, 0);
    std::uniform_int_distribution<int> pick(0, lay.lRows * lay.lCols - 1);
    for (int k = 0; k < 10; ++k) {
      const int i = pick(rng);
      Eigen::VectorXd pp = psi, pm = psi;
      pp[lay.lOffset + i] += 1e-4;
      pm[lay.lOffset + i] -= 1e-4;
      const double fd = (s.entropy(pp).value - s.entropy(pm).value) / 2e-4;
      CHECK(relErr(h.dL.data()[i], fd, 1e-8) < 1e-6);
    }
    Eigen::VectorXd pp = psi, pm = psi;
    pp[lay.logSigmaOffset] += 1e-4;
    pm[lay.logSigmaOffset] -= 1e-4;
    CHECK(relErr(h.dLogSigma, (s.entropy(pp).value - s.entropy(pm).value) / 2e-4) < 1e-6);
  }

  TEST_CASE("multiscale entropy is the coarse log determinant") {
    const Problem p = Problem::build(panis::test::smallMultiscaleConfig(4));
    const Surrogate& s = *p.surrogate;
    const Eigen::VectorXd psi = randomPsi(s, 15, 0.3);
    const Eigen::MatrixXd l = s.covFactor(psi);
    const Eigen::MatrixXd dense = l * l.transpose() + std::exp(2.0 * s.logSigma(psi)) * Eigen::MatrixXd::Identity(81, 81);
    CHECK(std::abs(s.entropy(psi).value - denseHalfLogDet(dense)) <= 1e-10 * std::abs(denseHalfLogDet(dense)));
  }

  TEST_CASE("multiscale decomposition and the boundary mask") {
    const Problem p = Problem::build(panis::test::smallMultiscaleConfig(4));
    Surrogate& s = *p.surrogate;
    const auto& lay = s.layout();
    CHECK(lay.atomCount == 4);
    CHECK(lay.atomDim == 256 - 81);
    Eigen::VectorXd psi = randomPsi(s, 16);
    Rng rng = deriveRng(17, 0);
    std::vector<FieldSample> atoms;
    std::vector<std::vector<double>> xs;
    for (int k = 0; k < 4; ++k) {
      atoms.push_back(sampleField(p.micro, std::nullopt, rng));
      xs.push_back(atoms.back().x);
    }
    s.registerAtoms(xs);
    BatchNormBuffers buf = p.net->initBuffers();
    const MeanBatch m = s.meanSolve(psi, buf, {atoms[2].c}, p.config.bc, p.law(), NetMode::Eval);
    const Eigen::VectorXd z1 = Eigen::VectorXd::Zero(10), z2 = Eigen::VectorXd::Zero(81);
    const PosteriorSample plain = s.samplePosterior(psi, m, 0, p.config.bc, p.law(), z1, z2, 2);
    CHECK((plain.y - m.mu[0]).cwiseAbs().maxCoeff() < 1e-12);

    psi.segment(lay.atomsOffset, lay.atomDim * lay.atomCount) = standardNormalVector(rng, lay.atomDim * lay.atomCount);
    const PosteriorSample y = s.samplePosterior(psi, m, 0, p.config.bc, p.law(), z1, z2, 2);
    const Eigen::VectorXd fine = s.complement() * y.yfPrime;
    CHECK((y.y - (y.yc + fine)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((p.projection->A().transpose() * fine).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((y.yfPrime.head(s.boundaryActiveCount()).array() == 0.0).all());
    CHECK(s.boundaryActiveCount() > 0);

    // The masked fluctuation leaves the boundary trace to A Y.
    const Eigen::MatrixXd u = p.engine->evalTrial(fine).u;
    const int q = static_cast<int>(u.rows());
    double edge = 0.0;
    for (int i = 0; i < q; ++i)
      edge = std::max({edge, std::abs(u(0, i)), std::abs(u(q - 1, i)), std::abs(u(i, 0)), std::abs(u(i, q - 1))});
    CHECK(edge <= 1e-4 * u.cwiseAbs().maxCoeff());
  }

  TEST_CASE("perturbed inputs are clamped and counted") {
    const Problem p = Problem::build(panis::test::smallMultiscaleConfig(2));
    const Surrogate& s = *p.surrogate;
    const Eigen::VectorXd psi = randomPsi(s, 18);
    BatchNormBuffers buf = p.net->initBuffers();
    Rng rng = deriveRng(19, 0);
    const FieldSample f = sampleField(p.micro, std::nullopt, rng);
    const MeanBatch m = s.meanSolve(psi, buf, {f.c}, p.config.bc, p.law(), NetMode::Eval);
    const PosteriorSample y = s.samplePosterior(psi, m, 0, p.config.bc, p.law(), Eigen::VectorXd::Zero(10),
                                                Eigen::VectorXd::Constant(81, -1e4), -1);
    CHECK(y.clampCount == 81);
    CHECK(y.perturbedX.minCoeff() >= s.options().xFloor);
  }

  TEST_CASE("atoms are found by content") {
    const Problem p = Problem::build(panis::test::smallMultiscaleConfig(3));
    Surrogate& s = *p.surrogate;
    const std::vector<std::vector<double>> xs{{1.0, 2.0}, {3.0, 4.0}, {5.0, 6.0}};
    s.registerAtoms(xs);
    CHECK(s.atomIndex({3.0, 4.0}) == 1);
    CHECK(s.atomIndex({5.0, 6.0}) == 2);
    CHECK(s.atomIndex({5.0, 6.5}) == -1);
    CHECK_THROWS_AS(s.registerAtoms({{1.0}, {1.0}, {2.0}}), panis::Error);
    CHECK_THROWS_AS(s.registerAtoms({{1.0}}), panis::Error);
  }

  TEST_CASE("degenerate posterior collapses the bands") {
    const Problem p = deskProblem();
    const Surrogate& s = *p.surrogate;
    Eigen::VectorXd psi = randomPsi(s, 20);
    const auto& lay = s.layout();
    psi.segment(lay.lOffset, lay.lRows * lay.lCols).setZero();
    psi[lay.logSigmaOffset] = -1e3;
    Rng rng = deriveRng(21, 0);
    const FieldSample f = sampleField(p.micro, std::nullopt, rng);
    const PredictionBands b =
        s.predict(psi, p.net->initBuffers(), f.c, p.config.bc, p.law(), p.engine->quadrature().nodes);
    CHECK(b.upper == b.mean);
    CHECK(b.lower == b.mean);
  }

  TEST_CASE("bands are symmetric and ordered") {
    const Problem p = deskProblem();
    const Surrogate& s = *p.surrogate;
    const Eigen::VectorXd psi = randomPsi(s, 22, 0.3);
    Rng rng = deriveRng(23, 0);
    const FieldSample f = sampleField(p.micro, std::nullopt, rng);
    const PredictionBands b =
        s.predict(psi, p.net->initBuffers(), f.c, p.config.bc, p.law(), p.engine->quadrature().nodes);
    CHECK(((b.upper - b.mean) - (b.mean - b.lower)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((b.lower.array() <= b.mean.array()).all());
    CHECK((b.mean.array() <= b.upper.array()).all());
    CHECK((b.mean - p.engine->evalTrial(b.coefficients).u).cwiseAbs().maxCoeff() < 1e-10);
  }

  TEST_CASE("parameters survive a container round trip") {
    const Problem p = Problem::build(panis::test::smallMultiscaleConfig(2));
    Surrogate& s = *p.surrogate;
    s.registerAtoms({{1.0, 2.0}, {3.0, 4.0}});
    Rng rng = deriveRng(24, 0);
    Eigen::VectorXd psi = randomPsi(s, 25);
    psi += 0.1 * standardNormalVector(rng, psi.size());
    BatchNormBuffers buf = p.net->initBuffers();
    buf.runningMean.setRandom();
    ArrayBox box;
    s.save(box, psi, buf);
    CHECK(box.has("cov/L"));
    CHECK(box.has("cov/log_sigma"));
    CHECK(box.has("atoms/yf_0"));
    CHECK(box.has("atoms/x_hash_1"));
    Eigen::VectorXd back;
    BatchNormBuffers bufBack;
    s.load(box, back, bufBack);
    CHECK(back == psi);
    CHECK(bufBack.runningMean == buf.runningMean);
  }
}
