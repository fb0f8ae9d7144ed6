// End-to-end acceptance runner: one PASS/FAIL line per criterion.
#include "panis/harness.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>

using namespace panis;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void run(const std::string& name, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("%s %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), s);
  std::fflush(stdout);
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

Eigen::VectorXd randomState(const Surrogate& s, std::uint64_t seed) {
  Rng rng = deriveRng(seed, 0);
  Eigen::VectorXd psi = s.initialParameters(rng);
  const auto& lay = s.layout();
  psi.segment(lay.lOffset, lay.lRows * lay.lCols) = 0.05 * standardNormalVector(rng, lay.lRows * lay.lCols);
  if (lay.atomCount > 0)
    psi.segment(lay.atomsOffset, lay.atomDim * lay.atomCount) = 0.1 * standardNormalVector(rng, lay.atomDim * lay.atomCount);
  return psi;
}

struct Trained {
  Problem problem;
  Checkpoint checkpoint;
  TrainResult result;
};

Trained trainRun(const RunConfig& cfg) {
  Trained t{Problem::build(cfg), {}, {}};
  Rng rng = deriveRng(cfg.seed, 100);
  std::vector<std::vector<double>> atoms;
  t.result = train(t.problem, rng, nullptr, &atoms);
  t.checkpoint = {cfg, t.result.psi, t.result.buffers, atoms};
  return t;
}

double heldOutError(const Trained& t, double* r2 = nullptr) {
  const RunConfig& c = t.problem.config;
  const ValidationSet data =
      generateValidation(t.problem, c.validationCount, c.volumeFraction, c.bc, t.problem.law(), c.seed);
  const EvalReport rep = evaluate(t.problem, t.checkpoint, data);
  if (r2) *r2 = rep.r2;
  return rep.relL2;
}

}  // namespace

int main() {
  const fs::path work = fs::temp_directory_path() / "panis_acceptance";
  fs::create_directories(work);

  run("gradient-chain", [] {
    const Problem lin = Problem::build(RunConfig::fromPreset("desk-panis"));
    const Problem multi = Problem::build(RunConfig::fromPreset("desk-mpanis"));
    const Eigen::VectorXd p1 = randomState(*lin.surrogate, 1), p2 = randomState(*multi.surrogate, 2);
    const GradCheck a = gradientCheck(lin, p1, lin.net->initBuffers(), 0.0, 24, 3);
    const GradCheck b = gradientCheck(lin, p1, lin.net->initBuffers(), 0.05, 24, 4);
    const GradCheck c = gradientCheck(multi, p2, multi.net->initBuffers(), 0.0, 24, 5);
    const GradCheck d = gradientCheck(multi, p2, multi.net->initBuffers(), 0.05, 24, 6);
    const bool ok = a.maxRelError < 1e-4 && c.maxRelError < 1e-4 && b.maxRelError < 1e-3 && d.maxRelError < 1e-3 &&
                    a.indices.size() >= 20 && c.indices.size() >= 20;
    return Outcome{ok, "24 coordinates; linear " + fmt(a.maxRelError) + " / " + fmt(c.maxRelError) +
                           " (< 1e-4), nonlinear " + fmt(b.maxRelError) + " / " + fmt(d.maxRelError) +
                           " (< 1e-3), single/multiscale"};
  });

  run("zero-residual-manifold", [] {
    const ResidualEngine eng(RbfGrid::regular(16), WeightBank{RbfGrid::regular(16), true},
                             QuadratureGrid::trapezoidal(33));
    const Problem p = Problem::build(RunConfig::fromPreset("desk-panis"));
    Rng rng = deriveRng(7, 0);
    const FieldSample f = sampleField(p.micro, std::nullopt, rng);
    const ResidualProblem rp{{0.0, 0.0}, 100.0};
    const int n = eng.trial().count();
    const Eigen::VectorXd r0 = eng.residuals(Eigen::VectorXd::Zero(n), f.c, rp);
    Eigen::MatrixXd k(eng.weightCount(), n);
    for (int i = 0; i < n; ++i) k.col(i) = eng.residuals(Eigen::VectorXd::Unit(n, i), f.c, rp) - r0;
    const Eigen::VectorXd y = k.fullPivLu().solve(-r0);
    const double worst = eng.residuals(y, f.c, rp).cwiseAbs().maxCoeff();
    return Outcome{worst <= 1e-8, "max |r_j| = " + fmt(worst) + " over " + std::to_string(eng.weightCount()) +
                                      " weight functions (<= 1e-8)"};
  });

  run("structural-fidelity", [] {
    const ConvNet small(panisArchitecture()), large(mpanisArchitecture());
    const Problem a = Problem::build(RunConfig::fromPreset("full-panis"));
    const Problem b = Problem::build(RunConfig::fromPreset("full-mpanis"));
    const bool ok = small.parameterCount() == 5065 && large.parameterCount() == 12801 &&
                    a.surrogate->layout().total == 7956 && b.surrogate->layout().total == 415112 &&
                    small.outputSize() == 17 && large.outputSize() == 9;
    return Outcome{ok, "CNN " + std::to_string(small.parameterCount()) + " / " + std::to_string(large.parameterCount()) +
                           ", totals " + std::to_string(a.surrogate->layout().total) + " / " +
                           std::to_string(b.surrogate->layout().total) + ", outputs " +
                           std::to_string(small.outputSize()) + " / " + std::to_string(large.outputSize())};
  });

  run("projection-identities", [] {
    const Problem p = Problem::build(RunConfig::fromPreset("full-mpanis"));
    const ProjectionOperators& pr = *p.projection;
    const double ortho = (pr.A().transpose() * pr.Aperp()).cwiseAbs().maxCoeff();
    const double lift = (pr.gram() * pr.A() - pr.B()).cwiseAbs().maxCoeff();
    Rng rng = deriveRng(8, 0);
    double trip = 0.0;
    for (int i = 0; i < 100; ++i) {
      const Eigen::VectorXd y = standardNormalVector(rng, static_cast<int>(pr.A().cols()));
      trip = std::max(trip, (pr.coarseProject(pr.A() * y) - y).cwiseAbs().maxCoeff());
    }
    const bool ok = ortho <= 1e-10 && lift <= 1e-8 && trip <= 1e-10;
    return Outcome{ok, "|A^T Aperp| " + fmt(ortho) + " (1e-10), |aA - B| " + fmt(lift) + " (1e-8), round trip " +
                           fmt(trip) + " (1e-10) on " + std::to_string(pr.A().rows()) + "x" +
                           std::to_string(pr.A().cols())};
  });

  run("estimator-unbiasedness", [] {
    const Problem p = Problem::build(RunConfig::fromPreset("desk-panis"));
    const Surrogate& s = *p.surrogate;
    const Eigen::VectorXd psi = randomState(s, 9);
    Rng rng = deriveRng(10, 0);
    ResidualProblem rp;
    rp.law = p.law();
    rp.source = p.config.source;
    // A frozen population of (x, eps) draws with their full residual banks.
    const int pool = 2000, N = p.engine->weightCount();
    std::vector<Eigen::VectorXd> res;
    double fullMean = 0.0;
    for (int k = 0; k < pool; ++k) {
      const FieldSample f = sampleField(p.micro, std::nullopt, rng);
      BatchNormBuffers b = p.net->initBuffers();
      const MeanBatch m = s.meanSolve(psi, b, {f.c}, p.config.bc, p.law(), NetMode::Eval);
      const Eigen::VectorXd e1 = standardNormalVector(rng, s.layout().lCols), e2 = standardNormalVector(rng, s.fineDimension());
      res.push_back(p.engine->residuals(s.samplePosterior(psi, m, 0, p.config.bc, p.law(), e1, e2, -1).y, f.c, rp));
      fullMean += res.back().cwiseAbs().sum() / pool;
    }
    const int redraws = 100000, R = p.config.train.R, M = p.config.train.M;
    std::uniform_int_distribution<int> pick(0, pool - 1);
    double mean = 0.0, m2 = 0.0;
    for (int t = 0; t < redraws; ++t) {
      std::vector<Eigen::VectorXd> batch;
      for (int r = 0; r < R; ++r) batch.push_back(res[static_cast<std::size_t>(pick(rng))]);
      const double v = subsampledResidualSum(batch, subsampleResiduals(N, M, rng));
      const double d = v - mean;
      mean += d / (t + 1);
      m2 += d * (v - mean);
    }
    const double se = std::sqrt(m2 / (redraws - 1) / redraws);
    const double z = (mean - fullMean) / se;
    return Outcome{std::abs(z) <= 3.0, "subsampled " + fmt(mean) + " vs full " + fmt(fullMean) + ", z = " + fmt(z) +
                                           " over 1e5 redraws (|z| <= 3)"};
  });

  // Desk-scale PANIS training shared by the following criteria.
  const RunConfig deskCfg = RunConfig::fromPreset("desk-panis");
  std::optional<Trained> desk;
  double deskEps = 0.0;
  run("desk-panis-training", [&] {
    desk = trainRun(deskCfg);
    double r2 = 0.0;
    deskEps = heldOutError(*desk, &r2);
    const double slope = traceSlope(desk->result.trace);
    const bool ok = r2 >= 0.8 && deskEps <= 0.15 && slope >= 0.0 && !desk->result.diverged;
    return Outcome{ok, std::to_string(desk->result.steps) + " steps; R2 " + fmt(r2) + " (>= 0.8), eps " + fmt(deskEps) +
                           " (<= 0.15), ELBO slope " + fmt(slope) + " (>= 0)"};
  });

  run("bc-generalization", [&] {
    if (!desk) return Outcome{false, "no desk checkpoint"};
    const Problem& p = desk->problem;
    const std::vector<SweepRow> rows =
        sweep(p, desk->checkpoint, SweepAxis::Boundary, {"constant:10", "sinusoidal"}, deskCfg.validationCount, deskCfg.seed);
    bool ok = true;
    std::string d = "in-distribution eps " + fmt(deskEps);
    for (const SweepRow& r : rows) {
      ok = ok && r.error.empty() && r.relL2 <= 2.0 * deskEps;
      d += ", " + r.value + " " + (r.error.empty() ? fmt(r.relL2) : r.error);
    }
    return Outcome{ok, d + " (<= 2x)"};
  });

  run("vf-robustness", [&] {
    if (!desk) return Outcome{false, "no desk checkpoint"};
    const std::vector<SweepRow> rows = sweep(desk->problem, desk->checkpoint, SweepAxis::VolumeFraction,
                                             {"0.1", "0.5", "0.9"}, deskCfg.validationCount, deskCfg.seed);
    std::cout << formatSweep(SweepAxis::VolumeFraction, rows);
    double lo = 1e300, hi = 0.0;
    bool ok = true;
    for (const SweepRow& r : rows) {
      ok = ok && r.error.empty();
      lo = std::min(lo, r.relL2);
      hi = std::max(hi, r.relL2);
    }
    ok = ok && hi < 3.0 * lo;
    return Outcome{ok, "eps range " + fmt(lo) + " .. " + fmt(hi) + ", ratio " + fmt(hi / lo) + " (< 3)"};
  });

  run("nonlinear-pipeline", [&] {
    const Problem base = Problem::build(deskCfg);
    Rng rng = deriveRng(11, 0);
    const FieldSample f = sampleField(base.micro, std::nullopt, rng);
    BatchNormBuffers buf = base.net->initBuffers();
    const Eigen::VectorXd psi = randomState(*base.surrogate, 12);
    const MeanBatch m = base.surrogate->meanSolve(psi, buf, {f.c}, BoundaryCondition::sinusoidal(), base.law(), NetMode::Eval);
    const CoarseModel& model = m.models[0];
    const double match = (solveNewton(model, {0.0, 5.0}).Y - solveLinear(model).Y).cwiseAbs().maxCoeff() /
                         solveLinear(model).Y.cwiseAbs().maxCoeff();
    if (!desk) return Outcome{false, "no desk checkpoint for the warm start"};
    const std::string warm = (fs::temp_directory_path() / "panis_acceptance" / "linear.box").string();
    saveCheckpoint(warm, desk->problem, desk->checkpoint);
    RunConfig cfg = RunConfig::fromPreset("desk-nonlinear");
    cfg.warmStart = warm;
    const Trained t = trainRun(cfg);
    const double eps = heldOutError(t);
    bool finite = true;
    for (const TraceRow& r : t.result.trace) finite = finite && std::isfinite(r.elbo);
    const bool ok = match <= 1e-12 && !t.result.diverged && finite && t.result.trace.back().alpha == 0.05 && eps <= 0.2;
    return Outcome{ok, "Newton vs linear at alpha 0 " + fmt(match) + " (1e-12); " + std::to_string(t.result.steps) +
                           " tempered steps to alpha " + fmt(t.result.trace.back().alpha) + ", rejected " +
                           std::to_string(t.result.rejected) + "; eps " + fmt(eps) + " (<= 0.2)"};
  });

  run("mpanis-desk", [] {
    const RunConfig base = RunConfig::fromPreset("desk-mpanis");
    std::vector<std::pair<int, double>> curve;
    for (int k : {8, 16, 24, 32}) {
      RunConfig c = base;
      c.surrogate.atomCount = k;
      curve.emplace_back(k, heldOutError(trainRun(c)));
    }
    RunConfig off = base;
    off.fluctuations = false;
    const double epsOff = heldOutError(trainRun(off));
    const double eps = curve.back().second;
    bool flat = true;
    std::string d = "eps(K)";
    for (std::size_t i = 0; i < curve.size(); ++i) {
      d += " " + std::to_string(curve[i].first) + ":" + fmt(curve[i].second);
      if (i > 0 && curve[i - 1].first >= 16)
        flat = flat && (curve[i - 1].second - curve[i].second) / curve[i - 1].second < 0.05;
    }
    const bool ok = eps <= 0.25 && flat && epsOff > eps;
    return Outcome{ok, d + "; K=32 eps " + fmt(eps) + " (<= 0.25), gains past 16 < 5%: " + (flat ? "yes" : "no") +
                           "; without fluctuations " + fmt(epsOff) + " (worse: " + (epsOff > eps ? "yes" : "no") + ")"};
  });

  run("closed-form-vs-sampled-variance", [&] {
    if (!desk) return Outcome{false, "no desk checkpoint"};
    const Problem& p = desk->problem;
    const Surrogate& s = *p.surrogate;
    const Checkpoint& ck = desk->checkpoint;
    Rng rng = deriveRng(13, 0);
    const FieldSample f = sampleField(p.micro, std::nullopt, rng);
    const PredictionBands b = predictOn(p, ck, f.c, deskCfg.bc, p.law());
    BatchNormBuffers buf = ck.buffers;
    const MeanBatch m = s.meanSolve(ck.psi, buf, {f.c}, deskCfg.bc, p.law(), NetMode::Eval);
    const int n = 10000, q = static_cast<int>(b.mean.rows());
    std::uniform_int_distribution<int> pick(0, q - 1);
    std::vector<std::pair<int, int>> probes;
    for (int k = 0; k < 20; ++k) probes.emplace_back(pick(rng), pick(rng));
    std::vector<Eigen::VectorXd> vals(20, Eigen::VectorXd(n));
    for (int k = 0; k < n; ++k) {
      const Eigen::VectorXd e1 = standardNormalVector(rng, s.layout().lCols), e2 = standardNormalVector(rng, s.fineDimension());
      const Eigen::MatrixXd u = p.engine->evalTrial(s.samplePosterior(ck.psi, m, 0, deskCfg.bc, p.law(), e1, e2, -1).y).u;
      for (int i = 0; i < 20; ++i) vals[i][k] = u(probes[i].first, probes[i].second);
    }
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
      const Eigen::ArrayXd d = vals[i].array() - vals[i].mean();
      const double var = d.square().mean(), m4 = d.pow(4).mean();
      const double se = std::sqrt((m4 - var * var) / n);
      worst = std::max(worst, std::abs(var - std::pow(b.sd(probes[i].first, probes[i].second), 2)) / se);
    }
    return Outcome{worst <= 4.0, "worst deviation " + fmt(worst) + " standard errors over 20 probes, 1e4 samples (<= 4)"};
  });

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
