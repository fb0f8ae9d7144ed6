#include "panis/error.hpp"
#include "panis/harness.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace panis;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string checkpoint;
  std::string mode;
};

RunConfig effectiveConfig(const Globals& g) {
  KeyValueConfig kv = g.config.empty() ? KeyValueConfig{} : KeyValueConfig::load(g.config);
  if (!g.mode.empty()) {
    if (!kv.has("preset")) kv.set("preset", g.mode == "mpanis" ? "desk-mpanis" : "desk-panis");
    kv.set("mode", g.mode);
  }
  if (g.seed) kv.set("seed", std::to_string(*g.seed));
  return RunConfig::fromConfig(kv);
}

std::string outPath(const Globals& g, const std::string& name) {
  fs::create_directories(g.out);
  return (fs::path(g.out) / name).string();
}

std::string checkpointPath(const Globals& g) {
  return g.checkpoint.empty() ? outPath(g, "checkpoint.box") : g.checkpoint;
}

std::pair<Problem, Checkpoint> requireCheckpoint(const Globals& g) {
  const std::string path = checkpointPath(g);
  if (!fs::exists(path)) fail(ErrorKind::Config, "checkpoint " + path + " does not exist; run train first or pass --checkpoint");
  auto loaded = loadCheckpoint(path);
  if (g.seed) loaded.first.config.seed = loaded.second.config.seed = *g.seed;
  return loaded;
}

ValidationSet dataFor(const Problem& problem, const std::string& dataPath) {
  if (!dataPath.empty()) return loadValidation(dataPath);
  const RunConfig& c = problem.config;
  return generateValidation(problem, c.validationCount, c.volumeFraction, c.bc, problem.law(), c.seed);
}

std::vector<std::string> splitList(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int cmdGenBasis(const Globals& g) {
  const RunConfig cfg = effectiveConfig(g);
  const KleBasis kle = KleBasis::build({cfg.lengthScale, cfg.grid}, cfg.dx);
  ArrayBox box;
  box.putText("config", cfg.toText());
  box.put("eigvals", std::span<const double>(kle.eigenvalues()));
  const Eigen::MatrixXd v = kle.eigenfunctionMatrix();
  const auto gsz = static_cast<std::size_t>(cfg.grid);
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(v.size()));
  // (dx, G, G): one eigenfunction per leading index.
  for (Eigen::Index i = 0; i < v.cols(); ++i)
    for (Eigen::Index p = 0; p < v.rows(); ++p) data.push_back(v(p, i));
  box.put("eigfuncs", {static_cast<std::size_t>(cfg.dx), gsz, gsz}, std::move(data));
  const std::string path = outPath(g, "basis.box");
  box.save(path);
  std::cout << "wrote " << path << " (" << cfg.dx << " modes, largest eigenvalue " << kle.eigenvalues().front() << ")\n";
  return 0;
}

int cmdGenData(const Globals& g, int count, std::optional<double> vf, const std::string& bcText) {
  RunConfig cfg = effectiveConfig(g);
  if (vf) cfg.volumeFraction = *vf;
  if (!bcText.empty()) cfg.bc = BoundaryCondition::parse(bcText);
  const Problem problem = Problem::build(cfg);
  const int n = count > 0 ? count : cfg.validationCount;
  const ValidationSet data = generateValidation(problem, n, cfg.volumeFraction, cfg.bc, problem.law(), cfg.seed);
  const std::string path = outPath(g, "validation.box");
  saveValidation(path, data, cfg);
  std::cout << "wrote " << path << " (" << n << " samples, worst relative residual " << data.worstResidual << ")\n";
  return 0;
}

int cmdTrain(const Globals& g, bool quiet) {
  const RunConfig cfg = effectiveConfig(g);
  const Problem problem = Problem::build(cfg);
  Rng rng = deriveRng(cfg.seed, 100);
  std::vector<std::vector<double>> atoms;
  const TrainResult res = train(
      problem, rng,
      [&](const TraceRow& r) {
        if (!quiet && r.step % 100 == 0) {
          std::cout << "step " << r.step << "  elbo " << r.elbo << "  alpha " << r.alpha << "  " << std::fixed
                    << std::setprecision(1) << r.seconds << "s" << std::defaultfloat << std::setprecision(6) << "\n";
        }
      },
      &atoms);
  const std::string ckPath = checkpointPath(g);
  if (auto parent = fs::path(ckPath).parent_path(); !parent.empty()) fs::create_directories(parent);
  saveCheckpoint(ckPath, problem, Checkpoint{cfg, res.psi, res.buffers, atoms});
  writeTraceCsv(outPath(g, "trace.csv"), res.trace);
  std::cout << "steps " << res.steps << (res.converged ? " (converged)" : "") << ", rejected " << res.rejected
            << ", trace slope " << traceSlope(res.trace) << "\nwrote " << ckPath << "\n";
  if (res.diverged) {
    std::cerr << "error: training diverged after " << cfg.train.maxRejected
              << " consecutive rejected steps; the last good parameters were saved\n";
    return exitCodeFor(ErrorKind::NonConvergence);
  }
  return 0;
}

int cmdPredict(const Globals& g, const std::string& dataPath, int index, const std::string& bcText) {
  auto [problem, ck] = requireCheckpoint(g);
  FieldSample input;
  if (!dataPath.empty()) {
    const ValidationSet data = loadValidation(dataPath);
    if (index < 0 || index >= static_cast<int>(data.inputs.size())) fail(ErrorKind::Config, "--index is out of range");
    input = data.inputs[static_cast<std::size_t>(index)];
  } else {
    Rng rng = deriveRng(problem.config.seed, 200);
    input = sampleField(problem.micro, std::nullopt, rng);
  }
  const BoundaryCondition bc = bcText.empty() ? problem.config.bc : BoundaryCondition::parse(bcText);
  const PredictionBands b = predictOn(problem, ck, input.c, bc, problem.law());
  ArrayBox box;
  box.putText("config", problem.config.toText());
  box.put("x", std::span<const double>(input.x));
  box.put("c", input.c);
  box.put("mean", b.mean);
  box.put("sd", b.sd);
  box.put("upper", b.upper);
  box.put("lower", b.lower);
  box.put("coefficients", std::span<const double>(b.coefficients.data(), static_cast<std::size_t>(b.coefficients.size())));
  const std::string path = outPath(g, "prediction.box");
  box.save(path);
  writePgm(outPath(g, "input.pgm"), input.c);
  writePgm(outPath(g, "mean.pgm"), b.mean);
  writePgm(outPath(g, "sd.pgm"), b.sd);
  std::cout << "wrote " << path << " (mean range " << b.mean.minCoeff() << " .. " << b.mean.maxCoeff()
            << ", max sd " << b.sd.maxCoeff() << ")\n";
  return 0;
}

int cmdEvaluate(const Globals& g, const std::string& dataPath) {
  auto [problem, ck] = requireCheckpoint(g);
  const ValidationSet data = dataFor(problem, dataPath);
  const EvalReport rep = evaluate(problem, ck, data);
  ArrayBox box;
  box.putText("config", problem.config.toText());
  box.putScalar("r2", rep.r2);
  box.putScalar("rel_l2", rep.relL2);
  box.putScalar("coverage", rep.coverage);
  box.put("per_sample", std::span<const double>(rep.perSample));
  const std::string path = outPath(g, "evaluation.box");
  box.save(path);
  std::cout << std::setprecision(4) << "R2 " << rep.r2 << "  eps " << rep.relL2 << "  coverage " << rep.coverage;
  if (rep.skipped > 0) std::cout << "  (" << rep.skipped << " zero-norm references skipped)";
  std::cout << "\nwrote " << path << "\n";
  return 0;
}

int cmdSweep(const Globals& g, const std::string& axisText, const std::string& valuesText, int count) {
  auto [problem, ck] = requireCheckpoint(g);
  const SweepAxis axis = parseSweepAxis(axisText);
  const std::vector<std::string> values = valuesText.empty() ? defaultSweepValues(axis) : splitList(valuesText);
  const int n = count > 0 ? count : problem.config.validationCount;
  const auto rows = sweep(problem, ck, axis, values, n, problem.config.seed);
  const std::string table = formatSweep(axis, rows);
  const std::string path = outPath(g, "sweep_" + toString(axis) + ".md");
  std::ofstream(path) << table;
  std::cout << table << "wrote " << path << "\n";
  return 0;
}

int cmdGradcheck(const Globals& g, double alpha, int coordinates) {
  Problem problem;
  Eigen::VectorXd psi;
  BatchNormBuffers buffers;
  if (!g.checkpoint.empty()) {
    auto loaded = requireCheckpoint(g);
    problem = std::move(loaded.first);
    psi = std::move(loaded.second.psi);
    buffers = std::move(loaded.second.buffers);
  } else {
    problem = Problem::build(effectiveConfig(g));
    Rng init = deriveRng(problem.config.seed, 1);
    psi = problem.surrogate->initialParameters(init);
    buffers = problem.net->initBuffers();
  }
  const GradCheck gc = gradientCheck(problem, psi, buffers, alpha, coordinates, problem.config.seed);
  const double tol = alpha > 0.0 ? 1e-3 : 1e-4;
  std::cout << std::setprecision(6);
  for (std::size_t i = 0; i < gc.indices.size(); ++i) {
    std::cout << "psi[" << gc.indices[i] << "]  analytic " << gc.analytic[i] << "  numeric " << gc.numeric[i] << "\n";
  }
  std::cout << "max relative error " << gc.maxRelError << " (tolerance " << tol << ")\n";
  return gc.maxRelError < tol ? 0 : exitCodeFor(ErrorKind::Numerical);
}

int cmdReport(const Globals& g, const std::string& dataPath, int count) {
  auto [problem, ck] = requireCheckpoint(g);
  const RunConfig& cfg = problem.config;
  const ValidationSet data = dataFor(problem, dataPath);
  const EvalReport rep = evaluate(problem, ck, data, true);
  const int n = count > 0 ? count : cfg.validationCount;

  std::ostringstream md;
  md << std::setprecision(4) << std::fixed;
  md << "# Surrogate report\n\n";
  md << "Preset `" << cfg.preset << "`, mode `" << (cfg.mode == SurrogateMode::Panis ? "panis" : "mpanis")
     << "`, " << problem.surrogate->layout().total << " trainable parameters.\n\n";
  md << "## In-distribution\n\n| metric | value |\n|---|---|\n";
  md << "| R2 | " << rep.r2 << " |\n| eps | " << rep.relL2 << " |\n| band coverage | " << rep.coverage << " |\n";
  md << "| samples | " << data.inputs.size() << " |\n\n";
  std::vector<SweepAxis> axes = {SweepAxis::VolumeFraction, SweepAxis::Boundary};
  if (cfg.alpha > 0.0) axes.push_back(SweepAxis::Alpha);
  for (SweepAxis axis : axes) {
    md << "## Sweep over " << toString(axis) << "\n\n";
    md << formatSweep(axis, sweep(problem, ck, axis, defaultSweepValues(axis), n, cfg.seed)) << "\n";
  }
  md << publishedTables();
  md << "\n## Effective configuration\n\n```\n" << cfg.toText() << "```\n";

  const std::string path = outPath(g, "report.md");
  std::ofstream(path) << md.str();
  ArrayBox box;
  box.putText("config", cfg.toText());
  box.put("reference_0", rep.references.front());
  box.put("mean_0", rep.bands.front().mean);
  box.put("sd_0", rep.bands.front().sd);
  box.put("per_sample", std::span<const double>(rep.perSample));
  box.save(outPath(g, "report.box"));
  writePgm(outPath(g, "report_mean.pgm"), rep.bands.front().mean);
  writePgm(outPath(g, "report_sd.pgm"), rep.bands.front().sd);
  writePgm(outPath(g, "report_error.pgm"), (rep.bands.front().mean - rep.references.front()).cwiseAbs());
  std::cout << md.str() << "wrote " << path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Physics-aware probabilistic surrogates for random-media PDEs"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "key = value configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "base random seed");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--checkpoint", g.checkpoint, "checkpoint file (default <out>/checkpoint.box)");
  app.add_option("--mode", g.mode, "panis or mpanis")->check(CLI::IsMember({"panis", "mpanis"}));

  int count = 0, index = 0, coordinates = 24;
  std::optional<double> vf;
  double alpha = 0.0;
  std::string bc, data, axis, values;
  bool quiet = false;

  auto* genBasis = app.add_subcommand("gen-basis", "write the truncated KLE basis");
  auto* genData = app.add_subcommand("gen-data", "generate a validation set with the fine reference solver");
  genData->add_option("--count", count, "number of samples (default from config)");
  genData->add_option("--vf", vf, "volume fraction override");
  genData->add_option("--bc", bc, "boundary condition override: constant:<v> or sinusoidal");
  auto* trainCmd = app.add_subcommand("train", "train a surrogate and write a checkpoint");
  trainCmd->add_flag("--quiet", quiet, "suppress progress lines");
  auto* predict = app.add_subcommand("predict", "posterior mean and +/-2 sd bands for one input");
  predict->add_option("--data", data, "validation container to take the input from");
  predict->add_option("--index", index, "sample index in --data");
  predict->add_option("--bc", bc, "boundary condition override");
  auto* evaluateCmd = app.add_subcommand("evaluate", "R2, relative L2 error and band coverage");
  evaluateCmd->add_option("--data", data, "validation container (default: regenerate from config)");
  auto* sweepCmd = app.add_subcommand("sweep", "metrics across volume fraction, boundary condition or alpha");
  sweepCmd->add_option("--axis", axis, "vf, bc or alpha")->required();
  sweepCmd->add_option("--values", values, "comma-separated values (default per axis)");
  sweepCmd->add_option("--count", count, "samples per cell (default from config)");
  auto* gradcheck = app.add_subcommand("gradcheck", "compare the ELBO gradient with central differences");
  gradcheck->add_option("--alpha", alpha, "nonlinearity used for the check");
  gradcheck->add_option("--coordinates", coordinates, "number of parameter coordinates probed");
  auto* report = app.add_subcommand("report", "evaluation, sweeps and published reference tables");
  report->add_option("--data", data, "validation container (default: regenerate from config)");
  report->add_option("--count", count, "samples per sweep cell (default from config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return exitCodeFor(ErrorKind::Config);
  }

  try {
    if (genBasis->parsed()) return cmdGenBasis(g);
    if (genData->parsed()) return cmdGenData(g, count, vf, bc);
    if (trainCmd->parsed()) return cmdTrain(g, quiet);
    if (predict->parsed()) return cmdPredict(g, data, index, bc);
    if (evaluateCmd->parsed()) return cmdEvaluate(g, data);
    if (sweepCmd->parsed()) return cmdSweep(g, axis, values, count);
    if (gradcheck->parsed()) return cmdGradcheck(g, alpha, coordinates);
    if (report->parsed()) return cmdReport(g, data, count);
  } catch (const NonConvergenceError& e) {
    std::cerr << "error: " << e.what() << " (last residual " << e.lastResidual() << ")\n";
    return exitCodeFor(e.kind());
  } catch (const Error& e) {
    std::cerr << "error (" << toString(e.kind()) << "): " << e.what() << "\n";
    return exitCodeFor(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exitCodeFor(ErrorKind::Numerical);
  }
  return 0;
}
