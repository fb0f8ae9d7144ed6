#include "panis/trainer.hpp"

#include "panis/error.hpp"

#include <chrono>
#include <cmath>
#include <string>

namespace panis {

Adam::Adam(int size, const AdamSettings& settings)
    : s_(settings),
      m_(Eigen::VectorXd::Zero(size)),
      v_(Eigen::VectorXd::Zero(size)),
      rate_(Eigen::VectorXd::Constant(size, settings.lr)) {}

void Adam::setRate(int offset, int count, double lr) {
  if (lr >= 0.0 && count > 0) rate_.segment(offset, count).setConstant(lr);
}

void Adam::ascend(Eigen::VectorXd& params, const Eigen::VectorXd& g) {
  ++t_;
  m_ = s_.beta1 * m_ + (1.0 - s_.beta1) * g;
  v_ = s_.beta2 * v_ + (1.0 - s_.beta2) * g.cwiseProduct(g);
  const double c1 = 1.0 - std::pow(s_.beta1, t_);
  const double c2 = 1.0 - std::pow(s_.beta2, t_);
  params.array() += scale_ * rate_.array() * (m_.array() / c1) / ((v_.array() / c2).sqrt() + s_.eps);
}

double temperAlpha(const TemperSchedule& schedule, int step, int maxSteps) {
  if (schedule.alphaFinal == 0.0) return 0.0;
  const double ramp = schedule.rampFraction * std::max(maxSteps - 1, 1);
  if (ramp <= 0.0) return schedule.alphaFinal;
  return schedule.alphaFinal * std::min(1.0, static_cast<double>(step) / ramp);
}

Draws drawRandomness(const Surrogate& surrogate, int M, int R, int poolSize, Rng& rng) {
  if (R < 1 || poolSize < 1) fail(ErrorKind::Config, "need at least one sample per step");
  Draws d;
  d.indices = subsampleResiduals(surrogate.context().engine->weightCount(), M, rng);
  const bool multiscale = surrogate.options().mode == SurrogateMode::Mpanis;
  std::uniform_int_distribution<int> pick(0, poolSize - 1);
  const int d2 = multiscale ? surrogate.coarseDimension() : surrogate.fineDimension();
  for (int r = 0; r < R; ++r) {
    d.batch.push_back(multiscale ? pick(rng) : r % poolSize);
    d.eps1.push_back(standardNormalVector(rng, surrogate.layout().lCols));
    d.eps2.push_back(standardNormalVector(rng, d2));
  }
  return d;
}

double subsampledResidualSum(const std::vector<Eigen::VectorXd>& residuals, const std::vector<int>& indices) {
  if (residuals.empty() || indices.empty()) fail(ErrorKind::Domain, "empty residual sample");
  const double n = static_cast<double>(residuals.front().size());
  double acc = 0.0;
  for (const Eigen::VectorXd& r : residuals)
    for (int j : indices) acc += std::abs(r[j]);
  return n / (static_cast<double>(indices.size()) * static_cast<double>(residuals.size())) * acc;
}

ElboResult elboEstimate(const Surrogate& surrogate, const Eigen::VectorXd& psi, BatchNormBuffers& buffers,
                        const std::vector<FieldSample>& pool, const Draws& draws, const TrainConfig& config,
                        const ConstitutiveLaw& law, bool withGradient) {
  const SurrogateContext& ctx = surrogate.context();
  const ParameterLayout& lay = surrogate.layout();
  const bool multiscale = surrogate.options().mode == SurrogateMode::Mpanis;
  const int R = static_cast<int>(draws.batch.size());
  const int N = ctx.engine->weightCount();
  const int M = static_cast<int>(draws.indices.size());
  if (!(config.lambda > 0.0) || !(config.priorVariance > 0.0)) fail(ErrorKind::Config, "lambda and the prior variance must be positive");

  std::vector<Eigen::MatrixXd> inputs;
  for (int b : draws.batch) inputs.push_back(pool.at(static_cast<std::size_t>(b)).c);
  MeanBatch mean = surrogate.meanSolve(psi, buffers, inputs, config.bc, law, NetMode::Train);

  ResidualProblem problem;
  problem.law = law;
  problem.source = ctx.source;

  const double sigma = std::exp(surrogate.logSigma(psi));
  const double scale = config.lambda * N / (static_cast<double>(M) * R);
  const double priorScale = 1.0 / (R * config.priorVariance);
  const Eigen::MatrixXd& A = ctx.projection->A();

  ElboResult out;
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(lay.total);
  Eigen::Map<Eigen::MatrixXd> gL(grad.data() + lay.lOffset, lay.lRows, lay.lCols);
  std::vector<Eigen::MatrixXd> dX(static_cast<std::size_t>(R));
  std::vector<Eigen::VectorXd> allResiduals;
  double priorSum = 0.0;

  for (int r = 0; r < R; ++r) {
    const auto ri = static_cast<std::size_t>(r);
    const int atomId = multiscale ? draws.batch[ri] : -1;
    const PosteriorSample s =
        surrogate.samplePosterior(psi, mean, r, config.bc, law, draws.eps1[ri], draws.eps2[ri], atomId);
    out.terms.clamps += s.clampCount;
    const Eigen::MatrixXd& c = inputs[ri];
    const Eigen::VectorXd res = ctx.engine->residuals(s.y, c, problem);
    if (!res.allFinite()) fail(ErrorKind::Numerical, "non-finite residual in sample " + std::to_string(r));
    allResiduals.push_back(res);
    priorSum += s.y.squaredNorm() + (multiscale ? s.yfPrime.squaredNorm() : 0.0);
    if (!withGradient) continue;

    Eigen::VectorXd dLdr = Eigen::VectorXd::Zero(N);
    for (int j : draws.indices) dLdr[j] += -scale * (res[j] > 0.0 ? 1.0 : (res[j] < 0.0 ? -1.0 : 0.0));
    const Eigen::VectorXd gy = ctx.engine->residualsVjp(s.y, c, problem, dLdr) - priorScale * s.y;
    const Eigen::VectorXd gY = A.transpose() * gy;
    Eigen::VectorXd gX;
    if (!multiscale) {
      gX = adjointGradient(mean.models[ri], law, mean.solutions[ri], gY);
      if (lay.lRows == surrogate.fineDimension()) {
        gL += gy * draws.eps1[ri].transpose();
      } else {
        gL += gY * draws.eps1[ri].transpose();
      }
      grad[lay.logSigmaOffset] += sigma * draws.eps2[ri].dot(gy);
    } else {
      gX = adjointGradient(s.model, law, s.solution, gY);
      for (Eigen::Index i = 0; i < gX.size(); ++i)
        if (s.clamped[static_cast<std::size_t>(i)]) gX[i] = 0.0;
      gL += gX * draws.eps1[ri].transpose();
      grad[lay.logSigmaOffset] += sigma * draws.eps2[ri].dot(gX);
      const Eigen::VectorXd ga =
          (surrogate.complement().transpose() * gy - priorScale * s.yfPrime).cwiseProduct(surrogate.complementMask());
      grad.segment(lay.atomsOffset + atomId * lay.atomDim, lay.atomDim) += ga;
    }
    const TriMesh& mesh = *ctx.mesh;
    Eigen::MatrixXd g(mesh.nodesPerSide(), mesh.nodesPerSide());
    for (int i = 0; i < mesh.nodesPerSide(); ++i)
      for (int j = 0; j < mesh.nodesPerSide(); ++j) g(i, j) = gX[mesh.nodeIndex(i, j)];
    dX[ri] = std::move(g);
  }

  const EntropyValue h = surrogate.entropy(psi);
  out.terms.residual = -config.lambda * subsampledResidualSum(allResiduals, draws.indices);
  out.terms.prior = -0.5 * priorScale * priorSum;
  out.terms.entropy = h.value;
  out.terms.elbo = out.terms.residual + out.terms.prior + out.terms.entropy;

  if (withGradient) {
    const Eigen::VectorXd net = psi.head(lay.netCount);
    grad.head(lay.netCount) = ctx.net->backward(mean.tape, net, dX);
    gL += h.dL;
    grad[lay.logSigmaOffset] += h.dLogSigma;
    out.gradient = std::move(grad);
  }
  return out;
}

namespace {

using PoolProvider = std::function<const std::vector<FieldSample>&(Rng&)>;

TrainResult runTraining(const Surrogate& surrogate, Eigen::VectorXd psi, BatchNormBuffers buffers,
                        const TrainConfig& config, const PoolProvider& provider, int poolSize, Rng& rng,
                        const TraceCallback& onRow) {
  if (config.maxSteps < 1) fail(ErrorKind::Config, "maxSteps must be positive");
  if (config.convergenceWindow < 1) fail(ErrorKind::Config, "convergence window must be positive");
  const ParameterLayout& lay = surrogate.layout();
  if (psi.size() != lay.total) fail(ErrorKind::Contract, "initial parameters have the wrong length");
  Adam adam(lay.total, config.adam);
  adam.setRate(0, lay.netCount, config.adam.lrNet);
  adam.setRate(lay.lOffset, lay.lRows * lay.lCols + 1, config.adam.lrCov);
  adam.setRate(lay.atomsOffset, lay.atomDim * lay.atomCount, config.adam.lrAtoms);

  TrainResult result;
  const auto start = std::chrono::steady_clock::now();
  double windowSum = 0.0, previousMean = 0.0;
  int windowCount = 0, windows = 0, flat = 0, rejectedRun = 0;
  Eigen::VectorXd lastGood = psi;
  BatchNormBuffers lastGoodBuffers = buffers;

  for (int step = 0; step < config.maxSteps; ++step) {
    const double alpha = temperAlpha(config.temper, step, config.maxSteps);
    const ConstitutiveLaw law{alpha, config.uBar};
    const std::vector<FieldSample>& pool = provider(rng);
    const Draws draws = drawRandomness(surrogate, config.M, config.R, poolSize, rng);
    ElboResult est;
    BatchNormBuffers trial = buffers;
    bool ok = true;
    try {
      est = elboEstimate(surrogate, psi, trial, pool, draws, config, law, true);
      ok = std::isfinite(est.terms.elbo) && est.gradient.allFinite();
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Numerical && e.kind() != ErrorKind::NonConvergence && e.kind() != ErrorKind::Domain) throw;
      ok = false;
    }
    if (!ok) {
      ++result.rejected;
      if (++rejectedRun >= config.maxRejected) {
        result.diverged = true;
        psi = lastGood;
        buffers = lastGoodBuffers;
        break;
      }
      continue;
    }
    rejectedRun = 0;
    lastGood = psi;
    lastGoodBuffers = buffers;
    buffers = std::move(trial);
    if (config.adam.decayFinal != 1.0) {
      adam.setScale(std::pow(config.adam.decayFinal, static_cast<double>(step) / std::max(config.maxSteps - 1, 1)));
    }
    adam.ascend(psi, est.gradient);

    TraceRow row;
    row.step = step;
    row.elbo = est.terms.elbo;
    row.residual = est.terms.residual;
    row.prior = est.terms.prior;
    row.entropy = est.terms.entropy;
    row.clamps = est.terms.clamps;
    row.alpha = alpha;
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.trace.push_back(row);
    if (onRow) onRow(row);
    result.steps = step + 1;

    windowSum += row.elbo;
    if (++windowCount == config.convergenceWindow) {
      const double m = windowSum / windowCount;
      // Only judge convergence once tempering has finished.
      if (windows > 0 && alpha == config.temper.alphaFinal) {
        const double rel = (m - previousMean) / std::max(std::abs(previousMean), 1e-300);
        flat = rel < config.convergenceTol ? flat + 1 : 0;
        if (flat >= 2) {
          result.converged = true;
          break;
        }
      }
      previousMean = m;
      ++windows;
      windowSum = 0.0;
      windowCount = 0;
    }
  }
  result.psi = std::move(psi);
  result.buffers = std::move(buffers);
  return result;
}

}  // namespace

TrainResult trainPanis(const Surrogate& surrogate, Eigen::VectorXd psi, BatchNormBuffers buffers,
                       const TrainConfig& config, const InputSource& source, Rng& rng, const TraceCallback& onRow) {
  if (surrogate.options().mode != SurrogateMode::Panis) fail(ErrorKind::Config, "trainPanis needs a PANIS surrogate");
  std::vector<FieldSample> pool;
  const PoolProvider provider = [&](Rng& g) -> const std::vector<FieldSample>& {
    pool = source(config.R, g);
    return pool;
  };
  return runTraining(surrogate, std::move(psi), std::move(buffers), config, provider, config.R, rng, onRow);
}

TrainResult trainMpanis(const Surrogate& surrogate, Eigen::VectorXd psi, BatchNormBuffers buffers,
                        const TrainConfig& config, const std::vector<FieldSample>& atoms, Rng& rng,
                        const TraceCallback& onRow) {
  if (surrogate.options().mode != SurrogateMode::Mpanis) fail(ErrorKind::Config, "trainMpanis needs an mPANIS surrogate");
  if (static_cast<int>(atoms.size()) != surrogate.layout().atomCount) fail(ErrorKind::Config, "atom count mismatch");
  for (std::size_t k = 0; k < atoms.size(); ++k) {
    if (surrogate.atomIndex(atoms[k].x) != static_cast<int>(k)) fail(ErrorKind::Contract, "atoms are not registered in order");
  }
  const PoolProvider provider = [&](Rng&) -> const std::vector<FieldSample>& { return atoms; };
  return runTraining(surrogate, std::move(psi), std::move(buffers), config, provider,
                     static_cast<int>(atoms.size()), rng, onRow);
}

BatchNormBuffers recalibrateBatchNorm(const ConvNet& net, const Eigen::VectorXd& netParams,
                                      const std::vector<std::vector<Eigen::MatrixXd>>& batches) {
  if (batches.empty()) fail(ErrorKind::Contract, "recalibration needs at least one batch");
  BatchNormBuffers acc = net.initBuffers();
  acc.runningMean.setZero();
  acc.runningVar.setZero();
  for (const auto& batch : batches) {
    if (batch.size() < 2) fail(ErrorKind::Contract, "recalibration batches need at least two inputs");
    BatchNormBuffers scratch = net.initBuffers();
    const Tape tape = net.forward(netParams, batch, NetMode::Train, &scratch);
    const BatchNormBuffers stats = net.batchStatistics(tape);
    acc.runningMean += stats.runningMean;
    for (const LayerInfo& li : net.layers()) {
      if (li.kind != LayerKind::BatchNorm) continue;
      const double n = static_cast<double>(batch.size()) * li.outSize * li.outSize;
      acc.runningVar.segment(li.statOffset, li.outChannels) +=
          stats.runningVar.segment(li.statOffset, li.outChannels) * (n / (n - 1.0));
    }
  }
  acc.runningMean /= static_cast<double>(batches.size());
  acc.runningVar /= static_cast<double>(batches.size());
  return acc;
}

double traceSlope(const std::vector<TraceRow>& trace, std::size_t skip) {
  if (trace.size() <= skip + 1) return 0.0;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(trace.size() - skip);
  for (std::size_t i = skip; i < trace.size(); ++i) {
    const double x = trace[i].step, y = trace[i].elbo;
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace panis
