#pragma once

#include "panis/microstructure.hpp"
#include "panis/surrogate.hpp"

#include <Eigen/Dense>

#include <functional>
#include <vector>

namespace panis {

struct AdamSettings {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Per-group rates; a negative value falls back to lr.
  double lrNet = -1.0;
  double lrCov = -1.0;
  double lrAtoms = -1.0;
  // Exponential decay of every rate to decayFinal * rate at the last step; 1 disables it.
  double decayFinal = 1.0;
};

/// ADAM ascent on a flat vector with one learning rate per index range.
class Adam {
 public:
  Adam(int size, const AdamSettings& settings);
  void setRate(int offset, int count, double lr);
  void ascend(Eigen::VectorXd& params, const Eigen::VectorXd& gradient);
  /// Multiplier applied to every rate from the next step on.
  void setScale(double scale) { scale_ = scale; }
  int steps() const noexcept { return t_; }

 private:
  AdamSettings s_;
  Eigen::VectorXd m_, v_, rate_;
  double scale_ = 1.0;
  int t_ = 0;
};

/// Linear ramp of the nonlinearity from 0 to alphaFinal over rampFraction of the run.
struct TemperSchedule {
  double alphaFinal = 0.0;
  double rampFraction = 0.5;
};
double temperAlpha(const TemperSchedule& schedule, int step, int maxSteps);

struct TrainConfig {
  double lambda = 1e4;
  int M = 100;
  int R = 8;
  double priorVariance = 1e16;
  AdamSettings adam;
  int maxSteps = 5000;
  int convergenceWindow = 200;
  double convergenceTol = 1e-3;
  TemperSchedule temper;
  double uBar = 5.0;
  BoundaryCondition bc = BoundaryCondition::constant(0.0);
  int maxRejected = 20;
};

/// Randomness of one ELBO estimate, frozen so it can be replayed.
struct Draws {
  std::vector<int> indices;  // M residual indices
  std::vector<int> batch;    // R input slots (atom ids for mPANIS)
  std::vector<Eigen::VectorXd> eps1, eps2;
};

Draws drawRandomness(const Surrogate& surrogate, int M, int R, int poolSize, Rng& rng);

struct ElboTerms {
  double elbo = 0.0;
  double residual = 0.0;
  double prior = 0.0;
  double entropy = 0.0;
  int clamps = 0;
};

struct ElboResult {
  ElboTerms terms;
  Eigen::VectorXd gradient;
};

/// (N / (M R)) sum_r sum_m |r_{j_m}(y_r)| given all N residuals of each sample.
double subsampledResidualSum(const std::vector<Eigen::VectorXd>& residuals, const std::vector<int>& indices);

/// Monte-Carlo ELBO and its gradient for the inputs selected by draws.batch.
/// pool holds the candidate inputs; for mPANIS pool[k] is atom k.
ElboResult elboEstimate(const Surrogate& surrogate, const Eigen::VectorXd& psi, BatchNormBuffers& buffers,
                        const std::vector<FieldSample>& pool, const Draws& draws, const TrainConfig& config,
                        const ConstitutiveLaw& law, bool withGradient = true);

struct TraceRow {
  int step = 0;
  double elbo = 0.0, residual = 0.0, prior = 0.0, entropy = 0.0;
  int clamps = 0;
  double alpha = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  Eigen::VectorXd psi;
  BatchNormBuffers buffers;
  std::vector<TraceRow> trace;
  int steps = 0;
  bool converged = false;
  bool diverged = false;
  int rejected = 0;
};

using InputSource = std::function<std::vector<FieldSample>(int count, Rng& rng)>;
using TraceCallback = std::function<void(const TraceRow&)>;

/// PANIS training: fresh inputs from p(x) every step.
TrainResult trainPanis(const Surrogate& surrogate, Eigen::VectorXd psi, BatchNormBuffers buffers,
                       const TrainConfig& config, const InputSource& source, Rng& rng,
                       const TraceCallback& onRow = nullptr);

/// mPANIS training: a fixed atom set, subsampled every step.
TrainResult trainMpanis(const Surrogate& surrogate, Eigen::VectorXd psi, BatchNormBuffers buffers,
                        const TrainConfig& config, const std::vector<FieldSample>& atoms, Rng& rng,
                        const TraceCallback& onRow = nullptr);

/// Exact average of train-mode batch statistics over the given input batches
/// (variance made unbiased), replacing the momentum estimate before evaluation.
BatchNormBuffers recalibrateBatchNorm(const ConvNet& net, const Eigen::VectorXd& netParams,
                                      const std::vector<std::vector<Eigen::MatrixXd>>& batches);

/// Least-squares slope of the ELBO trace against the step index.
double traceSlope(const std::vector<TraceRow>& trace, std::size_t skip = 0);

}  // namespace panis
