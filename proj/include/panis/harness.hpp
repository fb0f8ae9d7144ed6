#pragma once

#include "panis/config.hpp"
#include "panis/container.hpp"
#include "panis/microstructure.hpp"
#include "panis/surrogate.hpp"
#include "panis/trainer.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace panis {

/// Material seen by the fine reference solver: the input image (nearest pixel)
/// or the underlying continuous field thresholded at the element centroids.
enum class ReferenceMaterial { Pixel, Continuous };

/// Every knob of one experiment. Presets fill it; a config file overrides it.
struct RunConfig {
  std::string preset = "desk-panis";
  SurrogateMode mode = SurrogateMode::Panis;
  std::string architecture = "desk-panis";

  // microstructure
  int grid = 33;
  double lengthScale = 0.25;
  int dx = 64;
  double volumeFraction = 0.5;
  double contrastRatio = 10.0;

  // residuals and coarse model
  int trialSide = 16;
  int weightSide = 9;
  int coarseCells = 8;
  double source = 100.0;
  BoundaryCondition bc = BoundaryCondition::constant(0.0);
  double alpha = 0.0;
  double uBar = 5.0;
  NewtonOptions newton;

  SurrogateOptions surrogate;
  TrainConfig train;
  bool fluctuations = true;  // mPANIS: off freezes every atom fluctuation at zero
  std::string warmStart;      // checkpoint whose psi seeds training
  int bnRecalibration = 32;   // batches for the final batch-norm statistics; 0 keeps the running ones

  // validation
  int validationCount = 100;
  int referenceRefine = 4;
  ReferenceMaterial referenceMaterial = ReferenceMaterial::Pixel;
  std::uint64_t seed = 1;

  static RunConfig fromPreset(const std::string& name);
  static std::vector<std::string> presetNames();
  /// Starts from the preset named by `preset` (default desk-panis) and applies overrides.
  static RunConfig fromConfig(const KeyValueConfig& config);
  KeyValueConfig toConfig() const;
  std::string toText() const { return toConfig().toText(); }
  void validate() const;
};

/// Operators built once from a RunConfig.
struct Problem {
  RunConfig config;
  std::shared_ptr<const KleBasis> kle;
  MicrostructureSpec micro;
  std::shared_ptr<const TriMesh> mesh;
  std::shared_ptr<const ResidualEngine> engine;
  std::shared_ptr<const ProjectionOperators> projection;
  std::shared_ptr<const ConvNet> net;
  std::shared_ptr<Surrogate> surrogate;

  /// When `stored` is given its A and Aperp are reused instead of rebuilt.
  static Problem build(const RunConfig& config, const ProjectionOperators* stored = nullptr);
  ConstitutiveLaw law() const { return {config.alpha, config.uBar}; }
  ConstitutiveLaw law(double alpha) const { return {alpha, config.uBar}; }
};

struct Checkpoint {
  RunConfig config;
  Eigen::VectorXd psi;
  BatchNormBuffers buffers;
  std::vector<std::vector<double>> atoms;  // mPANIS inputs, in order
};

void saveCheckpoint(const std::string& path, const Problem& problem, const Checkpoint& checkpoint);
/// Loads the config and parameters and rebuilds the problem around the stored projection.
std::pair<Problem, Checkpoint> loadCheckpoint(const std::string& path);

struct ValidationSet {
  std::vector<FieldSample> inputs;
  std::vector<Eigen::MatrixXd> solutions;  // on the G x G pixel grid
  double volumeFraction = 0.5;
  BoundaryCondition bc;
  ConstitutiveLaw law;
  double worstResidual = 0.0;  // relative discrete residual of the reference solves
};

/// Fine P1 reference for one input on refine*(G-1) cells per side, solution
/// sampled at the pixel grid.
Eigen::MatrixXd referenceSolve(const Problem& problem, const MicrostructureSpec& micro, const FieldSample& input,
                               const BoundaryCondition& bc, const ConstitutiveLaw& law, double* relResidual = nullptr);

ValidationSet generateValidation(const Problem& problem, int count, double volumeFraction, const BoundaryCondition& bc,
                                 const ConstitutiveLaw& law, std::uint64_t seed);
void saveValidation(const std::string& path, const ValidationSet& data, const RunConfig& config);
ValidationSet loadValidation(const std::string& path);

/// Quadrature-weighted R^2 over a dataset. Throws when every reference is identical.
double rSquared(const std::vector<Eigen::MatrixXd>& refs, const std::vector<Eigen::MatrixXd>& means,
                const Eigen::MatrixXd& weights);
/// Mean relative L2 error; zero-norm references are skipped and counted.
double relL2(const std::vector<Eigen::MatrixXd>& refs, const std::vector<Eigen::MatrixXd>& means,
             const Eigen::MatrixXd& weights, std::vector<double>* perSample = nullptr, int* skipped = nullptr);
/// Fraction of grid points with lower <= ref <= upper.
double bandCoverage(const std::vector<Eigen::MatrixXd>& refs, const std::vector<PredictionBands>& bands);

struct EvalReport {
  double r2 = 0.0;
  double relL2 = 0.0;
  double coverage = 0.0;
  std::vector<double> perSample;
  int skipped = 0;
  std::vector<PredictionBands> bands;
  std::vector<Eigen::MatrixXd> references;  // after coarse projection for mPANIS
};

/// Closed-form bands on the pixel grid.
PredictionBands predictOn(const Problem& problem, const Checkpoint& checkpoint, const Eigen::MatrixXd& c,
                          const BoundaryCondition& bc, const ConstitutiveLaw& law);
/// mPANIS references are projected onto the coarse span A first.
Eigen::MatrixXd coarseProjectedReference(const Problem& problem, const Eigen::MatrixXd& solution);
EvalReport evaluate(const Problem& problem, const Checkpoint& checkpoint, const ValidationSet& data,
                    bool keepFields = false);

enum class SweepAxis { VolumeFraction, Boundary, Alpha };
SweepAxis parseSweepAxis(const std::string& text);
std::string toString(SweepAxis axis);
std::vector<std::string> defaultSweepValues(SweepAxis axis);

struct SweepRow {
  std::string value;
  double r2 = 0.0;
  double relL2 = 0.0;
  double coverage = 0.0;
  std::string error;  // non-empty when the cell failed
  std::vector<std::pair<std::string, double>> reference;  // published numbers, labelled
};

std::vector<SweepRow> sweep(const Problem& problem, const Checkpoint& checkpoint, SweepAxis axis,
                            const std::vector<std::string>& values, int count, std::uint64_t seed);
std::string formatSweep(SweepAxis axis, const std::vector<SweepRow>& rows);

/// Published full-scale numbers keyed by axis value, for side-by-side context.
std::vector<std::pair<std::string, double>> publishedReference(SurrogateMode mode, bool nonlinear, SweepAxis axis,
                                                          const std::string& value);
std::string publishedTables();

/// Trains from fresh parameters (or the warm start) with the configured presets.
TrainResult train(const Problem& problem, Rng& rng, const TraceCallback& onRow = nullptr,
                  std::vector<std::vector<double>>* atomsOut = nullptr);
/// The K atoms drawn from a dedicated stream of the seed.
std::vector<FieldSample> drawAtoms(const Problem& problem, int count, std::uint64_t seed);

void writeTraceCsv(const std::string& path, const std::vector<TraceRow>& trace);
/// Binary greyscale PGM with min-max scaling.
void writePgm(const std::string& path, const Eigen::MatrixXd& field);

/// Maximum relative error of the analytic ELBO gradient against central
/// differences over `coordinates` indices, randomness frozen.
struct GradCheck {
  double maxRelError = 0.0;
  std::vector<int> indices;
  std::vector<double> analytic, numeric;
};
GradCheck gradientCheck(const Problem& problem, const Eigen::VectorXd& psi, const BatchNormBuffers& buffers,
                        double alpha, int coordinates, std::uint64_t seed, double step = 1e-5);

}  // namespace panis
