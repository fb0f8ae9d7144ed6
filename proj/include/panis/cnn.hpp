#pragma once

#include "panis/random.hpp"

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace panis {

enum class LayerKind { Conv, Deconv, AvgPool, BatchNorm, Softplus };

struct LayerSpec {
  LayerKind kind = LayerKind::Softplus;
  int kernel = 0;
  int stride = 1;
  int padding = 0;
  int outChannels = 0;  // conv and deconv only
};

struct Architecture {
  std::string name;
  int inputSize = 129;
  std::vector<LayerSpec> layers;
  double outputFloor = 1e-6;  // X = softplus(last) + floor
  bool positiveOutput = true;
};

/// Full-scale nets: 129 -> 17 (PANIS) and 129 -> 9 (mPANIS).
Architecture panisArchitecture();
Architecture mpanisArchitecture();
/// Reduced nets for small grids: 33 -> 9 and 65 -> 9.
Architecture deskPanisArchitecture();
Architecture deskMpanisArchitecture();

struct LayerInfo {
  std::string name;  // e.g. "conv1", "bn2"
  LayerKind kind;
  int inChannels = 0, inSize = 0;
  int outChannels = 0, outSize = 0;
  int paramOffset = 0, paramCount = 0;
  int weightCount = 0;  // conv/deconv weights, or batch-norm scales
  int statOffset = -1;  // batch-norm running statistics slot
};

/// Non-trainable batch-norm state.
struct BatchNormBuffers {
  Eigen::VectorXd runningMean;
  Eigen::VectorXd runningVar;
};

enum class NetMode { Train, Eval };

class ConvNet;

/// Activations recorded by a forward pass; consumed by exactly one backward.
class Tape {
 public:
  const std::vector<Eigen::MatrixXd>& outputs() const noexcept { return outputs_; }
  bool consumed() const noexcept { return consumed_; }

 private:
  friend class ConvNet;
  int batch_ = 0;
  NetMode mode_ = NetMode::Train;
  std::vector<std::vector<double>> inputs_;  // per layer
  std::vector<std::vector<double>> xhat_;    // per layer, batch norm only
  std::vector<Eigen::VectorXd> invStd_;
  std::vector<Eigen::VectorXd> batchMean_;
  std::vector<Eigen::VectorXd> batchVar_;
  std::vector<double> preFloor_;
  std::vector<Eigen::MatrixXd> outputs_;
  bool consumed_ = false;
};

class ConvNet {
 public:
  explicit ConvNet(Architecture arch);

  const Architecture& architecture() const noexcept { return arch_; }
  const std::vector<LayerInfo>& layers() const noexcept { return info_; }
  int parameterCount() const noexcept { return paramCount_; }
  int outputSize() const noexcept { return info_.back().outSize; }
  int inputSize() const noexcept { return arch_.inputSize; }
  double batchNormEps() const noexcept { return 1e-5; }
  double batchNormMomentum() const noexcept { return 0.1; }

  Eigen::VectorXd initXavier(Rng& rng) const;
  BatchNormBuffers initBuffers() const;

  /// Train mode normalizes with batch statistics and, if buffers are given,
  /// updates the running averages. Eval mode reads the buffers.
  Tape forward(const Eigen::VectorXd& params, const std::vector<Eigen::MatrixXd>& inputs, NetMode mode,
               BatchNormBuffers* buffers) const;

  /// Gradient with respect to the parameters only.
  Eigen::VectorXd backward(Tape& tape, const Eigen::VectorXd& params, const std::vector<Eigen::MatrixXd>& dOutputs) const;

  /// Batch statistics of a train-mode tape (biased variance).
  BatchNormBuffers batchStatistics(const Tape& tape) const;

 private:
  Architecture arch_;
  std::vector<LayerInfo> info_;
  int paramCount_ = 0;
  int statCount_ = 0;
};

double softplus(double x);
double sigmoid(double x);

}  // namespace panis
