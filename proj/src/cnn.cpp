#include "panis/cnn.hpp"

#include "panis/error.hpp"

#include <cmath>
#include <string>

namespace panis {

namespace {

LayerSpec conv(int k, int s, int p, int out) { return {LayerKind::Conv, k, s, p, out}; }
LayerSpec deconv(int k, int s, int p, int out) { return {LayerKind::Deconv, k, s, p, out}; }
LayerSpec pool(int k, int s) { return {LayerKind::AvgPool, k, s, 0, 0}; }
LayerSpec bn() { return {LayerKind::BatchNorm, 0, 1, 0, 0}; }
LayerSpec act() { return {LayerKind::Softplus, 0, 1, 0, 0}; }

const char* kindName(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Deconv: return "deconv";
    case LayerKind::AvgPool: return "pool";
    case LayerKind::BatchNorm: return "bn";
    case LayerKind::Softplus: return "softplus";
  }
  return "layer";
}

inline std::size_t at(int n, int c, int y, int x, int channels, int size) {
  return ((static_cast<std::size_t>(n) * channels + c) * size + y) * size + x;
}

}  // namespace

Architecture panisArchitecture() {
  return {"panis", 129,
          {conv(3, 2, 1, 8), act(), bn(), pool(2, 2), conv(3, 1, 1, 24), act(), bn(), pool(2, 2),
           deconv(4, 1, 1, 8), act(), bn(), deconv(3, 1, 1, 1)}};
}

Architecture mpanisArchitecture() {
  return {"mpanis", 129,
          {conv(3, 1, 1, 8), act(), bn(), pool(4, 4), conv(3, 1, 1, 16), act(), bn(), pool(2, 2),
           conv(3, 1, 1, 32), act(), bn(), pool(2, 2), deconv(3, 1, 1, 16), act(), bn(), deconv(4, 1, 1, 8),
           act(), bn(), deconv(3, 1, 1, 1)}};
}

Architecture deskPanisArchitecture() {
  return {"desk-panis", 33,
          {conv(3, 2, 1, 8), act(), bn(), pool(2, 2), conv(3, 1, 1, 24), act(), bn(), deconv(4, 1, 1, 8), act(),
           bn(), deconv(3, 1, 1, 1)}};
}

Architecture deskMpanisArchitecture() {
  return {"desk-mpanis", 65,
          {conv(3, 1, 1, 8), act(), bn(), pool(4, 4), conv(3, 1, 1, 16), act(), bn(), pool(2, 2),
           conv(3, 1, 1, 32), act(), bn(), deconv(3, 1, 1, 16), act(), bn(), deconv(4, 1, 1, 8), act(), bn(),
           deconv(3, 1, 1, 1)}};
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

ConvNet::ConvNet(Architecture arch) : arch_(std::move(arch)) {
  if (arch_.layers.empty()) fail(ErrorKind::Architecture, "network has no layers");
  int channels = 1, size = arch_.inputSize;
  int counts[5] = {0, 0, 0, 0, 0};
  for (std::size_t l = 0; l < arch_.layers.size(); ++l) {
    const LayerSpec& s = arch_.layers[l];
    LayerInfo li;
    li.kind = s.kind;
    li.name = std::string(kindName(s.kind)) + std::to_string(++counts[static_cast<int>(s.kind)]);
    li.inChannels = channels;
    li.inSize = size;
    li.paramOffset = paramCount_;
    switch (s.kind) {
      case LayerKind::Conv:
        if (s.kernel < 1 || s.stride < 1 || s.outChannels < 1) fail(ErrorKind::Architecture, li.name + ": bad spec");
        li.outChannels = s.outChannels;
        li.outSize = (size + 2 * s.padding - s.kernel) / s.stride + 1;
        li.weightCount = s.kernel * s.kernel * channels * s.outChannels;
        li.paramCount = li.weightCount + s.outChannels;
        break;
      case LayerKind::Deconv:
        if (s.kernel < 1 || s.stride < 1 || s.outChannels < 1) fail(ErrorKind::Architecture, li.name + ": bad spec");
        li.outChannels = s.outChannels;
        li.outSize = (size - 1) * s.stride - 2 * s.padding + s.kernel;
        li.weightCount = s.kernel * s.kernel * channels * s.outChannels;
        li.paramCount = li.weightCount + s.outChannels;
        break;
      case LayerKind::AvgPool:
        if (s.kernel < 1 || s.stride < 1) fail(ErrorKind::Architecture, li.name + ": bad spec");
        li.outChannels = channels;
        li.outSize = (size - s.kernel) / s.stride + 1;
        break;
      case LayerKind::BatchNorm:
        li.outChannels = channels;
        li.outSize = size;
        li.weightCount = channels;
        li.paramCount = 2 * channels;
        li.statOffset = statCount_;
        statCount_ += channels;
        break;
      case LayerKind::Softplus:
        li.outChannels = channels;
        li.outSize = size;
        break;
    }
    if (li.outSize < 1) {
      fail(ErrorKind::Architecture, li.name + " maps " + std::to_string(size) + "x" + std::to_string(size) +
                                        " to an empty output");
    }
    channels = li.outChannels;
    size = li.outSize;
    paramCount_ += li.paramCount;
    info_.push_back(li);
  }
  if (channels != 1) {
    fail(ErrorKind::Architecture, info_.back().name + " emits " + std::to_string(channels) +
                                      " feature maps; the output must be a single map");
  }
}

Eigen::VectorXd ConvNet::initXavier(Rng& rng) const {
  Eigen::VectorXd p = Eigen::VectorXd::Zero(paramCount_);
  for (std::size_t l = 0; l < info_.size(); ++l) {
    const LayerInfo& li = info_[l];
    const LayerSpec& s = arch_.layers[l];
    if (li.kind == LayerKind::Conv || li.kind == LayerKind::Deconv) {
      const double k2 = static_cast<double>(s.kernel) * s.kernel;
      const double bound = std::sqrt(6.0 / (k2 * li.inChannels + k2 * li.outChannels));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (int i = 0; i < li.weightCount; ++i) p[li.paramOffset + i] = u(rng);
    } else if (li.kind == LayerKind::BatchNorm) {
      p.segment(li.paramOffset, li.weightCount).setOnes();
    }
  }
  return p;
}

BatchNormBuffers ConvNet::initBuffers() const {
  return {Eigen::VectorXd::Zero(statCount_), Eigen::VectorXd::Ones(statCount_)};
}

Tape ConvNet::forward(const Eigen::VectorXd& params, const std::vector<Eigen::MatrixXd>& inputs, NetMode mode,
                      BatchNormBuffers* buffers) const {
  if (params.size() != paramCount_) {
    fail(ErrorKind::Architecture, "parameter vector has length " + std::to_string(params.size()) + ", network " +
                                      arch_.name + " expects " + std::to_string(paramCount_));
  }
  if (inputs.empty()) fail(ErrorKind::Contract, "empty input batch");
  if (mode == NetMode::Eval && !buffers) fail(ErrorKind::Contract, "eval mode needs batch-norm running statistics");
  const int nb = static_cast<int>(inputs.size());
  Tape tape;
  tape.batch_ = nb;
  tape.mode_ = mode;
  const std::size_t nl = info_.size();
  tape.inputs_.resize(nl);
  tape.xhat_.resize(nl);
  tape.invStd_.resize(nl);
  tape.batchMean_.resize(nl);
  tape.batchVar_.resize(nl);

  std::vector<double> cur(static_cast<std::size_t>(nb) * arch_.inputSize * arch_.inputSize);
  for (int n = 0; n < nb; ++n) {
    const Eigen::MatrixXd& c = inputs[static_cast<std::size_t>(n)];
    if (c.rows() != arch_.inputSize || c.cols() != arch_.inputSize) {
      fail(ErrorKind::Architecture, "input of " + arch_.name + " must be " + std::to_string(arch_.inputSize) + "x" +
                                        std::to_string(arch_.inputSize) + ", got " + std::to_string(c.rows()) + "x" +
                                        std::to_string(c.cols()));
    }
    for (int y = 0; y < arch_.inputSize; ++y)
      for (int x = 0; x < arch_.inputSize; ++x) cur[at(n, 0, y, x, 1, arch_.inputSize)] = c(y, x);
  }

  for (std::size_t l = 0; l < nl; ++l) {
    const LayerInfo& li = info_[l];
    const LayerSpec& s = arch_.layers[l];
    const int ci = li.inChannels, si = li.inSize, co = li.outChannels, so = li.outSize;
    std::vector<double> out(static_cast<std::size_t>(nb) * co * so * so, 0.0);
    const double* w = params.data() + li.paramOffset;
    switch (li.kind) {
      case LayerKind::Conv: {
        const int k = s.kernel;
        const double* bias = w + li.weightCount;
        for (int n = 0; n < nb; ++n)
          for (int o = 0; o < co; ++o)
            for (int oy = 0; oy < so; ++oy)
              for (int ox = 0; ox < so; ++ox) {
                double acc = bias[o];
                for (int i = 0; i < ci; ++i)
                  for (int ky = 0; ky < k; ++ky) {
                    const int iy = oy * s.stride - s.padding + ky;
                    if (iy < 0 || iy >= si) continue;
                    for (int kx = 0; kx < k; ++kx) {
                      const int ix = ox * s.stride - s.padding + kx;
                      if (ix < 0 || ix >= si) continue;
                      acc += w[((o * ci + i) * k + ky) * k + kx] * cur[at(n, i, iy, ix, ci, si)];
                    }
                  }
                out[at(n, o, oy, ox, co, so)] = acc;
              }
        break;
      }
      case LayerKind::Deconv: {
        const int k = s.kernel;
        const double* bias = w + li.weightCount;
        for (int n = 0; n < nb; ++n) {
          for (int o = 0; o < co; ++o)
            for (int p = 0; p < so * so; ++p) out[at(n, o, 0, 0, co, so) + static_cast<std::size_t>(p)] = bias[o];
          for (int i = 0; i < ci; ++i)
            for (int iy = 0; iy < si; ++iy)
              for (int ix = 0; ix < si; ++ix) {
                const double v = cur[at(n, i, iy, ix, ci, si)];
                for (int o = 0; o < co; ++o)
                  for (int ky = 0; ky < k; ++ky) {
                    const int oy = iy * s.stride - s.padding + ky;
                    if (oy < 0 || oy >= so) continue;
                    for (int kx = 0; kx < k; ++kx) {
                      const int ox = ix * s.stride - s.padding + kx;
                      if (ox < 0 || ox >= so) continue;
                      out[at(n, o, oy, ox, co, so)] += w[((i * co + o) * k + ky) * k + kx] * v;
                    }
                  }
              }
        }
        break;
      }
      case LayerKind::AvgPool: {
        const int k = s.kernel;
        const double inv = 1.0 / (k * k);
        for (int n = 0; n < nb; ++n)
          for (int c = 0; c < co; ++c)
            for (int oy = 0; oy < so; ++oy)
              for (int ox = 0; ox < so; ++ox) {
                double acc = 0.0;
                for (int ky = 0; ky < k; ++ky)
                  for (int kx = 0; kx < k; ++kx) acc += cur[at(n, c, oy * s.stride + ky, ox * s.stride + kx, ci, si)];
                out[at(n, c, oy, ox, co, so)] = acc * inv;
              }
        break;
      }
      case LayerKind::BatchNorm: {
        const double* gamma = w;
        const double* beta = w + co;
        const double m = static_cast<double>(nb) * so * so;
        Eigen::VectorXd mean(co), var(co), inv(co);
        std::vector<double> xhat(out.size());
        for (int c = 0; c < co; ++c) {
          if (mode == NetMode::Train) {
            double s1 = 0.0;
            for (int n = 0; n < nb; ++n)
              for (int p = 0; p < so * so; ++p) s1 += cur[at(n, c, 0, 0, co, so) + static_cast<std::size_t>(p)];
            const double mu = s1 / m;
            double s2 = 0.0;
            for (int n = 0; n < nb; ++n)
              for (int p = 0; p < so * so; ++p) {
                const double d = cur[at(n, c, 0, 0, co, so) + static_cast<std::size_t>(p)] - mu;
                s2 += d * d;
              }
            mean[c] = mu;
            var[c] = s2 / m;
            if (buffers) {
              const double mom = batchNormMomentum();
              const double unbiased = m > 1.0 ? var[c] * m / (m - 1.0) : var[c];
              buffers->runningMean[li.statOffset + c] = (1.0 - mom) * buffers->runningMean[li.statOffset + c] + mom * mu;
              buffers->runningVar[li.statOffset + c] =
                  (1.0 - mom) * buffers->runningVar[li.statOffset + c] + mom * unbiased;
            }
          } else {
            mean[c] = buffers->runningMean[li.statOffset + c];
            var[c] = buffers->runningVar[li.statOffset + c];
          }
          inv[c] = 1.0 / std::sqrt(var[c] + batchNormEps());
          for (int n = 0; n < nb; ++n)
            for (int p = 0; p < so * so; ++p) {
              const std::size_t idx = at(n, c, 0, 0, co, so) + static_cast<std::size_t>(p);
              xhat[idx] = (cur[idx] - mean[c]) * inv[c];
              out[idx] = gamma[c] * xhat[idx] + beta[c];
            }
        }
        tape.xhat_[l] = std::move(xhat);
        tape.invStd_[l] = inv;
        tape.batchMean_[l] = mean;
        tape.batchVar_[l] = var;
        break;
      }
      case LayerKind::Softplus:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = softplus(cur[i]);
        break;
    }
    tape.inputs_[l] = std::move(cur);
    cur = std::move(out);
  }

  const int so = outputSize();
  tape.preFloor_ = cur;
  tape.outputs_.resize(static_cast<std::size_t>(nb));
  for (int n = 0; n < nb; ++n) {
    Eigen::MatrixXd x(so, so);
    for (int y = 0; y < so; ++y)
      for (int xx = 0; xx < so; ++xx) {
        const double v = cur[at(n, 0, y, xx, 1, so)];
        x(y, xx) = arch_.positiveOutput ? softplus(v) + arch_.outputFloor : v;
      }
    tape.outputs_[static_cast<std::size_t>(n)] = std::move(x);
  }
  return tape;
}

Eigen::VectorXd ConvNet::backward(Tape& tape, const Eigen::VectorXd& params,
                                  const std::vector<Eigen::MatrixXd>& dOutputs) const {
  if (tape.consumed_) fail(ErrorKind::Contract, "tape was already consumed by a backward pass");
  tape.consumed_ = true;
  const int nb = tape.batch_;
  if (static_cast<int>(dOutputs.size()) != nb) fail(ErrorKind::Contract, "output cotangent batch size mismatch");
  const int so0 = outputSize();
  std::vector<double> g(static_cast<std::size_t>(nb) * so0 * so0);
  for (int n = 0; n < nb; ++n) {
    const Eigen::MatrixXd& d = dOutputs[static_cast<std::size_t>(n)];
    if (d.rows() != so0 || d.cols() != so0) fail(ErrorKind::Contract, "output cotangent shape mismatch");
    for (int y = 0; y < so0; ++y)
      for (int x = 0; x < so0; ++x) {
        const std::size_t idx = at(n, 0, y, x, 1, so0);
        g[idx] = arch_.positiveOutput ? d(y, x) * sigmoid(tape.preFloor_[idx]) : d(y, x);
      }
  }

  Eigen::VectorXd grad = Eigen::VectorXd::Zero(paramCount_);
  for (std::size_t l = info_.size(); l-- > 0;) {
    const LayerInfo& li = info_[l];
    const LayerSpec& s = arch_.layers[l];
    const int ci = li.inChannels, si = li.inSize, co = li.outChannels, so = li.outSize;
    const std::vector<double>& in = tape.inputs_[l];
    const bool needInput = l > 0;
    std::vector<double> gin(needInput ? in.size() : 0, 0.0);
    const double* w = params.data() + li.paramOffset;
    double* gw = grad.data() + li.paramOffset;
    switch (li.kind) {
      case LayerKind::Conv: {
        const int k = s.kernel;
        double* gb = gw + li.weightCount;
        for (int n = 0; n < nb; ++n)
          for (int o = 0; o < co; ++o)
            for (int oy = 0; oy < so; ++oy)
              for (int ox = 0; ox < so; ++ox) {
                const double d = g[at(n, o, oy, ox, co, so)];
                if (d == 0.0) continue;
                gb[o] += d;
                for (int i = 0; i < ci; ++i)
                  for (int ky = 0; ky < k; ++ky) {
                    const int iy = oy * s.stride - s.padding + ky;
                    if (iy < 0 || iy >= si) continue;
                    for (int kx = 0; kx < k; ++kx) {
                      const int ix = ox * s.stride - s.padding + kx;
                      if (ix < 0 || ix >= si) continue;
                      const int wi = ((o * ci + i) * k + ky) * k + kx;
                      const std::size_t ii = at(n, i, iy, ix, ci, si);
                      gw[wi] += d * in[ii];
                      if (needInput) gin[ii] += d * w[wi];
                    }
                  }
              }
        break;
      }
      case LayerKind::Deconv: {
        const int k = s.kernel;
        double* gb = gw + li.weightCount;
        for (int n = 0; n < nb; ++n) {
          for (int o = 0; o < co; ++o)
            for (int p = 0; p < so * so; ++p) gb[o] += g[at(n, o, 0, 0, co, so) + static_cast<std::size_t>(p)];
          for (int i = 0; i < ci; ++i)
            for (int iy = 0; iy < si; ++iy)
              for (int ix = 0; ix < si; ++ix) {
                const std::size_t ii = at(n, i, iy, ix, ci, si);
                const double v = in[ii];
                double acc = 0.0;
                for (int o = 0; o < co; ++o)
                  for (int ky = 0; ky < k; ++ky) {
                    const int oy = iy * s.stride - s.padding + ky;
                    if (oy < 0 || oy >= so) continue;
                    for (int kx = 0; kx < k; ++kx) {
                      const int ox = ix * s.stride - s.padding + kx;
                      if (ox < 0 || ox >= so) continue;
                      const int wi = ((i * co + o) * k + ky) * k + kx;
                      const double d = g[at(n, o, oy, ox, co, so)];
                      gw[wi] += d * v;
                      acc += d * w[wi];
                    }
                  }
                if (needInput) gin[ii] = acc;
              }
        }
        break;
      }
      case LayerKind::AvgPool: {
        if (!needInput) break;
        const int k = s.kernel;
        const double inv = 1.0 / (k * k);
        for (int n = 0; n < nb; ++n)
          for (int c = 0; c < co; ++c)
            for (int oy = 0; oy < so; ++oy)
              for (int ox = 0; ox < so; ++ox) {
                const double d = g[at(n, c, oy, ox, co, so)] * inv;
                for (int ky = 0; ky < k; ++ky)
                  for (int kx = 0; kx < k; ++kx) gin[at(n, c, oy * s.stride + ky, ox * s.stride + kx, ci, si)] += d;
              }
        break;
      }
      case LayerKind::BatchNorm: {
        const std::vector<double>& xhat = tape.xhat_[l];
        const double m = static_cast<double>(nb) * so * so;
        for (int c = 0; c < co; ++c) {
          double sdy = 0.0, sdyx = 0.0;
          for (int n = 0; n < nb; ++n)
            for (int p = 0; p < so * so; ++p) {
              const std::size_t idx = at(n, c, 0, 0, co, so) + static_cast<std::size_t>(p);
              sdy += g[idx];
              sdyx += g[idx] * xhat[idx];
            }
          gw[c] += sdyx;
          gw[co + c] += sdy;
          if (!needInput) continue;
          const double scale = w[c] * tape.invStd_[l][c];
          for (int n = 0; n < nb; ++n)
            for (int p = 0; p < so * so; ++p) {
              const std::size_t idx = at(n, c, 0, 0, co, so) + static_cast<std::size_t>(p);
              gin[idx] = tape.mode_ == NetMode::Train ? scale * (g[idx] - sdy / m - xhat[idx] * sdyx / m)
                                                      : scale * g[idx];
            }
        }
        break;
      }
      case LayerKind::Softplus:
        if (!needInput) break;
        for (std::size_t i = 0; i < in.size(); ++i) gin[i] = g[i] * sigmoid(in[i]);
        break;
    }
    g = std::move(gin);
  }
  return grad;
}

BatchNormBuffers ConvNet::batchStatistics(const Tape& tape) const {
  BatchNormBuffers b = initBuffers();
  for (std::size_t l = 0; l < info_.size(); ++l) {
    if (info_[l].kind != LayerKind::BatchNorm) continue;
    b.runningMean.segment(info_[l].statOffset, info_[l].outChannels) = tape.batchMean_[l];
    b.runningVar.segment(info_[l].statOffset, info_[l].outChannels) = tape.batchVar_[l];
  }
  return b;
}

}  // namespace panis
