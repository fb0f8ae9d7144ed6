#include "doctest.h"
#include "support.hpp"

#include <limits>
#include <numbers>

using namespace panis;
using panis::test::relErr;

namespace {

LayerSpec layer(LayerKind kind, int k = 0, int s = 1, int p = 0, int out = 0) { return {kind, k, s, p, out}; }

std::vector<Eigen::MatrixXd> randomInputs(Rng& rng, int batch, int size) {
  std::vector<Eigen::MatrixXd> in;
  for (int b = 0; b < batch; ++b) in.push_back(Eigen::MatrixXd::Random(size, size).array() + 1.2);
  (void)rng;
  return in;
}

// Loss sum_i w_i X_i over the batch; returns the analytic gradient and checks it
// against central differences on `probes` parameters.
double gradientError(const ConvNet& net, const Eigen::VectorXd& params, const std::vector<Eigen::MatrixXd>& in,
                     NetMode mode, const BatchNormBuffers* buffers, int probes, Rng& rng) {
  const int out = net.outputSize();
  std::vector<Eigen::MatrixXd> w;
  for (std::size_t b = 0; b < in.size(); ++b) w.push_back(Eigen::MatrixXd::Random(out, out));
  auto loss = [&](const Eigen::VectorXd& p) {
    BatchNormBuffers buf = buffers ? *buffers : net.initBuffers();
    const Tape t = net.forward(p, in, mode, mode == NetMode::Eval ? &buf : nullptr);
    double acc = 0.0;
    for (std::size_t b = 0; b < in.size(); ++b) acc += (w[b].array() * t.outputs()[b].array()).sum();
    return acc;
  };
  BatchNormBuffers buf = buffers ? *buffers : net.initBuffers();
  Tape tape = net.forward(params, in, mode, mode == NetMode::Eval ? &buf : nullptr);
  const Eigen::VectorXd g = net.backward(tape, params, w);
  const double base = loss(params);
  std::uniform_int_distribution<int> pick(0, net.parameterCount() - 1);
  double worst = 0.0;
  const int n = std::min(probes, net.parameterCount());
  for (int k = 0; k < n; ++k) {
    const int i = probes >= net.parameterCount() ? k : pick(rng);
    const double h = 1e-6 * std::max(1.0, std::abs(params[i]));
    Eigen::VectorXd pp = params, pm = params;
    pp[i] += h;
    pm[i] -= h;
    const double fd = (loss(pp) - loss(pm)) / (2 * h);
    // Below this a central difference cannot resolve anything but roundoff.
    const double noise = 1e3 * std::numeric_limits<double>::epsilon() * (std::abs(base) + 1.0) / h;
    if (std::max(std::abs(g[i]), std::abs(fd)) < noise) continue;
    worst = std::max(worst, relErr(g[i], fd));
  }
  return worst;
}

}  // namespace

TEST_SUITE("neural-map") {
  TEST_CASE("published architectures have the published sizes") {
    const ConvNet panis(panisArchitecture()), mpanis(mpanisArchitecture());
    CHECK(panis.parameterCount() == 5065);
    CHECK(mpanis.parameterCount() == 12801);
    CHECK(panis.outputSize() == 17);
    CHECK(mpanis.outputSize() == 9);
    const LayerInfo& first = panis.layers().front();
    CHECK(first.outSize == 65);
    CHECK(first.outChannels == 8);
    CHECK(first.paramCount == 80);
    const std::vector<int> panisSizes{65, 65, 65, 32, 32, 32, 32, 16, 17, 17, 17, 17};
    for (std::size_t l = 0; l < panisSizes.size(); ++l) CHECK(panis.layers()[l].outSize == panisSizes[l]);
    const std::vector<int> mpanisSizes{129, 129, 129, 32, 32, 32, 32, 16, 16, 16, 16, 8, 8, 8, 8, 9, 9, 9, 9};
    for (std::size_t l = 0; l < mpanisSizes.size(); ++l) CHECK(mpanis.layers()[l].outSize == mpanisSizes[l]);
  }

  TEST_CASE("per layer parameter counts follow the closed forms") {
    for (const Architecture& a : {panisArchitecture(), mpanisArchitecture(), deskPanisArchitecture(),
                                  deskMpanisArchitecture()}) {
      const ConvNet net(a);
      int total = 0;
      for (std::size_t l = 0; l < net.layers().size(); ++l) {
        const LayerInfo& li = net.layers()[l];
        const LayerSpec& s = a.layers[l];
        int expected = 0;
        if (li.kind == LayerKind::Conv || li.kind == LayerKind::Deconv)
          expected = s.kernel * s.kernel * li.inChannels * li.outChannels + li.outChannels;
        if (li.kind == LayerKind::BatchNorm) expected = 2 * li.inChannels;
        CHECK(li.paramCount == expected);
        total += li.paramCount;
      }
      CHECK(total == net.parameterCount());
    }
  }

  TEST_CASE("desk architectures emit the nine by nine grid") {
    CHECK(ConvNet(deskPanisArchitecture()).outputSize() == 9);
    CHECK(ConvNet(deskMpanisArchitecture()).outputSize() == 9);
  }

  TEST_CASE("softplus at zero") {
    CHECK(softplus(0.0) == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
    CHECK(softplus(800.0) == 800.0);
    CHECK(softplus(-800.0) >= 0.0);
  }

  TEST_CASE("xavier initialization") {
    const ConvNet net(panisArchitecture());
    Rng rng = deriveRng(1, 0);
    const Eigen::VectorXd p = net.initXavier(rng);
    const LayerInfo& c1 = net.layers().front();
    const double bound = std::sqrt(6.0 / 81.0);
    CHECK(bound == doctest::Approx(0.2721655).epsilon(1e-6));
    const Eigen::VectorXd w = p.segment(c1.paramOffset, c1.weightCount);
    CHECK(w.cwiseAbs().maxCoeff() <= bound);
    CHECK(w.cwiseAbs().maxCoeff() > 0.9 * bound);
    CHECK(p.segment(c1.paramOffset + c1.weightCount, 8).cwiseAbs().maxCoeff() == 0.0);
    for (const LayerInfo& li : net.layers())
      if (li.kind == LayerKind::BatchNorm) {
        CHECK((p.segment(li.paramOffset, li.weightCount).array() == 1.0).all());
        CHECK((p.segment(li.paramOffset + li.weightCount, li.weightCount).array() == 0.0).all());
      }
    Rng again = deriveRng(1, 0);
    CHECK(net.initXavier(again) == p);
  }

  TEST_CASE("output is positive") {
    const ConvNet net(deskPanisArchitecture());
    Rng rng = deriveRng(2, 0);
    const Eigen::VectorXd p = net.initXavier(rng);
    const Tape t = net.forward(p, randomInputs(rng, 3, 33), NetMode::Train, nullptr);
    for (const auto& x : t.outputs()) CHECK(x.minCoeff() >= net.architecture().outputFloor);
  }

  TEST_CASE("zero output gradient gives zero parameter gradient") {
    const ConvNet net(deskPanisArchitecture());
    Rng rng = deriveRng(3, 0);
    const Eigen::VectorXd p = net.initXavier(rng);
    Tape t = net.forward(p, randomInputs(rng, 2, 33), NetMode::Train, nullptr);
    const Eigen::VectorXd g = net.backward(t, p, {Eigen::MatrixXd::Zero(9, 9), Eigen::MatrixXd::Zero(9, 9)});
    CHECK(g.cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("full network gradient matches finite differences") {
    Rng rng = deriveRng(4, 0);
    for (const Architecture& a : {deskPanisArchitecture(), panisArchitecture()}) {
      const ConvNet net(a);
      Eigen::VectorXd p = net.initXavier(rng);
      p += 0.05 * standardNormalVector(rng, p.size());
      const auto in = randomInputs(rng, 2, a.inputSize);
      CHECK(gradientError(net, p, in, NetMode::Train, nullptr, 30, rng) < 1e-5);
      BatchNormBuffers buf = net.initBuffers();
      buf.runningMean = 0.3 * standardNormalVector(rng, buf.runningMean.size());
      buf.runningVar = buf.runningVar.array() + 0.5;
      CHECK(gradientError(net, p, in, NetMode::Eval, &buf, 30, rng) < 1e-5);
    }
  }

  TEST_CASE("each layer kind passes a gradient check in isolation") {
    Rng rng = deriveRng(5, 0);
    const LayerSpec scale1x1 = layer(LayerKind::Conv, 1, 1, 0, 1);
    const std::vector<std::vector<LayerSpec>> fixtures{
        {layer(LayerKind::Conv, 3, 2, 1, 3), layer(LayerKind::Conv, 1, 1, 0, 1)},
        {layer(LayerKind::Deconv, 4, 1, 1, 2), layer(LayerKind::Conv, 1, 1, 0, 1)},
        {layer(LayerKind::Deconv, 3, 2, 0, 1)},
        {scale1x1, layer(LayerKind::AvgPool, 2, 2)},
        {layer(LayerKind::Conv, 3, 1, 1, 2), layer(LayerKind::BatchNorm), layer(LayerKind::Conv, 1, 1, 0, 1)},
        {scale1x1, layer(LayerKind::Softplus)},
    };
    for (std::size_t f = 0; f < fixtures.size(); ++f) {
      CAPTURE(f);
      const ConvNet net(Architecture{"fixture", 9, fixtures[f]});
      Eigen::VectorXd p = net.initXavier(rng);
      p += 0.1 * standardNormalVector(rng, p.size());
      CHECK(gradientError(net, p, randomInputs(rng, 3, 9), NetMode::Train, nullptr, 1000, rng) < 1e-6);
    }
  }

  TEST_CASE("average pooling preserves the window mean") {
    Architecture a{"pool", 8, {layer(LayerKind::AvgPool, 2, 2)}};
    a.positiveOutput = false;
    const ConvNet net(a);
    Rng rng = deriveRng(6, 0);
    const auto in = randomInputs(rng, 1, 8);
    const Tape t = net.forward(Eigen::VectorXd(), in, NetMode::Train, nullptr);
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) CHECK(std::abs(t.outputs()[0](y, x) - in[0].block(2 * y, 2 * x, 2, 2).mean()) < 1e-15);
  }

  TEST_CASE("eval mode with recorded batch statistics reproduces train mode") {
    const ConvNet net(deskMpanisArchitecture());
    Rng rng = deriveRng(7, 0);
    const Eigen::VectorXd p = net.initXavier(rng);
    const auto in = randomInputs(rng, 4, 65);
    const Tape train = net.forward(p, in, NetMode::Train, nullptr);
    BatchNormBuffers stats = net.batchStatistics(train);
    const Tape eval = net.forward(p, in, NetMode::Eval, &stats);
    for (std::size_t b = 0; b < in.size(); ++b)
      CHECK((train.outputs()[b] - eval.outputs()[b]).cwiseAbs().maxCoeff() < 1e-10);
  }

  TEST_CASE("running statistics move with momentum") {
    const ConvNet net(deskPanisArchitecture());
    Rng rng = deriveRng(8, 0);
    const Eigen::VectorXd p = net.initXavier(rng);
    BatchNormBuffers buf = net.initBuffers();
    const Tape t = net.forward(p, randomInputs(rng, 3, 33), NetMode::Train, &buf);
    const BatchNormBuffers stats = net.batchStatistics(t);
    const double m = net.batchNormMomentum();
    CHECK((buf.runningMean - m * stats.runningMean).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(buf.runningVar.size() == stats.runningVar.size());
  }

  TEST_CASE("eval mode is deterministic") {
    const ConvNet net(deskPanisArchitecture());
    Rng rng = deriveRng(9, 0);
    const Eigen::VectorXd p = net.initXavier(rng);
    const auto in = randomInputs(rng, 2, 33);
    const std::vector<Eigen::MatrixXd> d{Eigen::MatrixXd::Ones(9, 9), Eigen::MatrixXd::Ones(9, 9)};
    BatchNormBuffers b1 = net.initBuffers(), b2 = net.initBuffers();
    Tape t1 = net.forward(p, in, NetMode::Eval, &b1), t2 = net.forward(p, in, NetMode::Eval, &b2);
    const Eigen::VectorXd g1 = net.backward(t1, p, d), g2 = net.backward(t2, p, d);
    CHECK(g1 == g2);
  }

  TEST_CASE("a tape is consumed once") {
    const ConvNet net(deskPanisArchitecture());
    Rng rng = deriveRng(10, 0);
    const Eigen::VectorXd p = net.initXavier(rng);
    Tape t = net.forward(p, randomInputs(rng, 2, 33), NetMode::Train, nullptr);
    const std::vector<Eigen::MatrixXd> d{Eigen::MatrixXd::Ones(9, 9), Eigen::MatrixXd::Ones(9, 9)};
    net.backward(t, p, d);
    CHECK(t.consumed());
    CHECK_THROWS_AS(net.backward(t, p, d), panis::Error);
  }

  TEST_CASE("shape errors name the problem") {
    const ConvNet net(deskPanisArchitecture());
    Rng rng = deriveRng(11, 0);
    const Eigen::VectorXd p = net.initXavier(rng);
    CHECK_THROWS_AS(net.forward(p, randomInputs(rng, 1, 17), NetMode::Train, nullptr), panis::Error);
    CHECK_THROWS_AS(ConvNet(Architecture{"bad", 4, {layer(LayerKind::Conv, 7, 1, 0, 1)}}), panis::Error);
    CHECK_THROWS_AS(ConvNet(Architecture{"bad", 9, {layer(LayerKind::Conv, 3, 1, 1, 2)}}), panis::Error);
  }
}
