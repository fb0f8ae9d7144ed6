#include "panis/surrogate.hpp"

#include "panis/error.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <bit>
#include <cmath>
#include <string>

namespace panis {

std::uint64_t hashInput(const std::vector<double>& x) {
  std::uint64_t h = 1469598103934665603ULL;
  for (double v : x) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xffU;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

Surrogate::Surrogate(SurrogateContext context, SurrogateOptions options)
    : ctx_(std::move(context)), opt_(options) {
  if (!ctx_.net || !ctx_.mesh || !ctx_.projection || !ctx_.engine) {
    fail(ErrorKind::Contract, "surrogate context is incomplete");
  }
  const int dY = ctx_.projection->coarseDimension();
  const int dy = ctx_.projection->fineDimension();
  if (dY != ctx_.mesh->nodeCount()) fail(ErrorKind::Config, "projection and coarse mesh disagree on d_Y");
  if (dy != ctx_.engine->trialDimension()) fail(ErrorKind::Config, "projection and trial basis disagree on d_y");
  if (ctx_.net->outputSize() != ctx_.mesh->nodesPerSide()) {
    fail(ErrorKind::Architecture, "network emits " + std::to_string(ctx_.net->outputSize()) + "x" +
                                      std::to_string(ctx_.net->outputSize()) + " but the coarse mesh has " +
                                      std::to_string(ctx_.mesh->nodesPerSide()) + " nodes per side");
  }
  if (opt_.rank < 1 || opt_.rank >= dY) fail(ErrorKind::Config, "covariance rank d' must satisfy 1 <= d' < d_Y");
  const bool multiscale = opt_.mode == SurrogateMode::Mpanis;
  if (multiscale && opt_.atomCount < 1) fail(ErrorKind::Config, "mPANIS needs at least one atom");
  if (!multiscale && opt_.atomCount != 0) fail(ErrorKind::Config, "atoms exist only in mPANIS mode");

  layout_.netCount = ctx_.net->parameterCount();
  layout_.lOffset = layout_.netCount;
  layout_.lRows = (!multiscale && opt_.covariance == CovarianceSpace::Fine) ? dy : dY;
  layout_.lCols = opt_.rank;
  layout_.logSigmaOffset = layout_.lOffset + layout_.lRows * layout_.lCols;
  layout_.atomsOffset = layout_.logSigmaOffset + 1;
  layout_.atomDim = multiscale ? dy - dY : 0;
  layout_.atomCount = multiscale ? opt_.atomCount : 0;
  layout_.total = layout_.atomsOffset + layout_.atomDim * layout_.atomCount;

  const Eigen::MatrixXd& A = ctx_.projection->A();
  gramA_ = A.transpose() * A;

  if (multiscale) {
    // Trace of every complement direction on the boundary quadrature nodes.
    const Eigen::MatrixXd& e = ctx_.engine->trialValues();
    const int q = static_cast<int>(e.rows());
    const int side = ctx_.engine->trial().side;
    std::vector<std::pair<int, int>> pts;
    for (int p = 0; p < q; ++p)
      for (int r = 0; r < q; ++r)
        if (p == 0 || r == 0 || p == q - 1 || r == q - 1) pts.emplace_back(p, r);
    Eigen::MatrixXd trace(static_cast<Eigen::Index>(pts.size()), dy);
    for (std::size_t i = 0; i < pts.size(); ++i)
      for (int a = 0; a < side; ++a)
        for (int b = 0; b < side; ++b)
          trace(static_cast<Eigen::Index>(i), a * side + b) = e(pts[i].first, a) * e(pts[i].second, b);
    const Eigen::MatrixXd& aperp = ctx_.projection->Aperp();
    Eigen::BDCSVD<Eigen::MatrixXd> svd(trace * aperp, Eigen::ComputeFullV);
    const Eigen::VectorXd& sv = svd.singularValues();
    const double smax = sv.size() > 0 ? sv[0] : 0.0;
    boundaryActive_ = 0;
    for (Eigen::Index i = 0; i < sv.size(); ++i)
      if (sv[i] > opt_.boundaryMaskTolerance * smax) ++boundaryActive_;
    complement_ = aperp * svd.matrixV();
    mask_ = Eigen::VectorXd::Ones(layout_.atomDim);
    mask_.head(boundaryActive_).setZero();
  }
}

Eigen::VectorXd Surrogate::initialParameters(Rng& rng) const {
  Eigen::VectorXd psi = Eigen::VectorXd::Zero(layout_.total);
  psi.head(layout_.netCount) = ctx_.net->initXavier(rng);
  std::normal_distribution<double> normal(0.0, opt_.initialLScale);
  for (int i = 0; i < layout_.lRows * layout_.lCols; ++i) psi[layout_.lOffset + i] = normal(rng);
  psi[layout_.logSigmaOffset] = std::log(opt_.initialSigma);
  return psi;
}

Eigen::MatrixXd Surrogate::covFactor(const Eigen::VectorXd& psi) const {
  return Eigen::Map<const Eigen::MatrixXd>(psi.data() + layout_.lOffset, layout_.lRows, layout_.lCols);
}

Eigen::VectorXd Surrogate::atom(const Eigen::VectorXd& psi, int k) const {
  if (k < 0 || k >= layout_.atomCount) fail(ErrorKind::Contract, "atom index out of range");
  return psi.segment(layout_.atomsOffset + k * layout_.atomDim, layout_.atomDim);
}

Eigen::MatrixXd Surrogate::liftedFactor(const Eigen::VectorXd& psi) const {
  const Eigen::MatrixXd l = covFactor(psi);
  if (layout_.lRows == fineDimension()) return l;
  return ctx_.projection->A() * l;
}

EntropyValue Surrogate::entropy(const Eigen::VectorXd& psi) const {
  const double ls = logSigma(psi);
  const double sigma2 = std::exp(2.0 * ls);
  if (!std::isfinite(ls) || !(sigma2 > 0.0)) {
    fail(ErrorKind::Numerical, "posterior scale sigma collapsed to zero (log sigma = " + std::to_string(ls) +
                                   "); the entropy diverges to -infinity");
  }
  const Eigen::MatrixXd l = covFactor(psi);
  const bool coarseLift = opt_.mode == SurrogateMode::Panis && layout_.lRows != fineDimension();
  const Eigen::MatrixXd gl = coarseLift ? Eigen::MatrixXd(gramA_ * l) : l;
  const int d = opt_.mode == SurrogateMode::Panis ? fineDimension() : coarseDimension();
  const int r = layout_.lCols;
  Eigen::MatrixXd cap = Eigen::MatrixXd::Identity(r, r) + (l.transpose() * gl) / sigma2;
  Eigen::LLT<Eigen::MatrixXd> llt(cap);
  if (llt.info() != Eigen::Success) fail(ErrorKind::Numerical, "capacitance matrix is not positive definite");
  const Eigen::MatrixXd capInv = llt.solve(Eigen::MatrixXd::Identity(r, r));
  double logdet = 0.0;
  for (int i = 0; i < r; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
  EntropyValue out;
  out.value = d * ls + 0.5 * logdet;
  out.dL = gl * capInv / sigma2;
  out.dLogSigma = d - (r - capInv.trace());
  return out;
}

Eigen::VectorXd Surrogate::nodalField(const Eigen::MatrixXd& out) const {
  const TriMesh& mesh = *ctx_.mesh;
  const int side = mesh.nodesPerSide();
  if (out.rows() != side || out.cols() != side) fail(ErrorKind::Architecture, "network output does not match the mesh");
  Eigen::VectorXd x(mesh.nodeCount());
  for (int i = 0; i < side; ++i)
    for (int j = 0; j < side; ++j) x[mesh.nodeIndex(i, j)] = out(i, j);
  return x;
}

Eigen::VectorXd Surrogate::dirichlet(const BoundaryCondition& bc) const {
  return dirichletFromFunction(*ctx_.mesh, [&](double s1, double s2) { return bc(s1, s2); });
}

MeanBatch Surrogate::meanSolve(const Eigen::VectorXd& psi, BatchNormBuffers& buffers,
                               const std::vector<Eigen::MatrixXd>& c, const BoundaryCondition& bc,
                               const ConstitutiveLaw& law, NetMode mode) const {
  if (psi.size() != layout_.total) fail(ErrorKind::Contract, "parameter vector has the wrong length");
  MeanBatch out;
  const Eigen::VectorXd net = psi.head(layout_.netCount);
  out.tape = ctx_.net->forward(net, c, mode, &buffers);
  const Eigen::VectorXd u0 = dirichlet(bc);
  for (const Eigen::MatrixXd& o : out.tape.outputs()) {
    out.X.push_back(nodalField(o));
    out.models.push_back(CoarseModel::fromNodal(ctx_.mesh, out.X.back(), u0, ctx_.source));
    out.solutions.push_back(solve(out.models.back(), law, ctx_.newton));
    out.mu.push_back(ctx_.projection->A() * out.solutions.back().Y);
  }
  return out;
}

PosteriorSample Surrogate::samplePosterior(const Eigen::VectorXd& psi, const MeanBatch& mean, int item,
                                           const BoundaryCondition& bc, const ConstitutiveLaw& law,
                                           const Eigen::VectorXd& eps1, const Eigen::VectorXd& eps2, int atomId) const {
  const double sigma = std::exp(logSigma(psi));
  const Eigen::MatrixXd l = covFactor(psi);
  if (eps1.size() != layout_.lCols) fail(ErrorKind::Contract, "eps1 has the wrong length");
  PosteriorSample s;
  const auto idx = static_cast<std::size_t>(item);
  if (opt_.mode == SurrogateMode::Panis) {
    if (eps2.size() != fineDimension()) fail(ErrorKind::Contract, "eps2 must live in the trial space");
    s.yc = mean.mu[idx];
    s.y = mean.mu[idx] + liftedFactor(psi) * eps1 + sigma * eps2;
    return s;
  }
  if (eps2.size() != coarseDimension()) fail(ErrorKind::Contract, "eps2 must live in the coarse space");
  s.perturbedX = mean.X[idx] + l * eps1 + sigma * eps2;
  s.clamped.assign(static_cast<std::size_t>(s.perturbedX.size()), false);
  for (Eigen::Index i = 0; i < s.perturbedX.size(); ++i) {
    if (s.perturbedX[i] < opt_.xFloor) {
      s.perturbedX[i] = opt_.xFloor;
      s.clamped[static_cast<std::size_t>(i)] = true;
      ++s.clampCount;
    }
  }
  s.model = CoarseModel::fromNodal(ctx_.mesh, s.perturbedX, dirichlet(bc), ctx_.source);
  s.solution = solve(s.model, law, ctx_.newton, &mean.solutions[idx].Y);
  s.yc = ctx_.projection->A() * s.solution.Y;
  s.y = s.yc;
  if (atomId >= 0) {
    s.yfPrime = atom(psi, atomId).cwiseProduct(mask_);
    s.y += complement_ * s.yfPrime;
  }
  return s;
}

Eigen::MatrixXd Surrogate::varianceField(const Eigen::VectorXd& psi, const Eigen::MatrixXd& e) const {
  const int side = ctx_.engine->trial().side;
  const double sigma2 = std::exp(2.0 * logSigma(psi));
  const Eigen::MatrixXd bl = liftedFactor(psi);
  Eigen::MatrixXd var = Eigen::MatrixXd::Zero(e.rows(), e.rows());
  for (int k = 0; k < bl.cols(); ++k) {
    const Eigen::MatrixXd f = e * toGrid(bl.col(k), side) * e.transpose();
    var.array() += f.array().square();
  }
  if (opt_.mode == SurrogateMode::Panis) {
    const Eigen::VectorXd n = e.rowwise().squaredNorm();
    var += sigma2 * n * n.transpose();
  } else {
    const Eigen::MatrixXd& A = ctx_.projection->A();
    for (int j = 0; j < A.cols(); ++j) {
      const Eigen::MatrixXd f = e * toGrid(A.col(j), side) * e.transpose();
      var.array() += sigma2 * f.array().square();
    }
  }
  return var;
}

PredictionBands Surrogate::predict(const Eigen::VectorXd& psi, const BatchNormBuffers& buffers,
                                   const Eigen::MatrixXd& c, const BoundaryCondition& bc, const ConstitutiveLaw& law,
                                   const Eigen::VectorXd& s) const {
  BatchNormBuffers frozen = buffers;
  const MeanBatch mean = meanSolve(psi, frozen, {c}, bc, law, NetMode::Eval);
  const Eigen::MatrixXd e = ctx_.engine->trial().values(s);
  PredictionBands b;
  b.coefficients = mean.mu[0];
  b.mean = e * toGrid(b.coefficients, ctx_.engine->trial().side) * e.transpose();
  b.sd = varianceField(psi, e).cwiseMax(0.0).cwiseSqrt();
  b.upper = b.mean + 2.0 * b.sd;
  b.lower = b.mean - 2.0 * b.sd;
  return b;
}

void Surrogate::registerAtoms(const std::vector<std::vector<double>>& xs) {
  if (static_cast<int>(xs.size()) != layout_.atomCount) {
    fail(ErrorKind::Config, "expected " + std::to_string(layout_.atomCount) + " atoms, got " + std::to_string(xs.size()));
  }
  atomHashes_.clear();
  atomLookup_.clear();
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const std::uint64_t h = hashInput(xs[k]);
    if (!atomLookup_.emplace(h, static_cast<int>(k)).second) fail(ErrorKind::Config, "duplicate atom input");
    atomHashes_.push_back(h);
  }
}

int Surrogate::atomIndex(const std::vector<double>& x) const {
  const auto it = atomLookup_.find(hashInput(x));
  return it == atomLookup_.end() ? -1 : it->second;
}

void Surrogate::save(ArrayBox& box, const Eigen::VectorXd& psi, const BatchNormBuffers& buffers) const {
  for (std::size_t l = 0; l < ctx_.net->layers().size(); ++l) {
    const LayerInfo& li = ctx_.net->layers()[l];
    const LayerSpec& spec = ctx_.net->architecture().layers[l];
    const std::string base = "psi_x/" + li.name + "/";
    const double* p = psi.data() + li.paramOffset;
    const auto k = static_cast<std::size_t>(spec.kernel);
    const auto ci = static_cast<std::size_t>(li.inChannels), co = static_cast<std::size_t>(li.outChannels);
    if (li.kind == LayerKind::Conv || li.kind == LayerKind::Deconv) {
      std::vector<std::size_t> shape = li.kind == LayerKind::Conv ? std::vector<std::size_t>{co, ci, k, k}
                                                                  : std::vector<std::size_t>{ci, co, k, k};
      box.put(base + "weight", shape, std::vector<double>(p, p + li.weightCount));
      box.put(base + "bias", {co}, std::vector<double>(p + li.weightCount, p + li.paramCount));
    } else if (li.kind == LayerKind::BatchNorm) {
      box.put(base + "gamma", {co}, std::vector<double>(p, p + co));
      box.put(base + "beta", {co}, std::vector<double>(p + co, p + 2 * co));
      const double* m = buffers.runningMean.data() + li.statOffset;
      const double* v = buffers.runningVar.data() + li.statOffset;
      box.put(base + "running_mean", {co}, std::vector<double>(m, m + co));
      box.put(base + "running_var", {co}, std::vector<double>(v, v + co));
    }
  }
  box.put("cov/L", covFactor(psi));
  box.putScalar("cov/log_sigma", logSigma(psi));
  for (int k = 0; k < layout_.atomCount; ++k) {
    const std::uint64_t h = k < static_cast<int>(atomHashes_.size()) ? atomHashes_[static_cast<std::size_t>(k)] : 0;
    box.put("atoms/x_hash_" + std::to_string(k), {2},
            {static_cast<double>(h >> 32), static_cast<double>(h & 0xffffffffULL)});
    const Eigen::VectorXd a = atom(psi, k);
    box.put("atoms/yf_" + std::to_string(k), std::span<const double>(a.data(), static_cast<std::size_t>(a.size())));
  }
  box.put("proj/A", ctx_.projection->A());
  box.put("proj/Aperp", ctx_.projection->Aperp());
}

void Surrogate::load(const ArrayBox& box, Eigen::VectorXd& psi, BatchNormBuffers& buffers) {
  psi = Eigen::VectorXd::Zero(layout_.total);
  buffers = ctx_.net->initBuffers();
  auto copy = [&](const std::string& name, double* dst, std::size_t n) {
    const NamedArray& a = box.get(name);
    if (a.size() != n) fail(ErrorKind::Io, "checkpoint array " + name + " has the wrong size");
    std::copy(a.data.begin(), a.data.end(), dst);
  };
  for (const LayerInfo& li : ctx_.net->layers()) {
    const std::string base = "psi_x/" + li.name + "/";
    double* p = psi.data() + li.paramOffset;
    const auto co = static_cast<std::size_t>(li.outChannels);
    if (li.kind == LayerKind::Conv || li.kind == LayerKind::Deconv) {
      copy(base + "weight", p, static_cast<std::size_t>(li.weightCount));
      copy(base + "bias", p + li.weightCount, co);
    } else if (li.kind == LayerKind::BatchNorm) {
      copy(base + "gamma", p, co);
      copy(base + "beta", p + co, co);
      copy(base + "running_mean", buffers.runningMean.data() + li.statOffset, co);
      copy(base + "running_var", buffers.runningVar.data() + li.statOffset, co);
    }
  }
  const Eigen::MatrixXd l = box.matrix("cov/L");
  if (l.rows() != layout_.lRows || l.cols() != layout_.lCols) fail(ErrorKind::Io, "checkpoint covariance factor shape mismatch");
  Eigen::Map<Eigen::MatrixXd>(psi.data() + layout_.lOffset, layout_.lRows, layout_.lCols) = l;
  psi[layout_.logSigmaOffset] = box.scalar("cov/log_sigma");
  atomHashes_.clear();
  atomLookup_.clear();
  for (int k = 0; k < layout_.atomCount; ++k) {
    const std::vector<double> h = box.vector("atoms/x_hash_" + std::to_string(k));
    if (h.size() != 2) fail(ErrorKind::Io, "bad atom hash record");
    const std::uint64_t hash = (static_cast<std::uint64_t>(h[0]) << 32) | static_cast<std::uint64_t>(h[1]);
    atomHashes_.push_back(hash);
    atomLookup_.emplace(hash, k);
    copy("atoms/yf_" + std::to_string(k), psi.data() + layout_.atomsOffset + k * layout_.atomDim,
         static_cast<std::size_t>(layout_.atomDim));
  }
}

}  // namespace panis
