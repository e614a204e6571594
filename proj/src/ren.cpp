#include "netren/ren.hpp"

#include <cmath>

namespace netren {

double activate(Activation act, double x) {
  switch (act) {
    case Activation::Tanh:
      return std::tanh(x);
    case Activation::ReLU:
      return x > 0.0 ? x : 0.0;
  }
  return x;
}

double activate_slope(Activation act, double x) {
  switch (act) {
    case Activation::Tanh: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Activation::ReLU:
      return x > 0.0 ? 1.0 : 0.0;
  }
  return 1.0;
}

Activation parse_activation(const std::string& name) {
  if (name == "tanh") return Activation::Tanh;
  if (name == "relu") return Activation::ReLU;
  throw std::invalid_argument("unknown activation '" + name + "' (expected tanh or relu)");
}

std::string to_string(Activation act) { return act == Activation::Tanh ? "tanh" : "relu"; }

void RenDims::validate() const {
  if (state < 1 || neurons < 1 || inputs < 1 || outputs < 1) {
    throw DimensionError("REN dimensions must all be >= 1");
  }
}

std::size_t RenDims::param_count() const { return RenParamLayout(*this).total; }

RenParamLayout::RenParamLayout(const RenDims& d_) : dims(d_) {
  dims.validate();
  const std::size_t c = dims.state, s = dims.neurons, q = dims.inputs, r = dims.outputs;
  const std::size_t dd = 2 * c + s;
  x = 0;
  y = x + dd * dd;
  b2 = y + c * c;
  c2 = b2 + c * q;
  d21 = c2 + r * c;
  d12 = d21 + r * s;
  d22 = d12 + s * q;
  total = d22 + r * q;
}

RenDims RenMatrices::dims() const {
  return RenDims{static_cast<int>(A1.rows()), static_cast<int>(D11.rows()),
                 static_cast<int>(B2.cols()), static_cast<int>(C2.rows())};
}

RenMatrices RenMatrices::zeros(const RenDims& d) {
  d.validate();
  const int c = d.state, s = d.neurons, q = d.inputs, r = d.outputs;
  return RenMatrices{Mat::Zero(c, c), Mat::Zero(c, s), Mat::Zero(c, q),
                     Mat::Zero(s, c), Mat::Zero(s, s), Mat::Zero(s, q),
                     Mat::Zero(r, c), Mat::Zero(r, s), Mat::Zero(r, q)};
}

void RenMatrices::check_shapes() const {
  const RenDims d = dims();
  d.validate();
  const auto expect = [](const Mat& m, long rows, long cols, const char* name) {
    if (m.rows() != rows || m.cols() != cols) {
      throw DimensionError(std::string("REN matrix ") + name + " has shape " +
                           std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                           ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
    }
  };
  expect(A1, d.state, d.state, "A1");
  expect(B1, d.state, d.neurons, "B1");
  expect(B2, d.state, d.inputs, "B2");
  expect(C1, d.neurons, d.state, "C1");
  expect(D11, d.neurons, d.neurons, "D11");
  expect(D12, d.neurons, d.inputs, "D12");
  expect(C2, d.outputs, d.state, "C2");
  expect(D21, d.outputs, d.neurons, "D21");
  expect(D22, d.outputs, d.inputs, "D22");
}

RenMatrices& RenMatrices::operator+=(const RenMatrices& o) {
  A1 += o.A1;
  B1 += o.B1;
  B2 += o.B2;
  C1 += o.C1;
  D11 += o.D11;
  D12 += o.D12;
  C2 += o.C2;
  D21 += o.D21;
  D22 += o.D22;
  return *this;
}

namespace {

using MapC = Eigen::Map<const Mat>;

// Every intermediate of the parametrization, kept for the reverse pass.
struct Construction {
  int c, s, q, r;
  double gamma;
  Mat X, Y, B2i, C2, D21, D12i, D22raw;
  double rho;  // sqrt(1 + ||D22raw||_F^2)
  Mat D22;
  Mat Ru;      // gamma I - D22^T D22 / gamma
  Mat Nx;      // [C2 D21 0]
  Mat K;       // coupling of v with (xi, w, xi+)
  Mat RinvK;
  Mat H;
  Mat E;
  Eigen::PartialPivLU<Mat> Elu;
  Vec lambda;
  RenMatrices out;
};

Construction construct(const RenTheta& params, const RenDims& dims) {
  const RenParamLayout lay(dims);
  if (static_cast<std::size_t>(params.theta.size()) != lay.total) {
    throw DimensionError("theta has length " + std::to_string(params.theta.size()) +
                         " but the REN dimensions require " + std::to_string(lay.total));
  }
  if (!(params.gamma > 0.0) || !std::isfinite(params.gamma)) {
    throw std::invalid_argument("REN gain gamma must be positive and finite");
  }
  Construction k;
  k.c = dims.state;
  k.s = dims.neurons;
  k.q = dims.inputs;
  k.r = dims.outputs;
  k.gamma = params.gamma;
  const int c = k.c, s = k.s, q = k.q, r = k.r, d = lay.d();
  const double g = params.gamma;
  const double* th = params.theta.data();

  k.X = MapC(th + lay.x, d, d);
  k.Y = MapC(th + lay.y, c, c);
  k.B2i = MapC(th + lay.b2, c, q);
  k.C2 = MapC(th + lay.c2, r, c);
  k.D21 = MapC(th + lay.d21, r, s);
  k.D12i = MapC(th + lay.d12, s, q);
  k.D22raw = MapC(th + lay.d22, r, q);

  k.rho = std::sqrt(1.0 + k.D22raw.squaredNorm());
  k.D22 = (g / k.rho) * k.D22raw;
  k.Ru = g * Mat::Identity(q, q) - k.D22.transpose() * k.D22 / g;

  k.Nx = Mat::Zero(r, d);
  k.Nx.leftCols(c) = k.C2;
  k.Nx.middleCols(c, s) = k.D21;

  k.K = Mat::Zero(q, d);
  k.K.leftCols(c) = -k.D22.transpose() * k.C2 / g;
  k.K.middleCols(c, s) = -k.D12i.transpose() - k.D22.transpose() * k.D21 / g;
  k.K.rightCols(c) = k.B2i.transpose();

  k.RinvK = k.Ru.llt().solve(k.K);
  k.H = k.X.transpose() * k.X + kRenMargin * Mat::Identity(d, d) +
        k.Nx.transpose() * k.Nx / g + k.K.transpose() * k.RinvK;

  const Mat H11 = k.H.topLeftCorner(c, c);
  const Mat H21 = k.H.block(c, 0, s, c);
  const Mat H22 = k.H.block(c, c, s, s);
  const Mat H31 = k.H.block(c + s, 0, c, c);
  const Mat H32 = k.H.block(c + s, c, c, s);
  const Mat P = k.H.bottomRightCorner(c, c);

  k.E = 0.5 * (H11 + P + k.Y - k.Y.transpose());
  k.Elu.compute(k.E);
  k.lambda = 0.5 * H22.diagonal();
  const Vec inv_lambda = k.lambda.cwiseInverse();

  RenMatrices& m = k.out;
  m.A1 = k.Elu.solve(H31);
  m.B1 = k.Elu.solve(H32);
  m.B2 = k.Elu.solve(k.B2i);
  m.C1 = inv_lambda.asDiagonal() * (-H21);
  Mat D11i = Mat::Zero(s, s);
  D11i.triangularView<Eigen::StrictlyLower>() = -H22;
  m.D11 = inv_lambda.asDiagonal() * D11i;
  m.D12 = inv_lambda.asDiagonal() * k.D12i;
  m.C2 = k.C2;
  m.D21 = k.D21;
  m.D22 = k.D22;
  return k;
}

}  // namespace

RenMatrices build_ren(const RenTheta& params, const RenDims& dims) {
  return construct(params, dims).out;
}

RenGradient build_ren_vjp(const RenTheta& params, const RenDims& dims, const RenMatrices& bar) {
  Construction k = construct(params, dims);
  bar.check_shapes();
  if (!(bar.dims() == dims)) throw DimensionError("adjoint shapes do not match REN dimensions");

  const int c = k.c, s = k.s, q = k.q, r = k.r, d = 2 * c + s;
  const double g = k.gamma;
  const RenMatrices& m = k.out;
  const Vec inv_lambda = k.lambda.cwiseInverse();

  // Outputs of the form M = E^{-1} Z: Zbar = E^{-T} Mbar, Ebar = -Zbar M^T.
  const auto Et = k.E.transpose().partialPivLu();
  const Mat H31bar = Et.solve(bar.A1);
  const Mat H32bar = Et.solve(bar.B1);
  Mat B2ibar = Et.solve(bar.B2);
  const Mat Ebar = -(H31bar * m.A1.transpose() + H32bar * m.B1.transpose() +
                     B2ibar * m.B2.transpose());

  // Outputs of the form M = Lambda^{-1} Z.
  const Mat C1ibar = inv_lambda.asDiagonal() * bar.C1;
  const Mat D11ibar = inv_lambda.asDiagonal() * bar.D11;
  Mat D12ibar = inv_lambda.asDiagonal() * bar.D12;
  Vec lambda_bar = -(C1ibar.cwiseProduct(m.C1).rowwise().sum() +
                     D11ibar.cwiseProduct(m.D11).rowwise().sum() +
                     D12ibar.cwiseProduct(m.D12).rowwise().sum());

  // Back into the blocks of H, treating each read entry independently.
  Mat Hbar = Mat::Zero(d, d);
  Hbar.topLeftCorner(c, c) += 0.5 * Ebar;
  Hbar.bottomRightCorner(c, c) += 0.5 * Ebar;
  Hbar.block(c, 0, s, c) += -C1ibar;
  Hbar.block(c + s, 0, c, c) += H31bar;
  Hbar.block(c + s, c, c, s) += H32bar;
  {
    auto H22bar = Hbar.block(c, c, s, s);
    for (int i = 0; i < s; ++i) {
      H22bar(i, i) += 0.5 * lambda_bar(i);
      for (int j = 0; j < i; ++j) H22bar(i, j) += -D11ibar(i, j);
    }
  }
  const Mat Ybar = 0.5 * (Ebar - Ebar.transpose());
  const Mat Hsym = Hbar + Hbar.transpose();

  RenGradient out;
  out.theta = Vec::Zero(static_cast<Eigen::Index>(RenParamLayout(dims).total));
  double gbar = 0.0;

  const Mat Xbar = k.X * Hsym;
  Mat Nxbar = k.Nx * Hsym / g;
  gbar += -(k.Nx.transpose() * k.Nx).cwiseProduct(Hbar).sum() / (g * g);
  const Mat Kbar = k.RinvK * Hsym;
  const Mat Rbar = -k.RinvK * Hbar * k.RinvK.transpose();

  Mat C2bar = bar.C2 + Nxbar.leftCols(c);
  Mat D21bar = bar.D21 + Nxbar.middleCols(c, s);
  Mat D22bar = bar.D22;

  // Ru = g I - D22^T D22 / g
  gbar += Rbar.trace() + (k.D22.transpose() * k.D22).cwiseProduct(Rbar).sum() / (g * g);
  D22bar += -k.D22 * (Rbar + Rbar.transpose()) / g;

  // K = [-D22^T C2 / g, -D12i^T - D22^T D21 / g, B2i^T]
  const Mat Kx = Kbar.leftCols(c);
  const Mat Kw = Kbar.middleCols(c, s);
  const Mat Kp = Kbar.rightCols(c);
  D22bar += -(k.C2 * Kx.transpose() + k.D21 * Kw.transpose()) / g;
  C2bar += -k.D22 * Kx / g;
  D21bar += -k.D22 * Kw / g;
  D12ibar += -Kw.transpose();
  B2ibar += Kp.transpose();
  gbar += (Kx.cwiseProduct(k.D22.transpose() * k.C2).sum() +
           Kw.cwiseProduct(k.D22.transpose() * k.D21).sum()) /
          (g * g);

  // D22 = g * D22raw / rho
  const double inner = D22bar.cwiseProduct(k.D22raw).sum();
  const Mat D22rawbar = g * (D22bar / k.rho - (inner / (k.rho * k.rho * k.rho)) * k.D22raw);
  gbar += inner / k.rho;

  const RenParamLayout lay(dims);
  const auto put = [&](std::size_t off, const Mat& block) {
    Eigen::Map<Mat>(out.theta.data() + off, block.rows(), block.cols()) = block;
  };
  put(lay.x, Xbar);
  put(lay.y, Ybar);
  put(lay.b2, B2ibar);
  put(lay.c2, C2bar);
  put(lay.d21, D21bar);
  put(lay.d12, D12ibar);
  put(lay.d22, D22rawbar);
  out.gamma = gbar;
  (void)r;
  (void)q;
  return out;
}

Vec equilibrium_solve(const RenMatrices& mat, const RenState& xi_prev, const Vec& v, Activation act) {
  const Eigen::Index s = mat.D11.rows();
  if (xi_prev.xi.size() != mat.C1.cols() || v.size() != mat.D12.cols()) {
    throw DimensionError("equilibrium_solve: state or input has the wrong length");
  }
  const Vec a = mat.C1 * xi_prev.xi + mat.D12 * v;
  Vec nu(s);
  Vec sig(s);
  for (Eigen::Index k = 0; k < s; ++k) {
    double acc = a(k);
    for (Eigen::Index j = 0; j < k; ++j) acc += mat.D11(k, j) * sig(j);
    nu(k) = acc;
    sig(k) = activate(act, acc);
  }
  return nu;
}

RenStepResult ren_step(const RenMatrices& mat, const RenState& xi_prev, const Vec& v, Activation act) {
  if (xi_prev.xi.size() != mat.A1.cols() || v.size() != mat.B2.cols()) {
    throw DimensionError("ren_step: state has length " + std::to_string(xi_prev.xi.size()) +
                         " and input " + std::to_string(v.size()) + ", expected " +
                         std::to_string(mat.A1.cols()) + " and " + std::to_string(mat.B2.cols()));
  }
  RenStepResult res;
  res.nu = equilibrium_solve(mat, xi_prev, v, act);
  res.sigma = res.nu.unaryExpr([act](double x) { return activate(act, x); });
  res.next.xi = mat.A1 * xi_prev.xi + mat.B1 * res.sigma + mat.B2 * v;
  res.z = mat.C2 * xi_prev.xi + mat.D21 * res.sigma + mat.D22 * v;
  return res;
}

RenStepAdjoint ren_step_vjp(const RenMatrices& mat, const RenState& xi_prev, const Vec& v,
                            const RenStepResult& fwd, Activation act, const Vec& xi_bar,
                            const Vec& z_bar, RenMatrices& mat_bar) {
  const Eigen::Index s = mat.D11.rows();
  const Vec sig_bar = mat.B1.transpose() * xi_bar + mat.D21.transpose() * z_bar;
  const Vec slope = fwd.nu.unaryExpr([act](double x) { return activate_slope(act, x); });

  // a_bar = (I - D11 J)^{-T} J sig_bar, an upper-triangular back substitution.
  Vec a_bar(s);
  for (Eigen::Index k = s - 1; k >= 0; --k) {
    double acc = sig_bar(k);
    for (Eigen::Index j = k + 1; j < s; ++j) acc += mat.D11(j, k) * a_bar(j);
    a_bar(k) = slope(k) * acc;
  }

  mat_bar.A1.noalias() += xi_bar * xi_prev.xi.transpose();
  mat_bar.B1.noalias() += xi_bar * fwd.sigma.transpose();
  mat_bar.B2.noalias() += xi_bar * v.transpose();
  mat_bar.C2.noalias() += z_bar * xi_prev.xi.transpose();
  mat_bar.D21.noalias() += z_bar * fwd.sigma.transpose();
  mat_bar.D22.noalias() += z_bar * v.transpose();
  mat_bar.C1.noalias() += a_bar * xi_prev.xi.transpose();
  mat_bar.D12.noalias() += a_bar * v.transpose();
  for (Eigen::Index k = 1; k < s; ++k) {
    mat_bar.D11.row(k).head(k) += a_bar(k) * fwd.sigma.head(k).transpose();
  }

  RenStepAdjoint adj;
  adj.xi_prev = mat.A1.transpose() * xi_bar + mat.C2.transpose() * z_bar + mat.C1.transpose() * a_bar;
  adj.v = mat.B2.transpose() * xi_bar + mat.D22.transpose() * z_bar + mat.D12.transpose() * a_bar;
  return adj;
}

RenRollout ren_rollout(const RenMatrices& mat, const std::vector<Vec>& inputs, Activation act) {
  mat.check_shapes();
  if (inputs.empty()) throw std::invalid_argument("ren_rollout: horizon must be at least 1");
  RenRollout out;
  out.outputs.reserve(inputs.size());
  RenState xi = RenState::zero(static_cast<int>(mat.A1.rows()));
  double in_sq = 0.0, out_sq = 0.0;
  for (const Vec& v : inputs) {
    RenStepResult res = ren_step(mat, xi, v, act);
    in_sq += v.squaredNorm();
    out_sq += res.z.squaredNorm();
    out.outputs.push_back(std::move(res.z));
    xi = std::move(res.next);
  }
  if (in_sq > 0.0) out.gain_ratio = std::sqrt(out_sq / in_sq);
  return out;
}

}  // namespace netren
