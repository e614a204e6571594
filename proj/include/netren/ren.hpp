#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace netren {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Activation { Tanh, ReLU };

double activate(Activation act, double x);
/// Slope of the activation. ReLU uses 0 at the kink.
double activate_slope(Activation act, double x);

Activation parse_activation(const std::string& name);
std::string to_string(Activation act);

/// Sizes of one REN cell: hidden state, neurons, input v, output z.
struct RenDims {
  int state = 1;
  int neurons = 1;
  int inputs = 1;
  int outputs = 1;

  void validate() const;

  /// Length of the flat parameter vector, see RenParamLayout.
  std::size_t param_count() const;

  bool operator==(const RenDims&) const = default;
};

/// Offsets of each block inside the flat parameter vector.
///
/// With c = state, s = neurons, q = inputs, r = outputs and d = 2c + s the
/// vector is the column-major concatenation
///
///   X   (d x d)   free factor of the dissipation matrix
///   Y   (c x c)   skew part of the implicit state matrix E
///   B2  (c x q)   implicit input-to-state matrix
///   C2  (r x c)
///   D21 (r x s)
///   D12 (s x q)   implicit input-to-neuron matrix (scaled by Lambda)
///   D22 (r x q)   raw feedthrough, normalised to spectral norm < gamma
///
/// so n_theta = d^2 + c^2 + cq + rc + rs + sq + rq.
struct RenParamLayout {
  explicit RenParamLayout(const RenDims& dims);

  RenDims dims;
  std::size_t x = 0, y = 0, b2 = 0, c2 = 0, d21 = 0, d12 = 0, d22 = 0, total = 0;
  int d() const { return 2 * dims.state + dims.neurons; }
};

struct RenTheta {
  Vec theta;
  double gamma = 1.0;
};

/// Explicit REN
///   xi_t = A1 xi_{t-1} + B1 sigma(nu_t) + B2 v_t
///   nu_t = C1 xi_{t-1} + D11 sigma(nu_t) + D12 v_t
///   z_t  = C2 xi_{t-1} + D21 sigma(nu_t) + D22 v_t
/// with D11 strictly lower triangular.
struct RenMatrices {
  Mat A1, B1, B2, C1, D11, D12, C2, D21, D22;

  RenDims dims() const;
  /// Zero matrices of the right shapes.
  static RenMatrices zeros(const RenDims& dims);
  void check_shapes() const;

  RenMatrices& operator+=(const RenMatrices& other);
};

struct RenState {
  Vec xi;
  static RenState zero(int state_dim) { return {Vec::Zero(state_dim)}; }
};

/// Added to the dissipation matrix so the storage inequality holds strictly.
inline constexpr double kRenMargin = 1e-3;

/// Maps unconstrained parameters to an acyclic REN whose l2 gain from v to z
/// is at most gamma for every value of theta.
RenMatrices build_ren(const RenTheta& params, const RenDims& dims);

struct RenGradient {
  Vec theta;
  double gamma = 0.0;
};

/// Reverse-mode derivative of build_ren: given d(loss)/d(matrices), returns
/// d(loss)/d(theta) and d(loss)/d(gamma).
RenGradient build_ren_vjp(const RenTheta& params, const RenDims& dims, const RenMatrices& bar);

/// One forward-substitution pass through the neuron layer. Returns nu.
Vec equilibrium_solve(const RenMatrices& mat, const RenState& xi_prev, const Vec& v, Activation act);

struct RenStepResult {
  RenState next;
  Vec z;
  Vec nu;
  Vec sigma;  // sigma(nu)
};

RenStepResult ren_step(const RenMatrices& mat, const RenState& xi_prev, const Vec& v, Activation act);

/// Adjoint of ren_step. Accumulates into mat_bar and returns the adjoints of
/// xi_prev and v.
struct RenStepAdjoint {
  Vec xi_prev;
  Vec v;
};
RenStepAdjoint ren_step_vjp(const RenMatrices& mat, const RenState& xi_prev, const Vec& v,
                            const RenStepResult& fwd, Activation act, const Vec& xi_bar,
                            const Vec& z_bar, RenMatrices& mat_bar);

struct RenRollout {
  std::vector<Vec> outputs;
  /// ||z||_2 / ||v||_2 over the horizon; empty when the input has zero norm.
  std::optional<double> gain_ratio;
};

RenRollout ren_rollout(const RenMatrices& mat, const std::vector<Vec>& inputs, Activation act);

}  // namespace netren
