#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "netren/closed_loop.hpp"
#include "netren/network.hpp"
#include "netren/plant.hpp"
#include "netren/ren.hpp"

namespace netren {

struct Obstacle {
  Vec2 center = Vec2::Zero();
  Eigen::Matrix2d shape = Eigen::Matrix2d::Identity();  // points with (p-c)^T shape^{-1} (p-c) < 1 are inside
};

struct FormationLink {
  int i = 0;
  int j = 0;
  double distance = 1.0;
};

/// Stage cost l(x, u) = [x; u]^T Q [x; u] + collision + obstacle + formation
/// penalties. The geometric terms read agent i's position as
/// x(position_index[i] + {0, 1}) + position_offset[i]; they are skipped when
/// position_index is empty.
struct LossConfig {
  Mat Q;
  double collision_distance = 0.5;
  double collision_weight = 0.0;
  std::vector<Obstacle> obstacles;
  double obstacle_weight = 0.0;
  std::vector<FormationLink> formation;
  double formation_weight = 0.0;
  double barrier_eps = 1e-3;
  std::vector<int> position_index;
  std::vector<Vec2> position_offset;

  /// Checks sizes against (n, m) and Q >= 0.
  void validate(int n, int m) const;
};

/// LossConfig for a vehicle fleet: Q as given, positions read from the state layout.
LossConfig vehicle_loss(const VehiclePlant& plant, Mat Q);

struct StageLossTerms {
  double trajectory = 0.0;
  double collision = 0.0;
  double obstacle = 0.0;
  double formation = 0.0;
  double total() const { return trajectory + collision + obstacle + formation; }
};

StageLossTerms stage_loss_terms(const LossConfig& cfg, const Vec& x, const Vec& u);
double stage_loss(const LossConfig& cfg, const Vec& x, const Vec& u);
/// Value of stage_loss; adds its gradient to gx and gu.
double stage_loss_grad(const LossConfig& cfg, const Vec& x, const Vec& u, Vec& gx, Vec& gu);

/// Free parameters: one theta per agent, one scalar b per agent, and the
/// network gain gamma_R, which is held fixed.
struct TrainableParams {
  std::vector<Vec> theta;
  Vec b;
  double gamma_R = 1.0;
};

struct ControllerArch {
  int state_dim = 1;
  int neurons = 1;
  Activation activation = Activation::Tanh;

  RenDims cell(const AgentDims& d) const { return {state_dim, neurons, d.q, d.r}; }
};

/// Everything that stays fixed while the parameters move.
struct TrainingProblem {
  const Plant* plant = nullptr;
  InterconnectionSpec spec;
  IndexSets sets;
  ControllerArch arch;
  LossConfig loss;
  int horizon = 1;

  TrainingProblem(const Plant& plant, InterconnectionSpec spec, ControllerArch arch, LossConfig loss, int horizon);
};

/// theta ~ N(0, theta_std^2), b ~ N(0, 1).
TrainableParams init_params(const TrainingProblem& problem, double gamma_R, std::mt19937_64& rng,
                            double theta_std = 0.02);

/// gamma = eta(b) via the gain allocation, then one REN per agent.
ControllerNetwork make_controller(const TrainingProblem& problem, const TrainableParams& params);

/// Empirical loss of a fixed controller network.
double rollout_loss(const TrainingProblem& problem, const ControllerNetwork& net,
                    const std::vector<std::vector<Vec>>& samples);

/// rollout_loss and its gradient with respect to every REN matrix.
struct ControllerGradient {
  double loss = 0.0;
  std::vector<RenMatrices> cells;
};

ControllerGradient controller_gradient(const TrainingProblem& problem, const ControllerNetwork& net,
                                       const std::vector<std::vector<Vec>>& samples);

/// (1/n_exp) sum_s sum_{t=0}^{T} l(x_t^s, u_t^s).
double empirical_loss(const TrainingProblem& problem, const TrainableParams& params,
                      const std::vector<std::vector<Vec>>& samples);

struct GradientRecord {
  double loss = 0.0;
  std::vector<Vec> theta;
  Vec b;
  double gamma_R = 0.0;
  std::size_t tape_steps = 0;  // REN steps recorded on the tape
  int rollouts = 0;
};

/// Loss and its exact gradient by reverse accumulation through the gain
/// allocation, the REN parametrization and the unrolled closed loop. The
/// reconstructed disturbance equals the injected one for every parameter
/// value, so it is a constant of the reverse pass.
GradientRecord grad_params(const TrainingProblem& problem, const TrainableParams& params,
                           const std::vector<std::vector<Vec>>& samples);

/// Threads used for per-sample work; NETREN_THREADS overrides the default of 1.
int worker_threads();

enum class Optimizer { GradientDescent, Momentum, Adam };
Optimizer parse_optimizer(const std::string& name);
std::string to_string(Optimizer opt);

struct TrainingConfig {
  double learning_rate = 1e-3;
  int epochs = 1;
  int samples = 1;
  int horizon = 1;
  std::uint64_t seed = 0;
  bool resample = false;
  Optimizer optimizer = Optimizer::GradientDescent;
  double momentum = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool debug_certify = false;
  int checkpoint_every = 0;
  /// Also descend on gamma_R, through its logarithm so it stays positive.
  bool train_gamma_R = false;

  void validate() const;
};

struct OptimizerState {
  std::vector<Vec> theta_m, theta_v;
  Vec b_m, b_v;
  Vec log_gamma_R_m = Vec::Zero(1), log_gamma_R_v = Vec::Zero(1);
  long steps = 0;
};

/// Progress of a training run; a checkpoint stores exactly this.
struct TrainState {
  TrainableParams params;
  int epoch = 0;  // completed epochs
  std::vector<double> loss_history;
  std::vector<Vec> gain_history;
  std::vector<double> lmi_history;  // max eigenvalue per epoch when certifying
  OptimizerState optimizer;
  std::string rng_state;
  double final_loss = 0.0;
};

class CertificationError : public std::runtime_error {
 public:
  CertificationError(const std::string& what, int epoch, double max_eigenvalue)
      : std::runtime_error(what), epoch(epoch), max_eigenvalue(max_eigenvalue) {}
  int epoch;
  double max_eigenvalue;
};

using EpochCallback = std::function<void(const TrainState&)>;

/// Fixed set of initial disturbances for the run.
std::vector<std::vector<Vec>> draw_samples(const NoiseModel& noise, int count, std::mt19937_64& rng);

/// Runs epochs state.epoch+1 .. cfg.epochs. Each epoch records the loss and
/// gains of the current parameters and then takes one descent step.
/// on_epoch runs after every epoch.
TrainState train(const TrainingProblem& problem, const TrainingConfig& cfg, const NoiseModel& noise,
                 TrainState state, const EpochCallback& on_epoch = {});

}  // namespace netren
