#pragma once

#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "netren/network.hpp"

namespace netren {

using Vec2 = Eigen::Vector2d;

/// Network of strictly causal subsystems
///   x^[i]_t = f^[i](x^{N_i}_{t-1}, u^[i]_{t-1}) + w^[i]_t.
/// f^[i] only ever sees the states of N_i, stacked in increasing agent order.
class Plant {
 public:
  virtual ~Plant() = default;

  virtual const Topology& topology() const = 0;
  virtual int state_dim(int agent) const = 0;
  virtual int input_dim(int agent) const = 0;

  virtual Vec local_dynamics(int agent, const Vec& x_neighbors, const Vec& u_agent) const = 0;

  /// Adjoint of local_dynamics: adds J_x^T out_bar and J_u^T out_bar.
  virtual void local_dynamics_vjp(int agent, const Vec& x_neighbors, const Vec& u_agent, const Vec& out_bar,
                                  Vec& x_neighbors_bar, Vec& u_agent_bar) const = 0;

  virtual std::vector<std::string> state_labels(int agent) const;
  virtual std::vector<std::string> input_labels(int agent) const;

  int num_agents() const { return topology().nodes; }
  int total_state() const;
  int total_input() const;
  int state_offset(int agent) const;
  int input_offset(int agent) const;

  /// x^{N_i} gathered from a global state.
  Vec gather_neighbors(int agent, const Vec& x) const;
  /// Global f(x, u).
  Vec dynamics(const Vec& x, const Vec& u) const;
  /// Adjoint of dynamics: adds into x_bar and u_bar.
  void dynamics_vjp(const Vec& x, const Vec& u, const Vec& out_bar, Vec& x_bar, Vec& u_bar) const;
};

struct VehicleParams {
  double sample_time = 0.05;
  std::vector<double> mass;
  std::vector<double> friction;
  std::vector<double> k_neighbor;
  std::vector<double> k_reference;
  std::vector<double> delta;
  std::vector<Vec2> reference;

  int agents() const { return static_cast<int>(mass.size()); }
  void validate() const;
};

/// p_next = p + Ts v,  v_next = v + Ts/m (-c |v| v + F + u).
std::pair<Vec2, Vec2> vehicle_step(double mass, double friction, double sample_time, const Vec2& p,
                                   const Vec2& v, const Vec2& force, const Vec2& u);

/// Below this separation the spring direction between two agents is taken as 0.
inline constexpr double kCoincidentDistance = 1e-9;

/// Formation springs along the unit directions to the neighbours plus a
/// proportional pull towards the reference point.
Vec2 base_controller_force(double k_neighbor, double k_reference, double delta, const Vec2& p,
                           std::span<const Vec2> neighbors, const Vec2& reference);

/// Point-mass vehicles with quadratic drag and a formation base controller.
/// The state of agent i is (p - p_eq, v) where p_eq is the rest formation of
/// the base controller, so the origin is an equilibrium.
class VehiclePlant final : public Plant {
 public:
  VehiclePlant(VehicleParams params, Topology topology);

  const Topology& topology() const override { return topology_; }
  int state_dim(int) const override { return 4; }
  int input_dim(int) const override { return 2; }

  Vec local_dynamics(int agent, const Vec& x_neighbors, const Vec& u_agent) const override;
  void local_dynamics_vjp(int agent, const Vec& x_neighbors, const Vec& u_agent, const Vec& out_bar,
                          Vec& x_neighbors_bar, Vec& u_agent_bar) const override;

  std::vector<std::string> state_labels(int agent) const override;
  std::vector<std::string> input_labels(int agent) const override;

  const VehicleParams& params() const { return params_; }
  /// Rest positions of the base-controlled fleet.
  const std::vector<Vec2>& equilibrium() const { return equilibrium_; }
  /// Residual force norm left by the rest-formation solve.
  double equilibrium_residual() const { return equilibrium_residual_; }

  /// Absolute position of agent i in the global state x.
  Vec2 position(const Vec& x, int agent) const;

 private:
  Vec2 force_at(int agent, std::span<const Vec2> absolute_positions) const;
  void solve_equilibrium();

  VehicleParams params_;
  Topology topology_;
  std::vector<std::vector<int>> neighborhoods_;
  std::vector<Vec2> equilibrium_;
  std::vector<Vec2> rest_force_;
  double equilibrium_residual_ = 0.0;
};

/// Linear subsystems x^[i]_t = sum_{j in N_i} A_ij x^[j]_{t-1} + B_i u^[i]_{t-1}.
class LinearPlant final : public Plant {
 public:
  /// coupling[i] holds the blocks A_ij for j in N_i, in increasing j.
  LinearPlant(Topology topology, std::vector<std::vector<Mat>> coupling, std::vector<Mat> input);

  const Topology& topology() const override { return topology_; }
  int state_dim(int agent) const override;
  int input_dim(int agent) const override;
  Vec local_dynamics(int agent, const Vec& x_neighbors, const Vec& u_agent) const override;
  void local_dynamics_vjp(int agent, const Vec& x_neighbors, const Vec& u_agent, const Vec& out_bar,
                          Vec& x_neighbors_bar, Vec& u_agent_bar) const override;

 private:
  Topology topology_;
  std::vector<Mat> row_;  // [A_ij ...] stacked horizontally
  std::vector<Mat> input_;
};

/// w_hat^[i]_t = x^[i]_t - f^[i](x^{N_i}_{t-1}, u^[i]_{t-1}), for t >= 1.
Vec reconstruct_noise(const Plant& plant, int agent, const Vec& x_t, const Vec& x_prev, const Vec& u_prev);

/// Disturbance sampler: w_0 ~ N(mean, diag(std^2)), then support - 1 further
/// steps of N(0, process_std^2) noise, zero afterwards.
struct NoiseModel {
  Vec initial_mean;
  Vec initial_std;
  int support = 1;
  double process_std = 0.0;

  std::vector<Vec> sample(std::mt19937_64& rng) const;
};

}  // namespace netren
