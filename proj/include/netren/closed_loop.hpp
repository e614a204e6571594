#pragma once

#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "netren/network.hpp"
#include "netren/plant.hpp"
#include "netren/ren.hpp"

namespace netren {

/// Deployed controller: one REN per agent, wired by the interconnection.
struct ControllerNetwork {
  InterconnectionSpec spec;
  GainAllocation gains;
  std::vector<RenMatrices> cells;
  Activation activation = Activation::Tanh;

  /// Checks that every cell matches its agent's (q_i, r_i).
  void check() const;

  /// Controller whose RENs output zero for every input.
  static ControllerNetwork zero(const InterconnectionSpec& spec, int state_dim, int neurons);
};

/// Signals of one closed-loop run, t = 0..T. xi[t][i] is agent i's REN state
/// after step t.
struct RolloutRecord {
  std::vector<Vec> x, u, w, what, v, z;
  std::vector<std::vector<Vec>> xi;

  int horizon() const { return static_cast<int>(x.size()) - 1; }
};

/// Per-step neuron values kept for the reverse pass.
struct RolloutTape {
  std::vector<std::vector<RenStepResult>> steps;  // [t][agent]
};

inline constexpr double kDivergenceThreshold = 1e6;

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, int time, int epoch = -1, int sample = -1)
      : std::runtime_error(what), time(time), epoch(epoch), sample(sample) {}
  int time;
  int epoch;
  int sample;
};

/// Simulates plant and controller for t = 0..T. noise[t] is w_t; entries
/// past the end of noise are zero. Inter-agent outputs reach the neighbours
/// one sample late: v_t = M_vz z_{t-1} + M_vw w_hat_t with z_{-1} = 0.
RolloutRecord closed_loop_rollout(const Plant& plant, const ControllerNetwork& controller,
                                  const std::vector<Vec>& noise, int T, RolloutTape* tape = nullptr);

/// CSV with one row per t: t, x[i].<state>, u[i].<input>, what[i].<state>.
void write_rollout_csv(std::ostream& os, const RolloutRecord& rec, const Plant& plant);

struct RolloutTable {
  std::vector<std::string> header;
  std::vector<Vec> x, u, what;
};

/// Reads back a file written by write_rollout_csv.
RolloutTable read_rollout_csv(std::istream& is);

struct RolloutSummary {
  double head_energy = 0.0;  // sum_{t <= T/2} |x_t|^2
  double tail_energy = 0.0;  // sum_{t > T/2} |x_t|^2
  double max_speed = 0.0;
  double min_distance = 0.0;  // between any two agents over the run
};

RolloutSummary summarize(const RolloutRecord& rec, const VehiclePlant& plant);

/// Head/tail state energy split at T/2.
std::pair<double, double> energy_split(const RolloutRecord& rec);

}  // namespace netren
