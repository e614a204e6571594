#include "netren/closed_loop.hpp"

#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <tuple>

namespace netren {

void ControllerNetwork::check() const {
  const int N = spec.num_agents();
  if (static_cast<int>(cells.size()) != N) {
    throw DimensionError("controller has " + std::to_string(cells.size()) + " cells for " + std::to_string(N) +
                         " agents");
  }
  for (int i = 0; i < N; ++i) {
    const RenMatrices& m = cells[static_cast<std::size_t>(i)];
    m.check_shapes();
    const AgentDims& d = spec.agents[static_cast<std::size_t>(i)];
    if (m.B2.cols() != d.q || m.C2.rows() != d.r) {
      throw DimensionError("cell " + std::to_string(i) + " does not match q_i = " + std::to_string(d.q) +
                           ", r_i = " + std::to_string(d.r));
    }
  }
}

ControllerNetwork ControllerNetwork::zero(const InterconnectionSpec& spec, int state_dim, int neurons) {
  ControllerNetwork net;
  net.spec = spec;
  net.gains = allocate_gains(spec, compute_index_sets(spec), Vec::Zero(spec.num_agents()), 1.0);
  for (const AgentDims& d : spec.agents) {
    net.cells.push_back(RenMatrices::zeros({state_dim, neurons, d.q, d.r}));
  }
  return net;
}

RolloutRecord closed_loop_rollout(const Plant& plant, const ControllerNetwork& ctrl, const std::vector<Vec>& noise,
                                  int T, RolloutTape* tape) {
  if (T < 1) throw std::invalid_argument("closed_loop_rollout: T must be at least 1");
  ctrl.check();
  const InterconnectionSpec& spec = ctrl.spec;
  const int N = spec.num_agents();
  const int n = plant.total_state(), m = plant.total_input();
  if (plant.num_agents() != N || spec.total_n() != n || spec.total_m() != m) {
    throw DimensionError("plant and controller disagree on the agent dimensions");
  }
  for (int i = 0; i < N; ++i) {
    if (plant.state_dim(i) != spec.agents[static_cast<std::size_t>(i)].n ||
        plant.input_dim(i) != spec.agents[static_cast<std::size_t>(i)].m) {
      throw DimensionError("agent " + std::to_string(i) + ": plant and controller dimensions differ");
    }
  }
  if (noise.empty()) throw std::invalid_argument("closed_loop_rollout: need at least w_0");
  for (const Vec& w : noise) {
    if (w.size() != n) throw DimensionError("noise sample has the wrong length");
  }

  RolloutRecord rec;
  const auto steps = static_cast<std::size_t>(T) + 1;
  for (auto* seq : {&rec.x, &rec.u, &rec.w, &rec.what, &rec.v, &rec.z}) seq->reserve(steps);
  rec.xi.reserve(steps);
  if (tape) {
    tape->steps.clear();
    tape->steps.reserve(steps);
  }

  std::vector<RenState> xi;
  for (const RenMatrices& c : ctrl.cells) xi.push_back(RenState::zero(static_cast<int>(c.A1.rows())));
  Vec z_prev = Vec::Zero(spec.total_r());

  for (int t = 0; t <= T; ++t) {
    const Vec w = static_cast<std::size_t>(t) < noise.size() ? noise[static_cast<std::size_t>(t)] : Vec::Zero(n);
    Vec x(n), what(n);
    if (t == 0) {
      x = w;
      what = x;
    } else {
      const Vec& xp = rec.x.back();
      const Vec& up = rec.u.back();
      x = plant.dynamics(xp, up) + w;
      for (int i = 0; i < N; ++i) {
        what.segment(plant.state_offset(i), plant.state_dim(i)) = reconstruct_noise(plant, i, x, xp, up);
      }
    }
    if (!x.allFinite() || x.lpNorm<Eigen::Infinity>() > kDivergenceThreshold) {
      throw DivergenceError("closed-loop state diverged at t = " + std::to_string(t), t);
    }

    const Vec v = spec.M_vz * z_prev + spec.M_vw * what;
    Vec z(spec.total_r());
    std::vector<Vec> xi_t;
    std::vector<RenStepResult> tape_t;
    for (int i = 0; i < N; ++i) {
      const auto si = static_cast<std::size_t>(i);
      const AgentDims& d = spec.agents[si];
      RenStepResult res = ren_step(ctrl.cells[si], xi[si], v.segment(spec.q_offset(i), d.q), ctrl.activation);
      z.segment(spec.r_offset(i), d.r) = res.z;
      xi[si] = res.next;
      xi_t.push_back(res.next.xi);
      if (tape) tape_t.push_back(std::move(res));
    }
    const Vec u = spec.M_uz * z;

    rec.x.push_back(std::move(x));
    rec.u.push_back(u);
    rec.w.push_back(w);
    rec.what.push_back(std::move(what));
    rec.v.push_back(v);
    rec.z.push_back(z);
    rec.xi.push_back(std::move(xi_t));
    if (tape) tape->steps.push_back(std::move(tape_t));
    z_prev = std::move(z);
  }
  return rec;
}

void write_rollout_csv(std::ostream& os, const RolloutRecord& rec, const Plant& plant) {
  const int N = plant.num_agents();
  os << "t";
  for (const char* prefix : {"x", "u", "what"}) {
    for (int i = 0; i < N; ++i) {
      const auto labels = std::string(prefix) == "u" ? plant.input_labels(i) : plant.state_labels(i);
      for (const auto& l : labels) os << ',' << prefix << '[' << i << "]." << l;
    }
  }
  os << '\n';
  os << std::setprecision(17);
  for (std::size_t t = 0; t < rec.x.size(); ++t) {
    os << t;
    for (const Vec* v : {&rec.x[t], &rec.u[t], &rec.what[t]}) {
      for (Eigen::Index k = 0; k < v->size(); ++k) os << ',' << (*v)(k);
    }
    os << '\n';
  }
}

RolloutTable read_rollout_csv(std::istream& is) {
  RolloutTable tab;
  std::string line;
  if (!std::getline(is, line)) throw std::invalid_argument("rollout CSV is empty");
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) tab.header.push_back(cell);
  }
  if (tab.header.empty() || tab.header.front() != "t") throw std::invalid_argument("rollout CSV lacks a t column");
  std::vector<int> kind(tab.header.size(), -1);  // 0 x, 1 u, 2 what
  int counts[3] = {0, 0, 0};
  for (std::size_t c = 1; c < tab.header.size(); ++c) {
    const std::string& h = tab.header[c];
    const int k = h.rfind("x[", 0) == 0 ? 0 : h.rfind("u[", 0) == 0 ? 1 : h.rfind("what[", 0) == 0 ? 2 : -1;
    if (k < 0) throw std::invalid_argument("unexpected rollout CSV column '" + h + "'");
    kind[c] = k;
    ++counts[k];
  }
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(ss, cell, ',')) vals.push_back(std::stod(cell));
    if (vals.size() != tab.header.size()) throw std::invalid_argument("rollout CSV row has the wrong width");
    Vec x(counts[0]), u(counts[1]), w(counts[2]);
    int pos[3] = {0, 0, 0};
    for (std::size_t c = 1; c < vals.size(); ++c) {
      Vec& dst = kind[c] == 0 ? x : kind[c] == 1 ? u : w;
      dst(pos[kind[c]]++) = vals[c];
    }
    tab.x.push_back(std::move(x));
    tab.u.push_back(std::move(u));
    tab.what.push_back(std::move(w));
  }
  return tab;
}

std::pair<double, double> energy_split(const RolloutRecord& rec) {
  const int T = rec.horizon();
  double head = 0.0, tail = 0.0;
  for (int t = 0; t <= T; ++t) {
    const double e = rec.x[static_cast<std::size_t>(t)].squaredNorm();
    (2 * t <= T ? head : tail) += e;
  }
  return {head, tail};
}

RolloutSummary summarize(const RolloutRecord& rec, const VehiclePlant& plant) {
  RolloutSummary s;
  std::tie(s.head_energy, s.tail_energy) = energy_split(rec);
  s.min_distance = std::numeric_limits<double>::infinity();
  const int N = plant.num_agents();
  for (const Vec& x : rec.x) {
    for (int i = 0; i < N; ++i) {
      s.max_speed = std::max(s.max_speed, x.segment<2>(4 * i + 2).norm());
      for (int j = i + 1; j < N; ++j) {
        s.min_distance = std::min(s.min_distance, (plant.position(x, i) - plant.position(x, j)).norm());
      }
    }
  }
  return s;
}

}  // namespace netren
