#include "netren/plant.hpp"

#include <cmath>
#include <stdexcept>

namespace netren {

std::vector<std::string> Plant::state_labels(int agent) const {
  std::vector<std::string> out;
  for (int k = 0; k < state_dim(agent); ++k) out.push_back(std::to_string(k));
  return out;
}

std::vector<std::string> Plant::input_labels(int agent) const {
  std::vector<std::string> out;
  for (int k = 0; k < input_dim(agent); ++k) out.push_back(std::to_string(k));
  return out;
}

int Plant::total_state() const { return state_offset(num_agents()); }
int Plant::total_input() const { return input_offset(num_agents()); }

int Plant::state_offset(int agent) const {
  int off = 0;
  for (int i = 0; i < agent; ++i) off += state_dim(i);
  return off;
}

int Plant::input_offset(int agent) const {
  int off = 0;
  for (int i = 0; i < agent; ++i) off += input_dim(i);
  return off;
}

Vec Plant::gather_neighbors(int agent, const Vec& x) const {
  const std::vector<int> nb = topology().neighbors(agent);
  int len = 0;
  for (int j : nb) len += state_dim(j);
  Vec out(len);
  int pos = 0;
  for (int j : nb) {
    out.segment(pos, state_dim(j)) = x.segment(state_offset(j), state_dim(j));
    pos += state_dim(j);
  }
  return out;
}

Vec Plant::dynamics(const Vec& x, const Vec& u) const {
  if (x.size() != total_state() || u.size() != total_input()) {
    throw DimensionError("plant dynamics: state or input has the wrong length");
  }
  Vec out(total_state());
  for (int i = 0; i < num_agents(); ++i) {
    out.segment(state_offset(i), state_dim(i)) =
        local_dynamics(i, gather_neighbors(i, x), u.segment(input_offset(i), input_dim(i)));
  }
  return out;
}

void Plant::dynamics_vjp(const Vec& x, const Vec& u, const Vec& out_bar, Vec& x_bar, Vec& u_bar) const {
  for (int i = 0; i < num_agents(); ++i) {
    const Vec xn = gather_neighbors(i, x);
    Vec xn_bar = Vec::Zero(xn.size());
    Vec ui_bar = Vec::Zero(input_dim(i));
    local_dynamics_vjp(i, xn, u.segment(input_offset(i), input_dim(i)),
                       out_bar.segment(state_offset(i), state_dim(i)), xn_bar, ui_bar);
    int pos = 0;
    for (int j : topology().neighbors(i)) {
      x_bar.segment(state_offset(j), state_dim(j)) += xn_bar.segment(pos, state_dim(j));
      pos += state_dim(j);
    }
    u_bar.segment(input_offset(i), input_dim(i)) += ui_bar;
  }
}

void VehicleParams::validate() const {
  const std::size_t n = mass.size();
  if (n == 0) throw std::invalid_argument("vehicle parameters describe no agents");
  if (friction.size() != n || k_neighbor.size() != n || k_reference.size() != n || delta.size() != n ||
      reference.size() != n) {
    throw std::invalid_argument("vehicle parameter lists have inconsistent lengths");
  }
  if (!(sample_time > 0.0)) throw std::invalid_argument("sample time must be positive");
  for (std::size_t i = 0; i < n; ++i) {
    if (!(mass[i] > 0.0) || !(friction[i] > 0.0) || !(k_neighbor[i] > 0.0) || !(k_reference[i] > 0.0) ||
        !(delta[i] > 0.0)) {
      throw std::invalid_argument("vehicle " + std::to_string(i) +
                                  ": mass, friction, gains and formation distance must be positive");
    }
  }
}

std::pair<Vec2, Vec2> vehicle_step(double mass, double friction, double sample_time, const Vec2& p,
                                   const Vec2& v, const Vec2& force, const Vec2& u) {
  const Vec2 drag = -friction * v.norm() * v;
  return {p + sample_time * v, v + (sample_time / mass) * (drag + force + u)};
}

Vec2 base_controller_force(double k_neighbor, double k_reference, double delta, const Vec2& p,
                           std::span<const Vec2> neighbors, const Vec2& reference) {
  Vec2 f = -k_reference * (p - reference);
  for (const Vec2& q : neighbors) {
    const Vec2 d = p - q;
    const double dist = d.norm();
    if (dist < kCoincidentDistance) continue;
    f -= k_neighbor * (dist - delta) * d / dist;
  }
  return f;
}

VehiclePlant::VehiclePlant(VehicleParams params, Topology topology)
    : params_(std::move(params)), topology_(std::move(topology)) {
  params_.validate();
  topology_.validate();
  if (params_.agents() != topology_.nodes) {
    throw std::invalid_argument("vehicle parameters cover " + std::to_string(params_.agents()) +
                                " agents but the topology has " + std::to_string(topology_.nodes));
  }
  for (int i = 0; i < topology_.nodes; ++i) neighborhoods_.push_back(topology_.neighbors(i));
  solve_equilibrium();
}

Vec2 VehiclePlant::force_at(int agent, std::span<const Vec2> pos) const {
  const auto a = static_cast<std::size_t>(agent);
  std::vector<Vec2> nb;
  for (int j : topology_.strict_neighbors(agent)) nb.push_back(pos[static_cast<std::size_t>(j)]);
  return base_controller_force(params_.k_neighbor[a], params_.k_reference[a], params_.delta[a], pos[a], nb,
                               params_.reference[a]);
}

void VehiclePlant::solve_equilibrium() {
  // Newton on the stacked base-controller forces, starting at the references.
  const int N = topology_.nodes;
  std::vector<Vec2> p = params_.reference;
  auto residual = [&](const std::vector<Vec2>& pos) {
    Vec r(2 * N);
    for (int i = 0; i < N; ++i) r.segment<2>(2 * i) = force_at(i, pos);
    return r;
  };
  Vec r = residual(p);
  for (int iter = 0; iter < 100 && r.norm() > 1e-13; ++iter) {
    Mat J(2 * N, 2 * N);
    const double h = 1e-7;
    for (int k = 0; k < 2 * N; ++k) {
      std::vector<Vec2> hi = p, lo = p;
      hi[static_cast<std::size_t>(k / 2)](k % 2) += h;
      lo[static_cast<std::size_t>(k / 2)](k % 2) -= h;
      J.col(k) = (residual(hi) - residual(lo)) / (2 * h);
    }
    const Vec step = J.fullPivLu().solve(-r);
    double scale = 1.0;
    for (int ls = 0; ls < 30; ++ls, scale *= 0.5) {
      std::vector<Vec2> trial = p;
      for (int i = 0; i < N; ++i) trial[static_cast<std::size_t>(i)] += scale * step.segment<2>(2 * i);
      const Vec rt = residual(trial);
      if (rt.norm() < r.norm()) {
        p = std::move(trial);
        r = rt;
        break;
      }
    }
  }
  equilibrium_ = p;
  equilibrium_residual_ = r.norm();
  for (int i = 0; i < N; ++i) rest_force_.push_back(r.segment<2>(2 * i));
}

Vec2 VehiclePlant::position(const Vec& x, int agent) const {
  return x.segment<2>(4 * agent) + equilibrium_[static_cast<std::size_t>(agent)];
}

Vec VehiclePlant::local_dynamics(int agent, const Vec& xn, const Vec& u) const {
  const auto a = static_cast<std::size_t>(agent);
  const std::vector<int>& nb = neighborhoods_[a];
  Vec2 p_self = Vec2::Zero(), v_self = Vec2::Zero();
  std::vector<Vec2> others;
  for (std::size_t k = 0; k < nb.size(); ++k) {
    const Vec2 p = xn.segment<2>(4 * static_cast<Eigen::Index>(k)) + equilibrium_[static_cast<std::size_t>(nb[k])];
    if (nb[k] == agent) {
      p_self = p;
      v_self = xn.segment<2>(4 * static_cast<Eigen::Index>(k) + 2);
    } else {
      others.push_back(p);
    }
  }
  // The solver leaves a force of order 1e-14 at rest; removing it makes the
  // origin an exact fixed point.
  const Vec2 force = base_controller_force(params_.k_neighbor[a], params_.k_reference[a], params_.delta[a], p_self,
                                           others, params_.reference[a]) -
                     rest_force_[a];
  const auto [p_next, v_next] =
      vehicle_step(params_.mass[a], params_.friction[a], params_.sample_time, p_self, v_self, force, u.head<2>());
  Vec out(4);
  out << p_next - equilibrium_[a], v_next;
  return out;
}

void VehiclePlant::local_dynamics_vjp(int agent, const Vec& xn, const Vec& u, const Vec& out_bar,
                                      Vec& xn_bar, Vec& u_bar) const {
  (void)u;
  const auto a = static_cast<std::size_t>(agent);
  const std::vector<int>& nb = neighborhoods_[a];
  const double Ts = params_.sample_time, m = params_.mass[a], c = params_.friction[a];
  const double kn = params_.k_neighbor[a], kr = params_.k_reference[a], delta = params_.delta[a];
  const Vec2 pb = out_bar.head<2>();
  const Vec2 vb = out_bar.tail<2>();
  const Vec2 force_bar = (Ts / m) * vb;

  std::size_t self = 0;
  for (std::size_t k = 0; k < nb.size(); ++k) {
    if (nb[k] == agent) self = k;
  }
  const auto seg = [](std::size_t k, int off) { return 4 * static_cast<Eigen::Index>(k) + off; };
  const Vec2 v = xn.segment<2>(seg(self, 2));
  const Vec2 p_self = xn.segment<2>(seg(self, 0)) + equilibrium_[a];

  // velocity: v + Ts/m (-c |v| v), Jacobian I - Ts c/m (|v| I + v v^T / |v|)
  Vec2 v_bar = vb + Ts * pb;
  const double speed = v.norm();
  if (speed > 0.0) {
    v_bar -= (Ts * c / m) * (speed * vb + v * (v.dot(vb) / speed));
  }
  xn_bar.segment<2>(seg(self, 2)) += v_bar;

  Vec2 p_bar = pb - kr * force_bar;
  for (std::size_t k = 0; k < nb.size(); ++k) {
    if (k == self) continue;
    const Vec2 q = xn.segment<2>(seg(k, 0)) + equilibrium_[static_cast<std::size_t>(nb[k])];
    const Vec2 d = p_self - q;
    const double dist = d.norm();
    if (dist < kCoincidentDistance) continue;
    // spring: -kn (d - delta d / |d|), Jacobian -kn (I - delta (I/|d| - d d^T/|d|^3))
    const Vec2 dd = -kn * (force_bar - delta * (force_bar / dist - d * (d.dot(force_bar) / (dist * dist * dist))));
    p_bar += dd;
    xn_bar.segment<2>(seg(k, 0)) -= dd;
  }
  xn_bar.segment<2>(seg(self, 0)) += p_bar;
  u_bar.head<2>() += force_bar;
}

std::vector<std::string> VehiclePlant::state_labels(int) const { return {"p.x", "p.y", "v.x", "v.y"}; }
std::vector<std::string> VehiclePlant::input_labels(int) const { return {"x", "y"}; }

LinearPlant::LinearPlant(Topology topology, std::vector<std::vector<Mat>> coupling, std::vector<Mat> input)
    : topology_(std::move(topology)), input_(std::move(input)) {
  topology_.validate();
  const auto N = static_cast<std::size_t>(topology_.nodes);
  if (coupling.size() != N || input_.size() != N) {
    throw std::invalid_argument("linear plant: one coupling row and input matrix per agent expected");
  }
  for (std::size_t i = 0; i < N; ++i) {
    const std::vector<int> nb = topology_.neighbors(static_cast<int>(i));
    if (coupling[i].size() != nb.size()) {
      throw std::invalid_argument("linear plant: agent " + std::to_string(i) + " needs one block per neighbour");
    }
    const Eigen::Index rows = input_[i].rows();
    Eigen::Index cols = 0;
    for (const Mat& blk : coupling[i]) cols += blk.cols();
    Mat row(rows, cols);
    Eigen::Index pos = 0;
    for (const Mat& blk : coupling[i]) {
      if (blk.rows() != rows) throw std::invalid_argument("linear plant: block row count mismatch");
      row.middleCols(pos, blk.cols()) = blk;
      pos += blk.cols();
    }
    row_.push_back(std::move(row));
  }
  for (std::size_t i = 0; i < N; ++i) {
    Eigen::Index expected = 0;
    for (int j : topology_.neighbors(static_cast<int>(i))) expected += input_[static_cast<std::size_t>(j)].rows();
    if (row_[i].cols() != expected) throw std::invalid_argument("linear plant: coupling block widths mismatch");
  }
}

int LinearPlant::state_dim(int agent) const { return static_cast<int>(input_[static_cast<std::size_t>(agent)].rows()); }
int LinearPlant::input_dim(int agent) const { return static_cast<int>(input_[static_cast<std::size_t>(agent)].cols()); }

Vec LinearPlant::local_dynamics(int agent, const Vec& xn, const Vec& u) const {
  const auto a = static_cast<std::size_t>(agent);
  return row_[a] * xn + input_[a] * u;
}

void LinearPlant::local_dynamics_vjp(int agent, const Vec&, const Vec&, const Vec& out_bar, Vec& xn_bar,
                                     Vec& u_bar) const {
  const auto a = static_cast<std::size_t>(agent);
  xn_bar += row_[a].transpose() * out_bar;
  u_bar += input_[a].transpose() * out_bar;
}

Vec reconstruct_noise(const Plant& plant, int agent, const Vec& x_t, const Vec& x_prev, const Vec& u_prev) {
  const Vec predicted = plant.local_dynamics(agent, plant.gather_neighbors(agent, x_prev),
                                             u_prev.segment(plant.input_offset(agent), plant.input_dim(agent)));
  return x_t.segment(plant.state_offset(agent), plant.state_dim(agent)) - predicted;
}

std::vector<Vec> NoiseModel::sample(std::mt19937_64& rng) const {
  if (initial_mean.size() != initial_std.size()) {
    throw DimensionError("noise model mean and standard deviation differ in length");
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Vec> out;
  Vec w0(initial_mean.size());
  for (Eigen::Index k = 0; k < w0.size(); ++k) w0(k) = initial_mean(k) + initial_std(k) * normal(rng);
  out.push_back(std::move(w0));
  for (int t = 1; t < support; ++t) {
    Vec w(initial_mean.size());
    for (Eigen::Index k = 0; k < w.size(); ++k) w(k) = process_std * normal(rng);
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace netren
