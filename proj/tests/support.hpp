#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "netren/network.hpp"
#include "netren/plant.hpp"
#include "netren/ren.hpp"

namespace testing_support {

using namespace netren;

inline Vec randn(std::mt19937_64& rng, Eigen::Index n, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Vec v(n);
  for (Eigen::Index k = 0; k < n; ++k) v(k) = g(rng);
  return v;
}

inline Mat randm(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index k = 0; k < c; ++k) m(i, k) = g(rng);
  return m;
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Random interconnection that satisfies the structural assumptions:
/// w^[i] lands on random rows of agent i's input block, u^[i] reads scaled
/// distinct outputs of agent i, and M_vz is dense-ish inside the neighbour
/// blocks.
inline InterconnectionSpec random_spec(std::mt19937_64& rng, int min_nodes = 2, int max_nodes = 6, int max_dim = 4) {
  InterconnectionSpec s;
  const int N = uniform_int(rng, min_nodes, max_nodes);
  s.topology.nodes = N;
  for (int i = 0; i < N; ++i)
    for (int j = i + 1; j < N; ++j)
      if (uniform(rng, 0, 1) < 0.5) s.topology.edges.emplace_back(i, j);
  for (int i = 0; i < N; ++i) {
    AgentDims d;
    d.n = uniform_int(rng, 1, max_dim);
    d.m = uniform_int(rng, 1, max_dim);
    d.q = uniform_int(rng, d.n, max_dim);
    d.r = uniform_int(rng, d.m, max_dim);
    s.agents.push_back(d);
  }
  s.M_vz = Mat::Zero(s.total_q(), s.total_r());
  s.M_vw = Mat::Zero(s.total_q(), s.total_n());
  s.M_uz = Mat::Zero(s.total_m(), s.total_r());
  for (int i = 0; i < N; ++i) {
    const AgentDims& d = s.agents[static_cast<std::size_t>(i)];
    std::vector<int> rows(static_cast<std::size_t>(d.q));
    std::iota(rows.begin(), rows.end(), 0);
    std::shuffle(rows.begin(), rows.end(), rng);
    for (int k = 0; k < d.n; ++k) s.M_vw(s.q_offset(i) + rows[static_cast<std::size_t>(k)], s.n_offset(i) + k) = 1.0;
    std::vector<int> cols(static_cast<std::size_t>(d.r));
    std::iota(cols.begin(), cols.end(), 0);
    std::shuffle(cols.begin(), cols.end(), rng);
    for (int k = 0; k < d.m; ++k) {
      s.M_uz(s.m_offset(i) + k, s.r_offset(i) + cols[static_cast<std::size_t>(k)]) = uniform(rng, 0.5, 2.0);
    }
    for (int j : s.topology.neighbors(i)) {
      const AgentDims& dj = s.agents[static_cast<std::size_t>(j)];
      for (int a = 0; a < d.q; ++a)
        for (int b = 0; b < dj.r; ++b)
          if (uniform(rng, 0, 1) < 0.5) s.M_vz(s.q_offset(i) + a, s.r_offset(j) + b) = uniform(rng, -1.5, 1.5);
    }
  }
  return s;
}

/// Random instance with M_vw = I and M_uz^T M_uz = I.
inline InterconnectionSpec random_identity_spec(std::mt19937_64& rng) {
  InterconnectionSpec s;
  const int N = uniform_int(rng, 2, 6);
  s.topology.nodes = N;
  for (int i = 0; i < N; ++i)
    for (int j = i + 1; j < N; ++j)
      if (uniform(rng, 0, 1) < 0.5) s.topology.edges.emplace_back(i, j);
  for (int i = 0; i < N; ++i) {
    const int k = uniform_int(rng, 1, 4);
    s.agents.push_back({k, k, k, k});
  }
  const int q = s.total_q();
  s.M_vw = Mat::Identity(q, q);
  s.M_uz = Mat::Identity(q, q);
  s.M_vz = Mat::Zero(q, q);
  for (int i = 0; i < N; ++i)
    for (int j : s.topology.strict_neighbors(i))
      for (int a = 0; a < s.agents[static_cast<std::size_t>(i)].q; ++a)
        for (int b = 0; b < s.agents[static_cast<std::size_t>(j)].r; ++b)
          if (uniform(rng, 0, 1) < 0.6) s.M_vz(s.q_offset(i) + a, s.r_offset(j) + b) = uniform(rng, -1.0, 1.0);
  return s;
}

/// Gamma of the closed form for M_vw = I, H = I:
/// sqrt(gamma_R^2 / (alpha (max_row * gamma_R^2 + 1))).
inline Vec identity_closed_form(const InterconnectionSpec& s, const Vec& b, double gamma_R) {
  Vec g(s.num_agents());
  for (int i = 0; i < s.num_agents(); ++i) {
    const AgentDims& d = s.agents[static_cast<std::size_t>(i)];
    double colmax = 0.0, rowmax = 0.0;
    for (int k = 0; k < d.r; ++k) colmax = std::max(colmax, s.M_vz.col(s.r_offset(i) + k).cwiseAbs().sum());
    for (int k = 0; k < d.q; ++k) rowmax = std::max(rowmax, s.M_vz.row(s.q_offset(i) + k).cwiseAbs().sum());
    const double alpha = 1.0 + colmax + b(i) * b(i);
    g(i) = std::sqrt(gamma_R * gamma_R / (alpha * (rowmax * gamma_R * gamma_R + 1.0)));
  }
  return g;
}

inline double max_eig(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  return es.eigenvalues().maxCoeff();
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

inline std::vector<Vec> random_sequence(std::mt19937_64& rng, int T, int dim, double scale = 1.0) {
  std::vector<Vec> seq;
  for (int t = 0; t < T; ++t) seq.push_back(randn(rng, dim, scale));
  return seq;
}

/// The desk benchmark fleet: ring of four, unit masses and gains, formation
/// distances 4 / 1.5 / 4 / 1.5, sample time 0.05.
inline VehicleParams benchmark_params() {
  VehicleParams p;
  p.sample_time = 0.05;
  p.mass.assign(4, 1.0);
  p.friction.assign(4, 1.0);
  p.k_neighbor.assign(4, 1.0);
  p.k_reference.assign(4, 1.0);
  p.delta = {4.0, 1.5, 4.0, 1.5};
  p.reference = {{-2.0, -4.0}, {0.0, -2.1}, {2.0, -4.0}, {0.0, -5.9}};
  return p;
}

}  // namespace testing_support
