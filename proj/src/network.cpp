#include "netren/network.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace netren {

void Topology::validate() const {
  if (nodes < 1) throw std::invalid_argument("topology needs at least one node");
  std::set<std::pair<int, int>> seen;
  for (auto [a, b] : edges) {
    if (a < 0 || b < 0 || a >= nodes || b >= nodes) {
      throw std::invalid_argument("edge {" + std::to_string(a) + "," + std::to_string(b) +
                                  "} references a node outside 0.." + std::to_string(nodes - 1));
    }
    if (a == b) throw std::invalid_argument("self-loop on node " + std::to_string(a));
    if (!seen.insert({std::min(a, b), std::max(a, b)}).second) {
      throw std::invalid_argument("duplicate edge {" + std::to_string(a) + "," + std::to_string(b) + "}");
    }
  }
}

bool Topology::adjacent(int i, int j) const {
  return std::any_of(edges.begin(), edges.end(), [&](const auto& e) {
    return (e.first == i && e.second == j) || (e.first == j && e.second == i);
  });
}

std::vector<int> Topology::neighbors(int i) const {
  std::vector<int> out = strict_neighbors(i);
  out.insert(std::lower_bound(out.begin(), out.end(), i), i);
  return out;
}

std::vector<int> Topology::strict_neighbors(int i) const {
  std::set<int> s;
  for (auto [a, b] : edges) {
    if (a == i && b != i) s.insert(b);
    if (b == i && a != i) s.insert(a);
  }
  return {s.begin(), s.end()};
}

Topology Topology::ring(int nodes) {
  Topology t{nodes, {}};
  if (nodes == 2) {
    t.edges.emplace_back(0, 1);
  } else if (nodes > 2) {
    for (int i = 0; i < nodes; ++i) t.edges.emplace_back(i, (i + 1) % nodes);
  }
  return t;
}

Topology Topology::chain(int nodes) {
  Topology t{nodes, {}};
  for (int i = 0; i + 1 < nodes; ++i) t.edges.emplace_back(i, i + 1);
  return t;
}

namespace {

int sum_of(const std::vector<AgentDims>& a, int AgentDims::*field, int upto) {
  int s = 0;
  for (int i = 0; i < upto; ++i) s += a[static_cast<std::size_t>(i)].*field;
  return s;
}

}  // namespace

int InterconnectionSpec::total_n() const { return sum_of(agents, &AgentDims::n, num_agents()); }
int InterconnectionSpec::total_m() const { return sum_of(agents, &AgentDims::m, num_agents()); }
int InterconnectionSpec::total_q() const { return sum_of(agents, &AgentDims::q, num_agents()); }
int InterconnectionSpec::total_r() const { return sum_of(agents, &AgentDims::r, num_agents()); }
int InterconnectionSpec::n_offset(int i) const { return sum_of(agents, &AgentDims::n, i); }
int InterconnectionSpec::m_offset(int i) const { return sum_of(agents, &AgentDims::m, i); }
int InterconnectionSpec::q_offset(int i) const { return sum_of(agents, &AgentDims::q, i); }
int InterconnectionSpec::r_offset(int i) const { return sum_of(agents, &AgentDims::r, i); }

int default_input_dim(const Topology& topo, const std::vector<AgentDims>& dims, int agent) {
  int q = dims[static_cast<std::size_t>(agent)].n;
  for (int j : topo.strict_neighbors(agent)) q += dims[static_cast<std::size_t>(j)].r;
  return q;
}

InterconnectionSpec build_from_topology(const Topology& topo, std::vector<AgentDims> dims,
                                        double coupling_weight) {
  topo.validate();
  if (static_cast<int>(dims.size()) != topo.nodes) {
    throw std::invalid_argument("expected dimensions for " + std::to_string(topo.nodes) +
                                " agents, got " + std::to_string(dims.size()));
  }
  for (int i = 0; i < topo.nodes; ++i) {
    AgentDims& d = dims[static_cast<std::size_t>(i)];
    if (d.n < 1 || d.m < 1 || d.r < 1 || d.q < 0) {
      throw std::invalid_argument("agent " + std::to_string(i) + ": dimensions must be positive");
    }
    if (d.r < d.m) {
      throw InterconnectionError("agent " + std::to_string(i) + ": r_i = " + std::to_string(d.r) +
                                     " is smaller than m_i = " + std::to_string(d.m),
                                 i, 0);
    }
  }
  for (int i = 0; i < topo.nodes; ++i) {
    const int need = default_input_dim(topo, dims, i);
    AgentDims& d = dims[static_cast<std::size_t>(i)];
    if (d.q == 0) d.q = need;
    if (d.q < need) {
      throw InterconnectionError("agent " + std::to_string(i) + ": q_i = " + std::to_string(d.q) +
                                     " cannot host its disturbance and neighbour outputs; the default "
                                     "layout requires q_i >= " + std::to_string(need),
                                 i, need);
    }
  }

  InterconnectionSpec spec;
  spec.topology = topo;
  spec.agents = dims;
  spec.M_vz = Mat::Zero(spec.total_q(), spec.total_r());
  spec.M_vw = Mat::Zero(spec.total_q(), spec.total_n());
  spec.M_uz = Mat::Zero(spec.total_m(), spec.total_r());
  for (int i = 0; i < topo.nodes; ++i) {
    const AgentDims& d = dims[static_cast<std::size_t>(i)];
    const int q0 = spec.q_offset(i);
    for (int k = 0; k < d.n; ++k) spec.M_vw(q0 + k, spec.n_offset(i) + k) = 1.0;
    int slot = q0 + d.n;
    for (int j : topo.strict_neighbors(i)) {
      const int rj = dims[static_cast<std::size_t>(j)].r;
      for (int k = 0; k < rj; ++k) spec.M_vz(slot++, spec.r_offset(j) + k) = coupling_weight;
    }
    for (int k = 0; k < d.m; ++k) spec.M_uz(spec.m_offset(i) + k, spec.r_offset(i) + k) = 1.0;
  }
  return spec;
}

std::string ValidationResult::summary() const {
  std::ostringstream os;
  for (const auto& v : violations) os << "  (" << v.condition << ") " << v.message << "\n";
  return os.str();
}

namespace {

int owner(const std::vector<AgentDims>& agents, int AgentDims::*field, int index) {
  int acc = 0;
  for (std::size_t i = 0; i < agents.size(); ++i) {
    acc += agents[i].*field;
    if (index < acc) return static_cast<int>(i);
  }
  return -1;
}

}  // namespace

ValidationResult validate_interconnection(const InterconnectionSpec& spec) {
  ValidationResult res;
  auto add = [&](std::string cond, std::string msg, int row = -1, int col = -1) {
    res.violations.push_back({std::move(cond), std::move(msg), row, col});
  };

  try {
    spec.topology.validate();
  } catch (const std::invalid_argument& e) {
    add("shape", std::string("topology: ") + e.what());
    return res;
  }
  if (spec.num_agents() != spec.topology.nodes) {
    add("shape", "topology has " + std::to_string(spec.topology.nodes) + " nodes but " +
                     std::to_string(spec.num_agents()) + " agent dimension entries are given");
    return res;
  }
  for (int i = 0; i < spec.num_agents(); ++i) {
    const AgentDims& d = spec.agents[static_cast<std::size_t>(i)];
    if (d.n < 1 || d.m < 1 || d.q < 1 || d.r < 1) {
      add("shape", "agent " + std::to_string(i) + " has a non-positive dimension");
    } else {
      if (d.q < d.n) add("shape", "agent " + std::to_string(i) + ": q_i < n_i");
      if (d.r < d.m) add("shape", "agent " + std::to_string(i) + ": r_i < m_i");
    }
  }
  if (!res.ok()) return res;

  const int q = spec.total_q(), r = spec.total_r(), n = spec.total_n(), m = spec.total_m();
  auto shape = [&](const Mat& M, int rows, int cols, const char* name) {
    if (M.rows() != rows || M.cols() != cols) {
      add("shape", std::string(name) + " is " + std::to_string(M.rows()) + "x" + std::to_string(M.cols()) +
                       ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
    }
  };
  shape(spec.M_vz, q, r, "M_vz");
  shape(spec.M_vw, q, n, "M_vw");
  shape(spec.M_uz, m, r, "M_uz");
  if (!res.ok()) return res;

  // (a)
  for (int k = 0; k < q; ++k) {
    for (int j = 0; j < n; ++j) {
      const double e = spec.M_vw(k, j);
      if (e != 0.0 && e != 1.0) {
        add("a", "M_vw(" + std::to_string(k) + "," + std::to_string(j) + ") = " + std::to_string(e) +
                     " is not 0 or 1", k, j);
      }
    }
  }
  for (int j = 0; j < n; ++j) {
    const double s = spec.M_vw.col(j).sum();
    if (s != 1.0) {
      add("a", "column " + std::to_string(j) + " of M_vw sums to " + std::to_string(s) + " (expected 1)",
          -1, j);
    }
  }
  for (int k = 0; k < q; ++k) {
    const double s = spec.M_vw.row(k).sum();
    if (s > 1.0) {
      add("a", "row " + std::to_string(k) + " of M_vw sums to " + std::to_string(s) + " (expected <= 1)",
          k, -1);
    }
  }

  // (b)
  const Mat HH = spec.M_uz.transpose() * spec.M_uz;
  for (int a = 0; a < r; ++a) {
    for (int b = 0; b < r; ++b) {
      if (a != b && std::abs(HH(a, b)) > kOrthogonalityTol) {
        if (a < b) {
          add("b", "columns " + std::to_string(a) + " and " + std::to_string(b) +
                       " of M_uz are not orthogonal (inner product " + std::to_string(HH(a, b)) + ")",
              a, b);
        }
      }
    }
  }

  // (c)
  for (int k = 0; k < q; ++k) {
    const int i = owner(spec.agents, &AgentDims::q, k);
    for (int j = 0; j < r; ++j) {
      if (spec.M_vz(k, j) == 0.0) continue;
      const int src = owner(spec.agents, &AgentDims::r, j);
      if (src != i && !spec.topology.adjacent(i, src)) {
        add("c", "M_vz(" + std::to_string(k) + "," + std::to_string(j) + ") couples agent " +
                     std::to_string(src) + " into agent " + std::to_string(i) + ", which are not neighbours",
            k, j);
      }
    }
  }
  return res;
}

void require_valid(const InterconnectionSpec& spec) {
  ValidationResult r = validate_interconnection(spec);
  if (!r.ok()) throw ValidationError(std::move(r));
}

bool IndexSets::is_out_connected(int i) const {
  return std::find(out_connected.begin(), out_connected.end(), i) != out_connected.end();
}

IndexSets compute_index_sets(const InterconnectionSpec& spec) {
  const int N = spec.num_agents();
  IndexSets sets;
  sets.inputs.resize(static_cast<std::size_t>(N));
  sets.exogenous.resize(static_cast<std::size_t>(N));
  sets.internal.resize(static_cast<std::size_t>(N));
  sets.outputs.resize(static_cast<std::size_t>(N));
  const Vec row_hits = spec.M_vw.rowwise().sum();
  for (int i = 0; i < N; ++i) {
    const auto si = static_cast<std::size_t>(i);
    const AgentDims& d = spec.agents[si];
    for (int k = spec.q_offset(i); k < spec.q_offset(i) + d.q; ++k) {
      sets.inputs[si].push_back(k);
      (row_hits(k) == 1.0 ? sets.exogenous[si] : sets.internal[si]).push_back(k);
    }
    for (int j = spec.r_offset(i); j < spec.r_offset(i) + d.r; ++j) sets.outputs[si].push_back(j);
    if (!sets.exogenous[si].empty()) sets.out_connected.push_back(i);
  }
  return sets;
}

std::string to_string(GainBranch b) {
  switch (b) {
    case GainBranch::Exogenous:
      return "exogenous";
    case GainBranch::Coupling:
      return "coupling";
    case GainBranch::Unbounded:
      return "unbounded";
  }
  return "?";
}

GainAllocation allocate_gains(const InterconnectionSpec& spec, const IndexSets& sets, const Vec& b,
                              double gamma_R) {
  if (!(gamma_R > 0.0) || !std::isfinite(gamma_R)) {
    throw std::invalid_argument("gamma_R must be positive and finite");
  }
  const int N = spec.num_agents();
  if (b.size() != N) {
    throw DimensionError("b has " + std::to_string(b.size()) + " entries for " + std::to_string(N) + " agents");
  }
  GainAllocation g;
  g.gamma_R = gamma_R;
  g.b = b;
  g.alpha = Vec::Zero(N);
  g.gamma = Vec::Zero(N);
  g.agent_h = Vec::Zero(N);
  g.bound = Vec::Constant(N, std::numeric_limits<double>::infinity());
  g.branch.assign(static_cast<std::size_t>(N), GainBranch::Unbounded);
  g.h = (spec.M_uz.transpose() * spec.M_uz).diagonal();

  const Mat absM = spec.M_vz.cwiseAbs();
  const Vec col_sums = absM.colwise().sum().transpose();
  const Vec row_sums = absM.rowwise().sum();
  const double gR2 = gamma_R * gamma_R;

  const auto max_over = [](const std::vector<int>& idx, const Vec& v) {
    double mx = 0.0;
    for (int k : idx) mx = std::max(mx, v(k));
    return mx;
  };

  for (int i = 0; i < N; ++i) {
    const auto si = static_cast<std::size_t>(i);
    g.agent_h(i) = max_over(sets.outputs[si], g.h);
    g.alpha(i) = g.agent_h(i) + max_over(sets.outputs[si], col_sums) + b(i) * b(i);

    double bound = std::numeric_limits<double>::infinity();
    GainBranch branch = GainBranch::Unbounded;
    if (!sets.exogenous[si].empty()) {
      bound = gR2 / (max_over(sets.exogenous[si], row_sums) * gR2 + 1.0);
      branch = GainBranch::Exogenous;
    }
    const double internal_max = max_over(sets.internal[si], row_sums);
    if (internal_max > 0.0 && 1.0 / internal_max < bound) {
      bound = 1.0 / internal_max;
      branch = GainBranch::Coupling;
    }
    if (branch == GainBranch::Unbounded || g.alpha(i) == 0.0) {
      g.branch[si] = GainBranch::Unbounded;
      g.gamma(i) = kUnboundedGain;
      continue;
    }
    g.bound(i) = bound;
    g.branch[si] = branch;
    g.gamma(i) = std::sqrt(bound / g.alpha(i));
  }
  return g;
}

Vec gain_sensitivity(const GainAllocation& alloc) {
  const Eigen::Index N = alloc.gamma.size();
  Vec d = Vec::Zero(N);
  for (Eigen::Index i = 0; i < N; ++i) {
    if (alloc.branch[static_cast<std::size_t>(i)] == GainBranch::Unbounded) continue;
    d(i) = -alloc.gamma(i) * alloc.b(i) / alloc.alpha(i);
  }
  return d;
}

Vec gain_sensitivity_gamma_R(const GainAllocation& alloc) {
  const Eigen::Index N = alloc.gamma.size();
  Vec d = Vec::Zero(N);
  const double gR3 = alloc.gamma_R * alloc.gamma_R * alloc.gamma_R;
  for (Eigen::Index i = 0; i < N; ++i) {
    if (alloc.branch[static_cast<std::size_t>(i)] != GainBranch::Exogenous) continue;
    // bound = gR^2 / (s gR^2 + 1) has d bound / d gR = 2 bound^2 / gR^3.
    d(i) = alloc.alpha(i) * std::pow(alloc.gamma(i), 3) / gR3;
  }
  return d;
}

namespace {

Vec input_weights(const InterconnectionSpec& spec, const Vec& alpha, const Vec& gamma) {
  Vec pv(spec.total_q());
  for (int i = 0; i < spec.num_agents(); ++i) {
    pv.segment(spec.q_offset(i), spec.agents[static_cast<std::size_t>(i)].q)
        .setConstant(alpha(i) * gamma(i) * gamma(i));
  }
  return pv;
}

Vec output_weights(const InterconnectionSpec& spec, const Vec& alpha) {
  Vec pz(spec.total_r());
  for (int i = 0; i < spec.num_agents(); ++i) {
    pz.segment(spec.r_offset(i), spec.agents[static_cast<std::size_t>(i)].r).setConstant(alpha(i));
  }
  return pz;
}

}  // namespace

Mat assemble_lmi(const InterconnectionSpec& spec, const Vec& alpha, const Vec& gamma, double gamma_R) {
  const int N = spec.num_agents();
  if (alpha.size() != N || gamma.size() != N) throw DimensionError("allocation size does not match the spec");
  const int q = spec.total_q(), r = spec.total_r(), n = spec.total_n(), m = spec.total_m();
  if (spec.M_vz.rows() != q || spec.M_vz.cols() != r || spec.M_vw.rows() != q || spec.M_vw.cols() != n ||
      spec.M_uz.rows() != m || spec.M_uz.cols() != r) {
    throw DimensionError("interconnection matrices do not match the agent dimensions");
  }

  // Stacked map (z, w_hat) -> (v, z, w_hat, u).
  Mat L = Mat::Zero(q + r + n + m, r + n);
  L.block(0, 0, q, r) = spec.M_vz;
  L.block(0, r, q, n) = spec.M_vw;
  L.block(q, 0, r, r).setIdentity();
  L.block(q + r, r, n, n).setIdentity();
  L.block(q + r + n, 0, m, r) = spec.M_uz;

  Vec weights(q + r + n + m);
  weights.segment(0, q) = input_weights(spec, alpha, gamma);
  weights.segment(q, r) = -output_weights(spec, alpha);
  weights.segment(q + r, n).setConstant(-gamma_R * gamma_R);
  weights.segment(q + r + n, m).setConstant(1.0);

  Mat out = L.transpose() * weights.asDiagonal() * L;
  return 0.5 * (out + out.transpose());
}

Mat assemble_lmi(const InterconnectionSpec& spec, const GainAllocation& alloc) {
  return assemble_lmi(spec, alloc.alpha, alloc.gamma, alloc.gamma_R);
}

SemidefiniteCheck check_negative_semidefinite(const Mat& m, double tol) {
  if (m.rows() != m.cols()) throw DimensionError("matrix must be square");
  const double fro = m.norm();
  const double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
  if (asym > kSymmetryTol * std::max(1.0, fro)) {
    throw std::invalid_argument("matrix is not symmetric (max asymmetry " + std::to_string(asym) + ")");
  }
  Eigen::SelfAdjointEigenSolver<Mat> eig(m, Eigen::EigenvaluesOnly);
  SemidefiniteCheck out;
  out.max_eigenvalue = eig.eigenvalues().maxCoeff();
  out.threshold = tol * std::max(1.0, fro);
  out.feasible = out.max_eigenvalue <= out.threshold;
  return out;
}

LmiReport certify(const InterconnectionSpec& spec, const GainAllocation& alloc, double tol) {
  LmiReport rep;
  rep.matrix = assemble_lmi(spec, alloc);
  const SemidefiniteCheck chk = check_negative_semidefinite(rep.matrix, tol);
  rep.max_eigenvalue = chk.max_eigenvalue;
  rep.feasible = chk.feasible;
  rep.tolerance = tol;
  return rep;
}

bool positive_definite(const Mat& m, double tol) {
  if (m.size() == 0) return true;
  Eigen::SelfAdjointEigenSolver<Mat> eig(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  return eig.eigenvalues().minCoeff() > tol;
}

SchurChain schur_chain(const InterconnectionSpec& spec, const Vec& alpha, const Vec& gamma, double gamma_R) {
  const int q = spec.total_q(), r = spec.total_r(), n = spec.total_n();
  const Vec pv = input_weights(spec, alpha, gamma);
  const Vec pz = output_weights(spec, alpha);
  const Mat Pv = pv.asDiagonal();
  const Mat H = spec.M_uz.transpose() * spec.M_uz;

  SchurChain sc;
  sc.P1 = spec.M_vw.transpose() * Pv * spec.M_vw;
  sc.outer_second = gamma_R * gamma_R * Mat::Identity(n, n) - sc.P1;
  const Mat inner_inv = sc.outer_second.inverse();
  sc.P2 = spec.M_vw * inner_inv * spec.M_vw.transpose();
  sc.D = -Pv - Pv * sc.P2 * Pv;
  sc.outer_first = -spec.M_vz.transpose() * Pv * spec.M_vz + Mat(pz.asDiagonal()) - H -
                   spec.M_vz.transpose() * Pv * spec.M_vw * inner_inv * spec.M_vw.transpose() * Pv * spec.M_vz;

  Eigen::FullPivLU<Mat> lu(sc.D);
  if (lu.isInvertible()) {
    sc.gershgorin = Mat::Zero(r + q, r + q);
    sc.gershgorin.topLeftCorner(r, r) = Mat(pz.asDiagonal()) - H;
    sc.gershgorin.topRightCorner(r, q) = spec.M_vz.transpose();
    sc.gershgorin.bottomLeftCorner(q, r) = spec.M_vz;
    sc.gershgorin.bottomRightCorner(q, q) = -lu.inverse();
  }
  return sc;
}

}  // namespace netren
