#pragma once

#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "netren/ren.hpp"

namespace netren {

/// Undirected graph on nodes 0..nodes-1.
struct Topology {
  int nodes = 0;
  std::vector<std::pair<int, int>> edges;

  /// Rejects self-loops, out-of-range endpoints and duplicate edges.
  void validate() const;
  bool adjacent(int i, int j) const;
  /// N_i: i itself plus every node sharing an edge with it, sorted.
  std::vector<int> neighbors(int i) const;
  /// N_i without i, sorted.
  std::vector<int> strict_neighbors(int i) const;

  static Topology ring(int nodes);
  static Topology chain(int nodes);
};

/// Per-agent sizes: plant state n, plant input m, controller input q and
/// controller output r.
struct AgentDims {
  int n = 1;
  int m = 1;
  int q = 1;
  int r = 1;

  bool operator==(const AgentDims&) const = default;
};

/// Static interconnection of the sub-operators:
///   v = M_vz z + M_vw w_hat,   u = M_uz z.
struct InterconnectionSpec {
  Topology topology;
  std::vector<AgentDims> agents;
  Mat M_vz;  // q x r
  Mat M_vw;  // q x n
  Mat M_uz;  // m x r

  int num_agents() const { return static_cast<int>(agents.size()); }
  int total_n() const;
  int total_m() const;
  int total_q() const;
  int total_r() const;
  int n_offset(int i) const;
  int m_offset(int i) const;
  int q_offset(int i) const;
  int r_offset(int i) const;
};

class InterconnectionError : public std::invalid_argument {
 public:
  InterconnectionError(const std::string& what, int agent, int required)
      : std::invalid_argument(what), agent(agent), required_inputs(required) {}
  int agent;
  int required_inputs;
};

/// Smallest q_i the default layout of build_from_topology accepts.
int default_input_dim(const Topology& topo, const std::vector<AgentDims>& dims, int agent);

/// Canonical interconnection: w_hat^[i] goes to the first n_i slots of v^[i],
/// each neighbour's z block goes to the next slots (neighbours in increasing
/// order, scaled by coupling_weight), and u^[i] reads the first m_i entries of
/// z^[i]. A q_i of 0 is replaced by the minimum the layout needs.
InterconnectionSpec build_from_topology(const Topology& topo, std::vector<AgentDims> dims,
                                        double coupling_weight = 1.0);

struct Violation {
  std::string condition;  // "shape", "a", "b" or "c"
  std::string message;
  int row = -1;
  int col = -1;
};

struct ValidationResult {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
  /// One line per violation.
  std::string summary() const;
};

inline constexpr double kOrthogonalityTol = 1e-12;

/// Checks the structural assumptions the gain allocation relies on:
/// (a) M_vw is a 0/1 matrix with one 1 per column and at most one per row,
/// (b) M_uz^T M_uz is diagonal, (c) block (i, j) of M_vz vanishes unless j is
/// a neighbour of i. Every failing row or column is reported.
ValidationResult validate_interconnection(const InterconnectionSpec& spec);

class ValidationError : public std::invalid_argument {
 public:
  explicit ValidationError(ValidationResult r)
      : std::invalid_argument("interconnection violates the structural assumptions:\n" + r.summary()),
        result(std::move(r)) {}
  ValidationResult result;
};

/// Throws ValidationError if the spec does not validate.
void require_valid(const InterconnectionSpec& spec);

/// Index sets over the stacked input vector v and output vector z (0-based).
struct IndexSets {
  std::vector<std::vector<int>> inputs;     // all v indices of agent i
  std::vector<std::vector<int>> exogenous;  // rows of agent i with (M_vw 1)_k = 1
  std::vector<std::vector<int>> internal;   // rows of agent i with (M_vw 1)_k = 0
  std::vector<std::vector<int>> outputs;    // z indices of agent i
  std::vector<int> out_connected;           // agents with a nonempty exogenous set

  bool is_out_connected(int i) const;
};

IndexSets compute_index_sets(const InterconnectionSpec& spec);

/// Which bound fixed gamma^[i].
enum class GainBranch {
  Exogenous,   // gamma_R^2 / (max row sum over exogenous rows * gamma_R^2 + 1)
  Coupling,    // 1 / max row sum over internal rows
  Unbounded,   // neither bound applies, or alpha = 0: the agent cannot affect u
};

std::string to_string(GainBranch b);

struct GainAllocation {
  double gamma_R = 1.0;
  Vec b;
  Vec alpha;
  Vec gamma;
  Vec h;        // diagonal of M_uz^T M_uz, one entry per z coordinate
  Vec agent_h;  // max of h over each agent's outputs
  Vec bound;    // the min in the gain formula, i.e. alpha * gamma^2 for active agents
  std::vector<GainBranch> branch;
};

/// Gain used for agents whose allocation is unbounded. Their inputs or
/// outputs are disconnected, so any finite value keeps the certificate.
inline constexpr double kUnboundedGain = 1.0;

/// Per-agent weights and gains that certify the interconnection for any b.
GainAllocation allocate_gains(const InterconnectionSpec& spec, const IndexSets& sets, const Vec& b,
                              double gamma_R);

/// d gamma^[i] / d b^[i]; gamma^[i] does not depend on the other b^[j].
Vec gain_sensitivity(const GainAllocation& alloc);

/// d gamma / d gamma_R per agent. Only the exogenous branch depends on gamma_R.
Vec gain_sensitivity_gamma_R(const GainAllocation& alloc);

/// Symmetric (r+n)x(r+n) matrix whose negative semidefiniteness certifies the
/// l2 gain gamma_R of the interconnected operator from w_hat to u.
Mat assemble_lmi(const InterconnectionSpec& spec, const GainAllocation& alloc);

/// Same matrix for explicit weights and gains.
Mat assemble_lmi(const InterconnectionSpec& spec, const Vec& alpha, const Vec& gamma, double gamma_R);

struct SemidefiniteCheck {
  bool feasible = false;
  double max_eigenvalue = 0.0;
  double threshold = 0.0;
};

inline constexpr double kSymmetryTol = 1e-12;
inline constexpr double kLmiTol = 1e-8;

/// feasible iff lambda_max <= tol * max(1, ||m||_F). Throws on asymmetric input.
SemidefiniteCheck check_negative_semidefinite(const Mat& m, double tol = kLmiTol);

struct LmiReport {
  Mat matrix;
  double max_eigenvalue = 0.0;
  bool feasible = false;
  double tolerance = kLmiTol;
};

LmiReport certify(const InterconnectionSpec& spec, const GainAllocation& alloc, double tol = kLmiTol);

/// Intermediate forms of the certificate after the two Schur complement
/// steps. With Pv = blkdiag(alpha gamma^2 I), Pz = blkdiag(alpha I):
///   P1 = M_vw^T Pv M_vw,   P2 = M_vw (gamma_R^2 I - P1)^{-1} M_vw^T,
///   D  = -Pv - Pv P2 Pv.
struct SchurChain {
  Mat P1, P2, D;
  Mat outer_first;   // -M_vz^T Pv M_vz + Pz - H - M_vz^T Pv M_vw (gamma_R^2 I - P1)^{-1} M_vw^T Pv M_vz
  Mat outer_second;  // gamma_R^2 I - P1
  Mat gershgorin;    // [[Pz - H, M_vz^T], [M_vz, -D^{-1}]]; empty when D is singular
};

SchurChain schur_chain(const InterconnectionSpec& spec, const Vec& alpha, const Vec& gamma, double gamma_R);

/// Symmetric positive definiteness via the smallest eigenvalue.
bool positive_definite(const Mat& m, double tol = 0.0);

}  // namespace netren
