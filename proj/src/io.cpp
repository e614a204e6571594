#include "netren/io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace netren {

json matrix_to_json(const Mat& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index k = 0; k < m.cols(); ++k) row.push_back(m(i, k));
    rows.push_back(std::move(row));
  }
  if (m.rows() == 0 && m.cols() > 0) return json{{"rows", 0}, {"cols", m.cols()}};
  return rows;
}

Mat matrix_from_json(const json& j) {
  if (j.is_object()) {
    const int r = j.at("rows").get<int>(), c = j.at("cols").get<int>();
    if (r != 0) throw std::invalid_argument("shape-only matrix literal must have zero rows");
    return Mat(0, c);
  }
  if (!j.is_array()) throw std::invalid_argument("matrix must be an array of rows");
  if (j.empty()) return Mat(0, 0);
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const json& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
      throw std::invalid_argument("matrix rows differ in length");
    }
    for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = row[static_cast<std::size_t>(k)].get<double>();
  }
  return m;
}

json vector_to_json(const Vec& v) {
  json a = json::array();
  for (Eigen::Index k = 0; k < v.size(); ++k) a.push_back(v(k));
  return a;
}

Vec vector_from_json(const json& j) {
  if (!j.is_array()) throw std::invalid_argument("vector must be an array");
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t k = 0; k < j.size(); ++k) v(static_cast<Eigen::Index>(k)) = j[k].get<double>();
  return v;
}

json topology_to_json(const Topology& t) {
  json edges = json::array();
  for (auto [a, b] : t.edges) edges.push_back({a, b});
  return {{"nodes", t.nodes}, {"edges", edges}};
}

Topology topology_from_json(const json& j) {
  Topology t;
  if (j.contains("ring")) {
    t = Topology::ring(j.at("ring").get<int>());
  } else if (j.contains("chain")) {
    t = Topology::chain(j.at("chain").get<int>());
  } else {
    t.nodes = j.at("nodes").get<int>();
    for (const json& e : j.value("edges", json::array())) {
      if (!e.is_array() || e.size() != 2) throw std::invalid_argument("edge must be a pair of node indices");
      t.edges.emplace_back(e[0].get<int>(), e[1].get<int>());
    }
  }
  t.validate();
  return t;
}

json agents_to_json(const std::vector<AgentDims>& agents) {
  json a = json::array();
  for (const AgentDims& d : agents) a.push_back({{"n", d.n}, {"m", d.m}, {"q", d.q}, {"r", d.r}});
  return a;
}

std::vector<AgentDims> agents_from_json(const json& j, int nodes) {
  auto one = [](const json& e) {
    AgentDims d;
    d.n = e.at("n").get<int>();
    d.m = e.at("m").get<int>();
    d.q = e.value("q", 0);
    d.r = e.value("r", d.m);
    return d;
  };
  std::vector<AgentDims> out;
  if (j.is_object()) {
    out.assign(static_cast<std::size_t>(nodes), one(j));
  } else {
    for (const json& e : j) out.push_back(one(e));
  }
  if (static_cast<int>(out.size()) != nodes) {
    throw std::invalid_argument("agent table has " + std::to_string(out.size()) + " entries for " +
                                std::to_string(nodes) + " nodes");
  }
  return out;
}

json spec_to_json(const InterconnectionSpec& spec) {
  return {{"topology", topology_to_json(spec.topology)},
          {"agents", agents_to_json(spec.agents)},
          {"M_vz", matrix_to_json(spec.M_vz)},
          {"M_vw", matrix_to_json(spec.M_vw)},
          {"M_uz", matrix_to_json(spec.M_uz)}};
}

InterconnectionSpec spec_from_json(const json& j) {
  InterconnectionSpec s;
  s.topology = topology_from_json(j.at("topology"));
  s.agents = agents_from_json(j.at("agents"), s.topology.nodes);
  s.M_vz = matrix_from_json(j.at("M_vz"));
  s.M_vw = matrix_from_json(j.at("M_vw"));
  s.M_uz = matrix_from_json(j.at("M_uz"));
  auto expect = [](const Mat& m, int r, int c, const char* name) {
    if (m.rows() != r || m.cols() != c) {
      throw DimensionError(std::string(name) + " is " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                           ", expected " + std::to_string(r) + "x" + std::to_string(c));
    }
  };
  expect(s.M_vz, s.total_q(), s.total_r(), "M_vz");
  expect(s.M_vw, s.total_q(), s.total_n(), "M_vw");
  expect(s.M_uz, s.total_m(), s.total_r(), "M_uz");
  return s;
}

json violations_to_json(const ValidationResult& r) {
  json list = json::array();
  for (const Violation& v : r.violations) {
    list.push_back({{"condition", v.condition}, {"message", v.message}, {"row", v.row}, {"col", v.col}});
  }
  return {{"ok", r.ok()}, {"violations", list}};
}

json gains_to_json(const GainAllocation& g) {
  json agents = json::array();
  for (Eigen::Index i = 0; i < g.gamma.size(); ++i) {
    agents.push_back({{"agent", i},
                      {"b", g.b(i)},
                      {"h", g.agent_h(i)},
                      {"alpha", g.alpha(i)},
                      {"gamma", g.gamma(i)},
                      {"branch", to_string(g.branch[static_cast<std::size_t>(i)])}});
  }
  return {{"gamma_R", g.gamma_R}, {"agents", agents}, {"h", vector_to_json(g.h)}};
}

json lmi_to_json(const LmiReport& r, bool include_matrix) {
  json j{{"max_eigenvalue", r.max_eigenvalue},
         {"feasible", r.feasible},
         {"tolerance", r.tolerance},
         {"size", r.matrix.rows()}};
  if (include_matrix) j["matrix"] = matrix_to_json(r.matrix);
  return j;
}

namespace {

json vec_list(const std::vector<Vec>& vs) {
  json a = json::array();
  for (const Vec& v : vs) a.push_back(vector_to_json(v));
  return a;
}

std::vector<Vec> vec_list_from(const json& j) {
  std::vector<Vec> out;
  for (const json& e : j) out.push_back(vector_from_json(e));
  return out;
}

}  // namespace

json checkpoint_to_json(const Checkpoint& c) {
  const TrainState& s = c.state;
  return {{"format", "netren-checkpoint"},
          {"version", 1},
          {"epoch", s.epoch},
          {"seed", c.seed},
          {"config_hash", c.config_hash},
          {"arch",
           {{"state_dim", c.arch.state_dim},
            {"neurons", c.arch.neurons},
            {"activation", to_string(c.arch.activation)}}},
          {"params", {{"gamma_R", s.params.gamma_R}, {"b", vector_to_json(s.params.b)}, {"theta", vec_list(s.params.theta)}}},
          {"loss_history", s.loss_history},
          {"gain_history", vec_list(s.gain_history)},
          {"lmi_history", s.lmi_history},
          {"optimizer",
           {{"steps", s.optimizer.steps},
            {"theta_m", vec_list(s.optimizer.theta_m)},
            {"theta_v", vec_list(s.optimizer.theta_v)},
            {"b_m", vector_to_json(s.optimizer.b_m)},
            {"b_v", vector_to_json(s.optimizer.b_v)},
            {"log_gamma_R_m", vector_to_json(s.optimizer.log_gamma_R_m)},
            {"log_gamma_R_v", vector_to_json(s.optimizer.log_gamma_R_v)}}},
          {"rng_state", s.rng_state},
          {"final_loss", s.final_loss}};
}

Checkpoint checkpoint_from_json(const json& j) {
  if (j.value("format", "") != "netren-checkpoint") throw std::invalid_argument("not a checkpoint file");
  Checkpoint c;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.config_hash = j.at("config_hash").get<std::string>();
  const json& a = j.at("arch");
  c.arch.state_dim = a.at("state_dim").get<int>();
  c.arch.neurons = a.at("neurons").get<int>();
  c.arch.activation = parse_activation(a.at("activation").get<std::string>());
  TrainState& s = c.state;
  s.epoch = j.at("epoch").get<int>();
  const json& p = j.at("params");
  s.params.gamma_R = p.at("gamma_R").get<double>();
  s.params.b = vector_from_json(p.at("b"));
  s.params.theta = vec_list_from(p.at("theta"));
  s.loss_history = j.at("loss_history").get<std::vector<double>>();
  s.gain_history = vec_list_from(j.at("gain_history"));
  s.lmi_history = j.value("lmi_history", std::vector<double>{});
  const json& o = j.at("optimizer");
  s.optimizer.steps = o.at("steps").get<long>();
  s.optimizer.theta_m = vec_list_from(o.at("theta_m"));
  s.optimizer.theta_v = vec_list_from(o.at("theta_v"));
  s.optimizer.b_m = vector_from_json(o.at("b_m"));
  s.optimizer.b_v = vector_from_json(o.at("b_v"));
  if (o.contains("log_gamma_R_m")) s.optimizer.log_gamma_R_m = vector_from_json(o.at("log_gamma_R_m"));
  if (o.contains("log_gamma_R_v")) s.optimizer.log_gamma_R_v = vector_from_json(o.at("log_gamma_R_v"));
  s.rng_state = j.value("rng_state", "");
  s.final_loss = j.value("final_loss", 0.0);
  return c;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  try {
    return json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << '\n';
}

void save_checkpoint(const std::string& path, const Checkpoint& c) { write_json_file(path, checkpoint_to_json(c)); }

Checkpoint load_checkpoint(const std::string& path) { return checkpoint_from_json(read_json_file(path)); }

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace netren
