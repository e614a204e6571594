#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "netren/network.hpp"
#include "netren/ren.hpp"
#include "netren/training.hpp"

namespace netren {

using json = nlohmann::json;

/// Matrices are nested row arrays; an empty matrix is [] with an explicit
/// shape when it has columns.
json matrix_to_json(const Mat& m);
Mat matrix_from_json(const json& j);
json vector_to_json(const Vec& v);
Vec vector_from_json(const json& j);

json topology_to_json(const Topology& t);
/// Accepts {"nodes": N, "edges": [[i, j], ...]} or {"ring": N} / {"chain": N}.
Topology topology_from_json(const json& j);

json agents_to_json(const std::vector<AgentDims>& agents);
std::vector<AgentDims> agents_from_json(const json& j, int nodes);

/// {"topology", "agents": [{n, m, q, r}], "M_vz", "M_vw", "M_uz"}.
json spec_to_json(const InterconnectionSpec& spec);
/// Shapes are checked; the structural assumptions are not.
InterconnectionSpec spec_from_json(const json& j);

json violations_to_json(const ValidationResult& r);
json gains_to_json(const GainAllocation& g);
json lmi_to_json(const LmiReport& r, bool include_matrix = false);

struct Checkpoint {
  TrainState state;
  ControllerArch arch;
  std::uint64_t seed = 0;
  std::string config_hash;
};

json checkpoint_to_json(const Checkpoint& c);
Checkpoint checkpoint_from_json(const json& j);
void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

/// 64-bit FNV-1a, printed as 16 hex digits.
std::string fnv1a_hex(const std::string& text);

json read_json_file(const std::string& path);
void write_json_file(const std::string& path, const json& j);

}  // namespace netren
