#include "netren/experiment.hpp"

namespace netren {

namespace {

// Separates the parameter-initialisation stream from the sample stream.
constexpr std::uint64_t kInitStream = 0x9e3779b97f4a7c15ULL;

std::vector<double> per_agent(const json& j, int N, const char* name) {
  if (j.is_number()) return std::vector<double>(static_cast<std::size_t>(N), j.get<double>());
  auto v = j.get<std::vector<double>>();
  if (static_cast<int>(v.size()) != N) {
    throw ConfigError(std::string(name) + " lists " + std::to_string(v.size()) + " values for " + std::to_string(N) +
                      " agents");
  }
  return v;
}

Vec2 point(const json& j) {
  if (!j.is_array() || j.size() != 2) throw ConfigError("points are [x, y] pairs");
  return {j[0].get<double>(), j[1].get<double>()};
}

Mat weight_matrix(const json& j, int size) {
  if (j.is_null()) return Mat::Identity(size, size);
  if (j.is_array()) return matrix_from_json(j);
  if (j.contains("diag")) return vector_from_json(j.at("diag")).asDiagonal();
  if (j.contains("blkdiag")) {
    std::vector<std::pair<int, double>> blocks;
    int total = 0;
    for (const json& b : j.at("blkdiag")) {
      blocks.emplace_back(b.at(0).get<int>(), b.at(1).get<double>());
      total += blocks.back().first;
    }
    Mat Q = Mat::Zero(total, total);
    int pos = 0;
    for (auto [n, s] : blocks) {
      Q.block(pos, pos, n, n) = s * Mat::Identity(n, n);
      pos += n;
    }
    return Q;
  }
  throw ConfigError("Q must be a matrix, {\"diag\": [...]} or {\"blkdiag\": [[size, scale], ...]}");
}

std::unique_ptr<Plant> make_linear(const json& j, const Topology& topo, const std::vector<AgentDims>& dims) {
  const int N = topo.nodes;
  std::vector<std::vector<Mat>> coupling(static_cast<std::size_t>(N));
  std::vector<Mat> input;
  const bool explicit_blocks = j.contains("coupling");
  for (int i = 0; i < N; ++i) {
    const auto si = static_cast<std::size_t>(i);
    const AgentDims& di = dims[si];
    const auto nb = topo.neighbors(i);
    for (std::size_t k = 0; k < nb.size(); ++k) {
      const AgentDims& dj = dims[static_cast<std::size_t>(nb[k])];
      if (explicit_blocks) {
        coupling[si].push_back(matrix_from_json(j.at("coupling").at(si).at(k)));
      } else {
        const double s = nb[k] == i ? j.value("self", 0.5) : j.value("neighbor", 0.0);
        coupling[si].push_back(s * Mat::Identity(di.n, dj.n));
      }
    }
    if (j.contains("inputs")) {
      input.push_back(matrix_from_json(j.at("inputs").at(si)));
    } else {
      input.push_back(j.value("input", 1.0) * Mat::Identity(di.n, di.m));
    }
  }
  return std::make_unique<LinearPlant>(topo, std::move(coupling), std::move(input));
}

std::unique_ptr<VehiclePlant> make_vehicles(const json& j, const Topology& topo) {
  const int N = topo.nodes;
  VehicleParams p;
  p.sample_time = j.value("sample_time", 0.05);
  p.mass = per_agent(j.value("mass", json(1.0)), N, "mass");
  p.friction = per_agent(j.value("friction", json(1.0)), N, "friction");
  p.k_neighbor = per_agent(j.value("k_neighbor", json(1.0)), N, "k_neighbor");
  p.k_reference = per_agent(j.value("k_reference", json(1.0)), N, "k_reference");
  p.delta = per_agent(j.at("delta"), N, "delta");
  for (const json& r : j.at("reference")) p.reference.push_back(point(r));
  return std::make_unique<VehiclePlant>(std::move(p), topo);
}

}  // namespace

TrainingProblem Experiment::problem() const { return TrainingProblem(*plant, spec, arch, loss, training.horizon); }

Experiment load_experiment(const json& cfg) {
  Experiment ex;
  ex.source = cfg;
  try {
    ex.name = cfg.value("name", "experiment");
    const Topology topo = topology_from_json(cfg.at("topology"));
    const int N = topo.nodes;

    const json& plant_cfg = cfg.at("plant");
    const std::string kind = plant_cfg.value("type", "vehicle");
    std::vector<AgentDims> dims;
    if (cfg.contains("agents")) {
      dims = agents_from_json(cfg.at("agents"), N);
    } else if (kind == "vehicle") {
      dims.assign(static_cast<std::size_t>(N), AgentDims{4, 2, 0, 2});
    } else {
      throw ConfigError("missing agent dimension table");
    }

    const json ic = cfg.value("interconnection", json::object());
    if (ic.contains("M_vz")) {
      json sj = ic;
      sj["topology"] = topology_to_json(topo);
      sj["agents"] = agents_to_json(dims);
      ex.spec = spec_from_json(sj);
    } else {
      ex.spec = build_from_topology(topo, dims, ic.value("coupling_weight", 1.0));
    }
    require_valid(ex.spec);
    dims = ex.spec.agents;

    if (kind == "vehicle") {
      auto v = make_vehicles(plant_cfg, topo);
      ex.vehicles = v.get();
      ex.plant = std::move(v);
    } else if (kind == "linear") {
      ex.plant = make_linear(plant_cfg, topo, dims);
    } else {
      throw ConfigError("unknown plant type '" + kind + "'");
    }
    const int n = ex.plant->total_state(), m = ex.plant->total_input();
    for (int i = 0; i < N; ++i) {
      const AgentDims& d = dims[static_cast<std::size_t>(i)];
      if (d.n != ex.plant->state_dim(i) || d.m != ex.plant->input_dim(i)) {
        throw ConfigError("agent " + std::to_string(i) + ": interconnection and plant dimensions differ");
      }
    }

    const json nz = cfg.value("noise", json::object());
    ex.noise.initial_mean = Vec::Zero(n);
    if (nz.contains("initial_mean")) ex.noise.initial_mean = vector_from_json(nz.at("initial_mean"));
    if (nz.contains("initial_position")) {
      if (!ex.vehicles) throw ConfigError("initial_position needs the vehicle plant");
      const json& pos = nz.at("initial_position");
      if (static_cast<int>(pos.size()) != N) throw ConfigError("initial_position needs one point per agent");
      for (int i = 0; i < N; ++i) {
        ex.noise.initial_mean.segment<2>(4 * i) =
            point(pos[static_cast<std::size_t>(i)]) - ex.vehicles->equilibrium()[static_cast<std::size_t>(i)];
      }
    }
    const json sd = nz.value("initial_std", json(0.0));
    ex.noise.initial_std = sd.is_number() ? Vec::Constant(n, sd.get<double>()) : vector_from_json(sd);
    if (ex.noise.initial_mean.size() != n || ex.noise.initial_std.size() != n) {
      throw ConfigError("noise mean and std need one entry per state");
    }
    ex.noise.support = nz.value("support", 1);
    ex.noise.process_std = nz.value("process_std", 0.0);

    const json cc = cfg.value("controller", json::object());
    ex.arch.state_dim = cc.value("state_dim", 4);
    ex.arch.neurons = cc.value("neurons", 4);
    ex.arch.activation = parse_activation(cc.value("activation", "tanh"));
    ex.theta_std = cc.value("theta_std", 0.02);

    const json gc = cfg.value("gains", json::object());
    ex.gamma_R = gc.value("gamma_R", 1.0);
    if (!(ex.gamma_R > 0.0)) throw ConfigError("gamma_R must be positive");
    if (gc.contains("b")) {
      ex.b = vector_from_json(gc.at("b"));
      if (ex.b->size() != N) throw ConfigError("gains.b needs one entry per agent");
    }

    const json lc = cfg.value("loss", json::object());
    if (ex.vehicles) {
      ex.loss = vehicle_loss(*ex.vehicles, weight_matrix(lc.value("Q", json()), n + m));
    } else {
      ex.loss.Q = weight_matrix(lc.value("Q", json()), n + m);
    }
    ex.loss.barrier_eps = lc.value("barrier_eps", ex.loss.barrier_eps);
    if (lc.contains("collision")) {
      ex.loss.collision_distance = lc["collision"].value("distance", ex.loss.collision_distance);
      ex.loss.collision_weight = lc["collision"].value("weight", 0.0);
    }
    for (const json& o : lc.value("obstacles", json::array())) {
      Obstacle ob;
      ob.center = point(o.at("center"));
      if (o.contains("shape")) {
        ob.shape = matrix_from_json(o.at("shape"));
      } else {
        const Vec2 axes = point(o.at("axes"));
        ob.shape = axes.cwiseAbs2().asDiagonal();
      }
      ex.loss.obstacles.push_back(ob);
    }
    ex.loss.obstacle_weight = lc.value("obstacle_weight", 0.0);
    if (lc.contains("formation")) {
      const json& f = lc.at("formation");
      ex.loss.formation_weight = f.value("weight", 0.0);
      if (f.contains("links")) {
        for (const json& l : f.at("links")) ex.loss.formation.push_back({l.at(0).get<int>(), l.at(1).get<int>(), l.at(2).get<double>()});
      } else if (ex.vehicles) {
        // Keep the rest distances of the base-controlled formation.
        const auto& eq = ex.vehicles->equilibrium();
        for (auto [a, b] : topo.edges) {
          ex.loss.formation.push_back({a, b, (eq[static_cast<std::size_t>(a)] - eq[static_cast<std::size_t>(b)]).norm()});
        }
      }
    }
    if (!ex.vehicles && (ex.loss.collision_weight > 0.0 || ex.loss.obstacle_weight > 0.0 || ex.loss.formation_weight > 0.0)) {
      throw ConfigError("collision, obstacle and formation losses need the vehicle plant");
    }
    ex.loss.validate(n, m);

    const json tc = cfg.value("training", json::object());
    TrainingConfig& t = ex.training;
    t.learning_rate = tc.value("learning_rate", t.learning_rate);
    t.epochs = tc.value("epochs", t.epochs);
    t.samples = tc.value("samples", t.samples);
    t.horizon = tc.value("horizon", 100);
    t.seed = tc.value("seed", std::uint64_t{0});
    t.resample = tc.value("resample", false);
    t.optimizer = parse_optimizer(tc.value("optimizer", "gd"));
    t.momentum = tc.value("momentum", t.momentum);
    t.adam_beta1 = tc.value("adam_beta1", t.adam_beta1);
    t.adam_beta2 = tc.value("adam_beta2", t.adam_beta2);
    t.adam_eps = tc.value("adam_eps", t.adam_eps);
    t.debug_certify = tc.value("debug_certify", false);
    t.checkpoint_every = tc.value("checkpoint_every", 0);
    t.train_gamma_R = tc.value("train_gamma_R", false);
    t.validate();

    ex.output_dir = cfg.value("output_dir", "out");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const ValidationError&) {
    throw;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  json hashed = cfg;
  hashed.erase("output_dir");
  if (hashed.contains("training")) hashed["training"].erase("epochs");
  ex.hash = fnv1a_hex(hashed.dump());
  return ex;
}

Experiment load_experiment_file(const std::string& path) {
  json cfg;
  try {
    cfg = read_json_file(path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return load_experiment(cfg);
}

TrainableParams initial_params(const Experiment& ex, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ kInitStream);
  return init_params(ex.problem(), ex.gamma_R, rng, ex.theta_std);
}

}  // namespace netren
