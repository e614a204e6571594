// netren: gain allocation, certification, simulation and training of
// networked REN controllers from an experiment file.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>

#include "netren/closed_loop.hpp"
#include "netren/experiment.hpp"

namespace fs = std::filesystem;
using namespace netren;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  std::optional<int> epochs;
  bool debug_certify = false;
  bool zero_noise = false;
  std::optional<int> horizon;
  int samples = 1;
  bool quiet = false;
};

std::string out_dir(const Experiment& ex, const Options& o) {
  const std::string dir = o.out.empty() ? ex.output_dir : o.out;
  fs::create_directories(dir);
  return dir;
}

std::uint64_t seed_of(const Experiment& ex, const Options& o) { return o.seed.value_or(ex.training.seed); }

Checkpoint read_checkpoint(const Experiment& ex, const std::string& path) {
  Checkpoint c = load_checkpoint(path);
  if (c.config_hash != ex.hash) {
    throw ConfigError("checkpoint " + path + " was written for a different configuration (hash " + c.config_hash +
                      ", current " + ex.hash + ")");
  }
  const int N = ex.spec.num_agents();
  if (static_cast<int>(c.state.params.theta.size()) != N || c.state.params.b.size() != N) {
    throw ConfigError("checkpoint " + path + " does not match the number of agents");
  }
  return c;
}

// Parameters for commands that evaluate a controller.
TrainableParams controller_params(Experiment& ex, const Options& o) {
  if (!o.checkpoint.empty()) {
    Checkpoint c = read_checkpoint(ex, o.checkpoint);
    ex.arch = c.arch;
    return c.state.params;
  }
  return initial_params(ex, seed_of(ex, o));
}

// b from the checkpoint, else the config, else zeros. A checkpoint also
// supplies gamma_R, which may have been trained.
Vec gain_parameters(Experiment& ex, const Options& o) {
  if (!o.checkpoint.empty()) {
    const TrainableParams p = read_checkpoint(ex, o.checkpoint).state.params;
    ex.gamma_R = p.gamma_R;
    return p.b;
  }
  if (ex.b) return *ex.b;
  return Vec::Zero(ex.spec.num_agents());
}

void print_gains(const GainAllocation& g, const LmiReport& rep) {
  std::printf("gamma_R = %.10g\n", g.gamma_R);
  std::printf("%5s %12s %12s %14s %14s  %s\n", "agent", "b", "h", "alpha", "gamma", "branch");
  for (Eigen::Index i = 0; i < g.gamma.size(); ++i) {
    std::printf("%5ld %12.6g %12.6g %14.8g %14.8g  %s\n", static_cast<long>(i), g.b(i), g.agent_h(i), g.alpha(i),
                g.gamma(i), to_string(g.branch[static_cast<std::size_t>(i)]).c_str());
  }
  std::printf("LMI max eigenvalue = %.6e (%s, tol %.1e)\n", rep.max_eigenvalue, rep.feasible ? "feasible" : "INFEASIBLE",
              rep.tolerance);
}

int cmd_gains(const Options& o) {
  Experiment ex = load_experiment_file(o.config);
  const Vec b = gain_parameters(ex, o);
  const GainAllocation g = allocate_gains(ex.spec, compute_index_sets(ex.spec), b, ex.gamma_R);
  const LmiReport rep = certify(ex.spec, g);
  if (!o.quiet) print_gains(g, rep);
  if (!o.out.empty()) {
    json j = gains_to_json(g);
    j["lmi"] = lmi_to_json(rep);
    write_json_file((fs::path(out_dir(ex, o)) / "gains.json").string(), j);
  }
  return kExitOk;
}

int cmd_certify(const Options& o) {
  Experiment ex = load_experiment_file(o.config);
  const Vec b = gain_parameters(ex, o);
  const GainAllocation g = allocate_gains(ex.spec, compute_index_sets(ex.spec), b, ex.gamma_R);
  const LmiReport rep = certify(ex.spec, g);
  const SchurChain chain = schur_chain(ex.spec, g.alpha, g.gamma, g.gamma_R);
  const SemidefiniteCheck first = check_negative_semidefinite(-chain.outer_second);
  if (!o.quiet) {
    print_gains(g, rep);
    std::printf("Schur form: gamma_R^2 I - P1 %s positive definite\n", first.feasible ? "is" : "is NOT");
  }
  if (!o.out.empty()) {
    json j{{"gains", gains_to_json(g)}, {"lmi", lmi_to_json(rep, true)}};
    write_json_file((fs::path(out_dir(ex, o)) / "certificate.json").string(), j);
  }
  return rep.feasible ? kExitOk : kExitFailure;
}

void write_summary(const std::string& path, const RolloutRecord& rec, const Experiment& ex) {
  const auto [head, tail] = energy_split(rec);
  json j{{"horizon", rec.horizon()}, {"head_energy", head}, {"tail_energy", tail}};
  if (ex.vehicles) {
    const RolloutSummary s = summarize(rec, *ex.vehicles);
    j["max_speed"] = s.max_speed;
    j["min_distance"] = s.min_distance;
    j["collision_distance"] = ex.loss.collision_distance;
    j["collision_free"] = s.min_distance >= ex.loss.collision_distance;
    json final_pos = json::array();
    for (int i = 0; i < ex.vehicles->num_agents(); ++i) {
      const Vec2 p = ex.vehicles->position(rec.x.back(), i);
      final_pos.push_back({p.x(), p.y()});
    }
    j["final_positions"] = final_pos;
  }
  double loss = 0.0;
  for (std::size_t t = 0; t < rec.x.size(); ++t) loss += stage_loss(ex.loss, rec.x[t], rec.u[t]);
  j["loss"] = loss;
  write_json_file(path, j);
}

int cmd_simulate(const Options& o) {
  Experiment ex = load_experiment_file(o.config);
  if (o.horizon) ex.training.horizon = *o.horizon;
  const TrainableParams params = controller_params(ex, o);
  const TrainingProblem problem = ex.problem();
  const ControllerNetwork net = make_controller(problem, params);
  const std::string dir = out_dir(ex, o);
  std::mt19937_64 rng(seed_of(ex, o));
  for (int s = 0; s < o.samples; ++s) {
    std::vector<Vec> noise = o.zero_noise ? std::vector<Vec>{Vec::Zero(ex.plant->total_state())} : ex.noise.sample(rng);
    const RolloutRecord rec = closed_loop_rollout(*ex.plant, net, noise, ex.training.horizon);
    const std::string stem = o.samples == 1 ? "rollout" : "rollout_" + std::to_string(s);
    std::ofstream csv(fs::path(dir) / (stem + ".csv"));
    write_rollout_csv(csv, rec, *ex.plant);
    write_summary((fs::path(dir) / ((o.samples == 1 ? std::string("summary") : "summary_" + std::to_string(s)) + ".json")).string(),
                  rec, ex);
  }
  if (!o.quiet) std::printf("wrote %d rollout(s) to %s\n", o.samples, dir.c_str());
  return kExitOk;
}

void write_histories(const std::string& dir, const TrainState& s) {
  std::ofstream loss(fs::path(dir) / "loss_history.csv");
  loss << "epoch,loss\n" << std::setprecision(17);
  for (std::size_t e = 0; e < s.loss_history.size(); ++e) loss << e + 1 << ',' << s.loss_history[e] << '\n';
  std::ofstream gains(fs::path(dir) / "gain_history.csv");
  gains << "epoch";
  const Eigen::Index N = s.gain_history.empty() ? 0 : s.gain_history.front().size();
  for (Eigen::Index i = 0; i < N; ++i) gains << ",gamma[" << i << ']';
  gains << '\n' << std::setprecision(17);
  for (std::size_t e = 0; e < s.gain_history.size(); ++e) {
    gains << e + 1;
    for (Eigen::Index i = 0; i < N; ++i) gains << ',' << s.gain_history[e](i);
    gains << '\n';
  }
}

int cmd_train(const Options& o) {
  Experiment ex = load_experiment_file(o.config);
  if (o.epochs) ex.training.epochs = *o.epochs;
  if (o.seed) ex.training.seed = *o.seed;
  if (o.debug_certify) ex.training.debug_certify = true;
  ex.training.validate();

  TrainState state;
  if (!o.checkpoint.empty()) {
    Checkpoint c = read_checkpoint(ex, o.checkpoint);
    if (c.seed != ex.training.seed) {
      throw ConfigError("checkpoint seed " + std::to_string(c.seed) + " differs from the run seed " +
                        std::to_string(ex.training.seed));
    }
    ex.arch = c.arch;
    state = std::move(c.state);
  } else {
    state.params = initial_params(ex, ex.training.seed);
  }
  const TrainingProblem problem = ex.problem();
  const std::string dir = out_dir(ex, o);
  auto snapshot = [&](const TrainState& s) { return Checkpoint{s, ex.arch, ex.training.seed, ex.hash}; };

  const int every = ex.training.checkpoint_every;
  const int first = state.epoch + 1;
  state = train(problem, ex.training, ex.noise, std::move(state), [&](const TrainState& s) {
    if (!o.quiet && (s.epoch == first || s.epoch % 10 == 0 || s.epoch == ex.training.epochs)) {
      std::printf("epoch %5d  loss %.10g\n", s.epoch, s.loss_history.back());
      std::fflush(stdout);
    }
    if (every > 0 && s.epoch % every == 0) {
      char name[64];
      std::snprintf(name, sizeof name, "checkpoint_epoch_%05d.json", s.epoch);
      save_checkpoint((fs::path(dir) / name).string(), snapshot(s));
    }
  });

  save_checkpoint((fs::path(dir) / "checkpoint.json").string(), snapshot(state));
  write_histories(dir, state);
  const GainAllocation g = allocate_gains(ex.spec, problem.sets, state.params.b, state.params.gamma_R);
  const LmiReport rep = certify(ex.spec, g);
  json cert{{"epoch", state.epoch}, {"final_loss", state.final_loss}, {"gains", gains_to_json(g)}, {"lmi", lmi_to_json(rep)}};
  if (!state.lmi_history.empty()) {
    cert["max_epoch_eigenvalue"] = *std::max_element(state.lmi_history.begin(), state.lmi_history.end());
  }
  write_json_file((fs::path(dir) / "certification.json").string(), cert);
  if (!o.quiet) {
    std::printf("final loss %.10g after %d epochs; certificate %s (max eigenvalue %.3e)\n", state.final_loss,
                state.epoch, rep.feasible ? "feasible" : "INFEASIBLE", rep.max_eigenvalue);
  }
  return rep.feasible ? kExitOk : kExitFailure;
}

int cmd_export(const Options& o) {
  Experiment ex = load_experiment_file(o.config);
  if (o.horizon) ex.training.horizon = *o.horizon;
  const std::string dir = out_dir(ex, o);
  TrainableParams params = controller_params(ex, o);
  const TrainingProblem problem = ex.problem();
  const ControllerNetwork net = make_controller(problem, params);
  const LmiReport rep = certify(ex.spec, net.gains);

  write_json_file((fs::path(dir) / "interconnection.json").string(), spec_to_json(ex.spec));
  json g = gains_to_json(net.gains);
  g["lmi"] = lmi_to_json(rep, true);
  write_json_file((fs::path(dir) / "gains.json").string(), g);

  json scene{{"name", ex.name}, {"config_hash", ex.hash}};
  if (ex.vehicles) {
    json refs = json::array(), eq = json::array(), obs = json::array();
    for (const Vec2& r : ex.vehicles->params().reference) refs.push_back({r.x(), r.y()});
    for (const Vec2& p : ex.vehicles->equilibrium()) eq.push_back({p.x(), p.y()});
    for (const Obstacle& ob : ex.loss.obstacles) {
      obs.push_back({{"center", {ob.center.x(), ob.center.y()}}, {"shape", matrix_to_json(ob.shape)}});
    }
    scene["references"] = refs;
    scene["equilibrium"] = eq;
    scene["obstacles"] = obs;
    scene["collision_distance"] = ex.loss.collision_distance;
  }
  write_json_file((fs::path(dir) / "scene.json").string(), scene);

  std::mt19937_64 rng(seed_of(ex, o));
  const auto samples = draw_samples(ex.noise, o.samples, rng);
  for (int s = 0; s < o.samples; ++s) {
    const RolloutRecord rec = closed_loop_rollout(*ex.plant, net, samples[static_cast<std::size_t>(s)], ex.training.horizon);
    std::ofstream csv(fs::path(dir) / ("trajectory_" + std::to_string(s) + ".csv"));
    write_rollout_csv(csv, rec, *ex.plant);
  }
  if (!o.checkpoint.empty()) write_histories(dir, read_checkpoint(ex, o.checkpoint).state);
  if (!o.quiet) std::printf("exported to %s\n", dir.c_str());
  return kExitOk;
}

void print_error(const std::string& kind, const std::string& message, const json& extra = json::object()) {
  json j{{"error", kind}, {"message", message}};
  j.update(extra);
  std::cout << j.dump(2) << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Networked REN controllers: gains, certificates, simulation and training"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "experiment file (JSON)")->required();
    sub->add_option("--seed", o.seed, "random seed (overrides the file)");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--checkpoint", o.checkpoint, "checkpoint to load");
    sub->add_flag("--quiet", o.quiet, "suppress console output");
  };
  auto* gains = app.add_subcommand("gains", "allocate per-agent gains and report the LMI eigenvalue");
  common(gains);
  auto* cert = app.add_subcommand("certify", "assemble and check the network dissipativity LMI");
  common(cert);
  auto* sim = app.add_subcommand("simulate", "closed-loop rollout to CSV plus a JSON summary");
  common(sim);
  sim->add_flag("--zero-noise", o.zero_noise, "start at the equilibrium with no disturbance");
  sim->add_option("--horizon", o.horizon, "rollout length T (overrides the file)");
  sim->add_option("--samples", o.samples, "number of rollouts")->check(CLI::PositiveNumber);
  auto* tr = app.add_subcommand("train", "train the controller network");
  common(tr);
  tr->add_option("--epochs", o.epochs, "total epochs (overrides the file)")->check(CLI::NonNegativeNumber);
  tr->add_flag("--debug-certify", o.debug_certify, "check the LMI at every epoch");
  auto* ex = app.add_subcommand("export", "write interconnection, gains, scene and trajectories for plotting");
  common(ex);
  ex->add_option("--horizon", o.horizon, "rollout length T (overrides the file)");
  ex->add_option("--samples", o.samples, "number of trajectories")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*gains) return cmd_gains(o);
    if (*cert) return cmd_certify(o);
    if (*sim) return cmd_simulate(o);
    if (*tr) return cmd_train(o);
    if (*ex) return cmd_export(o);
  } catch (const ValidationError& e) {
    print_error("validation", "interconnection violates the structural assumptions",
                {{"violations", violations_to_json(e.result)["violations"]}});
    return kExitConfig;
  } catch (const ConfigError& e) {
    print_error("config", e.what());
    return kExitConfig;
  } catch (const DivergenceError& e) {
    print_error("divergence", e.what(), {{"time", e.time}, {"epoch", e.epoch}, {"sample", e.sample}});
    return kExitDivergence;
  } catch (const CertificationError& e) {
    print_error("certification", e.what(), {{"epoch", e.epoch}, {"max_eigenvalue", e.max_eigenvalue}});
    return kExitFailure;
  } catch (const std::exception& e) {
    print_error("runtime", e.what());
    return kExitFailure;
  }
  return kExitFailure;
}
