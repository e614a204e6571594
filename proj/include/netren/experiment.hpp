#pragma once

#include <memory>
#include <optional>
#include <string>

#include "netren/io.hpp"
#include "netren/plant.hpp"
#include "netren/training.hpp"

namespace netren {

/// Everything one experiment file describes, resolved into library objects.
struct Experiment {
  std::string name;
  json source;       // the parsed file, kept for hashing and export
  std::string hash;  // FNV-1a of the file without run-length and output fields

  InterconnectionSpec spec;
  std::unique_ptr<Plant> plant;
  const VehiclePlant* vehicles = nullptr;  // set when the plant is the vehicle fleet
  NoiseModel noise;
  LossConfig loss;
  ControllerArch arch;
  TrainingConfig training;
  double gamma_R = 1.0;
  double theta_std = 0.02;
  std::optional<Vec> b;  // fixed b for the gains/certify commands
  std::string output_dir = "out";

  /// Builds the training problem; the experiment must outlive it.
  TrainingProblem problem() const;
};

/// Raised for anything wrong with the file itself (maps to exit code 2).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Parses and builds the experiment. Structural violations of the
/// interconnection surface as ValidationError.
Experiment load_experiment(const json& cfg);
Experiment load_experiment_file(const std::string& path);

/// Parameters for a run that starts from scratch: drawn from seed through a
/// stream separate from the training samples.
TrainableParams initial_params(const Experiment& ex, std::uint64_t seed);

}  // namespace netren
