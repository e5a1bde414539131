#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "menet/distortions.hpp"
#include "menet/robustness.hpp"
#include "menet/trainer.hpp"

namespace menet {

struct DataSection {
  int train_count = 400;
  int test_count = 100;
  int size = 64;
  std::uint64_t seed = 1;
};

/// "auto" scores the metric map for objectives with a metric term and the
/// CE map for the CE-only objective.
struct EvalSection {
  std::string map = "auto";
  CentroidWeighting weighting = CentroidWeighting::posterior;
  int batch = 10;
};

struct RobustnessSection {
  ScalarHead head = ScalarHead::metric;
  NormKind norm = NormKind::l2;
  std::size_t max_images = 50;
  double mc_p = 2;
  double mc_t = 1e-4;
  std::size_t mc_samples = 0;  // 0 skips the Monte-Carlo estimate
  std::uint64_t seed = 0;
};

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  DataSection data;
  DistortionSpec distortion;
  EvalSection eval;
  RobustnessSection robustness;

  void validate() const;
};

MapKind resolve_map(const EvalSection& eval, Objective objective);

void to_json(nlohmann::json& j, const ExperimentConfig& c);
/// Every section and field is optional; unknown keys are rejected with the
/// dotted path of the offending field.
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Any problem with the file, including invalid fields, is a FormatError.
ExperimentConfig load_experiment(const std::filesystem::path& path);

}  // namespace menet
