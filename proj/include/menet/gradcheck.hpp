#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "menet/model.hpp"

namespace menet {

struct GradcheckCase {
  std::string name;
  double max_rel_error = 0;
  bool passed = false;
};

struct GradcheckOptions {
  std::uint64_t seed = 0;
  double eps = 1e-5;
  double tolerance = 1e-4;
  /// Also audit a whole network built from this config, shrunk to 8 x 8
  /// input and at most 2 base channels.
  bool network = true;
  ModelConfig model;
  /// Parameter coordinates sampled for the whole-network check.
  std::size_t network_coords = 48;
};

/// Central-difference audit of every layer and loss in double precision.
std::vector<GradcheckCase> run_gradcheck(const GradcheckOptions& opts = {});

void to_json(nlohmann::json& j, const GradcheckCase& c);

}  // namespace menet
