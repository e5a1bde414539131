#include "menet/experiment.hpp"

#include <fstream>

#include "menet/data.hpp"

namespace menet {

namespace {

std::string weighting_name(CentroidWeighting w) { return w == CentroidWeighting::posterior ? "posterior" : "uniform"; }

CentroidWeighting parse_weighting(const std::string& s) {
  if (s == "posterior") return CentroidWeighting::posterior;
  if (s == "uniform") return CentroidWeighting::uniform;
  throw ContractError("eval.weighting: expected posterior or uniform, got '" + s + "'");
}

std::string head_name(ScalarHead h) { return h == ScalarHead::metric ? "metric" : "ce"; }

ScalarHead parse_head(const std::string& s) {
  if (s == "metric") return ScalarHead::metric;
  if (s == "ce") return ScalarHead::ce;
  throw ContractError("robustness.head: expected metric or ce, got '" + s + "'");
}

void require_object(const nlohmann::json& j, const std::string& section) {
  if (!j.is_object()) throw ContractError(section + ": expected an object");
}

// Rethrows nested errors with the section name prefixed.
template <typename F>
void in_section(const std::string& section, F&& f) {
  try {
    f();
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(section + ": " + e.what());
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  train.validate();
  distortion.validate();
  if (data.train_count < 1 || data.test_count < 1) throw ContractError("data: counts must be >= 1");
  if (data.size != model.input_size)
    throw ContractError("data.size (" + std::to_string(data.size) + ") must equal model.input_size (" +
                        std::to_string(model.input_size) + ")");
  if (eval.map != "auto" && eval.map != "metric" && eval.map != "ce")
    throw ContractError("eval.map: expected auto, metric or ce, got '" + eval.map + "'");
  if (eval.batch < 1) throw ContractError("eval.batch must be >= 1");
  if (robustness.max_images < 1) throw ContractError("robustness.max_images must be >= 1");
  if (!(robustness.mc_p >= 1)) throw ContractError("robustness.mc_p must be >= 1");
  if (!(robustness.mc_t > 0)) throw ContractError("robustness.mc_t must be > 0");
}

MapKind resolve_map(const EvalSection& eval, Objective objective) {
  if (eval.map == "metric") return MapKind::metric;
  if (eval.map == "ce") return MapKind::ce;
  return validation_map(objective);
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"model", c.model},
       {"train", c.train},
       {"data",
        {{"train_count", c.data.train_count},
         {"test_count", c.data.test_count},
         {"size", c.data.size},
         {"seed", c.data.seed}}},
       {"distortion", c.distortion},
       {"eval", {{"map", c.eval.map}, {"weighting", weighting_name(c.eval.weighting)}, {"batch", c.eval.batch}}},
       {"robustness",
        {{"head", head_name(c.robustness.head)},
         {"norm", norm_name(c.robustness.norm)},
         {"max_images", c.robustness.max_images},
         {"mc_p", c.robustness.mc_p},
         {"mc_t", c.robustness.mc_t},
         {"mc_samples", c.robustness.mc_samples},
         {"seed", c.robustness.seed}}}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  require_object(j, "config");
  c = ExperimentConfig{};
  for (const auto& [section, v] : j.items()) {
    if (section == "model") {
      in_section("model", [&] { c.model = v.get<ModelConfig>(); });
    } else if (section == "train") {
      in_section("train", [&] { c.train = v.get<TrainConfig>(); });
    } else if (section == "distortion") {
      in_section("distortion", [&] { c.distortion = v.get<DistortionSpec>(); });
    } else if (section == "data") {
      require_object(v, "data");
      in_section("data", [&] {
        for (const auto& [key, x] : v.items()) {
          if (key == "train_count") c.data.train_count = x.get<int>();
          else if (key == "test_count") c.data.test_count = x.get<int>();
          else if (key == "size") c.data.size = x.get<int>();
          else if (key == "seed") c.data.seed = x.get<std::uint64_t>();
          else throw ContractError("data: unknown key '" + key + "'");
        }
      });
    } else if (section == "eval") {
      require_object(v, "eval");
      in_section("eval", [&] {
        for (const auto& [key, x] : v.items()) {
          if (key == "map") c.eval.map = x.get<std::string>();
          else if (key == "weighting") c.eval.weighting = parse_weighting(x.get<std::string>());
          else if (key == "batch") c.eval.batch = x.get<int>();
          else throw ContractError("eval: unknown key '" + key + "'");
        }
      });
    } else if (section == "robustness") {
      require_object(v, "robustness");
      in_section("robustness", [&] {
        for (const auto& [key, x] : v.items()) {
          if (key == "head") c.robustness.head = parse_head(x.get<std::string>());
          else if (key == "norm") c.robustness.norm = parse_norm(x.get<std::string>());
          else if (key == "max_images") c.robustness.max_images = x.get<std::size_t>();
          else if (key == "mc_p") c.robustness.mc_p = x.get<double>();
          else if (key == "mc_t") c.robustness.mc_t = x.get<double>();
          else if (key == "mc_samples") c.robustness.mc_samples = x.get<std::size_t>();
          else if (key == "seed") c.robustness.seed = x.get<std::uint64_t>();
          else throw ContractError("robustness: unknown key '" + key + "'");
        }
      });
    } else {
      throw ContractError("config: unknown section '" + section + "'");
    }
  }
  // a data section without a size follows the model
  if (!j.contains("data") || !j["data"].contains("size")) c.data.size = c.model.input_size;
  c.validate();
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config " + path.string() + ": " + e.what());
  }
  try {
    return j.get<ExperimentConfig>();
  } catch (const ContractError& e) {
    throw FormatError("config " + path.string() + ": " + e.what());
  }
}

}  // namespace menet
