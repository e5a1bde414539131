#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "menet/data.hpp"
#include "menet/losses.hpp"
#include "menet/metrics.hpp"
#include "menet/model.hpp"
#include "menet/saliency.hpp"

namespace menet {

struct TrainConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-8;
  int batch_size = 5;
  std::int64_t iterations = 5000;
  std::int64_t checkpoint_interval = 1000;
  std::uint64_t seed = 0;
  double lambda = 1.0;
  Objective objective = Objective::combined;
  bool hard_negative_mining = true;
  /// Mining balances the CE term; the metric loss centroids are taken over
  /// every pixel unless this is set.
  bool mine_metric_loss = false;
  /// Global L2 gradient-norm cap; 0 disables clipping.
  double clip_norm = 0.0;
  bool augment = true;
  // Recorded for reproducibility; these are the only supported values.
  std::string weight_decay_mode = "coupled";
  std::string lr_schedule = "constant";

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Rejects unknown keys; missing keys keep their defaults.
void from_json(const nlohmann::json& j, TrainConfig& c);

std::string objective_name(Objective o);
Objective parse_objective(const std::string& s);

template <typename T>
struct OptimState {
  ParameterSet<T> velocity;
  std::int64_t iteration = 0;

  static OptimState zeros_like(const ParameterSet<T>& params);
};

/// v <- m v + g + wd theta; theta <- theta - lr v, element-wise in T.
template <typename T>
void sgd_step(ParameterSet<T>& params, const ParameterSet<T>& grads, OptimState<T>& state, const TrainConfig& config);

/// Scales every gradient so the global L2 norm is at most max_norm.
/// Returns the norm before scaling.
template <typename T>
double clip_gradients(ParameterSet<T>& grads, double max_norm);

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  MEnetParams<float> params;
  TrainConfig train;
  std::int64_t iteration = 0;
  std::optional<OptimState<float>> optim;
};

/// Fresh model initialised from the kInit stream of config.seed.
Checkpoint initial_checkpoint(const ModelConfig& model, const TrainConfig& train);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt, bool with_optimizer = true);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt, bool with_optimizer = true);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& source = "<memory>");

struct LossRecord {
  std::int64_t iteration = 0;
  double l_ce = 0, l_ml_star = 0, total = 0;
};

struct ValidationRecord {
  std::int64_t iteration = 0;
  double f_beta = 0, mae = 0;
};

struct TrainOptions {
  /// Checkpoints, loss.csv and validation.csv go here; empty writes nothing.
  std::filesystem::path out_dir;
  /// Held-out split evaluated at every checkpoint interval.
  std::vector<SampleRecord> validation;
  /// Stop once this many iterations are complete (< 0: config.iterations).
  std::int64_t stop_at = -1;
  std::function<void(const LossRecord&)> on_step;
  std::function<void(const std::string&)> warn;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LossRecord> history;
  std::vector<ValidationRecord> validation;
  std::vector<std::string> skipped;  // ids of degenerate samples
};

/// Runs from start.iteration to the configured iteration count. Step k uses
/// random streams derived from (seed, k) only, so a resumed run repeats the
/// uninterrupted trajectory. Resuming (iteration > 0) needs optimizer state.
TrainResult train_loop(Checkpoint start, const std::vector<SampleRecord>& data, const TrainOptions& options = {});

/// Map used to score a model of the given objective during validation.
MapKind validation_map(Objective o);

EvalReport evaluate_model(const MEnetParams<float>& params, const std::vector<SampleRecord>& samples, MapKind kind,
                          std::size_t batch = 10);

std::string loss_csv_header();
std::string loss_csv_row(const LossRecord& r);

}  // namespace menet
