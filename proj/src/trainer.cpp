#include "menet/trainer.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace menet {

void TrainConfig::validate() const {
  auto nonneg = [](double v, const char* name) {
    if (!(v >= 0) || !std::isfinite(v)) throw ContractError(std::string("train.") + name + " must be >= 0");
  };
  nonneg(learning_rate, "learning_rate");
  nonneg(momentum, "momentum");
  nonneg(weight_decay, "weight_decay");
  nonneg(lambda, "lambda");
  nonneg(clip_norm, "clip_norm");
  if (batch_size < 2) throw ContractError("train.batch_size must be >= 2 (batch norm needs a batch)");
  if (iterations < 0) throw ContractError("train.iterations must be >= 0");
  if (checkpoint_interval < 0) throw ContractError("train.checkpoint_interval must be >= 0");
  if (weight_decay_mode != "coupled") throw ContractError("train.weight_decay_mode: only 'coupled' is supported");
  if (lr_schedule != "constant") throw ContractError("train.lr_schedule: only 'constant' is supported");
}

std::string objective_name(Objective o) {
  switch (o) {
    case Objective::combined: return "combined";
    case Objective::ce_only: return "ce_only";
    case Objective::metric_only: return "metric_only";
  }
  return "combined";
}

Objective parse_objective(const std::string& s) {
  if (s == "combined") return Objective::combined;
  if (s == "ce_only" || s == "ce") return Objective::ce_only;
  if (s == "metric_only" || s == "metric") return Objective::metric_only;
  throw ContractError("train.objective: expected combined, ce_only or metric_only, got '" + s + "'");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate},
       {"momentum", c.momentum},
       {"weight_decay", c.weight_decay},
       {"batch_size", c.batch_size},
       {"iterations", c.iterations},
       {"checkpoint_interval", c.checkpoint_interval},
       {"seed", c.seed},
       {"lambda", c.lambda},
       {"objective", objective_name(c.objective)},
       {"hard_negative_mining", c.hard_negative_mining},
       {"mine_metric_loss", c.mine_metric_loss},
       {"clip_norm", c.clip_norm},
       {"augment", c.augment},
       {"weight_decay_mode", c.weight_decay_mode},
       {"lr_schedule", c.lr_schedule}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ContractError("train: expected an object");
  for (const auto& [key, v] : j.items()) {
    if (key == "learning_rate") c.learning_rate = v.get<double>();
    else if (key == "momentum") c.momentum = v.get<double>();
    else if (key == "weight_decay") c.weight_decay = v.get<double>();
    else if (key == "batch_size") c.batch_size = v.get<int>();
    else if (key == "iterations") c.iterations = v.get<std::int64_t>();
    else if (key == "checkpoint_interval") c.checkpoint_interval = v.get<std::int64_t>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "lambda") c.lambda = v.get<double>();
    else if (key == "objective") c.objective = parse_objective(v.get<std::string>());
    else if (key == "hard_negative_mining") c.hard_negative_mining = v.get<bool>();
    else if (key == "mine_metric_loss") c.mine_metric_loss = v.get<bool>();
    else if (key == "clip_norm") c.clip_norm = v.get<double>();
    else if (key == "augment") c.augment = v.get<bool>();
    else if (key == "weight_decay_mode") c.weight_decay_mode = v.get<std::string>();
    else if (key == "lr_schedule") c.lr_schedule = v.get<std::string>();
    else throw ContractError("train: unknown key '" + key + "'");
  }
  c.validate();
}

template <typename T>
OptimState<T> OptimState<T>::zeros_like(const ParameterSet<T>& params) {
  OptimState s;
  for (std::size_t i = 0; i < params.size(); ++i) s.velocity.add(params.name(i), Tensor<T>::zeros_like(params.value(i)));
  return s;
}

template <typename T>
void sgd_step(ParameterSet<T>& params, const ParameterSet<T>& grads, OptimState<T>& state, const TrainConfig& config) {
  if (grads.size() != params.size() || state.velocity.size() != params.size())
    throw ContractError("sgd_step: parameter, gradient and velocity counts differ");
  const T lr = static_cast<T>(config.learning_rate);
  const T m = static_cast<T>(config.momentum);
  const T wd = static_cast<T>(config.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.name(i);
    if (grads.name(i) != name || state.velocity.name(i) != name)
      throw ContractError("sgd_step: gradient order differs at '" + name + "'");
    Tensor<T>& theta = params.value(i);
    const Tensor<T>& g = grads.value(i);
    Tensor<T>& v = state.velocity.value(i);
    theta.require_same_shape(g, ("sgd_step gradient of " + name).c_str());
    theta.require_same_shape(v, ("sgd_step velocity of " + name).c_str());
    for (std::size_t k = 0; k < theta.size(); ++k) {
      v[k] = m * v[k] + g[k] + wd * theta[k];
      theta[k] = theta[k] - lr * v[k];
    }
  }
  ++state.iteration;
}

template <typename T>
double clip_gradients(ParameterSet<T>& grads, double max_norm) {
  double sq = 0;
  for (std::size_t i = 0; i < grads.size(); ++i)
    for (T v : grads.value(i).data()) sq += double(v) * double(v);
  const double n = std::sqrt(sq);
  if (max_norm > 0 && n > max_norm) {
    const T s = static_cast<T>(max_norm / n);
    for (std::size_t i = 0; i < grads.size(); ++i) grads.value(i) *= s;
  }
  return n;
}

Checkpoint initial_checkpoint(const ModelConfig& model, const TrainConfig& train) {
  train.validate();
  Rng rng(train.seed, streams::kInit);
  Checkpoint c;
  c.params = build<float>(model, rng);
  c.train = train;
  c.optim = OptimState<float>::zeros_like(c.params.weights);
  return c;
}

// ---- checkpoint format ----------------------------------------------------
//
// "MENT" | u32 version | u32 header length | JSON header | u32 blob count |
// blobs: u32 name length, name, u8 dtype (1 = f32), u8 ndims, u64 dims,
// little-endian payload.

namespace {

constexpr char kMagic[4] = {'M', 'E', 'N', 'T'};
constexpr std::uint8_t kDtypeF32 = 1;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  template <typename U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str(const std::string& s) {
    le<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void blob(const std::string& name, const Tensor<float>& t) {
    str(name);
    le<std::uint8_t>(kDtypeF32);
    le<std::uint8_t>(static_cast<std::uint8_t>(t.shape().size()));
    for (auto d : t.shape()) le<std::uint64_t>(d);
    for (float v : t.data()) le<std::uint32_t>(std::bit_cast<std::uint32_t>(v));
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::string source) : buf(b), src(std::move(source)) {}

  void need(std::size_t n, const std::string& what) {
    if (pos + n > buf.size())
      throw FormatError("checkpoint " + src + ": truncated " + what + " at byte offset " + std::to_string(pos) +
                        " (expected " + std::to_string(n) + " bytes, got " + std::to_string(buf.size() - pos) + ")");
  }
  template <typename U>
  U le(const std::string& what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(buf[pos + i]) << (8 * i));
    pos += sizeof(U);
    return v;
  }
  std::string str(const std::string& what) {
    const auto n = le<std::uint32_t>(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
  std::pair<std::string, Tensor<float>> blob() {
    const std::string name = str("blob name");
    const std::string what = "blob '" + name + "'";
    const auto dtype = le<std::uint8_t>(what);
    if (dtype != kDtypeF32) throw FormatError("checkpoint " + src + ": " + what + " has unsupported dtype " +
                                              std::to_string(dtype));
    const auto nd = le<std::uint8_t>(what);
    Shape shape;
    for (int i = 0; i < nd; ++i) shape.push_back(static_cast<std::size_t>(le<std::uint64_t>(what)));
    const std::size_t n = shape_numel(shape);
    need(n * 4, what);
    Tensor<float> t(shape);
    for (std::size_t i = 0; i < n; ++i) t[i] = std::bit_cast<float>(le<std::uint32_t>(what));
    return {name, std::move(t)};
  }

  const std::vector<std::uint8_t>& buf;
  std::string src;
  std::size_t pos = 0;
};

void fill(ParameterSet<float>& set, const std::string& prefix, Reader& r, std::size_t& remaining) {
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (remaining == 0) throw FormatError("checkpoint " + r.src + ": missing blob '" + prefix + set.name(i) + "'");
    auto [name, t] = r.blob();
    --remaining;
    if (name != prefix + set.name(i))
      throw FormatError("checkpoint " + r.src + ": expected blob '" + prefix + set.name(i) + "', found '" + name +
                        "'");
    if (t.shape() != set.value(i).shape())
      throw FormatError("checkpoint " + r.src + ": blob '" + name + "' has shape " + shape_str(t.shape()) +
                        ", model expects " + shape_str(set.value(i).shape()));
    set.value(i) = std::move(t);
  }
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt, bool with_optimizer) {
  const bool optim = with_optimizer && ckpt.optim.has_value();
  nlohmann::json header = {{"model", ckpt.params.config},
                           {"train", ckpt.train},
                           {"iteration", ckpt.iteration},
                           {"optimizer", optim}};
  if (optim) header["optimizer_iteration"] = ckpt.optim->iteration;
  Writer w;
  w.bytes(kMagic, 4);
  w.le<std::uint32_t>(kCheckpointVersion);
  w.str(header.dump());
  const auto& p = ckpt.params;
  std::size_t count = p.weights.size() + p.buffers.size() + (optim ? ckpt.optim->velocity.size() : 0);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(count));
  for (std::size_t i = 0; i < p.weights.size(); ++i) w.blob("param/" + p.weights.name(i), p.weights.value(i));
  for (std::size_t i = 0; i < p.buffers.size(); ++i) w.blob("buffer/" + p.buffers.name(i), p.buffers.value(i));
  if (optim)
    for (std::size_t i = 0; i < ckpt.optim->velocity.size(); ++i)
      w.blob("optim/" + ckpt.optim->velocity.name(i), ckpt.optim->velocity.value(i));
  return std::move(w.out);
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& source) {
  Reader r(bytes, source);
  r.need(4, "magic");
  if (!std::equal(kMagic, kMagic + 4, bytes.begin())) throw FormatError("checkpoint " + source + ": bad magic bytes");
  r.pos = 4;
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint " + source + ": unsupported format version " + std::to_string(version) +
                      " (this build reads version " + std::to_string(kCheckpointVersion) + ")");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.str("header"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint " + source + ": malformed header: " + e.what());
  }
  Checkpoint c;
  try {
    ModelConfig model = header.at("model").get<ModelConfig>();
    c.train = header.at("train").get<TrainConfig>();
    c.iteration = header.at("iteration").get<std::int64_t>();
    Rng rng(0);
    c.params = build<float>(model, rng);
    if (header.at("optimizer").get<bool>()) {
      c.optim = OptimState<float>::zeros_like(c.params.weights);
      c.optim->iteration = header.at("optimizer_iteration").get<std::int64_t>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint " + source + ": bad header field: " + e.what());
  } catch (const ContractError& e) {
    throw FormatError("checkpoint " + source + ": " + e.what());
  }
  std::size_t remaining = r.le<std::uint32_t>("blob count");
  fill(c.params.weights, "param/", r, remaining);
  fill(c.params.buffers, "buffer/", r, remaining);
  if (c.optim) fill(c.optim->velocity, "optim/", r, remaining);
  if (remaining != 0 || r.pos != bytes.size())
    throw FormatError("checkpoint " + source + ": unexpected trailing data at byte offset " + std::to_string(r.pos));
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt, bool with_optimizer) {
  const auto bytes = serialize_checkpoint(ckpt, with_optimizer);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot write checkpoint " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw FormatError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, path.string());
}

// ---- training ---------------------------------------------------------------

std::string loss_csv_header() { return "iteration,l_ce,l_ml_star,total"; }

std::string loss_csv_row(const LossRecord& r) {
  std::ostringstream os;
  os << std::setprecision(9) << r.iteration << ',' << r.l_ce << ',' << r.l_ml_star << ',' << r.total;
  return os.str();
}

MapKind validation_map(Objective o) { return o == Objective::ce_only ? MapKind::ce : MapKind::metric; }

EvalReport evaluate_model(const MEnetParams<float>& params, const std::vector<SampleRecord>& samples, MapKind kind,
                          std::size_t batch) {
  EvalAccumulator acc;
  for (std::size_t s = 0; s < samples.size(); s += batch) {
    const std::size_t n = std::min(batch, samples.size() - s);
    std::span<const SampleRecord> chunk(samples.data() + s, n);
    const auto maps = predict(params, stack_images(chunk), CentroidWeighting::posterior, kind);
    for (std::size_t i = 0; i < n; ++i) acc.add(chunk[i].id, maps[i].map(kind), chunk[i].mask);
  }
  return acc.report();
}

namespace {

bool has_both_classes(const SampleRecord& s) {
  bool pos = false, neg = false;
  for (auto m : s.mask) (m ? pos : neg) = true;
  return pos && neg;
}

// Rewrites `path` keeping only rows whose leading iteration is below `keep_below`.
std::vector<std::string> truncate_csv(const std::filesystem::path& path, const std::string& header,
                                      std::int64_t keep_below) {
  std::vector<std::string> rows;
  if (std::filesystem::exists(path)) {
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (std::stoll(line.substr(0, line.find(','))) < keep_below) rows.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  out << header << '\n';
  for (const auto& r : rows) out << r << '\n';
  return rows;
}

std::string ckpt_name(std::int64_t it) {
  std::ostringstream os;
  os << "ckpt_" << std::setw(6) << std::setfill('0') << it << ".ment";
  return os.str();
}

}  // namespace

TrainResult train_loop(Checkpoint start, const std::vector<SampleRecord>& data, const TrainOptions& options) {
  const TrainConfig cfg = start.train;
  cfg.validate();
  if (start.iteration > 0 && !start.optim)
    throw ContractError("cannot resume from a checkpoint without optimizer state");
  if (!start.optim) start.optim = OptimState<float>::zeros_like(start.params.weights);
  const int size = start.params.config.input_size;

  TrainResult result;
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].size() != std::size_t(size))
      throw ContractError("sample '" + data[i].id + "' is " + std::to_string(data[i].size()) + " px, model expects " +
                          std::to_string(size));
    if (has_both_classes(data[i])) {
      pool.push_back(i);
    } else {
      result.skipped.push_back(data[i].id);
      if (options.warn) options.warn("skipping degenerate sample '" + data[i].id + "' (single class)");
    }
  }
  if (pool.size() < std::size_t(cfg.batch_size))
    throw ContractError("training needs at least batch_size usable samples, have " + std::to_string(pool.size()));

  const bool write = !options.out_dir.empty();
  const auto loss_path = options.out_dir / "loss.csv";
  const auto val_path = options.out_dir / "validation.csv";
  std::ofstream loss_csv, val_csv;
  double best_f = -1;
  if (write) {
    std::filesystem::create_directories(options.out_dir);
    truncate_csv(loss_path, loss_csv_header(), start.iteration);
    // a resumed run keeps competing against the best validation score so far
    for (const auto& row : truncate_csv(val_path, "iteration,f_beta,mae", start.iteration + 1)) {
      const auto a = row.find(','), b = row.find(',', a + 1);
      best_f = std::max(best_f, std::stod(row.substr(a + 1, b - a - 1)));
    }
    loss_csv.open(loss_path, std::ios::app);
    val_csv.open(val_path, std::ios::app);
  }

  const std::int64_t end = options.stop_at >= 0 ? std::min(options.stop_at, cfg.iterations) : cfg.iterations;
  const Rng batch_root(cfg.seed, streams::kBatch), aug_root(cfg.seed, streams::kAugment);
  Checkpoint& ck = start;
  std::vector<std::size_t> order(pool.size());

  for (std::int64_t k = ck.iteration; k < end; ++k) {
    Rng brng = batch_root.split(std::uint64_t(k));
    Rng arng = aug_root.split(std::uint64_t(k));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<SampleRecord> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto j = static_cast<std::size_t>(brng.uniform_int(b, std::int64_t(order.size()) - 1));
      std::swap(order[b], order[j]);
      const SampleRecord& s = data[pool[order[b]]];
      batch.push_back(cfg.augment ? augment(s, arng) : s);
    }
    const auto images = stack_images(batch);
    const auto labels = stack_masks(batch);

    Tape<float> tape;
    auto out = forward(ck.params, tape.constant(images), Mode::train, true);
    const std::size_t hw = std::size_t(size) * size;
    std::vector<SampleSet> full, mined;
    for (std::size_t n = 0; n < batch.size(); ++n)
      full.push_back(full_sample_set(std::span<const std::uint8_t>(labels).subspan(n * hw, hw)));
    if (cfg.hard_negative_mining) {
      const auto ce = per_pixel_cross_entropy(out.ce_probs.value(), labels);
      for (std::size_t n = 0; n < batch.size(); ++n)
        mined.push_back(hard_negative_sample(std::span<const double>(ce).subspan(n * hw, hw),
                                             std::span<const std::uint8_t>(labels).subspan(n * hw, hw)));
    }
    const auto& ce_samples = cfg.hard_negative_mining ? mined : full;
    const auto& metric_samples = cfg.hard_negative_mining && cfg.mine_metric_loss ? mined : full;
    auto loss = combined_loss(out.embedding, out.ce_probs, labels, ce_samples, cfg.lambda, cfg.objective,
                              metric_samples);
    if (!std::isfinite(loss.values.total))
      throw NumericalError("non-finite training loss at iteration " + std::to_string(k));
    auto g = tape.backward(loss.total, Tensor<float>::ones(loss.total.shape()));
    ParameterSet<float> grads;
    for (std::size_t i = 0; i < ck.params.weights.size(); ++i)
      grads.add(ck.params.weights.name(i), g.take(ck.params.weights.name(i)));
    if (cfg.clip_norm > 0) clip_gradients(grads, cfg.clip_norm);
    apply_batch_stats(ck.params, out);
    sgd_step(ck.params.weights, grads, *ck.optim, cfg);
    ck.iteration = k + 1;

    const LossRecord rec{k, loss.values.l_ce, loss.values.l_ml_star, loss.values.total};
    result.history.push_back(rec);
    if (options.on_step) options.on_step(rec);
    if (write) loss_csv << loss_csv_row(rec) << '\n';

    const bool at_interval = cfg.checkpoint_interval > 0 && ck.iteration % cfg.checkpoint_interval == 0;
    if (at_interval || ck.iteration == end) {
      std::optional<ValidationRecord> val;
      if (!options.validation.empty()) {
        const auto rep = evaluate_model(ck.params, options.validation, validation_map(cfg.objective));
        val = ValidationRecord{ck.iteration, rep.mean.f, rep.mean.mae};
        result.validation.push_back(*val);
      }
      if (write) {
        loss_csv.flush();
        if (at_interval) save_checkpoint(options.out_dir / ckpt_name(ck.iteration), ck);
        save_checkpoint(options.out_dir / "last.ment", ck);
        if (val) {
          val_csv << val->iteration << ',' << std::setprecision(9) << val->f_beta << ',' << val->mae << '\n';
          val_csv.flush();
          if (val->f_beta > best_f) {
            best_f = val->f_beta;
            save_checkpoint(options.out_dir / "best.ment", ck);
          }
        }
      }
    }
  }
  result.checkpoint = std::move(ck);
  return result;
}

#define MENET_INSTANTIATE(T)                                                                                  \
  template struct OptimState<T>;                                                                              \
  template void sgd_step(ParameterSet<T>&, const ParameterSet<T>&, OptimState<T>&, const TrainConfig&);       \
  template double clip_gradients(ParameterSet<T>&, double);

MENET_INSTANTIATE(float)
MENET_INSTANTIATE(double)
#undef MENET_INSTANTIATE

}  // namespace menet
