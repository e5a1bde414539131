#include "menet/model.hpp"

#include <bit>
#include <cmath>

namespace menet {

int ModelConfig::levels() const { return std::countr_zero(static_cast<unsigned>(input_size)); }

int ModelConfig::scale_count() const { return 2 * levels() + 1; }

void ModelConfig::validate() const {
  if (input_size < 8 || !std::has_single_bit(static_cast<unsigned>(input_size)))
    throw ContractError("model.input_size must be a power of two >= 8, got " +
                        std::to_string(input_size));
  if (input_channels < 1) throw ContractError("model.input_channels must be >= 1");
  if (base_channels < 1) throw ContractError("model.base_channels must be >= 1");
  if (convs_per_block < 1) throw ContractError("model.convs_per_block must be >= 1");
  if (embedding_dim < 1) throw ContractError("model.embedding_dim must be >= 1");
  if (!(embedding_rms > 0)) throw ContractError("model.embedding_rms must be > 0");
  if (static_cast<long>(base_channels) << levels() > (1L << 16))
    throw ContractError("model.base_channels too large for the number of levels");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"input_size", c.input_size},
                     {"input_channels", c.input_channels},
                     {"base_channels", c.base_channels},
                     {"convs_per_block", c.convs_per_block},
                     {"embedding_dim", c.embedding_dim},
                     {"ce_head_input", c.ce_head_input == CeHeadInput::stack ? "stack" : "embedding"},
                     {"embedding_norm", c.embedding_norm},
                     {"embedding_rms", c.embedding_rms}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ContractError("model: expected an object");
  for (const auto& [key, value] : j.items()) {
    if (key == "input_size") c.input_size = value.get<int>();
    else if (key == "input_channels") c.input_channels = value.get<int>();
    else if (key == "base_channels") c.base_channels = value.get<int>();
    else if (key == "convs_per_block") c.convs_per_block = value.get<int>();
    else if (key == "embedding_dim") c.embedding_dim = value.get<int>();
    else if (key == "ce_head_input") {
      const auto s = value.get<std::string>();
      if (s == "stack") c.ce_head_input = CeHeadInput::stack;
      else if (s == "embedding") c.ce_head_input = CeHeadInput::embedding;
      else throw ContractError("model.ce_head_input: expected 'stack' or 'embedding', got '" + s + "'");
    } else if (key == "embedding_norm") {
      c.embedding_norm = value.get<bool>();
    } else if (key == "embedding_rms") {
      c.embedding_rms = value.get<double>();
    } else {
      throw ContractError("model: unknown key '" + key + "'");
    }
  }
}

std::vector<LayerSpec> layer_specs(const ModelConfig& config) {
  config.validate();
  const int L = config.levels();
  const int k = config.convs_per_block;
  const ConvGeometry same{3, 1, 1}, down{3, 2, 1}, up{3, 2, 1}, pointwise{1, 1, 0};
  std::vector<LayerSpec> specs;
  specs.push_back({"stem", LayerKind::conv, config.input_channels, config.channels_at(0), same, true});
  for (int b = 1; b <= L; ++b) {
    const std::string blk = "enc" + std::to_string(b);
    specs.push_back({blk + ".conv0", LayerKind::conv, config.channels_at(b - 1), config.channels_at(b), down,
                     true});
    for (int j = 1; j < k; ++j)
      specs.push_back({blk + ".conv" + std::to_string(j), LayerKind::conv, config.channels_at(b),
                       config.channels_at(b), same, true});
  }
  for (int b = L; b >= 1; --b) {
    const std::string blk = "dec" + std::to_string(b);
    int in = b == L ? config.channels_at(L) : 2 * config.channels_at(b);
    for (int j = 0; j < k - 1; ++j) {
      specs.push_back({blk + ".conv" + std::to_string(j), LayerKind::conv, in, config.channels_at(b), same,
                       true});
      in = config.channels_at(b);
    }
    specs.push_back({blk + ".deconv", LayerKind::deconv, in, config.channels_at(b - 1), up, true});
  }
  // scale 0 reads the image, scales 1..L the encoder blocks, L+1..2L the decoder blocks
  specs.push_back({"extract0", LayerKind::extractor, config.input_channels, 1, same, false});
  for (int b = 1; b <= L; ++b)
    specs.push_back({"extract" + std::to_string(b), LayerKind::extractor, config.channels_at(b), 1, same, false});
  for (int b = L; b >= 1; --b)
    specs.push_back({"extract" + std::to_string(2 * L + 1 - b), LayerKind::extractor,
                     config.channels_at(b - 1), 1, same, false});
  const int stack = config.scale_count();
  specs.push_back({"embed", LayerKind::head, stack, config.embedding_dim, pointwise, false});
  specs.push_back({"ce", LayerKind::head,
                   config.ce_head_input == CeHeadInput::stack ? stack : config.embedding_dim, 2, pointwise,
                   false});
  return specs;
}

int depth(const ModelConfig& config) {
  config.validate();
  return 2 * config.levels() * config.convs_per_block + 4;
}

template <typename T>
int structural_depth(const MEnetParams<T>& params) {
  int trunk = 0, heads = 0;
  bool extractors = false;
  for (const auto& s : layer_specs(params.config)) {
    if (!params.weights.contains(s.name + ".weight"))
      throw ContractError("structural_depth: layer '" + s.name + "' missing from parameters");
    switch (s.kind) {
      case LayerKind::conv:
      case LayerKind::deconv: ++trunk; break;
      case LayerKind::extractor: extractors = true; break;
      case LayerKind::head: ++heads; break;
    }
  }
  return trunk + (extractors ? 1 : 0) + heads;
}

double init_std(const LayerSpec& spec) {
  const double k2 = static_cast<double>(spec.geometry.kernel) * spec.geometry.kernel;
  // a transposed stride-2 conv feeds each output pixel from a quarter of its taps
  const double fan_in = spec.kind == LayerKind::deconv ? spec.in_channels * k2 / 4.0 : spec.in_channels * k2;
  const double gain = spec.batch_norm ? 2.0 : 1.0;
  return std::sqrt(gain / fan_in);
}

template <typename T>
MEnetParams<T> build(const ModelConfig& config, Rng& rng) {
  config.validate();
  MEnetParams<T> p{config, {}, {}};
  Rng init = rng.split(streams::kInit);
  for (const auto& s : layer_specs(config)) {
    const std::size_t k = static_cast<std::size_t>(s.geometry.kernel);
    const Shape wshape = s.kind == LayerKind::deconv
                             ? Shape{std::size_t(s.in_channels), std::size_t(s.out_channels), k, k}
                             : Shape{std::size_t(s.out_channels), std::size_t(s.in_channels), k, k};
    Rng layer_rng = init.split(stable_hash(s.name));
    p.weights.add(s.name + ".weight", random_normal<T>(layer_rng, wshape, 0.0, init_std(s)));
    p.weights.add(s.name + ".bias", Tensor<T>({std::size_t(s.out_channels)}));
    if (s.batch_norm) {
      const std::size_t c = static_cast<std::size_t>(s.out_channels);
      p.weights.add(s.name + ".bn.gamma", Tensor<T>::ones({c}));
      p.weights.add(s.name + ".bn.beta", Tensor<T>({c}));
      p.buffers.add(s.name + ".bn.running_mean", Tensor<T>({c}));
      p.buffers.add(s.name + ".bn.running_var", Tensor<T>::ones({c}));
    }
  }
  if (config.embedding_norm) {
    const std::size_t c = static_cast<std::size_t>(config.embedding_dim);
    p.buffers.add("embed.norm.running_mean", Tensor<T>({c}));
    p.buffers.add("embed.norm.running_var", Tensor<T>::ones({c}));
  }
  return p;
}

namespace {

template <typename T>
class Assembler {
 public:
  Assembler(const MEnetParams<T>& p, Tape<T>& tape, Mode mode, bool track, ForwardOutput<T>& out)
      : p_(p), tape_(tape), mode_(mode), track_(track), out_(out) {}

  Var<T> param(const std::string& name) {
    const Tensor<T>& t = p_.weights[name];
    return track_ ? tape_.leaf_ref(t, name) : tape_.constant_ref(t);
  }

  Var<T> apply(const LayerSpec& s, Var<T> x) {
    Var<T> w = param(s.name + ".weight");
    Var<T> b = param(s.name + ".bias");
    Var<T> y = s.kind == LayerKind::deconv ? deconv2d(x, w, b, s.geometry) : conv2d(x, w, b, s.geometry);
    if (!s.batch_norm) return y;
    const std::string bn = s.name + ".bn";
    BatchNormStats<T> batch;
    y = batch_norm(y, param(bn + ".gamma"), param(bn + ".beta"), p_.running_stats(bn), mode_, {},
                   mode_ == Mode::train ? &batch : nullptr);
    if (mode_ == Mode::train) out_.bn_batch_stats.emplace_back(bn, std::move(batch));
    return relu(y);
  }

  // batch norm with a fixed scale of rms/sqrt(C), so E||f||^2 = rms^2 per pixel
  Var<T> normalize(const std::string& name, Var<T> x, double rms) {
    const std::size_t c = x.dim(1);
    BatchNormStats<T> batch;
    const T scale = static_cast<T>(rms / std::sqrt(double(c)));
    Var<T> y = batch_norm(x, tape_.constant(Tensor<T>({c}, scale)), tape_.constant(Tensor<T>({c})),
                          p_.running_stats(name), mode_, {}, mode_ == Mode::train ? &batch : nullptr);
    if (mode_ == Mode::train) out_.bn_batch_stats.emplace_back(name, std::move(batch));
    return y;
  }

 private:
  const MEnetParams<T>& p_;
  Tape<T>& tape_;
  Mode mode_;
  bool track_;
  ForwardOutput<T>& out_;
};

}  // namespace

template <typename T>
ForwardOutput<T> forward(const MEnetParams<T>& params, Var<T> image, Mode mode, bool track_params) {
  const ModelConfig& cfg = params.config;
  const std::size_t I = static_cast<std::size_t>(cfg.input_size);
  const auto& is = image.shape();
  if (is.size() != 4 || is[1] != static_cast<std::size_t>(cfg.input_channels) || is[2] != I || is[3] != I)
    throw ContractError("forward: image shape " + shape_str(is) + " does not match model input " +
                        std::to_string(cfg.input_channels) + "x" + std::to_string(I) + "x" +
                        std::to_string(I));
  ForwardOutput<T> out;
  Tape<T>& tape = *image.tape;
  Assembler<T> as(params, tape, mode, track_params, out);
  const auto specs = layer_specs(cfg);
  std::size_t next = 0;
  auto take = [&]() -> const LayerSpec& { return specs.at(next++); };

  const int L = cfg.levels();
  const int k = cfg.convs_per_block;
  Var<T> x = as.apply(take(), image);
  out.encoder.push_back(x);
  for (int b = 1; b <= L; ++b) {
    for (int j = 0; j < k; ++j) x = as.apply(take(), x);
    out.encoder.push_back(x);
  }
  for (int b = L; b >= 1; --b) {
    if (b != L) x = concat_channels<T>({x, out.encoder[static_cast<std::size_t>(b)]});
    for (int j = 0; j < k; ++j) x = as.apply(take(), x);
    out.decoder.push_back(x);
  }

  auto extract = [&](Var<T> feature) {
    Var<T> m = as.apply(take(), feature);
    const int factor = static_cast<int>(I / feature.dim(2));
    return factor == 1 ? m : replicate_upsample(m, factor);
  };
  out.scale_maps.push_back(extract(image));
  for (int b = 1; b <= L; ++b) out.scale_maps.push_back(extract(out.encoder[static_cast<std::size_t>(b)]));
  for (const auto& d : out.decoder) out.scale_maps.push_back(extract(d));

  out.stack = concat_channels(out.scale_maps);
  out.embedding = as.apply(take(), out.stack);
  if (cfg.embedding_norm) out.embedding = as.normalize("embed.norm", out.embedding, cfg.embedding_rms);
  out.ce_logits = as.apply(take(), cfg.ce_head_input == CeHeadInput::stack ? out.stack : out.embedding);
  out.ce_probs = softmax2(out.ce_logits);
  return out;
}

template <typename T>
void apply_batch_stats(MEnetParams<T>& params, const ForwardOutput<T>& out, double momentum) {
  for (const auto& [name, stats] : out.bn_batch_stats) {
    BatchNormStats<T> running = params.running_stats(name);
    update_running_stats(running, stats, momentum);
    params.buffers[name + ".running_mean"] = std::move(running.mean);
    params.buffers[name + ".running_var"] = std::move(running.var);
  }
}

#define MENET_INSTANTIATE(T)                                                                 \
  template int structural_depth(const MEnetParams<T>&);                                      \
  template MEnetParams<T> build(const ModelConfig&, Rng&);                                   \
  template ForwardOutput<T> forward(const MEnetParams<T>&, Var<T>, Mode, bool);              \
  template void apply_batch_stats(MEnetParams<T>&, const ForwardOutput<T>&, double);

MENET_INSTANTIATE(float)
MENET_INSTANTIATE(double)
#undef MENET_INSTANTIATE

}  // namespace menet
