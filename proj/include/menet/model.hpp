#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "menet/autodiff.hpp"
#include "menet/layers.hpp"
#include "menet/params.hpp"

namespace menet {

/// Which tensor the two-kernel cross-entropy head reads.
enum class CeHeadInput { stack, embedding };

struct ModelConfig {
  int input_size = 64;  // square, power of two, >= 8
  int input_channels = 3;
  int base_channels = 8;
  int convs_per_block = 2;
  int embedding_dim = 16;
  CeHeadInput ce_head_input = CeHeadInput::stack;
  /// Parameter-free batch norm on the embedding head output. Fixes the
  /// per-channel scale so the metric loss is bounded below.
  bool embedding_norm = true;
  /// Target root-mean-square embedding norm per pixel under embedding_norm.
  double embedding_rms = 1.0;

  /// Number of stride-2 encoder blocks, log2(input_size).
  int levels() const;
  /// 2 * levels + 1: the raw image, every encoder block and every decoder block.
  int scale_count() const;
  int channels_at(int level) const { return base_channels << level; }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
/// Rejects unknown keys; missing keys keep their defaults.
void from_json(const nlohmann::json& j, ModelConfig& c);

enum class LayerKind { conv, deconv, extractor, head };

/// One convolutional layer of the assembled network.
struct LayerSpec {
  std::string name;
  LayerKind kind;
  int in_channels;
  int out_channels;
  ConvGeometry geometry;
  bool batch_norm;  // followed by BN + ReLU
};

/// Every convolutional layer in build order.
std::vector<LayerSpec> layer_specs(const ModelConfig& config);

/// Convolutional depth: stem + levels * k (encoder) + levels * k (decoder)
/// + one extractor stage + the two parallel heads, i.e. 2*levels*k + 4.
/// With k = 4 and six blocks per side this is 52.
int depth(const ModelConfig& config);

/// Depth recounted by walking the layer list of a built model.
template <typename T>
struct MEnetParams;
template <typename T>
int structural_depth(const MEnetParams<T>& params);

template <typename T>
struct MEnetParams {
  ModelConfig config;
  ParameterSet<T> weights;  // learnable: conv weights/biases, BN gamma/beta
  ParameterSet<T> buffers;  // BN running mean/var

  BatchNormStats<T> running_stats(const std::string& layer) const {
    return {buffers[layer + ".running_mean"], buffers[layer + ".running_var"]};
  }

  template <typename U>
  MEnetParams<U> cast() const {
    return MEnetParams<U>{config, weights.template cast<U>(), buffers.template cast<U>()};
  }

  friend bool operator==(const MEnetParams& a, const MEnetParams& b) {
    return a.config == b.config && a.weights == b.weights && a.buffers == b.buffers;
  }
};

/// Target standard deviation of a layer's initial weights (fan-in scaled;
/// gain 2 for layers followed by ReLU).
double init_std(const LayerSpec& spec);

template <typename T>
MEnetParams<T> build(const ModelConfig& config, Rng& rng);

template <typename T>
struct ForwardOutput {
  std::vector<Var<T>> encoder;     // stem output, then one per encoder block (sizes I, I/2, ..., 1)
  std::vector<Var<T>> decoder;     // one per decoder block (sizes 2, 4, ..., I)
  std::vector<Var<T>> scale_maps;  // scale_count maps, each N x 1 x I x I
  Var<T> stack;                    // N x scale_count x I x I
  Var<T> embedding;                // N x C x I x I
  Var<T> ce_logits;                // N x 2 x I x I
  Var<T> ce_probs;                 // channel 1 = P(salient)
  /// Train mode only: batch statistics per BN layer name.
  std::vector<std::pair<std::string, BatchNormStats<T>>> bn_batch_stats;
};

/// Runs the encoder-decoder, the per-scale extractors and both heads.
/// With `track_params` the weights are tracked leaves named as in
/// `params.weights`; otherwise they enter the tape as constants.
template <typename T>
ForwardOutput<T> forward(const MEnetParams<T>& params, Var<T> image, Mode mode, bool track_params = true);

template <typename T>
ForwardOutput<T> forward(const MEnetParams<T>& params, Tape<T>& tape, const Tensor<T>& image, Mode mode,
                         bool track_params = true) {
  return forward(params, tape.constant(image), mode, track_params);
}

/// Folds the batch statistics of a train-mode forward into the running stats.
template <typename T>
void apply_batch_stats(MEnetParams<T>& params, const ForwardOutput<T>& out, double momentum = 0.9);

}  // namespace menet
