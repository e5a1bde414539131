#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "menet/rng.hpp"
#include "menet/tensor.hpp"

namespace menet {

enum class DistortionKind { none, awgn, dct_quant };

struct DistortionSpec {
  DistortionKind kind = DistortionKind::none;
  double sigma = 0.0;  // AWGN std in [0,1] intensity units
  int quality = 100;   // dct_quant quality, 1..100
  std::uint64_t seed = 0;
  bool random_strength = false;  // draw sigma / quality from the ranges below per image
  double sigma_min = 0.02, sigma_max = 0.20;
  int quality_min = 20, quality_max = 80;

  void validate() const;
  std::string label() const;  // e.g. "awgn_0.05", "dct_q30", "clean"
  bool operator==(const DistortionSpec&) const = default;
};

void to_json(nlohmann::json& j, const DistortionSpec& s);
void from_json(const nlohmann::json& j, DistortionSpec& s);

/// clip(image + sigma * N(0,1), 0, 1), independently per element.
Tensor<float> awgn(const Tensor<float>& image, double sigma, Rng& rng);

/// Block-DCT quantization proxy for JPEG on every H x W plane of a
/// C x H x W (or N x C x H x W) image.
Tensor<float> dct_quant(const Tensor<float>& image, int quality);

/// Quantization step for DCT coefficient (u, v) on the 0..255 scale.
double dct_quant_step(int quality, int u, int v);

/// Concrete spec with sigma or quality drawn from the configured range.
DistortionSpec random_strength(const DistortionSpec& spec, Rng& rng);

/// Applies `spec` (drawing a strength first when random_strength is set).
Tensor<float> apply_distortion(const Tensor<float>& image, const DistortionSpec& spec, Rng& rng);

}  // namespace menet
