#include "menet/distortions.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <sstream>

namespace menet {

namespace {

// IJG luminance table, row-major over (v, u).
constexpr std::array<int, 64> kLuma = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

struct DctBasis {
  std::array<double, 64> c{};  // c[u * 8 + x]
  DctBasis() {
    for (int u = 0; u < 8; ++u)
      for (int x = 0; x < 8; ++x)
        c[u * 8 + x] = (u == 0 ? std::sqrt(1.0 / 8) : std::sqrt(2.0 / 8)) *
                       std::cos((2 * x + 1) * u * std::numbers::pi / 16);
  }
};

const DctBasis& basis() {
  static const DctBasis b;
  return b;
}

const char* kind_name(DistortionKind k) {
  switch (k) {
    case DistortionKind::none: return "none";
    case DistortionKind::awgn: return "awgn";
    case DistortionKind::dct_quant: return "dct_quant";
  }
  return "none";
}

}  // namespace

void DistortionSpec::validate() const {
  if (!(sigma >= 0) || !std::isfinite(sigma)) throw ContractError("distortion.sigma must be >= 0");
  if (quality < 1 || quality > 100) throw ContractError("distortion.quality must be in [1, 100]");
  if (!(sigma_min >= 0) || sigma_max < sigma_min) throw ContractError("distortion.sigma_range is invalid");
  if (quality_min < 1 || quality_max > 100 || quality_max < quality_min)
    throw ContractError("distortion.quality_range is invalid");
}

std::string DistortionSpec::label() const {
  std::ostringstream os;
  switch (kind) {
    case DistortionKind::none: return "clean";
    case DistortionKind::awgn:
      if (random_strength) return "awgn_random";
      os << "awgn_" << sigma;
      return os.str();
    case DistortionKind::dct_quant:
      if (random_strength) return "dct_random";
      return "dct_q" + std::to_string(quality);
  }
  return "clean";
}

void to_json(nlohmann::json& j, const DistortionSpec& s) {
  j = {{"kind", kind_name(s.kind)},
       {"sigma", s.sigma},
       {"quality", s.quality},
       {"seed", s.seed},
       {"random_strength", s.random_strength},
       {"sigma_range", {s.sigma_min, s.sigma_max}},
       {"quality_range", {s.quality_min, s.quality_max}}};
}

void from_json(const nlohmann::json& j, DistortionSpec& s) {
  if (!j.is_object()) throw ContractError("distortion: expected an object");
  s = DistortionSpec{};
  for (const auto& [key, v] : j.items()) {
    if (key == "kind") {
      const auto k = v.get<std::string>();
      if (k == "none" || k == "clean") s.kind = DistortionKind::none;
      else if (k == "awgn") s.kind = DistortionKind::awgn;
      else if (k == "dct_quant" || k == "jpeg") s.kind = DistortionKind::dct_quant;
      else throw ContractError("distortion.kind: unknown kind '" + k + "'");
    } else if (key == "sigma") s.sigma = v.get<double>();
    else if (key == "quality") s.quality = v.get<int>();
    else if (key == "seed") s.seed = v.get<std::uint64_t>();
    else if (key == "random_strength") s.random_strength = v.get<bool>();
    else if (key == "sigma_range") {
      s.sigma_min = v.at(0).get<double>();
      s.sigma_max = v.at(1).get<double>();
    } else if (key == "quality_range") {
      s.quality_min = v.at(0).get<int>();
      s.quality_max = v.at(1).get<int>();
    } else
      throw ContractError("distortion: unknown key '" + key + "'");
  }
  s.validate();
}

Tensor<float> awgn(const Tensor<float>& image, double sigma, Rng& rng) {
  if (!(sigma >= 0)) throw ContractError("awgn: sigma must be >= 0");
  Tensor<float> out = image;
  if (sigma == 0) return out;
  for (auto& v : out.data()) v = static_cast<float>(std::clamp(v + sigma * rng.normal(), 0.0, 1.0));
  return out;
}

double dct_quant_step(int quality, int u, int v) {
  if (quality < 1 || quality > 100) throw ContractError("dct_quant: quality must be in [1, 100]");
  const double scale = quality < 50 ? 5000.0 / quality : 200.0 - 2.0 * quality;
  return kLuma[v * 8 + u] * scale / 100.0;
}

Tensor<float> dct_quant(const Tensor<float>& image, int quality) {
  if (quality < 1 || quality > 100) throw ContractError("dct_quant: quality must be in [1, 100]");
  if (image.shape().size() < 2) throw ContractError("dct_quant: image must have spatial dims");
  const std::size_t h = image.shape()[image.shape().size() - 2], w = image.shape()[image.shape().size() - 1];
  const std::size_t planes = image.size() / (h * w);
  std::array<double, 64> step{};
  for (int v = 0; v < 8; ++v)
    for (int u = 0; u < 8; ++u) step[v * 8 + u] = dct_quant_step(quality, u, v);
  const auto& c = basis().c;

  Tensor<float> out = image;
  std::array<double, 64> blk{}, tmp{}, coef{};
  for (std::size_t p = 0; p < planes; ++p) {
    const float* src = image.raw() + p * h * w;
    float* dst = out.raw() + p * h * w;
    for (std::size_t by = 0; by < h; by += 8)
      for (std::size_t bx = 0; bx < w; bx += 8) {
        for (std::size_t y = 0; y < 8; ++y)
          for (std::size_t x = 0; x < 8; ++x) {
            const std::size_t iy = by + y, ix = bx + x;
            blk[y * 8 + x] = (iy < h && ix < w) ? 255.0 * src[iy * w + ix] : 0.0;  // zero padding
          }
        // separable forward transform: rows then columns
        for (int y = 0; y < 8; ++y)
          for (int u = 0; u < 8; ++u) {
            double s = 0;
            for (int x = 0; x < 8; ++x) s += c[u * 8 + x] * blk[y * 8 + x];
            tmp[y * 8 + u] = s;
          }
        for (int v = 0; v < 8; ++v)
          for (int u = 0; u < 8; ++u) {
            double s = 0;
            for (int y = 0; y < 8; ++y) s += c[v * 8 + y] * tmp[y * 8 + u];
            coef[v * 8 + u] = s;
          }
        // DC passes through so flat regions keep their exact level
        for (int k = 1; k < 64; ++k)
          if (step[k] > 0) coef[k] = std::round(coef[k] / step[k]) * step[k];
        for (int v = 0; v < 8; ++v)
          for (int x = 0; x < 8; ++x) {
            double s = 0;
            for (int u = 0; u < 8; ++u) s += c[u * 8 + x] * coef[v * 8 + u];
            tmp[v * 8 + x] = s;
          }
        for (std::size_t y = 0; y < 8; ++y)
          for (std::size_t x = 0; x < 8; ++x) {
            const std::size_t iy = by + y, ix = bx + x;
            if (iy >= h || ix >= w) continue;
            double s = 0;
            for (int v = 0; v < 8; ++v) s += c[v * 8 + y] * tmp[v * 8 + x];
            dst[iy * w + ix] = static_cast<float>(std::clamp(s / 255.0, 0.0, 1.0));
          }
      }
  }
  return out;
}

DistortionSpec random_strength(const DistortionSpec& spec, Rng& rng) {
  spec.validate();
  DistortionSpec out = spec;
  out.random_strength = false;
  if (spec.kind == DistortionKind::awgn)
    out.sigma = spec.sigma_min == spec.sigma_max ? spec.sigma_min : rng.uniform(spec.sigma_min, spec.sigma_max);
  else if (spec.kind == DistortionKind::dct_quant)
    out.quality = static_cast<int>(rng.uniform_int(spec.quality_min, spec.quality_max));
  return out;
}

Tensor<float> apply_distortion(const Tensor<float>& image, const DistortionSpec& spec, Rng& rng) {
  const DistortionSpec s = spec.random_strength ? random_strength(spec, rng) : spec;
  s.validate();
  switch (s.kind) {
    case DistortionKind::none: return image;
    case DistortionKind::awgn: return awgn(image, s.sigma, rng);
    case DistortionKind::dct_quant: return dct_quant(image, s.quality);
  }
  return image;
}

}  // namespace menet
