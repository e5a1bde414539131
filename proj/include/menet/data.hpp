#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "menet/rng.hpp"
#include "menet/tensor.hpp"

namespace menet {

/// Malformed or inconsistent files on disk.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kGeneratorVersion = 2;

/// image: 3 x H x W in [0, 1]; mask: H x W in {0, 1}.
struct SampleRecord {
  std::string id;
  Tensor<float> image;
  std::vector<std::uint8_t> mask;

  std::size_t size() const { return image.dim(2); }
  double salient_fraction() const;
};

struct DatasetManifest {
  std::string split = "train";
  std::vector<std::string> ids;
  std::uint64_t seed = 0;
  int size = 64;
  int version = kGeneratorVersion;
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

/// One sample drawn from `rng`. Salient area fraction lies in [0.05, 0.6].
SampleRecord generate_sample(int size, Rng& rng, std::string id = {});

/// n samples; sample k uses the split stream rng.split(k), so any subset
/// can be regenerated independently.
std::vector<SampleRecord> generate_synthetic(std::size_t n, int size, const Rng& rng);

/// Bilinear resample of the region [x0, x0+w) x [y0, y0+h) of every plane
/// onto a target x target grid (pixel centres at +0.5).
Tensor<float> resample_bilinear(const Tensor<float>& image, double x0, double y0, double w, double h,
                                int target);
std::vector<std::uint8_t> resample_nearest(std::span<const std::uint8_t> mask, int size, double x0, double y0,
                                           double w, double h, int target);

Tensor<float> resize(const Tensor<float>& image, int target);
std::vector<std::uint8_t> resize_mask(std::span<const std::uint8_t> mask, int size, int target);

SampleRecord flip_horizontal(const SampleRecord& s);

struct AugmentOptions {
  double flip_probability = 0.5;
  double min_crop_scale = 0.8;
  int max_crop_attempts = 5;
};

/// Random horizontal flip, then a random square crop resized back to the
/// original size. Crops that lose a class are redrawn; after
/// `max_crop_attempts` failures the sample is returned unchanged.
SampleRecord augment(const SampleRecord& s, Rng& rng, const AugmentOptions& opts = {});

// 8-bit binary PPM (P6) images and PGM (P5) masks.
void save_image(const std::filesystem::path& path, const Tensor<float>& image);
Tensor<float> load_image(const std::filesystem::path& path);
void save_mask(const std::filesystem::path& path, std::span<const std::uint8_t> mask, int size);
/// Values >= 128 map to 1.
std::vector<std::uint8_t> load_mask(const std::filesystem::path& path, int* size = nullptr);
/// Grayscale map in [0, 1] as P5.
void save_gray(const std::filesystem::path& path, std::span<const double> map, int width, int height);
std::vector<double> load_gray(const std::filesystem::path& path, int* width = nullptr, int* height = nullptr);

/// Writes manifest.json, images/<id>.ppm and masks/<id>.pgm.
void save_dataset(const std::filesystem::path& dir, const std::vector<SampleRecord>& samples,
                  const DatasetManifest& manifest);
/// Reads a directory written by save_dataset.
std::vector<SampleRecord> load_dataset(const std::filesystem::path& dir, DatasetManifest* manifest = nullptr);

/// Stacks images into N x 3 x H x W and masks into N*H*W labels.
Tensor<float> stack_images(std::span<const SampleRecord> samples);
std::vector<std::uint8_t> stack_masks(std::span<const SampleRecord> samples);

}  // namespace menet
