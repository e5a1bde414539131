#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "menet/model.hpp"

namespace menet {

/// salient[i] = 1 for pixels in the salient region, 0 for background.
struct RegionPartition {
  std::vector<std::uint8_t> salient;

  std::size_t salient_count() const;
  std::size_t background_count() const { return salient.size() - salient_count(); }
};

/// Pixel is salient iff P(salient) > 0.5 (ties go to background).
/// probs: N x 2 x H x W, image `n`.
template <typename T>
RegionPartition partition_regions(const Tensor<T>& probs, std::size_t n = 0);

enum class CentroidWeighting { posterior, uniform };

/// Background centroid weighted by P(background) over the background region,
/// or over the whole image when the region is empty.
template <typename T>
std::vector<double> background_centroid(const Tensor<T>& embeddings, const RegionPartition& partition,
                                        const Tensor<T>& probs, std::size_t n = 0,
                                        CentroidWeighting weighting = CentroidWeighting::posterior);

/// Euclidean distance of each embedding of image `n` to `centroid`.
template <typename T>
std::vector<double> metric_saliency_raw(const Tensor<T>& embeddings, std::span<const double> centroid,
                                        std::size_t n = 0);

/// Divides by the maximum; an all-zero map stays zero.
void normalize_by_max(std::vector<double>& map);

enum class MapKind { metric, ce };

struct SaliencyMaps {
  std::size_t size = 0;                 // side length I
  std::vector<double> metric;           // normalized to [0, 1]
  std::vector<double> ce;               // P(salient)
  std::vector<std::uint8_t> binary;     // selected map thresholded at twice its mean
  std::vector<double> centroid;

  const std::vector<double>& map(MapKind kind) const { return kind == MapKind::metric ? metric : ce; }
};

template <typename T>
SaliencyMaps saliency_maps(const ForwardOutput<T>& out, std::size_t n = 0,
                           CentroidWeighting weighting = CentroidWeighting::posterior,
                           MapKind binary_source = MapKind::metric);

/// Inference-mode forward of a batch followed by saliency_maps per image.
template <typename T>
std::vector<SaliencyMaps> predict(const MEnetParams<T>& params, const Tensor<T>& images,
                                  CentroidWeighting weighting = CentroidWeighting::posterior,
                                  MapKind binary_source = MapKind::metric);

}  // namespace menet
