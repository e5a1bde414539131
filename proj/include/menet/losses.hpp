#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "menet/autodiff.hpp"

namespace menet {

/// Pixel indices (row-major within one image) selected for a loss.
/// `positive` holds salient pixels, `negative` background pixels.
struct SampleSet {
  std::vector<std::uint32_t> positive;
  std::vector<std::uint32_t> negative;

  std::size_t size() const { return positive.size() + negative.size(); }
  bool balanced() const { return positive.size() == negative.size(); }
};

/// Every pixel of one H*W label map.
SampleSet full_sample_set(std::span<const std::uint8_t> labels);

/// Keeps the minority class entirely and the same number of majority-class
/// pixels with the largest per-pixel CE loss (ties to the lower index).
/// Throws ContractError if either class is absent.
SampleSet hard_negative_sample(std::span<const double> per_pixel_ce, std::span<const std::uint8_t> labels);

struct LossValues {
  double l_ce = 0;
  double l_ml = std::numeric_limits<double>::quiet_NaN();  // pairwise form, only when requested
  double l_ml_star = 0;
  double total = 0;
  double lambda = 1.0;
};

struct ClassCentroids {
  std::vector<double> positive;
  std::vector<double> negative;
};

/// Probabilities are clamped to [kProbFloor, 1 - kProbFloor] inside the log.
inline constexpr double kProbFloor = 1e-7;

/// -ln P(l_i = y_i) for every pixel. probs: N x 2 x H x W. Output length N*H*W.
template <typename T>
std::vector<double> per_pixel_cross_entropy(const Tensor<T>& probs, std::span<const std::uint8_t> labels);

/// Mean over images of the mean CE over each image's sampled pixels.
/// labels has N*H*W entries (1 = salient); one SampleSet per image.
template <typename T>
Var<T> cross_entropy(Var<T> probs, std::span<const std::uint8_t> labels, std::span<const SampleSet> samples);

/// Direct O(P^2 C) evaluation of the pairwise metric loss: for every sampled
/// pixel, mean squared distance to same-class samples minus mean squared
/// distance to other-class samples; averaged over pixels, then images.
template <typename T>
Var<T> metric_loss_pairwise(Var<T> embeddings, std::span<const std::uint8_t> labels,
                            std::span<const SampleSet> samples);

/// O(P C) centroid form: squared distance to the own-class centroid minus
/// squared distance to the other-class centroid.
template <typename T>
Var<T> metric_loss_centroid(Var<T> embeddings, std::span<const std::uint8_t> labels,
                            std::span<const SampleSet> samples);

/// Centroids of the sampled embeddings of image `n`.
template <typename T>
ClassCentroids class_centroids(const Tensor<T>& embeddings, std::size_t n, const SampleSet& samples);

enum class Objective { combined, ce_only, metric_only };

template <typename T>
struct CombinedLoss {
  Var<T> total;
  LossValues values;
};

/// total = l_ml_star + lambda * l_ce for the combined objective.
/// `metric_samples` defaults to `samples` when empty.
template <typename T>
CombinedLoss<T> combined_loss(Var<T> embeddings, Var<T> probs, std::span<const std::uint8_t> labels,
                              std::span<const SampleSet> samples, double lambda = 1.0,
                              Objective objective = Objective::combined,
                              std::span<const SampleSet> metric_samples = {}, bool with_pairwise = false);

}  // namespace menet
