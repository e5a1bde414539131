#include "menet/saliency.hpp"

#include <algorithm>
#include <cmath>

#include "menet/metrics.hpp"

namespace menet {

namespace {

template <typename T>
void check_probs(const Tensor<T>& probs, std::size_t n) {
  const auto& s = probs.shape();
  if (s.size() != 4 || s[1] != 2) throw ContractError("expected N x 2 x H x W probabilities, got " + shape_str(s));
  if (n >= s[0]) throw ContractError("image index " + std::to_string(n) + " out of batch " + shape_str(s));
}

}  // namespace

std::size_t RegionPartition::salient_count() const {
  return static_cast<std::size_t>(std::count(salient.begin(), salient.end(), std::uint8_t{1}));
}

template <typename T>
RegionPartition partition_regions(const Tensor<T>& probs, std::size_t n) {
  check_probs(probs, n);
  const std::size_t hw = probs.dim(2) * probs.dim(3);
  RegionPartition p;
  p.salient.resize(hw);
  for (std::size_t i = 0; i < hw; ++i) p.salient[i] = probs[(n * 2 + 1) * hw + i] > T(0.5);
  return p;
}

template <typename T>
std::vector<double> background_centroid(const Tensor<T>& embeddings, const RegionPartition& partition,
                                        const Tensor<T>& probs, std::size_t n, CentroidWeighting weighting) {
  check_probs(probs, n);
  const std::size_t c = embeddings.dim(1), hw = embeddings.dim(2) * embeddings.dim(3);
  if (partition.salient.size() != hw || probs.dim(2) * probs.dim(3) != hw)
    throw ContractError("background_centroid: partition, probabilities and embeddings differ in size");
  const bool fallback = partition.background_count() == 0;
  std::vector<double> w(hw, 0.0);
  double total = 0;
  for (std::size_t i = 0; i < hw; ++i) {
    if (!fallback && partition.salient[i]) continue;
    w[i] = weighting == CentroidWeighting::posterior ? double(probs[(n * 2) * hw + i]) : 1.0;
    total += w[i];
  }
  if (total <= 0) {  // every weight underflowed; fall back to a plain mean over the same pixels
    total = 0;
    for (std::size_t i = 0; i < hw; ++i) {
      w[i] = (fallback || !partition.salient[i]) ? 1.0 : 0.0;
      total += w[i];
    }
  }
  std::vector<double> mu(c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0;
    for (std::size_t i = 0; i < hw; ++i)
      if (w[i] != 0) acc += w[i] * double(embeddings[(n * c + ch) * hw + i]);
    mu[ch] = acc / total;
  }
  return mu;
}

template <typename T>
std::vector<double> metric_saliency_raw(const Tensor<T>& embeddings, std::span<const double> centroid,
                                        std::size_t n) {
  const std::size_t c = embeddings.dim(1), hw = embeddings.dim(2) * embeddings.dim(3);
  if (centroid.size() != c)
    throw ContractError("metric_saliency: centroid has " + std::to_string(centroid.size()) +
                        " dims, embeddings have " + std::to_string(c));
  std::vector<double> s(hw, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) {
      const double d = double(embeddings[(n * c + ch) * hw + i]) - centroid[ch];
      s[i] += d * d;
    }
  for (auto& v : s) v = std::sqrt(v);
  return s;
}

void normalize_by_max(std::vector<double>& map) {
  const double m = map.empty() ? 0.0 : *std::max_element(map.begin(), map.end());
  if (m <= 0) return;
  for (auto& v : map) v /= m;
}

template <typename T>
SaliencyMaps saliency_maps(const ForwardOutput<T>& out, std::size_t n, CentroidWeighting weighting,
                           MapKind binary_source) {
  const Tensor<T>& probs = out.ce_probs.value();
  const Tensor<T>& emb = out.embedding.value();
  check_probs(probs, n);
  const std::size_t hw = probs.dim(2) * probs.dim(3);
  SaliencyMaps m;
  m.size = probs.dim(2);
  const auto part = partition_regions(probs, n);
  m.centroid = background_centroid(emb, part, probs, n, weighting);
  m.metric = metric_saliency_raw(emb, m.centroid, n);
  normalize_by_max(m.metric);
  m.ce.resize(hw);
  for (std::size_t i = 0; i < hw; ++i) m.ce[i] = probs[(n * 2 + 1) * hw + i];
  const auto& src = m.map(binary_source);
  const double t = adaptive_threshold(src);
  m.binary.resize(hw);
  for (std::size_t i = 0; i < hw; ++i) m.binary[i] = src[i] > t;
  return m;
}

template <typename T>
std::vector<SaliencyMaps> predict(const MEnetParams<T>& params, const Tensor<T>& images,
                                  CentroidWeighting weighting, MapKind binary_source) {
  Tape<T> tape;
  auto out = forward(params, tape, images, Mode::inference, false);
  std::vector<SaliencyMaps> maps;
  for (std::size_t n = 0; n < images.dim(0); ++n) maps.push_back(saliency_maps(out, n, weighting, binary_source));
  return maps;
}

#define MENET_INSTANTIATE(T)                                                                                  \
  template RegionPartition partition_regions(const Tensor<T>&, std::size_t);                                \
  template std::vector<double> background_centroid(const Tensor<T>&, const RegionPartition&,               \
                                                   const Tensor<T>&, std::size_t, CentroidWeighting);       \
  template std::vector<double> metric_saliency_raw(const Tensor<T>&, std::span<const double>, std::size_t); \
  template SaliencyMaps saliency_maps(const ForwardOutput<T>&, std::size_t, CentroidWeighting, MapKind);    \
  template std::vector<SaliencyMaps> predict(const MEnetParams<T>&, const Tensor<T>&, CentroidWeighting,    \
                                             MapKind);

MENET_INSTANTIATE(float)
MENET_INSTANTIATE(double)

}  // namespace menet
