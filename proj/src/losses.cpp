#include "menet/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace menet {

namespace {

void check_labels(std::span<const std::uint8_t> labels) {
  for (auto l : labels)
    if (l > 1) throw ContractError("labels must be 0 or 1");
}

template <typename T>
void check_batch(const char* op, const Shape& s, std::size_t channels, std::span<const std::uint8_t> labels,
                 std::span<const SampleSet> samples) {
  if (s.size() != 4) throw ContractError(std::string(op) + ": expected N x C x H x W, got " + shape_str(s));
  if (channels && s[1] != channels)
    throw ContractError(std::string(op) + ": expected " + std::to_string(channels) + " channels, got " +
                        shape_str(s));
  const std::size_t n = s[0], hw = s[2] * s[3];
  if (labels.size() != n * hw)
    throw ContractError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                        shape_str(s));
  if (samples.size() != n)
    throw ContractError(std::string(op) + ": " + std::to_string(samples.size()) + " sample sets for batch of " +
                        std::to_string(n));
  for (std::size_t b = 0; b < n; ++b) {
    const auto& ss = samples[b];
    if (ss.size() == 0) throw ContractError(std::string(op) + ": empty sample set for image " + std::to_string(b));
    for (auto i : ss.positive)
      if (i >= hw || labels[b * hw + i] != 1)
        throw ContractError(std::string(op) + ": positive sample " + std::to_string(i) + " is not salient");
    for (auto i : ss.negative)
      if (i >= hw || labels[b * hw + i] != 0)
        throw ContractError(std::string(op) + ": negative sample " + std::to_string(i) + " is not background");
  }
}

double clamp_prob(double p) { return std::clamp(p, kProbFloor, 1.0 - kProbFloor); }

}  // namespace

SampleSet full_sample_set(std::span<const std::uint8_t> labels) {
  check_labels(labels);
  SampleSet s;
  for (std::uint32_t i = 0; i < labels.size(); ++i) (labels[i] ? s.positive : s.negative).push_back(i);
  return s;
}

SampleSet hard_negative_sample(std::span<const double> per_pixel_ce, std::span<const std::uint8_t> labels) {
  if (per_pixel_ce.size() != labels.size())
    throw ContractError("hard_negative_sample: " + std::to_string(per_pixel_ce.size()) + " losses for " +
                        std::to_string(labels.size()) + " labels");
  SampleSet all = full_sample_set(labels);
  if (all.positive.empty() || all.negative.empty())
    throw ContractError("hard_negative_sample: label map has a single class");
  const bool pos_minor = all.positive.size() <= all.negative.size();
  auto& minor = pos_minor ? all.positive : all.negative;
  auto& major = pos_minor ? all.negative : all.positive;
  const std::size_t m = minor.size();
  std::stable_sort(major.begin(), major.end(), [&](std::uint32_t a, std::uint32_t b) {
    return per_pixel_ce[a] > per_pixel_ce[b];
  });
  major.resize(m);
  std::sort(major.begin(), major.end());
  return all;
}

template <typename T>
std::vector<double> per_pixel_cross_entropy(const Tensor<T>& probs, std::span<const std::uint8_t> labels) {
  const auto& s = probs.shape();
  if (s.size() != 4 || s[1] != 2) throw ContractError("per_pixel_cross_entropy: expected N x 2 x H x W");
  const std::size_t n = s[0], hw = s[2] * s[3];
  if (labels.size() != n * hw) throw ContractError("per_pixel_cross_entropy: label count mismatch");
  check_labels(labels);
  std::vector<double> out(n * hw);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < hw; ++i) {
      const std::size_t y = labels[b * hw + i];
      out[b * hw + i] = -std::log(clamp_prob(probs[(b * 2 + y) * hw + i]));
    }
  return out;
}

template <typename T>
Var<T> cross_entropy(Var<T> probs, std::span<const std::uint8_t> labels, std::span<const SampleSet> samples) {
  check_batch<T>("cross_entropy", probs.shape(), 2, labels, samples);
  const Tensor<T>& p = probs.value();
  const std::size_t n = p.dim(0), hw = p.dim(2) * p.dim(3);
  double total = 0;
  for (std::size_t b = 0; b < n; ++b) {
    double acc = 0;
    for (const auto* set : {&samples[b].positive, &samples[b].negative})
      for (auto i : *set) acc -= std::log(clamp_prob(p[(b * 2 + labels[b * hw + i]) * hw + i]));
    total += acc / samples[b].size();
  }
  total /= n;

  std::vector<SampleSet> keep(samples.begin(), samples.end());
  std::vector<std::uint8_t> lab(labels.begin(), labels.end());
  auto exact = [keep, lab, n, hw, id = probs.id](const Tape<T>& tape, const Tensor<T>& g,
                                                 std::span<Tensor<T>*> gin) {
    if (!gin[0]) return;
    const Tensor<T>& p = tape.value(id);
    auto& d = *gin[0];
    for (std::size_t b = 0; b < n; ++b) {
      const double w = double(g[0]) / (double(n) * keep[b].size());
      for (const auto* set : {&keep[b].positive, &keep[b].negative})
        for (auto i : *set) {
          const std::size_t k = (b * 2 + lab[b * hw + i]) * hw + i;
          const double v = p[k];
          if (v < kProbFloor || v > 1.0 - kProbFloor) continue;  // flat inside the clamp
          d[k] += static_cast<T>(-w / v);
        }
    }
  };
  return probs.tape->record("cross_entropy", Tensor<T>({1}, static_cast<T>(total)), {probs}, exact);
}

static void require_two_classes(const char* op, std::span<const SampleSet> samples) {
  for (std::size_t b = 0; b < samples.size(); ++b)
    if (samples[b].positive.empty() || samples[b].negative.empty())
      throw ContractError(std::string(op) + ": image " + std::to_string(b) + " has a single sampled class");
}

template <typename T>
Var<T> metric_loss_pairwise(Var<T> embeddings, std::span<const std::uint8_t> labels,
                            std::span<const SampleSet> samples) {
  check_batch<T>("metric_loss_pairwise", embeddings.shape(), 0, labels, samples);
  require_two_classes("metric_loss_pairwise", samples);
  const Tensor<T>& e = embeddings.value();
  const std::size_t n = e.dim(0), c = e.dim(1), hw = e.dim(2) * e.dim(3);
  auto sqdist = [&](std::size_t b, std::size_t i, std::size_t k) {
    double s = 0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double d = double(e[(b * c + ch) * hw + i]) - double(e[(b * c + ch) * hw + k]);
      s += d * d;
    }
    return s;
  };
  double total = 0;
  for (std::size_t b = 0; b < n; ++b) {
    const auto& ss = samples[b];
    double acc = 0;
    for (int cls = 0; cls < 2; ++cls) {
      const auto& same = cls ? ss.positive : ss.negative;
      const auto& other = cls ? ss.negative : ss.positive;
      for (auto i : same) {
        double ds = 0, dd = 0;
        for (auto k : same) ds += sqdist(b, i, k);
        for (auto k : other) dd += sqdist(b, i, k);
        acc += ds / same.size() - dd / other.size();
      }
    }
    total += acc / ss.size();
  }
  total /= n;

  std::vector<SampleSet> keep(samples.begin(), samples.end());
  auto exact = [keep, n, c, hw, id = embeddings.id](const Tape<T>& tape, const Tensor<T>& g,
                                                    std::span<Tensor<T>*> gin) {
    if (!gin[0]) return;
    const Tensor<T>& e = tape.value(id);
    auto& d = *gin[0];
    for (std::size_t b = 0; b < n; ++b) {
      const auto& ss = keep[b];
      const double scale = double(g[0]) / (double(n) * ss.size());
      // each term w * |f_i - f_k|^2 contributes 2w(f_i - f_k) to i and the negative to k
      auto pair = [&](std::size_t i, std::size_t k, double w) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t a = (b * c + ch) * hw + i, o = (b * c + ch) * hw + k;
          const double v = 2 * w * (double(e[a]) - double(e[o]));
          d[a] += static_cast<T>(v);
          d[o] -= static_cast<T>(v);
        }
      };
      for (int cls = 0; cls < 2; ++cls) {
        const auto& same = cls ? ss.positive : ss.negative;
        const auto& other = cls ? ss.negative : ss.positive;
        for (auto i : same) {
          for (auto k : same) pair(i, k, scale / same.size());
          for (auto k : other) pair(i, k, -scale / other.size());
        }
      }
    }
  };
  return embeddings.tape->record("metric_loss_pairwise", Tensor<T>({1}, static_cast<T>(total)), {embeddings},
                                 exact);
}

template <typename T>
ClassCentroids class_centroids(const Tensor<T>& e, std::size_t b, const SampleSet& ss) {
  const std::size_t c = e.dim(1), hw = e.dim(2) * e.dim(3);
  ClassCentroids out{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  for (int cls = 0; cls < 2; ++cls) {
    const auto& set = cls ? ss.positive : ss.negative;
    auto& mu = cls ? out.positive : out.negative;
    if (set.empty()) continue;
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0;
      for (auto i : set) s += e[(b * c + ch) * hw + i];
      mu[ch] = s / set.size();
    }
  }
  return out;
}

template <typename T>
Var<T> metric_loss_centroid(Var<T> embeddings, std::span<const std::uint8_t> labels,
                            std::span<const SampleSet> samples) {
  check_batch<T>("metric_loss_centroid", embeddings.shape(), 0, labels, samples);
  const Tensor<T>& e = embeddings.value();
  const std::size_t n = e.dim(0), c = e.dim(1), hw = e.dim(2) * e.dim(3);
  require_two_classes("metric_loss_centroid", samples);
  double total = 0;
  for (std::size_t b = 0; b < n; ++b) {
    const auto& ss = samples[b];
    const auto mu = class_centroids(e, b, ss);
    double acc = 0;
    for (int cls = 0; cls < 2; ++cls) {
      const auto& set = cls ? ss.positive : ss.negative;
      const auto& ms = cls ? mu.positive : mu.negative;
      const auto& mo = cls ? mu.negative : mu.positive;
      for (auto i : set)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double f = e[(b * c + ch) * hw + i];
          acc += (f - ms[ch]) * (f - ms[ch]) - (f - mo[ch]) * (f - mo[ch]);
        }
    }
    total += acc / ss.size();
  }
  total /= n;

  std::vector<SampleSet> keep(samples.begin(), samples.end());
  auto exact = [keep, n, c, hw, id = embeddings.id](const Tape<T>& tape, const Tensor<T>& g,
                                                    std::span<Tensor<T>*> gin) {
    if (!gin[0]) return;
    const Tensor<T>& e = tape.value(id);
    auto& d = *gin[0];
    for (std::size_t b = 0; b < n; ++b) {
      const auto& ss = keep[b];
      const auto mu = class_centroids(e, b, ss);
      const double s = double(g[0]) / n;
      // per image the loss reduces to -|mu+ - mu-|^2
      for (int cls = 0; cls < 2; ++cls) {
        const auto& set = cls ? ss.positive : ss.negative;
        const auto& ms = cls ? mu.positive : mu.negative;
        const auto& mo = cls ? mu.negative : mu.positive;
        const double w = 2 * s / set.size();
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T v = static_cast<T>(w * (mo[ch] - ms[ch]));
          for (auto i : set) d[(b * c + ch) * hw + i] += v;
        }
      }
    }
  };
  return embeddings.tape->record("metric_loss_centroid", Tensor<T>({1}, static_cast<T>(total)), {embeddings},
                                 exact);
}

template <typename T>
CombinedLoss<T> combined_loss(Var<T> embeddings, Var<T> probs, std::span<const std::uint8_t> labels,
                              std::span<const SampleSet> samples, double lambda, Objective objective,
                              std::span<const SampleSet> metric_samples, bool with_pairwise) {
  if (!(lambda >= 0) || !std::isfinite(lambda)) throw ContractError("combined_loss: lambda must be >= 0");
  if (metric_samples.empty()) metric_samples = samples;
  CombinedLoss<T> out;
  out.values.lambda = lambda;
  auto ce = cross_entropy(probs, labels, samples);
  out.values.l_ce = ce.value()[0];
  if (objective == Objective::ce_only) {
    out.total = ce;
  } else {
    auto ml = metric_loss_centroid(embeddings, labels, metric_samples);
    out.values.l_ml_star = ml.value()[0];
    out.total = objective == Objective::metric_only ? ml : add(ml, scale(ce, static_cast<T>(lambda)));
  }
  if (with_pairwise) {
    Tape<T> scratch;
    auto e = scratch.constant_ref(embeddings.value());
    out.values.l_ml = metric_loss_pairwise(e, labels, metric_samples).value()[0];
  }
  out.values.total = out.total.value()[0];
  return out;
}

#define MENET_INSTANTIATE(T)                                                                                  \
  template std::vector<double> per_pixel_cross_entropy(const Tensor<T>&, std::span<const std::uint8_t>);    \
  template Var<T> cross_entropy(Var<T>, std::span<const std::uint8_t>, std::span<const SampleSet>);         \
  template Var<T> metric_loss_pairwise(Var<T>, std::span<const std::uint8_t>, std::span<const SampleSet>);  \
  template Var<T> metric_loss_centroid(Var<T>, std::span<const std::uint8_t>, std::span<const SampleSet>);  \
  template ClassCentroids class_centroids(const Tensor<T>&, std::size_t, const SampleSet&);                 \
  template CombinedLoss<T> combined_loss(Var<T>, Var<T>, std::span<const std::uint8_t>,                     \
                                         std::span<const SampleSet>, double, Objective,                     \
                                         std::span<const SampleSet>, bool);

MENET_INSTANTIATE(float)
MENET_INSTANTIATE(double)

}  // namespace menet
