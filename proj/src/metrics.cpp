#include "menet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "menet/tensor.hpp"

namespace menet {

namespace {

void require_same_size(const char* op, std::size_t a, std::size_t b) {
  if (a != b)
    throw ContractError(std::string(op) + ": map has " + std::to_string(a) + " pixels, mask has " +
                        std::to_string(b));
}

}  // namespace

double adaptive_threshold(std::span<const double> s) {
  if (s.empty()) return 0.0;
  return 2.0 * std::accumulate(s.begin(), s.end(), 0.0) / double(s.size());
}

// (1 + b2) P R / (b2 P + R), rearranged as P * R / (R + w (P - R)) with
// w = b2 / (1 + b2) so that P == R gives exactly P.
double f_beta(double precision, double recall) {
  const double w = kBeta2 / (1 + kBeta2);
  const double den = recall + w * (precision - recall);
  if (den == 0) return 0.0;
  return precision * (recall / den);
}

static PrecisionRecall from_counts(std::size_t tp, std::size_t predicted, std::size_t positives) {
  PrecisionRecall r;
  r.precision = predicted ? double(tp) / double(predicted) : 1.0;
  r.recall = positives ? double(tp) / double(positives) : 1.0;
  r.f = f_beta(r.precision, r.recall);
  return r;
}

PrecisionRecall f_measure(std::span<const double> s, std::span<const std::uint8_t> mask, double threshold) {
  require_same_size("f_measure", s.size(), mask.size());
  std::size_t tp = 0, predicted = 0, positives = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const bool p = s[i] > threshold;
    predicted += p;
    positives += mask[i] != 0;
    tp += p && mask[i];
  }
  return from_counts(tp, predicted, positives);
}

double mae(std::span<const double> s, std::span<const double> g) {
  require_same_size("mae", s.size(), g.size());
  if (s.empty()) return 0.0;
  double acc = 0;
  for (std::size_t i = 0; i < s.size(); ++i) acc += std::abs(s[i] - g[i]);
  return acc / double(s.size());
}

double mae(std::span<const double> s, std::span<const std::uint8_t> mask) {
  require_same_size("mae", s.size(), mask.size());
  if (s.empty()) return 0.0;
  double acc = 0;
  for (std::size_t i = 0; i < s.size(); ++i) acc += std::abs(s[i] - (mask[i] ? 1.0 : 0.0));
  return acc / double(s.size());
}

std::uint8_t to_8bit(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::vector<std::uint8_t> to_8bit(std::span<const double> s) {
  std::vector<std::uint8_t> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = to_8bit(s[i]);
  return out;
}

PRCurve pr_curve(std::span<const std::uint8_t> s8, std::span<const std::uint8_t> mask) {
  require_same_size("pr_curve", s8.size(), mask.size());
  std::array<std::size_t, 256> pos{}, all{};
  std::size_t positives = 0;
  for (std::size_t i = 0; i < s8.size(); ++i) {
    ++all[s8[i]];
    if (mask[i]) ++pos[s8[i]], ++positives;
  }
  PRCurve c;
  // counts of pixels strictly above t, accumulated from the top bin down
  std::size_t tp = 0, predicted = 0;
  for (int t = 255; t >= 0; --t) {
    const auto r = from_counts(tp, predicted, positives);
    c.precision[t] = r.precision;
    c.recall[t] = r.recall;
    tp += pos[t];
    predicted += all[t];
  }
  return c;
}

ImageEval evaluate_image(std::string id, std::span<const double> s, std::span<const std::uint8_t> mask) {
  ImageEval e;
  e.id = std::move(id);
  e.t_adp = adaptive_threshold(s);
  const auto pr = f_measure(s, mask, e.t_adp);
  e.precision = pr.precision;
  e.recall = pr.recall;
  e.f = pr.f;
  e.mae = mae(s, mask);
  return e;
}

void EvalAccumulator::add(std::string id, std::span<const double> s, std::span<const std::uint8_t> mask) {
  images_.push_back(evaluate_image(std::move(id), s, mask));
  const auto s8 = to_8bit(s);
  curves_.push_back(pr_curve(s8, mask));
}

EvalReport EvalAccumulator::report() const {
  if (images_.empty()) throw ContractError("evaluation: no images");
  EvalReport r;
  r.images = images_;
  r.mean.id = "mean";
  const double n = double(images_.size());
  // sum first, divide once, so a set of identical values averages to itself
  for (const auto& e : images_) {
    r.mean.t_adp += e.t_adp;
    r.mean.precision += e.precision;
    r.mean.recall += e.recall;
    r.mean.f += e.f;
    r.mean.mae += e.mae;
  }
  r.mean.t_adp /= n;
  r.mean.precision /= n;
  r.mean.recall /= n;
  r.mean.f /= n;
  r.mean.mae /= n;
  for (const auto& c : curves_)
    for (std::size_t t = 0; t < 256; ++t) {
      r.curve.precision[t] += c.precision[t];
      r.curve.recall[t] += c.recall[t];
    }
  for (std::size_t t = 0; t < 256; ++t) {
    r.curve.precision[t] /= n;
    r.curve.recall[t] /= n;
  }
  for (std::size_t t = 0; t < 256; ++t) r.max_f = std::max(r.max_f, f_beta(r.curve.precision[t], r.curve.recall[t]));
  return r;
}

void to_json(nlohmann::json& j, const ImageEval& e) {
  j = {{"id", e.id}, {"t_adp", e.t_adp}, {"precision", e.precision}, {"recall", e.recall},
       {"f_beta", e.f},  {"mae", e.mae}};
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"count", r.images.size()},
       {"beta2", kBeta2},
       {"f_beta", r.mean.f},
       {"mae", r.mean.mae},
       {"precision", r.mean.precision},
       {"recall", r.mean.recall},
       {"t_adp", r.mean.t_adp},
       {"max_f_beta", r.max_f},
       {"images", r.images}};
}

std::string pr_csv(const PRCurve& c) {
  std::ostringstream os;
  os << "threshold,precision,recall\n" << std::setprecision(10);
  for (std::size_t t = 0; t < 256; ++t) os << t << ',' << c.precision[t] << ',' << c.recall[t] << '\n';
  return os.str();
}

}  // namespace menet
