#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace menet {

inline constexpr double kBeta2 = 0.3;

/// Twice the mean saliency. Not clipped.
double adaptive_threshold(std::span<const double> s);

struct PrecisionRecall {
  double precision = 0;
  double recall = 0;
  double f = 0;
};

/// F_beta from precision and recall; 0 when both are 0.
double f_beta(double precision, double recall);

/// Binarizes `s` with a strict `>` against `threshold`. Precision is 1 when
/// nothing is predicted salient, recall is 1 when the mask is empty.
PrecisionRecall f_measure(std::span<const double> s, std::span<const std::uint8_t> mask, double threshold);

double mae(std::span<const double> s, std::span<const double> g);
double mae(std::span<const double> s, std::span<const std::uint8_t> mask);

std::uint8_t to_8bit(double v);
std::vector<std::uint8_t> to_8bit(std::span<const double> s);

struct PRCurve {
  std::array<double, 256> precision{};
  std::array<double, 256> recall{};
};

/// One histogram pass over an 8-bit map; point t binarizes at s > t.
PRCurve pr_curve(std::span<const std::uint8_t> s8, std::span<const std::uint8_t> mask);

struct ImageEval {
  std::string id;
  double t_adp = 0;
  double precision = 0;
  double recall = 0;
  double f = 0;
  double mae = 0;
};

ImageEval evaluate_image(std::string id, std::span<const double> s, std::span<const std::uint8_t> mask);

struct EvalReport {
  std::vector<ImageEval> images;
  ImageEval mean;  // arithmetic mean of the per-image values
  PRCurve curve;   // per-threshold mean over images
  double max_f = 0;  // best F over the mean curve
};

class EvalAccumulator {
 public:
  void add(std::string id, std::span<const double> s, std::span<const std::uint8_t> mask);
  std::size_t size() const { return images_.size(); }
  EvalReport report() const;

 private:
  std::vector<ImageEval> images_;
  std::vector<PRCurve> curves_;
};

void to_json(nlohmann::json& j, const ImageEval& e);
void to_json(nlohmann::json& j, const EvalReport& r);
std::string pr_csv(const PRCurve& c);

}  // namespace menet
