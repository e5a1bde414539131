#pragma once

#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "menet/model.hpp"
#include "menet/saliency.hpp"

namespace menet {

/// A differentiable map from an input tensor to an output field. The
/// toolkit scalarizes it by summing every output element.
struct Probe {
  Shape input_shape;
  std::function<Var<double>(Tape<double>&, Var<double>)> output;
};

double probe_value(const Probe& probe, const Tensor<double>& x);

/// Gradient of the summed output with respect to the input.
Tensor<double> input_gradient(const Probe& probe, const Tensor<double>& x);

struct FieldStats {
  double max = 0, min = 0, median = 0, mean = 0, var = 0;  // var is the population variance
};

/// Statistics of |g| over all coordinates.
FieldStats abs_stats(const Tensor<double>& g);

struct JacobianReport {
  std::vector<FieldStats> per_image;
  FieldStats mean;  // arithmetic mean of each column across images
};

JacobianReport jacobian_stats(const std::vector<Tensor<double>>& gradients);

struct DirectionalEstimate {
  double p = 2, t = 1e-4;
  std::size_t samples = 0;
  double estimate = 0;        // mean of |f(x + t n) - f(x)|^p / t^p over unit directions n
  double standard_error = 0;
};

DirectionalEstimate mc_directional_norm(const Probe& probe, const Tensor<double>& x, double p, double t,
                                        std::size_t n_samples, Rng& rng);

enum class NormKind { l1, l2, linf };

NormKind parse_norm(const std::string& s);
std::string norm_name(NormKind n);
double norm(const Tensor<double>& v, NormKind kind);

struct BoundReport {
  Tensor<double> G;  // element-wise bound on |d sum(output) / dx|
  double l1 = 0, l2 = 0, linf = 0;
  NormKind selected = NormKind::l2;
  double M = 0;
};

/// Backward pass of the summed output through the absolute network: every
/// linear operator uses |coefficients| and every nonlinearity a derivative
/// bound of 1. Throws ContractError naming any op without a bound rule.
BoundReport lipschitz_bound(const Probe& probe, NormKind selected = NormKind::l2);

struct Dominance {
  std::size_t violations = 0;
  double worst_ratio = 0;  // max |g| / G over coordinates with G > 0
};

Dominance check_dominance(const Tensor<double>& G, const Tensor<double>& g);

struct SensitivityRecord {
  double input_error = 0;   // ||x_hat - x||_2
  double output_error = 0;  // |f(x_hat) - f(x)|
  double ratio = 0;
};

SensitivityRecord distortion_sensitivity(const Probe& probe, const Tensor<double>& x, const Tensor<double>& x_hat);

enum class ScalarHead { metric, ce };

struct RobustnessOptions {
  ScalarHead head = ScalarHead::metric;
  Mode mode = Mode::inference;
  CentroidWeighting weighting = CentroidWeighting::posterior;
};

/// Probe over one image (1 x 3 x I x I). The metric head outputs the
/// pre-normalization map ||f_i - c||, with the background centroid c taken
/// from the forward pass at `reference` and held fixed; the CE head outputs
/// P(salient). Only inference-mode batch norm is accepted.
Probe menet_probe(const MEnetParams<double>& params, const Tensor<double>& reference,
                  const RobustnessOptions& opts = {});

void to_json(nlohmann::json& j, const FieldStats& s);
void to_json(nlohmann::json& j, const DirectionalEstimate& d);
void to_json(nlohmann::json& j, const SensitivityRecord& s);
/// Summary without the G field.
void to_json(nlohmann::json& j, const BoundReport& b);

/// "dataset,max,min,median,mean,var" header and one row.
std::string table_header();
std::string table_row(const std::string& dataset, const FieldStats& s);

}  // namespace menet
