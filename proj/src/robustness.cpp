#include "menet/robustness.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace menet {

double probe_value(const Probe& probe, const Tensor<double>& x) {
  Tape<double> tape;
  return sum(probe.output(tape, tape.constant_ref(x))).value()[0];
}

Tensor<double> input_gradient(const Probe& probe, const Tensor<double>& x) {
  if (x.shape() != probe.input_shape)
    throw ContractError("input_gradient: input " + shape_str(x.shape()) + " does not match probe " +
                        shape_str(probe.input_shape));
  Tape<double> tape;
  auto in = tape.leaf_ref(x, "input");
  auto y = sum(probe.output(tape, in));
  return tape.backward(y, Tensor<double>({1}, 1.0)).take("input");
}

FieldStats abs_stats(const Tensor<double>& g) {
  if (g.size() == 0) throw ContractError("abs_stats: empty field");
  std::vector<double> a(g.size());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::abs(g[i]);
  FieldStats s;
  double total = 0;
  for (double v : a) total += v;
  s.mean = total / a.size();
  double sq = 0;
  for (double v : a) sq += (v - s.mean) * (v - s.mean);
  s.var = sq / a.size();
  std::sort(a.begin(), a.end());
  s.min = a.front();
  s.max = a.back();
  const std::size_t m = a.size() / 2;
  s.median = a.size() % 2 ? a[m] : 0.5 * (a[m - 1] + a[m]);
  return s;
}

JacobianReport jacobian_stats(const std::vector<Tensor<double>>& gradients) {
  if (gradients.empty()) throw ContractError("jacobian_stats: empty dataset");
  JacobianReport r;
  const double n = double(gradients.size());
  for (const auto& g : gradients) {
    const auto s = abs_stats(g);
    r.per_image.push_back(s);
    r.mean.max += s.max / n;
    r.mean.min += s.min / n;
    r.mean.median += s.median / n;
    r.mean.mean += s.mean / n;
    r.mean.var += s.var / n;
  }
  return r;
}

DirectionalEstimate mc_directional_norm(const Probe& probe, const Tensor<double>& x, double p, double t,
                                        std::size_t n_samples, Rng& rng) {
  if (!(t > 0)) throw ContractError("mc_directional_norm: t must be > 0");
  if (!(p >= 1)) throw ContractError("mc_directional_norm: p must be >= 1");
  if (n_samples == 0) throw ContractError("mc_directional_norm: need at least one sample");
  const double f0 = probe_value(probe, x);
  DirectionalEstimate d;
  d.p = p;
  d.t = t;
  d.samples = n_samples;
  double mean = 0, m2 = 0;
  Tensor<double> xs = x;
  for (std::size_t k = 0; k < n_samples; ++k) {
    const auto dir = random_uniform_sphere(rng, x.size());
    for (std::size_t i = 0; i < x.size(); ++i) xs[i] = x[i] + t * dir[i];
    const double v = std::pow(std::abs(probe_value(probe, xs) - f0) / t, p);
    // Welford update
    const double delta = v - mean;
    mean += delta / double(k + 1);
    m2 += delta * (v - mean);
  }
  d.estimate = mean;
  d.standard_error = n_samples > 1 ? std::sqrt(m2 / double(n_samples - 1) / double(n_samples)) : 0.0;
  return d;
}

NormKind parse_norm(const std::string& s) {
  if (s == "l1" || s == "L1" || s == "1") return NormKind::l1;
  if (s == "l2" || s == "L2" || s == "2") return NormKind::l2;
  if (s == "linf" || s == "Linf" || s == "inf") return NormKind::linf;
  throw ContractError("unknown norm '" + s + "' (expected l1, l2 or linf)");
}

std::string norm_name(NormKind n) {
  switch (n) {
    case NormKind::l1: return "l1";
    case NormKind::l2: return "l2";
    case NormKind::linf: return "linf";
  }
  return "l2";
}

double norm(const Tensor<double>& v, NormKind kind) {
  double acc = 0;
  for (double x : v.data()) {
    switch (kind) {
      case NormKind::l1: acc += std::abs(x); break;
      case NormKind::l2: acc += x * x; break;
      case NormKind::linf: acc = std::max(acc, std::abs(x)); break;
    }
  }
  return kind == NormKind::l2 ? std::sqrt(acc) : acc;
}

BoundReport lipschitz_bound(const Probe& probe, NormKind selected) {
  // the bound rules never read values, so any input gives the same G
  Tensor<double> x(probe.input_shape);
  Tape<double> tape;
  auto in = tape.leaf_ref(x, "input");
  auto y = sum(probe.output(tape, in));
  BoundReport r;
  r.G = tape.backward(y, Tensor<double>({1}, 1.0), BackwardMode::absolute_bound).take("input");
  r.l1 = norm(r.G, NormKind::l1);
  r.l2 = norm(r.G, NormKind::l2);
  r.linf = norm(r.G, NormKind::linf);
  r.selected = selected;
  r.M = norm(r.G, selected);
  return r;
}

Dominance check_dominance(const Tensor<double>& G, const Tensor<double>& g) {
  G.require_same_shape(g, "check_dominance");
  Dominance d;
  for (std::size_t i = 0; i < G.size(); ++i) {
    const double a = std::abs(g[i]);
    if (a > G[i]) ++d.violations;
    if (G[i] > 0) d.worst_ratio = std::max(d.worst_ratio, a / G[i]);
  }
  return d;
}

SensitivityRecord distortion_sensitivity(const Probe& probe, const Tensor<double>& x, const Tensor<double>& x_hat) {
  x.require_same_shape(x_hat, "distortion_sensitivity");
  SensitivityRecord r;
  double e = 0;
  for (std::size_t i = 0; i < x.size(); ++i) e += (x_hat[i] - x[i]) * (x_hat[i] - x[i]);
  r.input_error = std::sqrt(e);
  if (r.input_error == 0) throw ContractError("distortion_sensitivity: zero perturbation");
  r.output_error = std::abs(probe_value(probe, x_hat) - probe_value(probe, x));
  r.ratio = r.output_error / r.input_error;
  return r;
}

Probe menet_probe(const MEnetParams<double>& params, const Tensor<double>& reference, const RobustnessOptions& opts) {
  if (opts.mode != Mode::inference)
    throw ContractError("robustness probes need inference-mode batch norm; train mode mixes the batch into g");
  const auto& cfg = params.config;
  const Shape want{1, std::size_t(cfg.input_channels), std::size_t(cfg.input_size), std::size_t(cfg.input_size)};
  if (reference.shape() != want)
    throw ContractError("menet_probe: reference image " + shape_str(reference.shape()) + ", expected " +
                        shape_str(want));
  Probe probe;
  probe.input_shape = want;
  if (opts.head == ScalarHead::ce) {
    probe.output = [&params](Tape<double>&, Var<double> x) {
      return select_channel(forward(params, x, Mode::inference, false).ce_probs, 1);
    };
    return probe;
  }
  Tensor<double> centroid({1, std::size_t(cfg.embedding_dim)});
  {
    Tape<double> tape;
    auto out = forward(params, tape, reference, Mode::inference, false);
    const auto part = partition_regions(out.ce_probs.value());
    const auto mu = background_centroid(out.embedding.value(), part, out.ce_probs.value(), 0, opts.weighting);
    std::copy(mu.begin(), mu.end(), centroid.raw());
  }
  probe.output = [&params, centroid](Tape<double>&, Var<double> x) {
    return pixel_distance(forward(params, x, Mode::inference, false).embedding, centroid);
  };
  return probe;
}

void to_json(nlohmann::json& j, const FieldStats& s) {
  j = {{"max", s.max}, {"min", s.min}, {"median", s.median}, {"mean", s.mean}, {"var", s.var}};
}

void to_json(nlohmann::json& j, const DirectionalEstimate& d) {
  j = {{"p", d.p}, {"t", d.t}, {"samples", d.samples}, {"estimate", d.estimate},
       {"standard_error", d.standard_error}};
}

void to_json(nlohmann::json& j, const SensitivityRecord& s) {
  j = {{"input_error", s.input_error}, {"output_error", s.output_error}, {"ratio", s.ratio}};
}

void to_json(nlohmann::json& j, const BoundReport& b) {
  j = {{"l1", b.l1}, {"l2", b.l2}, {"linf", b.linf}, {"norm", norm_name(b.selected)}, {"M", b.M}};
}

std::string table_header() { return "dataset,max,min,median,mean,var"; }

std::string table_row(const std::string& dataset, const FieldStats& s) {
  std::ostringstream os;
  os << std::scientific;
  os.precision(3);
  os << dataset << ',' << s.max << ',' << s.min << ',' << s.median << ',' << s.mean << ',' << s.var;
  return os.str();
}

}  // namespace menet
