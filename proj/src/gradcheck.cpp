#include "menet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "menet/losses.hpp"

namespace menet {

namespace {

Tensor<double> randn(Rng& rng, Shape s) { return random_normal<double>(rng, std::move(s), 0.0, 1.0); }

std::vector<std::uint8_t> fixture_labels(std::size_t n, std::size_t hw) {
  std::vector<std::uint8_t> labels(n * hw);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = (i % 5 == 0 || i % 7 == 1);
  return labels;
}

// Whole network: gradient of the combined loss with respect to a sample of
// parameter coordinates, against central differences of the same forward.
double network_error(const GradcheckOptions& opts, Rng& rng) {
  ModelConfig cfg = opts.model;
  cfg.input_size = 8;
  cfg.base_channels = std::min(cfg.base_channels, 2);
  cfg.convs_per_block = std::min(cfg.convs_per_block, 2);
  cfg.embedding_dim = std::min(cfg.embedding_dim, 4);
  Rng init = rng.split(1);
  auto params = build<double>(cfg, init);
  const auto images = random_uniform<double>(rng, {2, 3, 8, 8}, 0, 1);
  const auto labels = fixture_labels(2, 64);
  std::vector<SampleSet> sets;
  for (std::size_t n = 0; n < 2; ++n) sets.push_back(full_sample_set(std::span(labels).subspan(n * 64, 64)));

  auto loss = [&](const MEnetParams<double>& p, Gradients<double>* grads) {
    Tape<double> tape;
    auto out = forward(p, tape, images, Mode::train, grads != nullptr);
    auto l = combined_loss(out.embedding, out.ce_probs, labels, sets, 1.0);
    const double v = scalar(l.total);
    if (grads) *grads = tape.backward(l.total, Tensor<double>({1}, 1.0));
    return v;
  };
  Gradients<double> g;
  loss(params, &g);

  double worst = 0;
  const std::size_t nw = params.weights.size();
  for (std::size_t s = 0; s < opts.network_coords; ++s) {
    const std::size_t i = static_cast<std::size_t>(rng.uniform_int(0, std::int64_t(nw) - 1));
    const std::string& name = params.weights.name(i);
    const std::size_t k = static_cast<std::size_t>(rng.uniform_int(0, std::int64_t(params.weights.value(i).size()) - 1));
    auto p = params;
    const double x0 = p.weights.value(i)[k];
    p.weights.value(i)[k] = x0 + opts.eps;
    const double fp = loss(p, nullptr);
    p.weights.value(i)[k] = x0 - opts.eps;
    const double fm = loss(p, nullptr);
    const double numeric = (fp - fm) / (2 * opts.eps);
    const double analytic = g[name][k];
    worst = std::max(worst, std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace

std::vector<GradcheckCase> run_gradcheck(const GradcheckOptions& opts) {
  Rng rng(opts.seed, streams::kProbe);
  std::vector<GradcheckCase> out;
  auto record = [&](std::string name, double err) {
    out.push_back({std::move(name), err, err < opts.tolerance});
  };
  auto check = [&](std::string name, const ScalarFn& fn, std::vector<Tensor<double>> pts) {
    record(std::move(name), finite_diff_check(fn, pts, opts.eps).max_rel_error);
  };

  for (int stride : {1, 2})
    check("conv2d/stride" + std::to_string(stride),
          [stride](Tape<double>&, std::span<const Var<double>> v) {
            auto y = conv2d(v[0], v[1], v[2], ConvGeometry{3, stride, 1});
            return sum(mul(y, y));
          },
          {randn(rng, {2, 2, 4, 4}), randn(rng, {3, 2, 3, 3}), randn(rng, {3})});
  check("deconv2d",
        [](Tape<double>&, std::span<const Var<double>> v) {
          auto y = deconv2d(v[0], v[1], v[2], ConvGeometry{3, 2, 1});
          return sum(mul(y, y));
        },
        {randn(rng, {2, 3, 2, 2}), randn(rng, {3, 2, 3, 3}), randn(rng, {2})});
  {
    const BatchNormStats<double> running{Tensor<double>({2}), Tensor<double>::ones({2})};
    const auto probe = randn(rng, {3, 2, 2, 2});
    check("batch_norm/train",
          [&](Tape<double>& t, std::span<const Var<double>> v) {
            return sum(mul(tanh(batch_norm(v[0], v[1], v[2], running, Mode::train)), t.constant(probe)));
          },
          {randn(rng, {3, 2, 2, 2}), randn(rng, {2}), randn(rng, {2})});
    const BatchNormStats<double> fixed{randn(rng, {2}), Tensor<double>({2}, 0.7)};
    check("batch_norm/inference",
          [&](Tape<double>&, std::span<const Var<double>> v) {
            auto y = batch_norm(v[0], v[1], v[2], fixed, Mode::inference);
            return sum(mul(y, y));
          },
          {randn(rng, {1, 2, 3, 3}), randn(rng, {2}), randn(rng, {2})});
  }
  {
    Tensor<double> x({1, 2, 3, 3});
    for (auto& v : x.data()) v = (rng.bernoulli(0.5) ? 1 : -1) * rng.uniform(0.1, 1);  // away from the kink
    check("relu", [](Tape<double>&, std::span<const Var<double>> v) { return sum(mul(relu(v[0]), v[0])); }, {x});
  }
  {
    const auto probe = randn(rng, {2, 2, 3, 3});
    check("softmax2",
          [&](Tape<double>& t, std::span<const Var<double>> v) {
            return sum(mul(softmax2(v[0]), t.constant(probe)));
          },
          {randn(rng, {2, 2, 3, 3})});
  }
  {
    const auto probe = randn(rng, {2, 4, 2, 2});
    check("concat_channels",
          [&](Tape<double>& t, std::span<const Var<double>> v) {
            auto c = concat_channels<double>({v[0], v[1]});
            return sum(mul(mul(c, c), t.constant(probe)));
          },
          {randn(rng, {2, 1, 2, 2}), randn(rng, {2, 3, 2, 2})});
  }
  {
    const auto probe = randn(rng, {1, 2, 6, 6});
    check("replicate_upsample",
          [&](Tape<double>& t, std::span<const Var<double>> v) {
            auto u = replicate_upsample(v[0], 3);
            return sum(mul(mul(u, u), t.constant(probe)));
          },
          {randn(rng, {1, 2, 2, 2})});
  }
  {
    Tensor<double> x({1, 1, 4, 4});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.37 * static_cast<double>((i * 7) % 16);  // distinct maxima
    check("max_pool2",
          [](Tape<double>&, std::span<const Var<double>> v) {
            auto p = max_pool2(v[0]);
            return sum(mul(p, p));
          },
          {x});
  }

  const std::size_t n = 2, c = 3, hw = 12;
  const auto labels = fixture_labels(n, hw);
  std::vector<SampleSet> full, mined;
  for (std::size_t b = 0; b < n; ++b) full.push_back(full_sample_set(std::span(labels).subspan(b * hw, hw)));
  {
    std::vector<double> ce(n * hw);
    for (auto& v : ce) v = rng.uniform();
    for (std::size_t b = 0; b < n; ++b)
      mined.push_back(hard_negative_sample(std::span<const double>(ce).subspan(b * hw, hw),
                                           std::span(labels).subspan(b * hw, hw)));
  }
  const auto emb = randn(rng, {n, c, 3, 4});
  const auto logits = randn(rng, {n, 2, 3, 4});
  check("cross_entropy",
        [&](Tape<double>&, std::span<const Var<double>> v) { return cross_entropy(softmax2(v[0]), labels, full); },
        {logits});
  check("metric_loss_pairwise",
        [&](Tape<double>&, std::span<const Var<double>> v) { return metric_loss_pairwise(v[0], labels, full); },
        {emb});
  check("metric_loss_centroid",
        [&](Tape<double>&, std::span<const Var<double>> v) { return metric_loss_centroid(v[0], labels, full); },
        {emb});
  check("combined_loss",
        [&](Tape<double>&, std::span<const Var<double>> v) {
          return combined_loss(v[0], softmax2(v[1]), labels, full, 1.0).total;
        },
        {emb, logits});
  check("combined_loss/mined",
        [&](Tape<double>&, std::span<const Var<double>> v) {
          return combined_loss(v[0], softmax2(v[1]), labels, mined, 1.0).total;
        },
        {emb, logits});

  if (opts.network) record("menet/parameters", network_error(opts, rng));
  return out;
}

void to_json(nlohmann::json& j, const GradcheckCase& c) {
  j = {{"name", c.name}, {"max_rel_error", c.max_rel_error}, {"passed", c.passed}};
}

}  // namespace menet
