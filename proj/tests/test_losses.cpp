#include <doctest.h>

#include <cmath>
#include <numeric>

#include "menet/losses.hpp"
#include "test_util.hpp"

using namespace menet;
using namespace menet::testing;

namespace {

struct Instance {
  Tensor<double> emb;  // 1 x C x 1 x P
  std::vector<std::uint8_t> labels;
  SampleSet set;
};

Instance random_instance(Rng& rng, std::size_t pos, std::size_t neg, std::size_t c = 16) {
  Instance in;
  const std::size_t p = pos + neg;
  in.emb = randn(rng, {1, c, 1, p});
  in.labels.assign(p, 0);
  std::vector<std::size_t> order(p);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = p; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(0, i - 1)]);
  for (std::size_t i = 0; i < pos; ++i) in.labels[order[i]] = 1;
  in.set = full_sample_set(in.labels);
  return in;
}

double value_of(Var<double> v) { return v.value()[0]; }

double pairwise(const Instance& in) {
  Tape<double> t;
  return value_of(metric_loss_pairwise(t.constant(in.emb), in.labels, std::span(&in.set, 1)));
}
double centroid(const Instance& in) {
  Tape<double> t;
  return value_of(metric_loss_centroid(t.constant(in.emb), in.labels, std::span(&in.set, 1)));
}

// mean squared deviation of one class from its mean
double class_variance(const Instance& in, std::uint8_t cls) {
  const std::size_t c = in.emb.dim(1), p = in.emb.dim(3);
  double total = 0, count = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    double m = 0;
    std::size_t k = 0;
    for (std::size_t i = 0; i < p; ++i)
      if (in.labels[i] == cls) m += in.emb[ch * p + i], ++k;
    m /= k;
    for (std::size_t i = 0; i < p; ++i)
      if (in.labels[i] == cls) total += (in.emb[ch * p + i] - m) * (in.emb[ch * p + i] - m);
    count = k;
  }
  return total / count;
}

}  // namespace

TEST_CASE("cross entropy examples") {
  std::vector<std::uint8_t> labels = {1, 0, 1, 0};
  const SampleSet set = full_sample_set(labels);
  SUBCASE("perfect prediction") {
    Tensor<double> p({1, 2, 2, 2}, std::vector<double>{0, 1, 0, 1, 1, 0, 1, 0});
    Tape<double> t;
    CHECK(value_of(cross_entropy(t.constant(p), labels, std::span(&set, 1))) == doctest::Approx(0).epsilon(1e-6));
  }
  SUBCASE("uniform") {
    Tape<double> t;
    auto v = value_of(cross_entropy(t.constant(Tensor<double>({1, 2, 2, 2}, 0.5)), labels, std::span(&set, 1)));
    CHECK(v == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("random 4x4 against a scalar loop") {
    Rng rng(1);
    Tensor<double> p({1, 2, 4, 4});
    std::vector<std::uint8_t> lab(16);
    double expect = 0;
    for (std::size_t i = 0; i < 16; ++i) {
      const double s = rng.uniform(0.01, 0.99);
      p[16 + i] = s;
      p[i] = 1 - s;
      lab[i] = rng.bernoulli(0.4);
      expect += -std::log(lab[i] ? s : 1 - s);
    }
    expect /= 16;
    const SampleSet all = full_sample_set(lab);
    Tape<double> t;
    CHECK(std::abs(value_of(cross_entropy(t.constant(p), lab, std::span(&all, 1))) - expect) < 1e-6);
  }
  SUBCASE("empty sample set") {
    Tape<double> t;
    SampleSet empty;
    CHECK_THROWS_AS(cross_entropy(t.constant(Tensor<double>({1, 2, 2, 2}, 0.5)), labels, std::span(&empty, 1)),
                    ContractError);
  }
}

TEST_CASE("metric loss degenerate cases") {
  std::vector<std::uint8_t> labels = {1, 1, 0, 0};
  const SampleSet set = full_sample_set(labels);
  Instance same{Tensor<double>({1, 3, 1, 4}, 0.7), labels, set};
  CHECK(pairwise(same) == 0.0);
  CHECK(centroid(same) == 0.0);

  Instance clusters{Tensor<double>({1, 2, 1, 4}), labels, set};
  // class+ at a = (1, 2), class- at b = (-1, 0): -|a - b|^2 = -8
  const double a[2] = {1, 2}, b[2] = {-1, 0};
  for (std::size_t ch = 0; ch < 2; ++ch)
    for (std::size_t i = 0; i < 4; ++i) clusters.emb[ch * 4 + i] = labels[i] ? a[ch] : b[ch];
  CHECK(pairwise(clusters) == doctest::Approx(-8.0).epsilon(1e-12));
  CHECK(centroid(clusters) == doctest::Approx(-8.0).epsilon(1e-12));

  std::vector<std::uint8_t> one = {1, 1, 1, 1};
  const SampleSet single = full_sample_set(one);
  Tape<double> t;
  CHECK_THROWS_AS(metric_loss_pairwise(t.constant(same.emb), one, std::span(&single, 1)), ContractError);
  CHECK_THROWS_AS(metric_loss_centroid(t.constant(same.emb), one, std::span(&single, 1)), ContractError);
}

TEST_CASE("pairwise and centroid forms agree on balanced sets") {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t half = rng.uniform_int(1, 32);
    auto in = random_instance(rng, half, half);
    const double c = centroid(in);
    CHECK(std::abs(pairwise(in) - c) <= 1e-6 * (1 + std::abs(c)));
  }
}

TEST_CASE("unbalanced gap equals the variance-imbalance term") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t pos = rng.uniform_int(1, 40), neg = rng.uniform_int(1, 24);
    auto in = random_instance(rng, pos, neg);
    const double expect =
        (double(pos) - double(neg)) * (class_variance(in, 0) - class_variance(in, 1)) / double(pos + neg);
    CHECK(std::abs((centroid(in) - pairwise(in)) - expect) < 1e-6 * (1 + std::abs(expect)));
  }
}

TEST_CASE("centroid form equals minus the squared centroid gap") {
  Rng rng(4);
  auto in = random_instance(rng, 7, 19, 5);
  const auto mu = class_centroids(in.emb, 0, in.set);
  double gap = 0;
  for (std::size_t ch = 0; ch < 5; ++ch) gap += (mu.positive[ch] - mu.negative[ch]) * (mu.positive[ch] - mu.negative[ch]);
  CHECK(centroid(in) == doctest::Approx(-gap).epsilon(1e-12));
}

TEST_CASE("metric losses are translation invariant and scale quadratically") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    auto in = random_instance(rng, rng.uniform_int(1, 20), rng.uniform_int(1, 20), 4);
    const double p0 = pairwise(in), c0 = centroid(in);
    Instance shifted = in, scaled = in;
    const std::size_t p = in.emb.dim(3);
    for (std::size_t ch = 0; ch < 4; ++ch) {
      const double offset = rng.normal(0, 3);
      for (std::size_t i = 0; i < p; ++i) shifted.emb[ch * p + i] += offset;
    }
    scaled.emb *= 2.5;
    CHECK(std::abs(pairwise(shifted) - p0) < 1e-6 * (1 + std::abs(p0)));
    CHECK(std::abs(centroid(shifted) - c0) < 1e-6 * (1 + std::abs(c0)));
    CHECK(pairwise(scaled) == doctest::Approx(6.25 * p0).epsilon(1e-9));
    CHECK(centroid(scaled) == doctest::Approx(6.25 * c0).epsilon(1e-9));
  }
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(6);
  const std::size_t n = 2, c = 3, h = 3, w = 4, hw = h * w;
  std::vector<std::uint8_t> labels(n * hw);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = (i % 5 == 0 || i % 7 == 1);
  std::vector<SampleSet> sets;
  for (std::size_t b = 0; b < n; ++b)
    sets.push_back(full_sample_set(std::span(labels).subspan(b * hw, hw)));
  const auto emb = randn(rng, {n, c, h, w});
  Tensor<double> logits = randn(rng, {n, 2, h, w});

  SUBCASE("pairwise") {
    const double err = finite_diff_check(
        [&](Tape<double>&, Var<double> v) { return metric_loss_pairwise(v, labels, sets); }, emb);
    CHECK(err < 1e-4);
  }
  SUBCASE("centroid") {
    const double err = finite_diff_check(
        [&](Tape<double>&, Var<double> v) { return metric_loss_centroid(v, labels, sets); }, emb);
    CHECK(err < 1e-4);
  }
  SUBCASE("cross entropy through softmax") {
    const double err = finite_diff_check(
        [&](Tape<double>&, Var<double> v) { return cross_entropy(softmax2(v), labels, sets); }, logits);
    CHECK(err < 1e-4);
  }
  SUBCASE("combined") {
    ScalarFn fn = [&](Tape<double>&, std::span<const Var<double>> v) {
      return combined_loss(v[0], softmax2(v[1]), labels, sets, 1.0).total;
    };
    const Tensor<double> pts[] = {emb, logits};
    CHECK(finite_diff_check(fn, pts).max_rel_error < 1e-4);
  }
}

TEST_CASE("combined loss composition") {
  Rng rng(7);
  auto in = random_instance(rng, 6, 10, 4);
  Tensor<double> logits = randn(rng, {1, 2, 1, 16});
  Tape<double> tape;
  auto e = tape.constant(in.emb);
  auto p = softmax2(tape.constant(logits));
  const auto ce = value_of(cross_entropy(p, in.labels, std::span(&in.set, 1)));
  const auto c = centroid(in);

  auto zero = combined_loss(e, p, in.labels, std::span(&in.set, 1), 0.0);
  CHECK(zero.values.total == doctest::Approx(c).epsilon(1e-12));
  auto one = combined_loss(e, p, in.labels, std::span(&in.set, 1), 1.0, Objective::combined, {}, true);
  CHECK(std::abs(one.values.total - (c + ce)) < 1e-6);
  CHECK(one.values.lambda == 1.0);
  CHECK(one.values.l_ml == doctest::Approx(pairwise(in)).epsilon(1e-12));
  auto ce_only = combined_loss(e, p, in.labels, std::span(&in.set, 1), 1.0, Objective::ce_only);
  CHECK(ce_only.values.total == doctest::Approx(ce).epsilon(1e-12));
  CHECK(LossValues{}.lambda == 1.0);
  CHECK_THROWS_AS(combined_loss(e, p, in.labels, std::span(&in.set, 1), -1.0), ContractError);
}

TEST_CASE("hard negative sampling") {
  SUBCASE("balanced labels keep every pixel") {
    std::vector<std::uint8_t> labels = {1, 0, 0, 1, 1, 0};
    std::vector<double> loss(6, 0.3);
    auto s = hard_negative_sample(loss, labels);
    CHECK(s.positive == std::vector<std::uint32_t>{0, 3, 4});
    CHECK(s.negative == std::vector<std::uint32_t>{1, 2, 5});
  }
  SUBCASE("10 salient and 100 background") {
    Rng rng(8);
    std::vector<std::uint8_t> labels(110, 0);
    std::vector<double> loss(110);
    for (auto& v : loss) v = rng.uniform();
    for (std::size_t i = 0; i < 10; ++i) labels[i * 11] = 1;
    auto s = hard_negative_sample(loss, labels);
    REQUIRE(s.positive.size() == 10);
    REQUIRE(s.negative.size() == 10);
    std::vector<std::pair<double, std::uint32_t>> bg;
    for (std::uint32_t i = 0; i < 110; ++i)
      if (!labels[i]) bg.push_back({-loss[i], i});
    std::sort(bg.begin(), bg.end());
    std::vector<std::uint32_t> expect;
    for (std::size_t k = 0; k < 10; ++k) expect.push_back(bg[k].second);
    std::sort(expect.begin(), expect.end());
    CHECK(s.negative == expect);
  }
  SUBCASE("ties go to the lowest index") {
    std::vector<std::uint8_t> labels = {0, 0, 1, 0, 0, 0};
    std::vector<double> loss(6, 1.0);
    auto s = hard_negative_sample(loss, labels);
    CHECK(s.negative == std::vector<std::uint32_t>{0});
    labels = {1, 1, 0, 1, 1, 1};
    s = hard_negative_sample(loss, labels);
    CHECK(s.positive == std::vector<std::uint32_t>{0});
  }
  SUBCASE("single class is rejected") {
    std::vector<std::uint8_t> labels(4, 1);
    std::vector<double> loss(4, 0.0);
    CHECK_THROWS_AS(hard_negative_sample(loss, labels), ContractError);
  }
}

TEST_CASE("per-pixel cross entropy matches the clamped log") {
  Tensor<double> p({1, 2, 1, 3}, std::vector<double>{0.0, 0.25, 0.5, 1.0, 0.75, 0.5});
  std::vector<std::uint8_t> labels = {1, 1, 0};
  auto v = per_pixel_cross_entropy(p, labels);
  CHECK(v[0] == doctest::Approx(-std::log(1 - kProbFloor)));
  CHECK(v[1] == doctest::Approx(-std::log(0.75)));
  CHECK(v[2] == doctest::Approx(std::log(2.0)));
  for (double x : v) CHECK(x >= 0);
}
