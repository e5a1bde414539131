#include <doctest.h>

#include "test_util.hpp"

using namespace menet;
using namespace menet::testing;

namespace {

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Var<double> conv_of(Tape<double>& tape, Var<double> x, const Tensor<double>& w, const Tensor<double>& b,
                    ConvGeometry g) {
  return conv2d(x, tape.constant(w), tape.constant(b), g);
}

}  // namespace

TEST_CASE("conv2d: identity kernel") {
  Rng rng(1);
  auto x = randn(rng, {2, 3, 4, 4});
  Tensor<double> w({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) w[c * 3 + c] = 1.0;
  Tape<double> tape;
  auto y = conv_of(tape, tape.constant(x), w, Tensor<double>({3}), {1, 1, 0});
  CHECK(max_abs_diff(y.value(), x) == 0.0);
}

TEST_CASE("conv2d: all-ones 3x3 kernel on a constant image") {
  Tensor<double> x({1, 1, 5, 5}, 2.0);
  Tensor<double> w({1, 1, 3, 3}, 1.0);
  Tape<double> tape;
  auto y = conv_of(tape, tape.constant(x), w, Tensor<double>({1}), {3, 1, 1});
  CHECK(y.value().at(0, 0, 2, 2) == doctest::Approx(18.0));
  CHECK(y.value().at(0, 0, 0, 0) == doctest::Approx(8.0));  // corner sees 4 taps
}

TEST_CASE("conv2d matches the nested-loop oracle") {
  Rng rng(2);
  for (int stride : {1, 2}) {
    auto x = randn(rng, {2, 3, 6, 6});
    auto w = randn(rng, {4, 3, 3, 3});
    auto b = randn(rng, {4});
    Tape<double> tape;
    auto y = conv_of(tape, tape.constant(x), w, b, {3, stride, 1});
    CHECK(max_abs_diff(y.value(), conv_oracle(x, w, b, stride, 1)) < 1e-12);
  }
  // 5x5 input as in the contract, stride 1
  auto x = randn(rng, {1, 2, 5, 5});
  auto w = randn(rng, {3, 2, 3, 3});
  auto b = randn(rng, {3});
  Tape<float> tape;
  auto y = conv2d(tape.constant(x.cast<float>()), tape.constant(w.cast<float>()), tape.constant(b.cast<float>()),
                  ConvGeometry{3, 1, 1});
  CHECK(max_abs_diff(y.value().cast<double>(), conv_oracle(x, w, b, 1, 1)) < 1e-5);
}

TEST_CASE("conv2d contract errors") {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({1, 2, 4, 4}));
  CHECK_THROWS_AS(conv_of(tape, x, Tensor<double>({1, 3, 3, 3}), Tensor<double>({1}), {3, 1, 1}),
                  ContractError);
  auto odd = tape.constant(Tensor<double>({1, 2, 5, 5}));
  CHECK_THROWS_AS(conv_of(tape, odd, Tensor<double>({1, 2, 3, 3}), Tensor<double>({1}), {3, 2, 1}),
                  ContractError);
}

TEST_CASE("deconv2d is the adjoint of the stride-2 conv") {
  Rng rng(3);
  auto x = randn(rng, {2, 4, 3, 3});
  auto w = randn(rng, {4, 5, 3, 3});  // deconv 4 -> 5 channels
  Tensor<double> zero_b5({5}), zero_b4({4});
  Tensor<double> via_conv;
  {
    Tape<double> tape;
    auto in = tape.leaf(Tensor<double>({2, 5, 6, 6}), "in");
    auto y = conv_of(tape, in, w, zero_b4, {3, 2, 1});
    via_conv = tape.backward(y, x).take("in");
  }
  Tape<double> tape;
  auto d = deconv2d(tape.constant(x), tape.constant(w), tape.constant(zero_b5), ConvGeometry{3, 2, 1});
  CHECK(d.shape() == Shape{2, 5, 6, 6});
  CHECK(max_abs_diff(d.value(), via_conv) < 1e-12);
}

TEST_CASE("deconv2d: 1x1 kernel places the value in one corner of each block") {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({1, 1, 1, 1}, 7.0));
  auto d = deconv2d(x, tape.constant(Tensor<double>({1, 1, 1, 1}, 1.0)), tape.constant(Tensor<double>({1})),
                    ConvGeometry{1, 2, 0});
  REQUIRE(d.shape() == Shape{1, 1, 2, 2});
  CHECK(d.value()[0] == 7.0);
  CHECK(d.value()[1] == 0.0);
  CHECK(d.value()[2] == 0.0);
  CHECK(d.value()[3] == 0.0);
}

TEST_CASE("deconv2d requires stride 2") {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({1, 1, 2, 2}));
  CHECK_THROWS_AS(deconv2d(x, tape.constant(Tensor<double>({1, 1, 3, 3})), tape.constant(Tensor<double>({1})),
                           ConvGeometry{3, 1, 1}),
                  ContractError);
}

TEST_CASE("layer gradients match central differences") {
  Rng rng(4);
  SUBCASE("conv2d stride 1 and 2") {
    for (int stride : {1, 2}) {
      const Tensor<double> pts[] = {randn(rng, {2, 2, 4, 4}), randn(rng, {3, 2, 3, 3}), randn(rng, {3})};
      ScalarFn fn = [stride](Tape<double>& t, std::span<const Var<double>> v) {
        auto y = conv2d(v[0], v[1], v[2], ConvGeometry{3, stride, 1});
        return sum(mul(y, y));
      };
      CHECK(finite_diff_check(fn, pts).max_rel_error < 1e-4);
    }
  }
  SUBCASE("deconv2d") {
    const Tensor<double> pts[] = {randn(rng, {2, 3, 2, 2}), randn(rng, {3, 2, 3, 3}), randn(rng, {2})};
    ScalarFn fn = [](Tape<double>&, std::span<const Var<double>> v) {
      auto y = deconv2d(v[0], v[1], v[2], ConvGeometry{3, 2, 1});
      return sum(mul(y, y));
    };
    CHECK(finite_diff_check(fn, pts).max_rel_error < 1e-4);
  }
  SUBCASE("batch_norm train mode") {
    const Tensor<double> pts[] = {randn(rng, {3, 2, 2, 2}), randn(rng, {2}), randn(rng, {2})};
    const BatchNormStats<double> running{Tensor<double>({2}), Tensor<double>::ones({2})};
    const auto probe = randn(rng, {3, 2, 2, 2});
    ScalarFn fn = [&](Tape<double>& t, std::span<const Var<double>> v) {
      auto y = batch_norm(v[0], v[1], v[2], running, Mode::train);
      return sum(mul(tanh(y), t.constant(probe)));
    };
    CHECK(finite_diff_check(fn, pts).max_rel_error < 1e-4);
  }
  SUBCASE("batch_norm inference mode") {
    const Tensor<double> pts[] = {randn(rng, {1, 2, 3, 3}), randn(rng, {2}), randn(rng, {2})};
    const BatchNormStats<double> running{randn(rng, {2}), Tensor<double>({2}, 0.7)};
    ScalarFn fn = [&](Tape<double>&, std::span<const Var<double>> v) {
      auto y = batch_norm(v[0], v[1], v[2], running, Mode::inference);
      return sum(mul(y, y));
    };
    CHECK(finite_diff_check(fn, pts).max_rel_error < 1e-4);
  }
  SUBCASE("relu away from zero") {
    Tensor<double> x({1, 2, 3, 3});
    for (auto& v : x.data()) v = (rng.bernoulli(0.5) ? 1 : -1) * rng.uniform(0.1, 1);
    const Tensor<double> pts[] = {x};
    ScalarFn fn = [](Tape<double>&, std::span<const Var<double>> v) { return sum(mul(relu(v[0]), v[0])); };
    CHECK(finite_diff_check(fn, pts).max_rel_error < 1e-4);
  }
  SUBCASE("softmax2") {
    const Tensor<double> pts[] = {randn(rng, {2, 2, 3, 3})};
    const auto probe = randn(rng, {2, 2, 3, 3});
    ScalarFn fn = [&](Tape<double>& t, std::span<const Var<double>> v) {
      return sum(mul(softmax2(v[0]), t.constant(probe)));
    };
    CHECK(finite_diff_check(fn, pts).max_rel_error < 1e-4);
  }
  SUBCASE("concat_channels splits the gradient") {
    const Tensor<double> pts[] = {randn(rng, {2, 1, 2, 2}), randn(rng, {2, 3, 2, 2})};
    const auto probe = randn(rng, {2, 4, 2, 2});
    ScalarFn fn = [&](Tape<double>& t, std::span<const Var<double>> v) {
      auto c = concat_channels<double>({v[0], v[1]});
      return sum(mul(mul(c, c), t.constant(probe)));
    };
    CHECK(finite_diff_check(fn, pts).max_rel_error < 1e-4);
  }
  SUBCASE("replicate_upsample") {
    const Tensor<double> pts[] = {randn(rng, {1, 2, 2, 2})};
    const auto probe = randn(rng, {1, 2, 6, 6});
    ScalarFn fn = [&](Tape<double>& t, std::span<const Var<double>> v) {
      auto u = replicate_upsample(v[0], 3);
      return sum(mul(mul(u, u), t.constant(probe)));
    };
    CHECK(finite_diff_check(fn, pts).max_rel_error < 1e-4);
  }
  SUBCASE("max_pool2 with distinct values") {
    Tensor<double> x({1, 1, 4, 4});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.37 * static_cast<double>((i * 7) % 16);
    const Tensor<double> pts[] = {x};
    ScalarFn fn = [](Tape<double>&, std::span<const Var<double>> v) {
      auto p = max_pool2(v[0]);
      return sum(mul(p, p));
    };
    CHECK(finite_diff_check(fn, pts).max_rel_error < 1e-4);
  }
}

TEST_CASE("adjoint consistency <J dx, dy> = <dx, J^T dy>") {
  Rng rng(5);
  const auto w = randn(rng, {3, 2, 3, 3}), b = randn(rng, {3});
  const auto wt = randn(rng, {2, 3, 3, 3}), bt = randn(rng, {3});
  const auto gamma = randn(rng, {2}), beta = randn(rng, {2});
  const BatchNormStats<double> running{randn(rng, {2}), Tensor<double>({2}, 1.3)};
  const auto x = randn(rng, {2, 2, 4, 4});
  const std::vector<std::pair<const char*, UnaryFn>> layers = {
      {"conv s1", [&](Tape<double>& t, Var<double> v) { return conv_of(t, v, w, b, {3, 1, 1}); }},
      {"conv s2", [&](Tape<double>& t, Var<double> v) { return conv_of(t, v, w, b, {3, 2, 1}); }},
      {"deconv",
       [&](Tape<double>& t, Var<double> v) {
         return deconv2d(v, t.constant(wt), t.constant(bt), ConvGeometry{3, 2, 1});
       }},
      {"bn train",
       [&](Tape<double>& t, Var<double> v) {
         return batch_norm(v, t.constant(gamma), t.constant(beta), running, Mode::train);
       }},
      {"bn inference",
       [&](Tape<double>& t, Var<double> v) {
         return batch_norm(v, t.constant(gamma), t.constant(beta), running, Mode::inference);
       }},
      {"relu", [](Tape<double>&, Var<double> v) { return relu(v); }},
      {"softmax2", [](Tape<double>&, Var<double> v) { return softmax2(v); }},
      {"upsample", [](Tape<double>&, Var<double> v) { return replicate_upsample(v, 2); }},
      {"concat",
       [](Tape<double>&, Var<double> v) { return concat_channels<double>({v, relu(v)}); }},
      {"max_pool2", [](Tape<double>&, Var<double> v) { return max_pool2(v); }},
  };
  for (const auto& [name, fn] : layers) {
    CAPTURE(name);
    CHECK(adjoint_gap(fn, x, rng) < 1e-5);
  }
}

TEST_CASE("batch_norm") {
  Rng rng(6);
  const auto x = randn(rng, {4, 3, 3, 3}, 2.0);
  SUBCASE("train mode normalizes each channel") {
    Tape<double> tape;
    BatchNormStats<double> running{Tensor<double>({3}), Tensor<double>::ones({3})};
    BatchNormStats<double> batch;
    auto y = batch_norm(tape.constant(x), tape.constant(Tensor<double>::ones({3})),
                        tape.constant(Tensor<double>({3})), running, Mode::train, {}, &batch);
    for (std::size_t c = 0; c < 3; ++c) {
      double m = 0, v = 0;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 9; ++i) m += y.value()[(n * 3 + c) * 9 + i];
      m /= 36;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 9; ++i) v += std::pow(y.value()[(n * 3 + c) * 9 + i] - m, 2);
      v /= 36;
      CHECK(std::abs(m) < 1e-5);
      CHECK(std::abs(v - 1.0) < 1e-5);
    }
    update_running_stats(running, batch, 0.9);
    CHECK(running.mean[0] == doctest::Approx(0.1 * batch.mean[0]));
    CHECK(running.var[1] == doctest::Approx(0.9 + 0.1 * batch.var[1]));
  }
  SUBCASE("inference mode is the running-stat affine map") {
    const BatchNormStats<double> running{Tensor<double>({3}, 0.5), Tensor<double>({3}, 2.0)};
    const auto gamma = randn(rng, {3}), beta = randn(rng, {3});
    Tape<double> tape;
    auto y = batch_norm(tape.constant(x), tape.constant(gamma), tape.constant(beta), running, Mode::inference);
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 9; ++i) {
          const std::size_t k = (n * 3 + c) * 9 + i;
          CHECK(y.value()[k] ==
                doctest::Approx(gamma[c] * (x[k] - 0.5) / std::sqrt(2.0 + 1e-5) + beta[c]).epsilon(1e-12));
        }
  }
  SUBCASE("train mode rejects a batch of one") {
    Tape<double> tape;
    const BatchNormStats<double> running{Tensor<double>({3}), Tensor<double>::ones({3})};
    CHECK_THROWS_AS(batch_norm(tape.constant(Tensor<double>({1, 3, 2, 2})), tape.constant(Tensor<double>::ones({3})),
                               tape.constant(Tensor<double>({3})), running, Mode::train),
                    ContractError);
  }
}

TEST_CASE("relu and softmax2") {
  Tape<double> tape;
  auto r = relu(tape.constant(Tensor<double>({2}, std::vector<double>{-1.0, 2.0})));
  CHECK(r.value()[0] == 0.0);
  CHECK(r.value()[1] == 2.0);

  auto s = softmax2(tape.constant(Tensor<double>({1, 2, 1, 1})));
  CHECK(s.value()[0] == doctest::Approx(0.5));
  CHECK(s.value()[1] == doctest::Approx(0.5));

  auto big = softmax2(tape.constant(Tensor<double>({1, 2, 1, 1}, std::vector<double>{1000.0, 0.0})));
  CHECK(big.value()[0] == 1.0);
  CHECK(big.value()[1] == 0.0);
  CHECK(big.value().all_finite());

  Rng rng(7);
  auto rs = softmax2(tape.constant(randn(rng, {3, 2, 4, 4}, 3.0)));
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 16; ++i) {
      const double p0 = rs.value()[(n * 2) * 16 + i], p1 = rs.value()[(n * 2 + 1) * 16 + i];
      CHECK(p0 + p1 == doctest::Approx(1.0));
      CHECK(p0 > 0.0);
      CHECK(p0 < 1.0);
    }
  CHECK_THROWS_AS(softmax2(tape.constant(Tensor<double>({1, 3, 1, 1}))), ContractError);
}

TEST_CASE("replicate_upsample") {
  Tape<double> tape;
  Rng rng(8);
  const auto x = randn(rng, {1, 2, 3, 3});
  CHECK(replicate_upsample(tape.constant(x), 1).value() == x);

  auto five = replicate_upsample(tape.constant(Tensor<double>({1, 1, 1, 1}, 5.0)), 2);
  CHECK(five.value() == Tensor<double>({1, 1, 2, 2}, 5.0));

  // 1-based input (x=2, y=1), factor 2 fills rows 3-4 and columns 1-2
  Tensor<double> grid({1, 1, 2, 2});
  grid.at(0, 0, 1, 0) = 9.0;  // row 2, column 1
  auto up = replicate_upsample(tape.constant(grid), 2).value();
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(up.at(0, 0, r, c) == ((r >= 2 && c < 2) ? 9.0 : 0.0));

  // followed by n x n average pooling it is the identity
  auto u = replicate_upsample(tape.constant(x), 4).value();
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        double acc = 0;
        for (std::size_t a = 0; a < 4; ++a)
          for (std::size_t b = 0; b < 4; ++b) acc += u.at(0, c, 4 * i + a, 4 * j + b);
        CHECK(acc / 16 == doctest::Approx(x.at(0, c, i, j)));
      }
  CHECK_THROWS_AS(replicate_upsample(tape.constant(x), 0), ContractError);
}

TEST_CASE("concat_channels") {
  Rng rng(9);
  Tape<double> tape;
  const auto a = randn(rng, {2, 3, 4, 4}), b = randn(rng, {2, 13, 4, 4});
  CHECK(concat_channels<double>({tape.constant(a)}).value() == a);
  auto c = concat_channels<double>({tape.constant(a), tape.constant(b)}).value();
  REQUIRE(c.shape() == Shape{2, 16, 4, 4});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t ch = 0; ch < 16; ++ch)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
          CHECK(c.at(n, ch, i, j) == (ch < 3 ? a.at(n, ch, i, j) : b.at(n, ch - 3, i, j)));
  CHECK_THROWS_AS(concat_channels<double>({tape.constant(a), tape.constant(Tensor<double>({2, 1, 2, 2}))}),
                  ContractError);
}

TEST_CASE("stride-2 conv followed by deconv restores the spatial shape") {
  Rng rng(10);
  for (std::size_t s : {2u, 4u, 8u, 16u}) {
    Tape<double> tape;
    auto x = tape.constant(randn(rng, {1, 2, s, s}));
    auto d = conv2d(x, tape.constant(randn(rng, {3, 2, 3, 3})), tape.constant(Tensor<double>({3})),
                    ConvGeometry{3, 2, 1});
    auto u = deconv2d(d, tape.constant(randn(rng, {3, 2, 3, 3})), tape.constant(Tensor<double>({2})),
                      ConvGeometry{3, 2, 1});
    CHECK(u.shape() == x.shape());
  }
}
