#include <doctest.h>

#include "menet/model.hpp"
#include "test_util.hpp"

using namespace menet;
using namespace menet::testing;

namespace {

ModelConfig small_config(int size = 16, int k = 1) {
  ModelConfig c;
  c.input_size = size;
  c.base_channels = 2;
  c.convs_per_block = k;
  return c;
}

}  // namespace

TEST_CASE("scale count and depth") {
  ModelConfig desk;
  desk.input_size = 64;
  desk.base_channels = 8;
  desk.convs_per_block = 2;
  CHECK(desk.scale_count() == 13);
  CHECK(depth(desk) == 28);

  ModelConfig full = desk;
  full.convs_per_block = 4;  // six encoder and six decoder blocks of four conv layers
  CHECK(depth(full) == 52);

  ModelConfig minimal = small_config(8, 1);
  Rng rng(1);
  CHECK(depth(minimal) == 10);
  CHECK(structural_depth(build<double>(minimal, rng)) == depth(minimal));
  CHECK(structural_depth(build<float>(desk, rng)) == depth(desk));
}

TEST_CASE("config validation") {
  Rng rng(1);
  ModelConfig c;
  c.input_size = 48;
  CHECK_THROWS_AS(build<float>(c, rng), ContractError);
  c.input_size = 4;
  CHECK_THROWS_AS(build<float>(c, rng), ContractError);
  nlohmann::json j = {{"input_size", 32}, {"bogus", 1}};
  CHECK_THROWS_AS(j.get<ModelConfig>(), ContractError);
  ModelConfig round = nlohmann::json(small_config()).get<ModelConfig>();
  CHECK(round == small_config());
}

TEST_CASE("build is deterministic and fan-in scaled") {
  ModelConfig cfg;
  Rng a(7), b(7), c(8);
  auto pa = build<float>(cfg, a);
  CHECK(pa == build<float>(cfg, b));
  CHECK_FALSE(pa == build<float>(cfg, c));
  for (const auto& s : layer_specs(cfg)) {
    const auto& w = pa.weights[s.name + ".weight"];
    if (w.size() < 200) continue;  // too few samples for a 10% check
    double m = 0;
    for (float v : w.data()) m += v;
    m /= w.size();
    double var = 0;
    for (float v : w.data()) var += (v - m) * (v - m);
    const double sd = std::sqrt(var / w.size());
    CAPTURE(s.name);
    CHECK(std::abs(sd - init_std(s)) / init_std(s) < 0.10);
    for (float v : pa.weights[s.name + ".bias"].data()) CHECK(v == 0.0f);
  }
}

TEST_CASE("forward shapes on the desk config") {
  ModelConfig cfg;  // 64 x 64, base 8, k 2, C 16
  Rng rng(3);
  auto params = build<float>(cfg, rng);
  Tape<float> tape;
  auto image = random_uniform<float>(rng, {2, 3, 64, 64}, 0, 1);
  auto out = forward(params, tape, image, Mode::train);
  REQUIRE(out.encoder.size() == 7);
  for (std::size_t b = 0; b < out.encoder.size(); ++b) {
    CHECK(out.encoder[b].dim(2) == (64u >> b));
    CHECK(out.encoder[b].dim(1) == (8u << b));
  }
  CHECK(out.encoder.back().dim(2) == 1);  // 1x1 bottleneck
  REQUIRE(out.decoder.size() == 6);
  for (std::size_t j = 0; j < out.decoder.size(); ++j) {
    // decoder mirrors the encoder ladder
    CHECK(out.decoder[j].dim(2) == out.encoder[5 - j].dim(2));
    CHECK(out.decoder[j].dim(1) == out.encoder[5 - j].dim(1));
  }
  CHECK(out.scale_maps.size() == 13);
  for (const auto& m : out.scale_maps) CHECK(m.shape() == Shape{2, 1, 64, 64});
  CHECK(out.stack.shape() == Shape{2, 13, 64, 64});
  CHECK(out.embedding.shape() == Shape{2, 16, 64, 64});
  REQUIRE(out.ce_probs.shape() == Shape{2, 2, 64, 64});
  const auto& p = out.ce_probs.value();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 64 * 64; ++i)
      CHECK(p[(n * 2) * 4096 + i] + p[(n * 2 + 1) * 4096 + i] == doctest::Approx(1.0f).epsilon(1e-6));
  // every trunk conv plus the embedding normalization
  CHECK(out.bn_batch_stats.size() == static_cast<std::size_t>(depth(cfg) - 3) + 1);
}

TEST_CASE("scale-0 map comes from the raw image") {
  auto cfg = small_config();
  Rng rng(4);
  auto params = build<double>(cfg, rng);
  const auto image = random_uniform<double>(rng, {1, 3, 16, 16}, 0, 1);
  Tape<double> tape;
  auto out = forward(params, tape, image, Mode::inference);
  auto expect = conv_oracle(image, params.weights["extract0.weight"], params.weights["extract0.bias"], 1, 1);
  for (std::size_t i = 0; i < expect.size(); ++i)
    CHECK(out.scale_maps[0].value()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("zero network gives zero embeddings and uniform probabilities") {
  auto cfg = small_config();
  Rng rng(5);
  auto params = build<double>(cfg, rng);
  for (std::size_t i = 0; i < params.weights.size(); ++i) params.weights.value(i).fill(0.0);
  Tape<double> tape;
  auto out = forward(params, tape, Tensor<double>({1, 3, 16, 16}), Mode::inference);
  for (double v : out.embedding.value().data()) CHECK(v == 0.0);
  for (double v : out.ce_probs.value().data()) CHECK(v == 0.5);
}

TEST_CASE("inference forward is deterministic and batch-permutation equivariant") {
  auto cfg = small_config(16, 2);
  Rng rng(6);
  auto params = build<double>(cfg, rng);
  // give the running statistics non-trivial values
  for (std::size_t i = 0; i < params.buffers.size(); ++i)
    for (auto& v : params.buffers.value(i).data()) v = rng.uniform(0.5, 1.5);
  const auto a = random_uniform<double>(rng, {1, 3, 16, 16}, 0, 1);
  const auto b = random_uniform<double>(rng, {1, 3, 16, 16}, 0, 1);
  Tensor<double> ab({2, 3, 16, 16}), ba({2, 3, 16, 16});
  std::copy(a.data().begin(), a.data().end(), ab.raw());
  std::copy(b.data().begin(), b.data().end(), ab.raw() + a.size());
  std::copy(b.data().begin(), b.data().end(), ba.raw());
  std::copy(a.data().begin(), a.data().end(), ba.raw() + a.size());

  Tape<double> t1, t2, t3;
  auto o1 = forward(params, t1, ab, Mode::inference).embedding.value();
  auto o2 = forward(params, t2, ab, Mode::inference).embedding.value();
  CHECK(o1 == o2);
  auto o3 = forward(params, t3, ba, Mode::inference).embedding.value();
  const std::size_t half = o1.size() / 2;
  for (std::size_t i = 0; i < half; ++i) {
    CHECK(o1[i] == o3[half + i]);
    CHECK(o1[half + i] == o3[i]);
  }
}

TEST_CASE("forward rejects a mismatched image") {
  auto cfg = small_config();
  Rng rng(7);
  auto params = build<float>(cfg, rng);
  Tape<float> tape;
  CHECK_THROWS_AS(forward(params, tape, Tensor<float>({1, 3, 8, 8}), Mode::inference), ContractError);
  CHECK_THROWS_AS(forward(params, tape, Tensor<float>({1, 1, 16, 16}), Mode::inference), ContractError);
}

TEST_CASE("CE head can read the embedding instead of the stack") {
  auto cfg = small_config();
  cfg.ce_head_input = CeHeadInput::embedding;
  Rng rng(8);
  auto params = build<double>(cfg, rng);
  CHECK(params.weights["ce.weight"].shape() == Shape{2, 16, 1, 1});
  Tape<double> tape;
  auto out = forward(params, tape, Tensor<double>({1, 3, 16, 16}, 0.5), Mode::inference);
  CHECK(out.ce_probs.shape() == Shape{1, 2, 16, 16});
}

TEST_CASE("float-to-double cast preserves parameters") {
  auto cfg = small_config();
  Rng rng(9);
  auto pf = build<float>(cfg, rng);
  auto pd = pf.cast<double>();
  CHECK(pd.weights.size() == pf.weights.size());
  CHECK(pd.cast<float>() == pf);
}
