#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "menet/trainer.hpp"
#include "test_util.hpp"

using namespace menet;
using namespace menet::testing;

namespace fs = std::filesystem;

namespace {

ModelConfig small_model() {
  ModelConfig m;
  m.input_size = 16;
  m.base_channels = 2;
  m.convs_per_block = 1;
  m.embedding_dim = 4;
  return m;
}

TrainConfig small_train() {
  TrainConfig t;
  t.learning_rate = 0.01;
  t.batch_size = 2;
  t.iterations = 6;
  t.checkpoint_interval = 3;
  t.seed = 11;
  t.clip_norm = 5;
  return t;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("menet_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("train config json") {
  TrainConfig c;
  c.learning_rate = 0.02;
  c.objective = Objective::ce_only;
  c.mine_metric_loss = true;
  nlohmann::json j = c;
  const auto back = j.get<TrainConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK(back.objective == Objective::ce_only);

  CHECK_THROWS_WITH_AS(nlohmann::json({{"lr", 0.1}}).get<TrainConfig>(), doctest::Contains("'lr'"), ContractError);
  CHECK_THROWS_AS(nlohmann::json({{"batch_size", 1}}).get<TrainConfig>(), ContractError);
  CHECK_THROWS_AS(nlohmann::json({{"learning_rate", -1}}).get<TrainConfig>(), ContractError);
  CHECK_THROWS_AS(nlohmann::json({{"weight_decay_mode", "decoupled"}}).get<TrainConfig>(), ContractError);
  CHECK_THROWS_AS(nlohmann::json({{"objective", "dice"}}).get<TrainConfig>(), ContractError);
}

TEST_CASE("sgd_step") {
  Rng rng(1);
  ParameterSet<double> p, g;
  p.add("a", randn(rng, {3, 4}));
  p.add("b", randn(rng, {5}));
  g.add("a", randn(rng, {3, 4}));
  g.add("b", randn(rng, {5}));

  SUBCASE("plain gradient descent") {
    TrainConfig c;
    c.learning_rate = 0.25;
    c.momentum = 0;
    c.weight_decay = 0;
    auto q = p;
    auto s = OptimState<double>::zeros_like(q);
    sgd_step(q, g, s, c);
    for (std::size_t i = 0; i < p.size(); ++i)
      for (std::size_t k = 0; k < p.value(i).size(); ++k)
        CHECK(q.value(i)[k] == p.value(i)[k] - 0.25 * g.value(i)[k]);
    CHECK(s.iteration == 1);
  }
  SUBCASE("matches the scalar momentum recurrence exactly") {
    TrainConfig c;
    c.learning_rate = 0.05;
    c.momentum = 0.9;
    c.weight_decay = 1e-3;
    auto q = p;
    auto s = OptimState<double>::zeros_like(q);
    std::vector<double> theta(p.value(0).data().begin(), p.value(0).data().end()), v(theta.size(), 0.0);
    for (int step = 0; step < 20; ++step) {
      sgd_step(q, g, s, c);
      for (std::size_t k = 0; k < theta.size(); ++k) {
        v[k] = 0.9 * v[k] + g.value(0)[k] + 1e-3 * theta[k];
        theta[k] = theta[k] - 0.05 * v[k];
      }
    }
    for (std::size_t k = 0; k < theta.size(); ++k) CHECK(q.value(0)[k] == theta[k]);
    CHECK(s.iteration == 20);
  }
  SUBCASE("shape and name mismatches") {
    TrainConfig c;
    auto s = OptimState<double>::zeros_like(p);
    ParameterSet<double> bad;
    bad.add("a", Tensor<double>({3, 4}));
    bad.add("b", Tensor<double>({4}));
    CHECK_THROWS_AS(sgd_step(p, bad, s, c), ContractError);
    ParameterSet<double> renamed;
    renamed.add("b", Tensor<double>({5}));
    renamed.add("a", Tensor<double>({3, 4}));
    CHECK_THROWS_AS(sgd_step(p, renamed, s, c), ContractError);
  }
}

TEST_CASE("sgd on a quadratic bowl") {
  TrainConfig c;
  c.learning_rate = 0.1;
  c.momentum = 0.9;
  c.weight_decay = 0;
  ParameterSet<double> p;
  p.add("x", Tensor<double>({1}, 1.0));
  auto s = OptimState<double>::zeros_like(p);
  int reached = -1;
  for (int step = 0; step < 200; ++step) {
    ParameterSet<double> g;
    g.add("x", p["x"]);  // f = x^2 / 2
    sgd_step(p, g, s, c);
    if (reached < 0 && std::abs(p["x"][0]) < 1e-3) reached = step;
  }
  CHECK(reached >= 0);
  CHECK(std::abs(p["x"][0]) < 1e-3);
}

TEST_CASE("weight decay alone decays geometrically") {
  TrainConfig c;
  c.learning_rate = 0.1;
  c.momentum = 0;
  c.weight_decay = 0.01;
  ParameterSet<double> p, g;
  p.add("x", Tensor<double>({2}, std::vector<double>{1.0, -3.0}));
  g.add("x", Tensor<double>({2}));
  auto s = OptimState<double>::zeros_like(p);
  for (int k = 1; k <= 50; ++k) {
    sgd_step(p, g, s, c);
    CHECK(p["x"][0] == doctest::Approx(std::pow(1 - 0.001, k)).epsilon(1e-12));
    CHECK(p["x"][1] == doctest::Approx(-3 * std::pow(1 - 0.001, k)).epsilon(1e-12));
  }
}

TEST_CASE("gradient clipping") {
  ParameterSet<double> g;
  g.add("a", Tensor<double>({2}, std::vector<double>{3, 0}));
  g.add("b", Tensor<double>({1}, 4.0));
  auto h = g;
  CHECK(clip_gradients(h, 10.0) == doctest::Approx(5.0));
  CHECK(h == g);
  CHECK(clip_gradients(h, 1.0) == doctest::Approx(5.0));
  CHECK(h["a"][0] == doctest::Approx(0.6));
  CHECK(h["b"][0] == doctest::Approx(0.8));
  CHECK(clip_gradients(h, 0.0) == doctest::Approx(1.0));
}

TEST_CASE("checkpoint round trip") {
  auto ck = initial_checkpoint(small_model(), small_train());
  Rng rng(3);
  for (std::size_t i = 0; i < ck.optim->velocity.size(); ++i)
    for (auto& v : ck.optim->velocity.value(i).data()) v = static_cast<float>(rng.normal());
  for (std::size_t i = 0; i < ck.params.buffers.size(); ++i)
    for (auto& v : ck.params.buffers.value(i).data()) v = static_cast<float>(rng.uniform(0.5, 1.5));
  ck.iteration = 42;
  ck.optim->iteration = 42;

  const auto bytes = serialize_checkpoint(ck);
  const auto back = deserialize_checkpoint(bytes);
  CHECK(serialize_checkpoint(back) == bytes);
  CHECK(back.params == ck.params);
  CHECK(back.iteration == 42);
  REQUIRE(back.optim);
  CHECK(back.optim->velocity == ck.optim->velocity);
  CHECK(nlohmann::json(back.train) == nlohmann::json(ck.train));

  const auto dir = scratch("roundtrip");
  save_checkpoint(dir / "a.ment", ck);
  const auto loaded = load_checkpoint(dir / "a.ment");
  save_checkpoint(dir / "b.ment", loaded);
  std::ifstream a(dir / "a.ment", std::ios::binary), b(dir / "b.ment", std::ios::binary);
  CHECK(std::string(std::istreambuf_iterator<char>(a), {}) == std::string(std::istreambuf_iterator<char>(b), {}));

  // inference outputs are bit-identical
  const auto images = random_uniform<float>(rng, {2, 3, 16, 16}, 0, 1);
  const auto m1 = predict(ck.params, images);
  const auto m2 = predict(loaded.params, images);
  for (std::size_t n = 0; n < 2; ++n) {
    CHECK(m1[n].metric == m2[n].metric);
    CHECK(m1[n].ce == m2[n].ce);
  }
}

TEST_CASE("checkpoint errors") {
  const auto ck = initial_checkpoint(small_model(), small_train());
  const auto bytes = serialize_checkpoint(ck);

  auto bumped = bytes;
  bumped[4] = static_cast<std::uint8_t>(kCheckpointVersion + 1);
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(bumped), doctest::Contains("version"), FormatError);

  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(magic), doctest::Contains("magic"), FormatError);

  std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 10);
  const std::string last = "optim/" + ck.optim->velocity.name(ck.optim->velocity.size() - 1);
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(cut), doctest::Contains(last.c_str()), FormatError);

  auto extra = bytes;
  extra.push_back(0);
  CHECK_THROWS_AS(deserialize_checkpoint(extra), FormatError);

  CHECK_THROWS_AS(load_checkpoint("/nonexistent/ckpt.ment"), FormatError);
}

TEST_CASE("checkpoint without optimizer state") {
  auto ck = initial_checkpoint(small_model(), small_train());
  ck.iteration = 3;
  const auto bytes = serialize_checkpoint(ck, false);
  CHECK(bytes.size() < serialize_checkpoint(ck).size());
  const auto back = deserialize_checkpoint(bytes);
  CHECK_FALSE(back.optim);
  CHECK(back.params == ck.params);
  const auto data = generate_synthetic(4, 16, Rng(5));
  CHECK_THROWS_WITH_AS(train_loop(back, data), doctest::Contains("optimizer state"), ContractError);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  auto cfg = small_train();
  cfg.learning_rate = 0;
  cfg.weight_decay = 0.5;
  const auto start = initial_checkpoint(small_model(), cfg);
  const auto data = generate_synthetic(6, 16, Rng(5));
  const auto r = train_loop(start, data);
  CHECK(r.checkpoint.params.weights == start.params.weights);
  CHECK(r.history.size() == 6);
  CHECK(r.checkpoint.iteration == 6);
}

TEST_CASE("resume reproduces the uninterrupted trajectory") {
  const auto start = initial_checkpoint(small_model(), small_train());
  const auto data = generate_synthetic(8, 16, Rng(5));
  const auto full = train_loop(start, data);

  TrainOptions first;
  first.stop_at = 3;
  const auto head = train_loop(start, data, first);
  CHECK(head.history.size() == 3);
  const auto restored = deserialize_checkpoint(serialize_checkpoint(head.checkpoint));
  const auto tail = train_loop(restored, data);

  REQUIRE(tail.history.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(head.history[i].total == full.history[i].total);
    CHECK(tail.history[i].iteration == full.history[i + 3].iteration);
    CHECK(tail.history[i].total == full.history[i + 3].total);
    CHECK(tail.history[i].l_ce == full.history[i + 3].l_ce);
  }
  CHECK(tail.checkpoint.params == full.checkpoint.params);
  CHECK(tail.checkpoint.optim->velocity == full.checkpoint.optim->velocity);
}

TEST_CASE("degenerate samples are skipped") {
  auto data = generate_synthetic(4, 16, Rng(5));
  data[1].mask.assign(data[1].mask.size(), 0);
  std::vector<std::string> warnings;
  TrainOptions opts;
  opts.warn = [&](const std::string& w) { warnings.push_back(w); };
  auto cfg = small_train();
  cfg.iterations = 2;
  const auto r = train_loop(initial_checkpoint(small_model(), cfg), data, opts);
  CHECK(r.skipped == std::vector<std::string>{data[1].id});
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find(data[1].id) != std::string::npos);

  data.resize(2);
  CHECK_THROWS_AS(train_loop(initial_checkpoint(small_model(), cfg), data), ContractError);
}

TEST_CASE("training artifacts") {
  const auto dir = scratch("artifacts");
  TrainOptions opts;
  opts.out_dir = dir;
  opts.validation = generate_synthetic(3, 16, Rng(9));
  const auto data = generate_synthetic(6, 16, Rng(5));
  const auto r = train_loop(initial_checkpoint(small_model(), small_train()), data, opts);
  CHECK(fs::exists(dir / "ckpt_000003.ment"));
  CHECK(fs::exists(dir / "ckpt_000006.ment"));
  CHECK(fs::exists(dir / "last.ment"));
  CHECK(fs::exists(dir / "best.ment"));
  CHECK(r.validation.size() == 2);

  std::ifstream f(dir / "loss.csv");
  std::string line;
  std::getline(f, line);
  CHECK(line == "iteration,l_ce,l_ml_star,total");
  int rows = 0;
  while (std::getline(f, line)) ++rows;
  CHECK(rows == 6);

  // resuming from the midpoint rewrites the tail of the history, not duplicates it
  auto mid = load_checkpoint(dir / "ckpt_000003.ment");
  train_loop(mid, data, opts);
  std::ifstream g(dir / "loss.csv");
  rows = -1;
  while (std::getline(g, line)) ++rows;
  CHECK(rows == 6);
  CHECK(load_checkpoint(dir / "last.ment").params == r.checkpoint.params);
}

TEST_CASE("validation map follows the objective") {
  CHECK(validation_map(Objective::ce_only) == MapKind::ce);
  CHECK(validation_map(Objective::combined) == MapKind::metric);
}
