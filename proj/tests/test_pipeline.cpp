// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "zobridge/errors.hpp"
#include "zobridge/pipeline.hpp"
#include "zobridge/tasks.hpp"

using namespace zobridge;

namespace {

Vec vec(std::initializer_list<double> v) {
  Vec out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

PipelineState identity_pipeline(Index width) {
  PipelineState ps;
  ps.encoder = std::make_shared<IdentityStage>(width);
  ps.middle = std::make_shared<IdentityStage>(width);
  ps.tail = std::make_shared<IdentityStage>(width);
  return ps;
}

ZoConfig coordinate(double mu) {
  ZoConfig c;
  c.mu = mu;
  return c;
}

TaskModel task_a(std::uint64_t seed, TaskData* out = nullptr) {
  TaskData data = generate(preset_by_name("task_a_smooth"), seed);
  TaskModel m = build_task_model(data, seed);
  if (out) *out = std::move(data);
  return m;
}

TaskModel task_b(std::uint64_t seed, TaskData* out = nullptr) {
  TaskData data = generate(preset_by_name("task_b_bitstring"), seed);
  TaskModel m = build_task_model(data, seed);
  if (out) *out = std::move(data);
  return m;
}

std::span<const Example> head(const std::vector<Example>& rows, std::size_t n) { return {rows.data(), n}; }

void randomize(ParamSet& ps, Rng& rng, double scale) {
  for (auto& b : ps.blocks()) b.values = gaussian_vec(rng, b.values.size(), scale);
}

}  // namespace

TEST_CASE("forward_predict") {
  SUBCASE("identity stages") {
    const auto p = forward_predict(identity_pipeline(3), vec({1, -2, 3}));
    CHECK(p.y_hat == vec({1, -2, 3}));
  }
  SUBCASE("zero-weight tail returns its bias") {
    PipelineState ps = identity_pipeline(2);
    auto tail = std::make_shared<Mlp>("w2", std::vector<Index>{2, 1}, std::vector<Activation>{Activation::Identity});
    ps.tail = tail;
    ps.params.add({"w2", vec({0, 0, 0.75}), false});
    CHECK(forward_predict(ps, vec({5, 6})).y_hat == vec({0.75}));
  }
  SUBCASE("task A equals stage-by-stage evaluation") {
    const TaskModel m = task_a(3);
    const PipelineState& ps = m.pipeline;
    Rng rng(8);
    for (int t = 0; t < 20; ++t) {
      const Vec x = gaussian_vec(rng, 4, 1.0);
      const Vec z = ps.encoder->forward(x, ps.params_for(*ps.encoder));
      const Vec r = ps.middle->forward(z, ps.params_for(*ps.middle));
      const Vec y = ps.tail->forward(r, ps.params_for(*ps.tail));
      const Prediction p = forward_predict(ps, x);
      CHECK(p.latent == z);
      CHECK(p.readout == r);
      CHECK(p.y_hat == y);
    }
  }
}

TEST_CASE("batch_loss") {
  PipelineState ps = identity_pipeline(3);
  auto dec = std::make_shared<Mlp>("v", std::vector<Index>{3, 3}, std::vector<Activation>{Activation::Identity});
  ps.recon_decoder = dec;
  Vec v(12);
  v << 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0;
  ps.params.add({"v", v, false});
  const std::vector<Example> perfect{{vec({1, 2, 3}), vec({1, 2, 3})}, {vec({0, -1, 4}), vec({0, -1, 4})}};

  SUBCASE("perfect prediction and reconstruction") {
    const auto l = batch_loss(ps, perfect, {1.0});
    CHECK(l.total == 0.0);
  }
  SUBCASE("prediction 2 and reconstruction 3 sum to 5 at lambda 1") {
    ps.params.at("v").values.tail(3) = vec({3, 0, 0});
    const std::vector<Example> batch{{vec({1, 2, 3}), vec({2, 3, 3})}};
    const auto l = batch_loss(ps, batch, {1.0});
    CHECK(l.prediction == 2.0);
    CHECK(l.reconstruction == 3.0);
    CHECK(l.total == 5.0);
    const auto off = batch_loss(ps, batch, {0.0});
    CHECK(off.total == off.prediction);
  }
  SUBCASE("empty batch") { CHECK_THROWS_AS(batch_loss(ps, {}, {1.0}), InvalidArgument); }
}

TEST_CASE("backward matches the exact gradient through a smooth middle") {
  // λ = 0, coordinate kind, μ = 1e-4: median relative error over 50 points ≤ 1e-2.
  TaskData data;
  TaskModel m = task_a(5, &data);
  Rng rng(21);
  std::vector<double> u_err, all_err;
  for (int t = 0; t < 50; ++t) {
    PipelineState ps = m.pipeline;
    randomize(ps.params, rng, 0.5);
    const auto batch = head(data.train.rows, 8);
    Rng r1(t), r2(t);
    const auto zo = backward(ps, batch, {0.0}, coordinate(1e-4), r1);
    const auto exact = backward(m.with_oracle_middle(ps), batch, {0.0}, coordinate(1e-4), r2);
    CHECK(exact.log.queries == 0);
    u_err.push_back(relative_error(zo.at("u"), exact.at("u"), 1e-12));
    all_err.push_back(relative_error(zo.flatten(), exact.flatten(), 1e-12));
  }
  std::nth_element(u_err.begin(), u_err.begin() + 25, u_err.end());
  std::nth_element(all_err.begin(), all_err.begin() + 25, all_err.end());
  CHECK(u_err[25] <= 1e-2);
  CHECK(all_err[25] <= 1e-2);
}

TEST_CASE("frozen decoder block gets an exactly zero gradient") {
  TaskData data;
  TaskModel m = task_b(2, &data);
  PipelineState ps = m.pipeline;
  ps.params.at("v").frozen = true;
  Rng rng(1);
  const auto g = backward(ps, head(data.train.rows, 4), {1.0}, coordinate(1e-3), rng);
  CHECK(g.at("v") == Vec::Zero(g.at("v").size()));
  CHECK(g.at("u").norm() > 0.0);
  CHECK(g.at("w1").norm() > 0.0);
}

TEST_CASE("zero residual short-circuits the estimators") {
  TaskData data;
  TaskModel m = task_b(3, &data);
  std::vector<Example> batch(data.train.rows.begin(), data.train.rows.begin() + 6);
  for (auto& ex : batch) ex.y = forward_predict(m.pipeline, ex.x).y_hat;
  Rng rng(1);
  const auto g = backward(m.pipeline, batch, {0.0}, coordinate(1e-3), rng);
  CHECK(g.log.queries == 0);
  CHECK(g.norm() == 0.0);
}

TEST_CASE("query count per step is batch × (latent + 1 + front block)") {
  TaskData data;
  TaskModel m = task_b(4, &data);
  PipelineState ps = m.pipeline;
  ps.params.at("v").frozen = true;
  const Index latent = ps.encoder->out_width();
  const Index front = ps.params.at("w1").values.size();
  for (std::size_t batch : {1u, 8u}) {
    Rng rng(2);
    const auto g = backward(ps, head(data.train.rows, batch), {1.0}, coordinate(1e-3), rng);
    CHECK(g.log.queries == batch * static_cast<std::size_t>(latent + 1 + front));
    CHECK(g.log.shared_base);
  }
}

TEST_CASE("reconstruction term is additive") {
  TaskData data;
  TaskModel m = task_b(6, &data);
  PipelineState ps = m.pipeline;
  ps.params.at("v").frozen = true;
  const auto batch = head(data.train.rows, 8);
  for (double lambda : {1.0, 0.37}) {
    Rng r1(9), r2(9);
    const auto full = backward(ps, batch, {lambda}, coordinate(1e-3), r1);
    const auto pred = backward(ps, batch, {0.0}, coordinate(1e-3), r2);
    const auto recon = reconstruction_gradient(ps, batch);
    for (std::size_t b = 0; b < full.names.size(); ++b) {
      const Vec sum = pred.grads[b] + lambda * recon.grads[b];
      INFO(full.names[b]);
      CHECK((full.grads[b] - sum).cwiseAbs().maxCoeff() <= 1e-12);
    }
    CHECK(full.loss.total == doctest::Approx(pred.loss.prediction + lambda * recon.loss.reconstruction));
  }
}

TEST_CASE("freezing a block leaves the other gradients unchanged") {
  TaskData data;
  TaskModel m = task_b(7, &data);
  const auto batch = head(data.train.rows, 4);
  PipelineState open = m.pipeline;
  Rng r0(3);
  const auto base = backward(open, batch, {1.0}, coordinate(1e-3), r0);
  for (const std::string frozen : {"v", "w1", "w2", "u"}) {
    PipelineState ps = m.pipeline;
    ps.params.at(frozen).frozen = true;
    Rng r(3);
    const auto g = backward(ps, batch, {1.0}, coordinate(1e-3), r);
    for (const auto& name : g.names) {
      INFO("frozen " << frozen << ", block " << name);
      if (name == frozen) {
        CHECK(g.at(name) == Vec::Zero(g.at(name).size()));
      } else {
        CHECK(g.at(name) == base.at(name));
      }
    }
  }
}

TEST_CASE("backward advances the rng by one draw and is reproducible") {
  TaskData data;
  TaskModel m = task_b(8, &data);
  ZoConfig cfg;
  cfg.kind = ZoKind::Gaussian;
  cfg.k_samples = 16;
  const auto batch = head(data.train.rows, 4);
  Rng a(11), b(11);
  const auto ga = backward(m.pipeline, batch, {1.0}, cfg, a);
  const auto gb = backward(m.pipeline, batch, {1.0}, cfg, b);
  CHECK(hash_values(ga.flatten()) == hash_values(gb.flatten()));
  CHECK(a.counter() == 1);

  ZoConfig threaded = cfg;
  threaded.threads = 3;
  Rng c(11);
  const auto gc = backward(m.pipeline, batch, {1.0}, threaded, c);
  CHECK(hash_values(ga.flatten()) == hash_values(gc.flatten()));
}

TEST_CASE("GradientBundle helpers") {
  ParamSet ps;
  ps.add({"a", vec({1, 2}), false});
  ps.add({"b", vec({3}), false});
  auto g = GradientBundle::zeros_like(ps);
  g.at("a") = vec({3, 0});
  g.at("b") = vec({4});
  CHECK(g.norm() == 5.0);
  CHECK(g.flatten() == vec({3, 0, 4}));
  auto h = g;
  h.add(g, 2.0);
  CHECK(h.at("b") == vec({12}));
  CHECK_THROWS_AS(g.at("c"), InvalidArgument);
}

TEST_CASE("boundary validation") {
  SUBCASE("opaque stage fed by a discrete decoded object is rejected with a hint") {
    auto encoder = std::make_shared<Mlp>("u", std::vector<Index>{16, 10}, std::vector<Activation>{Activation::Tanh});
    auto decoder = std::make_shared<Mlp>("v", std::vector<Index>{10, 16}, std::vector<Activation>{Activation::Identity});
    auto discretize = std::make_shared<ThresholdStage>(16);
    auto featurizer = std::make_shared<FunctionStage>(
        "featurizer", 16, 4, [](const Vec& x, Params) { return bit_features(x); }, std::vector<BlockSpec>{},
        Space::Discrete, Space::Continuous);
    auto predictor = std::make_shared<Mlp>("w", std::vector<Index>{4, 1}, std::vector<Activation>{Activation::Identity});
    const std::vector<StagePtr> chain{encoder, decoder, discretize, featurizer, predictor};
    const auto rep = validate_boundaries(chain);
    CHECK_FALSE(rep.ok);
    bool hinted = false;
    for (const auto& d : rep.diagnostics) hinted = hinted || d.find("Reparameterize") != std::string::npos;
    CHECK(hinted);
  }
  SUBCASE("fused opaque middle is accepted") {
    const TaskModel m = task_b(1);
    const auto rep = validate_boundaries(m.pipeline);
    CHECK(rep.ok);
    const std::vector<StagePtr> chain{m.pipeline.encoder, m.pipeline.middle, m.pipeline.tail};
    CHECK(validate_boundaries(chain).ok);
  }
  SUBCASE("empty pipeline") {
    const auto rep = validate_boundaries(std::span<const StagePtr>{});
    CHECK_FALSE(rep.ok);
    REQUIRE(rep.diagnostics.size() == 1);
    CHECK(rep.diagnostics[0].find("empty") != std::string::npos);
  }
  SUBCASE("width mismatch") {
    const std::vector<StagePtr> chain{std::make_shared<IdentityStage>(2), std::make_shared<IdentityStage>(3)};
    CHECK_FALSE(validate_boundaries(chain).ok);
  }
}

TEST_CASE("pipeline validation") {
  PipelineState ps = identity_pipeline(2);
  CHECK_NOTHROW(ps.validate());
  ps.tail = std::make_shared<IdentityStage>(3);
  CHECK_THROWS_AS(ps.validate(), InvalidArgument);
  ps = identity_pipeline(2);
  ps.tail = std::make_shared<Mlp>("w2", std::vector<Index>{2, 1}, std::vector<Activation>{Activation::Identity});
  CHECK_THROWS_AS(ps.validate(), InvalidArgument);  // block w2 missing
}

TEST_CASE("no queries when nothing upstream of the tail is trainable") {
  TaskData data;
  TaskModel m = task_b(9, &data);
  PipelineState ps = m.pipeline;
  for (const char* name : {"u", "v", "w1"}) ps.params.at(name).frozen = true;
  Rng rng(1);
  const auto g = backward(ps, head(data.train.rows, 4), {0.0}, coordinate(1e-3), rng);
  CHECK(g.log.queries == 0);
  CHECK(g.at("w2").norm() > 0.0);
}
