// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "zobridge/errors.hpp"
#include "zobridge/stages.hpp"
#include "zobridge/tasks.hpp"
#include "zobridge/zo.hpp"

using namespace zobridge;

namespace {

Vec vec(std::initializer_list<double> v) {
  Vec out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

// y = A x + b as a one-layer linear Mlp; block layout is A row-major then b.
std::shared_ptr<Mlp> affine(const Mat& a) {
  return std::make_shared<Mlp>("w", std::vector<Index>{a.cols(), a.rows()},
                               std::vector<Activation>{Activation::Identity});
}

Vec affine_block(const Mat& a, const Vec& b) {
  Vec out(a.size() + b.size());
  Index k = 0;
  for (Index r = 0; r < a.rows(); ++r)
    for (Index c = 0; c < a.cols(); ++c) out(k++) = a(r, c);
  out.tail(b.size()) = b;
  return out;
}

constexpr double kStep = 1e-6;
constexpr double kTol = 1e-5;

// Central-difference Jᵀg with respect to x.
Vec numeric_vjp_input(const Stage& s, const Vec& x, const std::vector<Vec>& p, const Vec& g) {
  const Mat j = central_jacobian([&](const Vec& v) { return s.forward(v, p); }, x, kStep);
  return matTvec(j, g);
}

// Central-difference gradient of ⟨forward, g⟩ with respect to block b.
Vec numeric_vjp_block(const Stage& s, const Vec& x, std::vector<Vec> p, std::size_t b, const Vec& g) {
  const Vec theta = p[b];
  const Mat j = central_jacobian(
      [&](const Vec& t) {
        p[b] = t;
        return s.forward(x, p);
      },
      theta, kStep);
  return matTvec(j, g);
}

// Gradient check of every VJP of `s` at `points` random points.
void gradient_check(const Stage& s, int points, std::uint64_t seed) {
  Rng rng(seed);
  const auto specs = s.param_specs();
  double worst = 0.0;
  for (int t = 0; t < points; ++t) {
    const Vec x = gaussian_vec(rng, s.in_width(), 1.0);
    std::vector<Vec> p;
    for (const auto& spec : specs) p.push_back(gaussian_vec(rng, spec.size, 0.7));
    const Vec g = gaussian_vec(rng, s.out_width(), 1.0);
    const auto pb = s.vjp(x, p, g);
    worst = std::max(worst, relative_error(pb.input, numeric_vjp_input(s, x, p, g), 1e-8));
    REQUIRE(pb.params.size() == specs.size());
    for (std::size_t b = 0; b < specs.size(); ++b)
      worst = std::max(worst, relative_error(pb.params[b], numeric_vjp_block(s, x, p, b, g), 1e-8));
  }
  INFO(s.label() << " worst relative error " << worst);
  CHECK(worst <= kTol);
}

}  // namespace

TEST_CASE("forward of simple stages") {
  SUBCASE("zero-weight Mlp returns its bias") {
    Mlp m("w", {3, 2}, {Activation::Identity});
    Vec block = Vec::Zero(m.param_count());
    block.tail(2) = vec({0.25, -4.0});
    const std::vector<Vec> p{block};
    CHECK(m.forward(vec({5, -1, 2}), p) == vec({0.25, -4.0}));
  }
  SUBCASE("identity as an opaque function stage") {
    FunctionStage id("id", 2, 2, [](const Vec& x, Params) { return x; });
    CHECK(id.forward(vec({1, 2})) == vec({1, 2}));
  }
  SUBCASE("composite of identity-weight affine and tanh at 0") {
    auto a = affine(Mat::Identity(2, 2));
    CompositeStage c({a, std::make_shared<ElementwiseStage>(2, Activation::Tanh)}, false);
    const std::vector<Vec> p{affine_block(Mat::Identity(2, 2), Vec::Zero(2))};
    CHECK(c.forward(Vec::Zero(2), p) == Vec::Zero(2));
  }
}

TEST_CASE("vjp of an affine stage") {
  Mat a(2, 2);
  a << 1, 2, 3, 4;
  auto s = affine(a);
  const Vec x = vec({0.5, -2.0});
  const Vec g = vec({1, 1});
  const std::vector<Vec> p{affine_block(a, vec({0.1, 0.2}))};
  const auto pb = s->vjp(x, p, g);
  CHECK(pb.input == vec({4, 6}));
  // weight gradient is outer(g, x) row-major, then the bias gradient is g
  const Mat outer = g * x.transpose();
  CHECK(pb.params[0] == affine_block(outer, g));
  CHECK(s->vjp_input(x, p, g) == vec({4, 6}));
  CHECK(s->vjp_params(x, p, g)[0] == pb.params[0]);
}

TEST_CASE("tanh stage has unit slope at zero") {
  ElementwiseStage t(3, Activation::Tanh);
  const Vec g = vec({0.3, -1.2, 7.0});
  CHECK(t.vjp_input(Vec::Zero(3), {}, g) == g);
}

TEST_CASE("gradient check: every differentiable stage at 100 random points") {
  SUBCASE("identity") { gradient_check(IdentityStage(5), 100, 1); }
  SUBCASE("tanh") { gradient_check(ElementwiseStage(5, Activation::Tanh), 100, 2); }
  SUBCASE("two-layer Mlp") { gradient_check(Mlp("w", {4, 6, 3}, {Activation::Tanh, Activation::Identity}), 100, 3); }
  SUBCASE("three-layer Mlp") {
    gradient_check(Mlp("w", {3, 5, 4, 2}, {Activation::Tanh, Activation::Tanh, Activation::Tanh}), 100, 4);
  }
  SUBCASE("analytic stage") {
    AnalyticStage m("m", 2, 3, task_a_map, task_a_jacobian);
    gradient_check(m, 100, 5);
  }
  SUBCASE("non-opaque composite with two parameter blocks") {
    auto a = std::make_shared<Mlp>("a", std::vector<Index>{3, 4}, std::vector<Activation>{Activation::Tanh});
    auto b = std::make_shared<Mlp>("b", std::vector<Index>{4, 2}, std::vector<Activation>{Activation::Identity});
    CompositeStage c({a, std::make_shared<ElementwiseStage>(4, Activation::Tanh), b}, false);
    REQUIRE(c.differentiable());
    gradient_check(c, 100, 6);
  }
}

TEST_CASE("opaque stages refuse VJPs") {
  FunctionStage f("f", 2, 2, [](const Vec& x, Params) { return x; });
  CHECK_FALSE(f.differentiable());
  CHECK_THROWS_AS(f.vjp_input(vec({1, 2}), {}, vec({1, 1})), ContractViolation);
  CHECK_THROWS_AS(ThresholdStage(2).vjp(vec({1, 2}), {}, vec({1, 1})), ContractViolation);

  auto id = std::make_shared<IdentityStage>(2);
  CompositeStage opaque({id, id}, true);
  CHECK_FALSE(opaque.differentiable());
  CHECK_THROWS_AS(opaque.vjp_params(vec({1, 2}), {}, vec({1, 1})), ContractViolation);
}

TEST_CASE("forward validates widths and outputs") {
  Mlp m("w", {3, 2}, {Activation::Identity});
  const std::vector<Vec> p{Vec::Zero(m.param_count())};
  CHECK_THROWS_AS(m.forward(Vec::Zero(2), p), InvalidArgument);
  CHECK_THROWS_AS(m.forward(Vec::Zero(3)), InvalidArgument);
  const std::vector<Vec> short_block{Vec::Zero(3)};
  CHECK_THROWS_AS(m.forward(Vec::Zero(3), short_block), InvalidArgument);

  FunctionStage nan("nan", 1, 1, [](const Vec&, Params) { return vec({std::nan("")}); });
  CHECK_THROWS_AS(nan.forward(vec({1})), NonFiniteOutput);
  FunctionStage wide("wide", 1, 1, [](const Vec&, Params) { return vec({1, 2}); });
  CHECK_THROWS_AS(wide.forward(vec({1})), BackendError);
}

TEST_CASE("composite construction checks") {
  auto a = std::make_shared<IdentityStage>(2);
  auto b = std::make_shared<IdentityStage>(3);
  CHECK_THROWS_AS(CompositeStage({a, b}, false), InvalidArgument);
  CHECK_THROWS_AS(CompositeStage({}, false), InvalidArgument);
  auto m1 = std::make_shared<Mlp>("same", std::vector<Index>{2, 2}, std::vector<Activation>{Activation::Tanh});
  auto m2 = std::make_shared<Mlp>("same", std::vector<Index>{2, 2}, std::vector<Activation>{Activation::Tanh});
  CHECK_THROWS_AS(CompositeStage({m1, m2}, false), InvalidArgument);
}

TEST_CASE("Mlp layout and initialization") {
  Mlp m("w", {4, 3, 2}, {Activation::Tanh, Activation::Identity});
  CHECK(m.param_count() == 4 * 3 + 3 + 3 * 2 + 2);
  CHECK(m.weight_offset(0) == 0);
  CHECK(m.weight_offset(1) == 15);
  Rng rng(1);
  const Vec block = m.init(rng);
  CHECK(block.segment(12, 3) == Vec::Zero(3));
  CHECK(block.tail(2) == Vec::Zero(2));

  // Weight variance near 1/fan_in on a wide layer.
  Mlp wide("w", {50, 400}, {Activation::Identity});
  Rng r2(2);
  const Vec wb = wide.init(r2);
  const Vec w = wb.head(50 * 400);
  const double var = w.squaredNorm() / static_cast<double>(w.size());
  CHECK(var == doctest::Approx(1.0 / 50).epsilon(0.05));
}

TEST_CASE("reparameterized middle") {
  SUBCASE("all identity gives identity") {
    auto id = std::make_shared<IdentityStage>(3);
    auto mid = make_reparameterized_middle(id, id, id);
    CHECK(mid->opaque());
    CHECK_FALSE(mid->differentiable());
    const Vec z = vec({0.1, -2, 3});
    CHECK(mid->forward(z) == z);
  }
  SUBCASE("saturated decoder output gives the all-ones featurization") {
    auto decoder = std::make_shared<IdentityStage>(4);
    auto bits = std::make_shared<ThresholdStage>(4, 0.5);
    auto embed = std::make_shared<FunctionStage>(
        "embed", 4, 4, [](const Vec& x, Params) { return bit_features(x); }, std::vector<BlockSpec>{},
        Space::Discrete, Space::Continuous);
    auto featurizer = std::make_shared<CompositeStage>(std::vector<StagePtr>{bits, embed}, true, "featurizer");
    auto front = std::make_shared<IdentityStage>(4);
    auto mid = make_reparameterized_middle(decoder, featurizer, front);
    const Vec z = vec({0.51, 3.0, 0.9, 100.0});
    CHECK(mid->forward(z) == featurizer->forward(Vec::Ones(4)));
    CHECK(mid->forward(z) == vec({3, 0, 0, 4}));
  }
  SUBCASE("discrete featurizer output is rejected") {
    auto id = std::make_shared<IdentityStage>(2);
    CHECK_THROWS_AS(make_reparameterized_middle(id, std::make_shared<ThresholdStage>(2), id), InvalidArgument);
  }
  SUBCASE("opaque front is rejected") {
    auto id = std::make_shared<IdentityStage>(2);
    auto f = std::make_shared<FunctionStage>("f", 2, 2, [](const Vec& x, Params) { return x; });
    CHECK_THROWS_AS(make_reparameterized_middle(id, id, f), InvalidArgument);
  }
}

TEST_CASE("task B middle equals chaining its members") {
  const TaskData data = generate(preset_by_name("task_b_bitstring"), 4);
  const TaskModel model = build_task_model(data, 4);
  const auto* mid = dynamic_cast<const CompositeStage*>(model.pipeline.middle.get());
  REQUIRE(mid != nullptr);
  REQUIRE(mid->inner().size() == 3);
  Rng rng(17);
  for (int t = 0; t < 20; ++t) {
    const Vec z = gaussian_vec(rng, mid->in_width(), 1.0);
    Vec chained = z;
    for (const auto& s : mid->inner()) chained = s->forward(chained, model.pipeline.params_for(*s));
    CHECK(mid->forward(z, model.pipeline.params_for(*mid)) == chained);
  }
}

TEST_CASE("forward is pure") {
  Mlp m("w", {3, 8, 2}, {Activation::Tanh, Activation::Tanh});
  Rng rng(4);
  const std::vector<Vec> p{m.init(rng)};
  const Vec x = gaussian_vec(rng, 3, 1.0);
  const Vec a = m.forward(x, p), b = m.forward(x, p);
  CHECK(hash_values(a) == hash_values(b));
}

TEST_CASE("ParamSet basics") {
  ParamSet ps;
  ps.add({"a", vec({1, 2}), false});
  CHECK_THROWS_AS(ps.add({"a", vec({3}), false}), InvalidArgument);
  CHECK_THROWS_AS(ps.add({"", vec({3}), false}), InvalidArgument);
  CHECK(ps.contains("a"));
  CHECK_FALSE(ps.contains("b"));
  CHECK_THROWS_AS(ps.at("b"), InvalidArgument);
  CHECK_THROWS_AS(ps.gather({{"a", 3}}), InvalidArgument);
  CHECK(ps.gather({{"a", 2}})[0] == vec({1, 2}));
}
