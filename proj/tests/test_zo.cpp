// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <cmath>

#include "zobridge/errors.hpp"
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

Mat a22() {
  Mat a(2, 2);
  a << 1, 2, 3, 4;
  return a;
}

FunctionStage affine_stage() {
  return FunctionStage("affine", 2, 2, [](const Vec& x, Params) { return matvec(a22(), x); });
}

FunctionStage quadratic_stage() {
  return FunctionStage("quadratic", 2, 2, [](const Vec& x, Params) { return vec({x(0) * x(0), x(0) * x(1)}); });
}

ZoConfig coordinate(double mu) {
  ZoConfig c;
  c.kind = ZoKind::Coordinate;
  c.mu = mu;
  return c;
}

ZoConfig gaussian(double mu, int k, double sigma = 1.0) {
  ZoConfig c;
  c.kind = ZoKind::Gaussian;
  c.mu = mu;
  c.k_samples = k;
  c.sigma = sigma;
  return c;
}

}  // namespace

TEST_CASE("constant map gives a zero estimate") {
  FunctionStage constant("c", 3, 2, [](const Vec&, Params) { return vec({1.5, -2}); });
  Rng rng(1);
  for (const ZoConfig& cfg : {coordinate(1e-3), gaussian(1e-3, 16)}) {
    const auto r = zo_vjp_input(constant, vec({1, 2, 3}), {}, vec({1, 1}), cfg, rng);
    CHECK(r.estimate == Vec::Zero(3));
    CHECK(r.log.degenerate_step);
  }
}

TEST_CASE("coordinate kind is exact on affine maps for every step") {
  const auto s = affine_stage();
  Rng rng(1);
  for (double mu : {1e-2, 1e-3, 1e-4, 1e-5, 0.5}) {
    const auto r = zo_vjp_input(s, vec({0.3, -1.7}), {}, vec({1, 1}), coordinate(mu), rng);
    INFO("mu = " << mu);
    CHECK(relative_error(r.estimate, vec({4, 6})) <= 1e-9);
  }
}

TEST_CASE("coordinate kind on the quadratic at (1, 2)") {
  Rng rng(1);
  const auto r = zo_vjp_input(quadratic_stage(), vec({1, 2}), {}, vec({1, 1}), coordinate(1e-4), rng);
  CHECK(std::abs(r.estimate(0) - 4.0) <= 1e-3);
  CHECK(std::abs(r.estimate(1) - 1.0) <= 1e-3);
}

TEST_CASE("gaussian kind on an affine map with K = 1e4") {
  Rng rng(12345);
  const auto r = zo_vjp_input(affine_stage(), vec({0.2, 0.1}), {}, vec({1, 1}), gaussian(1e-3, 10000), rng);
  CHECK(relative_error(r.estimate, vec({4, 6})) <= 0.05);
}

TEST_CASE("gaussian normalization is unbiased for any sigma") {
  // Mean over many seeds tends to Jᵀg regardless of σ.
  for (double sigma : {0.3, 2.0}) {
    Vec mean = Vec::Zero(2);
    const int seeds = 40;
    for (int s = 0; s < seeds; ++s) {
      Rng rng(100 + s);
      mean += zo_vjp_input(affine_stage(), vec({0, 0}), {}, vec({1, 1}), gaussian(1e-3, 2000, sigma), rng).estimate;
    }
    mean /= seeds;
    INFO("sigma = " << sigma);
    CHECK(relative_error(mean, vec({4, 6})) <= 0.02);
  }
}

TEST_CASE("query budget: n + 1 and K + 1 with one base evaluation") {
  Rng rng(2);
  std::atomic<int> calls{0};
  FunctionStage counted("counted", 5, 3, [&](const Vec& x, Params) {
    ++calls;
    return x.head(3).eval();
  });
  const Vec x = Vec::Ones(5), g = Vec::Ones(3);

  auto r = zo_vjp_input(counted, x, {}, g, coordinate(1e-3), rng);
  CHECK(r.log.queries == 6);
  CHECK(calls == 6);
  CHECK(r.log.input_hashes.size() == 6);
  CHECK(r.log.input_hashes.front() == hash_values(x));

  calls = 0;
  r = zo_vjp_input(counted, x, {}, g, gaussian(1e-3, 11), rng);
  CHECK(r.log.queries == 12);
  CHECK(calls == 12);

  calls = 0;
  const Vec base = counted.forward(x);
  r = zo_vjp_input(counted, x, {}, g, coordinate(1e-3), rng, &base);
  CHECK(r.log.shared_base);
  CHECK(r.log.queries == 5);
  CHECK(calls == 6);  // including the caller's base evaluation
}

TEST_CASE("zero cotangent issues no queries") {
  Rng rng(3);
  std::atomic<int> calls{0};
  FunctionStage counted("counted", 2, 2, [&](const Vec& x, Params) {
    ++calls;
    return x;
  });
  for (const ZoConfig& cfg : {coordinate(1e-3), gaussian(1e-3, 8)}) {
    const auto r = zo_vjp_input(counted, vec({1, 2}), {}, Vec::Zero(2), cfg, rng);
    CHECK(r.estimate == Vec::Zero(2));
    CHECK(r.log.queries == 0);
  }
  CHECK(calls == 0);
}

TEST_CASE("estimates do not depend on fan-out") {
  const auto s = quadratic_stage();
  Mlp wide("w", {12, 6}, {Activation::Tanh});
  Rng init(5);
  const std::vector<Vec> p{wide.init(init)};
  const Vec x = gaussian_vec(init, 12, 1.0), g = gaussian_vec(init, 6, 1.0);
  for (const ZoConfig& base_cfg : {coordinate(1e-3), gaussian(1e-3, 64)}) {
    ZoConfig serial = base_cfg, parallel = base_cfg;
    serial.threads = 1;
    parallel.threads = 4;
    Rng r1(77), r2(77);
    const auto a = zo_vjp_input(wide, x, p, g, serial, r1);
    const auto b = zo_vjp_input(wide, x, p, g, parallel, r2);
    CHECK(hash_values(a.estimate) == hash_values(b.estimate));
    CHECK(a.log.input_hashes == b.log.input_hashes);
  }
}

TEST_CASE("non-finite outputs: coordinate errors, gaussian redraws") {
  // Blows up when the first coordinate is perturbed upwards.
  FunctionStage picky("picky", 2, 1, [](const Vec& x, Params) {
    return vec({x(0) > 1e-9 ? std::numeric_limits<double>::infinity() : x(0) + x(1)});
  });
  Rng rng(4);
  CHECK_THROWS_AS(zo_vjp_input(picky, vec({0, 0}), {}, vec({1}), coordinate(1e-3), rng), NonFiniteOutput);

  const auto r = zo_vjp_input(picky, vec({0, 0}), {}, vec({1}), gaussian(1e-3, 32), rng);
  CHECK(r.log.rejected > 0);
  CHECK(all_finite(r.estimate));
  CHECK(r.log.queries == 33 + r.log.rejected);

  FunctionStage broken("broken", 2, 1, [](const Vec& x, Params) {
    return vec({x(0) == 0.0 ? 0.0 : std::nan("")});
  });
  CHECK_THROWS_AS(zo_vjp_input(broken, vec({0, 0}), {}, vec({1}), gaussian(1e-3, 4), rng), NonFiniteOutput);
}

TEST_CASE("parameter-side estimates") {
  SUBCASE("output independent of the block") {
    FunctionStage s("s", 2, 2, [](const Vec& x, Params) { return x; }, {{"theta", 3}});
    ParamSet ps;
    ps.add({"theta", vec({1, 2, 3}), false});
    Rng rng(1);
    const auto r = zo_vjp_params(s, vec({1, 1}), ps, "theta", vec({1, 1}), coordinate(1e-3), rng);
    CHECK(r.estimate == Vec::Zero(3));
  }
  SUBCASE("opaque y = W x recovers e1 ⊗ x") {
    FunctionStage s(
        "wx", 2, 2, [](const Vec& x, Params p) { return matvec(p[0].reshaped<Eigen::RowMajor>(2, 2).eval(), x); },
        {{"W", 4}});
    ParamSet ps;
    ps.add({"W", vec({0.3, -1, 2, 0.5}), false});
    Rng rng(1);
    for (double mu : {1e-2, 1e-4}) {
      const auto r = zo_vjp_params(s, vec({1, 0}), ps, "W", vec({1, 0}), coordinate(mu), rng);
      CHECK(relative_error(r.estimate, vec({1, 0, 0, 0})) <= 1e-9);
    }
  }
  SUBCASE("frozen or foreign blocks are contract violations") {
    FunctionStage s("s", 2, 2, [](const Vec& x, Params) { return x; }, {{"theta", 1}});
    ParamSet ps;
    ps.add({"theta", vec({1}), true});
    ps.add({"other", vec({1}), false});
    Rng rng(1);
    CHECK_THROWS_AS(zo_vjp_params(s, vec({1, 1}), ps, "theta", vec({1, 1}), coordinate(1e-3), rng),
                    ContractViolation);
    CHECK_THROWS_AS(zo_vjp_params(s, vec({1, 1}), ps, "other", vec({1, 1}), coordinate(1e-3), rng),
                    ContractViolation);
  }
}

TEST_CASE("task B middle: front-block estimate against central differences") {
  const TaskData data = generate(preset_by_name("task_b_bitstring"), 2);
  const TaskModel model = build_task_model(data, 2);
  const Stage& mid = *model.pipeline.middle;
  const ParamSet& ps = model.pipeline.params;
  Rng rng(31);
  int checked = 0;
  for (int t = 0; t < 10; ++t) {
    const Vec z = gaussian_vec(rng, mid.in_width(), 1.0);
    const Vec g = gaussian_vec(rng, mid.out_width(), 1.0);
    const auto est = zo_vjp_params(mid, z, ps, "w1", g, coordinate(1e-4), rng);

    const auto specs = mid.param_specs();
    std::vector<Vec> values = ps.gather(specs);
    std::size_t idx = 0;
    while (specs[idx].name != "w1") ++idx;
    const Mat j = central_jacobian(
        [&](const Vec& theta) {
          std::vector<Vec> p = values;
          p[idx] = theta;
          return mid.forward(z, p);
        },
        values[idx], 1e-5);
    CHECK(relative_error(est.estimate, matTvec(j, g)) <= 1e-2);
    ++checked;
  }
  CHECK(checked == 10);
}

TEST_CASE("forward-difference Jacobians") {
  Rng rng(1);
  FunctionStage id("id", 3, 3, [](const Vec& x, Params) { return x; });
  auto j = zo_jacobian(id, vec({1, -2, 0.5}), {}, coordinate(1e-3), rng);
  CHECK((j.estimate - Mat::Identity(3, 3)).cwiseAbs().maxCoeff() <= 1e-9);
  CHECK(j.log.queries == 4);

  j = zo_jacobian(affine_stage(), vec({0.7, 0.1}), {}, coordinate(1e-4), rng);
  CHECK((j.estimate - a22()).cwiseAbs().maxCoeff() <= 1e-9);

  Mat want(2, 2);
  want << 2, 0, 2, 1;
  j = zo_jacobian(quadratic_stage(), vec({1, 2}), {}, coordinate(1e-4), rng);
  CHECK((j.estimate - want).cwiseAbs().maxCoeff() <= 1e-3);

  CHECK_THROWS_AS(zo_jacobian(id, vec({1, 2, 3}), {}, gaussian(1e-3, 8), rng), Unsupported);
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS(coordinate(0.0).validate(), InvalidArgument);
  CHECK_THROWS_AS(coordinate(-1e-3).validate(), InvalidArgument);
  CHECK_THROWS_AS(gaussian(1e-3, 0).validate(), InvalidArgument);
  CHECK_THROWS_AS(gaussian(1e-3, 8, 0.0).validate(), InvalidArgument);
  CHECK(parse_zo_kind("gaussian") == ZoKind::Gaussian);
  CHECK(to_string(ZoKind::Coordinate) == "coordinate");
  CHECK_THROWS_AS(parse_zo_kind("spsa"), InvalidArgument);
}

TEST_CASE("check harness") {
  const auto cases = builtin_check_cases(10, 3);
  auto pick = [&](const std::string& name) {
    for (const auto& c : cases)
      if (c.name == name) return std::vector<ZoCheckCase>{c};
    FAIL("missing case " << name);
    return std::vector<ZoCheckCase>{};
  };

  SUBCASE("affine oracle is exact for every step") {
    const auto rep = zo_check(pick("affine2"), {coordinate(1e-2), coordinate(1e-3), coordinate(1e-4)});
    CHECK(rep.passed());
    for (const auto& row : rep.rows) CHECK(row.rel_err <= 1e-9);
  }
  SUBCASE("quadratic error halves with the step") {
    const auto rep = zo_check(pick("quadratic"), {coordinate(1e-2), coordinate(1e-3), coordinate(1e-4)});
    CHECK(rep.passed());
    for (const auto& f : rep.failures) MESSAGE(f);
  }
  SUBCASE("gaussian error shrinks from K = 512 to 1024") {
    const auto rep = zo_check(pick("quad_sin"), {gaussian(1e-4, 512)});
    CHECK(rep.passed());
    for (const auto& f : rep.failures) MESSAGE(f);
  }
  SUBCASE("small K is reported but not asserted") {
    const auto rep = zo_check(pick("quadratic"), {gaussian(1e-3, 1)});
    CHECK(rep.passed());
    CHECK_FALSE(rep.notes.empty());
    CHECK_FALSE(rep.rows.empty());
  }
  SUBCASE("a wrong oracle fails") {
    auto bad = pick("affine2");
    bad[0].jacobian = [](const Vec&) { return Mat::Identity(2, 2); };
    const auto rep = zo_check(bad, {coordinate(1e-3)});
    CHECK_FALSE(rep.passed());
  }
  SUBCASE("csv header") {
    const auto rep = zo_check(pick("affine2"), {coordinate(1e-3)});
    CHECK(rep.csv().rfind("kind,mu,sigma,k,point_id,rel_err\n", 0) == 0);
    CHECK(rep.rows.size() == 10);
  }
}
