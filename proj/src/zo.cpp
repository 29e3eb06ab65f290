// SPDX-License-Identifier: Apache-2.0
#include "zobridge/zo.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "zobridge/parallel.hpp"

namespace zobridge {

std::string to_string(ZoKind kind) { return kind == ZoKind::Coordinate ? "coordinate" : "gaussian"; }

ZoKind parse_zo_kind(const std::string& s) {
  if (s == "coordinate") return ZoKind::Coordinate;
  if (s == "gaussian") return ZoKind::Gaussian;
  throw InvalidArgument("unknown estimator kind '" + s + "' (expected coordinate or gaussian)");
}

void ZoConfig::validate() const {
  if (!(mu > 0.0) || !std::isfinite(mu)) throw InvalidArgument("ZoConfig: mu must be > 0");
  if (kind == ZoKind::Gaussian) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw InvalidArgument("ZoConfig: sigma must be > 0");
    if (k_samples < 1) throw InvalidArgument("ZoConfig: k_samples must be >= 1");
  }
}

void ZoQueryLog::merge(const ZoQueryLog& other) {
  queries += other.queries;
  rejected += other.rejected;
  wall_seconds += other.wall_seconds;
  input_hashes.insert(input_hashes.end(), other.input_hashes.begin(), other.input_hashes.end());
  shared_base = shared_base || other.shared_base;
  degenerate_step = degenerate_step || other.degenerate_step;
}

namespace {

constexpr int kMaxRedraws = 3;
constexpr std::uint64_t kRedrawStream = 0x7265647261770000ULL;

using Query = std::function<Vec(const Vec&)>;

std::size_t resolve_threads(const ZoConfig& cfg) { return cfg.threads > 0 ? cfg.threads : default_threads(); }

bool is_zero(const Vec& g) {
  for (Index i = 0; i < g.size(); ++i)
    if (g(i) != 0.0) return false;
  return true;
}

double projected_difference(const Vec& perturbed, const Vec& base, const Vec& g, double mu, bool& nonzero) {
  Vec diff(base.size());
  for (Index j = 0; j < base.size(); ++j) {
    diff(j) = (perturbed(j) - base(j)) / mu;
    if (diff(j) != 0.0) nonzero = true;
  }
  return dot(diff, g);
}

/// Shared core: the point being perturbed is either the stage input or a
/// parameter block; `query` evaluates the stage at a perturbed copy of it.
ZoResult<Vec> estimate(const Query& query, const Vec& point, const Vec& g, const ZoConfig& cfg, Rng& rng,
                       const Vec* base_output) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const Index n = point.size();
  ZoResult<Vec> result{Vec::Zero(n), {}};
  if (n == 0 || is_zero(g)) return result;
  ZoQueryLog& log = result.log;

  Vec base;
  if (base_output) {
    base = *base_output;
    log.shared_base = true;
  } else {
    base = query(point);
    ++log.queries;
    log.input_hashes.push_back(hash_values(point));
  }
  if (base.size() != g.size()) throw InvalidArgument("zo estimator: cotangent width mismatch");

  const std::size_t threads = resolve_threads(cfg);
  bool nonzero = false;

  if (cfg.kind == ZoKind::Coordinate) {
    std::vector<Vec> outputs(static_cast<std::size_t>(n));
    std::vector<std::uint64_t> hashes(static_cast<std::size_t>(n));
    parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t i) {
      Vec p = point;
      p(static_cast<Index>(i)) += cfg.mu;
      hashes[i] = hash_values(p);
      outputs[i] = query(p);
    });
    for (Index i = 0; i < n; ++i)
      result.estimate(i) = projected_difference(outputs[static_cast<std::size_t>(i)], base, g, cfg.mu, nonzero);
    log.queries += static_cast<std::size_t>(n);
    log.input_hashes.insert(log.input_hashes.end(), hashes.begin(), hashes.end());
  } else {
    const auto k = static_cast<std::size_t>(cfg.k_samples);
    std::vector<Vec> directions(k);
    for (auto& d : directions) d = gaussian_vec(rng, n, cfg.sigma);

    std::vector<Vec> outputs(k);
    std::vector<std::uint64_t> hashes(k);
    std::vector<char> rejected(k, 0);
    parallel_for(k, threads, [&](std::size_t s) {
      Vec p = point;
      axpy(cfg.mu, directions[s], p);
      hashes[s] = hash_values(p);
      try {
        outputs[s] = query(p);
      } catch (const NonFiniteOutput&) {
        rejected[s] = 1;
      }
    });
    log.queries += k;
    log.input_hashes.insert(log.input_hashes.end(), hashes.begin(), hashes.end());

    // Redraws run serially in index order so the result stays schedule-independent.
    Rng redraw = rng.split(kRedrawStream);
    for (std::size_t s = 0; s < k; ++s) {
      for (int attempt = 0; rejected[s] && attempt < kMaxRedraws; ++attempt) {
        ++log.rejected;
        directions[s] = gaussian_vec(redraw, n, cfg.sigma);
        Vec p = point;
        axpy(cfg.mu, directions[s], p);
        ++log.queries;
        log.input_hashes.push_back(hash_values(p));
        try {
          outputs[s] = query(p);
          rejected[s] = 0;
        } catch (const NonFiniteOutput&) {
        }
      }
      if (rejected[s]) throw NonFiniteOutput("zo estimator: sample " + std::to_string(s) +
                                             " stayed non-finite after " + std::to_string(kMaxRedraws) + " redraws");
    }

    const double scale = 1.0 / (static_cast<double>(k) * cfg.sigma * cfg.sigma);
    for (std::size_t s = 0; s < k; ++s) {
      const double c = projected_difference(outputs[s], base, g, cfg.mu, nonzero);
      axpy(scale * c, directions[s], result.estimate);
    }
  }

  log.degenerate_step = !nonzero;
  log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace

ZoResult<Vec> zo_vjp_input(const Stage& stage, const Vec& x, Params params, const Vec& g, const ZoConfig& cfg,
                           Rng& rng, const Vec* base_output) {
  if (x.size() != stage.in_width()) throw InvalidArgument(stage.label() + ": input width mismatch");
  if (g.size() != stage.out_width()) throw InvalidArgument(stage.label() + ": cotangent width mismatch");
  return estimate([&](const Vec& xp) { return stage.forward(xp, params); }, x, g, cfg, rng, base_output);
}

ZoResult<Vec> zo_vjp_params(const Stage& stage, const Vec& x, const ParamSet& params, const std::string& block,
                            const Vec& g, const ZoConfig& cfg, Rng& rng, const Vec* base_output) {
  const auto specs = stage.param_specs();
  const auto it = std::find_if(specs.begin(), specs.end(), [&](const BlockSpec& s) { return s.name == block; });
  if (it == specs.end()) throw ContractViolation(stage.label() + " does not consume block '" + block + "'");
  if (params.at(block).frozen) throw ContractViolation("block '" + block + "' is frozen");
  if (g.size() != stage.out_width()) throw InvalidArgument(stage.label() + ": cotangent width mismatch");
  const auto index = static_cast<std::size_t>(it - specs.begin());
  const std::vector<Vec> values = params.gather(specs);
  auto query = [&](const Vec& theta) {
    std::vector<Vec> perturbed = values;
    perturbed[index] = theta;
    return stage.forward(x, perturbed);
  };
  return estimate(query, values[index], g, cfg, rng, base_output);
}

ZoResult<Mat> zo_jacobian(const Stage& stage, const Vec& x, Params params, const ZoConfig& cfg, Rng&) {
  if (cfg.kind != ZoKind::Coordinate) throw Unsupported("zo_jacobian: only the coordinate kind builds full Jacobians");
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  ZoResult<Mat> result;
  const Vec base = stage.forward(x, params);
  const Index n = x.size();
  result.estimate = Mat(base.size(), n);
  std::vector<Vec> outputs(static_cast<std::size_t>(n));
  std::vector<std::uint64_t> hashes(static_cast<std::size_t>(n));
  parallel_for(static_cast<std::size_t>(n), resolve_threads(cfg), [&](std::size_t i) {
    Vec p = x;
    p(static_cast<Index>(i)) += cfg.mu;
    hashes[i] = hash_values(p);
    outputs[i] = stage.forward(p, params);
  });
  for (Index i = 0; i < n; ++i)
    for (Index r = 0; r < base.size(); ++r)
      result.estimate(r, i) = (outputs[static_cast<std::size_t>(i)](r) - base(r)) / cfg.mu;
  result.log.queries = static_cast<std::size_t>(n) + 1;
  result.log.input_hashes.push_back(hash_values(x));
  result.log.input_hashes.insert(result.log.input_hashes.end(), hashes.begin(), hashes.end());
  result.log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

Mat central_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& x, double step) {
  const Vec y0 = f(x);
  Mat j(y0.size(), x.size());
  for (Index i = 0; i < x.size(); ++i) {
    Vec xp = x, xm = x;
    xp(i) += step;
    xm(i) -= step;
    const Vec d = (f(xp) - f(xm)) / (2.0 * step);
    j.col(i) = d;
  }
  return j;
}

// ---------------------------------------------------------------------------

std::string ZoCheckReport::csv() const {
  std::ostringstream os;
  os << "kind,mu,sigma,k,point_id,rel_err\n";
  os << std::setprecision(17);
  for (const auto& r : rows)
    os << to_string(r.kind) << ',' << r.mu << ',' << r.sigma << ',' << r.k << ',' << r.point_id << ','
       << r.rel_err << '\n';
  return os.str();
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

std::string fmt(double x) {
  std::ostringstream os;
  os << std::setprecision(3) << x;
  return os.str();
}

}  // namespace

ZoCheckReport zo_check(const std::vector<ZoCheckCase>& cases, const std::vector<ZoConfig>& sweep,
                       const ZoCheckOptions& options) {
  ZoCheckReport report;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    const auto& cs = cases[c];
    const Rng case_rng = Rng(options.seed).split(c);
    std::vector<Vec> cotangents;
    std::vector<Vec> oracles;
    for (std::size_t j = 0; j < cs.points.size(); ++j) {
      Rng r = case_rng.split(j);
      cotangents.push_back(gaussian_vec(r, cs.stage->out_width(), 1.0));
      oracles.push_back(matTvec(cs.jacobian(cs.points[j]), cotangents.back()));
    }
    auto point_id = [&](std::size_t j) { return cs.name + ":" + std::to_string(j); };

    for (const auto& cfg : sweep) {
      if (cfg.kind == ZoKind::Coordinate) {
        ZoConfig half = cfg;
        half.mu = cfg.mu / 2.0;
        for (std::size_t j = 0; j < cs.points.size(); ++j) {
          Rng unused(0);
          const auto est = zo_vjp_input(*cs.stage, cs.points[j], {}, cotangents[j], cfg, unused);
          const double err = relative_error(est.estimate, oracles[j]);
          report.rows.push_back({cfg.kind, cfg.mu, cfg.sigma, 1, point_id(j), err});
          if (cs.affine) {
            if (err > options.linear_tol)
              report.failures.push_back("linear exactness: " + point_id(j) + " mu=" + fmt(cfg.mu) +
                                        " rel_err=" + fmt(err));
            continue;
          }
          const auto est_half = zo_vjp_input(*cs.stage, cs.points[j], {}, cotangents[j], half, unused);
          const double err_half = relative_error(est_half.estimate, oracles[j]);
          report.rows.push_back({cfg.kind, half.mu, cfg.sigma, 1, point_id(j), err_half});
          if (err < options.rounding_floor) continue;
          const double ratio = err_half / err;
          if (ratio < options.halving_lo || ratio > options.halving_hi)
            report.failures.push_back("first-order slope: " + point_id(j) + " mu=" + fmt(cfg.mu) +
                                      " err ratio=" + fmt(ratio));
        }
        continue;
      }

      // Gaussian: errors pooled over points and seeds.
      auto run = [&](int k) {
        ZoConfig g = cfg;
        g.k_samples = k;
        std::vector<double> errs;
        for (std::size_t j = 0; j < cs.points.size(); ++j) {
          for (int s = 0; s < options.seeds; ++s) {
            Rng rng = Rng(options.seed, cfg.stream_id).split(c).split(j).split(static_cast<std::uint64_t>(s));
            const auto est = zo_vjp_input(*cs.stage, cs.points[j], {}, cotangents[j], g, rng);
            const double err = relative_error(est.estimate, oracles[j]);
            errs.push_back(err);
            report.rows.push_back({g.kind, g.mu, g.sigma, k, point_id(j) + ":s" + std::to_string(s), err});
          }
        }
        return errs;
      };
      const auto errs = run(cfg.k_samples);
      const double med = median(errs);
      if (cs.affine && cfg.k_samples >= options.unbiased_k_min && med > options.unbiased_tol)
        report.failures.push_back("gaussian unbiasedness: " + cs.name + " K=" + std::to_string(cfg.k_samples) +
                                  " median rel_err=" + fmt(med));
      if (cfg.k_samples < options.k_min_for_trend) {
        report.notes.push_back(cs.name + ": K=" + std::to_string(cfg.k_samples) +
                               " too small for the 1/sqrt(K) trend check; not asserted");
        continue;
      }
      const double shrink = median(run(2 * cfg.k_samples)) / med;
      if (shrink < options.k_shrink_lo || shrink > options.k_shrink_hi)
        report.failures.push_back("1/sqrt(K) trend: " + cs.name + " K=" + std::to_string(cfg.k_samples) + "->" +
                                  std::to_string(2 * cfg.k_samples) + " shrink=" + fmt(shrink));
    }
  }
  return report;
}

std::vector<ZoCheckCase> builtin_check_cases(std::size_t points_per_case, std::uint64_t seed) {
  Rng rng(seed, 0xC4EC);
  auto points = [&](Index n) {
    std::vector<Vec> pts;
    for (std::size_t j = 0; j < points_per_case; ++j) {
      Vec p(n);
      for (Index i = 0; i < n; ++i) p(i) = 3.0 * rng.uniform() - 1.5;
      pts.push_back(p);
    }
    return pts;
  };

  std::vector<ZoCheckCase> cases;

  Mat a2(2, 2);
  a2 << 1, 2, 3, 4;
  cases.push_back({"affine2",
                   std::make_shared<FunctionStage>("affine2", 2, 2, [a2](const Vec& x, Params) { return matvec(a2, x); }),
                   [a2](const Vec&) { return a2; }, points(2), true});

  Mat a6(6, 6);
  for (Index r = 0; r < 6; ++r)
    for (Index c = 0; c < 6; ++c) a6(r, c) = std::cos(1.0 + r * 6 + c) * 2.0;
  cases.push_back({"affine6",
                   std::make_shared<FunctionStage>("affine6", 6, 6, [a6](const Vec& x, Params) { return matvec(a6, x); }),
                   [a6](const Vec&) { return a6; }, points(6), true});

  cases.push_back({"quadratic",
                   std::make_shared<FunctionStage>("quadratic", 2, 2,
                                                   [](const Vec& x, Params) {
                                                     Vec y(2);
                                                     y << x(0) * x(0), x(0) * x(1);
                                                     return y;
                                                   }),
                   [](const Vec& x) {
                     Mat j(2, 2);
                     j << 2 * x(0), 0, x(1), x(0);
                     return j;
                   },
                   points(2), false});

  cases.push_back({"quad_sin",
                   std::make_shared<FunctionStage>("quad_sin", 2, 3,
                                                   [](const Vec& x, Params) {
                                                     Vec y(3);
                                                     y << x(0) * x(0), x(0) * x(1), std::sin(x(1));
                                                     return y;
                                                   }),
                   [](const Vec& x) {
                     Mat j(3, 2);
                     j << 2 * x(0), 0, x(1), x(0), 0, std::cos(x(1));
                     return j;
                   },
                   points(2), false});
  return cases;
}

}  // namespace zobridge
