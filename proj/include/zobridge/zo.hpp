// SPDX-License-Identifier: Apache-2.0
//
// Zeroth-order estimators for vector-Jacobian products through opaque stages.
//
// For a stage G, a point x and a cotangent g, both kinds approximate Jᵀg using
// forward differences around one shared base evaluation G(x):
//
//   coordinate:  v_i = ⟨(G(x + μ e_i) − G(x)) / μ, g⟩                 (n + 1 queries)
//   gaussian:    v   = 1/(K σ²) Σ_k ⟨(G(x + μ d_k) − G(x)) / μ, g⟩ d_k,  d_k ~ N(0, σ² I)
//                                                                     (K + 1 queries)
//
// The same formulas applied to a parameter block instead of x give the
// parameter-side estimates.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "zobridge/linalg.hpp"
#include "zobridge/rng.hpp"
#include "zobridge/stages.hpp"

namespace zobridge {

enum class ZoKind { Coordinate, Gaussian };

std::string to_string(ZoKind kind);
ZoKind parse_zo_kind(const std::string& s);

struct ZoConfig {
  ZoKind kind = ZoKind::Coordinate;
  double mu = 1e-3;
  double sigma = 1.0;       // gaussian only
  int k_samples = 8;        // gaussian only
  std::uint64_t stream_id = 0;
  std::size_t threads = 0;  // 0: default_threads()

  void validate() const;
};

struct ZoQueryLog {
  std::size_t queries = 0;
  std::size_t rejected = 0;        // gaussian samples redrawn after non-finite output
  double wall_seconds = 0.0;
  std::vector<std::uint64_t> input_hashes;  // one per query, in index order
  bool shared_base = false;        // base evaluation supplied by the caller
  bool degenerate_step = false;    // every difference was exactly zero while g ≠ 0

  void merge(const ZoQueryLog& other);
};

template <typename T>
struct ZoResult {
  T estimate;
  ZoQueryLog log;
};

/// Estimate of Jᵀg for J = ∂G/∂x at (x, params).
///
/// When `base_output` is given it must equal stage.forward(x, params); it is
/// reused instead of queried. A zero cotangent returns zeros without queries.
ZoResult<Vec> zo_vjp_input(const Stage& stage, const Vec& x, Params params, const Vec& g, const ZoConfig& cfg,
                           Rng& rng, const Vec* base_output = nullptr);

/// Estimate of the gradient of ⟨G(x; θ), g⟩ with respect to one named block.
/// ContractViolation if the block is frozen or not consumed by the stage.
ZoResult<Vec> zo_vjp_params(const Stage& stage, const Vec& x, const ParamSet& params, const std::string& block,
                            const Vec& g, const ZoConfig& cfg, Rng& rng, const Vec* base_output = nullptr);

/// Full forward-difference Jacobian; column i = (G(x + μ e_i) − G(x)) / μ.
/// Coordinate kind only.
ZoResult<Mat> zo_jacobian(const Stage& stage, const Vec& x, Params params, const ZoConfig& cfg, Rng& rng);

/// Central-difference Jacobian of an arbitrary map. Oracle aid for tests and
/// the check harness, not used by training.
Mat central_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& x, double step);

// ---------------------------------------------------------------------------
// Check harness

struct ZoCheckCase {
  std::string name;
  StagePtr stage;                              // opaque registration
  std::function<Mat(const Vec&)> jacobian;     // analytic oracle
  std::vector<Vec> points;
  bool affine = false;
};

struct ZoCheckRow {
  ZoKind kind;
  double mu;
  double sigma;
  int k;
  std::string point_id;
  double rel_err;
};

struct ZoCheckReport {
  std::vector<ZoCheckRow> rows;
  std::vector<std::string> failures;
  std::vector<std::string> notes;
  bool passed() const { return failures.empty(); }
  /// Columns: kind,mu,sigma,k,point_id,rel_err
  std::string csv() const;
};

struct ZoCheckOptions {
  double linear_tol = 1e-9;
  double halving_lo = 0.3, halving_hi = 0.7;
  double rounding_floor = 1e-7;
  double k_shrink_lo = 0.55, k_shrink_hi = 0.9;
  int k_min_for_trend = 64;
  int seeds = 20;
  double unbiased_tol = 0.05;
  int unbiased_k_min = 10000;
  std::uint64_t seed = 1;
};

/// Runs every config in `sweep` against every case and asserts:
///  - affine cases, coordinate kind: rel_err ≤ linear_tol for every μ;
///  - non-affine cases, coordinate kind: err(μ/2)/err(μ) ∈ [halving_lo, halving_hi]
///    (rows for μ/2 are emitted too) unless err(μ) is already below the rounding floor;
///  - gaussian kind with K ≥ k_min_for_trend: median error over `seeds` seeds at 2K
///    over the median at K lies in [k_shrink_lo, k_shrink_hi]; smaller K is noted, not asserted;
///  - gaussian kind, affine, K ≥ unbiased_k_min: median rel_err ≤ unbiased_tol.
ZoCheckReport zo_check(const std::vector<ZoCheckCase>& cases, const std::vector<ZoConfig>& sweep,
                       const ZoCheckOptions& options = {});

/// Built-in oracles: affine [[1,2],[3,4]], a wider 6×6 affine map, the
/// quadratic (x₁², x₁x₂), and the quadratic/sine map (x₁², x₁x₂, sin x₂).
std::vector<ZoCheckCase> builtin_check_cases(std::size_t points_per_case = 10, std::uint64_t seed = 1);

}  // namespace zobridge
