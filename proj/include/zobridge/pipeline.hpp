// SPDX-License-Identifier: Apache-2.0
//
// Three-part prediction pipeline  ŷ = tail(middle(encoder(x)))  with an
// optional reconstruction path  x̂ = decoder(encoder(x))  used as a regularizer.
//
// The joint objective on a batch of N samples is
//   L = (1/N) Σ ‖ŷ_i − y_i‖²  +  λ · (1/N) Σ (1/d) ‖x̂_i − x_i‖².
//
// backward() differentiates it exactly through the encoder, tail and
// reconstruction path, and bridges the opaque middle with zo estimators.
#pragma once

#include <span>
#include <string>
#include <vector>

#include "zobridge/stages.hpp"
#include "zobridge/zo.hpp"

namespace zobridge {

struct Example {
  Vec x;
  Vec y;
};

struct PipelineState {
  StagePtr encoder;        // latent code from the object encoding
  StagePtr middle;         // opaque block between latent code and predictor readout
  StagePtr tail;           // predictor head after the readout
  StagePtr recon_decoder;  // optional; differentiable decoder for the reconstruction term
  StagePtr discretizer;    // optional; maps decoder output back to object encodings
  ParamSet params;

  /// Width chaining and block availability. Throws InvalidArgument.
  void validate() const;

  std::vector<Vec> params_for(const Stage& s) const { return params.gather(s.param_specs()); }
};

struct LossSpec {
  double lambda = 1.0;
};

struct Prediction {
  Vec latent;
  Vec readout;  // middle output
  Vec y_hat;
};

struct BatchLoss {
  double total = 0.0;
  double prediction = 0.0;
  double reconstruction = 0.0;
};

struct GradientBundle {
  std::vector<std::string> names;  // same order as PipelineState::params
  std::vector<Vec> grads;
  ZoQueryLog log;
  BatchLoss loss;

  Vec& at(const std::string& name);
  const Vec& at(const std::string& name) const;
  static GradientBundle zeros_like(const ParamSet& params);
  void add(const GradientBundle& other, double scale = 1.0);
  /// Euclidean norm over all blocks.
  double norm() const;
  Vec flatten() const;
};

Prediction forward_predict(const PipelineState& ps, const Vec& x);

/// Decoder output for x, before discretization. Requires a recon_decoder.
Vec reconstruct(const PipelineState& ps, const Vec& x);

BatchLoss batch_loss(const PipelineState& ps, std::span<const Example> batch, const LossSpec& spec);

/// Zeroth-order settings for the two estimators: the latent-side one (μ₁)
/// and the parameter-side one (μ₂).
struct BridgeConfig {
  ZoConfig latent;
  ZoConfig params;

  static BridgeConfig uniform(const ZoConfig& cfg) { return {cfg, cfg}; }
};

/// Hybrid gradient of the joint objective. Exact wherever stages are
/// differentiable; if the middle is opaque its VJPs come from zo estimators
/// that share the base evaluation middle(z). Frozen blocks get zero vectors.
/// Advances `rng` by one draw; sample i in the batch uses stream rng.split(i).
GradientBundle backward(const PipelineState& ps, std::span<const Example> batch, const LossSpec& spec,
                        const BridgeConfig& zo, Rng& rng);
GradientBundle backward(const PipelineState& ps, std::span<const Example> batch, const LossSpec& spec,
                        const ZoConfig& zo, Rng& rng);

/// Gradient of the prediction term alone (λ = 0 semantics).
GradientBundle prediction_gradient(const PipelineState& ps, std::span<const Example> batch, const BridgeConfig& zo,
                                   Rng& rng);
/// Exact gradient of the unweighted reconstruction term alone.
GradientBundle reconstruction_gradient(const PipelineState& ps, std::span<const Example> batch);

struct BoundaryReport {
  bool ok = true;
  std::vector<std::string> diagnostics;
};

/// Checks that gradients can cross every stage boundary: every stage that is
/// not differentiable must see continuous vectors on both sides, and no
/// boundary between consecutive stages may carry a discrete encoding.
BoundaryReport validate_boundaries(std::span<const StagePtr> stages);
BoundaryReport validate_boundaries(const PipelineState& ps);

}  // namespace zobridge
