// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "zobridge/pipeline.hpp"

namespace zobridge {

enum class OptimizerKind { Sgd, Adam };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& s);

/// Per-block rescaling: a block whose norm exceeds clip_norm is scaled to
/// norm clip_norm; other blocks are untouched.
GradientBundle clip(GradientBundle g, double clip_norm);

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Applies gradient steps to unfrozen blocks of a ParamSet. Moment state is
/// kept per block name.
class Optimizer {
 public:
  using LearningRate = std::function<double(const std::string& block)>;

  explicit Optimizer(OptimizerKind kind, AdamSettings adam = {}) : kind_(kind), adam_(adam) {}

  /// Returns the per-block update norms that were applied (0 for frozen blocks).
  std::vector<double> step(ParamSet& params, const GradientBundle& grads, const LearningRate& lr);

  OptimizerKind kind() const { return kind_; }

 private:
  struct Moments {
    std::string name;
    Vec m, v;
    long t = 0;
  };
  Moments& moments_for(const std::string& name, Index size);

  OptimizerKind kind_;
  AdamSettings adam_;
  std::vector<Moments> state_;
};

}  // namespace zobridge
