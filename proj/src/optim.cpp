// SPDX-License-Identifier: Apache-2.0
#include "zobridge/optim.hpp"

#include <cmath>

namespace zobridge {

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::Sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw InvalidArgument("unknown optimizer '" + s + "' (expected sgd or adam)");
}

GradientBundle clip(GradientBundle g, double clip_norm) {
  if (!(clip_norm > 0.0)) throw InvalidArgument("clip_norm must be > 0");
  for (auto& block : g.grads) {
    const double n = norm2(block);
    if (n > clip_norm) block *= clip_norm / n;
  }
  return g;
}

Optimizer::Moments& Optimizer::moments_for(const std::string& name, Index size) {
  for (auto& m : state_)
    if (m.name == name) return m;
  state_.push_back({name, Vec::Zero(size), Vec::Zero(size), 0});
  return state_.back();
}

std::vector<double> Optimizer::step(ParamSet& params, const GradientBundle& grads, const LearningRate& lr) {
  std::vector<double> applied;
  for (auto& block : params.blocks()) {
    if (block.frozen) {
      applied.push_back(0.0);
      continue;
    }
    const Vec& g = grads.at(block.name);
    if (g.size() != block.values.size()) throw InvalidArgument("optimizer: gradient size mismatch for " + block.name);
    const double rate = lr(block.name);
    Vec update(g.size());
    if (kind_ == OptimizerKind::Sgd) {
      for (Index i = 0; i < g.size(); ++i) update(i) = -rate * g(i);
    } else {
      Moments& st = moments_for(block.name, g.size());
      ++st.t;
      const double c1 = 1.0 - std::pow(adam_.beta1, static_cast<double>(st.t));
      const double c2 = 1.0 - std::pow(adam_.beta2, static_cast<double>(st.t));
      for (Index i = 0; i < g.size(); ++i) {
        st.m(i) = adam_.beta1 * st.m(i) + (1.0 - adam_.beta1) * g(i);
        st.v(i) = adam_.beta2 * st.v(i) + (1.0 - adam_.beta2) * g(i) * g(i);
        update(i) = -rate * (st.m(i) / c1) / (std::sqrt(st.v(i) / c2) + adam_.eps);
      }
    }
    axpy(1.0, update, block.values);
    applied.push_back(norm2(update));
  }
  return applied;
}

}  // namespace zobridge
