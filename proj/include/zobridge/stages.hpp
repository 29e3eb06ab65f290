// SPDX-License-Identifier: Apache-2.0
//
// Pipeline stages. A stage maps a real vector to a real vector given zero or
// more parameter blocks. Differentiable stages also provide exact reverse-mode
// products (VJPs); opaque stages can only be queried forward and are bridged
// by the zeroth-order estimators in zo.hpp.
#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "zobridge/linalg.hpp"
#include "zobridge/rng.hpp"

namespace zobridge {

/// Whether values crossing a stage boundary live in a continuous vector space
/// or are encodings of discrete objects (bitstrings, graphs, ...).
enum class Space { Continuous, Discrete };

enum class Activation { Identity, Tanh };

struct BlockSpec {
  std::string name;
  Index size = 0;
};

struct ParamBlock {
  std::string name;
  Vec values;
  bool frozen = false;
};

/// Bit-exact comparison of name, flag and values.
bool operator==(const ParamBlock& a, const ParamBlock& b);

/// Ordered collection of uniquely named parameter blocks.
class ParamSet {
 public:
  void add(ParamBlock block);
  bool contains(const std::string& name) const;
  ParamBlock& at(const std::string& name);
  const ParamBlock& at(const std::string& name) const;
  std::vector<ParamBlock>& blocks() { return blocks_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }

  /// Values for `specs`, in order. Throws on missing names or size mismatch.
  std::vector<Vec> gather(const std::vector<BlockSpec>& specs) const;

  friend bool operator==(const ParamSet& a, const ParamSet& b) { return a.blocks_ == b.blocks_; }

 private:
  std::vector<ParamBlock> blocks_;
};

using Params = std::span<const Vec>;

class Stage {
 public:
  struct Pullback {
    Vec input;
    std::vector<Vec> params;  // one entry per param_specs() block
  };

  virtual ~Stage() = default;

  virtual std::string label() const = 0;
  virtual Index in_width() const = 0;
  virtual Index out_width() const = 0;
  virtual bool differentiable() const = 0;
  virtual Space input_space() const { return Space::Continuous; }
  virtual Space output_space() const { return Space::Continuous; }
  virtual std::vector<BlockSpec> param_specs() const { return {}; }

  /// Checks widths, evaluates, and rejects non-finite output with BackendError.
  Vec forward(const Vec& x, Params params = {}) const;

  /// Jᵀg with J the Jacobian of forward in x. ContractViolation on opaque stages.
  Vec vjp_input(const Vec& x, Params params, const Vec& g) const;
  /// Per-block gradients of ⟨forward(x; θ), g⟩ in θ.
  std::vector<Vec> vjp_params(const Vec& x, Params params, const Vec& g) const;
  Pullback vjp(const Vec& x, Params params, const Vec& g) const;

 protected:
  virtual Vec do_forward(const Vec& x, Params params) const = 0;
  virtual Pullback do_vjp(const Vec& x, Params params, const Vec& g) const;

 private:
  void check_call(const Vec& x, Params params) const;
};

using StagePtr = std::shared_ptr<const Stage>;

class IdentityStage final : public Stage {
 public:
  explicit IdentityStage(Index width) : width_(width) {}
  std::string label() const override { return "identity"; }
  Index in_width() const override { return width_; }
  Index out_width() const override { return width_; }
  bool differentiable() const override { return true; }

 protected:
  Vec do_forward(const Vec& x, Params) const override { return x; }
  Pullback do_vjp(const Vec&, Params, const Vec& g) const override { return {g, {}}; }

 private:
  Index width_;
};

/// Parameter-free elementwise activation.
class ElementwiseStage final : public Stage {
 public:
  ElementwiseStage(Index width, Activation act) : width_(width), act_(act) {}
  std::string label() const override;
  Index in_width() const override { return width_; }
  Index out_width() const override { return width_; }
  bool differentiable() const override { return true; }

 protected:
  Vec do_forward(const Vec& x, Params) const override;
  Pullback do_vjp(const Vec& x, Params, const Vec& g) const override;

 private:
  Index width_;
  Activation act_;
};

/// Fully connected network with one flat parameter block.
///
/// Block layout, layer by layer: weight matrix (out × in, row-major) then bias.
class Mlp final : public Stage {
 public:
  Mlp(std::string block, std::vector<Index> widths, std::vector<Activation> activations);

  std::string label() const override { return "mlp(" + block_ + ")"; }
  Index in_width() const override { return widths_.front(); }
  Index out_width() const override { return widths_.back(); }
  bool differentiable() const override { return true; }
  std::vector<BlockSpec> param_specs() const override { return {{block_, param_count()}}; }

  Index param_count() const;
  std::size_t layers() const { return activations_.size(); }
  const std::vector<Index>& widths() const { return widths_; }
  /// Offset of layer l's weight matrix in the flat block; its bias follows it.
  Index weight_offset(std::size_t l) const;

  /// Weights ~ Normal(0, 1/fan_in), biases 0.
  Vec init(Rng& rng) const;

 protected:
  Vec do_forward(const Vec& x, Params params) const override;
  Pullback do_vjp(const Vec& x, Params params, const Vec& g) const override;

 private:
  std::string block_;
  std::vector<Index> widths_;
  std::vector<Activation> activations_;
};

/// Hard threshold to {0, 1}. Not differentiable; only meaningful inside an
/// opaque composite.
class ThresholdStage final : public Stage {
 public:
  explicit ThresholdStage(Index width, double threshold = 0.5) : width_(width), threshold_(threshold) {}
  std::string label() const override { return "threshold"; }
  Index in_width() const override { return width_; }
  Index out_width() const override { return width_; }
  bool differentiable() const override { return false; }
  Space output_space() const override { return Space::Discrete; }

 protected:
  Vec do_forward(const Vec& x, Params) const override;

 private:
  Index width_;
  double threshold_;
};

/// In-process black box: forward by query only.
class FunctionStage final : public Stage {
 public:
  using Fn = std::function<Vec(const Vec&, Params)>;

  FunctionStage(std::string label, Index in, Index out, Fn fn, std::vector<BlockSpec> specs = {},
                Space in_space = Space::Continuous, Space out_space = Space::Continuous);

  std::string label() const override { return label_; }
  Index in_width() const override { return in_; }
  Index out_width() const override { return out_; }
  bool differentiable() const override { return false; }
  Space input_space() const override { return in_space_; }
  Space output_space() const override { return out_space_; }
  std::vector<BlockSpec> param_specs() const override { return specs_; }

 protected:
  Vec do_forward(const Vec& x, Params params) const override { return fn_(x, params); }

 private:
  std::string label_;
  Index in_, out_;
  Fn fn_;
  std::vector<BlockSpec> specs_;
  Space in_space_, out_space_;
};

/// Parameter-free map with a known Jacobian. Used for oracle registrations of
/// functions that are otherwise treated as black boxes.
class AnalyticStage final : public Stage {
 public:
  using Fn = std::function<Vec(const Vec&)>;
  using JacFn = std::function<Mat(const Vec&)>;

  AnalyticStage(std::string label, Index in, Index out, Fn fn, JacFn jac);

  std::string label() const override { return label_; }
  Index in_width() const override { return in_; }
  Index out_width() const override { return out_; }
  bool differentiable() const override { return true; }

 protected:
  Vec do_forward(const Vec& x, Params) const override { return fn_(x); }
  Pullback do_vjp(const Vec& x, Params, const Vec& g) const override;

 private:
  std::string label_;
  Index in_, out_;
  Fn fn_;
  JacFn jac_;
};

/// Ordered chain of stages. When flagged opaque it exposes forward only,
/// whatever its members can do; otherwise it is differentiable iff every
/// member is.
class CompositeStage final : public Stage {
 public:
  CompositeStage(std::vector<StagePtr> inner, bool opaque, std::string label = "composite");

  std::string label() const override { return label_; }
  Index in_width() const override { return inner_.front()->in_width(); }
  Index out_width() const override { return inner_.back()->out_width(); }
  bool differentiable() const override;
  Space input_space() const override { return inner_.front()->input_space(); }
  Space output_space() const override { return inner_.back()->output_space(); }
  std::vector<BlockSpec> param_specs() const override;

  bool opaque() const { return opaque_; }
  const std::vector<StagePtr>& inner() const { return inner_; }

 protected:
  Vec do_forward(const Vec& x, Params params) const override;
  Pullback do_vjp(const Vec& x, Params params, const Vec& g) const override;

 private:
  std::vector<StagePtr> inner_;
  std::vector<std::size_t> block_offsets_;  // first param index per member, plus end
  bool opaque_;
  std::string label_;
};

/// Fuses decoder, black-box featurizer and the predictor's front layers into
/// one opaque block whose input is the latent code and whose output is the
/// predictor readout, so that both of its boundaries are continuous.
std::shared_ptr<const CompositeStage> make_reparameterized_middle(StagePtr decoder, StagePtr featurizer,
                                                                  StagePtr predictor_front);

}  // namespace zobridge
