// SPDX-License-Identifier: Apache-2.0
#include "zobridge/stages.hpp"

#include <cmath>
#include <cstring>
#include <set>

namespace zobridge {

namespace {

bool bit_equal(const Vec& a, const Vec& b) {
  return a.size() == b.size() &&
         (a.size() == 0 || std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0);
}

double activate(Activation act, double x) { return act == Activation::Tanh ? std::tanh(x) : x; }

// Derivative expressed through the activation's output.
double activate_grad(Activation act, double y) { return act == Activation::Tanh ? 1.0 - y * y : 1.0; }

}  // namespace

bool operator==(const ParamBlock& a, const ParamBlock& b) {
  return a.name == b.name && a.frozen == b.frozen && bit_equal(a.values, b.values);
}

void ParamSet::add(ParamBlock block) {
  if (block.name.empty()) throw InvalidArgument("ParamSet: empty block name");
  if (contains(block.name)) throw InvalidArgument("ParamSet: duplicate block '" + block.name + "'");
  blocks_.push_back(std::move(block));
}

bool ParamSet::contains(const std::string& name) const {
  for (const auto& b : blocks_)
    if (b.name == name) return true;
  return false;
}

ParamBlock& ParamSet::at(const std::string& name) {
  for (auto& b : blocks_)
    if (b.name == name) return b;
  throw InvalidArgument("ParamSet: no block '" + name + "'");
}

const ParamBlock& ParamSet::at(const std::string& name) const {
  return const_cast<ParamSet*>(this)->at(name);
}

std::vector<Vec> ParamSet::gather(const std::vector<BlockSpec>& specs) const {
  std::vector<Vec> out;
  out.reserve(specs.size());
  for (const auto& spec : specs) {
    const auto& b = at(spec.name);
    if (b.values.size() != spec.size)
      throw InvalidArgument("block '" + spec.name + "' has " + std::to_string(b.values.size()) +
                            " values, stage expects " + std::to_string(spec.size));
    out.push_back(b.values);
  }
  return out;
}

// ---------------------------------------------------------------------------

void Stage::check_call(const Vec& x, Params params) const {
  if (x.size() != in_width())
    throw InvalidArgument(label() + ": input width " + std::to_string(x.size()) + ", expected " +
                          std::to_string(in_width()));
  const auto specs = param_specs();
  if (params.size() != specs.size())
    throw InvalidArgument(label() + ": expected " + std::to_string(specs.size()) + " parameter blocks, got " +
                          std::to_string(params.size()));
  for (std::size_t i = 0; i < specs.size(); ++i)
    if (params[i].size() != specs[i].size)
      throw InvalidArgument(label() + ": block '" + specs[i].name + "' size mismatch");
}

Vec Stage::forward(const Vec& x, Params params) const {
  check_call(x, params);
  Vec y = do_forward(x, params);
  if (y.size() != out_width()) throw BackendError(label() + ": returned wrong output width");
  if (!all_finite(y)) throw NonFiniteOutput(label() + ": non-finite output");
  return y;
}

Stage::Pullback Stage::vjp(const Vec& x, Params params, const Vec& g) const {
  if (!differentiable())
    throw ContractViolation(label() + " is opaque; route its gradients through the zeroth-order estimators");
  check_call(x, params);
  if (g.size() != out_width()) throw InvalidArgument(label() + ": cotangent width mismatch");
  return do_vjp(x, params, g);
}

Vec Stage::vjp_input(const Vec& x, Params params, const Vec& g) const { return vjp(x, params, g).input; }

std::vector<Vec> Stage::vjp_params(const Vec& x, Params params, const Vec& g) const {
  return vjp(x, params, g).params;
}

Stage::Pullback Stage::do_vjp(const Vec&, Params, const Vec&) const {
  throw ContractViolation(label() + " does not provide a VJP");
}

// ---------------------------------------------------------------------------

std::string ElementwiseStage::label() const { return act_ == Activation::Tanh ? "tanh" : "identity"; }

Vec ElementwiseStage::do_forward(const Vec& x, Params) const {
  Vec y(x.size());
  for (Index i = 0; i < x.size(); ++i) y(i) = activate(act_, x(i));
  return y;
}

Stage::Pullback ElementwiseStage::do_vjp(const Vec& x, Params, const Vec& g) const {
  Vec dx(x.size());
  for (Index i = 0; i < x.size(); ++i) dx(i) = g(i) * activate_grad(act_, activate(act_, x(i)));
  return {dx, {}};
}

// ---------------------------------------------------------------------------

Mlp::Mlp(std::string block, std::vector<Index> widths, std::vector<Activation> activations)
    : block_(std::move(block)), widths_(std::move(widths)), activations_(std::move(activations)) {
  if (widths_.size() < 2) throw InvalidArgument("Mlp: need at least input and output widths");
  if (activations_.size() != widths_.size() - 1) throw InvalidArgument("Mlp: one activation per layer");
  for (Index w : widths_)
    if (w < 1) throw InvalidArgument("Mlp: widths must be >= 1");
}

Index Mlp::param_count() const {
  Index n = 0;
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) n += widths_[l + 1] * (widths_[l] + 1);
  return n;
}

Index Mlp::weight_offset(std::size_t l) const {
  Index off = 0;
  for (std::size_t k = 0; k < l; ++k) off += widths_[k + 1] * (widths_[k] + 1);
  return off;
}

Vec Mlp::init(Rng& rng) const {
  Vec theta = Vec::Zero(param_count());
  for (std::size_t l = 0; l < layers(); ++l) {
    const Index in = widths_[l], out = widths_[l + 1];
    const double sd = 1.0 / std::sqrt(static_cast<double>(in));
    const Index off = weight_offset(l);
    for (Index i = 0; i < out * in; ++i) theta(off + i) = sd * rng.normal();
  }
  return theta;
}

namespace {
using RowMajorMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
}

Vec Mlp::do_forward(const Vec& x, Params params) const {
  const Vec& theta = params[0];
  Vec a = x;
  for (std::size_t l = 0; l < layers(); ++l) {
    const Index in = widths_[l], out = widths_[l + 1];
    const Index off = weight_offset(l);
    RowMajorMap w(theta.data() + off, out, in);
    Vec z = matvec(w, a);
    for (Index r = 0; r < out; ++r) z(r) = activate(activations_[l], z(r) + theta(off + out * in + r));
    a = std::move(z);
  }
  return a;
}

Stage::Pullback Mlp::do_vjp(const Vec& x, Params params, const Vec& g) const {
  const Vec& theta = params[0];
  std::vector<Vec> acts{x};
  for (std::size_t l = 0; l < layers(); ++l) {
    const Index in = widths_[l], out = widths_[l + 1];
    const Index off = weight_offset(l);
    RowMajorMap w(theta.data() + off, out, in);
    Vec z = matvec(w, acts.back());
    for (Index r = 0; r < out; ++r) z(r) = activate(activations_[l], z(r) + theta(off + out * in + r));
    acts.push_back(std::move(z));
  }

  Vec dtheta = Vec::Zero(theta.size());
  Vec delta = g;
  for (std::size_t l = layers(); l-- > 0;) {
    const Index in = widths_[l], out = widths_[l + 1];
    const Index off = weight_offset(l);
    const Vec& y = acts[l + 1];
    const Vec& a = acts[l];
    Vec dz(out);
    for (Index r = 0; r < out; ++r) dz(r) = delta(r) * activate_grad(activations_[l], y(r));
    for (Index r = 0; r < out; ++r) {
      for (Index c = 0; c < in; ++c) dtheta(off + r * in + c) = dz(r) * a(c);
      dtheta(off + out * in + r) = dz(r);
    }
    RowMajorMap w(theta.data() + off, out, in);
    delta = matTvec(w, dz);
  }
  return {delta, {dtheta}};
}

// ---------------------------------------------------------------------------

Vec ThresholdStage::do_forward(const Vec& x, Params) const {
  Vec y(x.size());
  for (Index i = 0; i < x.size(); ++i) y(i) = x(i) > threshold_ ? 1.0 : 0.0;
  return y;
}

FunctionStage::FunctionStage(std::string label, Index in, Index out, Fn fn, std::vector<BlockSpec> specs,
                             Space in_space, Space out_space)
    : label_(std::move(label)), in_(in), out_(out), fn_(std::move(fn)), specs_(std::move(specs)),
      in_space_(in_space), out_space_(out_space) {
  if (in < 1 || out < 1) throw InvalidArgument("FunctionStage: widths must be >= 1");
  if (!fn_) throw InvalidArgument("FunctionStage: empty function");
}

AnalyticStage::AnalyticStage(std::string label, Index in, Index out, Fn fn, JacFn jac)
    : label_(std::move(label)), in_(in), out_(out), fn_(std::move(fn)), jac_(std::move(jac)) {
  if (in < 1 || out < 1) throw InvalidArgument("AnalyticStage: widths must be >= 1");
}

Stage::Pullback AnalyticStage::do_vjp(const Vec& x, Params, const Vec& g) const {
  const Mat j = jac_(x);
  if (j.rows() != out_ || j.cols() != in_) throw InvalidArgument(label_ + ": Jacobian has wrong shape");
  return {matTvec(j, g), {}};
}

// ---------------------------------------------------------------------------

CompositeStage::CompositeStage(std::vector<StagePtr> inner, bool opaque, std::string label)
    : inner_(std::move(inner)), opaque_(opaque), label_(std::move(label)) {
  if (inner_.empty()) throw InvalidArgument("CompositeStage: no members");
  std::set<std::string> names;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < inner_.size(); ++i) {
    if (!inner_[i]) throw InvalidArgument("CompositeStage: null member");
    if (i > 0 && inner_[i - 1]->out_width() != inner_[i]->in_width())
      throw InvalidArgument(label_ + ": width mismatch between '" + inner_[i - 1]->label() + "' (out " +
                            std::to_string(inner_[i - 1]->out_width()) + ") and '" + inner_[i]->label() +
                            "' (in " + std::to_string(inner_[i]->in_width()) + ")");
    block_offsets_.push_back(offset);
    for (const auto& spec : inner_[i]->param_specs()) {
      if (!names.insert(spec.name).second)
        throw InvalidArgument(label_ + ": block '" + spec.name + "' used by two members");
      ++offset;
    }
  }
  block_offsets_.push_back(offset);
}

bool CompositeStage::differentiable() const {
  if (opaque_) return false;
  for (const auto& s : inner_)
    if (!s->differentiable()) return false;
  return true;
}

std::vector<BlockSpec> CompositeStage::param_specs() const {
  std::vector<BlockSpec> specs;
  for (const auto& s : inner_)
    for (auto& spec : s->param_specs()) specs.push_back(std::move(spec));
  return specs;
}

Vec CompositeStage::do_forward(const Vec& x, Params params) const {
  Vec a = x;
  for (std::size_t i = 0; i < inner_.size(); ++i)
    a = inner_[i]->forward(a, params.subspan(block_offsets_[i], block_offsets_[i + 1] - block_offsets_[i]));
  return a;
}

Stage::Pullback CompositeStage::do_vjp(const Vec& x, Params params, const Vec& g) const {
  auto member_params = [&](std::size_t i) {
    return params.subspan(block_offsets_[i], block_offsets_[i + 1] - block_offsets_[i]);
  };
  std::vector<Vec> inputs{x};
  for (std::size_t i = 0; i + 1 < inner_.size(); ++i) inputs.push_back(inner_[i]->forward(inputs.back(), member_params(i)));

  Pullback out;
  out.params.resize(params.size());
  Vec cot = g;
  for (std::size_t i = inner_.size(); i-- > 0;) {
    auto pb = inner_[i]->vjp(inputs[i], member_params(i), cot);
    for (std::size_t k = 0; k < pb.params.size(); ++k) out.params[block_offsets_[i] + k] = std::move(pb.params[k]);
    cot = std::move(pb.input);
  }
  out.input = std::move(cot);
  return out;
}

std::shared_ptr<const CompositeStage> make_reparameterized_middle(StagePtr decoder, StagePtr featurizer,
                                                                  StagePtr predictor_front) {
  if (!decoder || !featurizer || !predictor_front) throw InvalidArgument("reparameterized middle: null stage");
  if (featurizer->output_space() != Space::Continuous)
    throw InvalidArgument("reparameterized middle: featurizer output must be continuous");
  if (!predictor_front->differentiable())
    throw InvalidArgument("reparameterized middle: predictor front must be differentiable");
  return std::make_shared<CompositeStage>(std::vector<StagePtr>{std::move(decoder), std::move(featurizer),
                                                                std::move(predictor_front)},
                                          /*opaque=*/true, "middle");
}

}  // namespace zobridge
