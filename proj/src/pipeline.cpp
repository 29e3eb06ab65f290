// SPDX-License-Identifier: Apache-2.0
#include "zobridge/pipeline.hpp"

#include <algorithm>

namespace zobridge {

namespace {

constexpr const char* kReparamHint =
    "move the discretization inside the opaque block (fuse decoder, black box and the predictor's front "
    "layers) so the block maps continuous vectors to continuous vectors";

bool frozen(const PipelineState& ps, const std::string& name) { return ps.params.at(name).frozen; }

bool is_zero(const Vec& v) {
  for (Index i = 0; i < v.size(); ++i)
    if (v(i) != 0.0) return false;
  return true;
}

/// Adds per-block stage gradients into the bundle, skipping frozen blocks.
void accumulate(GradientBundle& b, const PipelineState& ps, const Stage& s, const std::vector<Vec>& grads) {
  const auto specs = s.param_specs();
  for (std::size_t k = 0; k < specs.size(); ++k) {
    if (frozen(ps, specs[k].name)) continue;
    Vec& dst = b.at(specs[k].name);
    axpy(1.0, grads[k], dst);
  }
}

void require_batch(std::span<const Example> batch) {
  if (batch.empty()) throw InvalidArgument("empty batch");
}

}  // namespace

void PipelineState::validate() const {
  if (!encoder || !middle || !tail) throw InvalidArgument("pipeline: encoder, middle and tail are required");
  if (encoder->out_width() != middle->in_width())
    throw InvalidArgument("pipeline: encoder output width != middle input width");
  if (middle->out_width() != tail->in_width()) throw InvalidArgument("pipeline: middle output width != tail input width");
  if (!encoder->differentiable() || !tail->differentiable())
    throw InvalidArgument("pipeline: encoder and tail must be differentiable");
  if (recon_decoder) {
    if (!recon_decoder->differentiable()) throw InvalidArgument("pipeline: reconstruction decoder must be differentiable");
    if (recon_decoder->in_width() != encoder->out_width() || recon_decoder->out_width() != encoder->in_width())
      throw InvalidArgument("pipeline: reconstruction decoder must map latent width to input width");
  }
  if (discretizer && recon_decoder && discretizer->in_width() != recon_decoder->out_width())
    throw InvalidArgument("pipeline: discretizer width mismatch");
  for (const StagePtr& s : {encoder, middle, tail, recon_decoder})
    if (s) (void)params_for(*s);
}

// ---------------------------------------------------------------------------

Vec& GradientBundle::at(const std::string& name) {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return grads[i];
  throw InvalidArgument("GradientBundle: no block '" + name + "'");
}

const Vec& GradientBundle::at(const std::string& name) const { return const_cast<GradientBundle*>(this)->at(name); }

GradientBundle GradientBundle::zeros_like(const ParamSet& params) {
  GradientBundle b;
  for (const auto& blk : params.blocks()) {
    b.names.push_back(blk.name);
    b.grads.push_back(Vec::Zero(blk.values.size()));
  }
  return b;
}

void GradientBundle::add(const GradientBundle& other, double scale) {
  if (other.names != names) throw InvalidArgument("GradientBundle: block layout mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i) axpy(scale, other.grads[i], grads[i]);
  log.merge(other.log);
}

double GradientBundle::norm() const {
  double acc = 0.0;
  for (const auto& g : grads) acc += dot(g, g);
  return std::sqrt(acc);
}

Vec GradientBundle::flatten() const {
  Index n = 0;
  for (const auto& g : grads) n += g.size();
  Vec out(n);
  Index off = 0;
  for (const auto& g : grads) {
    out.segment(off, g.size()) = g;
    off += g.size();
  }
  return out;
}

// ---------------------------------------------------------------------------

Prediction forward_predict(const PipelineState& ps, const Vec& x) {
  Prediction p;
  p.latent = ps.encoder->forward(x, ps.params_for(*ps.encoder));
  p.readout = ps.middle->forward(p.latent, ps.params_for(*ps.middle));
  p.y_hat = ps.tail->forward(p.readout, ps.params_for(*ps.tail));
  return p;
}

Vec reconstruct(const PipelineState& ps, const Vec& x) {
  if (!ps.recon_decoder) throw InvalidArgument("pipeline has no reconstruction decoder");
  const Vec z = ps.encoder->forward(x, ps.params_for(*ps.encoder));
  return ps.recon_decoder->forward(z, ps.params_for(*ps.recon_decoder));
}

BatchLoss batch_loss(const PipelineState& ps, std::span<const Example> batch, const LossSpec& spec) {
  require_batch(batch);
  if (!(spec.lambda >= 0.0) || !std::isfinite(spec.lambda)) throw InvalidArgument("lambda must be finite and >= 0");
  BatchLoss loss;
  const double n = static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    const Vec r = forward_predict(ps, ex.x).y_hat - ex.y;
    loss.prediction += dot(r, r) / n;
    if (ps.recon_decoder && spec.lambda > 0.0) {
      const Vec e = reconstruct(ps, ex.x) - ex.x;
      loss.reconstruction += dot(e, e) / (static_cast<double>(e.size()) * n);
    }
  }
  loss.total = loss.prediction + spec.lambda * loss.reconstruction;
  return loss;
}

GradientBundle prediction_gradient(const PipelineState& ps, std::span<const Example> batch, const BridgeConfig& zo,
                                   Rng& rng) {
  require_batch(batch);
  GradientBundle bundle = GradientBundle::zeros_like(ps.params);
  const auto enc_params = ps.params_for(*ps.encoder);
  const auto mid_params = ps.params_for(*ps.middle);
  const auto tail_params = ps.params_for(*ps.tail);
  const auto mid_specs = ps.middle->param_specs();
  const double n = static_cast<double>(batch.size());
  const auto enc_specs = ps.encoder->param_specs();
  const bool encoder_trainable =
      std::any_of(enc_specs.begin(), enc_specs.end(), [&](const BlockSpec& s) { return !frozen(ps, s.name); });
  const bool middle_trainable =
      std::any_of(mid_specs.begin(), mid_specs.end(), [&](const BlockSpec& s) { return !frozen(ps, s.name); });

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Example& ex = batch[i];
    const Prediction p = forward_predict(ps, ex.x);
    const Vec residual = p.y_hat - ex.y;
    bundle.loss.prediction += dot(residual, residual) / n;
    const Vec g_out = (2.0 / n) * residual;

    const auto tail_pb = ps.tail->vjp(p.readout, tail_params, g_out);
    accumulate(bundle, ps, *ps.tail, tail_pb.params);
    const Vec& g_readout = tail_pb.input;
    if (is_zero(g_readout)) continue;

    Vec g_latent = Vec::Zero(p.latent.size());
    if (ps.middle->differentiable()) {
      const auto mid_pb = ps.middle->vjp(p.latent, mid_params, g_readout);
      accumulate(bundle, ps, *ps.middle, mid_pb.params);
      g_latent = mid_pb.input;
    } else if (encoder_trainable || middle_trainable) {
      // The readout from the forward pass is the shared base query.
      const Rng sample_rng = rng.split(i);
      ZoQueryLog log;
      log.queries = 1;
      log.input_hashes.push_back(hash_values(p.latent));
      if (encoder_trainable) {
        Rng r = sample_rng.split(0);
        auto est = zo_vjp_input(*ps.middle, p.latent, mid_params, g_readout, zo.latent, r, &p.readout);
        g_latent = std::move(est.estimate);
        log.merge(est.log);
      }
      for (std::size_t k = 0; k < mid_specs.size(); ++k) {
        if (frozen(ps, mid_specs[k].name)) continue;
        Rng r = sample_rng.split(1 + k);
        auto est = zo_vjp_params(*ps.middle, p.latent, ps.params, mid_specs[k].name, g_readout, zo.params, r,
                                 &p.readout);
        axpy(1.0, est.estimate, bundle.at(mid_specs[k].name));
        log.merge(est.log);
      }
      log.shared_base = true;
      bundle.log.merge(log);
    }

    if (encoder_trainable) {
      const auto enc_pb = ps.encoder->vjp(ex.x, enc_params, g_latent);
      accumulate(bundle, ps, *ps.encoder, enc_pb.params);
    }
  }
  rng.next_u64();
  bundle.loss.total = bundle.loss.prediction;
  return bundle;
}

GradientBundle reconstruction_gradient(const PipelineState& ps, std::span<const Example> batch) {
  require_batch(batch);
  GradientBundle bundle = GradientBundle::zeros_like(ps.params);
  if (!ps.recon_decoder) return bundle;
  const auto enc_params = ps.params_for(*ps.encoder);
  const auto dec_params = ps.params_for(*ps.recon_decoder);
  const double n = static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    const Vec z = ps.encoder->forward(ex.x, enc_params);
    const Vec r = ps.recon_decoder->forward(z, dec_params);
    const Vec e = r - ex.x;
    const double d = static_cast<double>(e.size());
    bundle.loss.reconstruction += dot(e, e) / (d * n);
    const Vec g = (2.0 / (d * n)) * e;
    const auto dec_pb = ps.recon_decoder->vjp(z, dec_params, g);
    accumulate(bundle, ps, *ps.recon_decoder, dec_pb.params);
    const auto enc_pb = ps.encoder->vjp(ex.x, enc_params, dec_pb.input);
    accumulate(bundle, ps, *ps.encoder, enc_pb.params);
  }
  bundle.loss.total = bundle.loss.reconstruction;
  return bundle;
}

GradientBundle backward(const PipelineState& ps, std::span<const Example> batch, const LossSpec& spec,
                        const BridgeConfig& zo, Rng& rng) {
  if (!(spec.lambda >= 0.0) || !std::isfinite(spec.lambda)) throw InvalidArgument("lambda must be finite and >= 0");
  GradientBundle bundle = prediction_gradient(ps, batch, zo, rng);
  if (spec.lambda > 0.0 && ps.recon_decoder) {
    const GradientBundle recon = reconstruction_gradient(ps, batch);
    bundle.add(recon, spec.lambda);
    bundle.loss.reconstruction = recon.loss.reconstruction;
  }
  bundle.loss.total = bundle.loss.prediction + spec.lambda * bundle.loss.reconstruction;
  return bundle;
}

GradientBundle backward(const PipelineState& ps, std::span<const Example> batch, const LossSpec& spec,
                        const ZoConfig& zo, Rng& rng) {
  return backward(ps, batch, spec, BridgeConfig::uniform(zo), rng);
}

// ---------------------------------------------------------------------------

BoundaryReport validate_boundaries(std::span<const StagePtr> stages) {
  BoundaryReport report;
  auto reject = [&](std::string msg) {
    report.ok = false;
    report.diagnostics.push_back(std::move(msg));
  };
  if (stages.empty()) {
    reject("empty pipeline: nothing to train");
    return report;
  }
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (!stages[i]) {
      reject("stage " + std::to_string(i) + " is null");
      return report;
    }
  }
  for (std::size_t i = 0; i + 1 < stages.size(); ++i) {
    const Stage& a = *stages[i];
    const Stage& b = *stages[i + 1];
    const std::string where = "boundary " + std::to_string(i) + "->" + std::to_string(i + 1) + " ('" + a.label() +
                              "' -> '" + b.label() + "')";
    if (a.out_width() != b.in_width())
      reject(where + ": width " + std::to_string(a.out_width()) + " vs " + std::to_string(b.in_width()));
    if (a.output_space() == Space::Discrete || b.input_space() == Space::Discrete) {
      const bool opaque_side = !a.differentiable() || !b.differentiable();
      reject(where + " carries a discrete encoding" +
             (opaque_side ? "; a finite-difference perturbation of the opaque stage is undefined there"
                          : "; no gradient exists across it") +
             ". Reparameterize: " + kReparamHint);
    }
  }
  return report;
}

BoundaryReport validate_boundaries(const PipelineState& ps) {
  std::vector<StagePtr> stages{ps.encoder, ps.middle, ps.tail};
  BoundaryReport r = validate_boundaries(std::span<const StagePtr>(stages));
  for (const auto& s : stages) {
    if (s && !s->differentiable() &&
        (s->input_space() != Space::Continuous || s->output_space() != Space::Continuous)) {
      r.ok = false;
      r.diagnostics.push_back("opaque stage '" + s->label() + "' has a discrete boundary. Reparameterize: " +
                              kReparamHint);
    }
  }
  return r;
}

}  // namespace zobridge
