// SPDX-License-Identifier: Apache-2.0
#include "zobridge/tasks.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace zobridge {

namespace {

constexpr std::uint64_t kHiddenStream = 0xA1;
constexpr std::uint64_t kEmbedStream = 0xB2;

Vec scalar(double y) {
  Vec v(1);
  v(0) = y;
  return v;
}

}  // namespace

std::vector<std::string> preset_names() { return {"task_a_smooth", "task_b_bitstring"}; }

TaskPreset preset_by_name(const std::string& name) {
  TaskPreset p;
  p.name = name;
  if (name == "task_a_smooth") {
    p.input_width = 4;
    p.latent_width = 2;
    p.readout_width = 3;
    p.train_size = 64;
    p.test_size = 256;
    p.noise_std = 0.05;
    p.seed = 11;
    return p;
  }
  if (name == "task_b_bitstring") {
    p.input_width = 16;
    p.latent_width = 10;
    p.readout_width = 8;
    p.embed_width = 6;
    p.encoder_hidden = {32};
    p.decoder_hidden = {32};
    p.train_size = 200;
    p.test_size = 2000;
    p.noise_std = 0.1;
    p.seed = 23;
    p.stage1_recon_floor = 0.5;
    return p;
  }
  std::string known;
  for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
  throw InvalidArgument("unknown preset '" + name + "' (known: " + known + ")");
}

// ---------------------------------------------------------------------------
// task A

Vec task_a_map(const Vec& z) {
  Vec y(3);
  y << z(0) * z(0), z(0) * z(1), std::sin(z(1));
  return y;
}

Mat task_a_jacobian(const Vec& z) {
  Mat j(3, 2);
  j << 2.0 * z(0), 0.0, z(1), z(0), 0.0, std::cos(z(1));
  return j;
}

namespace {

struct TaskAHidden {
  Mat encoder;  // 2 × 4
  Vec readout;  // 3
};

TaskAHidden task_a_hidden(const TaskPreset& p) {
  Rng rng(p.seed, kHiddenStream);
  TaskAHidden h{Mat(p.latent_width, p.input_width), Vec(p.readout_width)};
  for (Index r = 0; r < h.encoder.rows(); ++r)
    for (Index c = 0; c < h.encoder.cols(); ++c) h.encoder(r, c) = rng.normal() / std::sqrt(double(p.input_width));
  for (Index i = 0; i < h.readout.size(); ++i) h.readout(i) = rng.normal();
  return h;
}

void require_task(const TaskPreset& p, const char* name) {
  if (p.name != name) throw InvalidArgument(std::string("preset is not ") + name);
}

}  // namespace

Vec task_a_true_latent(const TaskPreset& preset, const Vec& x) { return matvec(task_a_hidden(preset).encoder, x); }

double task_a_property(const TaskPreset& preset, const Vec& x) {
  const auto h = task_a_hidden(preset);
  return dot(h.readout, task_a_map(matvec(h.encoder, x)));
}

TaskData gen_task_a(const TaskPreset& preset, Rng& rng) {
  require_task(preset, "task_a_smooth");
  const auto h = task_a_hidden(preset);
  TaskData data{preset, {ObjectKind::Real, {}}, {ObjectKind::Real, {}}};
  auto draw = [&](std::size_t n, Dataset& out) {
    for (std::size_t i = 0; i < n; ++i) {
      Vec x(preset.input_width);
      for (Index k = 0; k < x.size(); ++k) x(k) = rng.normal();
      const double clean = dot(h.readout, task_a_map(matvec(h.encoder, x)));
      const double y = preset.noise_std > 0.0 ? clean + preset.noise_std * rng.normal() : clean;
      out.rows.push_back({x, scalar(y)});
    }
  };
  draw(preset.train_size, data.train);
  draw(preset.test_size, data.test);
  return data;
}

// ---------------------------------------------------------------------------
// task B

Vec bit_features(const Vec& bits) {
  const Index n = bits.size();
  double pairs = 0, triples = 0, ones = 0;
  Index longest = n > 0 ? 1 : 0, run = n > 0 ? 1 : 0;
  for (Index i = 0; i < n; ++i) {
    const bool b = bits(i) != 0.0;
    ones += b;
    if (i + 1 < n && b && bits(i + 1) != 0.0) ++pairs;
    if (i + 2 < n && b && bits(i + 1) == 0.0 && bits(i + 2) != 0.0) ++triples;
    if (i > 0) {
      run = (bits(i) != 0.0) == (bits(i - 1) != 0.0) ? run + 1 : 1;
      longest = std::max(longest, run);
    }
  }
  Vec f(4);
  f << pairs, triples, std::fmod(ones, 2.0), static_cast<double>(longest);
  return f;
}

double task_b_property(const Vec& f) {
  return 1.5 * std::tanh((f(0) - 4.0) / 3.0) + 0.8 * std::cos(0.9 * f(1)) - 0.6 * f(2) + 0.25 * (f(3) - 4.0);
}

std::vector<Index> informative_features(std::span<const Example> train) {
  std::vector<Index> kept;
  if (train.empty()) return kept;
  const Vec first = bit_features(train.front().x);
  for (Index k = 0; k < first.size(); ++k) {
    for (const auto& ex : train) {
      if (bit_features(ex.x)(k) != first(k)) {
        kept.push_back(k);
        break;
      }
    }
  }
  return kept;
}

Vec task_b_embed(const TaskPreset& preset, const std::vector<Index>& kept, const Vec& features) {
  const double n = static_cast<double>(preset.input_width);
  const double scale[4] = {n - 1.0, n - 2.0, 1.0, n};
  // The projection is drawn for all four features so that dropping one does
  // not reshuffle the others.
  Rng rng(preset.seed, kEmbedStream);
  Mat proj(preset.embed_width, 4);
  Vec bias(preset.embed_width);
  for (Index r = 0; r < proj.rows(); ++r)
    for (Index c = 0; c < 4; ++c) proj(r, c) = 1.5 * rng.normal();
  for (Index r = 0; r < bias.size(); ++r) bias(r) = 0.5 * rng.normal();

  Vec e(preset.embed_width);
  for (Index r = 0; r < e.size(); ++r) {
    double acc = bias(r);
    for (Index c : kept) acc += proj(r, c) * (features(c) / scale[c]);
    e(r) = std::tanh(acc);
  }
  return e;
}

TaskData gen_task_b(const TaskPreset& preset, Rng& rng) {
  require_task(preset, "task_b_bitstring");
  TaskData data{preset, {ObjectKind::Bits, {}}, {ObjectKind::Bits, {}}};
  auto draw = [&](std::size_t n, Dataset& out) {
    for (std::size_t i = 0; i < n; ++i) {
      Vec x(preset.input_width);
      for (Index k = 0; k < x.size(); ++k) x(k) = (rng.next_u64() >> 63) ? 1.0 : 0.0;
      const double clean = task_b_property(bit_features(x));
      const double y = preset.noise_std > 0.0 ? clean + preset.noise_std * rng.normal() : clean;
      out.rows.push_back({x, scalar(y)});
    }
  };
  draw(preset.train_size, data.train);
  draw(preset.test_size, data.test);
  return data;
}

TaskData generate(const TaskPreset& preset, std::uint64_t seed) {
  Rng rng(seed, 0xDA7A);
  if (preset.name == "task_a_smooth") return gen_task_a(preset, rng);
  if (preset.name == "task_b_bitstring") return gen_task_b(preset, rng);
  throw InvalidArgument("no generator for preset '" + preset.name + "'");
}

// ---------------------------------------------------------------------------
// models

namespace {

std::vector<Index> with_ends(Index in, const std::vector<Index>& hidden, Index out) {
  std::vector<Index> w{in};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(out);
  return w;
}

std::shared_ptr<Mlp> make_mlp(const std::string& block, const std::vector<Index>& widths, Activation last) {
  std::vector<Activation> acts(widths.size() - 1, Activation::Tanh);
  acts.back() = last;
  return std::make_shared<Mlp>(block, widths, acts);
}

PipelineState predictor_state(Index readout_in, StagePtr front, StagePtr tail, const ParamSet& params) {
  PipelineState p;
  p.encoder = std::make_shared<IdentityStage>(readout_in);
  p.middle = std::move(front);
  p.tail = std::move(tail);
  for (const char* name : {"w1", "w2"}) p.params.add(params.at(name));
  return p;
}

}  // namespace

PipelineState TaskModel::with_oracle_middle(const PipelineState& ps) const {
  if (!has_oracle) throw Unsupported("this task has no differentiable registration of its black box");
  PipelineState out = ps;
  out.middle = oracle_middle;
  return out;
}

TaskModel build_task_model(const TaskData& data, std::uint64_t init_seed) {
  const TaskPreset& p = data.preset;
  const Rng init(init_seed, 0x1A17);
  TaskModel model;
  ParamSet params;

  if (p.name == "task_a_smooth") {
    auto encoder = make_mlp("u", with_ends(p.input_width, p.encoder_hidden, p.latent_width), Activation::Identity);
    auto front = make_mlp("w1", {p.readout_width, p.readout_width}, Activation::Tanh);
    auto tail = make_mlp("w2", {p.readout_width, 1}, Activation::Identity);
    auto black_box = std::make_shared<FunctionStage>("black_box", p.latent_width, p.readout_width,
                                                     [](const Vec& z, Params) { return task_a_map(z); });
    auto analytic = std::make_shared<AnalyticStage>("black_box_analytic", p.latent_width, p.readout_width,
                                                    task_a_map, task_a_jacobian);
    Rng r0 = init.split(0), r2 = init.split(2), r3 = init.split(3);
    params.add({"u", encoder->init(r0), false});
    params.add({"w1", front->init(r2), false});
    params.add({"w2", tail->init(r3), false});

    model.pipeline.encoder = encoder;
    model.pipeline.middle = std::make_shared<CompositeStage>(std::vector<StagePtr>{black_box, front}, true, "middle");
    model.pipeline.tail = tail;
    model.pipeline.params = params;
    model.has_oracle = true;
    model.oracle_middle =
        std::make_shared<CompositeStage>(std::vector<StagePtr>{analytic, front}, false, "middle_oracle");

    model.stage1.predictor = predictor_state(p.readout_width, front, tail, params);
    for (const auto& ex : data.train.rows)
      model.stage1.predictor_train.push_back({task_a_map(task_a_true_latent(p, ex.x)), ex.y});
  } else if (p.name == "task_b_bitstring") {
    const auto kept = informative_features(data.train.rows);
    if (kept.empty()) throw InvalidArgument("task_b: every feature is constant on the training set");
    auto encoder = make_mlp("u", with_ends(p.input_width, p.encoder_hidden, p.latent_width), Activation::Identity);
    auto decoder = make_mlp("v", with_ends(p.latent_width, p.decoder_hidden, p.input_width), Activation::Identity);
    auto front = make_mlp("w1", {p.embed_width, p.readout_width}, Activation::Tanh);
    auto tail = make_mlp("w2", {p.readout_width, 1}, Activation::Identity);
    auto threshold = std::make_shared<ThresholdStage>(p.input_width);
    const Index k = static_cast<Index>(kept.size());
    auto features = std::make_shared<FunctionStage>(
        "bit_features", p.input_width, k,
        [kept](const Vec& bits, Params) {
          const Vec f = bit_features(bits);
          Vec out(static_cast<Index>(kept.size()));
          for (std::size_t i = 0; i < kept.size(); ++i) out(static_cast<Index>(i)) = f(kept[i]);
          return out;
        },
        std::vector<BlockSpec>{}, Space::Discrete, Space::Continuous);
    auto embedding = std::make_shared<FunctionStage>("embedding", k, p.embed_width, [p, kept](const Vec& f, Params) {
      Vec full = Vec::Zero(4);
      for (std::size_t i = 0; i < kept.size(); ++i) full(kept[i]) = f(static_cast<Index>(i));
      return task_b_embed(p, kept, full);
    });
    auto featurizer =
        std::make_shared<CompositeStage>(std::vector<StagePtr>{threshold, features, embedding}, true, "featurizer");

    Rng r0 = init.split(0), r1 = init.split(1), r2 = init.split(2), r3 = init.split(3);
    params.add({"u", encoder->init(r0), false});
    params.add({"v", decoder->init(r1), false});
    params.add({"w1", front->init(r2), false});
    params.add({"w2", tail->init(r3), false});

    model.pipeline.encoder = encoder;
    model.pipeline.middle = make_reparameterized_middle(decoder, featurizer, front);
    model.pipeline.tail = tail;
    model.pipeline.recon_decoder = decoder;
    model.pipeline.discretizer = threshold;
    model.pipeline.params = params;

    model.stage1.predictor = predictor_state(p.embed_width, front, tail, params);
    for (const auto& ex : data.train.rows)
      model.stage1.predictor_train.push_back({task_b_embed(p, kept, bit_features(ex.x)), ex.y});
  } else {
    throw InvalidArgument("no model for preset '" + p.name + "'");
  }

  model.pipeline.validate();
  model.stage1.pipeline = model.pipeline;
  model.stage1.train = data.train.rows;
  model.stage1.test = data.test.rows;
  return model;
}

TrainResult oracle_fo_train(const TaskModel& model, const PipelineState& ps, const TaskData& data,
                            const TrainConfig& cfg) {
  if (!model.has_oracle)
    throw Unsupported("oracle_fo_train: true black-box gradients do not exist for '" + data.preset.name + "'");
  return stage2_train(model.with_oracle_middle(ps), data.train.rows, data.test.rows, cfg);
}

TwoStageOutcome run_two_stage(const TaskPreset& preset, TrainConfig cfg, std::uint64_t seed) {
  cfg.seed = seed;
  const TaskData data = generate(preset, seed);
  TaskModel model = build_task_model(data, seed);
  TwoStageOutcome out;
  out.seed = seed;
  out.stage1 = stage1_train(model.stage1, cfg);
  if (out.stage1.divergence) throw DivergenceError(*out.stage1.divergence);
  PipelineState ps = model.pipeline;
  ps.params = out.stage1.params;
  out.stage2 = stage2_train(ps, data.train.rows, data.test.rows, cfg);
  if (out.stage2.divergence) throw DivergenceError(*out.stage2.divergence);
  return out;
}

// ---------------------------------------------------------------------------
// dataset files

namespace {

void append_double(std::string& out, double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, res.ptr);
}

bool parse_double(std::string_view s, double& v) {
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  return res.ec == std::errc() && res.ptr == s.data() + s.size() && std::isfinite(v);
}

bool looks_like_bits(std::string_view s) {
  return !s.empty() && s.find_first_not_of("01") == std::string_view::npos;
}

}  // namespace

std::string dataset_csv(const Dataset& d) {
  std::string out = "object,y\n";
  for (const auto& ex : d.rows) {
    if (ex.y.size() != 1) throw InvalidArgument("dataset rows must have scalar y");
    for (Index i = 0; i < ex.x.size(); ++i) {
      if (d.kind == ObjectKind::Bits) {
        out += ex.x(i) != 0.0 ? '1' : '0';
      } else {
        if (i > 0) out += ';';
        append_double(out, ex.x(i));
      }
    }
    out += ',';
    append_double(out, ex.y(0));
    out += '\n';
  }
  return out;
}

void save_dataset(const Dataset& d, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InvalidArgument("cannot write " + path);
  f << dataset_csv(d);
  if (!f) throw InvalidArgument("write failed: " + path);
}

Dataset parse_dataset(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw ParseError(1, "missing header");
  ++lineno;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "object,y") throw ParseError(1, "expected header 'object,y'");

  Dataset d;
  Index width = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      if (in.peek() == std::char_traits<char>::eof()) break;
      throw ParseError(lineno, "empty row");
    }
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) throw ParseError(lineno, "expected 'object,y'");
    const std::string_view obj(line.data(), comma);
    const std::string_view ytext(line.data() + comma + 1, line.size() - comma - 1);
    double y;
    if (!parse_double(ytext, y)) throw ParseError(lineno, "bad property value '" + std::string(ytext) + "'");

    const ObjectKind kind = looks_like_bits(obj) ? ObjectKind::Bits : ObjectKind::Real;
    if (d.rows.empty())
      d.kind = kind;
    else if (kind != d.kind)
      throw ParseError(lineno, "object kind differs from earlier rows");

    std::vector<double> values;
    if (kind == ObjectKind::Bits) {
      for (char c : obj) values.push_back(c == '1' ? 1.0 : 0.0);
    } else {
      std::size_t start = 0;
      while (true) {
        const auto semi = obj.find(';', start);
        const auto field = obj.substr(start, semi == std::string_view::npos ? obj.npos : semi - start);
        double v;
        if (!parse_double(field, v)) throw ParseError(lineno, "bad object value '" + std::string(field) + "'");
        values.push_back(v);
        if (semi == std::string_view::npos) break;
        start = semi + 1;
      }
    }
    if (width < 0) width = static_cast<Index>(values.size());
    if (static_cast<Index>(values.size()) != width)
      throw ParseError(lineno, "object has " + std::to_string(values.size()) + " entries, expected " +
                                   std::to_string(width));
    d.rows.push_back({Eigen::Map<const Vec>(values.data(), width), scalar(y)});
  }
  return d;
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InvalidArgument("cannot read " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_dataset(ss.str());
}

}  // namespace zobridge
