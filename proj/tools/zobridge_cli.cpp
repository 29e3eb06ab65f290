// SPDX-License-Identifier: Apache-2.0
//
// zobridge command-line front end.
//
//   gen      <preset|file.json> --seed N --out DIR
//   stage1   --config F --data DIR --out DIR
//   stage2   --config F --from-stage1 DIR --data DIR --out DIR
//   zocheck  [--kind K] [--mu LIST] [--k LIST] [--sigma S] [--case NAME] [--out F]
//   eval     --checkpoint F --data DIR
//   paired   --config F --preset NAME --seeds N --out DIR
//
// Exit codes: 0 ok, 2 usage, 3 missing or invalid input, 4 divergence,
// 5 check failure, 1 anything else.

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "zobridge/config.hpp"
#include "zobridge/errors.hpp"
#include "zobridge/tasks.hpp"
#include "zobridge/trainer.hpp"
#include "zobridge/zo.hpp"

namespace fs = std::filesystem;
using namespace zobridge;

namespace {

enum Exit { kOk = 0, kUnexpected = 1, kUsage = 2, kMissingInput = 3, kDivergence = 4, kCheckFailure = 5 };

struct ExitError : std::runtime_error {
  int code;
  ExitError(int c, const std::string& what) : std::runtime_error(what), code(c) {}
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw ExitError(kMissingInput, what + " not found: " + p.string());
}

TaskData load_data_dir(const fs::path& dir) {
  for (const char* f : {"preset.json", "train.csv", "test.csv"}) require_file(dir / f, "data file");
  TaskData data;
  data.preset = load_preset((dir / "preset.json").string());
  data.train = load_dataset((dir / "train.csv").string());
  data.test = load_dataset((dir / "test.csv").string());
  const ObjectKind want = data.preset.name == "task_b_bitstring" ? ObjectKind::Bits : ObjectKind::Real;
  for (const Dataset* d : {&data.train, &data.test}) {
    if (d->kind != want) throw ParseError(2, "object kind does not match preset " + data.preset.name);
    for (const Example& e : d->rows)
      if (e.x.size() != data.preset.input_width)
        throw ParseError(2, "object width does not match preset " + data.preset.name);
  }
  return data;
}

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> threads;
  std::optional<double> lambda;
  std::optional<std::string> zo_kind;
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--seed", o.seed, "Overrides the config seed");
  cmd->add_option("--epochs", o.epochs, "Overrides the epoch count of this stage");
  cmd->add_option("--threads", o.threads, "Estimator fan-out (0: $ZOBRIDGE_THREADS)");
  cmd->add_option("--lambda", o.lambda, "Reconstruction weight");
  cmd->add_option("--zo-kind", o.zo_kind, "coordinate or gaussian");
}

struct ResolvedConfig {
  TrainConfig cfg;
  std::string source_path;
  std::string source_bytes;
};

ResolvedConfig resolve_config(const std::string& path, const Overrides& o, bool stage1) {
  ResolvedConfig r;
  r.source_path = path;
  if (!path.empty()) {
    require_file(path, "config");
    r.source_bytes = read_file(path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(r.source_bytes);
    } catch (const nlohmann::json::parse_error& e) {
      throw InvalidArgument(path + ": " + e.what());
    }
    r.cfg = train_config_from_json(j);
  }
  if (o.seed) r.cfg.seed = *o.seed;
  if (o.epochs) (stage1 ? r.cfg.epochs_stage1 : r.cfg.epochs_stage2) = *o.epochs;
  if (o.threads) r.cfg.threads = *o.threads;
  if (o.lambda) r.cfg.lambda = *o.lambda;
  if (o.zo_kind) r.cfg.zo_kind = parse_zo_kind(*o.zo_kind);
  r.cfg.validate();
  return r;
}

/// Writes the config snapshots and manifest shared by every training run.
void write_run_header(const fs::path& out, const ResolvedConfig& rc, const std::string& command,
                      const Json& inputs, const std::string& started) {
  fs::create_directories(out);
  const std::string resolved = to_json(rc.cfg).dump(2) + "\n";
  write_file((out / "config.json").string(), resolved);
  if (!rc.source_path.empty()) write_file((out / "config.source.json").string(), rc.source_bytes);
  Json m;
  m["command"] = command;
  m["config_path"] = rc.source_path;
  m["config_source_hash"] = rc.source_path.empty() ? "" : content_hash(rc.source_bytes);
  m["config_hash"] = content_hash(resolved);
  m["seed"] = rc.cfg.seed;
  m["inputs"] = inputs;
  m["output_dir"] = fs::absolute(out).lexically_normal().string();
  m["started"] = started;
  m["finished"] = utc_now();
  write_file((out / "manifest.json").string(), m.dump(2) + "\n");
}

void write_metrics(const fs::path& out, const RunMetrics& metrics, bool gnuplot) {
  write_file((out / "metrics.jsonl").string(), metrics.jsonl());
  write_file((out / "timing.jsonl").string(), metrics.timing_jsonl());
  if (gnuplot) write_file((out / "metrics.dat").string(), metrics.gnuplot());
}

Checkpoint make_checkpoint(const std::string& stage, const TaskData& data, const ResolvedConfig& rc,
                           std::uint64_t init_seed, const PipelineState& ps) {
  Checkpoint c;
  c.stage = stage;
  c.preset = data.preset;
  c.structure_hash = structure_hash(data.preset);
  c.init_seed = init_seed;
  c.config_hash = content_hash(to_json(rc.cfg).dump(2) + "\n");
  c.params = ps.params;
  c.layouts = block_layouts(ps);
  return c;
}

void report_divergence(const TrainResult& r) {
  if (r.divergence) throw ExitError(kDivergence, "diverged: " + *r.divergence);
}

// --- commands --------------------------------------------------------------

struct GenArgs {
  std::string preset;
  std::uint64_t seed = 0;
  std::string out = ".";
};

int cmd_gen(const GenArgs& a) {
  TaskPreset preset;
  if (a.preset.ends_with(".json")) {
    require_file(a.preset, "preset file");
    preset = load_preset(a.preset);
  } else {
    try {
      preset = preset_by_name(a.preset);
    } catch (const InvalidArgument& e) {
      throw ExitError(kUsage, e.what());
    }
  }
  const TaskData data = generate(preset, a.seed);
  const fs::path out(a.out);
  fs::create_directories(out);
  save_dataset(data.train, (out / "train.csv").string());
  save_dataset(data.test, (out / "test.csv").string());
  Json pj = to_json(preset);
  pj["data_seed"] = a.seed;
  write_file((out / "preset.json").string(), pj.dump(2) + "\n");
  std::cout << "wrote " << data.train.rows.size() << " train and " << data.test.rows.size() << " test rows to "
            << out.string() << "\n";
  return kOk;
}

struct StageArgs {
  std::string config, data, out, from_stage1;
  bool gnuplot = false;
  Overrides over;
};

int cmd_stage1(const StageArgs& a) {
  const std::string started = utc_now();
  const ResolvedConfig rc = resolve_config(a.config, a.over, true);
  const TaskData data = load_data_dir(a.data);
  const TaskModel model = build_task_model(data, rc.cfg.seed);
  const TrainResult r = stage1_train(model.stage1, rc.cfg);
  const fs::path out(a.out);
  write_run_header(out, rc, "stage1", {{"data", a.data}}, started);
  write_metrics(out, r.metrics, a.gnuplot);
  report_divergence(r);
  PipelineState ps = model.pipeline;
  ps.params = r.params;
  save_checkpoint(make_checkpoint("stage1", data, rc, rc.cfg.seed, ps), (out / "checkpoint.json").string());
  write_file((out / "summary.csv").string(), summary_csv(r.metrics.last(), std::nullopt));
  std::cout << summary_csv(r.metrics.last(), std::nullopt);
  return kOk;
}

fs::path checkpoint_path(const std::string& from) {
  if (from.empty()) throw ExitError(kMissingInput, "stage2 needs --from-stage1 (a stage1 run directory or checkpoint)");
  fs::path p(from);
  if (fs::is_directory(p)) p /= "checkpoint.json";
  require_file(p, "stage1 checkpoint");
  return p;
}

int cmd_stage2(const StageArgs& a) {
  const std::string started = utc_now();
  const fs::path ckpt_path = checkpoint_path(a.from_stage1);
  const ResolvedConfig rc = resolve_config(a.config, a.over, false);
  const TaskData data = load_data_dir(a.data);
  const Checkpoint ckpt = load_checkpoint(ckpt_path.string());
  TaskModel model = build_task_model(data, ckpt.init_seed);
  try {
    check_compatible(ckpt, data.preset, model.pipeline);
  } catch (const InvalidArgument& e) {
    throw ExitError(kMissingInput, std::string("checkpoint does not match data: ") + e.what());
  }
  PipelineState ps = model.pipeline;
  ps.params = ckpt.params;
  const TrainResult r = stage2_train(ps, data.train.rows, data.test.rows, rc.cfg);
  const fs::path out(a.out);
  write_run_header(out, rc, "stage2", {{"data", a.data}, {"from_stage1", ckpt_path.string()}}, started);
  write_metrics(out, r.metrics, a.gnuplot);
  report_divergence(r);
  ps.params = r.params;
  save_checkpoint(make_checkpoint("stage2", data, rc, ckpt.init_seed, ps), (out / "checkpoint.json").string());
  const std::string table = summary_csv(r.metrics.epochs.front(), r.metrics.last());
  write_file((out / "summary.csv").string(), table);
  std::cout << table;
  return kOk;
}

struct EvalArgs {
  std::string checkpoint, data;
};

int cmd_eval(const EvalArgs& a) {
  require_file(a.checkpoint, "checkpoint");
  const TaskData data = load_data_dir(a.data);
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  TaskModel model = build_task_model(data, ckpt.init_seed);
  try {
    check_compatible(ckpt, data.preset, model.pipeline);
  } catch (const InvalidArgument& e) {
    throw ExitError(kMissingInput, std::string("checkpoint does not match data: ") + e.what());
  }
  PipelineState ps = model.pipeline;
  ps.params = ckpt.params;
  Json j;
  j["stage"] = ckpt.stage;
  j["train_rmse"] = pipeline_rmse(ps, data.train.rows);
  j["test_rmse"] = pipeline_rmse(ps, data.test.rows);
  if (ps.recon_decoder && ps.discretizer) {
    j["recon_accuracy_train"] = reconstruction_accuracy(std::span<const Example>(data.train.rows), ps);
    j["recon_accuracy_test"] = reconstruction_accuracy(std::span<const Example>(data.test.rows), ps);
  }
  std::cout << j.dump() << "\n";
  return kOk;
}

struct ZocheckArgs {
  std::string kind = "both";
  std::vector<double> mu;
  std::vector<int> k;
  double sigma = 1.0;
  std::vector<std::string> cases;
  std::size_t points = 10;
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_zocheck(const ZocheckArgs& a) {
  std::vector<ZoConfig> sweep;
  const bool coord = a.kind == "both" || a.kind == "coordinate";
  const bool gauss = a.kind == "both" || a.kind == "gaussian";
  if (!coord && !gauss) throw ExitError(kUsage, "--kind must be coordinate, gaussian or both");
  const std::vector<double> coord_mu = a.mu.empty() ? std::vector<double>{1e-2, 1e-3, 1e-4} : a.mu;
  const std::vector<double> gauss_mu = a.mu.empty() ? std::vector<double>{1e-4} : a.mu;
  const std::vector<int> ks = a.k.empty() ? std::vector<int>{512, 10000} : a.k;
  if (coord)
    for (double mu : coord_mu) {
      ZoConfig c;
      c.kind = ZoKind::Coordinate;
      c.mu = mu;
      sweep.push_back(c);
    }
  if (gauss)
    for (double mu : gauss_mu)
      for (int k : ks) {
        ZoConfig c;
        c.kind = ZoKind::Gaussian;
        c.mu = mu;
        c.sigma = a.sigma;
        c.k_samples = k;
        sweep.push_back(c);
      }
  for (const ZoConfig& c : sweep) c.validate();

  std::vector<ZoCheckCase> cases = builtin_check_cases(a.points, a.seed);
  if (!a.cases.empty()) {
    std::erase_if(cases, [&](const ZoCheckCase& c) {
      return std::find(a.cases.begin(), a.cases.end(), c.name) == a.cases.end();
    });
    if (cases.empty()) {
      std::string known;
      for (const auto& c : builtin_check_cases(1)) known += " " + c.name;
      throw ExitError(kUsage, "no such check case; known:" + known);
    }
  }
  ZoCheckOptions opt;
  opt.seed = a.seed;
  const ZoCheckReport report = zo_check(cases, sweep, opt);
  if (a.out.empty()) {
    std::cout << report.csv();
  } else {
    write_file(a.out, report.csv());
    std::cout << "wrote " << report.rows.size() << " rows to " << a.out << "\n";
  }
  for (const auto& n : report.notes) std::cerr << "note: " << n << "\n";
  for (const auto& f : report.failures) std::cerr << "FAIL: " << f << "\n";
  return report.passed() ? kOk : kCheckFailure;
}

struct PairedArgs {
  std::string config, preset = "task_b_bitstring", out = ".";
  std::size_t seeds = 5;
  std::uint64_t first_seed = 1;
  Overrides over;
};

std::string csv_num(std::optional<double> v) { return v ? nlohmann::json(*v).dump() : ""; }

std::optional<double> median(std::vector<double> v) {
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int cmd_paired(const PairedArgs& a) {
  const std::string started = utc_now();
  ResolvedConfig rc = resolve_config(a.config, a.over, false);
  TaskPreset preset;
  try {
    preset = preset_by_name(a.preset);
  } catch (const InvalidArgument& e) {
    throw ExitError(kUsage, e.what());
  }
  if (a.seeds == 0) throw ExitError(kUsage, "--seeds must be positive");
  std::vector<double> r1, r2, acc1, acc2;
  std::string table = "seed,stage1_rmse,stage2_rmse,stage1_recon_accuracy,stage2_recon_accuracy\n";
  for (std::size_t i = 0; i < a.seeds; ++i) {
    const std::uint64_t seed = a.first_seed + i;
    TwoStageOutcome o;
    try {
      o = run_two_stage(preset, rc.cfg, seed);
    } catch (const DivergenceError& e) {
      throw ExitError(kDivergence, "seed " + std::to_string(seed) + " diverged: " + e.what());
    }
    const EpochRecord& s1 = o.stage1_pipeline();
    const EpochRecord& s2 = o.stage2_final();
    r1.push_back(s1.test_rmse);
    r2.push_back(s2.test_rmse);
    if (s1.recon_accuracy_test) acc1.push_back(*s1.recon_accuracy_test);
    if (s2.recon_accuracy_test) acc2.push_back(*s2.recon_accuracy_test);
    table += std::to_string(seed) + "," + csv_num(s1.test_rmse) + "," + csv_num(s2.test_rmse) + "," +
             csv_num(s1.recon_accuracy_test) + "," + csv_num(s2.recon_accuracy_test) + "\n";
    std::cerr << "seed " << seed << ": stage1 " << s1.test_rmse << " stage2 " << s2.test_rmse << "\n";
  }
  table += "median," + csv_num(median(r1)) + "," + csv_num(median(r2)) + "," + csv_num(median(acc1)) + "," +
           csv_num(median(acc2)) + "\n";
  const fs::path out(a.out);
  write_run_header(out, rc, "paired", {{"preset", a.preset}, {"seeds", a.seeds}, {"first_seed", a.first_seed}},
                   started);
  write_file((out / "paired.csv").string(), table);
  std::cout << table;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Training staged pipelines with opaque stages"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a benchmark dataset");
  g->add_option("preset", gen.preset, "Preset name or preset JSON file")->required();
  g->add_option("--seed", gen.seed, "Sample seed");
  g->add_option("--out", gen.out, "Output directory");

  StageArgs s1;
  auto* c1 = app.add_subcommand("stage1", "Independent pretraining with exact gradients");
  c1->add_option("--config", s1.config, "Training config JSON");
  c1->add_option("--data", s1.data, "Directory written by gen")->required();
  c1->add_option("--out", s1.out, "Run directory")->required();
  c1->add_flag("--emit-gnuplot", s1.gnuplot, "Also write metrics.dat");
  add_overrides(c1, s1.over);

  StageArgs s2;
  auto* c2 = app.add_subcommand("stage2", "Joint training through the opaque middle");
  c2->add_option("--config", s2.config, "Training config JSON");
  c2->add_option("--from-stage1", s2.from_stage1, "Stage1 run directory or checkpoint file");
  c2->add_option("--data", s2.data, "Directory written by gen")->required();
  c2->add_option("--out", s2.out, "Run directory")->required();
  c2->add_flag("--emit-gnuplot", s2.gnuplot, "Also write metrics.dat");
  add_overrides(c2, s2.over);

  ZocheckArgs zc;
  auto* z = app.add_subcommand("zocheck", "Check the estimators against analytic Jacobians");
  z->add_option("--kind", zc.kind, "coordinate, gaussian or both");
  z->add_option("--mu,--mu-sweep", zc.mu, "Step sizes")->delimiter(',');
  z->add_option("--k", zc.k, "Gaussian sample counts")->delimiter(',');
  z->add_option("--sigma", zc.sigma, "Gaussian direction scale");
  z->add_option("--case", zc.cases, "Restrict to named oracles")->delimiter(',');
  z->add_option("--points", zc.points, "Evaluation points per oracle");
  z->add_option("--seed", zc.seed, "Seed for points and directions");
  z->add_option("--out", zc.out, "CSV report path (default stdout)");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--data", ev.data, "Directory written by gen")->required();

  PairedArgs pa;
  auto* p = app.add_subcommand("paired", "Stage1 then stage2 over consecutive seeds");
  p->add_option("--config", pa.config, "Training config JSON");
  p->add_option("--preset", pa.preset, "Preset name");
  p->add_option("--seeds", pa.seeds, "Number of seeds");
  p->add_option("--first-seed", pa.first_seed, "First seed");
  p->add_option("--out", pa.out, "Run directory");
  add_overrides(p, pa.over);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? kOk : kUsage;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*c1) return cmd_stage1(s1);
    if (*c2) return cmd_stage2(s2);
    if (*z) return cmd_zocheck(zc);
    if (*e) return cmd_eval(ev);
    if (*p) return cmd_paired(pa);
  } catch (const ExitError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return err.code;
  } catch (const ParseError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kMissingInput;
  } catch (const InvalidArgument& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const DivergenceError& err) {
    std::cerr << "error: diverged: " << err.what() << "\n";
    return kDivergence;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUnexpected;
  }
  return kUsage;
}
