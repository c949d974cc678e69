#pragma once

// Commands behind the ncedf executable. Each one reads its inputs, writes its
// outputs plus a manifest next to each output, and prints key=value lines.

#include "ncedf/io.hpp"
#include "ncedf/parallel.hpp"
#include "ncedf/simulator.hpp"
#include "ncedf/train.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#ifndef NCEDF_GIT_DESCRIBE
#define NCEDF_GIT_DESCRIBE "unknown"
#endif

namespace ncedf::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

inline constexpr const char* kOutputDirEnv = "NCEDF_OUTPUT_DIR";

struct Context {
  std::size_t threads = hardware_threads();
  bool timing = true;
  std::ostream* out = &std::cout;
};

/// Relative output paths land under $NCEDF_OUTPUT_DIR when it is set.
inline fs::path output_path(const std::string& p) {
  fs::path path(p);
  const char* dir = std::getenv(kOutputDirEnv);
  if (dir && *dir && path.is_relative()) path = fs::path(dir) / path;
  return fs::absolute(path).lexically_normal();
}

inline fs::path input_path(const std::string& p) { return fs::absolute(fs::path(p)).lexically_normal(); }

inline void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::uint64_t file_hash(const fs::path& p) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : read_text(p)) h = (h ^ c) * 0x100000001b3ull;
  return h;
}

struct Manifest {
  std::string command;
  Json options;
  Json config = Json::object();
  Json seeds = Json::object();
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;
  std::string started = utc_timestamp();
};

inline fs::path manifest_path(const fs::path& output) { return fs::path(output.string() + ".manifest.json"); }

inline void write_manifests(const Manifest& m, const Context& ctx) {
  Json inputs = Json::array(), outputs = Json::array();
  for (const auto& p : m.inputs) inputs.push_back({{"path", p.string()}, {"fnv1a64", file_hash(p)}});
  for (const auto& p : m.outputs) outputs.push_back(p.string());
  const Json j{{"command", m.command},       {"options", m.options},     {"config", m.config},
               {"seeds", m.seeds},           {"inputs", inputs},         {"outputs", outputs},
               {"git_describe", NCEDF_GIT_DESCRIBE}, {"threads", ctx.threads}, {"timing", ctx.timing},
               {"started", m.started},       {"finished", utc_timestamp()}};
  const std::string text = j.dump(2) + "\n";
  for (const auto& p : m.outputs) write_text_atomic(manifest_path(p), text);
}

// Every failure of the input files themselves is a configuration error.
template <class Fn>
auto as_config_error(const std::string& what, Fn&& fn) {
  try {
    return fn();
  } catch (const FormatError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw FormatError(what + ": " + e.what());
  } catch (const std::out_of_range& e) {
    throw FormatError(what + ": " + e.what());
  } catch (const Json::exception& e) {
    throw FormatError(what + ": " + e.what());
  }
}

// gen-data

struct GenDataOptions {
  std::string config;
  std::string out;

  Json to_json() const { return {{"config", input_path(config).string()}, {"out", output_path(out).string()}}; }
  static GenDataOptions from_json(const Json& j) { return {j.at("config"), j.at("out")}; }
};

inline int gen_data(const GenDataOptions& o, const Context& ctx) {
  Manifest m{"gen-data", o.to_json()};
  const fs::path config_path = input_path(o.config), out = output_path(o.out);
  const DatasetConfig cfg = as_config_error("dataset config", [&] { return dataset_config_from_json(parse_json_file(config_path)); });
  const auto samples = generate_dataset(cfg.geometry, cfg.spec, ctx.threads);
  ensure_parent(out);
  write_dataset(out, cfg.spec, cfg.geometry, samples);
  m.config = to_json(cfg.spec, cfg.geometry);
  m.seeds = {{"dataset", cfg.spec.seed}};
  m.inputs = {config_path};
  m.outputs = {out};
  write_manifests(m, ctx);
  *ctx.out << "command=gen-data\nsamples=" << samples.size() << "\nout=" << out.string() << "\n";
  return kExitOk;
}

// train

struct TrainOptions {
  std::string data;
  std::string val;
  std::string net = "4,16";
  std::string out;
  std::string history;  // default: <out>.history.csv
  bool no_overestimation = false;
  std::size_t epochs = TrainConfig{}.epochs;
  std::size_t batch_size = TrainConfig{}.batch_size;
  double learning_rate = TrainConfig{}.learning_rate;
  double lambda_e = TrainConfig{}.lambda_e;
  double lambda_o = TrainConfig{}.lambda_o;
  std::uint64_t seed = 0;

  fs::path history_path() const { return history.empty() ? fs::path(output_path(out).string() + ".history.csv") : output_path(history); }

  TrainConfig train_config() const {
    TrainConfig c;
    c.epochs = epochs;
    c.batch_size = batch_size;
    c.learning_rate = learning_rate;
    c.lambda_e = lambda_e;
    c.lambda_o = no_overestimation ? 0.0 : lambda_o;
    c.seed = seed;
    return c;
  }

  Json to_json() const {
    return {{"data", input_path(data).string()},
            {"val", input_path(val).string()},
            {"net", net},
            {"out", output_path(out).string()},
            {"history", history_path().string()},
            {"no_overestimation", no_overestimation},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"lambda_e", lambda_e},
            {"lambda_o", lambda_o},
            {"seed", seed}};
  }

  static TrainOptions from_json(const Json& j) {
    TrainOptions o;
    o.data = j.at("data");
    o.val = j.at("val");
    o.net = j.at("net");
    o.out = j.at("out");
    o.history = j.at("history");
    o.no_overestimation = j.at("no_overestimation");
    o.epochs = j.at("epochs");
    o.batch_size = j.at("batch_size");
    o.learning_rate = j.at("learning_rate");
    o.lambda_e = j.at("lambda_e");
    o.lambda_o = j.at("lambda_o");
    o.seed = j.at("seed");
    return o;
  }
};

inline Json train_config_json(const TrainConfig& c, const NetShape& shape) {
  return {{"hidden_layers", shape.hidden_layers}, {"width", shape.width},         {"epochs", c.epochs},
          {"batch_size", c.batch_size},           {"learning_rate", c.learning_rate}, {"lambda_e", c.lambda_e},
          {"lambda_o", c.lambda_o},               {"seed", c.seed},                 {"cosine_decay", c.cosine_decay},
          {"final_lr_fraction", c.final_lr_fraction}};
}

inline int train_cmd(const TrainOptions& o, const Context& ctx) {
  Manifest m{"train", o.to_json()};
  const NetShape shape = as_config_error("--net", [&] { return NetShape::parse(o.net); });
  const TrainConfig tc = o.train_config();
  as_config_error("training options", [&] {
    tc.validate();
    return 0;
  });
  const fs::path data_path = input_path(o.data), val_path = input_path(o.val);
  const Dataset data = as_config_error("dataset " + data_path.string(), [&] { return read_dataset(data_path); });
  const Dataset val = as_config_error("dataset " + val_path.string(), [&] { return read_dataset(val_path); });
  if (!(data.header.geometry == val.header.geometry))
    throw FormatError("training and validation datasets use different link geometries");

  const TrainResult result = train(data.samples, val.samples, shape, tc);
  const LinkModel model{result.params, data.header.geometry, data.header.spec.box};
  const ErrorMetrics final = result.history.back().val;
  const Json meta{{"config", train_config_json(tc, shape)},
                  {"data", data_path.string()},
                  {"val", val_path.string()},
                  {"final_val", {{"mae", final.mae}, {"rmse", final.rmse}, {"moe", final.moe}}}};

  const fs::path out = output_path(o.out), history = o.history_path();
  ensure_parent(out);
  ensure_parent(history);
  save_model(out, model, meta);
  write_text_atomic(history, history_csv(result.history));
  m.config = train_config_json(tc, shape);
  m.seeds = {{"train", tc.seed}};
  m.inputs = {data_path, val_path};
  m.outputs = {out, history};
  write_manifests(m, ctx);
  std::string text = "command=train\nepochs=" + std::to_string(tc.epochs) + "\nval_mae=";
  append_double(text, final.mae);
  text += "\nval_rmse=";
  append_double(text, final.rmse);
  text += "\nval_moe=";
  append_double(text, final.moe);
  *ctx.out << text << "\nout=" << out.string() << "\nhistory=" << history.string() << "\n";
  return kExitOk;
}

// eval

struct EvalMetrics {
  ErrorMetrics errors;
  double eikonal = 0.0;  // mean |‖∇p Γ̂‖ − 1|
  std::size_t points = 0;
};

inline double eikonal_residual(const MlpParams& params, std::span<const TrainingSample> samples) {
  if (samples.empty()) throw std::invalid_argument("eikonal_residual: no samples");
  double sum = 0.0;
  for (const auto& s : samples) sum += std::abs(mlp_input_gradient(params, encode_input(s.p, s.q)).norm() - 1.0);
  return sum / static_cast<double>(samples.size());
}

inline EvalMetrics evaluate_model(const MlpParams& params, std::span<const TrainingSample> samples) {
  return {evaluate_metrics(params, samples), eikonal_residual(params, samples), samples.size()};
}

inline std::string metrics_csv(const EvalMetrics& e) {
  std::string text = "mae,rmse,moe,eikonal_residual,points\n";
  append_double(text, e.errors.mae);
  text += ',';
  append_double(text, e.errors.rmse);
  text += ',';
  append_double(text, e.errors.moe);
  text += ',';
  append_double(text, e.eikonal);
  text += ',' + std::to_string(e.points) + '\n';
  return text;
}

struct EvalOptions {
  std::string model;
  std::string val;
  std::string out;  // default: next to the model, <model>.eval.csv

  fs::path out_path() const { return out.empty() ? fs::path(input_path(model).string() + ".eval.csv") : output_path(out); }

  Json to_json() const {
    return {{"model", input_path(model).string()}, {"val", input_path(val).string()}, {"out", out_path().string()}};
  }
  static EvalOptions from_json(const Json& j) { return {j.at("model"), j.at("val"), j.at("out")}; }
};

inline int eval_cmd(const EvalOptions& o, const Context& ctx) {
  Manifest m{"eval", o.to_json()};
  const fs::path model_path = input_path(o.model), val_path = input_path(o.val);
  const ModelFile mf = as_config_error("model " + model_path.string(), [&] { return load_model(model_path); });
  const Dataset val = as_config_error("dataset " + val_path.string(), [&] { return read_dataset(val_path); });
  const EvalMetrics e = evaluate_model(mf.model.params, val.samples);
  const fs::path out = o.out_path();
  ensure_parent(out);
  write_text_atomic(out, metrics_csv(e));
  m.inputs = {model_path, val_path};
  m.outputs = {out};
  write_manifests(m, ctx);
  std::string text = "command=eval\nmae=";
  append_double(text, e.errors.mae);
  text += "\nrmse=";
  append_double(text, e.errors.rmse);
  text += "\nmoe=";
  append_double(text, e.errors.moe);
  text += "\neikonal_residual=";
  append_double(text, e.eikonal);
  *ctx.out << text << "\npoints=" << e.points << "\nout=" << out.string() << "\n";
  return kExitOk;
}

// plan

inline std::optional<RobotCedf> load_robot_cedf(const std::string& model, const Scenario& s, bool needed) {
  if (model.empty()) {
    if (needed) throw FormatError("--model is required for the ncedf shape mode");
    return std::nullopt;
  }
  const fs::path path = input_path(model);
  const ModelFile mf = as_config_error("model " + path.string(), [&] { return load_model(path); });
  for (const auto& g : s.links)
    if (!(g == mf.model.geometry)) throw FormatError("model link geometry does not match the scenario robot");
  return RobotCedf::shared(mf.model, s.links);
}

struct PlanOptions {
  std::string scenario;
  std::string model;
  std::string out;
  std::string shape = "ncedf";
  std::string plot_csv;

  Json to_json() const {
    return {{"scenario", input_path(scenario).string()},
            {"model", model.empty() ? "" : input_path(model).string()},
            {"out", output_path(out).string()},
            {"shape", shape},
            {"plot_csv", plot_csv.empty() ? "" : output_path(plot_csv).string()}};
  }
  static PlanOptions from_json(const Json& j) { return {j.at("scenario"), j.at("model"), j.at("out"), j.at("shape"), j.at("plot_csv")}; }
};

inline int plan_cmd(const PlanOptions& o, const Context& ctx) {
  Manifest m{"plan", o.to_json()};
  const fs::path scenario_path = input_path(o.scenario);
  const Scenario s = as_config_error("scenario " + scenario_path.string(), [&] {
    Scenario sc = load_scenario(scenario_path);
    sc.validate();
    return sc;
  });
  const ShapeMode mode = as_config_error("--shape", [&] { return ShapeMode::parse(o.shape); });
  const auto cedf = load_robot_cedf(o.model, s, mode.kind == ShapeKind::ncedf);
  const EpisodeResult ep = run_episode(s, cedf ? &*cedf : nullptr, mode, ctx.threads);

  const fs::path out = output_path(o.out);
  ensure_parent(out);
  write_text_atomic(out, trajectory_jsonl(ep, ctx.timing));
  m.outputs = {out};
  if (!o.plot_csv.empty()) {
    const fs::path plot = output_path(o.plot_csv);
    ensure_parent(plot);
    write_text_atomic(plot, plot_csv(ep));
    m.outputs.push_back(plot);
  }
  m.config = to_json(s);
  m.seeds = {{"scenario", s.seed}, {"mppi", s.mppi.seed}};
  m.inputs = {scenario_path};
  if (!o.model.empty()) m.inputs.push_back(input_path(o.model));
  write_manifests(m, ctx);

  std::string text = "command=plan\nshape=" + mode.name() + "\noutcome=" + outcome_name(ep.outcome) +
                     "\nsteps=" + std::to_string(ep.steps) + "\nmean_solve_ms=";
  append_double(text, ctx.timing ? ep.mean_solve_ms() : 0.0);
  text += "\nfinal_goal_distance=";
  append_double(text, ep.records.back().ee_goal_dist);
  *ctx.out << text << "\nenv_hash=" << ep.env_hash << "\nout=" << out.string() << "\n";
  return kExitOk;
}

// bench

inline std::vector<ShapeMode> parse_modes(const std::string& list) {
  std::vector<ShapeMode> modes;
  std::stringstream ss(list);
  for (std::string item; std::getline(ss, item, ',');) modes.push_back(ShapeMode::parse(item));
  if (modes.empty()) throw std::invalid_argument("--modes is empty");
  return modes;
}

struct BenchOptions {
  std::string scenario_template;
  std::string model;
  std::size_t n_envs = 50;
  std::string modes = "ncedf,spheres,pcloud:1000";
  std::string out;
  std::optional<std::uint64_t> base_seed;  // default: the template's seed

  Json to_json() const {
    Json j{{"scenario_template", input_path(scenario_template).string()},
           {"model", model.empty() ? "" : input_path(model).string()},
           {"n_envs", n_envs},
           {"modes", modes},
           {"out", output_path(out).string()},
           {"base_seed", nullptr}};
    if (base_seed) j["base_seed"] = *base_seed;
    return j;
  }
  static BenchOptions from_json(const Json& j) {
    BenchOptions o{j.at("scenario_template"), j.at("model"), j.at("n_envs"), j.at("modes"), j.at("out"), std::nullopt};
    if (!j.at("base_seed").is_null()) o.base_seed = j.at("base_seed").get<std::uint64_t>();
    return o;
  }
};

inline int bench_cmd(const BenchOptions& o, const Context& ctx) {
  Manifest m{"bench", o.to_json()};
  if (o.n_envs < 1) throw FormatError("--n-envs must be at least 1");
  const fs::path tmpl_path = input_path(o.scenario_template);
  const Scenario tmpl = as_config_error("scenario template " + tmpl_path.string(), [&] {
    Scenario sc = load_scenario(tmpl_path);
    sc.validate();
    return sc;
  });
  const auto modes = as_config_error("--modes", [&] { return parse_modes(o.modes); });
  bool needs_model = false;
  for (const auto& md : modes) needs_model = needs_model || md.kind == ShapeKind::ncedf;
  const auto cedf = load_robot_cedf(o.model, tmpl, needs_model);
  const std::uint64_t base = o.base_seed.value_or(tmpl.seed);
  const auto rows = run_benchmark(o.n_envs, base, tmpl, modes, cedf ? &*cedf : nullptr, ctx.threads);

  const fs::path out = output_path(o.out);
  ensure_parent(out);
  write_text_atomic(out, benchmark_csv(rows, ctx.timing));
  m.config = to_json(tmpl);
  m.seeds = {{"base_seed", base}, {"n_envs", o.n_envs}};
  m.inputs = {tmpl_path};
  if (!o.model.empty()) m.inputs.push_back(input_path(o.model));
  m.outputs = {out};
  write_manifests(m, ctx);

  std::string text = "command=bench\nn_envs=" + std::to_string(o.n_envs) + "\n";
  for (const auto& r : rows) {
    text += "mode=" + r.mode + " success=";
    append_double(text, r.success);
    text += " collision=";
    append_double(text, r.collision);
    text += " stuck=";
    append_double(text, r.stuck);
    text += " mppi_ms_mean=";
    append_double(text, ctx.timing ? r.mppi_ms_mean : 0.0);
    text += "\n";
  }
  *ctx.out << text << "out=" << out.string() << "\n";
  return kExitOk;
}

// rerun

/// Runs the command recorded in a manifest with the same options. Inputs that
/// changed since are reported on stderr.
inline int rerun_cmd(const std::string& manifest, Context ctx) {
  const fs::path path = input_path(manifest);
  const Json j = as_config_error("manifest " + path.string(), [&] { return parse_json_file(path); });
  return as_config_error("manifest " + path.string(), [&]() -> int {
    for (const auto& in : j.at("inputs")) {
      const fs::path p = in.at("path").get<std::string>();
      if (!fs::exists(p)) throw FormatError("manifest input is missing: " + p.string());
      if (file_hash(p) != in.at("fnv1a64").get<std::uint64_t>())
        std::cerr << "warning: input changed since the manifest was written: " << p.string() << "\n";
    }
    ctx.timing = j.at("timing").get<bool>();
    const std::string command = j.at("command");
    const Json& opts = j.at("options");
    if (command == "gen-data") return gen_data(GenDataOptions::from_json(opts), ctx);
    if (command == "train") return train_cmd(TrainOptions::from_json(opts), ctx);
    if (command == "eval") return eval_cmd(EvalOptions::from_json(opts), ctx);
    if (command == "plan") return plan_cmd(PlanOptions::from_json(opts), ctx);
    if (command == "bench") return bench_cmd(BenchOptions::from_json(opts), ctx);
    throw FormatError("manifest names an unknown command: " + command);
  });
}

/// Maps exceptions to exit codes: 2 for bad configs and arguments, 3 otherwise.
template <class Fn>
int run_guarded(Fn&& fn, std::ostream& err = std::cerr) {
  try {
    return fn();
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace ncedf::cli
