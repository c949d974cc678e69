#include "ncedf/cli.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace ncedf;
using namespace ncedf::cli;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() / ("ncedf_cli_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::size_t line_count(const fs::path& p) {
  const std::string text = read_text(p);
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

Context quiet(std::ostringstream& out, std::size_t threads = 1) {
  Context c;
  c.threads = threads;
  c.out = &out;
  return c;
}

void write_dataset_config(const fs::path& p, std::size_t n_configs, std::size_t n_workspace, std::uint64_t seed) {
  write_text_atomic(p, Json{{"n_configs", n_configs}, {"n_workspace", n_workspace}, {"n_axial", 6},
                            {"n_circ", 6}, {"seed", seed}}
                           .dump());
}

// softplus(x) - softplus(-x) = x, so this net is exactly Γ̂(p) = p_x.
LinkModel affine_model() {
  MlpParams params;
  params.dims = {kInputDim, 2, 1};
  params.weights = {{1, 0, 0, 0, 0, 0, -1, 0, 0, 0, 0, 0}, {1, -1}};
  params.biases = {{0, 0}, {0}};
  return {params, LinkGeometry{}, default_link_box()};
}

LinkModel random_model(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return {glorot_init(NetShape{2, 8}.layer_dims(), rng), LinkGeometry{}, default_link_box()};
}

Json trivial_scenario() {
  Scenario s;
  s.links.assign(2, LinkGeometry{});
  s.goal = forward_kinematics(arc_lengths_to_robot_config(ArcLengths::straight(s.links), s.links), s.links).back();
  s.mppi.n_rollouts = 16;
  s.mppi.horizon = 5;
  return to_json(s);
}

Json small_scenario(std::uint64_t seed) {
  Scenario s;
  s.links.assign(2, LinkGeometry{});
  s.mppi.n_rollouts = 16;
  s.mppi.horizon = 5;
  s.t_max = 8;
  s.cloud_points = 64;
  s.seed = seed;
  return to_json(s);
}

#ifdef NCEDF_CLI_PATH
int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + NCEDF_CLI_PATH + "\" " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}
#endif

}  // namespace

TEST(GenData, OneConfigOnePointGivesOneSample) {
  TempDir dir;
  write_dataset_config(dir / "cfg.json", 1, 1, 5);
  std::ostringstream out;
  EXPECT_EQ(gen_data({(dir / "cfg.json").string(), (dir / "d.jsonl").string()}, quiet(out)), kExitOk);
  const Dataset d = read_dataset(dir / "d.jsonl");
  EXPECT_EQ(d.samples.size(), 1u);
  EXPECT_EQ(line_count(dir / "d.jsonl"), 2u);  // header + one sample
  EXPECT_NE(out.str().find("samples=1\n"), std::string::npos);
}

TEST(GenData, SameSeedGivesIdenticalFilesAndAManifest) {
  TempDir dir;
  write_dataset_config(dir / "cfg.json", 3, 8, 11);
  std::ostringstream out;
  gen_data({(dir / "cfg.json").string(), (dir / "a.jsonl").string()}, quiet(out, 1));
  gen_data({(dir / "cfg.json").string(), (dir / "b.jsonl").string()}, quiet(out, 4));
  EXPECT_EQ(read_text(dir / "a.jsonl"), read_text(dir / "b.jsonl"));

  const Json m = parse_json_file(manifest_path(dir / "a.jsonl"));
  EXPECT_EQ(m.at("command"), "gen-data");
  EXPECT_EQ(m.at("seeds").at("dataset"), 11);
  EXPECT_EQ(m.at("config").at("n_configs"), 3);
  EXPECT_TRUE(m.contains("git_describe"));
  EXPECT_TRUE(m.contains("started"));
  EXPECT_TRUE(m.contains("finished"));
  EXPECT_EQ(m.at("outputs")[0], (dir / "a.jsonl").string());
}

TEST(GenData, InvalidConfigIsAFormatError) {
  TempDir dir;
  write_text_atomic(dir / "cfg.json", R"({"n_configs": 0})");
  std::ostringstream out;
  EXPECT_THROW(gen_data({(dir / "cfg.json").string(), (dir / "d.jsonl").string()}, quiet(out)), FormatError);
  write_text_atomic(dir / "cfg.json", R"({"n_cofigs": 3})");
  EXPECT_THROW(gen_data({(dir / "cfg.json").string(), (dir / "d.jsonl").string()}, quiet(out)), FormatError);
}

TEST(Train, HistoryHasOneRowPerEpochAndModelReloads) {
  TempDir dir;
  write_dataset_config(dir / "cfg.json", 4, 27, 1);
  write_dataset_config(dir / "val.json", 2, 8, 2);
  std::ostringstream out;
  gen_data({(dir / "cfg.json").string(), (dir / "d.jsonl").string()}, quiet(out));
  gen_data({(dir / "val.json").string(), (dir / "v.jsonl").string()}, quiet(out));

  TrainOptions o;
  o.data = (dir / "d.jsonl").string();
  o.val = (dir / "v.jsonl").string();
  o.net = "2,8";
  o.out = (dir / "m.json").string();
  o.epochs = 3;
  o.batch_size = 32;
  EXPECT_EQ(train_cmd(o, quiet(out)), kExitOk);
  EXPECT_EQ(line_count(dir / "m.json.history.csv"), 4u);
  const ModelFile mf = load_model(dir / "m.json");
  EXPECT_EQ(mf.model.params.dims, (std::vector<std::size_t>{6, 8, 8, 1}));
  EXPECT_EQ(mf.training_meta.at("config").at("lambda_o"), 2.0);

  // Same options and seed: same model bytes. --no-overestimation records λ_O = 0.
  o.out = (dir / "m2.json").string();
  train_cmd(o, quiet(out));
  EXPECT_EQ(read_text(dir / "m.json"), read_text(dir / "m2.json"));
  o.out = (dir / "m3.json").string();
  o.no_overestimation = true;
  train_cmd(o, quiet(out));
  EXPECT_EQ(load_model(dir / "m3.json").training_meta.at("config").at("lambda_o"), 0.0);

  o.net = "4;16";
  EXPECT_THROW(train_cmd(o, quiet(out)), FormatError);
}

TEST(Eval, PerfectAffineFixtureHasZeroErrorAndZeroEikonalResidual) {
  const LinkModel m = affine_model();
  std::mt19937_64 rng(3);
  std::vector<TrainingSample> samples;
  for (int i = 0; i < 200; ++i) {
    TrainingSample s;
    s.q = LinkConfig{uniform01(rng), uniform01(rng)};
    s.p = Vec3(4.0 * uniform01(rng) - 2.0, uniform01(rng), uniform01(rng));
    s.d = s.p.x();
    samples.push_back(s);
  }
  const EvalMetrics e = evaluate_model(m.params, samples);
  EXPECT_LE(e.errors.mae, 1e-14);
  EXPECT_LE(e.eikonal, 1e-14);
  EXPECT_EQ(e.points, 200u);
}

TEST(Eval, MetricsMatchComputeErrorMetricsExactly) {
  TempDir dir;
  write_dataset_config(dir / "val.json", 2, 8, 9);
  std::ostringstream out;
  gen_data({(dir / "val.json").string(), (dir / "v.jsonl").string()}, quiet(out));
  const LinkModel m = random_model(4);
  save_model(dir / "m.json", m);
  EXPECT_EQ(eval_cmd({(dir / "m.json").string(), (dir / "v.jsonl").string(), ""}, quiet(out)), kExitOk);

  const Dataset val = read_dataset(dir / "v.jsonl");
  std::vector<double> pred, target;
  for (const auto& s : val.samples) {
    pred.push_back(mlp_forward(m.params, encode_input(s.p, s.q)));
    target.push_back(s.d);
  }
  const ErrorMetrics ref = compute_error_metrics(pred, target);
  const std::string csv = read_text(dir / "m.json.eval.csv");
  std::string expected = "mae,rmse,moe,eikonal_residual,points\n";
  append_double(expected, ref.mae);
  expected += ',';
  append_double(expected, ref.rmse);
  expected += ',';
  append_double(expected, ref.moe);
  EXPECT_EQ(csv.substr(0, expected.size()), expected);
}

TEST(Plan, GoalAtStartSucceedsImmediatelyWithPlotRows) {
  TempDir dir;
  write_text_atomic(dir / "s.json", trivial_scenario().dump());
  save_model(dir / "m.json", random_model(1));
  std::ostringstream out;
  PlanOptions o{(dir / "s.json").string(), (dir / "m.json").string(), (dir / "t.jsonl").string(), "ncedf",
                (dir / "plot.csv").string()};
  EXPECT_EQ(plan_cmd(o, quiet(out)), kExitOk);
  EXPECT_NE(out.str().find("outcome=success\n"), std::string::npos);
  EXPECT_NE(out.str().find("steps=0\n"), std::string::npos);
  EXPECT_EQ(line_count(dir / "t.jsonl"), 1u);
  EXPECT_EQ(line_count(dir / "plot.csv"), 1u + 1u);  // header + (steps + 1) rows
}

TEST(Plan, NcedfWithoutModelIsAConfigError) {
  TempDir dir;
  write_text_atomic(dir / "s.json", trivial_scenario().dump());
  std::ostringstream out;
  EXPECT_THROW(plan_cmd({(dir / "s.json").string(), "", (dir / "t.jsonl").string(), "ncedf", ""}, quiet(out)),
               FormatError);
  EXPECT_THROW(plan_cmd({(dir / "s.json").string(), "", (dir / "t.jsonl").string(), "boxes", ""}, quiet(out)),
               FormatError);
}

TEST(Plan, RerunFromManifestReproducesTheTrajectory) {
  TempDir dir;
  write_text_atomic(dir / "s.json", small_scenario(3).dump());
  save_model(dir / "m.json", random_model(2));
  std::ostringstream out;
  Context ctx = quiet(out);
  ctx.timing = false;
  PlanOptions o{(dir / "s.json").string(), (dir / "m.json").string(), (dir / "t.jsonl").string(), "ncedf",
                (dir / "p.csv").string()};
  plan_cmd(o, ctx);
  const std::string first = read_text(dir / "t.jsonl"), plot = read_text(dir / "p.csv");
  fs::remove(dir / "t.jsonl");
  fs::remove(dir / "p.csv");
  EXPECT_EQ(rerun_cmd((dir / "t.jsonl.manifest.json").string(), quiet(out, 3)), kExitOk);
  EXPECT_EQ(read_text(dir / "t.jsonl"), first);
  EXPECT_EQ(read_text(dir / "p.csv"), plot);
}

TEST(Bench, OneEnvironmentGivesOneRowPerModeWithUnitRates) {
  TempDir dir;
  write_text_atomic(dir / "s.json", small_scenario(0).dump());
  save_model(dir / "m.json", random_model(2));
  std::ostringstream out;
  BenchOptions o;
  o.scenario_template = (dir / "s.json").string();
  o.model = (dir / "m.json").string();
  o.n_envs = 1;
  o.modes = "ncedf,spheres,pcloud:200";
  o.out = (dir / "b.csv").string();
  EXPECT_EQ(bench_cmd(o, quiet(out)), kExitOk);
  std::istringstream csv(read_text(dir / "b.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "mode,success,collision,stuck,mppi_ms_mean,mppi_ms_sd");
  int rows = 0;
  while (std::getline(csv, line)) {
    ++rows;
    std::vector<double> v;
    std::istringstream fields(line.substr(line.find(',') + 1));
    for (std::string f; std::getline(fields, f, ',');) v.push_back(std::stod(f));
    ASSERT_EQ(v.size(), 5u);
    for (int k = 0; k < 3; ++k) EXPECT_TRUE(v[k] == 0.0 || v[k] == 1.0);
    EXPECT_NEAR(v[0] + v[1] + v[2], 1.0, 1e-12);
  }
  EXPECT_EQ(rows, 3);
}

TEST(Bench, OutputsDoNotDependOnThreadsWithoutTiming) {
  TempDir dir;
  write_text_atomic(dir / "s.json", small_scenario(5).dump());
  std::ostringstream out;
  BenchOptions o;
  o.scenario_template = (dir / "s.json").string();
  o.n_envs = 3;
  o.modes = "spheres,pcloud:100";
  Context a = quiet(out, 1), b = quiet(out, 4);
  a.timing = b.timing = false;
  o.out = (dir / "a.csv").string();
  bench_cmd(o, a);
  o.out = (dir / "b.csv").string();
  bench_cmd(o, b);
  EXPECT_EQ(read_text(dir / "a.csv"), read_text(dir / "b.csv"));
}

TEST(OutputDir, RelativeOutputsLandInTheOverrideDirectory) {
  TempDir dir;
  ::setenv(kOutputDirEnv, dir.path().c_str(), 1);
  EXPECT_EQ(output_path("x/y.csv"), (dir / "x/y.csv").lexically_normal());
  EXPECT_EQ(output_path("/abs/y.csv"), fs::path("/abs/y.csv"));
  ::unsetenv(kOutputDirEnv);
  EXPECT_EQ(output_path("y.csv"), fs::absolute("y.csv").lexically_normal());
}

TEST(RunGuarded, MapsErrorsToExitCodes) {
  std::ostringstream err;
  EXPECT_EQ(run_guarded([] { return kExitOk; }, err), 0);
  EXPECT_EQ(run_guarded([]() -> int { throw FormatError("bad"); }, err), 2);
  EXPECT_EQ(run_guarded([]() -> int { throw std::invalid_argument("bad"); }, err), 2);
  EXPECT_EQ(run_guarded([]() -> int { throw std::runtime_error("io"); }, err), 3);
}

#ifdef NCEDF_CLI_PATH
TEST(Executable, ExitCodes) {
  TempDir dir;
  write_dataset_config(dir / "cfg.json", 1, 1, 0);
  write_text_atomic(dir / "broken.json", "{ not json");
  const std::string d = dir.path().string();
  EXPECT_EQ(run_cli("gen-data --config " + d + "/cfg.json --out " + d + "/ok.jsonl"), 0);
  EXPECT_EQ(run_cli("gen-data --config " + d + "/broken.json --out " + d + "/x.jsonl"), 2);
  EXPECT_EQ(run_cli("gen-data --config " + d + "/cfg.json"), 2);
  EXPECT_EQ(run_cli("gen-data --bogus"), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("train --data " + d + "/ok.jsonl --val " + d + "/ok.jsonl --net x --out " + d + "/m.json"), 2);
  EXPECT_EQ(run_cli("gen-data --config " + d + "/missing.json --out " + d + "/x.jsonl"), 3);
  EXPECT_EQ(run_cli("--threads 2 gen-data --config " + d + "/cfg.json --out " + d + "/ok2.jsonl"), 0);
  EXPECT_EQ(read_text(dir / "ok.jsonl"), read_text(dir / "ok2.jsonl"));
}
#endif
