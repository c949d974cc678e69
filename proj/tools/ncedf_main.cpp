#include "ncedf/cli.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  using namespace ncedf::cli;

  CLI::App app{"Neural configuration distance functions for continuum robots"};
  app.require_subcommand(1);
  app.fallthrough();
  Context ctx;
  std::size_t threads = 0;
  bool no_timing = false;
  app.add_option("--threads", threads, "Worker threads (default: hardware parallelism)");
  app.add_flag("--no-timing", no_timing, "Write zero solve times so outputs are byte-reproducible");

  GenDataOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a link distance dataset");
  gen_cmd->add_option("--config", gen.config, "Dataset config JSON")->required();
  gen_cmd->add_option("--out", gen.out, "Output JSON-lines dataset")->required();

  TrainOptions tr;
  auto* train_sub = app.add_subcommand("train", "Train a link network");
  train_sub->add_option("--data", tr.data, "Training dataset")->required();
  train_sub->add_option("--val", tr.val, "Validation dataset")->required();
  train_sub->add_option("--net", tr.net, "Hidden layers and width, \"layers,width\"")->capture_default_str();
  train_sub->add_option("--out", tr.out, "Output model JSON")->required();
  train_sub->add_option("--history", tr.history, "Per-epoch CSV (default: <out>.history.csv)");
  train_sub->add_flag("--no-overestimation", tr.no_overestimation, "Drop the overestimation loss term");
  train_sub->add_option("--epochs", tr.epochs)->capture_default_str();
  train_sub->add_option("--batch-size", tr.batch_size)->capture_default_str();
  train_sub->add_option("--lr", tr.learning_rate)->capture_default_str();
  train_sub->add_option("--lambda-e", tr.lambda_e, "Eikonal loss weight")->capture_default_str();
  train_sub->add_option("--lambda-o", tr.lambda_o, "Overestimation loss weight")->capture_default_str();
  train_sub->add_option("--seed", tr.seed)->capture_default_str();

  EvalOptions ev;
  auto* eval_sub = app.add_subcommand("eval", "Error metrics and Eikonal residual of a model");
  eval_sub->add_option("--model", ev.model)->required();
  eval_sub->add_option("--val", ev.val)->required();
  eval_sub->add_option("--out", ev.out, "Metrics CSV (default: <model>.eval.csv)");

  PlanOptions pl;
  auto* plan_sub = app.add_subcommand("plan", "Run one navigation episode");
  plan_sub->add_option("--scenario", pl.scenario)->required();
  plan_sub->add_option("--model", pl.model, "Model JSON (needed for --shape ncedf)");
  plan_sub->add_option("--out", pl.out, "Trajectory JSON-lines")->required();
  plan_sub->add_option("--shape", pl.shape, "ncedf, spheres[:k] or pcloud[:P]")->capture_default_str();
  plan_sub->add_option("--plot-csv", pl.plot_csv, "step, ee_goal_dist, gt_clearance");

  BenchOptions be;
  std::uint64_t base_seed = 0;
  auto* bench_sub = app.add_subcommand("bench", "Success, collision and stuck rates per shape mode");
  bench_sub->add_option("--scenario-template", be.scenario_template)->required();
  bench_sub->add_option("--model", be.model, "Model JSON (needed for ncedf)");
  bench_sub->add_option("--n-envs", be.n_envs)->capture_default_str();
  bench_sub->add_option("--modes", be.modes, "Comma-separated shape modes")->capture_default_str();
  bench_sub->add_option("--base-seed", base_seed, "First environment seed (default: the template seed)");
  bench_sub->add_option("--out", be.out, "Output CSV")->required();

  std::string manifest;
  auto* rerun_sub = app.add_subcommand("rerun", "Repeat a run from its manifest");
  rerun_sub->add_option("manifest", manifest, "A *.manifest.json file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }
  if (threads > 0) ctx.threads = threads;
  ctx.timing = !no_timing;
  if (bench_sub->count("--base-seed")) be.base_seed = base_seed;

  return run_guarded([&]() -> int {
    if (*gen_cmd) return gen_data(gen, ctx);
    if (*train_sub) return train_cmd(tr, ctx);
    if (*eval_sub) return eval_cmd(ev, ctx);
    if (*plan_sub) return plan_cmd(pl, ctx);
    if (*bench_sub) return bench_cmd(be, ctx);
    return rerun_cmd(manifest, ctx);
  });
}
