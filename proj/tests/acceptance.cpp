// End-to-end acceptance run. Prints one line per criterion and exits nonzero
// when any criterion fails.

#include "ncedf/cli.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <unistd.h>

#ifndef NCEDF_SOURCE_DIR
#error "NCEDF_SOURCE_DIR must point at the source tree"
#endif

using namespace ncedf;
namespace fs = std::filesystem;

namespace {

constexpr double kPi = std::numbers::pi;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

fs::path source_path(const std::string& rel) { return fs::path(NCEDF_SOURCE_DIR) / rel; }

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

int failures = 0;

void report(int n, bool pass, const std::string& details) {
  if (!pass) ++failures;
  std::cout << "criterion " << n << ": " << (pass ? "PASS" : "FAIL") << "  " << details << std::endl;
}

template <class Fn>
void guarded(int n, Fn&& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    report(n, false, std::string("exception: ") + e.what());
  }
}

std::vector<TrainingSample> load_dataset(const std::string& config, LinkGeometry& geom) {
  const DatasetConfig cfg = dataset_config_from_json(parse_json_file(source_path(config)));
  geom = cfg.geometry;
  return generate_dataset(cfg.geometry, cfg.spec, hardware_threads());
}

std::vector<NetShape> table_shapes() {
  std::vector<NetShape> shapes;
  for (std::size_t layers : {2, 3, 4, 5})
    for (std::size_t width : {16, 24, 32}) shapes.push_back({layers, width});
  return shapes;
}

MlpParams random_net(const NetShape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto p = glorot_init(shape.layer_dims(), rng);
  for (auto& b : p.biases)
    for (auto& v : b) v = 0.3 * (2.0 * uniform01(rng) - 1.0);
  return p;
}

Vec3 random_box_point(std::mt19937_64& rng, const Aabb& box) {
  Vec3 p;
  for (int a = 0; a < 3; ++a) p[a] = box.min[a] + (box.max[a] - box.min[a]) * uniform01(rng);
  return p;
}

LinkConfig random_config(std::mt19937_64& rng) { return {kPi * uniform01(rng), 2 * kPi * uniform01(rng) - kPi}; }

double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

double max_backbone_drift(const EpisodeResult& ep, std::span<const LinkGeometry> links) {
  double drift = 0.0;
  for (const auto& r : ep.records)
    for (std::size_t i = 0; i < links.size(); ++i) {
      const auto l = r.x.link(i);
      drift = std::max(drift, std::abs((l[0] + l[1] + l[2]) / 3.0 - links[i].length));
    }
  return drift;
}

struct Trained {
  MlpParams params;
  LinkGeometry geometry;
  ErrorMetrics val;
};

}  // namespace

int main() {
  const auto t_all = Clock::now();
  const fs::path work = fs::temp_directory_path() / ("ncedf_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(work);

  LinkGeometry geom;
  std::vector<TrainingSample> val;
  std::optional<Trained> with_o;
  const NetShape shape{4, 16};
  TrainConfig tc;
  tc.epochs = 60;
  tc.seed = 0;

  guarded(1, [&] {
    const auto t0 = Clock::now();
    const auto data = load_dataset("configs/dataset_desk.json", geom);
    LinkGeometry val_geom;
    val = load_dataset("configs/dataset_val.json", val_geom);
    if (!(val_geom == geom)) throw std::runtime_error("desk and validation configs use different geometries");
    const auto result = train(data, val, shape, tc);
    const double secs = seconds_since(t0);
    with_o = Trained{result.params, geom, result.history.back().val};
    const auto& m = with_o->val;
    report(1, m.mae <= 0.05 && m.rmse <= 0.07 && secs <= 900.0,
           "val_mae=" + fmt(m.mae) + " (<=0.05) val_rmse=" + fmt(m.rmse) + " (<=0.07) runtime_s=" + fmt(secs) +
               " (<=900) samples=" + std::to_string(data.size()));

    guarded(2, [&] {
      TrainConfig no_o = tc;
      no_o.lambda_o = 0.0;
      const auto ablated = train(data, val, shape, no_o).history.back().val;
      const double dmae = std::abs(m.mae - ablated.mae);
      report(2, m.moe < ablated.moe && m.moe <= 0.01 && dmae <= 0.01,
             "moe_with=" + fmt(m.moe) + " moe_without=" + fmt(ablated.moe) + " (with < without, with <= 0.01) |dmae|=" +
                 fmt(dmae) + " (<=0.01)");
    });
  });

  guarded(3, [&] {
    if (!with_o) throw std::runtime_error("no trained model");
    const std::size_t n = 10000, stride = val.size() / n;
    std::vector<TrainingSample> pts;
    for (std::size_t k = 0; k < n; ++k) pts.push_back(val[k * stride]);
    const double e = cli::eikonal_residual(with_o->params, pts);
    report(3, e <= 0.15, "mean |grad norm - 1|=" + fmt(e) + " (<=0.15) points=" + std::to_string(pts.size()));
  });

  guarded(4, [&] {
    std::mt19937_64 rng(4);
    const Aabb box = default_link_box();
    double worst_input = 0.0, worst_param = 0.0;
    for (const auto& s : table_shapes()) {
      for (int net = 0; net < 9; ++net) {
        const auto params = random_net(s, 100 * s.hidden_layers + s.width + net);
        const MlpInput x = encode_input(random_box_point(rng, box), random_config(rng));
        const Vec3 g = mlp_input_gradient(params, x);
        const double h = 1e-5;
        std::vector<double> fd(3), an{g.x(), g.y(), g.z()};
        for (std::size_t i = 0; i < 3; ++i) {
          auto xp = x, xm = x;
          xp[i] += h;
          xm[i] -= h;
          fd[i] = (mlp_forward(params, xp) - mlp_forward(params, xm)) / (2 * h);
        }
        worst_input = std::max(worst_input, relative_error(an, fd));
      }

      const auto params = random_net(s, 7 * s.hidden_layers + s.width);
      std::vector<TrainingSample> batch(6);
      for (auto& b : batch) b = {random_config(rng), random_box_point(rng, box), 2.0 * uniform01(rng)};
      const LossWeights w{0.5, 2.0};
      const auto analytic = loss_and_param_gradients(params, batch, w).grad.flatten();
      auto flat = params.flatten();
      std::vector<double> fd(flat.size());
      MlpParams probe = params;
      const double h = 1e-6;
      for (std::size_t i = 0; i < flat.size(); ++i) {
        const double keep = flat[i];
        flat[i] = keep + h;
        probe.unflatten(flat);
        const double up = loss_value(probe, batch, w).total;
        flat[i] = keep - h;
        probe.unflatten(flat);
        const double down = loss_value(probe, batch, w).total;
        flat[i] = keep;
        fd[i] = (up - down) / (2 * h);
      }
      worst_param = std::max(worst_param, relative_error(analytic, fd));
    }
    report(4, worst_input <= 1e-6 && worst_param <= 1e-4,
           "input_grad_rel_err=" + fmt(worst_input) + " (<=1e-6) param_grad_rel_err=" + fmt(worst_param) +
               " (<=1e-4) shapes=12");
  });

  guarded(5, [&] {
    const LinkGeometry g;
    Rng rng(7);
    double round_trip = 0.0;
    for (int i = 0; i < 20000; ++i) {
      const LinkConfig q{rng.uniform(1.0001e-6, kPi), rng.uniform(-kPi, kPi)};
      const auto back = arc_lengths_to_config(config_to_arc_lengths(q, g), g);
      const double dphi = std::remainder(back.phi - q.phi, 2 * kPi);
      round_trip = std::max({round_trip, std::abs(back.theta - q.theta), std::abs(dphi)});
    }
    for (int i = 0; i < 20000; ++i) {
      const std::array<double, 3> l{rng.uniform(1.6, 2.4), rng.uniform(1.6, 2.4), rng.uniform(1.6, 2.4)};
      const double mean = (l[0] + l[1] + l[2]) / 3.0;
      const std::array<double, 3> centred{l[0] - mean + g.length, l[1] - mean + g.length, l[2] - mean + g.length};
      const auto again = config_to_arc_lengths(arc_lengths_to_config(centred, g), g);
      for (int k = 0; k < 3; ++k) round_trip = std::max(round_trip, std::abs(again[k] - centred[k]));
    }

    const double L = g.length;
    double arc = 0.0;
    auto check = [&](const LinkConfig& q, const Vec3& pos, const Eigen::Matrix3d& rot) {
      const Pose t = link_transform(q, L);
      arc = std::max({arc, (t.translation() - pos).cwiseAbs().maxCoeff(), (t.linear() - rot).cwiseAbs().maxCoeff()});
    };
    Eigen::Matrix3d ry90, ry180;
    ry90 << 0, 0, 1, 0, 1, 0, -1, 0, 0;
    ry180 << -1, 0, 0, 0, 1, 0, 0, 0, -1;
    for (double phi : {0.0, 0.7, -2.0}) check({0.0, phi}, Vec3(0, 0, L), Eigen::Matrix3d::Identity());
    check({kPi / 2, 0.0}, Vec3(2 * L / kPi, 0, 2 * L / kPi), ry90);
    check({kPi, 0.0}, Vec3(2 * L / kPi, 0, 0), ry180);
    const Eigen::Matrix3d rz = Eigen::AngleAxisd(kPi / 2, Vec3::UnitZ()).toRotationMatrix();
    check({kPi / 2, kPi / 2}, Vec3(0, 2 * L / kPi, 2 * L / kPi), rz * ry90 * rz.transpose());
    report(5, round_trip <= 1e-9 && arc <= 1e-12,
           "round_trip_err=" + fmt(round_trip) + " (<=1e-9) analytic_arc_err=" + fmt(arc) + " (<=1e-12)");
  });

  guarded(6, [&] {
    if (!with_o) throw std::runtime_error("no trained model");
    const std::vector<LinkGeometry> one{with_o->geometry};
    const RobotCedf cedf = RobotCedf::shared(LinkModel{with_o->params, with_o->geometry}, one);
    std::mt19937_64 rng(6);
    const Aabb box = default_link_box();
    std::vector<double> pred, truth;
    for (int i = 0; i < 1000; ++i) {
      const RobotConfig q{{random_config(rng)}};
      const Vec3 p = random_box_point(rng, box);
      pred.push_back(robot_distance(cedf, p, q, forward_kinematics(q, one)));
      truth.push_back(analytic_link_distance(p, q[0], one[0]));
    }
    const auto m = compute_error_metrics(pred, truth);
    report(6, m.mae <= 0.05 && m.moe <= 0.015,
           "mae=" + fmt(m.mae) + " (<=0.05) moe=" + fmt(m.moe) + " (<=0.015) pairs=1000");
  });

  std::optional<RobotCedf> cedf4;
  Scenario desk;
  guarded(7, [&] {
    if (!with_o) throw std::runtime_error("no trained model");
    desk = load_scenario(source_path("configs/scenario_desk.json"));
    desk.validate();
    cedf4 = RobotCedf::shared(LinkModel{with_o->params, with_o->geometry}, desk.links);
    const std::vector<ShapeMode> modes{ShapeMode::parse("ncedf"), ShapeMode::parse("pcloud:1000")};
    const auto t0 = Clock::now();
    const auto rows = run_benchmark(50, desk.seed, desk, modes, &*cedf4, hardware_threads());
    const double secs = seconds_since(t0);
    const auto& nc = rows[0];
    const auto& pc = rows[1];
    double drift = 0.0;
    for (const auto& r : rows)
      for (const auto& ep : r.episodes) drift = std::max(drift, max_backbone_drift(ep, desk.links));
    report(7,
           nc.success >= 0.90 && nc.collision <= 0.06 && pc.mppi_ms_mean > nc.mppi_ms_mean && secs <= 1800.0,
           "success=" + fmt(nc.success) + " (>=0.90) collision=" + fmt(nc.collision) + " (<=0.06) stuck=" +
               fmt(nc.stuck) + " ncedf_ms=" + fmt(nc.mppi_ms_mean) + " pcloud_ms=" + fmt(pc.mppi_ms_mean) +
               " (pcloud > ncedf) pcloud_success=" + fmt(pc.success) + " runtime_s=" + fmt(secs) +
               " (<=1800) envs=50 max_drift=" + fmt(drift));
  });

  guarded(8, [&] {
    if (!with_o) throw std::runtime_error("no trained model");
    const Scenario s4 = load_scenario(source_path("configs/scenario_desk.json"));
    const Scenario s7 = load_scenario(source_path("configs/scenario_desk_7links.json"));
    const RobotCedf c4 = RobotCedf::shared(LinkModel{with_o->params, with_o->geometry}, s4.links);
    const RobotCedf c7 = RobotCedf::shared(LinkModel{with_o->params, with_o->geometry}, s7.links);
    const std::size_t seeds = 5, steps = 20;
    double ms4 = 0.0, ms7 = 0.0;
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
      Scenario a = s4, b = s7;
      a.seed = b.seed = seed;
      const Environment env = make_environment(a);
      Rng cloud_rng(mix_seed(seed, kCloudStream));
      const PreparedCloud cloud(sample_point_cloud(env, a.cloud_points, cloud_rng));
      auto time_steps = [&](const Scenario& s, const RobotCedf& c) {
        MppiConfig cfg = s.mppi;
        cfg.seed = mix_seed(seed, kMppiStream);
        MppiController ctl(cfg, s.links);
        const NcedfBackend backend(c, cloud);
        const Pose goal = scenario_goal(s);
        ArcLengths x = s.initial_state();
        double total = 0.0;
        for (std::size_t k = 0; k < steps; ++k) {
          const auto r = ctl.step(x, goal, backend, 1);
          total += r.diag.solve_ms;
          step_dynamics_inplace(x, r.control, cfg.tau);
        }
        return total;
      };
      ms4 += time_steps(a, c4);
      ms7 += time_steps(b, c7);
    }
    const double n = static_cast<double>(seeds * steps);
    ms4 /= n;
    ms7 /= n;
    report(8, ms7 <= 2.5 * ms4,
           "step_ms_4=" + fmt(ms4) + " step_ms_7=" + fmt(ms7) + " ratio=" + fmt(ms7 / ms4) + " (<=2.5) steps=" +
               std::to_string(seeds * steps));
  });

  guarded(9, [&] {
    if (!with_o) throw std::runtime_error("no trained model");
    const fs::path dir = work / "determinism";
    fs::create_directories(dir);
    const fs::path model = dir / "model.json";
    save_model(model, LinkModel{with_o->params, with_o->geometry});
    Scenario s = load_scenario(source_path("configs/scenario_desk.json"));
    s.t_max = 40;
    const fs::path scenario = dir / "scenario.json";
    write_text_atomic(scenario, to_json(s).dump(2));

    const std::vector<std::size_t> thread_counts{1, hardware_threads(), 4, 1};
    std::vector<std::string> plans, benches;
    for (std::size_t k = 0; k < thread_counts.size(); ++k) {
      std::ostringstream sink;
      cli::Context ctx;
      ctx.threads = thread_counts[k];
      ctx.timing = false;
      ctx.out = &sink;
      const std::string tag = std::to_string(k);
      cli::PlanOptions po{scenario.string(), model.string(), (dir / ("plan" + tag + ".jsonl")).string(), "ncedf",
                          (dir / ("plan" + tag + ".csv")).string()};
      if (cli::plan_cmd(po, ctx) != cli::kExitOk) throw std::runtime_error("plan failed");
      plans.push_back(read_text(po.out) + read_text(po.plot_csv) + sink.str());
      std::ostringstream bench_sink;
      ctx.out = &bench_sink;
      cli::BenchOptions bo{scenario.string(), model.string(), 4, "ncedf,spheres,pcloud:1000",
                           (dir / ("bench" + tag + ".csv")).string(), std::nullopt};
      if (cli::bench_cmd(bo, ctx) != cli::kExitOk) throw std::runtime_error("bench failed");
      benches.push_back(read_text(bo.out) + bench_sink.str());
    }
    bool same = true;
    for (std::size_t k = 1; k < thread_counts.size(); ++k) {
      // Everything but the out= lines, which name different files.
      auto strip = [](const std::string& t) {
        std::string r;
        std::istringstream in(t);
        for (std::string line; std::getline(in, line);)
          if (line.rfind("out=", 0) != 0) r += line + "\n";
        return r;
      };
      same = same && strip(plans[k]) == strip(plans[0]) && strip(benches[k]) == strip(benches[0]);
    }
    report(9, same,
           "plan and bench outputs byte-identical over runs with threads 1, " + std::to_string(hardware_threads()) +
               ", 4, 1 (plan_bytes=" + std::to_string(plans[0].size()) +
               " bench_bytes=" + std::to_string(benches[0].size()) + ")");
  });

  guarded(10, [&] {
    if (!cedf4) throw std::runtime_error("no robot model");
    Scenario s = desk;
    s.t_max = 300;
    s.environment.bounds = Aabb{Vec3(-50, -50, 2), Vec3(50, 50, 60)};
    s.environment.obstacles = {SphereObstacle{Vec3(40, 40, 50), 0.5, Vec3::Zero()}};
    Pose goal = Pose::Identity();
    goal.translation() = Vec3(0, 0, 30);  // out of reach: the episode uses the full budget
    s.goal = goal;
    const auto ep = run_episode(s, &*cedf4, ShapeMode::parse("ncedf"), 1);
    const double drift = max_backbone_drift(ep, s.links);
    report(10, ep.steps == 300 && drift <= 1e-6,
           "max_drift=" + fmt(drift) + " (<=1e-6) steps=" + std::to_string(ep.steps) + " outcome=" +
               outcome_name(ep.outcome));
  });

  std::error_code ec;
  fs::remove_all(work, ec);
  std::cout << "acceptance: " << (failures == 0 ? "PASS" : "FAIL") << " (" << failures << " failed, total_s="
            << fmt(seconds_since(t_all)) << ")" << std::endl;
  return failures == 0 ? 0 : 1;
}
