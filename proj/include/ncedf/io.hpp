#pragma once

// File formats: model JSON, dataset JSON-lines, scenario JSON, trajectory
// logs and CSV tables.

#include "ncedf/cedf.hpp"
#include "ncedf/datagen.hpp"
#include "ncedf/mlp.hpp"
#include "ncedf/mppi.hpp"
#include "ncedf/simulator.hpp"
#include "ncedf/train.hpp"

#include <nlohmann/json.hpp>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

namespace ncedf {

using Json = nlohmann::json;

/// Malformed or inconsistent input file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shortest decimal that round-trips the double exactly.
inline void append_double(std::string& out, double v) {
  if (!std::isfinite(v)) {
    out += "null";
    return;
  }
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, r.ptr);
}

inline std::string format_double(double v) {
  std::string s;
  append_double(s, v);
  return s;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes to a temporary sibling and renames it into place.
inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Json parse_json_file(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

namespace detail {

inline void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw FormatError(where + " must be a JSON object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!ok.count(it.key())) throw FormatError("unknown key '" + it.key() + "' in " + where);
}

template <class T>
T get(const Json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw FormatError("missing key '" + std::string(key) + "' in " + where);
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw FormatError("bad value for '" + std::string(key) + "' in " + where + ": " + e.what());
  }
}

template <class T>
void get_opt(const Json& j, const char* key, T& out, const std::string& where) {
  if (j.contains(key)) out = get<T>(j, key, where);
}

inline Vec3 vec3(const Json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 3) throw FormatError(where + " must be an array of 3 numbers");
  Vec3 v;
  for (int a = 0; a < 3; ++a) {
    if (!j[a].is_number()) throw FormatError(where + " must be an array of 3 numbers");
    v[a] = j[a].get<double>();
  }
  return v;
}

inline Json vec3_json(const Vec3& v) { return Json::array({v.x(), v.y(), v.z()}); }

}  // namespace detail

// Geometry, boxes, poses.

inline Json to_json(const LinkGeometry& g) {
  return Json{{"L", g.length}, {"r", g.radius}, {"l_min", g.l_min}, {"l_max", g.l_max}};
}

inline LinkGeometry geometry_from_json(const Json& j, const std::string& where = "link_geometry") {
  detail::check_keys(j, {"L", "r", "l_min", "l_max"}, where);
  LinkGeometry g;
  detail::get_opt(j, "L", g.length, where);
  detail::get_opt(j, "r", g.radius, where);
  detail::get_opt(j, "l_min", g.l_min, where);
  detail::get_opt(j, "l_max", g.l_max, where);
  if (!g.valid()) throw FormatError(where + ": need r > 0 and 0 < l_min < L < l_max");
  return g;
}

inline Json to_json(const Aabb& b) { return Json{{"min", detail::vec3_json(b.min)}, {"max", detail::vec3_json(b.max)}}; }

inline Aabb box_from_json(const Json& j, const std::string& where) {
  detail::check_keys(j, {"min", "max"}, where);
  Aabb b{detail::vec3(j.at("min"), where + ".min"), detail::vec3(j.at("max"), where + ".max")};
  for (int a = 0; a < 3; ++a)
    if (!(b.min[a] < b.max[a])) throw FormatError(where + ": min must be below max on every axis");
  return b;
}

inline Json pose_json(const Pose& p) { return Json(to_row_major(p)); }

inline Pose pose_from_json(const Json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 16) throw FormatError(where + " must be 16 numbers (row-major 4x4)");
  std::array<double, 16> m{};
  for (std::size_t i = 0; i < 16; ++i) {
    if (!j[i].is_number()) throw FormatError(where + " must be 16 numbers (row-major 4x4)");
    m[i] = j[i].get<double>();
  }
  const Pose p = from_row_major(m);
  const Eigen::Matrix3d r = p.linear();
  if (!((r.transpose() * r - Eigen::Matrix3d::Identity()).norm() < 1e-6 && r.determinant() > 0.0))
    throw FormatError(where + ": rotation block is not a rotation");
  if (std::abs(m[12]) + std::abs(m[13]) + std::abs(m[14]) > 1e-12 || std::abs(m[15] - 1.0) > 1e-12)
    throw FormatError(where + ": last row must be 0 0 0 1");
  return p;
}

// Model files.

struct ModelFile {
  LinkModel model;
  Json training_meta = Json::object();
};

inline Json model_to_json(const LinkModel& m, const Json& training_meta = Json::object()) {
  m.params.validate();
  Json weights = Json::array(), biases = Json::array();
  for (const auto& w : m.params.weights) weights.push_back(w);
  for (const auto& b : m.params.biases) biases.push_back(b);
  return Json{{"layer_dims", m.params.dims},
              {"activation", "softplus"},
              {"weights", weights},
              {"biases", biases},
              {"link_geometry", to_json(m.geometry)},
              {"training_box", to_json(m.box)},
              {"input_encoding", "theta_cos_sin"},
              {"training_meta", training_meta}};
}

inline ModelFile model_from_json(const Json& j) {
  const std::string where = "model";
  detail::check_keys(j, {"layer_dims", "activation", "weights", "biases", "link_geometry", "training_box",
                         "input_encoding", "training_meta"},
                     where);
  if (detail::get<std::string>(j, "activation", where) != "softplus")
    throw FormatError("model: only the softplus activation is supported");
  if (detail::get<std::string>(j, "input_encoding", where) != "theta_cos_sin")
    throw FormatError("model: only the theta_cos_sin input encoding is supported");
  ModelFile f;
  f.model.params.dims = detail::get<std::vector<std::size_t>>(j, "layer_dims", where);
  f.model.params.weights = detail::get<std::vector<std::vector<double>>>(j, "weights", where);
  f.model.params.biases = detail::get<std::vector<std::vector<double>>>(j, "biases", where);
  try {
    f.model.params.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("model: ") + e.what());
  }
  f.model.geometry = geometry_from_json(j.at("link_geometry"));
  f.model.box = j.contains("training_box") ? box_from_json(j.at("training_box"), "training_box") : default_link_box();
  if (j.contains("training_meta")) f.training_meta = j.at("training_meta");
  return f;
}

inline void save_model(const std::filesystem::path& path, const LinkModel& m, const Json& meta = Json::object()) {
  write_text_atomic(path, model_to_json(m, meta).dump(2) + "\n");
}

inline ModelFile load_model(const std::filesystem::path& path) { return model_from_json(parse_json_file(path)); }

// Dataset specs and JSON-lines datasets.

inline Json to_json(const DatasetSpec& s, const LinkGeometry& g) {
  return Json{{"geometry", to_json(g)},       {"n_configs", s.n_configs}, {"n_workspace", s.n_workspace},
              {"n_axial", s.n_axial},         {"n_circ", s.n_circ},       {"box", to_json(s.box)},
              {"seed", s.seed}};
}

struct DatasetConfig {
  DatasetSpec spec;
  LinkGeometry geometry;
};

inline DatasetConfig dataset_config_from_json(const Json& j) {
  const std::string where = "dataset config";
  detail::check_keys(j, {"geometry", "n_configs", "n_workspace", "n_axial", "n_circ", "box", "seed"}, where);
  DatasetConfig c;
  if (j.contains("geometry")) c.geometry = geometry_from_json(j.at("geometry"), "geometry");
  detail::get_opt(j, "n_configs", c.spec.n_configs, where);
  detail::get_opt(j, "n_workspace", c.spec.n_workspace, where);
  detail::get_opt(j, "n_axial", c.spec.n_axial, where);
  detail::get_opt(j, "n_circ", c.spec.n_circ, where);
  detail::get_opt(j, "seed", c.spec.seed, where);
  if (j.contains("box")) c.spec.box = box_from_json(j.at("box"), "box");
  try {
    c.spec.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("dataset config: ") + e.what());
  }
  return c;
}

struct DatasetHeader {
  DatasetSpec spec;
  LinkGeometry geometry;
  std::size_t count = 0;
};

inline std::string dataset_header_line(const DatasetSpec& s, const LinkGeometry& g, std::size_t count) {
  Json h{{"format", "ncedf-dataset"}, {"version", 1}, {"spec", to_json(s, g)}, {"count", count}};
  return h.dump();
}

inline void append_sample_line(std::string& out, const TrainingSample& s) {
  out += "{\"theta\":";
  append_double(out, s.q.theta);
  out += ",\"phi\":";
  append_double(out, s.q.phi);
  out += ",\"p\":[";
  append_double(out, s.p.x());
  out += ',';
  append_double(out, s.p.y());
  out += ',';
  append_double(out, s.p.z());
  out += "],\"d\":";
  append_double(out, s.d);
  out += "}\n";
}

inline void write_dataset(const std::filesystem::path& path, const DatasetSpec& spec, const LinkGeometry& g,
                          std::span<const TrainingSample> data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    std::string buf = dataset_header_line(spec, g, data.size()) + "\n";
    for (const auto& s : data) {
      append_sample_line(buf, s);
      if (buf.size() > (1u << 20)) {
        out << buf;
        buf.clear();
      }
    }
    out << buf;
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

namespace detail {

/// Fast path for lines in exactly the written layout; returns false otherwise.
inline bool parse_sample_fast(std::string_view line, TrainingSample& s) {
  const char* p = line.data();
  const char* end = p + line.size();
  auto expect = [&](std::string_view lit) {
    if (static_cast<std::size_t>(end - p) < lit.size() || std::string_view(p, lit.size()) != lit) return false;
    p += lit.size();
    return true;
  };
  auto number = [&](double& v) {
    const auto r = std::from_chars(p, end, v);
    if (r.ec != std::errc()) return false;
    p = r.ptr;
    return true;
  };
  double x, y, z;
  if (!(expect("{\"theta\":") && number(s.q.theta) && expect(",\"phi\":") && number(s.q.phi) && expect(",\"p\":[") &&
        number(x) && expect(",") && number(y) && expect(",") && number(z) && expect("],\"d\":") && number(s.d) &&
        expect("}")))
    return false;
  s.p = Vec3(x, y, z);
  return p == end;
}

inline TrainingSample parse_sample_json(std::string_view line, const std::string& where) {
  Json j;
  try {
    j = Json::parse(line);
  } catch (const Json::parse_error& e) {
    throw FormatError(where + ": " + e.what());
  }
  check_keys(j, {"theta", "phi", "p", "d"}, where);
  TrainingSample s;
  s.q.theta = get<double>(j, "theta", where);
  s.q.phi = get<double>(j, "phi", where);
  s.p = vec3(j.at("p"), where + ".p");
  s.d = get<double>(j, "d", where);
  return s;
}

}  // namespace detail

struct Dataset {
  DatasetHeader header;
  std::vector<TrainingSample> samples;
};

inline Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  Dataset ds;
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty dataset file");
  Json h;
  try {
    h = Json::parse(line);
  } catch (const Json::parse_error& e) {
    throw FormatError(path.string() + ": bad header: " + e.what());
  }
  if (!h.is_object() || h.value("format", "") != "ncedf-dataset")
    throw FormatError(path.string() + ": first line is not an ncedf-dataset header");
  const auto cfg = dataset_config_from_json(h.at("spec"));
  ds.header.spec = cfg.spec;
  ds.header.geometry = cfg.geometry;
  ds.header.count = detail::get<std::size_t>(h, "count", "dataset header");
  ds.samples.reserve(ds.header.count);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    TrainingSample s;
    if (!detail::parse_sample_fast(line, s))
      s = detail::parse_sample_json(line, path.string() + ":" + std::to_string(line_no));
    ds.samples.push_back(s);
  }
  if (ds.samples.size() != ds.header.count)
    throw FormatError(path.string() + ": header promises " + std::to_string(ds.header.count) + " samples, found " +
                      std::to_string(ds.samples.size()));
  return ds;
}

// MPPI settings and scenarios.

inline Json to_json(const MppiConfig& c) {
  return Json{{"n_rollouts", c.n_rollouts}, {"horizon", c.horizon}, {"sigma", c.sigma},
              {"lambda", c.lambda},         {"alpha_u", c.alpha_u}, {"w_goal", c.w_goal},
              {"w_coll", c.w_coll},         {"w_state", c.w_state}, {"safety_margin", c.safety_margin},
              {"epsilon", c.epsilon},       {"tau", c.tau},         {"seed", c.seed}};
}

inline MppiConfig mppi_config_from_json(const Json& j) {
  const std::string where = "mppi";
  detail::check_keys(j,
                     {"n_rollouts", "horizon", "sigma", "lambda", "alpha_u", "w_goal", "w_coll", "w_state",
                      "safety_margin", "epsilon", "tau", "seed"},
                     where);
  MppiConfig c;
  detail::get_opt(j, "n_rollouts", c.n_rollouts, where);
  detail::get_opt(j, "horizon", c.horizon, where);
  detail::get_opt(j, "sigma", c.sigma, where);
  detail::get_opt(j, "lambda", c.lambda, where);
  detail::get_opt(j, "alpha_u", c.alpha_u, where);
  detail::get_opt(j, "w_goal", c.w_goal, where);
  detail::get_opt(j, "w_coll", c.w_coll, where);
  detail::get_opt(j, "w_state", c.w_state, where);
  detail::get_opt(j, "safety_margin", c.safety_margin, where);
  detail::get_opt(j, "epsilon", c.epsilon, where);
  detail::get_opt(j, "tau", c.tau, where);
  detail::get_opt(j, "seed", c.seed, where);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(e.what());
  }
  return c;
}

inline Json to_json(const Scenario& s) {
  Json robot{{"links", s.links.size()}};
  bool shared = std::all_of(s.links.begin(), s.links.end(), [&](const LinkGeometry& g) { return g == s.links[0]; });
  if (shared) {
    robot["geometry"] = to_json(s.links[0]);
  } else {
    Json gs = Json::array();
    for (const auto& g : s.links) gs.push_back(to_json(g));
    robot["geometries"] = gs;
  }
  if (s.initial) robot["initial_arc_lengths"] = s.initial->values;

  const auto& e = s.environment;
  Json env{{"n_obstacles", e.n_obstacles},   {"radius_min", e.radius_min},
           {"radius_max", e.radius_max},     {"velocity_max", e.velocity_max},
           {"bounds", to_json(e.bounds)},    {"min_start_clearance", e.min_start_clearance}};
  if (!e.obstacles.empty()) {
    Json obs = Json::array();
    for (const auto& o : e.obstacles)
      obs.push_back(
          {{"center", detail::vec3_json(o.center)}, {"radius", o.radius}, {"velocity", detail::vec3_json(o.velocity)}});
    env["obstacles"] = obs;
  }
  Json goal = Json::object();
  if (s.goal) goal["pose"] = pose_json(*s.goal);
  else goal["spread"] = s.goal_spread;

  return Json{{"robot", robot},         {"environment", env},        {"goal", goal},
              {"mppi", to_json(s.mppi)}, {"t_max", s.t_max},          {"cloud_points", s.cloud_points},
              {"seed", s.seed},         {"success_threshold", s.success_threshold}};
}

inline Scenario scenario_from_json(const Json& j) {
  const std::string where = "scenario";
  detail::check_keys(j, {"robot", "environment", "goal", "mppi", "t_max", "cloud_points", "seed", "success_threshold"},
                     where);
  Scenario s;
  if (j.contains("robot")) {
    const Json& r = j.at("robot");
    detail::check_keys(r, {"links", "geometry", "geometries", "initial_arc_lengths"}, "robot");
    if (r.contains("geometries")) {
      if (r.contains("geometry")) throw FormatError("robot: give either geometry or geometries, not both");
      s.links.clear();
      for (std::size_t i = 0; i < r.at("geometries").size(); ++i)
        s.links.push_back(geometry_from_json(r.at("geometries")[i], "robot.geometries[" + std::to_string(i) + "]"));
      if (r.contains("links") && detail::get<std::size_t>(r, "links", "robot") != s.links.size())
        throw FormatError("robot: links does not match the number of geometries");
    } else {
      const std::size_t m = r.contains("links") ? detail::get<std::size_t>(r, "links", "robot") : 4;
      if (m < 1) throw FormatError("robot: links must be >= 1");
      const LinkGeometry g = r.contains("geometry") ? geometry_from_json(r.at("geometry"), "robot.geometry") : LinkGeometry{};
      s.links.assign(m, g);
    }
    if (r.contains("initial_arc_lengths"))
      s.initial = ArcLengths{detail::get<std::vector<double>>(r, "initial_arc_lengths", "robot")};
  }
  if (j.contains("environment")) {
    const Json& e = j.at("environment");
    const std::string ew = "environment";
    detail::check_keys(e,
                       {"n_obstacles", "radius_min", "radius_max", "velocity_max", "bounds", "min_start_clearance",
                        "obstacles"},
                       ew);
    auto& spec = s.environment;
    detail::get_opt(e, "n_obstacles", spec.n_obstacles, ew);
    detail::get_opt(e, "radius_min", spec.radius_min, ew);
    detail::get_opt(e, "radius_max", spec.radius_max, ew);
    detail::get_opt(e, "velocity_max", spec.velocity_max, ew);
    detail::get_opt(e, "min_start_clearance", spec.min_start_clearance, ew);
    if (e.contains("bounds")) spec.bounds = box_from_json(e.at("bounds"), "environment.bounds");
    if (e.contains("obstacles")) {
      const Json& obs = e.at("obstacles");
      if (!obs.is_array()) throw FormatError("environment.obstacles must be an array");
      for (std::size_t i = 0; i < obs.size(); ++i) {
        const std::string ow = "environment.obstacles[" + std::to_string(i) + "]";
        detail::check_keys(obs[i], {"center", "radius", "velocity"}, ow);
        SphereObstacle o;
        o.center = detail::vec3(obs[i].at("center"), ow + ".center");
        o.radius = detail::get<double>(obs[i], "radius", ow);
        if (obs[i].contains("velocity")) o.velocity = detail::vec3(obs[i].at("velocity"), ow + ".velocity");
        spec.obstacles.push_back(o);
      }
    }
  }
  if (j.contains("goal")) {
    const Json& g = j.at("goal");
    detail::check_keys(g, {"pose", "spread"}, "goal");
    if (g.contains("pose")) s.goal = pose_from_json(g.at("pose"), "goal.pose");
    detail::get_opt(g, "spread", s.goal_spread, "goal");
  }
  if (j.contains("mppi")) s.mppi = mppi_config_from_json(j.at("mppi"));
  detail::get_opt(j, "t_max", s.t_max, where);
  detail::get_opt(j, "cloud_points", s.cloud_points, where);
  detail::get_opt(j, "seed", s.seed, where);
  detail::get_opt(j, "success_threshold", s.success_threshold, where);
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("scenario: ") + e.what());
  }
  return s;
}

inline Scenario load_scenario(const std::filesystem::path& path) { return scenario_from_json(parse_json_file(path)); }

// Trajectory logs and tables.

inline void append_trajectory_line(std::string& out, const StepRecord& r, bool with_timing) {
  auto list = [&](auto&& values) {
    out += '[';
    bool first = true;
    for (double v : values) {
      if (!first) out += ',';
      first = false;
      append_double(out, v);
    }
    out += ']';
  };
  std::vector<double> q;
  for (const auto& l : r.q.links) q.insert(q.end(), {l.theta, l.phi});
  out += "{\"step\":" + std::to_string(r.step) + ",\"x\":";
  list(r.x.values);
  out += ",\"q\":";
  list(q);
  out += ",\"ee_pose\":";
  list(to_row_major(r.ee_pose));
  const std::pair<const char*, double> scalars[] = {{"min_cedf", r.min_cedf},     {"gt_clearance", r.gt_clearance},
                                                    {"cost_goal", r.cost.goal},   {"cost_coll", r.cost.coll},
                                                    {"cost_state", r.cost.state}, {"solve_ms", with_timing ? r.solve_ms : 0.0}};
  for (const auto& [key, value] : scalars) {
    out += ",\"";
    out += key;
    out += "\":";
    append_double(out, value);
  }
  out += "}\n";
}

inline std::string trajectory_jsonl(const EpisodeResult& ep, bool with_timing) {
  std::string out;
  for (const auto& r : ep.records) append_trajectory_line(out, r, with_timing);
  return out;
}

inline std::string plot_csv(const EpisodeResult& ep) {
  std::string out = "step,ee_goal_dist,gt_clearance\n";
  for (const auto& r : ep.records) {
    out += std::to_string(r.step) + ',';
    append_double(out, r.ee_goal_dist);
    out += ',';
    append_double(out, r.gt_clearance);
    out += '\n';
  }
  return out;
}

inline std::string history_csv(std::span<const EpochRecord> history) {
  std::string out = "epoch,train_loss,val_mae,val_rmse,val_moe\n";
  for (const auto& h : history) {
    out += std::to_string(h.epoch);
    for (double v : {h.train_loss, h.val.mae, h.val.rmse, h.val.moe}) {
      out += ',';
      append_double(out, v);
    }
    out += '\n';
  }
  return out;
}

inline std::string benchmark_csv(std::span<const BenchmarkRow> rows, bool with_timing) {
  std::string out = "mode,success,collision,stuck,mppi_ms_mean,mppi_ms_sd\n";
  for (const auto& r : rows) {
    out += r.mode;
    for (double v : {r.success, r.collision, r.stuck, with_timing ? r.mppi_ms_mean : 0.0,
                     with_timing ? r.mppi_ms_sd : 0.0}) {
      out += ',';
      append_double(out, v);
    }
    out += '\n';
  }
  return out;
}

}  // namespace ncedf
