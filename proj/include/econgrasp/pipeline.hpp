#pragma once

// End-to-end pipeline: synth -> compile -> analyze -> match -> head-check ->
// predict -> eval, driven by a key=value config. Every text artifact starts
// with the config echo; worker count and output location are not echoed, so
// artifacts do not depend on them.
//
// Layout under work_dir:
//   data/objects/library.json  data/objects/object_XXX.dgl
//   data/scenes/scene_XXXX.json
//   labels/scene_XXXX.egl
//   reports/{compile_stats,ambiguity,match,head_check,eval,summary}.txt
//   reports/compile_errors.txt (only when some scene failed to compile)
//   predictions/label_oracle.txt

#include "econgrasp/ambiguity.hpp"
#include "econgrasp/evaluator.hpp"
#include "econgrasp/head_check.hpp"
#include "econgrasp/label_store.hpp"
#include "econgrasp/matching.hpp"
#include "econgrasp/supervision.hpp"
#include "econgrasp/synth.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace econgrasp {

namespace fs = std::filesystem;

/// Shortest text that reads back to the same double.
inline std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string fmt_fixed(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

struct LibraryEntry {
  Shape shape = Shape::box;
  std::vector<double> dimensions;
};

inline std::vector<LibraryEntry> default_library() {
  return {{Shape::box, {0.04, 0.05, 0.06}},    {Shape::box, {0.03, 0.03, 0.08}}, {Shape::cylinder, {0.02, 0.07}},
          {Shape::cylinder, {0.03, 0.04}},     {Shape::sphere, {0.025}},         {Shape::plate, {0.05, 0.02}}};
}

/// "box:0.04:0.05:0.06;sphere:0.025"
inline std::vector<LibraryEntry> parse_library(const std::string& text) {
  std::vector<LibraryEntry> out;
  std::stringstream items(text);
  std::string item;
  while (std::getline(items, item, ';')) {
    if (item.empty()) continue;
    std::stringstream fields(item);
    std::string name;
    std::getline(fields, name, ':');
    LibraryEntry e;
    e.shape = shape_from_string(name);
    std::string dim;
    while (std::getline(fields, dim, ':')) {
      try {
        e.dimensions.push_back(std::stod(dim));
      } catch (const std::exception&) {
        throw ValidationError("bad library dimension '" + dim + "'");
      }
    }
    require(e.dimensions.size() == shape_dimension_count(e.shape), "wrong dimension count for library entry " + item);
    out.push_back(std::move(e));
  }
  require(!out.empty(), "object library is empty");
  return out;
}

inline std::string library_to_string(const std::vector<LibraryEntry>& lib) {
  std::string s;
  for (std::size_t i = 0; i < lib.size(); ++i) {
    if (i) s += ';';
    s += to_string(lib[i].shape);
    for (double d : lib[i].dimensions) s += ':' + fmt(d);
  }
  return s;
}

struct PipelineConfig {
  std::uint64_t seed = 7;
  int jobs = 1;
  std::string work_dir = "econgrasp_run";

  // grids
  int n_views = 300;
  int n_angles = 12;
  int n_depths = 4;
  std::vector<double> depth_grid{0.01, 0.02, 0.03, 0.04};
  std::vector<double> friction_grid{0.1, 0.3, 0.5, 0.7, 0.9, 1.1};
  double threshold_mu = 0.8;

  // gripper
  double max_width = 0.10;
  double finger_length = 0.06;
  double finger_thickness = 0.01;
  double finger_height = 0.02;
  double base_depth = 0.02;

  // data
  std::string library = library_to_string(default_library());
  double density = 20000.0;
  int n_scenes = 20;
  int min_objects = 3;
  int max_objects = 8;
  double scene_half_extent = 0.20;

  // matching
  double match_radius = 0.005;
  int match_samples = 1024;
  std::string sampling = "uniform";

  // head
  int head_feature_dim = 32;
  double head_group_radius = 0.05;
  double head_group_depth_lo = -0.01;
  double head_group_depth_hi = 0.04;
  int head_group_k = 32;
  int head_gradcheck_seeds = 20;
  int head_micro_scenes = 8;
  int head_micro_views = 60;
  int head_heldout = 10;
  int head_steps = 200;
  double head_rate = 1e-2;

  // evaluation
  std::string topk_rule = "available";
  std::string predictions;  // empty: the pipeline's own label-oracle predictions

  GripperModel gripper() const {
    GripperModel g;
    g.max_width = max_width;
    g.finger_length = finger_length;
    g.finger_thickness = finger_thickness;
    g.finger_height = finger_height;
    g.base_depth = base_depth;
    g.depth_grid = depth_grid;
    g.angle_count = n_angles;
    g.friction_grid = friction_grid;
    return g;
  }

  GraspabilityRule rule() const { return {threshold_mu, true}; }

  SamplingStrategy sampling_strategy() const {
    if (sampling == "uniform") return SamplingStrategy::uniform;
    if (sampling == "fps") return SamplingStrategy::farthest_point;
    throw ValidationError("sampling must be 'uniform' or 'fps'");
  }

  SceneLayout layout() const {
    SceneLayout l;
    l.min_objects = min_objects;
    l.max_objects = max_objects;
    l.half_extent = scene_half_extent;
    return l;
  }

  fs::path dir(const char* sub) const { return fs::path(work_dir) / sub; }

  void validate() const {
    require(n_views >= 1, "n_views must be at least 1");
    require(n_angles >= 1, "n_angles must be at least 1");
    require(n_depths >= 1, "n_depths must be at least 1");
    require(static_cast<int>(depth_grid.size()) == n_depths, "depth_grid must have n_depths entries");
    gripper().validate();
    require(threshold_mu > 0.0, "threshold_mu must be positive");
    require(density > 0.0, "density must be positive");
    require(n_scenes >= 1, "n_scenes must be at least 1");
    require(min_objects >= 1 && max_objects >= min_objects, "invalid object count range");
    require(scene_half_extent > 0.0, "scene_half_extent must be positive");
    require(match_radius > 0.0, "match_radius must be positive");
    require(match_samples >= 1, "match_samples must be at least 1");
    sampling_strategy();
    head_config().validate();
    require(head_gradcheck_seeds >= 1 && head_micro_scenes >= 1 && head_micro_views >= 1 && head_heldout >= 1,
            "head check sizes must be positive");
    require(head_steps >= 0 && head_rate > 0.0, "invalid head training schedule");
    topk_rule_from_string(topk_rule);
    require(jobs >= 1, "jobs must be at least 1");
    require(!work_dir.empty(), "work_dir must not be empty");
    parse_library(library);
  }

  /// A full run writes label_oracle.txt, so it cannot also read it.
  void validate_for_run() const {
    validate();
    if (!predictions.empty()) {
      const fs::path in = fs::weakly_canonical(predictions);
      const fs::path out = fs::weakly_canonical(dir("predictions") / "label_oracle.txt");
      require(in != out, "predictions input must differ from the pipeline's own prediction output");
    }
  }

  head::HeadConfig head_config() const {
    head::HeadConfig c;
    c.feature_dim = head_feature_dim;
    c.n_views = head_micro_views;
    c.n_angles = n_angles;
    c.n_depths = n_depths;
    c.group_radius = head_group_radius;
    c.group_depth_lo = head_group_depth_lo;
    c.group_depth_hi = head_group_depth_hi;
    c.group_k = head_group_k;
    return c;
  }

  /// Every key with its value, in a fixed order.
  std::vector<std::pair<std::string, std::string>> entries(bool with_location = true) const {
    auto list = [](const std::vector<double>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i]);
      return s;
    };
    std::vector<std::pair<std::string, std::string>> e{
        {"seed", std::to_string(seed)},
        {"n_views", std::to_string(n_views)},
        {"n_angles", std::to_string(n_angles)},
        {"n_depths", std::to_string(n_depths)},
        {"depth_grid", list(depth_grid)},
        {"friction_grid", list(friction_grid)},
        {"threshold_mu", fmt(threshold_mu)},
        {"max_width", fmt(max_width)},
        {"finger_length", fmt(finger_length)},
        {"finger_thickness", fmt(finger_thickness)},
        {"finger_height", fmt(finger_height)},
        {"base_depth", fmt(base_depth)},
        {"library", library},
        {"density", fmt(density)},
        {"n_scenes", std::to_string(n_scenes)},
        {"min_objects", std::to_string(min_objects)},
        {"max_objects", std::to_string(max_objects)},
        {"scene_half_extent", fmt(scene_half_extent)},
        {"match_radius", fmt(match_radius)},
        {"match_samples", std::to_string(match_samples)},
        {"sampling", sampling},
        {"head_feature_dim", std::to_string(head_feature_dim)},
        {"head_group_radius", fmt(head_group_radius)},
        {"head_group_depth_lo", fmt(head_group_depth_lo)},
        {"head_group_depth_hi", fmt(head_group_depth_hi)},
        {"head_group_k", std::to_string(head_group_k)},
        {"head_gradcheck_seeds", std::to_string(head_gradcheck_seeds)},
        {"head_micro_scenes", std::to_string(head_micro_scenes)},
        {"head_micro_views", std::to_string(head_micro_views)},
        {"head_heldout", std::to_string(head_heldout)},
        {"head_steps", std::to_string(head_steps)},
        {"head_rate", fmt(head_rate)},
        {"topk_rule", topk_rule},
        {"predictions", predictions},
    };
    if (with_location) {
      e.emplace_back("work_dir", work_dir);
      e.emplace_back("jobs", std::to_string(jobs));
    }
    return e;
  }

  /// Echo written at the top of every text artifact.
  std::string echo() const {
    std::string s;
    for (const auto& [k, v] : entries(false)) s += "# " + k + (v.empty() ? " =" : " = " + v) + "\n";
    return s;
  }

  nlohmann::ordered_json echo_json() const {
    nlohmann::ordered_json j;
    for (const auto& [k, v] : entries(false)) j[k] = v;
    return j;
  }

  void set(const std::string& key, const std::string& value) {
    auto to_int = [&](int& out) {
      std::size_t pos = 0;
      try {
        out = std::stoi(value, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      require(pos == value.size() && !value.empty(), "config key " + key + " expects an integer, got '" + value + "'");
    };
    auto to_double = [&](double& out) {
      std::size_t pos = 0;
      try {
        out = std::stod(value, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      require(pos == value.size() && !value.empty(), "config key " + key + " expects a number, got '" + value + "'");
    };
    auto to_list = [&](std::vector<double>& out) {
      out.clear();
      std::stringstream ss(value);
      std::string item;
      while (std::getline(ss, item, ',')) {
        std::size_t pos = 0;
        double v = 0.0;
        try {
          v = std::stod(item, &pos);
        } catch (const std::exception&) {
          pos = 0;
        }
        require(pos == item.size() && !item.empty(), "config key " + key + " expects a comma-separated list");
        out.push_back(v);
      }
    };
    if (key == "seed") {
      std::size_t pos = 0;
      try {
        seed = std::stoull(value, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      require(pos == value.size() && !value.empty(), "seed must be a non-negative integer");
    } else if (key == "jobs") to_int(jobs);
    else if (key == "work_dir") work_dir = value;
    else if (key == "n_views") to_int(n_views);
    else if (key == "n_angles") to_int(n_angles);
    else if (key == "n_depths") to_int(n_depths);
    else if (key == "depth_grid") to_list(depth_grid);
    else if (key == "friction_grid") to_list(friction_grid);
    else if (key == "threshold_mu") to_double(threshold_mu);
    else if (key == "max_width") to_double(max_width);
    else if (key == "finger_length") to_double(finger_length);
    else if (key == "finger_thickness") to_double(finger_thickness);
    else if (key == "finger_height") to_double(finger_height);
    else if (key == "base_depth") to_double(base_depth);
    else if (key == "library") library = value;
    else if (key == "density") to_double(density);
    else if (key == "n_scenes") to_int(n_scenes);
    else if (key == "min_objects") to_int(min_objects);
    else if (key == "max_objects") to_int(max_objects);
    else if (key == "scene_half_extent") to_double(scene_half_extent);
    else if (key == "match_radius") to_double(match_radius);
    else if (key == "match_samples") to_int(match_samples);
    else if (key == "sampling") sampling = value;
    else if (key == "head_feature_dim") to_int(head_feature_dim);
    else if (key == "head_group_radius") to_double(head_group_radius);
    else if (key == "head_group_depth_lo") to_double(head_group_depth_lo);
    else if (key == "head_group_depth_hi") to_double(head_group_depth_hi);
    else if (key == "head_group_k") to_int(head_group_k);
    else if (key == "head_gradcheck_seeds") to_int(head_gradcheck_seeds);
    else if (key == "head_micro_scenes") to_int(head_micro_scenes);
    else if (key == "head_micro_views") to_int(head_micro_views);
    else if (key == "head_heldout") to_int(head_heldout);
    else if (key == "head_steps") to_int(head_steps);
    else if (key == "head_rate") to_double(head_rate);
    else if (key == "topk_rule") topk_rule = value;
    else if (key == "predictions") predictions = value;
    else throw ValidationError("unknown config key '" + key + "'");
  }

  /// key = value lines; '#' starts a comment.
  static PipelineConfig parse(std::istream& in) {
    PipelineConfig c;
    std::string line;
    int line_no = 0;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      require(eq != std::string::npos, "config line " + std::to_string(line_no) + ": expected key = value");
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return c;
  }

  static PipelineConfig load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    return parse(in);
  }

  std::string to_text() const {
    std::string s;
    for (const auto& [k, v] : entries()) s += k + " = " + v + "\n";
    return s;
  }
};

/// An error tagged with the pipeline stage that raised it.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("stage " + stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// ---------------------------------------------------------------- dataset I/O

inline std::string object_file(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "object_%03zu.dgl", i);
  return buf;
}
inline std::string scene_stem(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04zu", i);
  return buf;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline nlohmann::ordered_json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  return make_rng(seed * 1000003ull + index, stream)();
}

/// Library objects; points are regenerated from (shape, dims, density, seed).
inline std::vector<SyntheticObject> build_library(const PipelineConfig& c) {
  std::vector<SyntheticObject> out;
  const auto lib = parse_library(c.library);
  for (std::size_t i = 0; i < lib.size(); ++i) {
    out.push_back(make_object(lib[i].shape, lib[i].dimensions, c.density, derive_seed(c.seed, 1, i)));
  }
  return out;
}

inline nlohmann::ordered_json scene_to_json(const SceneDescription& s, const PipelineConfig& c) {
  nlohmann::ordered_json j;
  j["config"] = c.echo_json();
  j["seed"] = s.seed;
  j["n_points"] = s.size();
  auto& objs = j["objects"] = nlohmann::ordered_json::array();
  for (const SceneInstance& inst : s.objects) {
    nlohmann::ordered_json o;
    o["library_id"] = inst.library_id;
    std::vector<double> r;
    for (int row = 0; row < 3; ++row) {
      for (int col = 0; col < 3; ++col) r.push_back(inst.pose.rotation()(row, col));
    }
    o["rotation"] = r;
    o["translation"] = {inst.pose.translation().x(), inst.pose.translation().y(), inst.pose.translation().z()};
    objs.push_back(o);
  }
  return j;
}

inline SceneDescription scene_from_json(const nlohmann::ordered_json& j, const std::vector<SyntheticObject>& library) {
  try {
    std::vector<SyntheticObject> objects;
    std::vector<RigidPose> poses;
    std::vector<int> ids;
    for (const auto& o : j.at("objects")) {
      const int id = o.at("library_id").get<int>();
      require(id >= 0 && static_cast<std::size_t>(id) < library.size(), "scene references unknown library object");
      const auto r = o.at("rotation").get<std::vector<double>>();
      const auto t = o.at("translation").get<std::vector<double>>();
      require(r.size() == 9 && t.size() == 3, "scene pose has the wrong shape");
      Mat3 rot;
      for (int row = 0; row < 3; ++row) {
        for (int col = 0; col < 3; ++col) rot(row, col) = r[static_cast<std::size_t>(row * 3 + col)];
      }
      objects.push_back(library[static_cast<std::size_t>(id)]);
      poses.emplace_back(rot, Vec3(t[0], t[1], t[2]));
      ids.push_back(id);
    }
    SceneDescription s = make_scene(std::move(objects), std::move(poses), j.at("seed").get<std::uint64_t>(), 1e-9,
                                    std::move(ids));
    require(s.size() == j.at("n_points").get<std::size_t>(), "scene point count disagrees with its library");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("scene file: ") + e.what());
  }
}

struct Dataset {
  std::vector<SyntheticObject> library;
  std::vector<SceneDescription> scenes;
};

/// Where each stage reads and writes. Defaults live under work_dir; the CLI
/// may point single stages elsewhere.
struct Paths {
  fs::path data;         // synth output: objects/ and scenes/
  fs::path labels;       // economic scene labels
  fs::path reports;
  fs::path predictions;  // label-oracle predictions directory

  static Paths under(const fs::path& root) {
    return {root / "data", root / "labels", root / "reports", root / "predictions"};
  }

  fs::path objects() const { return data / "objects"; }
  fs::path scenes() const { return data / "scenes"; }

  void validate() const {
    const std::vector<fs::path> all{data, labels, reports, predictions};
    for (std::size_t i = 0; i < all.size(); ++i) {
      require(!all[i].empty(), "output paths must not be empty");
      for (std::size_t j = 0; j < i; ++j) {
        require(fs::weakly_canonical(all[i]) != fs::weakly_canonical(all[j]),
                "input and output directories must be distinct: " + all[i].string());
      }
    }
  }
};

inline Paths paths_of(const PipelineConfig& c) { return Paths::under(c.work_dir); }

/// Rebuilds the library recorded by synth, then the scenes from their poses.
inline Dataset load_dataset(const Paths& paths) {
  Dataset d;
  const auto lib = read_json(paths.objects() / "library.json");
  try {
    for (const auto& o : lib.at("objects")) {
      d.library.push_back(make_object(shape_from_string(o.at("shape").get<std::string>()),
                                      o.at("dimensions").get<std::vector<double>>(), o.at("density").get<double>(),
                                      o.at("seed").get<std::uint64_t>()));
      require(d.library.back().size() == o.at("n_points").get<std::size_t>(), "library object point count changed");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("library.json: ") + e.what());
  }
  for (std::size_t i = 0;; ++i) {
    const fs::path f = paths.scenes() / (scene_stem(i) + ".json");
    if (!fs::exists(f)) break;
    d.scenes.push_back(scene_from_json(read_json(f), d.library));
  }
  require(!d.scenes.empty(), "no scenes found in " + paths.scenes().string());
  return d;
}

inline DenseObjectLabels load_dense_object(const PipelineConfig& c, const Paths& paths, std::size_t id) {
  DenseObjectLabels d = read_dense(paths.objects() / object_file(id));
  require(d.n_views() == c.n_views && d.n_angles() == c.n_angles && d.n_depths() == c.n_depths,
          "dense labels " + object_file(id) + " do not match the configured grid");
  return d;
}

inline std::vector<DenseObjectLabels> load_dense(const PipelineConfig& c, const Paths& paths, std::size_t n) {
  std::vector<DenseObjectLabels> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(load_dense_object(c, paths, i));
  return out;
}

inline std::size_t library_size(const Paths& paths) {
  try {
    return read_json(paths.objects() / "library.json").at("objects").size();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("library.json: ") + e.what());
  }
}

// ---------------------------------------------------------------- stages

/// Object library with dense labels, plus scene descriptions.
inline void stage_synth(const PipelineConfig& c, const Paths& paths, std::ostream& log) {
  fs::create_directories(paths.objects());
  fs::create_directories(paths.scenes());
  const ViewSphere sphere(c.n_views);
  const GripperModel gripper = c.gripper();
  const auto library = build_library(c);
  nlohmann::ordered_json lib;
  lib["config"] = c.echo_json();
  lib["objects"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < library.size(); ++i) {
    const SyntheticObject& o = library[i];
    lib["objects"].push_back({{"id", i},
                              {"shape", to_string(o.shape)},
                              {"dimensions", o.dimensions},
                              {"density", o.density},
                              {"seed", o.seed},
                              {"n_points", o.size()},
                              {"labels", object_file(i)}});
    write_dense(paths.objects() / object_file(i), label_object(o, sphere, gripper, c.jobs));
    log << "synth: labelled " << to_string(o.shape) << " (" << o.size() << " points)\n";
  }
  write_text(paths.objects() / "library.json", lib.dump(2) + "\n");
  for (int i = 0; i < c.n_scenes; ++i) {
    const auto k = static_cast<std::size_t>(i);
    const SceneDescription s = generate_scene(library, derive_seed(c.seed, 2, k), c.layout());
    write_text(paths.scenes() / (scene_stem(k) + ".json"), scene_to_json(s, c).dump(2) + "\n");
  }
  log << "synth: " << c.n_scenes << " scenes\n";
}

struct CompileStats {
  std::size_t n_scenes = 0;
  std::size_t points_total = 0;
  std::size_t points_kept = 0;
  double kept_fraction = 0.0;
  std::uint64_t dense_bytes = 0;  // each object file counted once per scene that uses it
  std::uint64_t economic_bytes = 0;
  double ratio = 0.0;
  double dense_bytes_per_point = 0.0;
  double economic_bytes_per_point = 0.0;
  double formula_ratio = 0.0;  // per-point byte formula, headers ignored
  double formula_error = 0.0;  // |ratio / formula_ratio - 1|

  std::vector<std::pair<std::string, std::string>> entries() const {
    return {{"scenes", std::to_string(n_scenes)},
            {"points_total", std::to_string(points_total)},
            {"points_kept", std::to_string(points_kept)},
            {"kept_fraction", fmt(kept_fraction)},
            {"dense_bytes", std::to_string(dense_bytes)},
            {"economic_bytes", std::to_string(economic_bytes)},
            {"ratio", fmt(ratio)},
            {"dense_bytes_per_point", fmt(dense_bytes_per_point)},
            {"economic_bytes_per_point", fmt(economic_bytes_per_point)},
            {"formula_ratio", fmt(formula_ratio)},
            {"formula_error", fmt(formula_error)}};
  }
};

inline std::string format_report(const CompileStats& st) {
  std::ostringstream r;
  for (const auto& [k, v] : st.entries()) {
    std::string key = k;
    key.resize(26, ' ');
    r << key << v << "\n";
  }
  return r.str();
}

inline CompileStats stage_compile(const PipelineConfig& c, const Paths& paths, std::ostream& log) {
  fs::create_directories(paths.labels);
  fs::create_directories(paths.reports);
  const Dataset d = load_dataset(paths);
  // Objects load lazily so a bad file only fails the scenes that use it.
  std::vector<std::optional<DenseObjectLabels>> dense(d.library.size());
  std::vector<std::string> dense_error(d.library.size());
  auto object_labels = [&](std::size_t id) -> const DenseObjectLabels& {
    if (!dense_error[id].empty()) throw Error(dense_error[id]);
    if (!dense[id]) {
      try {
        dense[id] = load_dense_object(c, paths, id);
      } catch (const std::exception& e) {
        dense_error[id] = e.what();
        throw;
      }
    }
    return *dense[id];
  };
  const ViewSphere sphere(c.n_views);
  const GripperModel gripper = c.gripper();
  AssemblyOptions opt;
  opt.rule = c.rule();
  opt.jobs = c.jobs;
  std::vector<fs::path> dense_refs, econ_files;
  std::vector<std::string> errors;
  CompileStats st;
  st.n_scenes = d.scenes.size();
  for (std::size_t i = 0; i < d.scenes.size(); ++i) {
    const SceneDescription& s = d.scenes[i];
    try {
      std::vector<const DenseObjectLabels*> refs;
      for (const SceneInstance& inst : s.objects) refs.push_back(&object_labels(static_cast<std::size_t>(inst.library_id)));
      const EconomicSceneLabels labels = prune_points(assemble_scene(s, refs, sphere, gripper, opt), gripper, opt.rule);
      const fs::path out = paths.labels / (scene_stem(i) + ".egl");
      write_economic(out, labels);
      econ_files.push_back(out);
      for (const SceneInstance& inst : s.objects) {
        dense_refs.push_back(paths.objects() / object_file(static_cast<std::size_t>(inst.library_id)));
      }
      st.points_total += s.size();
      st.points_kept += labels.size();
    } catch (const std::exception& e) {
      errors.push_back(scene_stem(i) + ": " + e.what());
    }
  }
  const fs::path error_file = paths.reports / "compile_errors.txt";
  if (!errors.empty()) {
    std::string text;
    for (const std::string& e : errors) text += e + "\n";
    write_text(error_file, text);
    throw Error(std::to_string(errors.size()) + " of " + std::to_string(d.scenes.size()) + " scenes failed, see " +
                error_file.string() + "; first: " + errors.front());
  }
  fs::remove(error_file);
  const SizeReport sr = size_report(dense_refs, econ_files);
  st.dense_bytes = sr.dense_bytes;
  st.economic_bytes = sr.economic_bytes;
  st.ratio = sr.ratio;
  st.kept_fraction = static_cast<double>(st.points_kept) / static_cast<double>(st.points_total);
  st.dense_bytes_per_point = static_cast<double>(kDenseEntryBytes) * c.n_views * c.n_angles * c.n_depths;
  st.economic_bytes_per_point = static_cast<double>(kEconomicPointBytes + kEconomicViewBytes * c.n_views);
  if (st.points_kept > 0) {
    st.formula_ratio = st.dense_bytes_per_point / (st.economic_bytes_per_point * st.kept_fraction);
    st.formula_error = std::abs(st.ratio / st.formula_ratio - 1.0);
  }
  write_text(paths.reports / "compile_stats.txt", c.echo() + format_report(st));
  std::string kv;
  for (const auto& [k, v] : st.entries()) kv += k + "=" + v + "\n";
  write_text(paths.reports / "compile_stats.kv", kv);
  log << "compile: kept " << st.points_kept << "/" << st.points_total << " points, size ratio " << fmt_fixed(st.ratio, 2)
      << "\n";
  return st;
}

inline std::string format_report(const AmbiguityReport& a) {
  auto cell = [](double v) { return std::isnan(v) ? std::string("-") : fmt_fixed(v, 4); };
  std::ostringstream r;
  r << "points_counted " << a.n_points_counted << " of " << a.n_points_total << "\n";
  r << "mean_good_grasps_per_point " << fmt_fixed(a.mean_good_per_point, 4) << "\n";
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-20s %10s %10s %10s\n", "condition", "std_view", "std_angle", "std_depth");
  r << buf;
  for (const AmbiguityRow& row : a.rows) {
    if (!row.stds) {
      std::snprintf(buf, sizeof buf, "%-20s %10s %10s %10s\n", to_string(row.mode), "-", "-", "-");
    } else {
      std::snprintf(buf, sizeof buf, "%-20s %10s %10s %10s\n", to_string(row.mode), cell(row.stds->view).c_str(),
                    cell(row.stds->angle).c_str(), cell(row.stds->depth).c_str());
    }
    r << buf;
  }
  for (const AmbiguityRow& row : a.rows) {
    r << "row condition=" << to_string(row.mode);
    if (row.stds) {
      r << " std_view=" << fmt(row.stds->view) << " std_angle=" << fmt(row.stds->angle)
        << " std_depth=" << fmt(row.stds->depth);
    }
    r << "\n";
  }
  return r.str();
}

inline AmbiguityReport stage_analyze(const PipelineConfig& c, const Paths& paths, const fs::path& out,
                                     std::ostream& log) {
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  const auto dense = load_dense(c, paths, library_size(paths));
  std::vector<const DenseObjectLabels*> refs;
  for (const auto& d : dense) refs.push_back(&d);
  const AmbiguityReport a = ambiguity_report(refs, c.gripper(), c.rule(), c.jobs);
  write_text(out, c.echo() + format_report(a));
  log << "analyze: " << a.n_points_counted << " points with good grasps\n";
  return a;
}

inline constexpr int kMatchHistogramBins = 5;

struct MatchStats {
  std::size_t sampled = 0;
  std::size_t supervised = 0;
  double masked_fraction = 0.0;
  std::array<std::size_t, kMatchHistogramBins> histogram{};  // match distance over [0, radius]
};

inline std::string format_report(const MatchStats& m, double radius) {
  std::ostringstream r;
  r << "sampled " << m.sampled << "\nsupervised " << m.supervised << "\nmasked_fraction " << fmt_fixed(m.masked_fraction, 6)
    << "\nmatch distance histogram (mm)\n";
  for (int b = 0; b < kMatchHistogramBins; ++b) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "  [%.2f, %.2f%c %zu\n", 1000.0 * radius * b / kMatchHistogramBins,
                  1000.0 * radius * (b + 1) / kMatchHistogramBins, b + 1 == kMatchHistogramBins ? ']' : ')',
                  m.histogram[static_cast<std::size_t>(b)]);
    r << buf;
  }
  return r.str();
}

inline MatchStats stage_match(const PipelineConfig& c, const Paths& paths, std::ostream& log) {
  fs::create_directories(paths.reports);
  const Dataset d = load_dataset(paths);
  MatchStats st;
  for (std::size_t i = 0; i < d.scenes.size(); ++i) {
    const EconomicSceneLabels labels = read_economic(paths.labels / (scene_stem(i) + ".egl"));
    const SceneDescription& s = d.scenes[i];
    std::size_t count = static_cast<std::size_t>(c.match_samples);
    if (c.sampling_strategy() == SamplingStrategy::farthest_point) count = std::min(count, s.size());
    const auto idx = sample_indices(s.points, count, derive_seed(c.seed, 3, i), c.sampling_strategy());
    const SupervisionBundle b = make_bundle(s.points, idx, labels, c.match_radius);
    st.sampled += b.size();
    for (std::size_t k = 0; k < b.size(); ++k) {
      if (!b.mask[k]) continue;
      ++st.supervised;
      const double dist = (labels.point(static_cast<std::size_t>(b.match_index[k])).cast<double>() - b.sampled_points[k]).norm();
      const int bin = std::min(kMatchHistogramBins - 1, static_cast<int>(dist / c.match_radius * kMatchHistogramBins));
      ++st.histogram[static_cast<std::size_t>(bin)];
    }
  }
  st.masked_fraction = 1.0 - static_cast<double>(st.supervised) / static_cast<double>(st.sampled);
  const std::string text = format_report(st, c.match_radius);
  write_text(paths.reports / "match.txt", c.echo() + text);
  log << text;
  return st;
}

struct HeadCheckReport {
  std::vector<head::GradCheckResult> gradients;
  bool permutation_invariant = false;
  head::MicroTrainingReport training;
  double required_reduction = 0.5;
  double required_heldout = 0.8;

  bool gradients_pass() const {
    return std::all_of(gradients.begin(), gradients.end(), [](const auto& g) { return g.passed(); });
  }
  bool training_pass() const { return training.reduction >= required_reduction; }
  bool heldout_pass() const { return training.heldout_rate >= required_heldout; }
  bool passed() const { return gradients_pass() && permutation_invariant && training_pass() && heldout_pass(); }
};

inline std::string format_report(const HeadCheckReport& h) {
  std::ostringstream r;
  auto mark = [](bool ok) { return ok ? "PASS" : "FAIL"; };
  for (const auto& g : h.gradients) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "%s gradient %-16s max_rel_error %.3e over %zu components, %d seeds (worst %s)\n",
                  mark(g.passed()), g.name.c_str(), g.max_rel_error, g.components, g.seeds, g.worst.c_str());
    r << buf;
  }
  r << mark(h.permutation_invariant) << " global attention permutation invariance\n";
  const std::size_t steps = h.training.history.empty() ? 0 : h.training.history.size() - 1;
  r << mark(h.training_pass()) << " micro-training loss " << fmt_fixed(h.training.initial, 6) << " -> "
    << fmt_fixed(h.training.final, 6) << " (reduction " << fmt_fixed(h.training.reduction, 4) << ", " << steps
    << " steps)\n";
  r << mark(h.heldout_pass()) << " held-out plate top-1 success at mu=0.8: " << h.training.heldout_success << "/"
    << h.training.heldout << "\n";
  return r.str();
}

inline HeadCheckReport run_head_check(const PipelineConfig& c, std::uint64_t seed, int steps, double rate) {
  HeadCheckReport h;
  h.gradients = head::gradient_check_suite(c.head_gradcheck_seeds);
  h.permutation_invariant = head::check_permutation_invariance(c.head_gradcheck_seeds);
  head::PlateDatasetOptions o;
  o.n_views = c.head_micro_views;
  o.feature_dim = c.head_feature_dim;
  h.training = head::micro_training(seed, steps, rate, c.head_micro_scenes, c.head_heldout, o, c.jobs);
  return h;
}

inline HeadCheckReport stage_head_check(const PipelineConfig& c, const Paths& paths, std::ostream& log) {
  fs::create_directories(paths.reports);
  const HeadCheckReport h = run_head_check(c, c.seed, c.head_steps, c.head_rate);
  const std::string text = format_report(h);
  write_text(paths.reports / "head_check.txt", c.echo() + text);
  log << text;
  return h;
}

/// Label-derived predictions: for every kept label point, the best grasp of
/// its highest-graspness view, scored by its score class.
inline fs::path stage_predict(const PipelineConfig& c, const Paths& paths, std::ostream& log) {
  fs::create_directories(paths.predictions);
  std::ostringstream out;
  out << c.echo() << "# scene_id x y z v a d w s\n";
  std::size_t total = 0;
  for (std::size_t i = 0;; ++i) {
    const fs::path f = paths.labels / (scene_stem(i) + ".egl");
    if (!fs::exists(f)) break;
    const EconomicSceneLabels labels = read_economic(f);
    std::vector<GraspPose> grasps;
    for (std::size_t k = 0; k < labels.size(); ++k) {
      const int v = head::teacher_view(labels.view_graspness(k));
      const BestGrasp& b = labels.best(k)[static_cast<std::size_t>(v - 1)];
      if (!b.feasible()) continue;
      GraspPose g;
      g.frame = Frame::scene;
      g.center = labels.point(k).cast<double>();
      g.view = v;
      g.angle = b.angle;
      g.depth = b.depth;
      g.width = b.width;
      g.score = kScoreGrid[b.score_class];
      grasps.push_back(g);
    }
    grasps = rank_grasps(std::move(grasps));
    if (grasps.size() > static_cast<std::size_t>(kTopK)) grasps.resize(kTopK);
    total += grasps.size();
    write_predictions(out, static_cast<int>(i), grasps);
  }
  const fs::path path = paths.predictions / "label_oracle.txt";
  write_text(path, out.str());
  log << "predict: " << total << " grasps\n";
  return path;
}

inline std::string format_report(const EvalResult& e) {
  std::ostringstream r;
  r << "topk_rule " << to_string(e.rule) << "\n";
  r << "scenes " << e.n_scenes << "\n";
  for (const auto& [mu, v] : e.ap_by_mu) r << "AP_mu=" << fmt_fixed(mu, 1) << " " << fmt_fixed(v, 6) << "\n";
  r << "AP " << fmt_fixed(e.ap, 6) << "\n";
  r << "failure_count " << e.failure_count << "\n";
  return r.str();
}

inline EvalResult stage_eval(const PipelineConfig& c, const Paths& paths, const fs::path& predictions,
                             std::ostream& log) {
  fs::create_directories(paths.reports);
  const Dataset d = load_dataset(paths);
  std::ifstream in(predictions);
  if (!in) throw IoError("cannot open predictions " + predictions.string());
  const auto parsed = parse_predictions(in);
  std::vector<std::vector<GraspPose>> ranked(d.scenes.size());
  for (const auto& [scene, grasps] : parsed) {
    require(scene >= 0 && static_cast<std::size_t>(scene) < d.scenes.size(),
            "predictions reference unknown scene " + std::to_string(scene));
    ranked[static_cast<std::size_t>(scene)] = rank_grasps(grasps);
  }
  const EvalResult e =
      evaluate(ranked, d.scenes, c.gripper(), ViewSphere(c.n_views), topk_rule_from_string(c.topk_rule), c.jobs);
  const std::string text = format_report(e);
  write_text(paths.reports / "eval.txt", c.echo() + text);
  log << text;
  return e;
}

struct PipelineSummary {
  CompileStats compile;
  AmbiguityReport ambiguity;
  MatchStats match;
  HeadCheckReport head;
  EvalResult eval;
};

inline constexpr const char* kIncompleteMarker = "INCOMPLETE";

/// Runs a stage body, tagging any failure with the stage name.
template <class Fn>
auto run_stage(const std::string& stage, Fn&& fn) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

/// Runs every stage in order. While running, and after a failure,
/// work_dir/INCOMPLETE names the stage in progress.
inline PipelineSummary run_pipeline(const PipelineConfig& c, std::ostream& log) {
  run_stage("config", [&] { c.validate_for_run(); });
  const Paths paths = paths_of(c);
  run_stage("config", [&] { paths.validate(); });
  fs::create_directories(c.work_dir);
  const fs::path marker = fs::path(c.work_dir) / kIncompleteMarker;
  PipelineSummary s;
  auto step = [&](const char* name, auto&& fn) {
    write_text(marker, std::string("stage ") + name + "\n");
    const auto t0 = std::chrono::steady_clock::now();
    run_stage(name, fn);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << "[" << name << " " << fmt_fixed(secs, 1) << " s]\n";
  };
  step("synth", [&] { stage_synth(c, paths, log); });
  step("compile", [&] { s.compile = stage_compile(c, paths, log); });
  step("analyze", [&] { s.ambiguity = stage_analyze(c, paths, paths.reports / "ambiguity.txt", log); });
  step("match", [&] { s.match = stage_match(c, paths, log); });
  step("head-check", [&] { s.head = stage_head_check(c, paths, log); });
  fs::path predictions = c.predictions;
  if (predictions.empty()) step("predict", [&] { predictions = stage_predict(c, paths, log); });
  step("eval", [&] { s.eval = stage_eval(c, paths, predictions, log); });

  std::ostringstream r;
  r << c.echo();
  r << "== compile\n" << format_report(s.compile);
  r << "== ambiguity\n" << format_report(s.ambiguity);
  r << "== match\n" << format_report(s.match, c.match_radius);
  r << "== head-check\n" << format_report(s.head);
  r << "== eval\n" << format_report(s.eval);
  write_text(paths.reports / "summary.txt", r.str());
  fs::remove(marker);
  return s;
}

}  // namespace econgrasp
