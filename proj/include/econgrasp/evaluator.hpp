#pragma once

// Force-closure success per friction coefficient and top-k averaged precision.

#include "econgrasp/geometry.hpp"
#include "econgrasp/synth.hpp"

#include <array>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace econgrasp {

inline constexpr std::array<double, 5> kEvalFrictions{0.2, 0.4, 0.6, 0.8, 1.0};
inline constexpr int kTopK = 50;

/// How a list shorter than 50 is scored: `available` averages over
/// k = 1..min(50, n); `fixed50` always averages over 50 slots, missing ones failing.
enum class TopKRule { available, fixed50 };

inline TopKRule topk_rule_from_string(const std::string& s) {
  if (s == "available") return TopKRule::available;
  if (s == "fixed50") return TopKRule::fixed50;
  throw ValidationError("unknown top-k rule: " + s);
}

inline const char* to_string(TopKRule r) { return r == TopKRule::available ? "available" : "fixed50"; }

inline bool grasp_success(const GraspPose& g, const SceneDescription& scene, double mu, const GripperModel& gripper,
                          const ViewSphere& sphere) {
  if (gripper_collision(g, scene.points, gripper, sphere).colliding) return false;
  const auto contacts = find_contacts(g, scene.points, scene.normals, gripper, sphere);
  if (!contacts) return false;
  return force_closure(*contacts, grasp_rotation(g, sphere, gripper).col(0), mu);
}

/// Average over k of (successes among the top k) / k, from per-grasp outcomes
/// already in ranking order.
inline double ap_from_outcomes(const std::vector<bool>& success, TopKRule rule = TopKRule::available) {
  if (success.empty()) return 0.0;
  const int n = static_cast<int>(std::min<std::size_t>(success.size(), kTopK));
  const int slots = rule == TopKRule::available ? n : kTopK;
  double sum = 0.0;
  int hits = 0;
  for (int k = 1; k <= slots; ++k) {
    if (k <= n && success[static_cast<std::size_t>(k - 1)]) ++hits;
    sum += static_cast<double>(hits) / k;
  }
  return sum / slots;
}

/// Stable sort by descending score: ties keep emission order.
inline std::vector<GraspPose> rank_grasps(std::vector<GraspPose> grasps) {
  std::stable_sort(grasps.begin(), grasps.end(), [](const GraspPose& a, const GraspPose& b) { return a.score > b.score; });
  return grasps;
}

inline double ap_mu(const std::vector<GraspPose>& ranked, const SceneDescription& scene, double mu,
                    const GripperModel& gripper, const ViewSphere& sphere, TopKRule rule = TopKRule::available) {
  std::vector<bool> success;
  for (std::size_t i = 0; i < ranked.size() && i < static_cast<std::size_t>(kTopK); ++i) {
    success.push_back(grasp_success(ranked[i], scene, mu, gripper, sphere));
  }
  return ap_from_outcomes(success, rule);
}

struct EvalResult {
  double ap = 0.0;
  std::map<double, double> ap_by_mu;
  std::vector<bool> per_scene_success_at_02;
  int failure_count = 0;
  std::size_t n_scenes = 0;
  TopKRule rule = TopKRule::available;
};

/// Per-scene success tables: [scene][mu][rank].
using SuccessTable = std::vector<std::array<std::vector<bool>, kEvalFrictions.size()>>;

inline SuccessTable success_table(const std::vector<std::vector<GraspPose>>& ranked_per_scene,
                                  const std::vector<SceneDescription>& scenes, const GripperModel& gripper,
                                  const ViewSphere& sphere, int jobs = 1) {
  require(!scenes.empty(), "evaluation needs at least one scene");
  require(ranked_per_scene.size() == scenes.size(), "need one prediction list per scene");
  SuccessTable table(scenes.size());
  parallel_for(scenes.size(), jobs, [&](std::size_t s) {
    const auto& ranked = ranked_per_scene[s];
    const std::size_t n = std::min<std::size_t>(ranked.size(), kTopK);
    for (std::size_t m = 0; m < kEvalFrictions.size(); ++m) table[s][m].resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const GraspPose& g = ranked[i];
      if (gripper_collision(g, scenes[s].points, gripper, sphere).colliding) continue;
      const auto contacts = find_contacts(g, scenes[s].points, scenes[s].normals, gripper, sphere);
      if (!contacts) continue;
      const Vec3 axis = grasp_rotation(g, sphere, gripper).col(0);
      for (std::size_t m = 0; m < kEvalFrictions.size(); ++m) {
        table[s][m][i] = force_closure(*contacts, axis, kEvalFrictions[m]);
      }
    }
  });
  return table;
}

inline EvalResult summarize(const SuccessTable& table, TopKRule rule = TopKRule::available) {
  require(!table.empty(), "evaluation needs at least one scene");
  EvalResult r;
  r.rule = rule;
  r.n_scenes = table.size();
  double ap_sum = 0.0;
  for (std::size_t m = 0; m < kEvalFrictions.size(); ++m) {
    double sum = 0.0;
    for (const auto& scene : table) sum += ap_from_outcomes(scene[m], rule);
    const double v = sum / static_cast<double>(table.size());
    r.ap_by_mu[kEvalFrictions[m]] = v;
    ap_sum += v;
  }
  r.ap = ap_sum / static_cast<double>(kEvalFrictions.size());
  for (const auto& scene : table) {
    bool any = false;
    for (bool s : scene[0]) any = any || s;
    r.per_scene_success_at_02.push_back(any);
    if (!any) ++r.failure_count;
  }
  return r;
}

/// Predictions must already be ranked per scene.
inline EvalResult evaluate(const std::vector<std::vector<GraspPose>>& ranked_per_scene,
                           const std::vector<SceneDescription>& scenes, const GripperModel& gripper,
                           const ViewSphere& sphere, TopKRule rule = TopKRule::available, int jobs = 1) {
  return summarize(success_table(ranked_per_scene, scenes, gripper, sphere, jobs), rule);
}

// Predictions file: one grasp per line, "scene_id x y z v a d w s"; '#' starts
// a comment. Grasps of a scene keep their line order as emission order.

inline std::map<int, std::vector<GraspPose>> parse_predictions(std::istream& in) {
  std::map<int, std::vector<GraspPose>> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    int scene = 0;
    if (!(ss >> scene)) continue;  // blank
    GraspPose g;
    g.frame = Frame::scene;
    double x, y, z;
    if (!(ss >> x >> y >> z >> g.view >> g.angle >> g.depth >> g.width >> g.score)) {
      throw ValidationError("predictions line " + std::to_string(line_no) + ": expected 'scene_id x y z v a d w s'");
    }
    std::string extra;
    if (ss >> extra) throw ValidationError("predictions line " + std::to_string(line_no) + ": trailing fields");
    g.center = Vec3(x, y, z);
    out[scene].push_back(g);
  }
  return out;
}

inline void write_predictions(std::ostream& out, int scene_id, const std::vector<GraspPose>& grasps) {
  char buf[256];
  for (const GraspPose& g : grasps) {
    std::snprintf(buf, sizeof buf, "%d %.9g %.9g %.9g %d %d %d %.9g %.9g\n", scene_id, g.center.x(), g.center.y(),
                  g.center.z(), g.view, g.angle, g.depth, g.width, g.score);
    out << buf;
  }
}

}  // namespace econgrasp
