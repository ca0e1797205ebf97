#pragma once

// Economic supervision: keep the view graspness and one best grasp per view,
// lift object labels into scene-level labels with scene collision, then drop
// points that have no graspable label left.

#include "econgrasp/economic_labels.hpp"
#include "econgrasp/geometry.hpp"
#include "econgrasp/synth.hpp"

#include <algorithm>
#include <span>
#include <vector>

namespace econgrasp {

struct GraspabilityRule {
  double threshold_mu = 0.8;
  bool strict = true;  // graspable needs mu < threshold (<= when false)

  bool accepts(double mu) const { return strict ? mu < threshold_mu : mu <= threshold_mu; }
};

inline double friction_of(const DenseEntry& e, const GripperModel& gripper) {
  return gripper.friction_grid[e.mu_code];
}

inline bool graspable(const DenseEntry& e, const GripperModel& gripper, const GraspabilityRule& rule) {
  return e.usable() && rule.accepts(friction_of(e, gripper));
}

inline std::uint8_t score_class_of_code(std::uint8_t mu_code, const GripperModel& gripper) {
  return static_cast<std::uint8_t>(score_class_from_score(score_from_friction(gripper.friction_grid[mu_code], gripper)));
}

/// Smallest grid friction whose score lands in `score_class`.
inline double friction_of_score_class(std::uint8_t score_class, const GripperModel& gripper) {
  for (std::size_t k = 0; k < gripper.friction_grid.size(); ++k) {
    if (score_class_of_code(static_cast<std::uint8_t>(k), gripper) == score_class) return gripper.friction_grid[k];
  }
  throw ValidationError("score class has no friction coefficient on the grid");
}

/// Collision-free feasible entry with minimal friction; ties prefer the
/// smaller depth, then the smaller angle. `slice` is angle-major.
inline BestGrasp best_per_view(std::span<const DenseEntry> slice, int n_angles, int n_depths,
                               const GripperModel& gripper) {
  require(slice.size() == static_cast<std::size_t>(n_angles) * n_depths, "view slice has the wrong size");
  int best_a = -1, best_d = -1;
  std::uint8_t best_code = kInfeasible;
  for (int d = 0; d < n_depths; ++d) {
    for (int a = 0; a < n_angles; ++a) {
      const DenseEntry& e = slice[static_cast<std::size_t>(a) * n_depths + d];
      if (e.usable() && e.mu_code < best_code) {
        best_code = e.mu_code;
        best_a = a;
        best_d = d;
      }
    }
  }
  if (best_a < 0) return BestGrasp::infeasible();
  const DenseEntry& e = slice[static_cast<std::size_t>(best_a) * n_depths + best_d];
  return {static_cast<std::uint8_t>(best_a + 1), static_cast<std::uint8_t>(best_d + 1),
          score_class_of_code(best_code, gripper), e.width};
}

/// Fraction of the view's entries that are graspable.
inline double view_graspness(std::span<const DenseEntry> slice, const GripperModel& gripper,
                             const GraspabilityRule& rule = {}) {
  if (slice.empty()) return 0.0;
  std::size_t count = 0;
  for (const DenseEntry& e : slice) count += graspable(e, gripper, rule) ? 1 : 0;
  return static_cast<double>(count) / static_cast<double>(slice.size());
}

struct AssemblyOptions {
  GraspabilityRule rule{};
  bool scene_collision = true;
  int jobs = 1;
};

/// Map from scene (view, angle) to the object (view, angle) whose label it
/// inherits, for one object pose. Zero-based, views-major.
inline std::vector<ViewAngle> lifting_table(const RigidPose& pose, const ViewSphere& sphere,
                                            const RotationTable& rotations, int angle_count) {
  std::vector<ViewAngle> table;
  table.reserve(static_cast<std::size_t>(sphere.size()) * angle_count);
  const Mat3 to_object = pose.rotation().transpose();
  for (int v = 0; v < sphere.size(); ++v) {
    for (int a = 0; a < angle_count; ++a) {
      const ViewAngle va = quantize_rotation(to_object * rotations(v, a), sphere, angle_count);
      table.push_back({va.view - 1, va.angle - 1});
    }
  }
  return table;
}

/// Lifts one scene point's object labels into scene (view, angle) bins. The
/// result is the point's dense slice in scene frame before scene collision.
inline DenseObjectLabels lift_point_labels(const DenseObjectLabels& dense, int object_point,
                                           std::span<const ViewAngle> table) {
  DenseObjectLabels out(1, dense.n_views(), dense.n_angles(), dense.n_depths());
  for (int v = 0; v < dense.n_views(); ++v) {
    for (int a = 0; a < dense.n_angles(); ++a) {
      const ViewAngle src = table[static_cast<std::size_t>(v) * dense.n_angles() + a];
      for (int d = 0; d < dense.n_depths(); ++d) out.at(0, v, a, d) = dense.at(object_point, src.view, src.angle, d);
    }
  }
  return out;
}

/// Scene-level labels for every scene point (no pruning). Each point inherits
/// its object's labels through the lifting table; usable entries are then
/// re-tested against the merged cloud with the scene-frame grasp. The lifted
/// rotation is quantized, so the point's own object can collide as well.
inline EconomicSceneLabels assemble_scene(const SceneDescription& scene,
                                          std::span<const DenseObjectLabels* const> dense, const ViewSphere& sphere,
                                          const GripperModel& gripper, const AssemblyOptions& options = {}) {
  gripper.validate();
  require(dense.size() == scene.objects.size(), "need one dense label set per scene object");
  for (std::size_t i = 0; i < dense.size(); ++i) {
    if (dense[i] == nullptr) throw Error("missing dense labels for scene object " + std::to_string(i));
    require(dense[i]->n_points() == static_cast<int>(scene.objects[i].object.size()) &&
                dense[i]->n_views() == sphere.size() && dense[i]->n_angles() == gripper.angle_count &&
                dense[i]->n_depths() == gripper.depth_count(),
            "dense labels do not match scene object " + std::to_string(i));
  }
  const int n_views = sphere.size();
  const int n_angles = gripper.angle_count;
  const int n_depths = gripper.depth_count();
  const RotationTable rotations(sphere, n_angles);
  std::vector<std::vector<ViewAngle>> tables;
  for (const SceneInstance& inst : scene.objects) tables.push_back(lifting_table(inst.pose, sphere, rotations, n_angles));

  // object-local index of each scene point
  std::vector<int> local_index(scene.size());
  {
    std::vector<int> counter(scene.objects.size(), 0);
    for (std::size_t i = 0; i < scene.size(); ++i) local_index[i] = counter[static_cast<std::size_t>(scene.object_ids[i])]++;
  }

  EconomicSceneLabels labels(n_views);
  for (const Vec3& p : scene.points) labels.add_point(p.cast<float>());
  const double reach2 = gripper.reach_radius() * gripper.reach_radius();
  const double half_h = gripper.finger_height / 2.0;
  const double z_lo = gripper.depth_grid.front() - gripper.finger_length - gripper.base_depth;
  const double z_hi = gripper.depth_grid.back();

  parallel_for(scene.size(), options.jobs, [&](std::size_t i) {
    const int obj = scene.object_ids[i];
    DenseObjectLabels slice = lift_point_labels(*dense[static_cast<std::size_t>(obj)], local_index[i],
                                                tables[static_cast<std::size_t>(obj)]);
    const Vec3& center = scene.points[i];
    std::vector<Vec3> nearby;
    if (options.scene_collision) {
      for (std::size_t j = 0; j < scene.size(); ++j) {
        if (j != i && (scene.points[j] - center).squaredNorm() < reach2) nearby.push_back(scene.points[j] - center);
      }
    }
    // points inside the view's depth window, one array per coordinate
    std::vector<double> px, py, pz, pzv, sx, sz;
    double graspness_sum = 0.0;
    for (int v = 0; v < n_views; ++v) {
      auto entries = slice.view_slice(0, v);
      if (!nearby.empty() && std::any_of(entries.begin(), entries.end(), [](const DenseEntry& e) { return e.usable(); })) {
        const Vec3 approach = rotations(v, 0).col(2);
        px.clear();
        py.clear();
        pz.clear();
        pzv.clear();
        for (const Vec3& q : nearby) {
          const double z = q.dot(approach);
          if (!(z > z_lo && z < z_hi)) continue;
          px.push_back(q.x());
          py.push_back(q.y());
          pz.push_back(q.z());
          pzv.push_back(z);
        }
        for (int a = 0; a < n_angles; ++a) {
          auto row = entries.subspan(static_cast<std::size_t>(a) * n_depths, static_cast<std::size_t>(n_depths));
          if (std::none_of(row.begin(), row.end(), [](const DenseEntry& e) { return e.usable(); })) continue;
          const Mat3& rot = rotations(v, a);
          const double c0x = rot(0, 0), c0y = rot(1, 0), c0z = rot(2, 0);
          const double c1x = rot(0, 1), c1y = rot(1, 1), c1z = rot(2, 1);
          // points between the finger planes: |x| and z in the gripper frame,
          // compacted without branches (the slab test is unpredictable)
          const std::size_t m = px.size();
          sx.resize(m + 1);
          sz.resize(m + 1);
          std::size_t k = 0;
          for (std::size_t j = 0; j < m; ++j) {
            const double y = px[j] * c1x + py[j] * c1y + pz[j] * c1z;
            sx[k] = std::abs(px[j] * c0x + py[j] * c0y + pz[j] * c0z);
            sz[k] = pzv[j];
            k += static_cast<std::size_t>((y > -half_h) & (y < half_h));
          }
          // the collision regions of classify_local, without branches
          for (int d = 0; d < n_depths; ++d) {
            DenseEntry& e = row[static_cast<std::size_t>(d)];
            if (!e.usable()) continue;
            const double depth = gripper.depth_grid[static_cast<std::size_t>(d)];
            const double half_w = e.width / 2.0;
            const double outer = half_w + gripper.finger_thickness;
            const double fl = gripper.finger_length;
            const double back = fl + gripper.base_depth;
            bool hit = false;
            for (std::size_t j = 0; j < k; ++j) {
              const double zt = sz[j] - depth;
              const double x = sx[j];
              const bool finger = (zt > -fl) & (zt < 0.0) & (x > half_w) & (x < outer);
              const bool base = (zt > -back) & (zt < -fl) & (x < outer);
              hit |= finger | base;
            }
            if (hit) e.collide = 1;
          }
        }
      }
      const double g = view_graspness(entries, gripper, options.rule);
      labels.view_graspness(i)[static_cast<std::size_t>(v)] = static_cast<float>(g);
      labels.best(i)[static_cast<std::size_t>(v)] = best_per_view(entries, n_angles, n_depths, gripper);
    }
    for (float g : labels.view_graspness(i)) graspness_sum += g;
    labels.point_graspness(i) = static_cast<float>(graspness_sum / n_views);
  });
  return labels;
}

/// Keeps the points that have at least one view whose best grasp is graspable.
inline EconomicSceneLabels prune_points(const EconomicSceneLabels& labels, const GripperModel& gripper,
                                        const GraspabilityRule& rule = {}) {
  std::vector<std::size_t> keep;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    bool any = false;
    for (const BestGrasp& b : labels.best(k)) {
      any = any || (b.feasible() && rule.accepts(friction_of_score_class(b.score_class, gripper)));
    }
    if (any) keep.push_back(k);
  }
  return labels.select(keep);
}

/// Economic supervision built directly from per-object labels, without any
/// scene: the reference that assemble_scene must reproduce for an isolated
/// object at the identity pose.
inline EconomicSceneLabels compile_object(const SyntheticObject& obj, const DenseObjectLabels& dense,
                                          const GripperModel& gripper, const GraspabilityRule& rule = {}) {
  EconomicSceneLabels labels(dense.n_views());
  for (int p = 0; p < dense.n_points(); ++p) {
    const std::size_t row = labels.add_point(obj.points[static_cast<std::size_t>(p)].cast<float>());
    double sum = 0.0;
    for (int v = 0; v < dense.n_views(); ++v) {
      const auto slice = dense.view_slice(p, v);
      const float g = static_cast<float>(view_graspness(slice, gripper, rule));
      labels.view_graspness(row)[static_cast<std::size_t>(v)] = g;
      labels.best(row)[static_cast<std::size_t>(v)] = best_per_view(slice, dense.n_angles(), dense.n_depths(), gripper);
      sum += g;
    }
    labels.point_graspness(row) = static_cast<float>(sum / dense.n_views());
  }
  return labels;
}

}  // namespace econgrasp
