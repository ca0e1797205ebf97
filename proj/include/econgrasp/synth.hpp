#pragma once

// Procedural objects and scenes, and the brute-force dense grasp labeler that
// every other stage treats as ground truth.

#include "econgrasp/core.hpp"
#include "econgrasp/geometry.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace econgrasp {

enum class Shape { box, cylinder, sphere, plate };

inline std::string to_string(Shape s) {
  switch (s) {
    case Shape::box: return "box";
    case Shape::cylinder: return "cylinder";
    case Shape::sphere: return "sphere";
    case Shape::plate: return "plate";
  }
  return "?";
}

inline Shape shape_from_string(std::string_view name) {
  if (name == "box") return Shape::box;
  if (name == "cylinder") return Shape::cylinder;
  if (name == "sphere") return Shape::sphere;
  if (name == "plate") return Shape::plate;
  throw ValidationError("unknown shape: " + std::string(name));
}

inline std::size_t shape_dimension_count(Shape s) {
  switch (s) {
    case Shape::box: return 3;       // size x, y, z
    case Shape::cylinder: return 2;  // radius, height (axis z)
    case Shape::sphere: return 1;    // radius
    case Shape::plate: return 2;     // wall side, wall gap (walls normal to z)
  }
  return 0;
}

struct SyntheticObject {
  Shape shape = Shape::box;
  std::vector<double> dimensions;
  double density = 0.0;  // points per square meter
  std::uint64_t seed = 0;
  std::vector<Vec3> points;   // object frame, centred at the origin
  std::vector<Vec3> normals;  // outward unit normals

  std::size_t size() const { return points.size(); }

  double bounding_radius() const {
    double r = 0.0;
    for (const Vec3& p : points) r = std::max(r, p.norm());
    return r;
  }

  double min_z() const {
    double z = 0.0;
    for (const Vec3& p : points) z = std::min(z, p.z());
    return z;
  }
};

namespace detail {

inline std::size_t count_for_area(double area, double density) {
  return static_cast<std::size_t>(std::max<long long>(1, std::llround(area * density)));
}

// Samples one of the weighted parts proportionally to its weight.
inline std::size_t pick_weighted(Rng& rng, std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  double u = uniform01(rng) * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  return weights.size() - 1;
}

}  // namespace detail

/// Surface-sampled object with analytic normals; deterministic per seed.
inline SyntheticObject make_object(Shape shape, std::vector<double> dimensions, double density, std::uint64_t seed) {
  require(dimensions.size() == shape_dimension_count(shape), "wrong number of dimensions for " + to_string(shape));
  for (double d : dimensions) require(d > 0.0 && std::isfinite(d), "object dimensions must be positive");
  require(density > 0.0 && std::isfinite(density), "sampling density must be positive");

  SyntheticObject obj;
  obj.shape = shape;
  obj.dimensions = dimensions;
  obj.density = density;
  obj.seed = seed;
  Rng rng = make_rng(seed, 1);
  auto add = [&](const Vec3& p, const Vec3& n) {
    obj.points.push_back(p);
    obj.normals.push_back(n);
  };

  switch (shape) {
    case Shape::sphere: {
      const double r = dimensions[0];
      const std::size_t n = detail::count_for_area(4.0 * M_PI * r * r, density);
      for (std::size_t i = 0; i < n; ++i) {
        const double z = uniform(rng, -1.0, 1.0);
        const double phi = uniform(rng, 0.0, 2.0 * M_PI);
        const double s = std::sqrt(std::max(0.0, 1.0 - z * z));
        const Vec3 normal = Vec3(s * std::cos(phi), s * std::sin(phi), z).normalized();
        add(r * normal, normal);
      }
      break;
    }
    case Shape::box: {
      const Vec3 half(dimensions[0] / 2, dimensions[1] / 2, dimensions[2] / 2);
      const double areas[3] = {dimensions[1] * dimensions[2], dimensions[0] * dimensions[2],
                               dimensions[0] * dimensions[1]};
      const double weights[6] = {areas[0], areas[0], areas[1], areas[1], areas[2], areas[2]};
      const std::size_t n = detail::count_for_area(2.0 * (areas[0] + areas[1] + areas[2]), density);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t face = detail::pick_weighted(rng, weights);
        const int axis = static_cast<int>(face / 2);
        const double sign = face % 2 == 0 ? -1.0 : 1.0;
        Vec3 p;
        for (int k = 0; k < 3; ++k) p[k] = uniform(rng, -half[k], half[k]);
        p[axis] = sign * half[axis];
        Vec3 normal = Vec3::Zero();
        normal[axis] = sign;
        add(p, normal);
      }
      break;
    }
    case Shape::cylinder: {
      const double r = dimensions[0], h = dimensions[1];
      const double weights[3] = {2.0 * M_PI * r * h, M_PI * r * r, M_PI * r * r};
      const std::size_t n = detail::count_for_area(weights[0] + weights[1] + weights[2], density);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t part = detail::pick_weighted(rng, weights);
        const double phi = uniform(rng, 0.0, 2.0 * M_PI);
        if (part == 0) {
          const double z = uniform(rng, -h / 2, h / 2);
          add(Vec3(r * std::cos(phi), r * std::sin(phi), z), Vec3(std::cos(phi), std::sin(phi), 0.0));
        } else {
          const double rho = r * std::sqrt(uniform01(rng));
          const double sign = part == 1 ? -1.0 : 1.0;
          add(Vec3(rho * std::cos(phi), rho * std::sin(phi), sign * h / 2), Vec3(0.0, 0.0, sign));
        }
      }
      break;
    }
    case Shape::plate: {
      // Two parallel square walls; the second wall mirrors the first so every
      // point has an exactly antipodal partner.
      const double side = dimensions[0], gap = dimensions[1];
      const std::size_t pairs = std::max<std::size_t>(1, detail::count_for_area(2.0 * side * side, density) / 2);
      std::vector<Vec3> wall;
      wall.reserve(pairs);
      for (std::size_t i = 0; i < pairs; ++i) {
        const double y = uniform(rng, -side / 2, side / 2);
        const double z = uniform(rng, -side / 2, side / 2);
        wall.emplace_back(0.0, y, z);
      }
      for (const Vec3& w : wall) add(Vec3(w.y(), w.z(), -gap / 2), -Vec3::UnitZ());
      for (const Vec3& w : wall) add(Vec3(w.y(), w.z(), gap / 2), Vec3::UnitZ());
      break;
    }
  }
  return obj;
}

inline constexpr std::uint8_t kInfeasible = 255;

struct DenseEntry {
  std::uint8_t mu_code = kInfeasible;  // index into friction_grid, or kInfeasible
  std::uint8_t collide = 0;            // gripper collides (object-only, or scene once lifted)
  float width = 0.0f;                  // meters; zero when infeasible

  bool feasible() const { return mu_code != kInfeasible; }
  bool usable() const { return collide == 0 && feasible(); }
  friend bool operator==(const DenseEntry&, const DenseEntry&) = default;
};

/// Full label grid: points x views x angles x depths, row-major in that order.
class DenseObjectLabels {
 public:
  DenseObjectLabels() = default;
  DenseObjectLabels(int n_points, int n_views, int n_angles, int n_depths)
      : n_points_(n_points), n_views_(n_views), n_angles_(n_angles), n_depths_(n_depths) {
    require(n_points >= 0 && n_views >= 1 && n_angles >= 1 && n_depths >= 1, "invalid dense label shape");
    entries_.resize(static_cast<std::size_t>(n_points) * per_point());
  }

  int n_points() const { return n_points_; }
  int n_views() const { return n_views_; }
  int n_angles() const { return n_angles_; }
  int n_depths() const { return n_depths_; }
  std::size_t per_view() const { return static_cast<std::size_t>(n_angles_) * n_depths_; }
  std::size_t per_point() const { return per_view() * n_views_; }

  /// Zero-based (point, view, angle, depth).
  std::size_t index(int p, int v, int a, int d) const {
    return ((static_cast<std::size_t>(p) * n_views_ + v) * n_angles_ + a) * n_depths_ + d;
  }
  DenseEntry& at(int p, int v, int a, int d) { return entries_[index(p, v, a, d)]; }
  const DenseEntry& at(int p, int v, int a, int d) const { return entries_[index(p, v, a, d)]; }

  /// n_angles x n_depths entries of one view (angle-major).
  std::span<const DenseEntry> view_slice(int p, int v) const {
    return {entries_.data() + index(p, v, 0, 0), per_view()};
  }
  std::span<DenseEntry> view_slice(int p, int v) { return {entries_.data() + index(p, v, 0, 0), per_view()}; }
  std::span<const DenseEntry> point_slice(int p) const {
    return {entries_.data() + index(p, 0, 0, 0), per_point()};
  }

  std::vector<DenseEntry>& entries() { return entries_; }
  const std::vector<DenseEntry>& entries() const { return entries_; }

  friend bool operator==(const DenseObjectLabels&, const DenseObjectLabels&) = default;

 private:
  int n_points_ = 0, n_views_ = 1, n_angles_ = 1, n_depths_ = 1;
  std::vector<DenseEntry> entries_;
};

/// Precomputed grasp rotations for every (view, angle), zero-based.
class RotationTable {
 public:
  RotationTable(const ViewSphere& sphere, int angle_count) : views_(sphere.size()), angles_(angle_count) {
    table_.reserve(static_cast<std::size_t>(views_) * angles_);
    for (int v = 1; v <= views_; ++v) {
      for (int a = 1; a <= angles_; ++a) table_.push_back(compose_rotation(sphere, v, a, angle_count));
    }
  }
  const Mat3& operator()(int v, int a) const { return table_[static_cast<std::size_t>(v) * angles_ + a]; }

 private:
  int views_, angles_;
  std::vector<Mat3> table_;
};

namespace detail {

/// Per grasp frame: which depths collide and which points sit between the
/// fingers, for the jaw opened to `width`. Local coordinates are computed
/// exactly as to_gripper_frame does so results match gripper_collision.
struct FrameProbe {
  std::vector<Vec3> local;
  std::vector<std::size_t> kept;  // positions in `local` that survived the z cull
  std::vector<std::vector<std::size_t>> closing;
  std::vector<char> colliding;

  void run(std::span<const Vec3> rel, std::span<const double> z, const Mat3& rot, double width,
           const GripperModel& gripper, double z_lo, double z_hi) {
    const int n_depths = gripper.depth_count();
    closing.assign(static_cast<std::size_t>(n_depths), {});
    colliding.assign(static_cast<std::size_t>(n_depths), 0);
    local.resize(rel.size());
    kept.clear();
    const double half_h = gripper.finger_height / 2.0;
    for (std::size_t j = 0; j < rel.size(); ++j) {
      if (!(z[j] > z_lo && z[j] < z_hi)) continue;
      const double y = rel[j].dot(rot.col(1));
      if (!(y > -half_h && y < half_h)) continue;
      local[j] = Vec3(rel[j].dot(rot.col(0)), y, z[j]);
      kept.push_back(j);
    }
    for (int d = 0; d < n_depths; ++d) {
      const double depth = gripper.depth_grid[static_cast<std::size_t>(d)];
      for (std::size_t j : kept) {
        const Region r = classify_local(local[j], width, depth, gripper);
        if (r == Region::collision) {
          colliding[static_cast<std::size_t>(d)] = 1;
          break;
        }
        if (r == Region::closing) closing[static_cast<std::size_t>(d)].push_back(j);
      }
    }
  }
};

inline std::vector<std::vector<std::size_t>> neighbors_within(std::span<const Vec3> centers,
                                                              std::span<const Vec3> cloud, double radius) {
  std::vector<std::vector<std::size_t>> out(centers.size());
  const double r2 = radius * radius;
  for (std::size_t i = 0; i < centers.size(); ++i) {
    for (std::size_t j = 0; j < cloud.size(); ++j) {
      if ((cloud[j] - centers[i]).squaredNorm() < r2) out[i].push_back(j);
    }
  }
  return out;
}

}  // namespace detail

/// Smallest grid friction at which the contacts close, or kInfeasible.
inline std::uint8_t minimal_friction_code(const ContactPair& contacts, const Vec3& closing_axis,
                                          const GripperModel& gripper) {
  for (int k = 0; k < gripper.friction_count(); ++k) {
    if (force_closure(contacts, closing_axis, gripper.friction_grid[static_cast<std::size_t>(k)])) {
      return static_cast<std::uint8_t>(k);
    }
  }
  return kInfeasible;
}

/// Jaw opening that clears every closing-region point symmetrically about the
/// grasp center, plus the clearance margin, capped at max_width.
inline double label_width(std::span<const Vec3> local, std::span<const std::size_t> closing,
                          const GripperModel& gripper) {
  double extent = 0.0;
  for (std::size_t j : closing) extent = std::max(extent, std::abs(local[j].x()));
  return std::min(gripper.max_width, (1.0 + gripper.width_clearance) * 2.0 * extent);
}

/// Brute-force dense labels: every (point, view, angle, depth) grasp is placed
/// at the point with the jaw fully open, tested for collision against the
/// object, and if free its contacts give the minimal closing friction.
inline DenseObjectLabels label_object(const SyntheticObject& obj, const ViewSphere& sphere,
                                      const GripperModel& gripper, int jobs = 1) {
  gripper.validate();
  require(obj.points.size() == obj.normals.size(), "object points and normals differ in length");
  const int n_points = static_cast<int>(obj.size());
  const int n_views = sphere.size();
  const int n_angles = gripper.angle_count;
  const int n_depths = gripper.depth_count();
  DenseObjectLabels labels(n_points, n_views, n_angles, n_depths);
  const RotationTable rotations(sphere, n_angles);
  const auto neighbors = detail::neighbors_within(obj.points, obj.points, gripper.reach_radius());
  const double z_lo = gripper.depth_grid.front() - gripper.finger_length - gripper.base_depth;
  const double z_hi = gripper.depth_grid.back();

  parallel_for(static_cast<std::size_t>(n_points), jobs, [&](std::size_t pi) {
    const Vec3& center = obj.points[pi];
    const auto& nb = neighbors[pi];
    std::vector<Vec3> rel(nb.size());
    std::vector<double> z(nb.size());
    for (std::size_t j = 0; j < nb.size(); ++j) rel[j] = obj.points[nb[j]] - center;
    detail::FrameProbe probe;
    const int p = static_cast<int>(pi);
    for (int v = 0; v < n_views; ++v) {
      const Vec3 approach = rotations(v, 0).col(2);
      for (std::size_t j = 0; j < nb.size(); ++j) z[j] = rel[j].dot(approach);
      for (int a = 0; a < n_angles; ++a) {
        const Mat3& rot = rotations(v, a);
        probe.run(rel, z, rot, gripper.max_width, gripper, z_lo, z_hi);
        for (int d = 0; d < n_depths; ++d) {
          DenseEntry& e = labels.at(p, v, a, d);
          if (probe.colliding[static_cast<std::size_t>(d)]) {
            e = DenseEntry{kInfeasible, 1, 0.0f};
            continue;
          }
          const auto& closing = probe.closing[static_cast<std::size_t>(d)];
          const auto picked = pick_contacts(probe.local, closing, gripper);
          if (!picked) {
            e = DenseEntry{kInfeasible, 0, 0.0f};
            continue;
          }
          const ContactPair contacts{{obj.points[nb[picked->first]], obj.normals[nb[picked->first]]},
                                     {obj.points[nb[picked->second]], obj.normals[nb[picked->second]]}};
          const std::uint8_t code = minimal_friction_code(contacts, rot.col(0), gripper);
          e = DenseEntry{code, 0,
                         code == kInfeasible ? 0.0f : static_cast<float>(label_width(probe.local, closing, gripper))};
        }
      }
    }
  });
  return labels;
}

struct SceneInstance {
  SyntheticObject object;
  RigidPose pose;
  int library_id = -1;  // index into the object library, -1 when ad hoc
};

struct SceneDescription {
  std::vector<SceneInstance> objects;
  std::vector<Vec3> points;   // merged cloud, scene frame
  std::vector<Vec3> normals;
  std::vector<int> object_ids;  // index into `objects`
  std::uint64_t seed = 0;

  std::size_t size() const { return points.size(); }
};

/// Merges posed objects into one scene cloud. Rejects a pose pair whose
/// bounding spheres interpenetrate by more than `tolerance` meters.
inline SceneDescription make_scene(std::vector<SyntheticObject> objects, std::vector<RigidPose> poses,
                                   std::uint64_t seed, double tolerance = 0.0,
                                   std::vector<int> library_ids = {}) {
  require(objects.size() == poses.size(), "objects and poses differ in length");
  require(library_ids.empty() || library_ids.size() == objects.size(), "library ids differ in length");
  SceneDescription scene;
  scene.seed = seed;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      const double overlap = objects[i].bounding_radius() + objects[j].bounding_radius() -
                             (poses[i].translation() - poses[j].translation()).norm();
      if (overlap > tolerance) {
        throw ValidationError("objects " + std::to_string(j) + " and " + std::to_string(i) + " interpenetrate");
      }
    }
  }
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const SyntheticObject& obj = objects[i];
    for (std::size_t k = 0; k < obj.size(); ++k) {
      scene.points.push_back(poses[i].apply(obj.points[k]));
      scene.normals.push_back(poses[i].rotate(obj.normals[k]));
      scene.object_ids.push_back(static_cast<int>(i));
    }
    scene.objects.push_back({std::move(objects[i]), poses[i], library_ids.empty() ? -1 : library_ids[i]});
  }
  return scene;
}

/// Parameters for random tabletop clutter.
struct SceneLayout {
  int min_objects = 3;
  int max_objects = 8;
  double half_extent = 0.20;  // objects placed in [-e, e]^2 on z = 0
  double gap = 0.005;         // extra spacing between bounding spheres
  bool random_yaw = true;
  int max_attempts = 2000;
};

/// Places library objects on the z = 0 plane with rejection sampling against
/// bounding-sphere interpenetration.
inline SceneDescription generate_scene(std::span<const SyntheticObject> library, std::uint64_t seed,
                                       const SceneLayout& layout) {
  require(!library.empty(), "object library is empty");
  require(layout.min_objects >= 1 && layout.max_objects >= layout.min_objects, "invalid object count range");
  Rng rng = make_rng(seed, 2);
  const int n = layout.min_objects +
                static_cast<int>(uniform_index(rng, static_cast<std::size_t>(layout.max_objects - layout.min_objects + 1)));
  std::vector<SyntheticObject> objects;
  std::vector<RigidPose> poses;
  std::vector<int> ids;
  for (int i = 0; i < n; ++i) {
    const std::size_t id = uniform_index(rng, library.size());
    const SyntheticObject& obj = library[id];
    const double radius = obj.bounding_radius();
    bool placed = false;
    for (int attempt = 0; attempt < layout.max_attempts && !placed; ++attempt) {
      const double x = uniform(rng, -layout.half_extent, layout.half_extent);
      const double y = uniform(rng, -layout.half_extent, layout.half_extent);
      const double yaw = layout.random_yaw ? uniform(rng, 0.0, 2.0 * M_PI) : 0.0;
      const Vec3 t(x, y, -obj.min_z());
      bool free = true;
      for (std::size_t k = 0; k < objects.size() && free; ++k) {
        free = (poses[k].translation() - t).norm() > radius + objects[k].bounding_radius() + layout.gap;
      }
      if (free) {
        objects.push_back(obj);
        poses.push_back(RigidPose::from_yaw(yaw, t));
        ids.push_back(static_cast<int>(id));
        placed = true;
      }
    }
    require(placed, "could not place object " + std::to_string(i) + " without interpenetration");
  }
  return make_scene(std::move(objects), std::move(poses), seed, 0.0, std::move(ids));
}

}  // namespace econgrasp
