#pragma once

// Grasp geometry: view sphere, grasp pose composition, rigid transforms,
// parallel-jaw gripper collision model and the antipodal force-closure test.
//
// Gripper frame convention (columns of a grasp rotation):
//   col 0  closing axis, the fingers separate along it
//   col 1  finger height axis
//   col 2  approach axis, equal to the negated outward view direction
// The grasp center is the frame origin. The finger tips sit at
// z = depth_grid[depth] and the fingers extend finger_length back toward the
// palm, which is a further base_depth thick.

#include "econgrasp/core.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace econgrasp {

enum class Frame { object, scene };

inline const char* to_string(Frame f) { return f == Frame::object ? "object" : "scene"; }

/// Approach directions on the unit sphere, indexed 1..size(). Built from a
/// spherical Fibonacci lattice; index 1 is the lattice's first point.
class ViewSphere {
 public:
  explicit ViewSphere(int n_views) {
    require(n_views >= 1, "view sphere needs at least one view");
    directions_.reserve(static_cast<std::size_t>(n_views));
    if (n_views == 1) {
      directions_.emplace_back(0.0, 0.0, 1.0);
      return;
    }
    const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
    const double n = static_cast<double>(n_views);
    for (int i = 0; i < n_views; ++i) {
      const double z = (2.0 * i + 1.0) / n - 1.0;
      const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
      const double theta = 2.0 * M_PI * phi * i;
      directions_.push_back(Vec3(r * std::cos(theta), r * std::sin(theta), z).normalized());
    }
  }

  int size() const { return static_cast<int>(directions_.size()); }

  const Vec3& direction(int view) const {
    require(view >= 1 && view <= size(), "view index out of range: " + std::to_string(view));
    return directions_[static_cast<std::size_t>(view - 1)];
  }

  const std::vector<Vec3>& directions() const { return directions_; }

  /// Nearest view to an (unnormalised) direction; ties go to the lower index.
  int nearest(const Vec3& dir) const {
    int best = 0;
    double best_dot = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < directions_.size(); ++i) {
      const double d = directions_[i].dot(dir);
      if (d > best_dot) {
        best_dot = d;
        best = static_cast<int>(i);
      }
    }
    return best + 1;
  }

 private:
  std::vector<Vec3> directions_;
};

/// Orthonormal rotation plus translation; validated on construction.
class RigidPose {
 public:
  RigidPose() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}

  RigidPose(const Mat3& rotation, const Vec3& translation)
      : rotation_(rotation), translation_(translation) {
    require(rotation.allFinite() && translation.allFinite(), "pose must be finite");
    require((rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() <= 1e-9,
            "pose rotation is not orthonormal");
    require(std::abs(rotation.determinant() - 1.0) <= 1e-9, "pose rotation must have det +1");
  }

  static RigidPose identity() { return {}; }

  static RigidPose from_yaw(double yaw, const Vec3& translation) {
    return {Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix(), translation};
  }

  const Mat3& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }

  Vec3 apply(const Vec3& p) const { return rotation_ * p + translation_; }
  Vec3 rotate(const Vec3& v) const { return rotation_ * v; }

  RigidPose inverse() const {
    const Mat3 rt = rotation_.transpose();
    return {rt, -(rt * translation_)};
  }

 private:
  Mat3 rotation_;
  Vec3 translation_;
};

struct GraspPose {
  Frame frame = Frame::object;
  Vec3 center = Vec3::Zero();
  int view = 1;   // 1..n_views
  int angle = 1;  // 1..angle_count
  int depth = 1;  // 1..depth_grid.size()
  double width = 0.0;
  double score = 0.0;
};

/// Two-finger parallel gripper and the labeling grids that go with it.
struct GripperModel {
  double max_width = 0.10;
  double finger_length = 0.06;
  double finger_thickness = 0.01;
  double finger_height = 0.02;
  double base_depth = 0.02;
  std::vector<double> depth_grid{0.01, 0.02, 0.03, 0.04};
  int angle_count = 12;
  std::vector<double> friction_grid{0.1, 0.3, 0.5, 0.7, 0.9, 1.1};
  // Contact candidates lie within this distance of the extreme closing-region
  // point; the one nearest the closing line is taken.
  double contact_band = 0.002;
  double min_contact_separation = 1e-4;
  double width_clearance = 0.10;

  int depth_count() const { return static_cast<int>(depth_grid.size()); }
  int friction_count() const { return static_cast<int>(friction_grid.size()); }

  /// Radius around the grasp center that contains every gripper box.
  double reach_radius() const {
    const double x = max_width / 2.0 + finger_thickness;
    const double y = finger_height / 2.0;
    double z = 0.0;
    for (double d : depth_grid) {
      z = std::max({z, std::abs(d), std::abs(d - finger_length - base_depth)});
    }
    return std::sqrt(x * x + y * y + z * z);
  }

  void validate() const {
    require(max_width > 0 && finger_length > 0 && finger_thickness > 0 && finger_height > 0 &&
                base_depth > 0,
            "gripper lengths must be positive");
    require(!depth_grid.empty(), "depth grid must not be empty");
    for (std::size_t i = 1; i < depth_grid.size(); ++i) {
      require(depth_grid[i] > depth_grid[i - 1], "depth grid must be strictly increasing");
    }
    require(angle_count >= 1 && angle_count <= 254, "angle count out of range");
    require(!friction_grid.empty() && friction_grid.size() < 255, "friction grid size out of range");
    for (std::size_t i = 0; i < friction_grid.size(); ++i) {
      require(friction_grid[i] > 0, "friction coefficients must be positive");
      if (i > 0) require(friction_grid[i] > friction_grid[i - 1], "friction grid must be strictly increasing");
    }
    require(contact_band >= 0 && min_contact_separation >= 0 && width_clearance >= 0,
            "contact tolerances must be non-negative");
  }
};

/// Fixed score grid for the six score classes; class k has score 0.2 k.
inline constexpr double kScoreGrid[6] = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
inline constexpr int kScoreClasses = 6;

inline int score_class_from_score(double score) {
  return static_cast<int>(std::clamp<long>(std::lround(score / 0.2), 0, kScoreClasses - 1));
}

/// Score of a grid friction coefficient: clamp(1.1 - mu, 0, 1). Values within
/// rounding of a score-grid value return that value exactly.
inline double score_from_friction(double mu, const GripperModel& gripper) {
  bool on_grid = false;
  for (double g : gripper.friction_grid) on_grid = on_grid || std::abs(g - mu) <= 1e-12;
  require(on_grid, "friction coefficient is not on the labeling grid");
  const double s = std::clamp(1.1 - mu, 0.0, 1.0);
  const double snapped = kScoreGrid[score_class_from_score(s)];
  return std::abs(s - snapped) <= 1e-9 ? snapped : s;
}

/// Reference grasp frame (angle index 1) for an approach direction.
inline Mat3 approach_frame(const Vec3& approach) {
  const Vec3 a = approach.normalized();
  Vec3 x0(-a.y(), a.x(), 0.0);
  const double n = x0.norm();
  if (n > 1e-9) {
    x0 /= n;
  } else {
    x0 = Vec3::UnitX();
  }
  const Vec3 y0 = a.cross(x0);
  Mat3 frame;
  frame.col(0) = x0;
  frame.col(1) = y0;
  frame.col(2) = a;
  return frame;
}

inline Mat3 compose_rotation(const ViewSphere& sphere, int view, int angle, int angle_count = 12) {
  require(angle >= 1 && angle <= angle_count, "angle index out of range: " + std::to_string(angle));
  const Mat3 ref = approach_frame(-sphere.direction(view));
  const double theta = (angle - 1) * M_PI / angle_count;
  const double c = std::cos(theta), s = std::sin(theta);
  Mat3 r;
  r.col(0) = c * ref.col(0) + s * ref.col(1);
  r.col(1) = -s * ref.col(0) + c * ref.col(1);
  r.col(2) = ref.col(2);
  return r;
}

struct ViewAngle {
  int view;
  int angle;
};

/// Nearest (view, angle) bin for an arbitrary grasp rotation. The jaw is
/// symmetric under a half turn about the approach axis, so angles wrap at pi.
inline ViewAngle quantize_rotation(const Mat3& rotation, const ViewSphere& sphere, int angle_count = 12) {
  const int view = sphere.nearest(-rotation.col(2));
  const Mat3 ref = approach_frame(-sphere.direction(view));
  const Vec3 closing = rotation.col(0);
  const double theta = std::atan2(closing.dot(ref.col(1)), closing.dot(ref.col(0)));
  const double bin = M_PI / angle_count;
  int best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (int k = 0; k < angle_count; ++k) {
    const double d = std::abs(std::remainder(theta - k * bin, M_PI));
    if (d < best_dist) {
      best_dist = d;
      best = k;
    }
  }
  return {view, best + 1};
}

/// Lifts an object-frame grasp into the scene frame of `pose`.
inline GraspPose transform_grasp(const GraspPose& g, const RigidPose& pose, const ViewSphere& sphere,
                                 int angle_count = 12) {
  require(g.frame == Frame::object, "transform_grasp expects an object-frame grasp");
  const Mat3 rotated = pose.rotation() * compose_rotation(sphere, g.view, g.angle, angle_count);
  const ViewAngle va = quantize_rotation(rotated, sphere, angle_count);
  GraspPose out = g;
  out.frame = Frame::scene;
  out.center = pose.apply(g.center);
  out.view = va.view;
  out.angle = va.angle;
  return out;
}

enum class Region { outside, closing, collision };

/// Classifies a point given in gripper-frame coordinates. All boxes are open:
/// points on a face count as outside.
inline Region classify_local(const Vec3& local, double width, double depth, const GripperModel& gripper) {
  const double half_h = gripper.finger_height / 2.0;
  if (!(local.y() > -half_h && local.y() < half_h)) return Region::outside;
  const double zt = local.z() - depth;
  const double half_w = width / 2.0;
  const double ax = std::abs(local.x());
  const double outer = half_w + gripper.finger_thickness;
  if (zt > -gripper.finger_length && zt < 0.0) {
    if (ax < half_w) return Region::closing;
    if (ax > half_w && ax < outer) return Region::collision;
    return Region::outside;
  }
  if (zt > -gripper.finger_length - gripper.base_depth && zt < -gripper.finger_length) {
    return ax < outer ? Region::collision : Region::outside;
  }
  return Region::outside;
}

struct CollisionReport {
  bool colliding = false;
  int inner_point_count = 0;
};

inline double depth_value(const GripperModel& gripper, int depth) {
  require(depth >= 1 && depth <= gripper.depth_count(), "depth index out of range: " + std::to_string(depth));
  return gripper.depth_grid[static_cast<std::size_t>(depth - 1)];
}

inline Mat3 grasp_rotation(const GraspPose& g, const ViewSphere& sphere, const GripperModel& gripper) {
  return compose_rotation(sphere, g.view, g.angle, gripper.angle_count);
}

inline Vec3 to_gripper_frame(const Mat3& rotation, const Vec3& center, const Vec3& p) {
  const Vec3 q = p - center;
  return {q.dot(rotation.col(0)), q.dot(rotation.col(1)), q.dot(rotation.col(2))};
}

inline CollisionReport gripper_collision(const GraspPose& g, std::span<const Vec3> cloud,
                                         const GripperModel& gripper, const ViewSphere& sphere) {
  require(g.frame == Frame::scene, "gripper_collision expects a scene-frame grasp");
  const Mat3 rot = grasp_rotation(g, sphere, gripper);
  const double depth = depth_value(gripper, g.depth);
  CollisionReport report;
  for (const Vec3& p : cloud) {
    switch (classify_local(to_gripper_frame(rot, g.center, p), g.width, depth, gripper)) {
      case Region::collision: report.colliding = true; break;
      case Region::closing: ++report.inner_point_count; break;
      case Region::outside: break;
    }
  }
  return report;
}

struct Contact {
  Vec3 point;
  Vec3 normal;
};

/// Contacts on the negative (left) and positive (right) side of the closing axis.
struct ContactPair {
  Contact left;
  Contact right;
};

/// Picks contact indices among closing-region points given in gripper-frame
/// coordinates. Left takes the minimum x, right the maximum x; within
/// contact_band of the extreme the point nearest the closing line wins, then
/// the lower position in `candidates`.
inline std::optional<std::pair<std::size_t, std::size_t>> pick_contacts(std::span<const Vec3> local,
                                                                        std::span<const std::size_t> candidates,
                                                                        const GripperModel& gripper) {
  if (candidates.empty()) return std::nullopt;
  double xmin = std::numeric_limits<double>::infinity();
  double xmax = -std::numeric_limits<double>::infinity();
  for (std::size_t c : candidates) {
    xmin = std::min(xmin, local[c].x());
    xmax = std::max(xmax, local[c].x());
  }
  if (!(xmax - xmin > gripper.min_contact_separation)) return std::nullopt;
  auto pick = [&](bool left) {
    std::size_t best = candidates.front();
    double best_r = std::numeric_limits<double>::infinity();
    for (std::size_t c : candidates) {
      const Vec3& q = local[c];
      const bool in_band = left ? q.x() <= xmin + gripper.contact_band : q.x() >= xmax - gripper.contact_band;
      if (!in_band) continue;
      const double r = q.y() * q.y() + q.z() * q.z();
      if (r < best_r) {
        best_r = r;
        best = c;
      }
    }
    return best;
  };
  const std::size_t l = pick(true);
  const std::size_t r = pick(false);
  if (l == r || !(local[r].x() - local[l].x() > gripper.min_contact_separation)) return std::nullopt;
  return std::pair{l, r};
}

inline std::optional<ContactPair> find_contacts(const GraspPose& g, std::span<const Vec3> points,
                                                std::span<const Vec3> normals, const GripperModel& gripper,
                                                const ViewSphere& sphere) {
  require(g.frame == Frame::scene, "find_contacts expects a scene-frame grasp");
  require(points.size() == normals.size(), "points and normals differ in length");
  const Mat3 rot = grasp_rotation(g, sphere, gripper);
  const double depth = depth_value(gripper, g.depth);
  std::vector<Vec3> local(points.size());
  std::vector<std::size_t> closing;
  for (std::size_t i = 0; i < points.size(); ++i) {
    local[i] = to_gripper_frame(rot, g.center, points[i]);
    if (classify_local(local[i], g.width, depth, gripper) == Region::closing) closing.push_back(i);
  }
  const auto picked = pick_contacts(local, closing, gripper);
  if (!picked) return std::nullopt;
  return ContactPair{{points[picked->first], normals[picked->first]},
                     {points[picked->second], normals[picked->second]}};
}

inline double angle_between(const Vec3& a, const Vec3& b) {
  return std::atan2(a.cross(b).norm(), a.dot(b));
}

/// Antipodal two-finger force closure: each outward normal must lie within the
/// friction cone around its finger's pushing direction, and so must the line
/// joining the contacts.
inline bool force_closure(const ContactPair& contacts, const Vec3& closing_axis, double mu) {
  require(mu > 0.0, "friction coefficient must be positive");
  require(std::abs(contacts.left.normal.norm() - 1.0) <= 1e-6 &&
              std::abs(contacts.right.normal.norm() - 1.0) <= 1e-6,
          "contact normals must be unit length");
  const Vec3 axis = closing_axis.normalized();
  const double cone = std::atan(mu);
  const Vec3 line = contacts.right.point - contacts.left.point;
  if (line.norm() <= 0.0) return false;
  return angle_between(contacts.left.normal, -axis) <= cone &&
         angle_between(contacts.right.normal, axis) <= cone && angle_between(line, axis) <= cone;
}

}  // namespace econgrasp
