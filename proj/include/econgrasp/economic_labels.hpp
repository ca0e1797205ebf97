#pragma once

#include "econgrasp/core.hpp"
#include "econgrasp/synth.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <vector>

namespace econgrasp {

/// Best grasp kept for one view of one point. Angle and depth are 1-based;
/// an infeasible record has score_class == kInfeasible and zero fields.
struct BestGrasp {
  std::uint8_t angle = 0;
  std::uint8_t depth = 0;
  std::uint8_t score_class = kInfeasible;
  float width = 0.0f;

  bool feasible() const { return score_class != kInfeasible; }
  static BestGrasp infeasible() { return {}; }
  friend bool operator==(const BestGrasp&, const BestGrasp&) = default;
};

/// Compiled per-scene supervision: for each kept point its position, point
/// graspness, per-view graspness and one best grasp per view.
class EconomicSceneLabels {
 public:
  EconomicSceneLabels() = default;
  explicit EconomicSceneLabels(int n_views) : n_views_(n_views) {
    require(n_views >= 1, "economic labels need at least one view");
  }

  int n_views() const { return n_views_; }
  std::size_t size() const { return points_.size(); }
  bool empty() const { return points_.empty(); }

  /// Appends a row; returns its index.
  std::size_t add_point(const Eigen::Vector3f& position) {
    points_.push_back(position);
    point_graspness_.push_back(0.0f);
    view_graspness_.resize(view_graspness_.size() + static_cast<std::size_t>(n_views_), 0.0f);
    best_.resize(best_.size() + static_cast<std::size_t>(n_views_));
    return points_.size() - 1;
  }

  const Eigen::Vector3f& point(std::size_t k) const { return points_[k]; }
  Eigen::Vector3f& point(std::size_t k) { return points_[k]; }
  float point_graspness(std::size_t k) const { return point_graspness_[k]; }
  float& point_graspness(std::size_t k) { return point_graspness_[k]; }

  std::span<const float> view_graspness(std::size_t k) const {
    return {view_graspness_.data() + k * n_views_, static_cast<std::size_t>(n_views_)};
  }
  std::span<float> view_graspness(std::size_t k) {
    return {view_graspness_.data() + k * n_views_, static_cast<std::size_t>(n_views_)};
  }
  std::span<const BestGrasp> best(std::size_t k) const {
    return {best_.data() + k * n_views_, static_cast<std::size_t>(n_views_)};
  }
  std::span<BestGrasp> best(std::size_t k) { return {best_.data() + k * n_views_, static_cast<std::size_t>(n_views_)}; }

  /// Rows `keep` (ascending) in order.
  EconomicSceneLabels select(std::span<const std::size_t> keep) const {
    EconomicSceneLabels out(n_views_);
    for (std::size_t k : keep) {
      const std::size_t row = out.add_point(points_[k]);
      out.point_graspness_[row] = point_graspness_[k];
      std::copy_n(view_graspness(k).begin(), n_views_, out.view_graspness(row).begin());
      std::copy_n(best(k).begin(), n_views_, out.best(row).begin());
    }
    return out;
  }

  friend bool operator==(const EconomicSceneLabels&, const EconomicSceneLabels&) = default;

 private:
  int n_views_ = 1;
  std::vector<Eigen::Vector3f> points_;
  std::vector<float> point_graspness_;
  std::vector<float> view_graspness_;
  std::vector<BestGrasp> best_;
};

}  // namespace econgrasp
