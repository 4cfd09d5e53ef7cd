#include "lidog/augment.hpp"

#include <algorithm>
#include <cmath>

namespace lidog {

void AugmentConfig::validate() const {
  if (rotation_min > rotation_max || scale_min > scale_max) {
    throw ValidationError("augment bounds must be ordered");
  }
  if (!(keep_fraction > 0.0) || keep_fraction > 1.0) {
    throw ValidationError("keep_fraction must be in (0, 1]");
  }
}

PointCloud random_transform(const PointCloud& cloud, const AugmentConfig& cfg,
                            Rng& rng) {
  cfg.validate();
  validate_labels(cloud);
  const double theta = rng.uniform(cfg.rotation_min, cfg.rotation_max);
  const double scale = rng.uniform(cfg.scale_min, cfg.scale_max);
  const double c = std::cos(theta);
  const double s = std::sin(theta);

  PointCloud out = cloud;
  for (Point& p : out.points) {
    const double x = p.x;
    const double z = p.z;
    p.x = static_cast<float>(scale * (x * c - z * s));
    p.z = static_cast<float>(scale * (x * s + z * c));
    p.y = static_cast<float>(scale * p.y);
  }

  const std::size_t n = out.size();
  const std::size_t keep =
      static_cast<std::size_t>(std::ceil(cfg.keep_fraction * static_cast<double>(n)));
  if (keep >= n) return out;

  // Partial Fisher-Yates, then sort so the subset keeps the original order.
  std::vector<std::uint32_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<std::uint32_t>(i);
  for (std::size_t i = 0; i < keep; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());

  PointCloud kept;
  kept.frame_id = out.frame_id;
  kept.points.reserve(keep);
  if (out.labeled()) kept.labels.reserve(keep);
  for (std::uint32_t i : idx) {
    kept.points.push_back(out.points[i]);
    if (out.labeled()) kept.labels.push_back(out.labels[i]);
  }
  return kept;
}

namespace {

bool labels_compatible(const PointCloud& a, const PointCloud& b) {
  // An empty cloud joins either way.
  if (a.empty() || b.empty()) return true;
  return a.labeled() == b.labeled();
}

}  // namespace

PointCloud mix3d(const PointCloud& a, const PointCloud& b) {
  validate_labels(a);
  validate_labels(b);
  if (!labels_compatible(a, b)) {
    throw ValidationError("mix3d requires both clouds labeled or both not");
  }
  PointCloud out;
  out.frame_id = a.frame_id;
  out.points = a.points;
  out.points.insert(out.points.end(), b.points.begin(), b.points.end());
  const bool labeled = (a.empty() ? b.labeled() : a.labeled());
  if (labeled) {
    out.labels = a.labels;
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  }
  return out;
}

PointCloud point_cut_mix(const PointCloud& a, const PointCloud& b,
                         double patch_extent, Rng& rng) {
  validate_labels(a);
  validate_labels(b);
  if (a.empty()) return a;
  if (!labels_compatible(a, b)) {
    throw ValidationError("point_cut_mix requires both clouds labeled or both not");
  }
  const Point center = a.points[rng.below(a.size())];
  const double half = patch_extent / 2.0;
  auto inside = [&](const Point& p) {
    return std::abs(static_cast<double>(p.x) - center.x) <= half &&
           std::abs(static_cast<double>(p.y) - center.y) <= half &&
           std::abs(static_cast<double>(p.z) - center.z) <= half;
  };

  PointCloud out;
  out.frame_id = a.frame_id;
  const bool labeled = a.labeled();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (inside(a.points[i])) continue;
    out.points.push_back(a.points[i]);
    if (labeled) out.labels.push_back(a.labels[i]);
  }
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (!inside(b.points[i])) continue;
    out.points.push_back(b.points[i]);
    if (labeled) out.labels.push_back(b.labeled() ? b.labels[i] : kIgnore);
  }
  return out;
}

}  // namespace lidog
