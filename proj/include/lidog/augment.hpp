#pragma once

#include "lidog/rng.hpp"
#include "lidog/types.hpp"

namespace lidog {

struct AugmentConfig {
  double rotation_min = -1.5707963267948966;  // radians about +y
  double rotation_max = 1.5707963267948966;
  double scale_min = 0.95;
  double scale_max = 1.05;
  double keep_fraction = 0.8;

  void validate() const;
};

// Rotation about the vertical axis (counter-clockwise viewed from above:
// x' = x cos t - z sin t, z' = x sin t + z cos t), uniform scale about the
// origin, then a uniform random keep of ceil(keep_fraction * N) points in
// their original order. Labels follow their points.
PointCloud random_transform(const PointCloud& cloud, const AugmentConfig& cfg,
                            Rng& rng);

// Scene mixing: concatenates points and labels of both clouds.
PointCloud mix3d(const PointCloud& a, const PointCloud& b);

// Patch mixing: one axis-aligned cube of side patch_extent centered on a
// uniformly chosen point of `a`; a's points inside are replaced by b's
// points inside the same region.
PointCloud point_cut_mix(const PointCloud& a, const PointCloud& b,
                         double patch_extent, Rng& rng);

}  // namespace lidog
