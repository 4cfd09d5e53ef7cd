#include "lidog/voxel.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace lidog {

std::uint64_t pack_voxel_key(int i, int j, int k) {
  constexpr int kBias = 1 << 20;
  if (i <= -kBias || i >= kBias || j <= -kBias || j >= kBias || k <= -kBias ||
      k >= kBias) {
    throw ValidationError("voxel index out of packable range");
  }
  return (static_cast<std::uint64_t>(i + kBias) << 42) |
         (static_cast<std::uint64_t>(j + kBias) << 21) |
         static_cast<std::uint64_t>(k + kBias);
}

VoxelGrid voxelize(const PointCloud& cloud, double voxel_size) {
  if (!(voxel_size > 0.0)) {
    throw ValidationError("voxel_size must be positive");
  }
  validate_finite(cloud);
  validate_labels(cloud);

  struct Acc {
    std::vector<std::uint32_t> indices;
    double sx = 0.0, sy = 0.0, sz = 0.0, si = 0.0;
  };
  std::unordered_map<std::uint64_t, Acc> buckets;
  buckets.reserve(cloud.size() * 2);

  std::vector<std::array<std::int32_t, 3>> point_key(cloud.size());
  for (std::size_t n = 0; n < cloud.size(); ++n) {
    const Point& p = cloud.points[n];
    const int i = static_cast<int>(std::floor(static_cast<double>(p.x) / voxel_size));
    const int j = static_cast<int>(std::floor(static_cast<double>(p.y) / voxel_size));
    const int k = static_cast<int>(std::floor(static_cast<double>(p.z) / voxel_size));
    point_key[n] = {i, j, k};
    Acc& acc = buckets[pack_voxel_key(i, j, k)];
    acc.indices.push_back(static_cast<std::uint32_t>(n));
    acc.sx += p.x;
    acc.sy += p.y;
    acc.sz += p.z;
    acc.si += p.intensity;
  }

  VoxelGrid grid;
  grid.voxel_size = voxel_size;
  grid.keys.reserve(buckets.size());
  for (std::size_t n = 0; n < cloud.size(); ++n) {
    // First member announces the cell; duplicates are filtered by the sort.
    if (buckets[pack_voxel_key(point_key[n][0], point_key[n][1], point_key[n][2])]
            .indices.front() == n) {
      grid.keys.push_back(point_key[n]);
    }
  }
  std::sort(grid.keys.begin(), grid.keys.end());

  grid.cells.reserve(grid.keys.size());
  grid.index.reserve(grid.keys.size() * 2);
  for (std::size_t r = 0; r < grid.keys.size(); ++r) {
    const auto& key = grid.keys[r];
    Acc& acc = buckets[pack_voxel_key(key[0], key[1], key[2])];
    VoxelCell cell;
    const double n = static_cast<double>(acc.indices.size());
    cell.centroid = {acc.sx / n, acc.sy / n, acc.sz / n};
    cell.intensity_mean = acc.si / n;
    cell.point_indices = std::move(acc.indices);
    if (cloud.labeled()) {
      std::map<ClassId, std::uint32_t> votes;
      for (std::uint32_t idx : cell.point_indices) {
        const ClassId label = cloud.labels[idx];
        if (label != kIgnore) ++votes[label];
      }
      ClassId best = kIgnore;
      std::uint32_t best_count = 0;
      for (const auto& [label, count] : votes) {
        if (count > best_count) {  // equal keeps the earlier (lower) class
          best = label;
          best_count = count;
        }
      }
      cell.label = best;
    }
    grid.index.emplace(pack_voxel_key(key[0], key[1], key[2]),
                       static_cast<std::uint32_t>(r));
    grid.cells.push_back(std::move(cell));
  }
  return grid;
}

std::vector<ClassId> unvoxelize_predictions(const VoxelGrid& grid,
                                            const std::vector<ClassId>& per_cell,
                                            std::size_t cloud_len) {
  if (per_cell.size() != grid.size()) {
    throw ValidationError("per-cell prediction count " +
                          std::to_string(per_cell.size()) +
                          " does not match cell count " +
                          std::to_string(grid.size()));
  }
  std::size_t member_total = 0;
  for (const VoxelCell& cell : grid.cells) member_total += cell.point_indices.size();
  if (member_total != cloud_len) {
    throw ValidationError("grid covers " + std::to_string(member_total) +
                          " points, expected " + std::to_string(cloud_len));
  }
  std::vector<ClassId> out(cloud_len, kIgnore);
  for (std::size_t r = 0; r < grid.size(); ++r) {
    for (std::uint32_t idx : grid.cells[r].point_indices) {
      out[idx] = per_cell[r];
    }
  }
  return out;
}

Mat input_features(const VoxelGrid& grid, int occupancy_cap) {
  if (occupancy_cap < 1) throw ValidationError("occupancy_cap must be >= 1");
  Mat feats(grid.size(), 5);
  for (std::size_t r = 0; r < grid.size(); ++r) {
    const VoxelCell& cell = grid.cells[r];
    const auto& key = grid.keys[r];
    for (int axis = 0; axis < 3; ++axis) {
      feats.at(r, axis) =
          cell.centroid[axis] / grid.voxel_size - static_cast<double>(key[axis]);
    }
    feats.at(r, 3) = cell.intensity_mean;
    const double occ = static_cast<double>(cell.point_indices.size());
    feats.at(r, 4) = std::min(occ, static_cast<double>(occupancy_cap)) /
                     static_cast<double>(occupancy_cap);
  }
  return feats;
}

}  // namespace lidog
