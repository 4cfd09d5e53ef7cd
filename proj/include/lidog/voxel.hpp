#pragma once

#include <array>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "lidog/tensor.hpp"
#include "lidog/types.hpp"

namespace lidog {

struct VoxelCell {
  std::vector<std::uint32_t> point_indices;
  ClassId label = kIgnore;  // majority vote, ignore votes excluded,
                            // ties to the lowest class id
  std::array<double, 3> centroid{0.0, 0.0, 0.0};
  double intensity_mean = 0.0;
};

// Packs a voxel index triple into a hashable key; each component must fit in
// a signed 21-bit range (about +-52 km at 0.05 m cells).
std::uint64_t pack_voxel_key(int i, int j, int k);

struct VoxelGrid {
  double voxel_size = 0.0;
  // Canonical iteration order: lexicographic on (i, j, k).
  std::vector<std::array<std::int32_t, 3>> keys;
  std::vector<VoxelCell> cells;
  std::unordered_map<std::uint64_t, std::uint32_t> index;  // packed key -> row

  std::size_t size() const { return cells.size(); }
};

// Cell index per axis is floor(coord / voxel_size). Every point lands in
// exactly one cell.
VoxelGrid voxelize(const PointCloud& cloud, double voxel_size);

// Expands per-cell predictions (canonical order) back to per-point labels.
std::vector<ClassId> unvoxelize_predictions(const VoxelGrid& grid,
                                            const std::vector<ClassId>& per_cell,
                                            std::size_t cloud_len);

// Network input featurization: per cell [offset_x, offset_y, offset_z,
// mean intensity, occupancy count / cap], offsets being the centroid's
// position inside the cell in [0, 1).
Mat input_features(const VoxelGrid& grid, int occupancy_cap);

}  // namespace lidog
