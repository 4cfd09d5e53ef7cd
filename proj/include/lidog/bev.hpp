#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lidog/tensor.hpp"
#include "lidog/voxel.hpp"

namespace lidog {

// Quantization and bounds for the sparse-to-dense top-down projection.
// The meters-per-pixel steps are derived from the bounds and pixel dims.
struct BevProjectionConfig {
  double b_x = 50.0;  // half-extent along x, meters
  double b_z = 50.0;  // half-extent along z, meters
  int width = 168;
  int height = 168;
  std::uint64_t collision_seed = 0;

  double x_q() const { return 2.0 * b_x / width; }
  double z_q() const { return 2.0 * b_z / height; }
  void validate() const;
};

struct BevIndex {
  int u = 0;
  int v = 0;
  bool operator==(const BevIndex&) const = default;
};

// u = floor((x + b_x) / x_q), v = floor((z + b_z) / z_q), on the half-open
// interval [-b, b) per axis; out-of-bounds is a value, not an error.
std::optional<BevIndex> project_index(double x, double z,
                                      const BevProjectionConfig& cfg);

// Winning voxel row per pixel (-1 where empty). When several voxels project
// to one pixel, one is kept uniformly at random, keyed by collision_seed and
// the pixel index, so features and labels always come from the same voxel
// and the outcome is independent of scheduling.
std::vector<std::int32_t> collision_winners(const VoxelGrid& grid,
                                            const BevProjectionConfig& cfg);

struct DenseFeatureMap {
  int width = 0;
  int height = 0;
  int channels = 0;
  Mat values;                       // (height*width) x channels, v-major
  std::vector<std::uint8_t> occupied;  // per pixel

  std::size_t pixel(int u, int v) const {
    return static_cast<std::size_t>(v) * width + u;
  }
};

struct BevLabelMap {
  int width = 0;
  int height = 0;
  std::vector<ClassId> labels;  // v-major; kIgnore where empty

  ClassId at(int u, int v) const {
    return labels[static_cast<std::size_t>(v) * width + u];
  }
};

DenseFeatureMap project_features(const VoxelGrid& grid, const Mat& feats,
                                 const BevProjectionConfig& cfg);
DenseFeatureMap project_features(const VoxelGrid& grid, const Mat& feats,
                                 const BevProjectionConfig& cfg,
                                 const std::vector<std::int32_t>& winners);

BevLabelMap project_labels(const VoxelGrid& grid,
                           const BevProjectionConfig& cfg);
BevLabelMap project_labels(const VoxelGrid& grid,
                           const BevProjectionConfig& cfg,
                           const std::vector<std::int32_t>& winners);

struct PoolSpec {
  int window = 5;
  int stride = 3;
  int padding = 1;
};

// Output dim = floor((dim + 2*padding - window) / stride) + 1. The padded
// border never wins, so all-zero inputs pool to all-zero.
int pooled_dim(int dim, const PoolSpec& spec);

DenseFeatureMap pool_features(const DenseFeatureMap& map, const PoolSpec& spec);

// Variant used by the network: also returns, per (output pixel, channel),
// the linear input pixel index of the max (first index wins ties).
DenseFeatureMap pool_features(const DenseFeatureMap& map, const PoolSpec& spec,
                              std::vector<std::int32_t>& argmax);

// Nearest-neighbor subsampling on the top-left phase: out(u, v) =
// in(factor*u, factor*v). Ignore pixels propagate.
BevLabelMap downsample_labels(const BevLabelMap& labels, int factor);

// 8-bit binary PGM; pixel value = class id, 255 = ignore, row v = 0 first.
std::string pgm_bytes(const BevLabelMap& map);
void write_pgm(const std::filesystem::path& path, const BevLabelMap& map);

}  // namespace lidog
