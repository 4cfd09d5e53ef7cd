#include "lidog/bev.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <unordered_map>

#include "lidog/rng.hpp"

namespace lidog {

void BevProjectionConfig::validate() const {
  if (!(b_x > 0.0) || !(b_z > 0.0)) {
    throw ValidationError("bev bounds must be positive");
  }
  if (width < 1 || height < 1) {
    throw ValidationError("bev pixel dims must be >= 1");
  }
}

std::optional<BevIndex> project_index(double x, double z,
                                      const BevProjectionConfig& cfg) {
  // floor((x + b) * width / (2b)) rather than dividing by the derived step,
  // so exact-center coordinates land on exact pixel boundaries.
  const double u = std::floor((x + cfg.b_x) * cfg.width / (2.0 * cfg.b_x));
  const double v = std::floor((z + cfg.b_z) * cfg.height / (2.0 * cfg.b_z));
  if (u < 0.0 || u >= cfg.width || v < 0.0 || v >= cfg.height) {
    return std::nullopt;
  }
  return BevIndex{static_cast<int>(u), static_cast<int>(v)};
}

std::vector<std::int32_t> collision_winners(const VoxelGrid& grid,
                                            const BevProjectionConfig& cfg) {
  cfg.validate();
  std::vector<std::int32_t> winners(
      static_cast<std::size_t>(cfg.width) * cfg.height, -1);
  // Colliders per pixel in canonical cell order.
  std::unordered_map<std::int64_t, std::vector<std::int32_t>> buckets;
  for (std::size_t r = 0; r < grid.size(); ++r) {
    const auto& c = grid.cells[r].centroid;
    auto px = project_index(c[0], c[2], cfg);
    if (!px) continue;
    const std::int64_t lin = static_cast<std::int64_t>(px->v) * cfg.width + px->u;
    buckets[lin].push_back(static_cast<std::int32_t>(r));
  }
  for (const auto& [lin, rows] : buckets) {
    std::size_t pick = 0;
    if (rows.size() > 1) {
      // One draw per pixel keyed by (seed, pixel index): the same winner
      // regardless of evaluation order, and shared by features and labels.
      const std::uint64_t h =
          mix64(cfg.collision_seed + 0x9E3779B97F4A7C15ull *
                                         (static_cast<std::uint64_t>(lin) + 1));
      pick = static_cast<std::size_t>(
          (static_cast<unsigned __int128>(h) * rows.size()) >> 64);
    }
    winners[static_cast<std::size_t>(lin)] = rows[pick];
  }
  return winners;
}

DenseFeatureMap project_features(const VoxelGrid& grid, const Mat& feats,
                                 const BevProjectionConfig& cfg,
                                 const std::vector<std::int32_t>& winners) {
  if (feats.rows != grid.size()) {
    throw ValidationError("feature rows " + std::to_string(feats.rows) +
                          " do not align with grid cells " +
                          std::to_string(grid.size()));
  }
  DenseFeatureMap map;
  map.width = cfg.width;
  map.height = cfg.height;
  map.channels = static_cast<int>(feats.cols);
  map.values = Mat(static_cast<std::size_t>(cfg.width) * cfg.height, feats.cols);
  map.occupied.assign(static_cast<std::size_t>(cfg.width) * cfg.height, 0);
  for (std::size_t p = 0; p < winners.size(); ++p) {
    const std::int32_t r = winners[p];
    if (r < 0) continue;
    for (std::size_t c = 0; c < feats.cols; ++c) {
      map.values.at(p, c) = feats.at(static_cast<std::size_t>(r), c);
    }
    map.occupied[p] = 1;
  }
  return map;
}

DenseFeatureMap project_features(const VoxelGrid& grid, const Mat& feats,
                                 const BevProjectionConfig& cfg) {
  return project_features(grid, feats, cfg, collision_winners(grid, cfg));
}

BevLabelMap project_labels(const VoxelGrid& grid, const BevProjectionConfig& cfg,
                           const std::vector<std::int32_t>& winners) {
  BevLabelMap map;
  map.width = cfg.width;
  map.height = cfg.height;
  map.labels.assign(static_cast<std::size_t>(cfg.width) * cfg.height, kIgnore);
  for (std::size_t p = 0; p < winners.size(); ++p) {
    if (winners[p] >= 0) {
      map.labels[p] = grid.cells[static_cast<std::size_t>(winners[p])].label;
    }
  }
  return map;
}

BevLabelMap project_labels(const VoxelGrid& grid,
                           const BevProjectionConfig& cfg) {
  return project_labels(grid, cfg, collision_winners(grid, cfg));
}

int pooled_dim(int dim, const PoolSpec& spec) {
  return (dim + 2 * spec.padding - spec.window) / spec.stride + 1;
}

DenseFeatureMap pool_features(const DenseFeatureMap& map, const PoolSpec& spec,
                              std::vector<std::int32_t>& argmax) {
  const int pw = pooled_dim(map.width, spec);
  const int ph = pooled_dim(map.height, spec);
  if (pw < 1 || ph < 1) {
    throw ValidationError("pooling produces empty output");
  }
  DenseFeatureMap out;
  out.width = pw;
  out.height = ph;
  out.channels = map.channels;
  out.values = Mat(static_cast<std::size_t>(pw) * ph, map.channels);
  out.occupied.assign(static_cast<std::size_t>(pw) * ph, 0);
  argmax.assign(static_cast<std::size_t>(pw) * ph * map.channels, -1);

  for (int pv = 0; pv < ph; ++pv) {
    const int v0 = pv * spec.stride - spec.padding;
    for (int pu = 0; pu < pw; ++pu) {
      const int u0 = pu * spec.stride - spec.padding;
      const std::size_t op = static_cast<std::size_t>(pv) * pw + pu;
      for (int c = 0; c < map.channels; ++c) {
        double best = -std::numeric_limits<double>::infinity();
        std::int32_t best_idx = -1;
        for (int dv = 0; dv < spec.window; ++dv) {
          const int v = v0 + dv;
          if (v < 0 || v >= map.height) continue;  // border never wins
          for (int du = 0; du < spec.window; ++du) {
            const int u = u0 + du;
            if (u < 0 || u >= map.width) continue;
            const std::size_t ip = static_cast<std::size_t>(v) * map.width + u;
            const double val = map.values.at(ip, static_cast<std::size_t>(c));
            if (val > best) {  // strict: first index wins ties
              best = val;
              best_idx = static_cast<std::int32_t>(ip);
            }
          }
        }
        out.values.at(op, static_cast<std::size_t>(c)) = best;
        argmax[op * map.channels + c] = best_idx;
        if (best_idx >= 0 && map.occupied[static_cast<std::size_t>(best_idx)]) {
          out.occupied[op] = 1;
        }
      }
    }
  }
  return out;
}

DenseFeatureMap pool_features(const DenseFeatureMap& map, const PoolSpec& spec) {
  std::vector<std::int32_t> argmax;
  return pool_features(map, spec, argmax);
}

BevLabelMap downsample_labels(const BevLabelMap& labels, int factor) {
  if (factor < 1) throw ValidationError("downsample factor must be >= 1");
  const int w = labels.width / factor;
  const int h = labels.height / factor;
  if (w < 1 || h < 1) {
    throw ValidationError("downsample factor exceeds raster dims");
  }
  BevLabelMap out;
  out.width = w;
  out.height = h;
  out.labels.resize(static_cast<std::size_t>(w) * h);
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      out.labels[static_cast<std::size_t>(v) * w + u] =
          labels.at(u * factor, v * factor);
    }
  }
  return out;
}

std::string pgm_bytes(const BevLabelMap& map) {
  std::string out = "P5\n" + std::to_string(map.width) + " " +
                    std::to_string(map.height) + "\n255\n";
  out.reserve(out.size() + map.labels.size());
  for (ClassId label : map.labels) {
    if (label == kIgnore) {
      out.push_back(static_cast<char>(255));
    } else if (label < 255) {
      out.push_back(static_cast<char>(label));
    } else {
      throw ValidationError("class id " + std::to_string(label) +
                            " not representable in 8-bit PGM");
    }
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, const BevLabelMap& map) {
  std::string bytes = pgm_bytes(map);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open file for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace lidog
