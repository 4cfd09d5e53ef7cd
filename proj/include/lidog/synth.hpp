#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lidog/rng.hpp"
#include "lidog/types.hpp"

namespace lidog {

// Rotating-beam sensor description. Beams are evenly spaced over the
// elevation range (inclusive endpoints); azimuth sweeps a full revolution.
struct SensorSpec {
  int beam_count = 64;
  double elevation_min_deg = -25.0;
  double elevation_max_deg = 3.0;
  double azimuth_step_deg = 1.0;
  double max_range = 80.0;
  double range_noise_sigma = 0.01;  // meters, along the ray
  double mount_height = 1.8;

  void validate() const;

  // Default domain pair: a dense 64-beam unit and a sparser 32-beam unit
  // with a wider elevation fan.
  static SensorSpec domain_a_64();
  static SensorSpec domain_b_32();
};

// Procedural street block: a road strip flanked by raised sidewalks and
// terrain, with boxes for buildings and vehicles, cylinders for people,
// sphere-on-cylinder trees, and small terrain bumps.
struct SceneSpec {
  std::uint64_t seed = 0;
  double world_extent = 18.0;  // half extent, meters

  double road_half_min = 3.0, road_half_max = 5.0;
  double sidewalk_width_min = 2.0, sidewalk_width_max = 3.0;
  double sidewalk_height = 0.15;
  int vehicles_min = 1, vehicles_max = 4;
  int persons_min = 1, persons_max = 4;
  int buildings_min = 2, buildings_max = 5;
  int trees_min = 2, trees_max = 6;
  double bump_density = 0.15;  // terrain bumps per square meter

  void validate() const;
};

struct Primitive {
  enum class Kind { horizontal_rect, box, vertical_cylinder, sphere };

  Kind kind = Kind::horizontal_rect;
  ClassId label = kIgnore;
  // horizontal_rect: plane y = a[1], x in [a[0] - a[3], a[0] + a[3]],
  //                  z in [a[2] - a[4], a[2] + a[4]]
  // box:             AABB corners (a[0..2]) .. (a[3..5])
  // vertical_cylinder: center axis (a[0], ., a[2]), radius a[3],
  //                    y in [a[1], a[1] + a[4]]
  // sphere:          center (a[0..2]), radius a[3]
  std::array<double, 6> a{};

  bool operator==(const Primitive&) const = default;
};

// Deterministic in the scene seed.
std::vector<Primitive> generate_scene(const SceneSpec& spec);

// Unsigned distance from a point to the primitive surface.
double surface_distance(const Primitive& prim, double x, double y, double z);

// Nearest analytic intersection along one ray; returns the hit range and
// primitive index, or false on miss.
bool raycast(const std::vector<Primitive>& scene, const std::array<double, 3>& origin,
             const std::array<double, 3>& dir, double max_range, double& t_out,
             std::size_t& prim_out);

// One labeled scan: a ray per (beam elevation, azimuth step), nearest hit,
// Gaussian range noise along the ray. Misses and out-of-range hits are
// omitted. Point order is beam-major, then azimuth.
PointCloud raycast_scan(const std::vector<Primitive>& scene,
                        const SensorSpec& sensor, Rng& rng);

// Writes scans/NNNNNN.ldg (native format) plus manifest.json with the
// sensor spec, seeds, and class histogram. Frame f uses scene seed
// scene_seed_base + f, so two domains generated from the same base share
// their worlds. Reruns are byte-identical.
void generate_domain(const std::filesystem::path& dir, int n_scans,
                     std::uint64_t scene_seed_base, const SensorSpec& sensor,
                     const SceneSpec& scene_template, int workers = 1);

}  // namespace lidog
