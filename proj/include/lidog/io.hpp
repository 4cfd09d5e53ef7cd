#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "lidog/types.hpp"

namespace lidog {

enum class ScanFormat { kitti_bin, native };

// kitti_bin: records of four little-endian f32 (x, y, z, intensity) in the
// KITTI z-up frame; ingestion swaps axes into the internal y-up frame,
// (x, y, z)_kitti -> (x, z, y)_internal.
//
// native: "LDGSCAN1" magic, u64 point count, then per point four
// little-endian f32 (x, y, z, intensity) and one u16 label (0xFFFF = ignore),
// already in the internal frame.
PointCloud load_scan(const std::filesystem::path& path, ScanFormat format);

// Guesses the format from the extension (.bin -> kitti_bin, .ldg -> native).
ScanFormat scan_format_for(const std::filesystem::path& path);

std::string serialize_native(const PointCloud& cloud);
PointCloud parse_native(const std::string& bytes, std::string frame_id);
void save_scan(const std::filesystem::path& path, const PointCloud& cloud);

// SemanticKITTI label file: little-endian u32 per point, semantic id in the
// lower 16 bits; each semantic id is passed through the remap.
std::vector<ClassId> load_labels(const std::filesystem::path& path,
                                 const LabelRemap& remap);

// Remap config: a JSON object mapping raw-id keys to class names or
// "ignore", e.g. {"40": "road", "0": "ignore"}.
LabelRemap load_remap(const std::filesystem::path& path,
                      const ClassVocabulary& vocab);
LabelRemap parse_remap(const std::string& json_text,
                       const ClassVocabulary& vocab);

}  // namespace lidog
