#include "lidog/io.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"

namespace lidog {

namespace {

constexpr char kScanMagic[8] = {'L', 'D', 'G', 'S', 'C', 'A', 'N', '1'};

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

float get_f32(const unsigned char* p) {
  std::uint32_t bits = get_u32(p);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open file: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return bytes;
}

PointCloud parse_kitti(const std::string& bytes, std::string frame_id) {
  constexpr std::size_t kRecord = 16;
  if (bytes.size() % kRecord != 0) {
    throw FormatError("truncated kitti_bin file: format error at offset " +
                      std::to_string(bytes.size() / kRecord * kRecord));
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  PointCloud cloud;
  cloud.frame_id = std::move(frame_id);
  cloud.points.reserve(bytes.size() / kRecord);
  for (std::size_t i = 0; i < bytes.size(); i += kRecord) {
    // KITTI is z-up; internal frame is y-up: (x, y, z)_kitti -> (x, z, y).
    Point pt;
    pt.x = get_f32(p + i);
    pt.z = get_f32(p + i + 4);
    pt.y = get_f32(p + i + 8);
    pt.intensity = get_f32(p + i + 12);
    cloud.points.push_back(pt);
  }
  validate_finite(cloud);
  return cloud;
}

}  // namespace

std::string serialize_native(const PointCloud& cloud) {
  validate_labels(cloud);
  std::string out;
  out.reserve(16 + cloud.size() * 18);
  out.append(kScanMagic, sizeof(kScanMagic));
  put_u64(out, cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Point& p = cloud.points[i];
    put_f32(out, p.x);
    put_f32(out, p.y);
    put_f32(out, p.z);
    put_f32(out, p.intensity);
    put_u16(out, cloud.labeled() ? cloud.labels[i] : kIgnore);
  }
  return out;
}

PointCloud parse_native(const std::string& bytes, std::string frame_id) {
  constexpr std::size_t kRecord = 18;
  if (bytes.size() < 16 ||
      std::memcmp(bytes.data(), kScanMagic, sizeof(kScanMagic)) != 0) {
    throw FormatError("missing LDGSCAN1 magic");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t count = get_u64(p + 8);
  if (bytes.size() != 16 + count * kRecord) {
    throw FormatError("native scan size mismatch: format error at offset " +
                      std::to_string(bytes.size()));
  }
  PointCloud cloud;
  cloud.frame_id = std::move(frame_id);
  cloud.points.reserve(count);
  cloud.labels.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const unsigned char* rec = p + 16 + i * kRecord;
    Point pt;
    pt.x = get_f32(rec);
    pt.y = get_f32(rec + 4);
    pt.z = get_f32(rec + 8);
    pt.intensity = get_f32(rec + 12);
    cloud.points.push_back(pt);
    cloud.labels.push_back(get_u16(rec + 16));
  }
  validate_finite(cloud);
  return cloud;
}

PointCloud load_scan(const std::filesystem::path& path, ScanFormat format) {
  std::string bytes = read_file(path);
  std::string frame_id = path.stem().string();
  switch (format) {
    case ScanFormat::kitti_bin:
      return parse_kitti(bytes, std::move(frame_id));
    case ScanFormat::native:
      return parse_native(bytes, std::move(frame_id));
  }
  throw UsageError("unknown scan format");
}

ScanFormat scan_format_for(const std::filesystem::path& path) {
  const std::string ext = path.extension().string();
  if (ext == ".bin") return ScanFormat::kitti_bin;
  if (ext == ".ldg") return ScanFormat::native;
  throw UsageError("cannot infer scan format from extension: " + path.string());
}

void save_scan(const std::filesystem::path& path, const PointCloud& cloud) {
  std::string bytes = serialize_native(cloud);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open file for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::vector<ClassId> load_labels(const std::filesystem::path& path,
                                 const LabelRemap& remap) {
  std::string bytes = read_file(path);
  if (bytes.size() % 4 != 0) {
    throw FormatError("truncated label file: format error at offset " +
                      std::to_string(bytes.size() / 4 * 4));
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  std::vector<ClassId> labels;
  labels.reserve(bytes.size() / 4);
  for (std::size_t i = 0; i < bytes.size(); i += 4) {
    // SemanticKITTI packs the instance id in the upper 16 bits.
    const std::uint32_t semantic = get_u32(p + i) & 0xFFFFu;
    labels.push_back(remap.apply(semantic));
  }
  return labels;
}

LabelRemap parse_remap(const std::string& json_text,
                       const ClassVocabulary& vocab) {
  nlohmann::json j = nlohmann::json::parse(json_text);
  if (!j.is_object()) throw FormatError("remap config must be a JSON object");
  LabelRemap remap;
  for (const auto& [key, value] : j.items()) {
    std::uint32_t raw = 0;
    try {
      raw = static_cast<std::uint32_t>(std::stoul(key));
    } catch (const std::exception&) {
      throw ValidationError("remap key is not a raw label id: " + key);
    }
    const std::string name = value.get<std::string>();
    if (name == "ignore") {
      remap.mapping[raw] = kIgnore;
      continue;
    }
    auto id = vocab.id_of(name);
    if (!id) throw ValidationError("remap value is not a known class: " + name);
    remap.mapping[raw] = *id;
  }
  return remap;
}

LabelRemap load_remap(const std::filesystem::path& path,
                      const ClassVocabulary& vocab) {
  return parse_remap(read_file(path), vocab);
}

}  // namespace lidog
