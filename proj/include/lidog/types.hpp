#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace lidog {

using ClassId = std::uint16_t;

// Reserved label for points without a class in the common vocabulary.
// Excluded from every loss and metric.
inline constexpr ClassId kIgnore = 0xFFFF;

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Sensor-frame point. The internal frame is y-up with the x-z ground plane,
// so the BEV projection simply drops y.
struct Point {
  float x = 0.0f;
  float y = 0.0f;
  float z = 0.0f;
  float intensity = 0.0f;

  bool operator==(const Point&) const = default;
};

struct PointCloud {
  std::vector<Point> points;
  std::vector<ClassId> labels;  // empty, or one entry per point
  std::string frame_id;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool labeled() const { return labels.size() == points.size(); }
};

// Throws ValidationError naming the first offending point index.
void validate_finite(const PointCloud& cloud);

// Throws ValidationError unless labels are absent or aligned with points.
void validate_labels(const PointCloud& cloud);

class ClassVocabulary {
 public:
  ClassVocabulary() = default;
  explicit ClassVocabulary(std::vector<std::string> names);

  // The seven-class vocabulary shared by every dataset in this project.
  static const ClassVocabulary& common7();

  std::size_t num_classes() const { return names_.size(); }
  const std::string& name(ClassId id) const;
  std::optional<ClassId> id_of(const std::string& name) const;
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, ClassId> by_name_;
};

// Raw source-dataset label id -> common ClassId. Total by construction:
// ids absent from the table resolve to kIgnore.
struct LabelRemap {
  std::unordered_map<std::uint32_t, ClassId> mapping;

  ClassId apply(std::uint32_t raw) const {
    auto it = mapping.find(raw);
    return it == mapping.end() ? kIgnore : it->second;
  }

  // raw id i -> class i for i in [0, k)
  static LabelRemap identity(std::size_t k);
};

// Returns a labeled copy of the cloud.
PointCloud attach_labels(const PointCloud& cloud, std::vector<ClassId> labels);

}  // namespace lidog
