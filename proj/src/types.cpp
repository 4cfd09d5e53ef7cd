#include "lidog/types.hpp"

#include <cmath>

namespace lidog {

void validate_finite(const PointCloud& cloud) {
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    const Point& p = cloud.points[i];
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) {
      throw ValidationError("non-finite coordinate at point index " +
                            std::to_string(i));
    }
  }
}

void validate_labels(const PointCloud& cloud) {
  if (!cloud.labels.empty() && cloud.labels.size() != cloud.points.size()) {
    throw ValidationError("label count " + std::to_string(cloud.labels.size()) +
                          " does not match point count " +
                          std::to_string(cloud.points.size()));
  }
}

ClassVocabulary::ClassVocabulary(std::vector<std::string> names)
    : names_(std::move(names)) {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    auto [it, inserted] = by_name_.emplace(names_[i], static_cast<ClassId>(i));
    if (!inserted) {
      throw ValidationError("duplicate class name: " + names_[i]);
    }
  }
}

const ClassVocabulary& ClassVocabulary::common7() {
  static const ClassVocabulary vocab({"vehicle", "person", "road", "sidewalk",
                                      "terrain", "manmade", "vegetation"});
  return vocab;
}

const std::string& ClassVocabulary::name(ClassId id) const {
  if (id >= names_.size()) {
    throw ValidationError("class id " + std::to_string(id) +
                          " outside vocabulary of size " +
                          std::to_string(names_.size()));
  }
  return names_[id];
}

std::optional<ClassId> ClassVocabulary::id_of(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) return std::nullopt;
  return it->second;
}

LabelRemap LabelRemap::identity(std::size_t k) {
  LabelRemap remap;
  for (std::size_t i = 0; i < k; ++i) {
    remap.mapping[static_cast<std::uint32_t>(i)] = static_cast<ClassId>(i);
  }
  return remap;
}

PointCloud attach_labels(const PointCloud& cloud, std::vector<ClassId> labels) {
  if (labels.size() != cloud.points.size()) {
    throw ValidationError("cannot attach " + std::to_string(labels.size()) +
                          " labels to " + std::to_string(cloud.points.size()) +
                          " points");
  }
  PointCloud out = cloud;
  out.labels = std::move(labels);
  return out;
}

}  // namespace lidog
