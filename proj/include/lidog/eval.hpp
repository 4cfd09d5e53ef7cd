#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lidog/net.hpp"
#include "lidog/train.hpp"
#include "lidog/types.hpp"

namespace lidog {

// K x K counts, rows = ground truth, columns = prediction; ignore labels are
// excluded at accumulation time.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t k) : k_(k), counts_(k * k, 0) {}

  std::size_t num_classes() const { return k_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const {
    return counts_[gt * k_ + pred];
  }
  void add(std::size_t gt, std::size_t pred, std::uint64_t n = 1) {
    counts_[gt * k_ + pred] += n;
  }
  std::uint64_t total() const;
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

void accumulate(ConfusionMatrix& cm, const std::vector<ClassId>& pred,
                const std::vector<ClassId>& gt);

// Percentage; absent (0/0) when the class appears in neither axis.
std::optional<double> iou(const ConfusionMatrix& cm, std::size_t c);

// Unweighted mean over defined per-class IoUs.
std::optional<double> miou(const ConfusionMatrix& cm);

// Per-point scoring of one scan: voxelize, predict, expand to points.
ConfusionMatrix score_scan(const ModelParams& params, const ModelConfig& mcfg,
                           const PointCloud& scan, double voxel_size,
                           std::size_t k);
ConfusionMatrix score_dataset(const ModelParams& params,
                              const ModelConfig& mcfg,
                              const std::vector<PointCloud>& scans,
                              double voxel_size, std::size_t k,
                              int workers = 1);

// Cross-domain experiment: trains each requested variant on the source
// datasets with identical seeds and data order, then scores held-out source
// validation and every target. Source and target paths must be disjoint.
struct ExperimentSpec {
  std::vector<std::filesystem::path> source_dirs;
  std::vector<std::filesystem::path> target_dirs;
  ModelConfig model;
  TrainConfig train;
  BevProjectionConfig bev;
  // Subset of {"lidog", "no_bev", "double"}.
  std::vector<std::string> variants = {"lidog", "no_bev"};
  std::optional<double> bev_area;        // overrides b_x = b_z
  std::optional<double> bev_resolution;  // scales width/height (0.5/0.75/1.0)
  double holdout_fraction = 0.2;         // source validation share

  void validate() const;
};

struct ReportRow {
  std::string variant;
  std::string split;  // "source_val" or a target dataset name
  std::vector<std::optional<double>> class_iou;
  std::optional<double> miou;
};

struct ExperimentReport {
  std::vector<std::string> class_names;
  std::vector<ReportRow> rows;

  std::optional<double> miou_of(const std::string& variant,
                                const std::string& split) const;
  // Header variant,split,class,iou rows, then a summary block with header
  // variant,split,miou.
  std::string csv() const;
  std::string table() const;
};

// Loads scans/*.ldg in filename order; name is the directory basename.
Dataset load_domain_dir(const std::filesystem::path& dir);

struct ExperimentArtifacts {
  ExperimentReport report;
  // Variant name -> serialized checkpoint bytes.
  std::vector<std::pair<std::string, std::string>> checkpoints;
  std::vector<std::pair<std::string, std::string>> loss_logs;  // csv text
};

ExperimentArtifacts run_experiment(const ExperimentSpec& spec, int workers = 1);

// Convenience wrapper that also writes report.csv, per-variant checkpoints
// and loss logs under out_dir.
ExperimentArtifacts run_experiment(const ExperimentSpec& spec, int workers,
                                   const std::filesystem::path& out_dir);

}  // namespace lidog
