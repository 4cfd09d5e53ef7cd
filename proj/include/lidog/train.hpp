#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lidog/augment.hpp"
#include "lidog/bev.hpp"
#include "lidog/net.hpp"
#include "lidog/types.hpp"

namespace lidog {

struct Dataset {
  std::string name;
  std::vector<PointCloud> scans;  // labeled
};

enum class Mixing { none, mix3d, cutmix };

struct TrainConfig {
  double learning_rate = 0.01;
  int batch_size = 16;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs = 1;
  std::uint64_t seed = 0;
  double w3d = 0.5;
  double wbev = 0.5;
  double voxel_size = 0.05;

  // Augmentation selection. Transforms and mixing are applied per sample
  // with per-(frame, epoch) derived seeds. With multiple sources, mixing
  // partners come from the next source round-robin; single-source mixes
  // within the dataset.
  bool augment_transform = false;
  Mixing mixing = Mixing::none;
  AugmentConfig transform;
  double cutmix_extent = 10.0;

  void validate() const;
};

struct StepLog {
  int epoch = 0;
  int step = 0;
  double l3d = 0.0;
  double lbev = 0.0;
  double ltot = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<StepLog> log;
};

// Joint training loop: ADAM on the dice objective, deterministic given the
// seed (fixed shuffling and gradient reduction order, independent of the
// worker count). Dice is computed per scan and averaged over the batch.
// Datasets interleave round-robin per batch.
TrainResult train(const std::vector<Dataset>& sources, const ModelConfig& mcfg,
                  const TrainConfig& tcfg, const BevProjectionConfig& bcfg,
                  int workers = 1);

// CSV with header epoch,step,l3d,lbev,ltot.
std::string loss_log_csv(const std::vector<StepLog>& log);
void write_loss_log(const std::filesystem::path& path,
                    const std::vector<StepLog>& log);

// Pooled BEV label raster used as the 2D branch target: labels projected at
// cfg resolution, then subsampled by the pooling stride. Throws
// ValidationError when the raster does not align with the pooled feature
// dims (width and height must be multiples of 3).
BevLabelMap bev_training_labels(const VoxelGrid& grid,
                                const BevProjectionConfig& cfg);
BevLabelMap bev_training_labels(const VoxelGrid& grid,
                                const BevProjectionConfig& cfg,
                                const std::vector<std::int32_t>& winners);

}  // namespace lidog
