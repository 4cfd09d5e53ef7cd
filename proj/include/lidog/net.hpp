#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lidog/bev.hpp"
#include "lidog/tensor.hpp"
#include "lidog/voxel.hpp"

namespace lidog {

// Dual-head segmentation model: a sparse 3D encoder-decoder with a sparse
// segmentation head, plus a dense 2D head fed by the BEV projection of the
// decoder output. The 2D branch exists only at training time.
struct ModelConfig {
  int input_channels = 5;
  std::vector<int> encoder_channels = {8, 16};  // decoder mirrors this
  int kernel_extent = 3;                        // per axis, fixed
  std::array<int, 2> bev_hidden = {16, 8};      // head widths [C,16,8,K]
  int num_classes = 7;
  bool with_bev = true;
  bool double_head = false;  // second 3D head, softmax-averaged at inference
  int occupancy_cap = 16;    // input featurization cap
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  // Skip connections concatenate; recorded in checkpoints so the choice is
  // visible.
  std::string skip_style = "concat";

  void validate() const;
  int feature_channels() const { return encoder_channels.front(); }
};

struct ModelParams {
  std::map<std::string, Tensor> t;  // ordered: deterministic iteration

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool operator==(const ModelParams&) const = default;
};

// Running batch-norm statistics (".rmean"/".rvar") are carried in the store
// but are not optimizer targets.
bool is_trainable(const std::string& name);

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);
ModelParams zeros_like(const ModelParams& params);

// ---------------------------------------------------------------------------
// Per-sample geometry: cell sets per level and kernel maps (offset-indexed
// lists of (out_row, in_row) pairs). Built once per voxel grid and reused by
// every forward/backward pass over it.

struct LevelGeom {
  std::vector<std::array<std::int32_t, 3>> cells;  // lexicographic
  std::unordered_map<std::uint64_t, std::int32_t> index;
};

struct KernelMap {
  // 27 offsets, (di,dj,dk) in {-1,0,1}^3 lexicographic.
  std::array<std::vector<std::pair<std::int32_t, std::int32_t>>, 27> off;
  std::size_t out_rows = 0;
};

struct GridPlan {
  int levels = 0;
  std::vector<LevelGeom> geom;
  std::vector<KernelMap> subm;  // same-level maps, levels 0 .. max(0, L-2)
  std::vector<KernelMap> down;  // level l -> l+1
  std::vector<KernelMap> up;    // level l+1 -> l (transposed conv)
  // BEV projection of level-0 centroids (empty when built without a BEV cfg).
  std::vector<std::int32_t> winner;
  int bev_w = 0;
  int bev_h = 0;
};

std::shared_ptr<const GridPlan> build_plan(const VoxelGrid& grid,
                                           const ModelConfig& cfg,
                                           const BevProjectionConfig* bev_cfg);

// ---------------------------------------------------------------------------

enum class Mode { train, eval };

struct BnCache {
  std::size_t n = 0;
  std::vector<double> mean;
  std::vector<double> var;
  std::vector<double> invstd;
  Mat xhat;
};

struct Tape {
  Mode mode = Mode::train;
  bool used = false;
  std::shared_ptr<const GridPlan> plan;

  Mat in_feats;
  std::vector<Mat> enc_conv_in;  // input to stem/down conv per level
  std::vector<BnCache> enc_bn;
  std::vector<Mat> enc_relu_in;
  std::vector<Mat> enc_out;  // post-relu, skip sources

  std::vector<Mat> up_conv_in;  // decoder stages, deepest first
  std::vector<BnCache> up_bn;
  std::vector<Mat> up_relu_in;
  std::vector<Mat> fuse_in;  // concatenated [up | skip]
  std::vector<BnCache> fuse_bn;
  std::vector<Mat> fuse_relu_in;

  Mat f3d;  // decoder output: head and projection input

  bool has_bev = false;
  Mat dense;  // projected raster before pooling
  std::vector<std::int32_t> pool_argmax;
  int pooled_w = 0;
  int pooled_h = 0;
  std::vector<Mat> bev_conv_in;
  std::vector<BnCache> bev_bn;
  std::vector<Mat> bev_relu_in;

  // (bn layer name, batch mean, batch var) in network order; folded into the
  // running statistics by the optimizer step.
  std::vector<std::tuple<std::string, std::vector<double>, std::vector<double>>>
      bn_stats;
};

struct Forward {
  Mat logits3d;  // cells x K
  std::optional<Mat> logits3d_b;
  std::optional<Mat> logits_bev;  // (pooled_h*pooled_w) x K
  int bev_w = 0;
  int bev_h = 0;
  Tape tape;
};

// Fast path: caller supplies the plan and input features.
Forward forward(const ModelParams& params, const ModelConfig& cfg,
                std::shared_ptr<const GridPlan> plan, const Mat& feats,
                Mode mode);

// Convenience path matching the module contract.
Forward forward(const ModelParams& params, const ModelConfig& cfg,
                const VoxelGrid& grid, const BevProjectionConfig& bev_cfg,
                Mode mode);

// Exact reverse-mode gradients of forward. Consumes the tape (reuse throws
// UsageError). Null gradient pointers mean zero upstream gradient.
ModelParams backward(const ModelParams& params, const ModelConfig& cfg,
                     Tape& tape, const Mat* grad_logits3d,
                     const Mat* grad_logits3d_b, const Mat* grad_logits_bev);

// Folds the tape's batch statistics into the running bn statistics.
void apply_bn_updates(ModelParams& params, const Tape& tape, double momentum);

// Per-voxel argmax prediction (eval mode, 3D branch only). With double_head
// the two heads' softmax outputs are averaged first. Ties break low.
std::vector<ClassId> predict(const ModelParams& params, const ModelConfig& cfg,
                             const VoxelGrid& grid);

// Checkpoint: "LDGCKPT1" magic, config JSON, then (name, shape, f64 data)
// entries in name order.
void save_checkpoint(const std::filesystem::path& path,
                     const ModelParams& params, const ModelConfig& cfg);
std::pair<ModelParams, ModelConfig> load_checkpoint(
    const std::filesystem::path& path);
std::string checkpoint_bytes(const ModelParams& params,
                             const ModelConfig& cfg);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace lidog
