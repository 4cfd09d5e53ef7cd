#pragma once

#include <optional>
#include <vector>

#include "lidog/net.hpp"
#include "lidog/tensor.hpp"
#include "lidog/types.hpp"

namespace lidog {

// Row-wise numerically stable softmax.
Mat softmax_rows(const Mat& logits);

struct DiceResult {
  double loss = 0.0;
  bool skipped = false;  // no non-ignore element
};

// Soft DICE over classes present in the targets: per class c,
//   D_c = 2 * sum_i p_ic y_ic / (sum_i p_ic + sum_i y_ic + eps),
// sums over non-ignore elements, eps = 1e-7; loss = 1 - mean_c D_c.
DiceResult dice_loss(const Mat& probs, const std::vector<ClassId>& targets);

// Same, also filling the gradient of the loss w.r.t. probs.
DiceResult dice_loss(const Mat& probs, const std::vector<ClassId>& targets,
                     Mat& grad_probs);

// Chains a gradient w.r.t. softmax outputs back to logits.
Mat softmax_backward(const Mat& probs, const Mat& grad_probs);

struct TotalLoss {
  double ltot = 0.0;
  double l3d = 0.0;
  double lbev = 0.0;
  bool l3d_skipped = false;
  bool lbev_skipped = false;
  Mat grad_logits3d;
  std::optional<Mat> grad_logits3d_b;
  std::optional<Mat> grad_logits_bev;
};

// Joint objective. With both branches present, ltot = w3d*L3D + wbev*LBEV
// (defaults 1/2 each); a branch whose targets are entirely ignore
// contributes 0 but the other branch keeps its weight. A model without the
// BEV branch trains on L3D alone at weight 1. With double_head, L3D is the
// mean of the two heads' dice losses.
TotalLoss total_loss(const Forward& fwd, const std::vector<ClassId>& labels3d,
                     const BevLabelMap* labels_bev, double w3d = 0.5,
                     double wbev = 0.5);

}  // namespace lidog
