#include "lidog/loss.hpp"

#include <algorithm>
#include <cmath>

namespace lidog {

namespace {
constexpr double kDiceEps = 1e-7;
}

Mat softmax_rows(const Mat& logits) {
  Mat probs(logits.rows, logits.cols);
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const double* x = logits.row(r);
    double* p = probs.row(r);
    double mx = x[0];
    for (std::size_t c = 1; c < logits.cols; ++c) mx = std::max(mx, x[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < logits.cols; ++c) {
      p[c] = std::exp(x[c] - mx);
      sum += p[c];
    }
    for (std::size_t c = 0; c < logits.cols; ++c) p[c] /= sum;
  }
  return probs;
}

namespace {

DiceResult dice_impl(const Mat& probs, const std::vector<ClassId>& targets,
                     Mat* grad) {
  if (targets.size() != probs.rows) {
    throw ValidationError("dice targets " + std::to_string(targets.size()) +
                          " do not align with probability rows " +
                          std::to_string(probs.rows));
  }
  const std::size_t k = probs.cols;
  std::vector<double> inter(k, 0.0);   // sum_i p_ic y_ic
  std::vector<double> psum(k, 0.0);    // sum_i p_ic
  std::vector<double> tcount(k, 0.0);  // sum_i y_ic
  std::size_t counted = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const ClassId y = targets[i];
    if (y == kIgnore) continue;
    if (y >= k) {
      throw ValidationError("target class " + std::to_string(y) +
                            " outside the " + std::to_string(k) +
                            "-class simplex");
    }
    ++counted;
    const double* p = probs.row(i);
    for (std::size_t c = 0; c < k; ++c) psum[c] += p[c];
    inter[y] += p[i * 0 + y];  // p[y]
  }

  DiceResult result;
  if (grad != nullptr) *grad = Mat(probs.rows, probs.cols);
  if (counted == 0) {
    result.skipped = true;
    return result;
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] != kIgnore) tcount[targets[i]] += 1.0;
  }

  std::vector<std::size_t> present;
  for (std::size_t c = 0; c < k; ++c) {
    if (tcount[c] > 0.0) present.push_back(c);
  }
  double mean_dice = 0.0;
  std::vector<double> denom(k, 0.0);
  for (std::size_t c : present) {
    denom[c] = psum[c] + tcount[c] + kDiceEps;
    mean_dice += 2.0 * inter[c] / denom[c];
  }
  mean_dice /= static_cast<double>(present.size());
  result.loss = 1.0 - mean_dice;

  if (grad != nullptr) {
    // d(loss)/d p_jc = -(2/|P|) * (y_jc * denom_c - inter_c) / denom_c^2
    // for counted rows and present classes; zero elsewhere.
    const double inv_np = 1.0 / static_cast<double>(present.size());
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const ClassId y = targets[i];
      if (y == kIgnore) continue;
      double* g = grad->row(i);
      for (std::size_t c : present) {
        const double yic = (y == c) ? 1.0 : 0.0;
        g[c] = -2.0 * inv_np * (yic * denom[c] - inter[c]) / (denom[c] * denom[c]);
      }
    }
  }
  return result;
}

}  // namespace

DiceResult dice_loss(const Mat& probs, const std::vector<ClassId>& targets) {
  return dice_impl(probs, targets, nullptr);
}

DiceResult dice_loss(const Mat& probs, const std::vector<ClassId>& targets,
                     Mat& grad_probs) {
  return dice_impl(probs, targets, &grad_probs);
}

Mat softmax_backward(const Mat& probs, const Mat& grad_probs) {
  Mat grad_logits(probs.rows, probs.cols);
  for (std::size_t r = 0; r < probs.rows; ++r) {
    const double* p = probs.row(r);
    const double* gp = grad_probs.row(r);
    double* gl = grad_logits.row(r);
    double dot = 0.0;
    for (std::size_t c = 0; c < probs.cols; ++c) dot += gp[c] * p[c];
    for (std::size_t c = 0; c < probs.cols; ++c) gl[c] = p[c] * (gp[c] - dot);
  }
  return grad_logits;
}

TotalLoss total_loss(const Forward& fwd, const std::vector<ClassId>& labels3d,
                     const BevLabelMap* labels_bev, double w3d, double wbev) {
  TotalLoss out;

  auto head_loss = [&](const Mat& logits, double weight, Mat& grad_logits,
                       bool& skipped) {
    Mat probs = softmax_rows(logits);
    Mat gp;
    DiceResult dice = dice_loss(probs, labels3d, gp);
    skipped = dice.skipped;
    if (dice.skipped) {
      grad_logits = Mat(logits.rows, logits.cols);
      return 0.0;
    }
    for (double& v : gp.d) v *= weight;
    grad_logits = softmax_backward(probs, gp);
    return dice.loss;
  };

  if (fwd.logits3d_b.has_value()) {
    // Double-head training: each head gets half of the 3D weight.
    bool sa = false, sb = false;
    Mat ga, gb;
    const double la = head_loss(fwd.logits3d, w3d * 0.5, ga, sa);
    const double lb = head_loss(*fwd.logits3d_b, w3d * 0.5, gb, sb);
    out.l3d = 0.5 * (la + lb);
    out.l3d_skipped = sa && sb;
    out.grad_logits3d = std::move(ga);
    out.grad_logits3d_b = std::move(gb);
  } else {
    out.l3d = head_loss(fwd.logits3d, w3d, out.grad_logits3d, out.l3d_skipped);
  }

  const bool has_bev = fwd.logits_bev.has_value();
  if (has_bev) {
    if (labels_bev == nullptr) {
      throw ValidationError("model produced BEV logits but no BEV labels given");
    }
    if (labels_bev->width != fwd.bev_w || labels_bev->height != fwd.bev_h) {
      throw ValidationError("BEV label raster " +
                            std::to_string(labels_bev->width) + "x" +
                            std::to_string(labels_bev->height) +
                            " does not match logits " + std::to_string(fwd.bev_w) +
                            "x" + std::to_string(fwd.bev_h));
    }
    Mat probs = softmax_rows(*fwd.logits_bev);
    Mat gp;
    DiceResult dice = dice_loss(probs, labels_bev->labels, gp);
    out.lbev_skipped = dice.skipped;
    if (dice.skipped) {
      out.grad_logits_bev = Mat(fwd.logits_bev->rows, fwd.logits_bev->cols);
    } else {
      out.lbev = dice.loss;
      for (double& v : gp.d) v *= wbev;
      out.grad_logits_bev = softmax_backward(probs, gp);
    }
    out.ltot = w3d * (out.l3d_skipped ? 0.0 : out.l3d) +
               wbev * (out.lbev_skipped ? 0.0 : out.lbev);
  } else {
    // Single-branch model trains on the 3D loss at full weight.
    out.ltot = out.l3d_skipped ? 0.0 : out.l3d;
    if (!out.l3d_skipped) {
      const double rescale = (w3d != 0.0) ? 1.0 / w3d : 0.0;
      for (double& v : out.grad_logits3d.d) v *= rescale;
      if (out.grad_logits3d_b.has_value()) {
        for (double& v : out.grad_logits3d_b->d) v *= rescale;
      }
    }
  }
  return out;
}

}  // namespace lidog
