#include "lidog/net.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "lidog/rng.hpp"

namespace lidog {

void ModelConfig::validate() const {
  if (input_channels < 1) throw ValidationError("input_channels must be >= 1");
  if (encoder_channels.empty()) {
    throw ValidationError("encoder needs at least one level");
  }
  for (int c : encoder_channels) {
    if (c < 1) throw ValidationError("encoder channel widths must be >= 1");
  }
  if (kernel_extent != 3) {
    throw ValidationError("kernel_extent 3 is the only supported extent");
  }
  if (num_classes < 1) throw ValidationError("num_classes must be >= 1");
  if (bev_hidden[0] < 1 || bev_hidden[1] < 1) {
    throw ValidationError("bev head widths must be >= 1");
  }
  if (occupancy_cap < 1) throw ValidationError("occupancy_cap must be >= 1");
  if (skip_style != "concat") {
    throw ValidationError("unsupported skip_style: " + skip_style);
  }
}

Tensor& ModelParams::at(const std::string& name) {
  auto it = t.find(name);
  if (it == t.end()) throw ValidationError("missing parameter: " + name);
  return it->second;
}

const Tensor& ModelParams::at(const std::string& name) const {
  auto it = t.find(name);
  if (it == t.end()) throw ValidationError("missing parameter: " + name);
  return it->second;
}

bool is_trainable(const std::string& name) {
  return !name.ends_with(".rmean") && !name.ends_with(".rvar");
}

namespace {

struct ConvSpec {
  std::string name;
  std::size_t taps, cin, cout;
};
struct BnSpec {
  std::string name;
  std::size_t ch;
};

struct LayerSet {
  std::vector<ConvSpec> convs;
  std::vector<BnSpec> bns;
};

LayerSet enumerate_layers(const ModelConfig& cfg) {
  LayerSet set;
  const auto& w = cfg.encoder_channels;
  const std::size_t cin = static_cast<std::size_t>(cfg.input_channels);
  const std::size_t k = static_cast<std::size_t>(cfg.num_classes);
  set.convs.push_back({"stem.conv", 27, cin, static_cast<std::size_t>(w[0])});
  set.bns.push_back({"stem.bn", static_cast<std::size_t>(w[0])});
  for (std::size_t l = 1; l < w.size(); ++l) {
    const std::string base = "enc" + std::to_string(l);
    set.convs.push_back({base + ".conv", 27, static_cast<std::size_t>(w[l - 1]),
                         static_cast<std::size_t>(w[l])});
    set.bns.push_back({base + ".bn", static_cast<std::size_t>(w[l])});
  }
  for (std::size_t l = w.size() - 1; l >= 1; --l) {
    const std::string base = "dec" + std::to_string(l);
    const auto co = static_cast<std::size_t>(w[l - 1]);
    set.convs.push_back({base + ".convt", 27, static_cast<std::size_t>(w[l]), co});
    set.bns.push_back({base + ".bn", co});
    set.convs.push_back({base + ".fuse", 27, 2 * co, co});
    set.bns.push_back({base + ".fuse_bn", co});
  }
  const auto c0 = static_cast<std::size_t>(w[0]);
  set.convs.push_back({"head3d.conv", 1, c0, k});
  if (cfg.double_head) set.convs.push_back({"head3d_b.conv", 1, c0, k});
  if (cfg.with_bev) {
    const auto h1 = static_cast<std::size_t>(cfg.bev_hidden[0]);
    const auto h2 = static_cast<std::size_t>(cfg.bev_hidden[1]);
    set.convs.push_back({"bev1.conv", 9, c0, h1});
    set.bns.push_back({"bev1.bn", h1});
    set.convs.push_back({"bev2.conv", 9, h1, h2});
    set.bns.push_back({"bev2.bn", h2});
    set.convs.push_back({"bev3.conv", 9, h2, k});
  }
  return set;
}

void check_finite(const Mat& m, const char* layer) {
  for (double v : m.d) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite activation in layer ") + layer);
    }
  }
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams params;
  const LayerSet set = enumerate_layers(cfg);
  for (const ConvSpec& c : set.convs) {
    // Per-layer derived stream: shared layers initialize identically across
    // model variants under the same seed.
    Rng rng(derive_seed(seed, c.name));
    Tensor w({c.taps, c.cin, c.cout});
    const double limit = std::sqrt(6.0 / static_cast<double>(c.taps * c.cin));
    for (double& v : w.d) v = rng.uniform(-limit, limit);
    params.t.emplace(c.name + ".w", std::move(w));
    params.t.emplace(c.name + ".b", Tensor({c.cout}, 0.0));
  }
  for (const BnSpec& b : set.bns) {
    params.t.emplace(b.name + ".gamma", Tensor({b.ch}, 1.0));
    params.t.emplace(b.name + ".beta", Tensor({b.ch}, 0.0));
    params.t.emplace(b.name + ".rmean", Tensor({b.ch}, 0.0));
    params.t.emplace(b.name + ".rvar", Tensor({b.ch}, 1.0));
  }
  return params;
}

ModelParams zeros_like(const ModelParams& params) {
  ModelParams out;
  for (const auto& [name, tensor] : params.t) {
    out.t.emplace(name, Tensor(tensor.shape, 0.0));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Plan construction

namespace {

inline std::array<int, 3> offset_of(int o) {
  return {o / 9 - 1, (o / 3) % 3 - 1, o % 3 - 1};
}

LevelGeom downsample_geom(const LevelGeom& fine) {
  LevelGeom coarse;
  coarse.cells.reserve(fine.cells.size() / 2 + 1);
  for (const auto& c : fine.cells) {
    coarse.cells.push_back({static_cast<std::int32_t>(c[0] >> 1),
                            static_cast<std::int32_t>(c[1] >> 1),
                            static_cast<std::int32_t>(c[2] >> 1)});
  }
  std::sort(coarse.cells.begin(), coarse.cells.end());
  coarse.cells.erase(std::unique(coarse.cells.begin(), coarse.cells.end()),
                     coarse.cells.end());
  coarse.index.reserve(coarse.cells.size() * 2);
  for (std::size_t r = 0; r < coarse.cells.size(); ++r) {
    coarse.index.emplace(
        pack_voxel_key(coarse.cells[r][0], coarse.cells[r][1], coarse.cells[r][2]),
        static_cast<std::int32_t>(r));
  }
  return coarse;
}

KernelMap same_level_map(const LevelGeom& g) {
  KernelMap km;
  km.out_rows = g.cells.size();
  for (std::size_t r = 0; r < g.cells.size(); ++r) {
    const auto& c = g.cells[r];
    for (int o = 0; o < 27; ++o) {
      const auto d = offset_of(o);
      auto it = g.index.find(pack_voxel_key(c[0] + d[0], c[1] + d[1], c[2] + d[2]));
      if (it == g.index.end()) continue;
      km.off[o].emplace_back(static_cast<std::int32_t>(r), it->second);
    }
  }
  return km;
}

// Stride-2 downsample: output cell o gathers input cells at 2*o + d.
KernelMap down_map(const LevelGeom& fine, const LevelGeom& coarse) {
  KernelMap km;
  km.out_rows = coarse.cells.size();
  for (std::size_t r = 0; r < coarse.cells.size(); ++r) {
    const auto& c = coarse.cells[r];
    for (int o = 0; o < 27; ++o) {
      const auto d = offset_of(o);
      auto it = fine.index.find(
          pack_voxel_key(2 * c[0] + d[0], 2 * c[1] + d[1], 2 * c[2] + d[2]));
      if (it == fine.index.end()) continue;
      km.off[o].emplace_back(static_cast<std::int32_t>(r), it->second);
    }
  }
  return km;
}

// Stride-2 transpose: fine cell t receives from coarse (t - d) / 2 where the
// division is exact, i.e. the adjoint structure of down_map.
KernelMap up_map(const LevelGeom& coarse, const LevelGeom& fine) {
  KernelMap km;
  km.out_rows = fine.cells.size();
  for (std::size_t r = 0; r < fine.cells.size(); ++r) {
    const auto& t = fine.cells[r];
    for (int o = 0; o < 27; ++o) {
      const auto d = offset_of(o);
      const int ni = t[0] - d[0], nj = t[1] - d[1], nk = t[2] - d[2];
      if ((ni & 1) || (nj & 1) || (nk & 1)) continue;
      auto it = coarse.index.find(pack_voxel_key(ni >> 1, nj >> 1, nk >> 1));
      if (it == coarse.index.end()) continue;
      km.off[o].emplace_back(static_cast<std::int32_t>(r), it->second);
    }
  }
  return km;
}

}  // namespace

std::shared_ptr<const GridPlan> build_plan(const VoxelGrid& grid,
                                           const ModelConfig& cfg,
                                           const BevProjectionConfig* bev_cfg) {
  cfg.validate();
  auto plan = std::make_shared<GridPlan>();
  const int L = static_cast<int>(cfg.encoder_channels.size());
  plan->levels = L;
  plan->geom.resize(L);
  plan->geom[0].cells = grid.keys;
  plan->geom[0].index.reserve(grid.size() * 2);
  for (std::size_t r = 0; r < grid.size(); ++r) {
    plan->geom[0].index.emplace(
        pack_voxel_key(grid.keys[r][0], grid.keys[r][1], grid.keys[r][2]),
        static_cast<std::int32_t>(r));
  }
  for (int l = 1; l < L; ++l) {
    plan->geom[l] = downsample_geom(plan->geom[l - 1]);
  }
  const int n_subm = (L >= 2) ? L - 1 : 1;
  plan->subm.reserve(n_subm);
  for (int l = 0; l < n_subm; ++l) {
    plan->subm.push_back(same_level_map(plan->geom[l]));
  }
  for (int l = 0; l + 1 < L; ++l) {
    plan->down.push_back(down_map(plan->geom[l], plan->geom[l + 1]));
    plan->up.push_back(up_map(plan->geom[l + 1], plan->geom[l]));
  }
  if (bev_cfg != nullptr && cfg.with_bev) {
    bev_cfg->validate();
    plan->winner = collision_winners(grid, *bev_cfg);
    plan->bev_w = bev_cfg->width;
    plan->bev_h = bev_cfg->height;
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Layer kernels

namespace {

Mat conv_forward(const KernelMap& km, const Mat& in, const Tensor& w,
                 const Tensor& b) {
  const std::size_t taps = w.shape[0], cin = w.shape[1], cout = w.shape[2];
  if (in.cols != cin) {
    throw ValidationError("conv input channels " + std::to_string(in.cols) +
                          " do not match weight cin " + std::to_string(cin));
  }
  Mat out(km.out_rows, cout);
  for (std::size_t r = 0; r < out.rows; ++r) {
    double* y = out.row(r);
    for (std::size_t co = 0; co < cout; ++co) y[co] = b.d[co];
  }
  for (std::size_t o = 0; o < taps; ++o) {
    const double* wo = w.d.data() + o * cin * cout;
    for (const auto& [dst, src] : km.off[o]) {
      const double* x = in.row(static_cast<std::size_t>(src));
      double* y = out.row(static_cast<std::size_t>(dst));
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double xi = x[ci];
        if (xi == 0.0) continue;
        const double* wr = wo + ci * cout;
        for (std::size_t co = 0; co < cout; ++co) y[co] += xi * wr[co];
      }
    }
  }
  return out;
}

void conv_backward(const KernelMap& km, const Mat& in, const Tensor& w,
                   const Mat& gout, Mat& gin, Tensor& gw, Tensor& gb) {
  const std::size_t taps = w.shape[0], cin = w.shape[1], cout = w.shape[2];
  gin = Mat(in.rows, cin);
  for (std::size_t r = 0; r < gout.rows; ++r) {
    const double* gy = gout.row(r);
    for (std::size_t co = 0; co < cout; ++co) gb.d[co] += gy[co];
  }
  for (std::size_t o = 0; o < taps; ++o) {
    const double* wo = w.d.data() + o * cin * cout;
    double* gwo = gw.d.data() + o * cin * cout;
    for (const auto& [dst, src] : km.off[o]) {
      const double* x = in.row(static_cast<std::size_t>(src));
      const double* gy = gout.row(static_cast<std::size_t>(dst));
      double* gx = gin.row(static_cast<std::size_t>(src));
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double xi = x[ci];
        const double* wr = wo + ci * cout;
        double* gwr = gwo + ci * cout;
        double acc = 0.0;
        for (std::size_t co = 0; co < cout; ++co) {
          acc += wr[co] * gy[co];
          gwr[co] += xi * gy[co];
        }
        gx[ci] += acc;
      }
    }
  }
}

// 1x1 head over rows.
Mat conv1x1_forward(const Mat& in, const Tensor& w, const Tensor& b) {
  const std::size_t cin = w.shape[1], cout = w.shape[2];
  Mat out(in.rows, cout);
  for (std::size_t r = 0; r < in.rows; ++r) {
    const double* x = in.row(r);
    double* y = out.row(r);
    for (std::size_t co = 0; co < cout; ++co) y[co] = b.d[co];
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double xi = x[ci];
      const double* wr = w.d.data() + ci * cout;
      for (std::size_t co = 0; co < cout; ++co) y[co] += xi * wr[co];
    }
  }
  return out;
}

void conv1x1_backward(const Mat& in, const Tensor& w, const Mat& gout, Mat& gin,
                      Tensor& gw, Tensor& gb) {
  const std::size_t cin = w.shape[1], cout = w.shape[2];
  gin = Mat(in.rows, cin);
  for (std::size_t r = 0; r < in.rows; ++r) {
    const double* x = in.row(r);
    const double* gy = gout.row(r);
    double* gx = gin.row(r);
    for (std::size_t co = 0; co < cout; ++co) gb.d[co] += gy[co];
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* wr = w.d.data() + ci * cout;
      double* gwr = gw.d.data() + ci * cout;
      double acc = 0.0;
      for (std::size_t co = 0; co < cout; ++co) {
        acc += wr[co] * gy[co];
        gwr[co] += x[ci] * gy[co];
      }
      gx[ci] = acc;
    }
  }
}

// Dense 3x3 convolution, padding 1, on a v-major raster.
Mat conv2d_forward(const Mat& in, int w, int h, const Tensor& wt,
                   const Tensor& b) {
  const std::size_t cin = wt.shape[1], cout = wt.shape[2];
  Mat out(in.rows, cout);
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      double* y = out.row(static_cast<std::size_t>(v) * w + u);
      for (std::size_t co = 0; co < cout; ++co) y[co] = b.d[co];
      for (int o = 0; o < 9; ++o) {
        const int vv = v + o / 3 - 1;
        const int uu = u + o % 3 - 1;
        if (vv < 0 || vv >= h || uu < 0 || uu >= w) continue;
        const double* x = in.row(static_cast<std::size_t>(vv) * w + uu);
        const double* wo = wt.d.data() + static_cast<std::size_t>(o) * cin * cout;
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const double xi = x[ci];
          if (xi == 0.0) continue;
          const double* wr = wo + ci * cout;
          for (std::size_t co = 0; co < cout; ++co) y[co] += xi * wr[co];
        }
      }
    }
  }
  return out;
}

void conv2d_backward(const Mat& in, int w, int h, const Tensor& wt,
                     const Mat& gout, Mat& gin, Tensor& gw, Tensor& gb) {
  const std::size_t cin = wt.shape[1], cout = wt.shape[2];
  gin = Mat(in.rows, cin);
  for (std::size_t r = 0; r < gout.rows; ++r) {
    const double* gy = gout.row(r);
    for (std::size_t co = 0; co < cout; ++co) gb.d[co] += gy[co];
  }
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const double* gy = gout.row(static_cast<std::size_t>(v) * w + u);
      for (int o = 0; o < 9; ++o) {
        const int vv = v + o / 3 - 1;
        const int uu = u + o % 3 - 1;
        if (vv < 0 || vv >= h || uu < 0 || uu >= w) continue;
        const std::size_t src = static_cast<std::size_t>(vv) * w + uu;
        const double* x = in.row(src);
        double* gx = gin.row(src);
        const double* wo = wt.d.data() + static_cast<std::size_t>(o) * cin * cout;
        double* gwo = gw.d.data() + static_cast<std::size_t>(o) * cin * cout;
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const double xi = x[ci];
          const double* wr = wo + ci * cout;
          double* gwr = gwo + ci * cout;
          double acc = 0.0;
          for (std::size_t co = 0; co < cout; ++co) {
            acc += wr[co] * gy[co];
            gwr[co] += xi * gy[co];
          }
          gx[ci] += acc;
        }
      }
    }
  }
}

Mat bn_forward(const Mat& in, const Tensor& gamma, const Tensor& beta,
               Mode mode, const Tensor& rmean, const Tensor& rvar, double eps,
               BnCache& cache) {
  const std::size_t n = in.rows, ch = in.cols;
  Mat out(n, ch);
  cache.n = n;
  if (n == 0) return out;
  if (mode == Mode::train) {
    cache.mean.assign(ch, 0.0);
    cache.var.assign(ch, 0.0);
    cache.invstd.assign(ch, 0.0);
    cache.xhat = Mat(n, ch);
    for (std::size_t j = 0; j < ch; ++j) {
      double sum = 0.0;
      for (std::size_t i = 0; i < n; ++i) sum += in.at(i, j);
      cache.mean[j] = sum / static_cast<double>(n);
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = in.at(i, j) - cache.mean[j];
        acc += d * d;
      }
      cache.var[j] = acc / static_cast<double>(n);
      cache.invstd[j] = 1.0 / std::sqrt(cache.var[j] + eps);
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < ch; ++j) {
        const double xh = (in.at(i, j) - cache.mean[j]) * cache.invstd[j];
        cache.xhat.at(i, j) = xh;
        out.at(i, j) = gamma.d[j] * xh + beta.d[j];
      }
    }
    return out;
  }
  for (std::size_t j = 0; j < ch; ++j) {
    const double inv = 1.0 / std::sqrt(rvar.d[j] + eps);
    for (std::size_t i = 0; i < n; ++i) {
      out.at(i, j) = gamma.d[j] * (in.at(i, j) - rmean.d[j]) * inv + beta.d[j];
    }
  }
  return out;
}

void bn_backward(const BnCache& cache, const Tensor& gamma, const Mat& gout,
                 Mat& gin, Tensor& ggamma, Tensor& gbeta) {
  const std::size_t n = cache.n, ch = gamma.size();
  gin = Mat(gout.rows, gout.cols);
  if (n == 0) return;
  for (std::size_t j = 0; j < ch; ++j) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double dy = gout.at(i, j);
      sum_dy += dy;
      sum_dy_xhat += dy * cache.xhat.at(i, j);
    }
    ggamma.d[j] += sum_dy_xhat;
    gbeta.d[j] += sum_dy;
    const double scale = gamma.d[j] * cache.invstd[j] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double dy = gout.at(i, j);
      gin.at(i, j) = scale * (static_cast<double>(n) * dy - sum_dy -
                              cache.xhat.at(i, j) * sum_dy_xhat);
    }
  }
}

Mat relu_forward(const Mat& in) {
  Mat out = in;
  for (double& v : out.d) v = v > 0.0 ? v : 0.0;
  return out;
}

Mat relu_backward(const Mat& pre, const Mat& gout) {
  Mat gin(gout.rows, gout.cols);
  for (std::size_t i = 0; i < gout.d.size(); ++i) {
    gin.d[i] = pre.d[i] > 0.0 ? gout.d[i] : 0.0;
  }
  return gin;
}

}  // namespace

// ---------------------------------------------------------------------------

namespace {

// Runs bn + stat recording; keeps forward() readable.
Mat run_bn(const ModelParams& params, const std::string& name, const Mat& in,
           Mode mode, double eps, Tape& tape, std::vector<BnCache>& caches) {
  BnCache cache;
  Mat out = bn_forward(in, params.at(name + ".gamma"), params.at(name + ".beta"),
                       mode, params.at(name + ".rmean"), params.at(name + ".rvar"),
                       eps, cache);
  if (mode == Mode::train && cache.n > 0) {
    tape.bn_stats.emplace_back(name, cache.mean, cache.var);
  }
  caches.push_back(std::move(cache));
  check_finite(out, name.c_str());
  return out;
}

}  // namespace

Forward forward(const ModelParams& params, const ModelConfig& cfg,
                std::shared_ptr<const GridPlan> plan, const Mat& feats,
                Mode mode) {
  cfg.validate();
  if (feats.cols != static_cast<std::size_t>(cfg.input_channels)) {
    throw ValidationError("input feature channels " + std::to_string(feats.cols) +
                          " do not match config " +
                          std::to_string(cfg.input_channels));
  }
  if (feats.rows != plan->geom[0].cells.size()) {
    throw ValidationError("input feature rows do not match the plan cell count");
  }
  const int L = plan->levels;

  Forward fwd;
  Tape& tape = fwd.tape;
  tape.mode = mode;
  tape.plan = plan;
  tape.in_feats = feats;

  Mat x = feats;
  for (int l = 0; l < L; ++l) {
    const std::string base = (l == 0) ? "stem" : "enc" + std::to_string(l);
    const KernelMap& km = (l == 0) ? plan->subm[0] : plan->down[l - 1];
    tape.enc_conv_in.push_back(x);
    Mat y = conv_forward(km, x, params.at(base + ".conv.w"),
                         params.at(base + ".conv.b"));
    check_finite(y, (base + ".conv").c_str());
    y = run_bn(params, base + ".bn", y, mode, cfg.bn_eps, tape, tape.enc_bn);
    tape.enc_relu_in.push_back(y);
    x = relu_forward(y);
    tape.enc_out.push_back(x);
  }

  for (int l = L - 1; l >= 1; --l) {
    const std::string base = "dec" + std::to_string(l);
    tape.up_conv_in.push_back(x);
    Mat y = conv_forward(plan->up[l - 1], x, params.at(base + ".convt.w"),
                         params.at(base + ".convt.b"));
    check_finite(y, (base + ".convt").c_str());
    y = run_bn(params, base + ".bn", y, mode, cfg.bn_eps, tape, tape.up_bn);
    tape.up_relu_in.push_back(y);
    Mat u = relu_forward(y);

    const Mat& skip = tape.enc_out[static_cast<std::size_t>(l - 1)];
    Mat cat(u.rows, u.cols + skip.cols);
    for (std::size_t r = 0; r < u.rows; ++r) {
      std::memcpy(cat.row(r), u.row(r), u.cols * sizeof(double));
      std::memcpy(cat.row(r) + u.cols, skip.row(r), skip.cols * sizeof(double));
    }
    tape.fuse_in.push_back(cat);
    Mat f = conv_forward(plan->subm[l - 1], cat, params.at(base + ".fuse.w"),
                         params.at(base + ".fuse.b"));
    check_finite(f, (base + ".fuse").c_str());
    f = run_bn(params, base + ".fuse_bn", f, mode, cfg.bn_eps, tape, tape.fuse_bn);
    tape.fuse_relu_in.push_back(f);
    x = relu_forward(f);
  }
  tape.f3d = x;

  fwd.logits3d = conv1x1_forward(x, params.at("head3d.conv.w"),
                                 params.at("head3d.conv.b"));
  check_finite(fwd.logits3d, "head3d.conv");
  if (cfg.double_head) {
    fwd.logits3d_b = conv1x1_forward(x, params.at("head3d_b.conv.w"),
                                     params.at("head3d_b.conv.b"));
    check_finite(*fwd.logits3d_b, "head3d_b.conv");
  }

  if (cfg.with_bev && plan->bev_w > 0) {
    tape.has_bev = true;
    const std::size_t n_px =
        static_cast<std::size_t>(plan->bev_w) * plan->bev_h;
    Mat dense(n_px, x.cols);
    for (std::size_t p = 0; p < n_px; ++p) {
      const std::int32_t r = plan->winner[p];
      if (r < 0) continue;
      std::memcpy(dense.row(p), x.row(static_cast<std::size_t>(r)),
                  x.cols * sizeof(double));
    }
    tape.dense = dense;

    DenseFeatureMap dm;
    dm.width = plan->bev_w;
    dm.height = plan->bev_h;
    dm.channels = static_cast<int>(x.cols);
    dm.values = std::move(dense);
    dm.occupied.assign(n_px, 0);
    for (std::size_t p = 0; p < n_px; ++p) {
      if (plan->winner[p] >= 0) dm.occupied[p] = 1;
    }
    DenseFeatureMap pooled = pool_features(dm, PoolSpec{}, tape.pool_argmax);
    tape.pooled_w = pooled.width;
    tape.pooled_h = pooled.height;
    fwd.bev_w = pooled.width;
    fwd.bev_h = pooled.height;

    Mat b = std::move(pooled.values);
    for (int i = 1; i <= 3; ++i) {
      const std::string base = "bev" + std::to_string(i);
      tape.bev_conv_in.push_back(b);
      Mat y = conv2d_forward(b, tape.pooled_w, tape.pooled_h,
                             params.at(base + ".conv.w"),
                             params.at(base + ".conv.b"));
      check_finite(y, (base + ".conv").c_str());
      if (i < 3) {
        y = run_bn(params, base + ".bn", y, mode, cfg.bn_eps, tape, tape.bev_bn);
        tape.bev_relu_in.push_back(y);
        b = relu_forward(y);
      } else {
        fwd.logits_bev = std::move(y);
      }
    }
  }
  return fwd;
}

Forward forward(const ModelParams& params, const ModelConfig& cfg,
                const VoxelGrid& grid, const BevProjectionConfig& bev_cfg,
                Mode mode) {
  auto plan = build_plan(grid, cfg, &bev_cfg);
  return forward(params, cfg, plan, input_features(grid, cfg.occupancy_cap),
                 mode);
}

ModelParams backward(const ModelParams& params, const ModelConfig& cfg,
                     Tape& tape, const Mat* grad_logits3d,
                     const Mat* grad_logits3d_b, const Mat* grad_logits_bev) {
  if (tape.used) throw UsageError("tape already consumed by backward");
  tape.used = true;
  const GridPlan& plan = *tape.plan;
  const int L = plan.levels;

  ModelParams grads = zeros_like(params);
  Mat gf3d(tape.f3d.rows, tape.f3d.cols);

  if (grad_logits3d != nullptr) {
    Mat gin;
    conv1x1_backward(tape.f3d, params.at("head3d.conv.w"), *grad_logits3d, gin,
                     grads.at("head3d.conv.w"), grads.at("head3d.conv.b"));
    for (std::size_t i = 0; i < gf3d.d.size(); ++i) gf3d.d[i] += gin.d[i];
  }
  if (cfg.double_head && grad_logits3d_b != nullptr) {
    Mat gin;
    conv1x1_backward(tape.f3d, params.at("head3d_b.conv.w"), *grad_logits3d_b,
                     gin, grads.at("head3d_b.conv.w"),
                     grads.at("head3d_b.conv.b"));
    for (std::size_t i = 0; i < gf3d.d.size(); ++i) gf3d.d[i] += gin.d[i];
  }

  if (tape.has_bev && grad_logits_bev != nullptr) {
    Mat g = *grad_logits_bev;
    for (int i = 3; i >= 1; --i) {
      const std::string base = "bev" + std::to_string(i);
      if (i < 3) {
        g = relu_backward(tape.bev_relu_in[static_cast<std::size_t>(i - 1)], g);
        Mat gb;
        bn_backward(tape.bev_bn[static_cast<std::size_t>(i - 1)],
                    params.at(base + ".bn.gamma"), g, gb,
                    grads.at(base + ".bn.gamma"), grads.at(base + ".bn.beta"));
        g = std::move(gb);
      }
      Mat gin;
      conv2d_backward(tape.bev_conv_in[static_cast<std::size_t>(i - 1)],
                      tape.pooled_w, tape.pooled_h, params.at(base + ".conv.w"),
                      g, gin, grads.at(base + ".conv.w"),
                      grads.at(base + ".conv.b"));
      g = std::move(gin);
    }
    // Max-pool routes each output's gradient to its argmax input pixel.
    Mat gdense(tape.dense.rows, tape.dense.cols);
    const std::size_t ch = tape.dense.cols;
    for (std::size_t op = 0; op < g.rows; ++op) {
      for (std::size_t c = 0; c < ch; ++c) {
        const std::int32_t ip = tape.pool_argmax[op * ch + c];
        if (ip >= 0) gdense.at(static_cast<std::size_t>(ip), c) += g.at(op, c);
      }
    }
    // Projection sends each pixel's gradient to its single winning voxel.
    for (std::size_t p = 0; p < gdense.rows; ++p) {
      const std::int32_t r = plan.winner[p];
      if (r < 0) continue;
      double* dst = gf3d.row(static_cast<std::size_t>(r));
      const double* src = gdense.row(p);
      for (std::size_t c = 0; c < ch; ++c) dst[c] += src[c];
    }
  }

  std::vector<Mat> genc(static_cast<std::size_t>(L));
  for (int l = 0; l < L; ++l) {
    genc[static_cast<std::size_t>(l)] =
        Mat(tape.enc_out[static_cast<std::size_t>(l)].rows,
            tape.enc_out[static_cast<std::size_t>(l)].cols);
  }

  Mat g_cur = std::move(gf3d);
  const int n_stages = L - 1;
  for (int s = n_stages - 1; s >= 0; --s) {
    const int l = L - 1 - s;
    const std::string base = "dec" + std::to_string(l);
    const std::size_t si = static_cast<std::size_t>(s);

    Mat g = relu_backward(tape.fuse_relu_in[si], g_cur);
    {
      Mat gb;
      bn_backward(tape.fuse_bn[si], params.at(base + ".fuse_bn.gamma"), g, gb,
                  grads.at(base + ".fuse_bn.gamma"),
                  grads.at(base + ".fuse_bn.beta"));
      g = std::move(gb);
    }
    Mat gcat;
    conv_backward(plan.subm[static_cast<std::size_t>(l - 1)], tape.fuse_in[si],
                  params.at(base + ".fuse.w"), g, gcat,
                  grads.at(base + ".fuse.w"), grads.at(base + ".fuse.b"));

    const std::size_t cup = tape.up_relu_in[si].cols;
    const std::size_t cskip = gcat.cols - cup;
    Mat gu(gcat.rows, cup);
    Mat& gskip = genc[static_cast<std::size_t>(l - 1)];
    for (std::size_t r = 0; r < gcat.rows; ++r) {
      std::memcpy(gu.row(r), gcat.row(r), cup * sizeof(double));
      double* dst = gskip.row(r);
      const double* src = gcat.row(r) + cup;
      for (std::size_t c = 0; c < cskip; ++c) dst[c] += src[c];
    }

    Mat g2 = relu_backward(tape.up_relu_in[si], gu);
    {
      Mat gb;
      bn_backward(tape.up_bn[si], params.at(base + ".bn.gamma"), g2, gb,
                  grads.at(base + ".bn.gamma"), grads.at(base + ".bn.beta"));
      g2 = std::move(gb);
    }
    Mat gin;
    conv_backward(plan.up[static_cast<std::size_t>(l - 1)], tape.up_conv_in[si],
                  params.at(base + ".convt.w"), g2, gin,
                  grads.at(base + ".convt.w"), grads.at(base + ".convt.b"));
    g_cur = std::move(gin);
  }
  {
    Mat& dst = genc[static_cast<std::size_t>(L - 1)];
    for (std::size_t i = 0; i < dst.d.size(); ++i) dst.d[i] += g_cur.d[i];
  }

  for (int l = L - 1; l >= 0; --l) {
    const std::string base = (l == 0) ? "stem" : "enc" + std::to_string(l);
    const KernelMap& km = (l == 0) ? plan.subm[0] : plan.down[l - 1];
    const std::size_t li = static_cast<std::size_t>(l);
    Mat g = relu_backward(tape.enc_relu_in[li], genc[li]);
    {
      Mat gb;
      bn_backward(tape.enc_bn[li], params.at(base + ".bn.gamma"), g, gb,
                  grads.at(base + ".bn.gamma"), grads.at(base + ".bn.beta"));
      g = std::move(gb);
    }
    Mat gin;
    conv_backward(km, tape.enc_conv_in[li], params.at(base + ".conv.w"), g, gin,
                  grads.at(base + ".conv.w"), grads.at(base + ".conv.b"));
    if (l > 0) {
      Mat& dst = genc[li - 1];
      for (std::size_t i = 0; i < dst.d.size(); ++i) dst.d[i] += gin.d[i];
    }
  }
  return grads;
}

void apply_bn_updates(ModelParams& params, const Tape& tape, double momentum) {
  for (const auto& [name, mean, var] : tape.bn_stats) {
    Tensor& rmean = params.at(name + ".rmean");
    Tensor& rvar = params.at(name + ".rvar");
    for (std::size_t j = 0; j < rmean.size(); ++j) {
      rmean.d[j] = (1.0 - momentum) * rmean.d[j] + momentum * mean[j];
      rvar.d[j] = (1.0 - momentum) * rvar.d[j] + momentum * var[j];
    }
  }
}

std::vector<ClassId> predict(const ModelParams& params, const ModelConfig& cfg,
                             const VoxelGrid& grid) {
  ModelConfig inference_cfg = cfg;
  inference_cfg.with_bev = false;  // the auxiliary head plays no role here
  auto plan = build_plan(grid, inference_cfg, nullptr);
  Forward fwd = forward(params, inference_cfg, plan,
                        input_features(grid, cfg.occupancy_cap), Mode::eval);

  const std::size_t k = static_cast<std::size_t>(cfg.num_classes);
  std::vector<ClassId> out(grid.size(), kIgnore);
  Mat scores = fwd.logits3d;
  if (cfg.double_head) {
    // Average the two heads' softmax outputs.
    Mat pa(scores.rows, scores.cols);
    auto softmax_into = [&](const Mat& logits, Mat& probs) {
      for (std::size_t r = 0; r < logits.rows; ++r) {
        double mx = logits.at(r, 0);
        for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, logits.at(r, c));
        double sum = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
          const double e = std::exp(logits.at(r, c) - mx);
          probs.at(r, c) = e;
          sum += e;
        }
        for (std::size_t c = 0; c < k; ++c) probs.at(r, c) /= sum;
      }
    };
    softmax_into(fwd.logits3d, pa);
    Mat pb(scores.rows, scores.cols);
    softmax_into(*fwd.logits3d_b, pb);
    for (std::size_t i = 0; i < pa.d.size(); ++i) {
      pa.d[i] = 0.5 * (pa.d[i] + pb.d[i]);
    }
    scores = std::move(pa);
  }
  for (std::size_t r = 0; r < scores.rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (scores.at(r, c) > scores.at(r, best)) best = c;  // ties break low
    }
    out[r] = static_cast<ClassId>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCkptMagic[8] = {'L', 'D', 'G', 'C', 'K', 'P', 'T', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
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

}  // namespace

std::string model_config_to_json(const ModelConfig& cfg) {
  nlohmann::ordered_json j;
  j["input_channels"] = cfg.input_channels;
  j["encoder_channels"] = cfg.encoder_channels;
  j["kernel_extent"] = cfg.kernel_extent;
  j["bev_hidden"] = cfg.bev_hidden;
  j["num_classes"] = cfg.num_classes;
  j["with_bev"] = cfg.with_bev;
  j["double_head"] = cfg.double_head;
  j["occupancy_cap"] = cfg.occupancy_cap;
  j["bn_momentum"] = cfg.bn_momentum;
  j["bn_eps"] = cfg.bn_eps;
  j["skip_style"] = cfg.skip_style;
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  ModelConfig cfg;
  cfg.input_channels = j.at("input_channels").get<int>();
  cfg.encoder_channels = j.at("encoder_channels").get<std::vector<int>>();
  cfg.kernel_extent = j.at("kernel_extent").get<int>();
  cfg.bev_hidden = j.at("bev_hidden").get<std::array<int, 2>>();
  cfg.num_classes = j.at("num_classes").get<int>();
  cfg.with_bev = j.at("with_bev").get<bool>();
  cfg.double_head = j.at("double_head").get<bool>();
  cfg.occupancy_cap = j.at("occupancy_cap").get<int>();
  cfg.bn_momentum = j.at("bn_momentum").get<double>();
  cfg.bn_eps = j.at("bn_eps").get<double>();
  cfg.skip_style = j.at("skip_style").get<std::string>();
  cfg.validate();
  return cfg;
}

std::string checkpoint_bytes(const ModelParams& params, const ModelConfig& cfg) {
  std::string out;
  out.append(kCkptMagic, sizeof(kCkptMagic));
  const std::string cfg_json = model_config_to_json(cfg);
  put_u32(out, static_cast<std::uint32_t>(cfg_json.size()));
  out += cfg_json;
  put_u32(out, static_cast<std::uint32_t>(params.t.size()));
  for (const auto& [name, tensor] : params.t) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(tensor.shape.size()));
    for (std::size_t dim : tensor.shape) put_u64(out, dim);
    for (double v : tensor.d) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      put_u64(out, bits);
    }
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const ModelConfig& cfg) {
  const std::string bytes = checkpoint_bytes(params, cfg);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open file for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::pair<ModelParams, ModelConfig> load_checkpoint(
    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t size = bytes.size();
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > size) throw FormatError("truncated checkpoint");
    pos += n;
    return p + pos - n;
  };
  if (std::memcmp(need(8), kCkptMagic, 8) != 0) {
    throw FormatError("missing LDGCKPT1 magic");
  }
  const std::uint32_t cfg_len = get_u32(need(4));
  const std::string cfg_json(reinterpret_cast<const char*>(need(cfg_len)), cfg_len);
  ModelConfig cfg = model_config_from_json(cfg_json);
  const std::uint32_t n_entries = get_u32(need(4));
  ModelParams params;
  for (std::uint32_t e = 0; e < n_entries; ++e) {
    const std::uint32_t name_len = get_u32(need(4));
    std::string name(reinterpret_cast<const char*>(need(name_len)), name_len);
    const int ndim = *need(1);
    std::vector<std::size_t> shape;
    std::size_t count = 1;
    for (int d = 0; d < ndim; ++d) {
      shape.push_back(static_cast<std::size_t>(get_u64(need(8))));
      count *= shape.back();
    }
    Tensor tensor(shape);
    for (std::size_t i = 0; i < count; ++i) {
      const std::uint64_t bits = get_u64(need(8));
      std::memcpy(&tensor.d[i], &bits, 8);
    }
    params.t.emplace(std::move(name), std::move(tensor));
  }
  return {std::move(params), std::move(cfg)};
}

}  // namespace lidog
