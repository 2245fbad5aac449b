#pragma once
// Cross-scale hierarchical decoder.
//
// BEV level i (coarse to fine) attends to camera features F_{2-i} (fine to
// coarse), so the cheapest query set meets the largest key set and vice
// versa. Each level's attention output A_i and its input B_i are each
// convolved and resized to the next level's size and summed to give
// B_{i+1}; the final map M comes from A_2 upsampled x2.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bevx/attention.hpp"
#include "bevx/camera.hpp"
#include "bevx/embedding.hpp"
#include "bevx/nn.hpp"
#include "bevx/objective.hpp"
#include "bevx/tensor.hpp"

namespace bevx {

inline constexpr std::size_t kLevels = 3;

struct ScaleLevel {
  std::size_t bev_size;        // square H_M^i = W_M^i
  std::size_t feature_stride;  // stride of the camera features consumed
  std::size_t channels;        // C_M^i
};

struct ScaleSchedule {
  std::vector<ScaleLevel> levels;
  std::size_t final_size = 0;

  void validate() const {
    if (levels.size() != kLevels) {
      throw std::invalid_argument("scale schedule: exactly 3 levels required, got " +
                                  std::to_string(levels.size()));
    }
    for (std::size_t i = 0; i < levels.size(); ++i) {
      if (levels[i].bev_size == 0 || levels[i].channels == 0) {
        throw std::invalid_argument("scale schedule: level " + std::to_string(i) + " is empty");
      }
      if (i > 0 && levels[i].bev_size <= levels[i - 1].bev_size) {
        throw std::invalid_argument("scale schedule: bev sizes must strictly increase");
      }
    }
    if (final_size != 2 * levels.back().bev_size) {
      throw std::invalid_argument("scale schedule: final size must be twice the last level");
    }
  }
};

/// Camera feature strides of F_0, F_1, F_2.
inline constexpr std::array<std::size_t, kLevels> kFeatureStrides = {16, 8, 4};

inline ScaleSchedule make_schedule(const std::vector<std::size_t>& bev_sizes,
                                   const std::vector<std::size_t>& channels) {
  if (bev_sizes.size() != kLevels || channels.size() != kLevels) {
    throw std::invalid_argument("make_schedule: need 3 bev sizes and 3 channel widths");
  }
  ScaleSchedule s;
  for (std::size_t i = 0; i < kLevels; ++i) {
    s.levels.push_back({bev_sizes[i], kFeatureStrides[kLevels - 1 - i], channels[i]});
  }
  s.final_size = 2 * bev_sizes.back();
  s.validate();
  return s;
}

struct ModelConfig {
  std::vector<std::size_t> bev_sizes = {4, 8, 16};
  std::vector<std::size_t> channels = {32, 32, 32};
  std::array<std::size_t, kLevels> encoder_channels = {16, 16, 16};  // F_0, F_1, F_2
  std::size_t encoder_stem = 8;
  std::size_t image_channels = 1;
  std::size_t width = 32;
  std::size_t heads = 4;
  double xi = kDefaultXi;
  AugMode mode = AugMode::AllViewsAllTokens;
  bool residual = true;
  std::size_t classes = 1;
  double extent = 16.0;  // half-width of the final map in meters
  std::uint64_t seed = 0;

  ScaleSchedule schedule() const { return make_schedule(bev_sizes, channels); }

  void validate() const {
    schedule();
    for (std::size_t i = 0; i < kLevels; ++i) {
      if (channels[i] != width) {
        throw std::invalid_argument("model config: channel width of level " + std::to_string(i) +
                                    " must equal the attention width D (" + std::to_string(width) + ")");
      }
      if (encoder_channels[i] == 0) throw std::invalid_argument("model config: encoder channel width is zero");
    }
    if (heads == 0 || width % heads != 0) {
      throw std::invalid_argument("model config: width must be divisible by heads");
    }
    if (!(xi >= 0.0)) throw std::invalid_argument("model config: xi must be >= 0");
    if (classes == 0 || image_channels == 0 || encoder_stem == 0) {
      throw std::invalid_argument("model config: zero-sized classes/image channels/stem");
    }
    if (!(extent > 0.0)) throw std::invalid_argument("model config: extent must be positive");
  }
};

struct ToyEncoder {
  Conv2d stem;  // stride 2
  Conv2d to_f2;  // stride 4 overall
  Conv2d to_f1;  // stride 8
  Conv2d to_f0;  // stride 16

  void collect(const std::string& prefix, ParamList& out) {
    stem.collect(prefix + ".stem", out);
    to_f2.collect(prefix + ".f2", out);
    to_f1.collect(prefix + ".f1", out);
    to_f0.collect(prefix + ".f0", out);
  }
};

struct LevelParams {
  ProjectionHeads heads;
  AttentionBlock attention;
  Conv2d residual_attn;  // A_i -> next level (levels 0, 1)
  Conv2d residual_bev;   // B_i -> next level (levels 0, 1)
};

struct ModelState {
  ModelConfig config;
  ScaleSchedule schedule;
  Tensor bev0;  // [1, C_0, H_0, W_0]
  ToyEncoder encoder;
  std::array<LevelParams, kLevels> levels;
  Conv2d segmentation;
  std::array<AuxHead, kLevels> aux;

  explicit ModelState(const ModelConfig& cfg) : config(cfg) {
    cfg.validate();
    schedule = cfg.schedule();
    Rng rng(cfg.seed);
    const auto& L = schedule.levels;
    bev0 = normal_param({1, L[0].channels, L[0].bev_size, L[0].bev_size}, 0.02, rng);
    const auto& ec = cfg.encoder_channels;
    encoder.stem = Conv2d(cfg.image_channels, cfg.encoder_stem, 3, 2, rng);
    encoder.to_f2 = Conv2d(cfg.encoder_stem, ec[2], 3, 2, rng);
    encoder.to_f1 = Conv2d(ec[2], ec[1], 3, 2, rng);
    encoder.to_f0 = Conv2d(ec[1], ec[0], 3, 2, rng);
    for (std::size_t i = 0; i < kLevels; ++i) {
      const std::size_t feat = ec[kLevels - 1 - i];
      levels[i].heads = ProjectionHeads(cfg.width, feat, cfg.extent, rng);
      levels[i].attention = AttentionBlock(cfg.width, cfg.heads, feat, L[i].channels, cfg.xi, cfg.mode, rng);
      if (i + 1 < kLevels) {
        levels[i].residual_attn = Conv2d(L[i].channels, L[i + 1].channels, 3, 1, rng);
        levels[i].residual_bev = Conv2d(L[i].channels, L[i + 1].channels, 3, 1, rng);
      }
    }
    segmentation = Conv2d(L.back().channels, cfg.classes, 3, 1, rng);
    for (std::size_t i = 0; i < kLevels; ++i) {
      aux[i] = AuxHead(L[i].channels, cfg.classes, schedule.final_size, schedule.final_size, rng);
    }
  }

  /// Every learned tensor under its stable dotted name. Training-only aux
  /// heads come last under "aux.".
  ParamList params() {
    ParamList out;
    out.push_back({"bev.b0", &bev0});
    encoder.collect("encoder", out);
    for (std::size_t i = 0; i < kLevels; ++i) {
      const std::string p = "level" + std::to_string(i);
      levels[i].heads.collect(p + ".embed", out);
      levels[i].attention.collect(p + ".attn", out);
      if (i + 1 < kLevels) {
        levels[i].residual_attn.collect(p + ".residual_attn", out);
        levels[i].residual_bev.collect(p + ".residual_bev", out);
      }
    }
    segmentation.collect("head.segmentation", out);
    for (std::size_t i = 0; i < kLevels; ++i) aux[i].collect("aux.level" + std::to_string(i), out);
    return out;
  }

  void set_augmentation(AugMode mode, double xi) {
    config.mode = mode;
    config.xi = xi;
    for (auto& l : levels) {
      l.attention.mode = mode;
      l.attention.xi = xi;
    }
  }
};

/// images: [N_I, C, H, W] -> {F_0, F_1, F_2}, each [N_I, C_j, H/s_j, W/s_j].
inline std::array<Tensor, kLevels> toy_encode(const Tensor& images, const ToyEncoder& enc) {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[2] % 16 != 0 || s[3] % 16 != 0 || s[2] == 0 || s[3] == 0) {
    throw ShapeError("toy_encode: images " + shape_str(s) + " must be [N,C,H,W] with H and W divisible by 16");
  }
  Tensor x = gelu(enc.stem(images));
  Tensor f2 = gelu(enc.to_f2(x));
  Tensor f1 = gelu(enc.to_f1(f2));
  Tensor f0 = gelu(enc.to_f0(f1));
  return {f0, f1, f2};
}

struct StepResult {
  Tensor attended;              // A_i, [1, C_i, h, w]
  std::optional<Tensor> next;   // B_{i+1} for i < 2
  Tensor raw_scores;            // A'_i
  Tensor weights;               // softmax(A''_i)
};

/// One level: bev [1, C, h, w], features [N_I, C_I, fh, fw].
inline StepResult decode_step(std::size_t level, const Tensor& bev, const Tensor& features, const CameraRig& rig,
                              const ModelState& model) {
  const auto& sched = model.schedule.levels;
  if (level >= kLevels) throw std::out_of_range("decode_step: level out of range");
  const ScaleLevel& L = sched[level];
  if (bev.shape() != Shape{1, L.channels, L.bev_size, L.bev_size}) {
    throw ShapeError("decode_step: level " + std::to_string(level) + " BEV " + shape_str(bev.shape()) +
                     " does not match schedule");
  }
  if (features.rank() != 4 || features.dim(0) != rig.size()) {
    throw ShapeError("decode_step: features " + shape_str(features.shape()) + " for " +
                     std::to_string(rig.size()) + " views");
  }
  const LevelParams& P = model.levels[level];
  const std::size_t c = L.channels, h = L.bev_size;
  const std::size_t nv = features.dim(0), ci = features.dim(1), fh = features.dim(2), fw = features.dim(3);

  Tensor bev_hwc = permute(reshape(bev, {c, h, h}), {1, 2, 0});
  const BevPositionGrid grid = bev_grid_for_extent(h, h, model.config.extent);
  Tensor queries = embed_bev_queries(bev_hwc, grid, rig, P.heads);
  Tensor feat_hwc = permute(features, {0, 2, 3, 1});
  Tensor keys = embed_camera_keys(feat_hwc, L.feature_stride, rig, P.heads);
  Tensor values = reshape(feat_hwc, {nv, fh * fw, ci});
  CrossAttentionResult ca = cross_attend(queries, keys, values, P.attention);

  StepResult out{reshape(permute(reshape(ca.tokens, {h, h, c}), {2, 0, 1}), {1, c, h, h}), std::nullopt, ca.raw,
                 ca.weights};
  if (level + 1 < kLevels) {
    const std::size_t nh = sched[level + 1].bev_size;
    Tensor next = resize_bilinear(P.residual_attn(out.attended), nh, nh);
    if (model.config.residual) next = add(next, resize_bilinear(P.residual_bev(bev), nh, nh));
    out.next = next;
  }
  return out;
}

struct ForwardResult {
  Tensor logits;                 // M, [C_M, H_M, W_M]
  std::vector<Tensor> bev;       // B_0..B_2, [1, C_i, h_i, w_i]
  std::vector<Tensor> attended;  // A_0..A_2
  std::vector<Tensor> raw_scores;
  std::vector<Tensor> weights;
};

inline ForwardResult forward(const Tensor& images, const CameraRig& rig, const ModelState& model) {
  if (images.rank() != 4 || images.dim(0) != rig.size()) {
    throw ShapeError("forward: " + shape_str(images.shape()) + " images for " + std::to_string(rig.size()) +
                     " rig views");
  }
  if (images.dim(2) != rig.height() || images.dim(3) != rig.width()) {
    throw ShapeError("forward: image size does not match rig calibration");
  }
  const auto feats = toy_encode(images, model.encoder);
  ForwardResult r;
  Tensor bev = model.bev0;
  for (std::size_t i = 0; i < kLevels; ++i) {
    r.bev.push_back(bev);
    StepResult step = decode_step(i, bev, feats[kLevels - 1 - i], rig, model);
    r.attended.push_back(step.attended);
    r.raw_scores.push_back(step.raw_scores);
    r.weights.push_back(step.weights);
    if (step.next) bev = *step.next;
  }
  const std::size_t fs = model.schedule.final_size;
  Tensor m = resize_bilinear(model.segmentation(r.attended.back()), fs, fs);
  r.logits = reshape(m, {model.config.classes, fs, fs});
  return r;
}

/// f(B_i) for each level, shaped like the final logits.
inline std::vector<Tensor> aux_logits(const ForwardResult& r, const ModelState& model) {
  std::vector<Tensor> out;
  const std::size_t fs = model.schedule.final_size;
  for (std::size_t i = 0; i < kLevels; ++i) {
    out.push_back(reshape(model.aux[i](r.bev[i]), {model.config.classes, fs, fs}));
  }
  return out;
}

/// Keeps the views flagged in `keep` (images [N_I, C, H, W]).
inline std::pair<Tensor, CameraRig> drop_views(const Tensor& images, const CameraRig& rig,
                                               const std::vector<bool>& keep) {
  if (keep.size() != rig.size() || images.rank() != 4 || images.dim(0) != rig.size()) {
    throw std::invalid_argument("drop_views: keep mask of " + std::to_string(keep.size()) + " for " +
                                std::to_string(rig.size()) + " views");
  }
  std::vector<Tensor> kept;
  CameraRig out;
  for (std::size_t n = 0; n < keep.size(); ++n) {
    if (!keep[n]) continue;
    kept.push_back(slice(images, 0, n, 1));
    out.views.push_back(rig.views[n]);
  }
  if (kept.empty()) throw std::invalid_argument("drop_views: at least one view must be kept");
  return {concat(kept, 0), out};
}

}  // namespace bevx
