#pragma once
// Dataset generation, checkpoints, training, evaluation and attention
// analysis on top of the model. The CLI is a thin layer over this file.
//
// Dataset directory:
//   manifest.csv        index,sample,scene,objects,positive_cells
//   rig.txt             camera rig shared by all samples
//   sample_NNNN.bevx    "images" [N_I,1,H,W], "target" [1,H_M,W_M]
//   scene_NNNN.txt      the boxes behind the sample
//   view_NNNN_V.pgm, target_NNNN.pgm   optional previews
//
// Checkpoint: every ModelState parameter under its dotted name, plus
// "meta.config" (the config echo as bytes) and "meta.iteration".

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "bevx/attention.hpp"
#include "bevx/camera.hpp"
#include "bevx/config.hpp"
#include "bevx/decoder.hpp"
#include "bevx/flops.hpp"
#include "bevx/objective.hpp"
#include "bevx/optim.hpp"
#include "bevx/synthetic.hpp"
#include "bevx/tensor_io.hpp"

namespace bevx {

namespace fs = std::filesystem;

struct Sample {
  Tensor images;  // [N_I, 1, H, W]
  Tensor target;  // [1, H_M, W_M]
};

struct Dataset {
  CameraRig rig;
  std::vector<Sample> samples;
};

namespace detail {

inline std::string indexed(const std::string& stem, std::size_t i, const std::string& ext) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", i);
  return stem + "_" + buf + ext;
}

}  // namespace detail

inline CameraRig rig_for(const RunConfig& cfg) {
  if (!cfg.rig_file.empty()) {
    CameraRig rig = load_rig(cfg.rig_file);
    if (rig.size() != cfg.views || rig.height() != cfg.image_height || rig.width() != cfg.image_width) {
      throw ConfigError("data.rig", "rig file disagrees with data.views/image_height/image_width");
    }
    return rig;
  }
  return make_surround_rig(cfg.views, cfg.image_height, cfg.image_width);
}

/// Writes `cfg.samples` samples to `cfg.data_dir`; returns the count.
inline std::size_t gen_dataset(const RunConfig& cfg) {
  cfg.validate();
  const fs::path dir(cfg.data_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw std::runtime_error("gen-data: cannot create " + dir.string());
  const CameraRig rig = rig_for(cfg);
  save_rig((dir / "rig.txt").string(), rig);
  const std::size_t side = 2 * cfg.model.bev_sizes.back();
  std::ofstream manifest(dir / "manifest.csv");
  if (!manifest) throw std::runtime_error("gen-data: cannot write " + (dir / "manifest.csv").string());
  manifest << "index,sample,scene,objects,positive_cells\n";
  Rng seeds(cfg.seed);
  for (std::size_t i = 0; i < cfg.samples; ++i) {
    const Scene scene = gen_scene(seeds(), cfg.objects, cfg.model.extent);
    const Tensor images = render_views(scene, rig);
    const Tensor mask = rasterize_bev(scene, side, side, cfg.resolution());
    const std::string sample = detail::indexed("sample", i, ".bevx");
    const std::string scene_file = detail::indexed("scene", i, ".txt");
    save_tensors((dir / sample).string(), {{"images", images}, {"target", reshape(mask, {1, side, side})}});
    {
      std::ofstream sf(dir / scene_file);
      write_scene(sf, scene);
    }
    double positives = 0;
    for (double v : mask.data()) positives += v;
    manifest << i << ',' << sample << ',' << scene_file << ',' << scene.objects.size() << ','
             << static_cast<std::size_t>(positives) << '\n';
    if (cfg.pgm) {
      const std::size_t hw = rig.height() * rig.width();
      for (std::size_t v = 0; v < rig.size(); ++v) {
        write_pgm((dir / detail::indexed("view", i, "_" + std::to_string(v) + ".pgm")).string(),
                  images.data().subspan(v * hw, hw), rig.height(), rig.width());
      }
      write_pgm((dir / detail::indexed("target", i, ".pgm")).string(), mask.data(), side, side);
    }
  }
  if (!manifest) throw std::runtime_error("gen-data: write failed in " + dir.string());
  return cfg.samples;
}

inline Dataset load_dataset(const std::string& dir_name) {
  const fs::path dir(dir_name);
  std::ifstream manifest(dir / "manifest.csv");
  if (!manifest) throw std::runtime_error("dataset: missing manifest in " + dir.string());
  Dataset ds;
  ds.rig = load_rig((dir / "rig.txt").string());
  std::string line;
  std::getline(manifest, line);  // header
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string index, sample;
    std::getline(ls, index, ',');
    std::getline(ls, sample, ',');
    const auto tensors = load_tensors((dir / sample).string());
    Sample s{find_tensor(tensors, "images"), find_tensor(tensors, "target")};
    if (s.images.rank() != 4 || s.images.dim(0) != ds.rig.size()) {
      throw ShapeError("dataset: " + sample + " images " + shape_str(s.images.shape()) + " for " +
                       std::to_string(ds.rig.size()) + " rig views");
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

inline std::vector<std::size_t> split_indices(std::size_t n, std::size_t holdout, Split split) {
  if (holdout > n) throw std::invalid_argument("split: holdout larger than dataset");
  std::vector<std::size_t> out;
  const std::size_t cut = n - holdout;
  for (std::size_t i = 0; i < n; ++i) {
    if (split == Split::All || (split == Split::Train) == (i < cut)) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints.

inline void save_checkpoint(const std::string& path, ModelState& model, const RunConfig& cfg,
                            std::size_t iteration) {
  std::vector<NamedTensor> ts;
  for (const auto& p : model.params()) ts.push_back({p.name, *p.tensor});
  ts.push_back({"meta.config", text_to_tensor(cfg.to_text())});
  ts.push_back({"meta.iteration", Tensor({1}, {static_cast<double>(iteration)})});
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  save_tensors(path, ts);
}

struct Checkpoint {
  RunConfig config;
  std::size_t iteration = 0;
  std::vector<NamedTensor> tensors;
};

inline Checkpoint read_checkpoint(const std::string& path) {
  Checkpoint ck;
  ck.tensors = load_tensors(path);
  ck.config = parse_config_text(tensor_to_text(find_tensor(ck.tensors, "meta.config")));
  ck.iteration = static_cast<std::size_t>(find_tensor(ck.tensors, "meta.iteration").item());
  return ck;
}

/// Copies checkpoint weights into `model`, requiring every parameter to be
/// present with the shape the model's config implies.
inline void load_weights(ModelState& model, const std::vector<NamedTensor>& tensors) {
  for (auto& p : model.params()) {
    const Tensor& src = find_tensor(tensors, p.name);
    if (src.shape() != p.tensor->shape()) {
      throw ShapeError("checkpoint: tensor '" + p.name + "' has shape " + shape_str(src.shape()) +
                       ", config expects " + shape_str(p.tensor->shape()));
    }
    std::copy(src.data().begin(), src.data().end(), p.tensor->mutable_data().begin());
  }
}

// ---------------------------------------------------------------------------
// Training and evaluation.

struct TrainRow {
  std::size_t iteration = 0;
  double total = 0.0;
  std::array<double, 4> branch{};
  double train_iou = 0.0;
  double holdout_iou = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  std::vector<TrainRow> log;
  std::size_t steps = 0;  // optimizer updates applied
  bool stopped_early = false;
};

inline void write_train_header(std::ostream& os) {
  os << "iteration,total,branch0,branch1,branch2,final,train_iou,holdout_iou\n";
}

inline void write_train_row(std::ostream& os, const TrainRow& r) {
  os << r.iteration << ',' << detail::num(r.total);
  for (double b : r.branch) os << ',' << detail::num(b);
  os << ',' << detail::num(r.train_iou) << ',';
  if (!std::isnan(r.holdout_iou)) os << detail::num(r.holdout_iou);
  os << '\n';
}

inline std::pair<Tensor, CameraRig> apply_drop(const Sample& s, const CameraRig& rig, const std::vector<bool>& keep) {
  if (keep.empty()) return {s.images, rig};
  return drop_views(s.images, rig, keep);
}

inline void check_data_matches(const RunConfig& cfg, const Dataset& ds) {
  if (cfg.model.classes != 1) throw ConfigError("model.classes", "synthetic data has a single category");
  if (ds.samples.empty()) return;
  const std::size_t side = 2 * cfg.model.bev_sizes.back();
  if (ds.samples.front().target.shape() != Shape{1, side, side}) {
    throw ShapeError("dataset targets " + shape_str(ds.samples.front().target.shape()) +
                     " do not match the model's final size " + std::to_string(side));
  }
  if (!cfg.drop_views.empty() && ds.rig.size() != cfg.views) {
    throw ConfigError("run.drop_views", "dataset has " + std::to_string(ds.rig.size()) + " views, config says " +
                                            std::to_string(cfg.views));
  }
}

/// Dataset-level IoU over `indices`.
inline IouCounts evaluate(const ModelState& model, const Dataset& ds, const std::vector<std::size_t>& indices,
                          const std::vector<bool>& keep = {}) {
  NoGradGuard ng;
  IouCounts c;
  for (std::size_t i : indices) {
    const auto [images, rig] = apply_drop(ds.samples.at(i), ds.rig, keep);
    const ForwardResult r = forward(images, rig, model);
    c += iou_counts(r.logits.data(), ds.samples[i].target.data());
  }
  return c;
}

/// One row per iteration of `log_every`; the model is updated in place.
/// With `stop_iou` set, training ends before the update of the first
/// iteration whose batch IoU reaches it.
inline TrainResult train(const RunConfig& cfg, ModelState& model, const Dataset& ds, std::ostream* csv = nullptr) {
  cfg.validate();
  check_data_matches(cfg, ds);
  const auto train_idx = split_indices(ds.samples.size(), cfg.holdout, Split::Train);
  const auto hold_idx = split_indices(ds.samples.size(), cfg.holdout, Split::Holdout);
  if (train_idx.empty() && cfg.iterations > 0) throw std::invalid_argument("train: empty training split");
  const std::vector<bool> keep = cfg.drop_views.empty() ? std::vector<bool>{} : cfg.keep_mask();
  AdamW opt(model.params(), cfg.optim);
  TrainResult res;
  if (csv) write_train_header(*csv);
  const std::size_t batch = std::min(cfg.batch_size, std::max<std::size_t>(train_idx.size(), 1));
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    TrainRow row;
    row.iteration = it + 1;
    IouCounts counts;
    try {
      for (std::size_t j = 0; j < batch; ++j) {
        const std::size_t idx = train_idx[(it * batch + j) % train_idx.size()];
        const auto [images, rig] = apply_drop(ds.samples[idx], ds.rig, keep);
        const ForwardResult r = forward(images, rig, model);
        const LossBreakdown lb = total_loss(aux_logits(r, model), r.logits, ds.samples[idx].target, cfg.loss);
        scale(lb.total, 1.0 / static_cast<double>(batch)).backward();
        row.total += lb.total.item() / static_cast<double>(batch);
        for (std::size_t b = 0; b < 4; ++b) row.branch[b] += lb.branch[b] / static_cast<double>(batch);
        counts += iou_counts(r.logits.data(), ds.samples[idx].target.data());
      }
    } catch (const NumericError& e) {
      throw NumericError("train: non-finite value at iteration " + std::to_string(it + 1) + ": " + e.what());
    }
    if (!std::isfinite(row.total)) {
      throw NumericError("train: non-finite loss at iteration " + std::to_string(it + 1));
    }
    row.train_iou = counts.value();
    const bool stop = cfg.stop_iou > 0.0 && row.train_iou >= cfg.stop_iou;
    const bool log_now = it % cfg.log_every == 0 || it + 1 == cfg.iterations || stop;
    if (log_now && !hold_idx.empty()) row.holdout_iou = evaluate(model, ds, hold_idx, keep).value();
    if (log_now) {
      res.log.push_back(row);
      if (csv) {
        write_train_row(*csv, row);
        csv->flush();
      }
    }
    if (stop) {
      opt.zero_grad();
      res.stopped_early = true;
      break;
    }
    opt.step();
    ++res.steps;
  }
  return res;
}

inline void write_eval_csv(std::ostream& os, const IouCounts& c, std::size_t samples) {
  os << "category,iou,intersection,union,samples\n"
     << "vehicle," << detail::num(c.value()) << ',' << c.intersection << ',' << c.union_ << ',' << samples << '\n';
}

// ---------------------------------------------------------------------------
// Attention analysis.

struct LevelAttention {
  Tensor weights;               // [heads, N_Q, N_I * N_K]
  std::vector<bool> conducive;  // [N_Q * N_I], query-major
  std::size_t views = 0;
};

inline std::vector<LevelAttention> attention_maps(const ModelState& model, const Tensor& images,
                                                  const CameraRig& rig) {
  NoGradGuard ng;
  const ForwardResult r = forward(images, rig, model);
  std::vector<LevelAttention> out;
  for (std::size_t i = 0; i < kLevels; ++i) {
    const std::size_t h = model.schedule.levels[i].bev_size;
    const BevPositionGrid grid = bev_grid_for_extent(h, h, model.config.extent);
    out.push_back({r.weights[i], conducive_partition(rig, grid), rig.size()});
  }
  return out;
}

/// Histogram of normalized scores over all levels, heads and samples.
inline ScoreHistogram analyze_attention(const ModelState& model, const Dataset& ds,
                                        const std::vector<std::size_t>& indices, const std::vector<bool>& keep = {},
                                        const std::vector<ScoreRange>& ranges = default_score_ranges()) {
  ScoreHistogram total(ranges);
  for (std::size_t i : indices) {
    const auto [images, rig] = apply_drop(ds.samples.at(i), ds.rig, keep);
    for (const auto& level : attention_maps(model, images, rig)) {
      total.merge(score_histogram(level.weights, level.conducive, level.views, ranges));
    }
  }
  return total;
}

inline void write_histogram_csv(std::ostream& os, const std::string& label, AugMode mode, const ScoreHistogram& h,
                                bool header = true) {
  if (header) os << "checkpoint,aug_mode,range_lo,range_hi,conducive,inconducive\n";
  for (std::size_t r = 0; r < h.ranges.size(); ++r) {
    os << label << ',' << to_string(mode) << ',' << detail::num(h.ranges[r].lo) << ','
       << detail::num(h.ranges[r].hi) << ',' << h.conducive[r] << ',' << h.inconducive[r] << '\n';
  }
}

/// Dumps per-level weights and partition flags for an external recount.
inline void dump_attention(const std::string& path, const std::vector<LevelAttention>& levels) {
  std::vector<NamedTensor> ts;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const auto& l = levels[i];
    std::vector<double> flags(l.conducive.begin(), l.conducive.end());
    const std::size_t n = flags.size();
    ts.push_back({"level" + std::to_string(i) + ".weights", l.weights});
    ts.push_back({"level" + std::to_string(i) + ".conducive", Tensor({n}, std::move(flags))});
    ts.push_back({"level" + std::to_string(i) + ".views", Tensor({1}, {static_cast<double>(l.views)})});
  }
  save_tensors(path, ts);
}

// ---------------------------------------------------------------------------
// FLOPs report.

inline void write_flops_csv(std::ostream& os, const flops::MapSizes& sizes, std::uint64_t width) {
  using namespace flops;
  os << "plan,group,n_q,n_k,flops,dominant,rounded\n";
  const std::pair<const char*, ScaleGroupPlan> plans[] = {{"cross-scale", cross_scale_plan(width)},
                                                          {"aligned", aligned_plan(width)}};
  for (const auto& [name, plan] : plans) {
    const PlanCost c = plan_flops(plan, sizes);
    for (std::size_t g = 0; g < c.groups.size(); ++g) {
      const auto& gc = c.groups[g];
      os << name << ',' << g << ',' << gc.n_q << ',' << gc.n_k << ',' << to_string(gc.flops) << ','
         << to_string(gc.dominant) << ',' << (gc.rounded ? 1 : 0) << '\n';
    }
    os << name << ",total,,," << to_string(c.total) << ',' << to_string(c.dominant) << ',' << (c.rounded ? 1 : 0)
       << '\n';
  }
  os << "\nmode,saving_num,saving_den,saving_percent\n";
  for (auto [label, mode] : {std::pair{"dominant", SavingMode::Dominant}, std::pair{"full", SavingMode::Full}}) {
    const Fraction f = saving_ratio(cross_scale_plan(width), aligned_plan(width), sizes, mode);
    char pct[32];
    std::snprintf(pct, sizeof pct, "%.3f", 100.0 * f.value());
    os << label << ',' << to_string(f.num) << ',' << to_string(f.den) << ',' << pct << '\n';
  }
}

}  // namespace bevx
