// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// fails. Usage: acceptance [work_dir]. Training logs, eval sweeps and
// attention histograms are left in work_dir for inspection.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "bevx/harness.hpp"
#include "gradcheck.hpp"

using namespace bevx;
namespace fs = std::filesystem;
using testing::grad_check;
using testing::random_tensor;
using testing::weighted_sum;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// Cost model.

Outcome saving_is_three_sevenths() {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<std::uint64_t> side(1, 400), d(1, 1024);
  double worst = 0.0;
  std::size_t tuples = 0;
  auto check = [&](const flops::MapSizes& s, std::uint64_t w) {
    const double pct = 100.0 * saving_ratio(flops::cross_scale_plan(w), flops::aligned_plan(w), s,
                                            flops::SavingMode::Dominant)
                                   .value();
    worst = std::max(worst, std::abs(pct - 42.857));
    ++tuples;
  };
  check({200, 200, 224, 480}, 32);  // paper-scale map and image
  check({32, 32, 32, 64}, 32);      // desk scale
  for (int i = 0; i < 500; ++i) check({8 * side(rng), side(rng), 8 * side(rng), side(rng)}, d(rng));
  return {worst <= 0.001, fmt("dominant saving within %.2e %% of 42.857%% over %zu size tuples", worst, tuples)};
}

Outcome simplified_equals_general() {
  std::mt19937_64 rng(102);
  std::uniform_int_distribution<std::uint64_t> n(1, 5'000'000), d(1, 8192);
  std::size_t mismatches = 0;
  const std::size_t tuples = 5000;
  for (std::size_t i = 0; i < tuples; ++i) {
    const std::uint64_t nq = n(rng), nk = n(rng), w = d(rng);
    mismatches += flops::ma_flops_simplified(nq, nk, w) != flops::ma_flops_general({nq, nk, nk, w, w, w});
  }
  return {mismatches == 0, fmt("%zu mismatches over %zu random (N_Q, N_K, D) tuples", mismatches, tuples)};
}

// Single-head pass, decomposed into the four counted products.
std::uint64_t counted_attention(std::uint64_t nq, std::uint64_t nk, std::uint64_t d, std::mt19937_64& rng) {
  NoGradGuard ng;
  Tensor xq = random_tensor({nq, d}, rng, false), xk = random_tensor({nk, d}, rng, false);
  Tensor xv = random_tensor({nk, d}, rng, false);
  Tensor wq = random_tensor({d, d}, rng, false), wk = random_tensor({d, d}, rng, false);
  Tensor wv = random_tensor({d, d}, rng, false), wo = random_tensor({d, d}, rng, false);
  mac_counter().reset();
  const Tensor q = matmul(xq, wq), k = matmul(xk, wk), v = matmul(xv, wv);  // projections
  const Tensor a = softmax_lastaxis(matmul(q, permute(k, {1, 0})));       // scores
  const Tensor o = matmul(matmul(a, v), wo);                              // mixing, output
  (void)o;
  return mac_counter().count();
}

Outcome flops_match_instrumented_count() {
  std::mt19937_64 rng(103);
  std::uniform_int_distribution<std::uint64_t> n(1, 12), d(1, 8);
  std::string sizes;
  bool ok = true;
  for (int i = 0; i < 5; ++i) {
    const std::uint64_t nq = n(rng), nk = n(rng), w = d(rng);
    const std::uint64_t counted = counted_attention(nq, nk, w, rng);
    const flops::Wide model = flops::ma_flops_general({nq, nk, nk, w, w, w});
    ok = ok && flops::Wide{counted} == model;
    sizes += fmt("%s(%llu,%llu,%llu)=%llu", sizes.empty() ? "" : " ", (unsigned long long)nq,
                 (unsigned long long)nk, (unsigned long long)w, (unsigned long long)counted);
  }
  return {ok, "counted MACs equal the closed form at " + sizes};
}

// ---------------------------------------------------------------------------
// Gradients.

Outcome gradient_suite() {
  std::mt19937_64 rng(104);
  double worst_op = 0.0;
  std::string worst_name;
  std::size_t ops = 0;
  auto op = [&](const std::string& name, const std::function<Tensor()>& f, std::vector<Tensor*> leaves) {
    const double e = grad_check(f, leaves).max_rel_error;
    if (e >= worst_op) {
      worst_op = e;
      worst_name = name;
    }
    ++ops;
  };
  Tensor a = random_tensor({3, 1, 4}, rng), b = random_tensor({2, 1}, rng);
  op("add", [&] { return weighted_sum(add(a, b)); }, {&a, &b});
  op("sub", [&] { return weighted_sum(sub(a, b)); }, {&a, &b});
  op("mul", [&] { return weighted_sum(mul(a, b)); }, {&a, &b});
  op("scale", [&] { return weighted_sum(scale(a, -1.3)); }, {&a});
  op("gelu", [&] { return weighted_sum(gelu(a)); }, {&a});
  op("sigmoid", [&] { return weighted_sum(sigmoid(a)); }, {&a});
  Tensor x = random_tensor({2, 3, 4}, rng), y = random_tensor({2, 2, 4}, rng);
  op("reshape", [&] { return weighted_sum(reshape(x, {6, 4})); }, {&x});
  op("permute", [&] { return weighted_sum(permute(x, {2, 0, 1})); }, {&x});
  op("concat", [&] { return weighted_sum(concat({x, y}, 1)); }, {&x, &y});
  op("slice", [&] { return weighted_sum(slice(x, 1, 1, 2)); }, {&x});
  op("sum_over", [&] { return weighted_sum(sum_over(x, {1})); }, {&x});
  op("mean_over", [&] { return weighted_sum(mean_over(x, {0, 2})); }, {&x});
  op("variance_over", [&] { return weighted_sum(variance_over(x, {1})); }, {&x});
  op("std_over", [&] { return weighted_sum(std_over(x, {0, 1})); }, {&x});
  op("mean", [&] { return mean(x); }, {&x});
  Tensor m1 = random_tensor({2, 3, 4}, rng), m2 = random_tensor({2, 4, 5}, rng);
  op("matmul", [&] { return weighted_sum(matmul(m1, m2)); }, {&m1, &m2});
  Tensor img = random_tensor({2, 3, 5, 6}, rng), w = random_tensor({4, 3, 3, 3}, rng), bias = random_tensor({4}, rng);
  op("conv2d", [&] { return weighted_sum(conv2d(img, w, bias, 2, 1)); }, {&img, &w, &bias});
  Tensor fm = random_tensor({1, 2, 3, 4}, rng);
  op("resize_bilinear", [&] { return weighted_sum(resize_bilinear(fm, 7, 5)); }, {&fm});
  Tensor s = random_tensor({3, 5}, rng), g = random_tensor({5}, rng), beta = random_tensor({5}, rng);
  op("softmax", [&] { return weighted_sum(softmax_lastaxis(s)); }, {&s});
  op("layer_norm", [&] { return weighted_sum(layer_norm(s, g, beta)); }, {&s, &g, &beta});
  Tensor z = random_tensor({3, 4}, rng, true, -3, 3);
  Tensor target({3, 4}, {1, 0, 0, 1, 0, 1, 1, 0, 0, 0, 1, 0});
  op("focal_loss", [&] { return focal_loss(z, target, 2.0, 0.25); }, {&z});
  for (AugMode mode : {AugMode::AllViewsAllTokens, AugMode::PerView, AugMode::PerCameraToken}) {
    Rng init(5);
    AttentionBlock block(4, 2, 3, 4, 0.9, mode, init);
    Tensor q = random_tensor({2, 3, 4}, rng), k = random_tensor({2, 5, 4}, rng), v = random_tensor({2, 5, 3}, rng);
    op("cross_attend/" + std::string(to_string(mode)),
       [&] { return weighted_sum(cross_attend(q, k, v, block).tokens); },
       {&q, &k, &v, &block.query.weight, &block.key.weight, &block.value.weight, &block.output.weight});
  }

  // Full forward plus weighted multi-scale loss at a tiny scale.
  ModelConfig c;
  c.width = 4;
  c.heads = 2;
  c.channels = {4, 4, 4};
  c.encoder_channels = {2, 2, 2};
  c.encoder_stem = 2;
  c.bev_sizes = {2, 3, 4};
  c.xi = 0.7;
  ModelState model(c);
  const CameraRig rig = make_surround_rig(2, 16, 32);
  Tensor images = random_tensor({2, 1, 16, 32}, rng, true, 0, 1);
  std::vector<double> mask(64);
  for (double& v : mask) v = static_cast<double>(rng() & 1u);
  const Tensor bev_target({1, 8, 8}, mask);
  auto loss = [&] {
    const auto r = forward(images, rig, model);
    return total_loss(aux_logits(r, model), r.logits, bev_target, LossWeights{}).total;
  };
  std::vector<Tensor*> leaves = {&images};
  for (auto& p : model.params()) leaves.push_back(p.tensor);
  const auto e2e = grad_check(loss, leaves, 1e-5, 6);
  return {worst_op < 1e-4 && e2e.max_rel_error < 1e-3,
          fmt("%zu op checks, worst %.2e (%s); end to end %.2e over %zu coordinates", ops, worst_op,
              worst_name.c_str(), e2e.max_rel_error, e2e.checked)};
}

// ---------------------------------------------------------------------------
// Normalization and augmentation.

double entropy(std::span<const double> p) {
  double h = 0;
  for (double v : p)
    if (v > 0) h -= v * std::log(v);
  return h;
}

Outcome augmentation_properties() {
  std::mt19937_64 rng(105);
  std::uniform_real_distribution<double> xi(0.01, 3.0);
  std::uniform_int_distribution<std::size_t> len(2, 40);
  double worst_sum = 0.0;
  std::size_t rows = 0, argmax_bad = 0, entropy_bad = 0, sharpened = 0;
  while (rows < 2000) {
    const std::size_t L = len(rng);
    const Tensor row = random_tensor({1, 1, L}, rng, false, -4, 4);
    Rng init(1);
    AttentionBlock block(2, 1, 2, 2, xi(rng), AugMode::AllViewsAllTokens, init);
    const double factor = block.xi * std_over(row, {2}).item();
    if (std::abs(factor - 1.0) < 1e-9) continue;
    const Tensor aug = augment_scores(row, block, 1);
    const Tensor p0 = softmax_lastaxis(row), p1 = softmax_lastaxis(aug);
    for (const Tensor* p : {&p0, &p1}) {
      const auto d = p->data();
      worst_sum = std::max(worst_sum, std::abs(std::accumulate(d.begin(), d.end(), 0.0) - 1.0));
    }
    const auto r = row.data(), a = aug.data();
    argmax_bad += std::max_element(r.begin(), r.end()) - r.begin() != std::max_element(a.begin(), a.end()) - a.begin();
    const bool decreased = entropy(p1.data()) < entropy(p0.data());
    entropy_bad += decreased != (factor > 1.0);
    sharpened += factor > 1.0;
    ++rows;
  }
  return {worst_sum <= 1e-6 && argmax_bad == 0 && entropy_bad == 0,
          fmt("%zu rows (%zu with xi*sigma > 1): max |row sum - 1| %.1e, argmax changes %zu, entropy "
              "direction errors %zu",
              rows, sharpened, worst_sum, argmax_bad, entropy_bad)};
}

// ---------------------------------------------------------------------------
// Permutation equivariance.

Tensor permute_views(const Tensor& t, const std::vector<std::size_t>& perm) {
  std::vector<Tensor> parts;
  for (auto p : perm) parts.push_back(slice(t, 0, p, 1));
  return concat(parts, 0);
}

Outcome permutation_equivariance() {
  std::mt19937_64 rng(106);
  ModelConfig c;
  c.seed = 11;
  ModelState model(c);
  const CameraRig rig = make_surround_rig(6, 32, 64);
  const Scene scene = gen_scene(42, 6, c.extent);
  const Tensor images = render_views(scene, rig);
  double worst = 0.0;
  std::size_t perms = 0;
  NoGradGuard ng;
  for (AugMode mode : {AugMode::AllViewsAllTokens, AugMode::PerView, AugMode::PerCameraToken}) {
    model.set_augmentation(mode, kDefaultXi);
    const Tensor base = forward(images, rig, model).logits;
    for (int t = 0; t < 3; ++t) {
      std::vector<std::size_t> perm(6);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      CameraRig shuffled;
      for (auto p : perm) shuffled.views.push_back(rig.views[p]);
      const Tensor out = forward(permute_views(images, perm), shuffled, model).logits;
      for (std::size_t i = 0; i < out.size(); ++i) worst = std::max(worst, std::abs(out.data()[i] - base.data()[i]));
      ++perms;
    }
  }
  return {worst <= 1e-6, fmt("max |delta logit| %.2e over %zu random view permutations in 3 augmentation modes", worst,
                             perms)};
}

// ---------------------------------------------------------------------------
// Overfit, augmentation direction, camera dropping.

struct OverfitRuns {
  RunConfig cfg;
  Dataset ds;
  std::optional<ModelState> augmented, plain;
  TrainResult aug_result, plain_result;
};

RunConfig overfit_config(const fs::path& work) {
  RunConfig c;
  c.set("data.dir", (work / "data").string());
  c.set("data.samples", "8");
  c.set("data.views", "6");
  c.set("run.seed", "2024");
  c.set("run.out", (work / "all").string());
  c.set("optim.iterations", "2000");
  c.set("optim.batch_size", "8");
  c.set("optim.stop_iou", "0.9");
  return c;
}

ModelState train_logged(const RunConfig& cfg, const Dataset& ds, TrainResult& result) {
  ModelState model(cfg.model);
  fs::create_directories(cfg.out);
  std::ofstream log(fs::path(cfg.out) / "train_log.csv");
  result = train(cfg, model, ds, &log);
  save_checkpoint(cfg.checkpoint_path(), model, cfg, result.steps);
  return model;
}

Outcome overfit(OverfitRuns& runs, const fs::path& work) {
  runs.cfg = overfit_config(work);
  gen_dataset(runs.cfg);
  runs.ds = load_dataset(runs.cfg.data_dir);
  runs.augmented.emplace(train_logged(runs.cfg, runs.ds, runs.aug_result));
  const auto& log = runs.aug_result.log;
  if (log.empty()) return {false, "no training rows"};
  const double first = log.front().branch[3], last = log.back().branch[3];
  const auto idx = split_indices(runs.ds.samples.size(), 0, Split::Train);
  const double iou = evaluate(*runs.augmented, runs.ds, idx).value();
  return {iou >= 0.9 && first / last >= 10.0,
          fmt("6 views, 8 scenes: train IoU %.4f after %zu updates, final-branch focal loss %.4g -> %.4g (%.1fx)", iou,
              runs.aug_result.steps, first, last, first / last)};
}

Outcome augmentation_direction(OverfitRuns& runs, const fs::path& work) {
  if (!runs.augmented) return {false, "overfit run missing"};
  RunConfig off = runs.cfg;
  off.set("model.aug_mode", "off");
  off.set("run.out", (work / "off").string());
  off.set("optim.iterations", std::to_string(runs.aug_result.steps));
  off.set("optim.stop_iou", "0");
  runs.plain.emplace(train_logged(off, runs.ds, runs.plain_result));
  const auto idx = split_indices(runs.ds.samples.size(), 0, Split::Train);
  const ScoreHistogram ha = analyze_attention(*runs.augmented, runs.ds, idx);
  const ScoreHistogram ho = analyze_attention(*runs.plain, runs.ds, idx);
  std::ofstream csv(work / "attention_hist.csv");
  write_histogram_csv(csv, "augmented", AugMode::AllViewsAllTokens, ha);
  write_histogram_csv(csv, "unaugmented", AugMode::Off, ho, false);
  const double iou_off = evaluate(*runs.plain, runs.ds, idx).value();
  return {ha.inconducive[1] < ho.inconducive[1],
          fmt("inconducive scores in [0.1,1]: %llu with augmentation vs %llu without (conducive %llu vs %llu; "
              "%zu updates each, unaugmented train IoU %.4f)",
              (unsigned long long)ha.inconducive[1], (unsigned long long)ho.inconducive[1],
              (unsigned long long)ha.conducive[1], (unsigned long long)ho.conducive[1], runs.aug_result.steps,
              iou_off)};
}

Outcome camera_dropping(OverfitRuns& runs, const fs::path& work) {
  if (!runs.augmented) return {false, "overfit run missing"};
  const ModelState& model = *runs.augmented;
  const std::size_t nv = runs.ds.rig.size();
  const auto idx = split_indices(runs.ds.samples.size(), 0, Split::Train);
  std::vector<double> mean_iou(nv, 0.0);
  std::vector<std::size_t> choices(nv, 0);
  bool finite = true, normalized = true;
  std::ofstream csv(work / "drop_sweep.csv");
  csv << "dropped,mask,iou\n";
  NoGradGuard ng;
  for (unsigned bits = 0; bits + 1 < (1u << nv); ++bits) {  // all but "drop every view"
    std::vector<bool> keep(nv);
    std::size_t dropped = 0;
    for (std::size_t v = 0; v < nv; ++v) {
      keep[v] = !(bits >> v & 1u);
      dropped += !keep[v];
    }
    IouCounts counts;
    for (std::size_t i : idx) {
      const auto [images, rig] = apply_drop(runs.ds.samples[i], runs.ds.rig, keep);
      const ForwardResult r = forward(images, rig, model);
      for (double v : r.logits.data()) finite = finite && std::isfinite(v);
      for (const Tensor& w : r.weights) {
        const Tensor rows = sum_over(w, {2});
        for (double s : rows.data()) normalized = normalized && std::abs(s - 1.0) <= 1e-6;
      }
      counts += iou_counts(r.logits.data(), runs.ds.samples[i].target.data());
    }
    std::string mask;
    for (std::size_t v = 0; v < nv; ++v) mask += keep[v] ? '1' : '0';
    csv << dropped << ',' << mask << ',' << counts.value() << '\n';
    mean_iou[dropped] += counts.value();
    ++choices[dropped];
  }
  bool monotone = true;
  std::string curve;
  for (std::size_t k = 0; k < nv; ++k) {
    mean_iou[k] /= static_cast<double>(choices[k]);
    if (k > 0) monotone = monotone && mean_iou[k] <= mean_iou[k - 1];
    curve += fmt("%s%zu:%.4f", k ? " " : "", k, mean_iou[k]);
  }
  return {finite && normalized && monotone,
          fmt("mean IoU by views dropped {%s}; finite %s, normalized %s", curve.c_str(), finite ? "yes" : "no",
              normalized ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// Geometry.

Outcome geometry() {
  std::mt19937_64 rng(110);
  std::uniform_real_distribution<double> f(10, 800), c(-50, 500);
  double k_err = 0.0;
  for (int i = 0; i < 1000; ++i) {
    Eigen::Matrix3d k;
    k << f(rng), 0, c(rng), 0, f(rng), c(rng), 0, 0, 1;
    k_err = std::max(k_err, (k * invert_intrinsics(k) - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff());
  }
  const CameraRig rig = make_surround_rig(6, 32, 64);
  std::uniform_real_distribution<double> u(0, 63), v(0, 31), depth(0.1, 80);
  double px_err = 0.0;
  for (const auto& view : rig.views) {
    for (int i = 0; i < 200; ++i) {
      const Eigen::Vector2d px(u(rng), v(rng));
      const double d = depth(rng);
      const Projection p = view.project(view.unproject(px, d));
      px_err = std::max({px_err, (p.pixel - px).norm(), std::abs(p.depth - d)});
    }
  }
  // Lone boxes ahead of the front camera: silhouette centroid vs pinhole center.
  std::uniform_real_distribution<double> ahead(12, 30), lateral(-2.5, 2.5), yaw(-3.14, 3.14);
  double center_err = 0.0;
  std::size_t boxes = 0;
  while (boxes < 50) {
    Box b;
    b.cx = ahead(rng);
    b.cy = lateral(rng);
    b.yaw = yaw(rng);
    const CameraView& front = rig.views[1];
    bool inside = true;
    for (const auto& corner : b.corners()) {
      const Projection p = front.project(corner);
      inside = inside && p.depth > 0 && p.pixel.x() > 0 && p.pixel.x() < 63 && p.pixel.y() > 0 && p.pixel.y() < 31;
    }
    if (!inside) continue;
    Scene s;
    s.objects.push_back(b);
    const Tensor img = render_views(s, rig);
    double su = 0, sv = 0, n = 0;
    for (std::size_t r = 0; r < 32; ++r)
      for (std::size_t col = 0; col < 64; ++col)
        if (img.at({1, 0, r, col}) > 0) {
          su += static_cast<double>(col);
          sv += static_cast<double>(r);
          n += 1;
        }
    if (n == 0) return {false, "a box in view rendered no pixels"};
    const Eigen::Vector2d expect = front.project(b.center()).pixel;
    center_err = std::max(center_err, (Eigen::Vector2d(su / n, sv / n) - expect).norm());
    ++boxes;
  }
  return {k_err <= 1e-9 && px_err <= 1e-6 && center_err <= 1.0,
          fmt("max |K K^-1 - I| %.1e; project/unproject %.1e; rendered center off by at most %.3f px over %zu boxes",
              k_err, px_err, center_err, boxes)};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "bevx_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);
  OverfitRuns runs;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"complexity saving", saving_is_three_sevenths},
      {"formula consistency", simplified_equals_general},
      {"flops oracle", flops_match_instrumented_count},
      {"gradient suite", gradient_suite},
      {"normalization and augmentation", augmentation_properties},
      {"permutation equivariance", permutation_equivariance},
      {"overfit run", [&] { return overfit(runs, work); }},
      {"augmentation direction", [&] { return augmentation_direction(runs, work); }},
      {"camera dropping", [&] { return camera_dropping(runs, work); }},
      {"geometry", geometry},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << ' ' << i + 1 << ' ' << criteria[i].first << ": " << o.detail
              << fmt(" [%.1f s]", secs) << std::endl;
  }
  std::cout << (failed ? "FAILED " : "ALL PASSED ") << criteria.size() - failed << '/' << criteria.size()
            << " (artifacts in " << work.string() << ")" << std::endl;
  return failed ? 1 : 0;
}
