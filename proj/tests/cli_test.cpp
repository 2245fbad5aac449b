#include <gtest/gtest.h>

#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>

#include "bevx/harness.hpp"

using namespace bevx;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("bevx_cli_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::map<std::string, std::string> dir_bytes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) out[e.path().filename().string()] = slurp(e.path());
  return out;
}

/// Runs the CLI, returning exit status and stdout.
std::pair<int, std::string> run_cli(const std::string& args) {
  const std::string cmd = std::string(BEVX_CLI_PATH) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  std::string out;
  std::array<char, 4096> buf;
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), p)) out.append(buf.data(), n);
  const int status = pclose(p);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

/// Small enough that a few training steps take well under a second.
RunConfig small_config(const fs::path& dir) {
  RunConfig c;
  c.set("model.width", "16");
  c.set("model.channels", "16,16,16");
  c.set("model.encoder_channels", "8,8,8");
  c.set("data.views", "3");
  c.set("data.samples", "3");
  c.set("data.objects", "5");
  c.set("data.dir", (dir / "data").string());
  c.set("run.out", (dir / "out").string());
  c.set("run.seed", "3");
  c.set("optim.batch_size", "2");
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration.

TEST(Config, DefaultsAreTheDocumentedValues) {
  const RunConfig c;
  EXPECT_DOUBLE_EQ(c.model.xi, 0.05);
  EXPECT_EQ(c.loss.lambda, (std::array<double, 4>{1, 2, 2, 60}));
  EXPECT_EQ(c.model.bev_sizes, (std::vector<std::size_t>{4, 8, 16}));
  EXPECT_EQ(c.model.mode, AugMode::AllViewsAllTokens);
  EXPECT_TRUE(c.model.residual);
  EXPECT_DOUBLE_EQ(c.optim.lr, 1e-3);
  EXPECT_DOUBLE_EQ(c.optim.beta1, 0.9);
  EXPECT_DOUBLE_EQ(c.optim.beta2, 0.999);
  EXPECT_DOUBLE_EQ(c.optim.weight_decay, 0.0);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, TextRoundTripIsExact) {
  RunConfig c;
  c.set("model.xi", "0.137");
  c.set("model.aug_mode", "per-token");
  c.set("model.residual", "off");
  c.set("loss.lambda", "0,0,0.5,1e-3");
  c.set("optim.lr", "0.00031");
  c.set("run.drop_views", "1,4");
  c.set("run.split", "holdout");
  c.set("data.dir", "some dir/with spaces");
  const std::string text = c.to_text();
  const RunConfig back = parse_config_text(text);
  EXPECT_EQ(back.to_text(), text);
  EXPECT_EQ(back.model.mode, AugMode::PerCameraToken);
  EXPECT_FALSE(back.model.residual);
  EXPECT_EQ(back.loss.lambda[3], 1e-3);
  EXPECT_EQ(back.drop_views, (std::vector<std::size_t>{1, 4}));
  EXPECT_EQ(back.data_dir, "some dir/with spaces");
}

TEST(Config, SectionsCommentsAndLaterKeysWin) {
  const RunConfig c = parse_config_text(
      "# comment\n[model]\nxi = 0.5  # trailing\nheads = 8\n\n[loss]\nlambda = 0, 0, 0, 1\n[model]\nxi = 0.25\n");
  EXPECT_DOUBLE_EQ(c.model.xi, 0.25);
  EXPECT_EQ(c.model.heads, 8u);
  EXPECT_EQ(c.loss.lambda, (std::array<double, 4>{0, 0, 0, 1}));
}

struct BadField {
  const char* key;
  const char* value;
  const char* field;
};

void PrintTo(const BadField& b, std::ostream* os) { *os << b.key << " = " << b.value; }

class ConfigRejects : public ::testing::TestWithParam<BadField> {};

TEST_P(ConfigRejects, NamesTheField) {
  const BadField b = GetParam();
  try {
    RunConfig c;
    c.set(b.key, b.value);
    c.validate();
    FAIL() << b.key << " = " << b.value << " was accepted";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(b.field), std::string::npos) << e.what();
  }
}

INSTANTIATE_TEST_SUITE_P(
    OutOfRange, ConfigRejects,
    ::testing::Values(BadField{"model.xi", "-1", "model.xi"}, BadField{"model.xi", "nan", "model.xi"},
                      BadField{"model.heads", "5", "model.heads"}, BadField{"model.width", "0", "model.width"},
                      BadField{"model.bev_sizes", "8,4,16", "model.bev_sizes"},
                      BadField{"model.bev_sizes", "4,8", "model.bev_sizes"},
                      BadField{"model.channels", "16,32,32", "model.channels"},
                      BadField{"model.aug_mode", "sideways", "model.aug_mode"},
                      BadField{"model.residual", "maybe", "model.residual"},
                      BadField{"loss.lambda", "1,2", "loss.lambda"}, BadField{"loss.lambda", "0,0,0,0", "loss.lambda"},
                      BadField{"loss.lambda", "1,-2,2,60", "loss.lambda"},
                      BadField{"loss.focal_alpha", "2", "loss.focal_alpha"},
                      BadField{"loss.focal_gamma", "-1", "loss.focal_gamma"}, BadField{"optim.lr", "0", "optim.lr"},
                      BadField{"optim.lr", "fast", "optim.lr"}, BadField{"optim.beta1", "1", "optim.beta1"},
                      BadField{"optim.beta2", "-0.1", "optim.beta2"},
                      BadField{"optim.weight_decay", "-1", "optim.weight_decay"},
                      BadField{"optim.batch_size", "0", "optim.batch_size"},
                      BadField{"optim.stop_iou", "1.5", "optim.stop_iou"},
                      BadField{"optim.log_every", "0", "optim.log_every"},
                      BadField{"optim.iterations", "-3", "optim.iterations"},
                      BadField{"data.views", "0", "data.views"},
                      BadField{"data.image_height", "20", "data.image_height"},
                      BadField{"data.holdout", "99", "data.holdout"}, BadField{"data.extent", "0", "data.extent"},
                      BadField{"data.dir", "", "data.dir"}, BadField{"run.drop_views", "6", "run.drop_views"},
                      BadField{"run.drop_views", "0,1,2,3,4,5", "run.drop_views"},
                      BadField{"run.split", "test", "run.split"}, BadField{"run.seed", "x", "run.seed"},
                      BadField{"model.nonsense", "1", "model.nonsense"}),
    [](const auto& info) {
      std::string s = std::string(info.param.key) + "_" + std::to_string(info.index);
      for (char& ch : s)
        if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
      return s;
    });

TEST(Config, MalformedLinesNameTheLine) {
  EXPECT_THROW(parse_config_text("[model\nxi = 1\n"), ConfigError);
  try {
    parse_config_text("[model]\nxi 1\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

// ---------------------------------------------------------------------------
// Dataset generation.

TEST(GenData, SameSeedGivesByteIdenticalDirectories) {
  const fs::path root = scratch("determinism");
  RunConfig c;
  c.set("data.samples", "8");
  c.set("run.seed", "7");
  c.set("data.pgm", "on");
  c.set("data.dir", (root / "a").string());
  gen_dataset(c);
  c.set("data.dir", (root / "b").string());
  gen_dataset(c);
  const auto a = dir_bytes(root / "a");
  EXPECT_EQ(a, dir_bytes(root / "b"));
  EXPECT_GT(a.size(), 8u);

  c.set("run.seed", "8");
  c.set("data.dir", (root / "c").string());
  gen_dataset(c);
  EXPECT_NE(a.at("sample_0000.bevx"), slurp(root / "c" / "sample_0000.bevx"));
}

TEST(GenData, ManifestCountMatchesFilesOnDisk) {
  const fs::path root = scratch("count");
  RunConfig c = small_config(root);
  c.set("data.samples", "5");
  ASSERT_EQ(gen_dataset(c), 5u);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(root / "data")) {
    files += e.path().filename().string().rfind("sample_", 0) == 0;
  }
  std::ifstream m(root / "data" / "manifest.csv");
  std::string line;
  std::size_t rows = 0;
  std::getline(m, line);
  while (std::getline(m, line)) rows += !line.empty();
  EXPECT_EQ(files, 5u);
  EXPECT_EQ(rows, 5u);
  const Dataset ds = load_dataset(c.data_dir);
  EXPECT_EQ(ds.samples.size(), 5u);
  EXPECT_EQ(ds.rig.size(), 3u);
  EXPECT_EQ(ds.samples[0].target.shape(), (Shape{1, 32, 32}));
}

TEST(GenData, ZeroSamplesGivesEmptyManifest) {
  const fs::path root = scratch("empty");
  RunConfig c = small_config(root);
  c.set("data.samples", "0");
  EXPECT_EQ(gen_dataset(c), 0u);
  EXPECT_EQ(slurp(root / "data" / "manifest.csv"), "index,sample,scene,objects,positive_cells\n");
  EXPECT_TRUE(load_dataset(c.data_dir).samples.empty());
}

TEST(GenData, UnwritablePathFails) {
  const fs::path root = scratch("unwritable");
  std::ofstream(root / "file") << "x";
  RunConfig c = small_config(root);
  c.set("data.dir", (root / "file" / "sub").string());
  EXPECT_ANY_THROW(gen_dataset(c));
}

// ---------------------------------------------------------------------------
// Checkpoints.

TEST(Checkpoint, SaveLoadSaveIsBitExact) {
  const fs::path root = scratch("roundtrip");
  RunConfig c = small_config(root);
  c.set("optim.iterations", "2");
  gen_dataset(c);
  ModelState m(c.model);
  train(c, m, load_dataset(c.data_dir));
  save_checkpoint((root / "a.bevx").string(), m, c, 2);

  const Checkpoint ck = read_checkpoint((root / "a.bevx").string());
  EXPECT_EQ(ck.iteration, 2u);
  EXPECT_EQ(ck.config.to_text(), c.to_text());
  ModelState back(ck.config.model);
  load_weights(back, ck.tensors);
  save_checkpoint((root / "b.bevx").string(), back, ck.config, ck.iteration);
  EXPECT_EQ(slurp(root / "a.bevx"), slurp(root / "b.bevx"));
}

TEST(Checkpoint, ShapeMismatchIsRejected) {
  const fs::path root = scratch("mismatch");
  RunConfig c = small_config(root);
  ModelState m(c.model);
  save_checkpoint((root / "a.bevx").string(), m, c, 0);
  RunConfig wide = c;
  wide.set("model.width", "32");
  wide.set("model.channels", "32,32,32");
  ModelState other(wide.model);
  EXPECT_THROW(load_weights(other, read_checkpoint((root / "a.bevx").string()).tensors), ShapeError);
  EXPECT_THROW(load_weights(other, {}), FormatError);
}

// ---------------------------------------------------------------------------
// Training.

TEST(Train, LogHasOneRowPerIterationAndFiniteValues) {
  const fs::path root = scratch("trainlog");
  RunConfig c = small_config(root);
  c.set("optim.iterations", "3");
  c.set("data.holdout", "1");
  gen_dataset(c);
  ModelState m(c.model);
  std::ostringstream csv;
  const TrainResult r = train(c, m, load_dataset(c.data_dir), &csv);
  EXPECT_EQ(r.steps, 3u);
  ASSERT_EQ(r.log.size(), 3u);
  for (const auto& row : r.log) {
    EXPECT_TRUE(std::isfinite(row.total));
    EXPECT_TRUE(std::isfinite(row.holdout_iou));
    double weighted = 0;
    for (std::size_t b = 0; b < 4; ++b) weighted += c.loss.lambda[b] * row.branch[b];
    EXPECT_NEAR(row.total, weighted, 1e-12 * std::max(1.0, weighted));
  }
  std::istringstream is(csv.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "iteration,total,branch0,branch1,branch2,final,train_iou,holdout_iou");
  std::size_t rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 3u);
}

TEST(Train, OnlyFinalBranchWeightMeansTotalIsFinalLoss) {
  const fs::path root = scratch("onlym");
  RunConfig c = small_config(root);
  c.set("loss.lambda", "0,0,0,1");
  c.set("optim.iterations", "2");
  gen_dataset(c);
  ModelState m(c.model);
  const TrainResult r = train(c, m, load_dataset(c.data_dir));
  for (const auto& row : r.log) {
    EXPECT_EQ(row.total, row.branch[3]);
    EXPECT_GT(row.branch[0], 0.0);  // still measured, just not weighted
  }
}

TEST(Train, NonFiniteInputAbortsWithIteration) {
  const fs::path root = scratch("nan");
  RunConfig c = small_config(root);
  c.set("optim.iterations", "2");
  gen_dataset(c);
  Dataset ds = load_dataset(c.data_dir);
  ds.samples[0].images.mutable_data()[0] = std::nan("");
  ModelState m(c.model);
  try {
    train(c, m, ds);
    FAIL() << "training accepted a NaN image";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 1"), std::string::npos) << e.what();
  }
}

// ---------------------------------------------------------------------------
// Evaluation and attention analysis.

TEST(Eval, AllBackgroundPredictorScoresZero) {
  const fs::path root = scratch("background");
  RunConfig c = small_config(root);
  gen_dataset(c);
  const Dataset ds = load_dataset(c.data_dir);
  IouCounts total;
  for (const auto& s : ds.samples) {
    const std::vector<double> logits(s.target.size(), -10.0);
    total += iou_counts(logits, s.target.data());
  }
  ASSERT_GT(total.union_, 0u);
  EXPECT_EQ(total.intersection, 0u);
  EXPECT_EQ(total.value(), 0.0);
}

TEST(Eval, KeepAllMaskMatchesNoMask) {
  const fs::path root = scratch("keepall");
  RunConfig c = small_config(root);
  gen_dataset(c);
  const Dataset ds = load_dataset(c.data_dir);
  ModelState m(c.model);
  const auto idx = split_indices(ds.samples.size(), 0, Split::All);
  const IouCounts a = evaluate(m, ds, idx);
  const IouCounts b = evaluate(m, ds, idx, std::vector<bool>(3, true));
  EXPECT_EQ(a.intersection, b.intersection);
  EXPECT_EQ(a.union_, b.union_);
}

TEST(Eval, DroppedViewsStayFiniteAndNormalized) {
  const fs::path root = scratch("drop");
  RunConfig c = small_config(root);
  gen_dataset(c);
  const Dataset ds = load_dataset(c.data_dir);
  ModelState m(c.model);
  const auto [images, rig] = apply_drop(ds.samples[0], ds.rig, {false, true, false});
  ASSERT_EQ(rig.size(), 1u);
  const ForwardResult r = forward(images, rig, m);
  for (double v : r.logits.data()) ASSERT_TRUE(std::isfinite(v));
  for (const Tensor& w : r.weights) {
    const std::size_t cols = w.dim(2);
    const auto d = w.data();
    for (std::size_t row = 0; row < d.size() / cols; ++row) {
      double s = 0;
      for (std::size_t k = 0; k < cols; ++k) s += d[row * cols + k];
      ASSERT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Analyze, UntrainedModelHasNoHighScores) {
  const fs::path root = scratch("untrained");
  RunConfig c = small_config(root);
  c.set("data.views", "6");
  gen_dataset(c);
  const Dataset ds = load_dataset(c.data_dir);
  const ModelState m(c.model);
  const ScoreHistogram h = analyze_attention(m, ds, {0, 1, 2});
  EXPECT_EQ(h.conducive[0] + h.inconducive[0], 0u);
}

TEST(Analyze, CountsMatchRecountOfDumpedScores) {
  const fs::path root = scratch("recount");
  RunConfig c = small_config(root);
  c.set("model.xi", "40");  // sharpened so the ranges are populated
  gen_dataset(c);
  const Dataset ds = load_dataset(c.data_dir);
  const ModelState m(c.model);
  const ScoreHistogram h = analyze_attention(m, ds, {1});
  const auto [images, rig] = apply_drop(ds.samples[1], ds.rig, {});
  dump_attention((root / "dump.bevx").string(), attention_maps(m, images, rig));

  const auto dumped = load_tensors((root / "dump.bevx").string());
  const auto ranges = default_score_ranges();
  std::vector<std::uint64_t> good(ranges.size()), bad(ranges.size());
  for (std::size_t lvl = 0; lvl < kLevels; ++lvl) {
    const std::string p = "level" + std::to_string(lvl);
    const Tensor& w = find_tensor(dumped, p + ".weights");
    const Tensor& flags = find_tensor(dumped, p + ".conducive");
    const auto views = static_cast<std::size_t>(find_tensor(dumped, p + ".views").item());
    const std::size_t nq = w.dim(1), cols = w.dim(2), nk = cols / views;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const std::size_t q = (i / cols) % nq, view = (i % cols) / nk;
      // the dump is single precision; recount the stored values
      const double s = w.data()[i];
      for (std::size_t r = 0; r < ranges.size(); ++r) {
        if (s >= ranges[r].lo && s <= ranges[r].hi) ++(flags.data()[q * views + view] != 0 ? good : bad)[r];
      }
    }
  }
  EXPECT_GT(good[1] + bad[1], 0u);
  EXPECT_EQ(good, h.conducive);
  EXPECT_EQ(bad, h.inconducive);
}

// ---------------------------------------------------------------------------
// The command-line binary.

TEST(Cli, FlopsReportsTheDominantSaving) {
  const auto [rc, out] = run_cli("flops");
  ASSERT_EQ(rc, 0) << out;
  EXPECT_NE(out.find("dominant,3,7,42.857"), std::string::npos) << out;
  EXPECT_NE(out.find("full,"), std::string::npos);
}

TEST(Cli, FlagsOverrideFileAndZeroIterationsKeepsInitialization) {
  const fs::path root = scratch("cli_train");
  const RunConfig c = small_config(root);
  std::ofstream(root / "run.cfg") << c.to_text() << "[model]\nxi = 0.9\n[optim]\niterations = 0\n";
  const std::string cfg = "--config " + (root / "run.cfg").string();
  ASSERT_EQ(run_cli("gen-data " + cfg).first, 0);
  const auto [rc, out] = run_cli("train " + cfg + " --xi 0.3 --lambda 0,0,0,1 --aug-mode per-view --residual off");
  ASSERT_EQ(rc, 0) << out;

  const Checkpoint ck = read_checkpoint((root / "out" / "checkpoint.bevx").string());
  EXPECT_EQ(ck.iteration, 0u);
  EXPECT_DOUBLE_EQ(ck.config.model.xi, 0.3);
  EXPECT_EQ(ck.config.loss.lambda, (std::array<double, 4>{0, 0, 0, 1}));
  EXPECT_EQ(ck.config.model.mode, AugMode::PerView);
  EXPECT_FALSE(ck.config.model.residual);

  ModelState init(ck.config.model);
  for (const auto& p : init.params()) {
    const Tensor& saved = find_tensor(ck.tensors, p.name);
    ASSERT_EQ(saved.shape(), p.tensor->shape()) << p.name;
    for (std::size_t i = 0; i < saved.size(); ++i) {
      ASSERT_EQ(saved.data()[i], static_cast<double>(static_cast<float>(p.tensor->data()[i]))) << p.name;
    }
  }
}

TEST(Cli, EvalInferAnalyzeWriteTheirOutputs) {
  const fs::path root = scratch("cli_eval");
  const RunConfig c = small_config(root);
  std::ofstream(root / "run.cfg") << c.to_text();
  const std::string cfg = "--config " + (root / "run.cfg").string();
  ASSERT_EQ(run_cli("gen-data " + cfg).first, 0);
  ASSERT_EQ(run_cli("train " + cfg + " --set optim.iterations=1").first, 0);

  // no --config: the checkpoint's own echo supplies the model shape
  const std::string ck = "--checkpoint " + (root / "out" / "checkpoint.bevx").string();
  const auto [rc, out] = run_cli("eval " + ck + " --drop-views 1 --set run.split=all");
  ASSERT_EQ(rc, 0) << out;
  EXPECT_EQ(out.rfind("category,iou,intersection,union,samples\nvehicle,", 0), 0u) << out;
  EXPECT_TRUE(fs::exists(root / "out" / "eval.csv"));

  EXPECT_EQ(run_cli("infer " + ck + " --sample 2").first, 0);
  EXPECT_TRUE(fs::exists(root / "out" / "infer_0002.bevx"));
  EXPECT_TRUE(fs::exists(root / "out" / "infer_0002.pgm"));
  EXPECT_NE(run_cli("infer " + ck + " --sample 3").first, 0);

  const auto [arc, aout] = run_cli("analyze-attention " + ck + " --compare " + (root / "out" / "checkpoint.bevx").string());
  ASSERT_EQ(arc, 0) << aout;
  EXPECT_NE(aout.find("compare,all,0.1,1,"), std::string::npos) << aout;
  EXPECT_TRUE(fs::exists(root / "out" / "attention_scores.bevx"));
}

TEST(Cli, ErrorsExitNonZeroWithMessage) {
  const fs::path root = scratch("cli_err");
  auto [rc, out] = run_cli("eval --checkpoint " + (root / "missing.bevx").string());
  EXPECT_EQ(rc, 1);
  EXPECT_NE(out.find("error: missing checkpoint"), std::string::npos) << out;
  std::tie(rc, out) = run_cli("flops --aug-mode sideways");
  EXPECT_EQ(rc, 1);
  EXPECT_NE(out.find("model.aug_mode"), std::string::npos) << out;
  std::tie(rc, out) = run_cli("train --config " + (root / "none.cfg").string());
  EXPECT_EQ(rc, 1);
  EXPECT_NE(run_cli("").first, 0);
}
