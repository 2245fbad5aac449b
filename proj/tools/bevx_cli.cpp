// bevx: command-line front end for data generation, training, evaluation,
// inference, the FLOPs report and attention analysis.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "bevx/harness.hpp"

namespace {

using namespace bevx;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> drop_views;
  std::optional<std::string> aug_mode;
  std::optional<std::string> residual;
  std::optional<std::string> lambda;
  std::optional<std::string> xi;
  std::optional<std::string> out;
  std::optional<std::string> data;
  std::optional<std::string> checkpoint;
  std::vector<std::string> overrides;  // key=value
  std::string compare;
  std::size_t sample = 0;
};

/// File (or checkpoint echo) first, then flags on top.
RunConfig resolve(const Flags& f, const std::optional<RunConfig>& from_checkpoint = std::nullopt) {
  RunConfig cfg;
  if (!f.config.empty()) {
    cfg = load_config(f.config);
  } else if (from_checkpoint) {
    cfg = *from_checkpoint;
  }
  if (f.seed) cfg.set("run.seed", std::to_string(*f.seed));
  if (f.drop_views) cfg.set("run.drop_views", *f.drop_views);
  if (f.aug_mode) cfg.set("model.aug_mode", *f.aug_mode);
  if (f.residual) cfg.set("model.residual", *f.residual);
  if (f.lambda) cfg.set("loss.lambda", *f.lambda);
  if (f.xi) cfg.set("model.xi", *f.xi);
  if (f.out) cfg.set("run.out", *f.out);
  if (f.data) cfg.set("data.dir", *f.data);
  if (f.checkpoint) cfg.set("run.checkpoint", *f.checkpoint);
  for (const auto& kv : f.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set", "expected key=value, got '" + kv + "'");
    cfg.set(detail::trim(kv.substr(0, eq)), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

std::vector<bool> keep_for(const RunConfig& cfg, const Dataset& ds) {
  if (cfg.drop_views.empty()) return {};
  if (ds.rig.size() != cfg.views) {
    throw ConfigError("run.drop_views", "dataset has " + std::to_string(ds.rig.size()) + " views");
  }
  return cfg.keep_mask();
}

void write_both(const std::string& path, const std::string& text) {
  std::cout << text;
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
}

/// Config for commands that consume a checkpoint: an explicit --config
/// wins, otherwise the checkpoint's own echo is the base.
std::pair<RunConfig, ModelState> model_from_checkpoint(const Flags& f) {
  RunConfig probe = resolve(f);
  const std::string path = f.checkpoint ? *f.checkpoint : probe.checkpoint_path();
  if (!std::filesystem::exists(path)) throw std::runtime_error("missing checkpoint: " + path);
  Checkpoint ck = read_checkpoint(path);
  RunConfig cfg = resolve(f, ck.config);
  ModelState model(cfg.model);
  load_weights(model, ck.tensors);
  return {cfg, std::move(model)};
}

int cmd_gen_data(const Flags& f) {
  RunConfig cfg = resolve(f);
  if (f.out) cfg.data_dir = *f.out;
  const std::size_t n = gen_dataset(cfg);
  std::cout << "samples,dir\n" << n << ',' << cfg.data_dir << '\n';
  return 0;
}

int cmd_train(const Flags& f) {
  const RunConfig cfg = resolve(f);
  const Dataset ds = load_dataset(cfg.data_dir);
  ModelState model(cfg.model);
  std::filesystem::create_directories(cfg.out);
  std::ofstream log(std::filesystem::path(cfg.out) / "train_log.csv");
  if (!log) throw std::runtime_error("cannot write the training log in " + cfg.out);
  const TrainResult r = train(cfg, model, ds, &log);
  save_checkpoint(cfg.checkpoint_path(), model, cfg, r.steps);
  std::cout << "iterations,steps,stopped_early,final_loss,train_iou,checkpoint\n"
            << (r.log.empty() ? 0 : r.log.back().iteration) << ',' << r.steps << ',' << r.stopped_early << ','
            << (r.log.empty() ? 0.0 : r.log.back().branch[3]) << ','
            << (r.log.empty() ? 0.0 : r.log.back().train_iou) << ',' << cfg.checkpoint_path() << '\n';
  return 0;
}

int cmd_eval(const Flags& f) {
  auto [cfg, model] = model_from_checkpoint(f);
  const Dataset ds = load_dataset(cfg.data_dir);
  check_data_matches(cfg, ds);
  const auto idx = split_indices(ds.samples.size(), cfg.holdout, cfg.split);
  const IouCounts c = evaluate(model, ds, idx, keep_for(cfg, ds));
  std::ostringstream os;
  write_eval_csv(os, c, idx.size());
  write_both((std::filesystem::path(cfg.out) / "eval.csv").string(), os.str());
  return 0;
}

int cmd_infer(const Flags& f) {
  auto [cfg, model] = model_from_checkpoint(f);
  const Dataset ds = load_dataset(cfg.data_dir);
  if (f.sample >= ds.samples.size()) throw std::out_of_range("infer: sample index out of range");
  const auto [images, rig] = apply_drop(ds.samples[f.sample], ds.rig, keep_for(cfg, ds));
  NoGradGuard ng;
  const ForwardResult r = forward(images, rig, model);
  std::vector<double> mask(r.logits.size());
  std::vector<double> prob(r.logits.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    prob[i] = detail::sigmoid_scalar(r.logits.data()[i]);
    mask[i] = prob[i] > 0.5 ? 1.0 : 0.0;
  }
  const std::size_t side = model.schedule.final_size;
  std::filesystem::create_directories(cfg.out);
  const auto base = std::filesystem::path(cfg.out) / detail::indexed("infer", f.sample, "");
  save_tensors(base.string() + ".bevx", {{"logits", r.logits}, {"mask", Tensor(r.logits.shape(), mask)}});
  write_pgm(base.string() + ".pgm", prob, side, side);
  std::cout << "sample,iou,output\n"
            << f.sample << ',' << iou(r.logits, ds.samples[f.sample].target) << ',' << base.string() << ".bevx\n";
  return 0;
}

int cmd_flops(const Flags& f) {
  const RunConfig cfg = resolve(f);
  const std::size_t side = 2 * cfg.model.bev_sizes.back();
  std::ostringstream os;
  write_flops_csv(os, {side, side, cfg.image_height, cfg.image_width}, cfg.model.width);
  if (f.out) {
    write_both((std::filesystem::path(cfg.out) / "flops.csv").string(), os.str());
  } else {
    std::cout << os.str();
  }
  return 0;
}

int cmd_analyze(const Flags& f) {
  auto [cfg, model] = model_from_checkpoint(f);
  const Dataset ds = load_dataset(cfg.data_dir);
  check_data_matches(cfg, ds);
  const auto idx = split_indices(ds.samples.size(), cfg.holdout, cfg.split);
  const auto keep = keep_for(cfg, ds);
  std::ostringstream os;
  write_histogram_csv(os, "primary", model.config.mode, analyze_attention(model, ds, idx, keep));
  if (!f.compare.empty()) {
    Checkpoint other = read_checkpoint(f.compare);
    ModelState cmp(other.config.model);
    load_weights(cmp, other.tensors);
    write_histogram_csv(os, "compare", cmp.config.mode, analyze_attention(cmp, ds, idx, keep), false);
  }
  write_both((std::filesystem::path(cfg.out) / "attention_hist.csv").string(), os.str());
  if (!idx.empty()) {
    const auto [images, rig] = apply_drop(ds.samples[idx.front()], ds.rig, keep);
    dump_attention((std::filesystem::path(cfg.out) / "attention_scores.bevx").string(),
                   attention_maps(model, images, rig));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-scale BEV segmentation toolkit"};
  app.require_subcommand(1);
  Flags f;
  auto add_common = [&f](CLI::App* sub) {
    sub->add_option("--config", f.config, "configuration file (key = value with [section] headers)");
    sub->add_option("--seed", f.seed, "random seed");
    sub->add_option("--drop-views", f.drop_views, "comma-separated view indices to discard");
    sub->add_option("--aug-mode", f.aug_mode, "all | per-view | per-token | off");
    sub->add_option("--residual", f.residual, "on | off");
    sub->add_option("--lambda", f.lambda, "scale weights a,b,c,d");
    sub->add_option("--xi", f.xi, "augmentation coefficient");
    sub->add_option("--out", f.out, "output path");
    sub->add_option("--data", f.data, "dataset directory");
    sub->add_option("--checkpoint", f.checkpoint, "checkpoint path");
    sub->add_option("--set", f.overrides, "override any config key: section.key=value");
  };
  struct Cmd {
    const char* name;
    const char* help;
    int (*run)(const Flags&);
  };
  const Cmd cmds[] = {
      {"gen-data", "generate a synthetic dataset", cmd_gen_data},
      {"train", "train and write a checkpoint plus train_log.csv", cmd_train},
      {"eval", "IoU of a checkpoint over a split", cmd_eval},
      {"infer", "predict one sample", cmd_infer},
      {"flops", "attention cost of the cross-scale and aligned plans", cmd_flops},
      {"analyze-attention", "histogram of normalized attention scores", cmd_analyze},
  };
  std::vector<std::pair<CLI::App*, const Cmd*>> subs;
  for (const auto& c : cmds) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    add_common(sub);
    subs.emplace_back(sub, &c);
  }
  subs[3].first->add_option("--sample", f.sample, "sample index");
  subs[5].first->add_option("--compare", f.compare, "second checkpoint to compare against");
  CLI11_PARSE(app, argc, argv);
  try {
    for (const auto& [sub, cmd] : subs) {
      if (sub->parsed()) return cmd->run(f);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
