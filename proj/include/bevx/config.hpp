#pragma once
// Run configuration: a line-oriented "key = value" file with [section]
// headers. Keys are addressed as "section.key"; '#' starts a comment.
//
//   [model]  bev_sizes channels width heads encoder_channels encoder_stem
//            xi aug_mode residual classes
//   [loss]   lambda focal_gamma focal_alpha
//   [optim]  lr beta1 beta2 weight_decay iterations batch_size stop_iou
//            log_every
//   [data]   dir samples holdout views image_height image_width objects
//            extent rig pgm
//   [run]    seed drop_views out checkpoint split
//
// Lists are comma separated. Booleans accept on/off.

#include <array>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bevx/attention.hpp"
#include "bevx/decoder.hpp"
#include "bevx/objective.hpp"
#include "bevx/optim.hpp"

namespace bevx {

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& field, const std::string& what)
      : std::invalid_argument("config: " + field + ": " + what), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

enum class Split { Train, Holdout, All };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Holdout: return "holdout";
    case Split::All: return "all";
  }
  return "?";
}

struct RunConfig {
  ModelConfig model;
  LossWeights loss;
  AdamWOptions optim;
  std::size_t iterations = 2000;
  std::size_t batch_size = 8;
  double stop_iou = 0.0;  // stop once training IoU reaches this; 0 disables
  std::size_t log_every = 1;

  std::string data_dir = "data";
  std::size_t samples = 8;
  std::size_t holdout = 0;  // last `holdout` samples are held out
  std::size_t views = 6;
  std::size_t image_height = 32;
  std::size_t image_width = 64;
  std::size_t objects = 6;
  std::string rig_file;  // empty: generated surround rig
  bool pgm = false;

  std::uint64_t seed = 0;
  std::vector<std::size_t> drop_views;
  std::string out = "out";
  std::string checkpoint;  // empty: <out>/checkpoint.bevx
  Split split = Split::Train;

  std::string checkpoint_path() const { return checkpoint.empty() ? out + "/checkpoint.bevx" : checkpoint; }

  /// BEV cell size implied by the extent and final map size.
  double resolution() const { return 2.0 * model.extent / static_cast<double>(2 * model.bev_sizes.back()); }

  std::vector<bool> keep_mask() const {
    std::vector<bool> keep(views, true);
    for (std::size_t v : drop_views) keep.at(v) = false;
    return keep;
  }

  void validate() const;
  void set(const std::string& key, const std::string& value);
  std::string to_text() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  const std::string v = trim(text);
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    throw ConfigError(key, "cannot parse '" + v + "' as a number");
  }
  return out;
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  if (trim(text).empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(key, item));
  return out;
}

inline bool parse_switch(const std::string& key, const std::string& text) {
  const std::string v = trim(text);
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ConfigError(key, "expected on/off, got '" + v + "'");
}

/// Shortest text that parses back to the same double.
inline std::string num(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <class T>
std::string join(const T& values) {
  std::string out;
  for (const auto& v : values) {
    if (!out.empty()) out += ',';
    if constexpr (std::is_floating_point_v<std::decay_t<decltype(v)>>) {
      out += num(v);
    } else {
      out += std::to_string(v);
    }
  }
  return out;
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T, class Fn>
Field number_field(Fn member) {
  return {[member](RunConfig& c, const std::string& k, const std::string& v) {
            member(c) = parse_number<T>(k, v);
          },
          [member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return num(member(c));
            } else {
              return std::to_string(member(c));
            }
          }};
}

template <class T, class Fn>
Field list_field(Fn member) {
  return {[member](RunConfig& c, const std::string& k, const std::string& v) {
            auto values = parse_list<T>(k, v);
            auto& dst = member(c);
            if constexpr (requires { dst.resize(0); }) {
              dst.assign(values.begin(), values.end());
            } else {
              if (values.size() != dst.size()) {
                throw ConfigError(k, "expected " + std::to_string(dst.size()) + " values, got " +
                                         std::to_string(values.size()));
              }
              std::copy(values.begin(), values.end(), dst.begin());
            }
          },
          [member](const RunConfig& c) { return join(member(c)); }};
}

inline Field text_field(std::string RunConfig::*m) {
  return {[m](RunConfig& c, const std::string&, const std::string& v) { c.*m = trim(v); },
          [m](const RunConfig& c) { return c.*m; }};
}

/// Ordered so the text echo groups keys by section.
inline const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"model.bev_sizes", list_field<std::size_t>([](auto& c) -> auto& { return c.model.bev_sizes; })},
      {"model.channels", list_field<std::size_t>([](auto& c) -> auto& { return c.model.channels; })},
      {"model.width", number_field<std::size_t>([](auto& c) -> auto& { return c.model.width; })},
      {"model.heads", number_field<std::size_t>([](auto& c) -> auto& { return c.model.heads; })},
      {"model.encoder_channels",
       list_field<std::size_t>([](auto& c) -> auto& { return c.model.encoder_channels; })},
      {"model.encoder_stem", number_field<std::size_t>([](auto& c) -> auto& { return c.model.encoder_stem; })},
      {"model.xi", number_field<double>([](auto& c) -> auto& { return c.model.xi; })},
      {"model.aug_mode",
       {[](RunConfig& c, const std::string& k, const std::string& v) {
          try {
            c.model.mode = parse_aug_mode(trim(v));
          } catch (const std::invalid_argument&) {
            throw ConfigError(k, "expected all, per-view, per-token or off, got '" + trim(v) + "'");
          }
        },
        [](const RunConfig& c) { return std::string(to_string(c.model.mode)); }}},
      {"model.residual",
       {[](RunConfig& c, const std::string& k, const std::string& v) { c.model.residual = parse_switch(k, v); },
        [](const RunConfig& c) { return std::string(c.model.residual ? "on" : "off"); }}},
      {"model.classes", number_field<std::size_t>([](auto& c) -> auto& { return c.model.classes; })},
      {"loss.lambda", list_field<double>([](auto& c) -> auto& { return c.loss.lambda; })},
      {"loss.focal_gamma", number_field<double>([](auto& c) -> auto& { return c.loss.focal_gamma; })},
      {"loss.focal_alpha", number_field<double>([](auto& c) -> auto& { return c.loss.focal_alpha; })},
      {"optim.lr", number_field<double>([](auto& c) -> auto& { return c.optim.lr; })},
      {"optim.beta1", number_field<double>([](auto& c) -> auto& { return c.optim.beta1; })},
      {"optim.beta2", number_field<double>([](auto& c) -> auto& { return c.optim.beta2; })},
      {"optim.weight_decay", number_field<double>([](auto& c) -> auto& { return c.optim.weight_decay; })},
      {"optim.iterations", number_field<std::size_t>([](auto& c) -> auto& { return c.iterations; })},
      {"optim.batch_size", number_field<std::size_t>([](auto& c) -> auto& { return c.batch_size; })},
      {"optim.stop_iou", number_field<double>([](auto& c) -> auto& { return c.stop_iou; })},
      {"optim.log_every", number_field<std::size_t>([](auto& c) -> auto& { return c.log_every; })},
      {"data.dir", text_field(&RunConfig::data_dir)},
      {"data.samples", number_field<std::size_t>([](auto& c) -> auto& { return c.samples; })},
      {"data.holdout", number_field<std::size_t>([](auto& c) -> auto& { return c.holdout; })},
      {"data.views", number_field<std::size_t>([](auto& c) -> auto& { return c.views; })},
      {"data.image_height", number_field<std::size_t>([](auto& c) -> auto& { return c.image_height; })},
      {"data.image_width", number_field<std::size_t>([](auto& c) -> auto& { return c.image_width; })},
      {"data.objects", number_field<std::size_t>([](auto& c) -> auto& { return c.objects; })},
      {"data.extent", number_field<double>([](auto& c) -> auto& { return c.model.extent; })},
      {"data.rig", text_field(&RunConfig::rig_file)},
      {"data.pgm",
       {[](RunConfig& c, const std::string& k, const std::string& v) { c.pgm = parse_switch(k, v); },
        [](const RunConfig& c) { return std::string(c.pgm ? "on" : "off"); }}},
      {"run.seed",
       {[](RunConfig& c, const std::string& k, const std::string& v) {
          c.seed = parse_number<std::uint64_t>(k, v);
          c.model.seed = c.seed;
        },
        [](const RunConfig& c) { return std::to_string(c.seed); }}},
      {"run.drop_views", list_field<std::size_t>([](auto& c) -> auto& { return c.drop_views; })},
      {"run.out", text_field(&RunConfig::out)},
      {"run.checkpoint", text_field(&RunConfig::checkpoint)},
      {"run.split",
       {[](RunConfig& c, const std::string& k, const std::string& v) {
          const std::string s = trim(v);
          if (s == "train") c.split = Split::Train;
          else if (s == "holdout") c.split = Split::Holdout;
          else if (s == "all") c.split = Split::All;
          else throw ConfigError(k, "expected train, holdout or all, got '" + s + "'");
        },
        [](const RunConfig& c) { return std::string(to_string(c.split)); }}},
  };
  return table;
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& [name, field] : detail::fields()) {
    if (name == key) {
      field.set(*this, key, value);
      return;
    }
  }
  throw ConfigError(key, "unknown key");
}

inline std::string RunConfig::to_text() const {
  std::ostringstream os;
  std::string section;
  for (const auto& [name, field] : detail::fields()) {
    const auto dot = name.find('.');
    const std::string sec = name.substr(0, dot);
    if (sec != section) {
      os << (section.empty() ? "" : "\n") << '[' << sec << "]\n";
      section = sec;
    }
    os << name.substr(dot + 1) << " = " << field.get(*this) << '\n';
  }
  return os.str();
}

inline void RunConfig::validate() const {
  auto need = [](bool ok, const char* field, const std::string& what) {
    if (!ok) throw ConfigError(field, what);
  };
  need(model.bev_sizes.size() == kLevels, "model.bev_sizes", "exactly 3 sizes required");
  need(model.channels.size() == kLevels, "model.channels", "exactly 3 widths required");
  for (std::size_t i = 0; i < kLevels; ++i) {
    need(model.bev_sizes[i] > 0, "model.bev_sizes", "sizes must be positive");
    need(i == 0 || model.bev_sizes[i] > model.bev_sizes[i - 1], "model.bev_sizes", "sizes must strictly increase");
    need(model.channels[i] == model.width, "model.channels", "every level width must equal model.width");
    need(model.encoder_channels[i] > 0, "model.encoder_channels", "widths must be positive");
  }
  need(model.width > 0, "model.width", "must be positive");
  need(model.heads > 0 && model.width % model.heads == 0, "model.heads", "must divide model.width");
  need(model.encoder_stem > 0, "model.encoder_stem", "must be positive");
  need(model.xi >= 0.0 && std::isfinite(model.xi), "model.xi", "must be finite and >= 0");
  need(model.classes > 0, "model.classes", "must be positive");
  for (double l : loss.lambda) need(l >= 0.0 && std::isfinite(l), "loss.lambda", "weights must be >= 0");
  need(loss.lambda[0] + loss.lambda[1] + loss.lambda[2] + loss.lambda[3] > 0.0, "loss.lambda",
       "at least one weight must be positive");
  need(loss.focal_gamma >= 0.0, "loss.focal_gamma", "must be >= 0");
  need(loss.focal_alpha >= 0.0 && loss.focal_alpha <= 1.0, "loss.focal_alpha", "must be in [0,1]");
  need(optim.lr > 0.0 && std::isfinite(optim.lr), "optim.lr", "must be positive");
  need(optim.beta1 >= 0.0 && optim.beta1 < 1.0, "optim.beta1", "must be in [0,1)");
  need(optim.beta2 >= 0.0 && optim.beta2 < 1.0, "optim.beta2", "must be in [0,1)");
  need(optim.weight_decay >= 0.0, "optim.weight_decay", "must be >= 0");
  need(batch_size > 0, "optim.batch_size", "must be positive");
  need(stop_iou >= 0.0 && stop_iou <= 1.0, "optim.stop_iou", "must be in [0,1]");
  need(log_every > 0, "optim.log_every", "must be positive");
  need(!data_dir.empty(), "data.dir", "must not be empty");
  need(holdout <= samples, "data.holdout", "cannot exceed data.samples");
  need(views > 0, "data.views", "must be positive");
  need(image_height > 0 && image_height % 16 == 0, "data.image_height", "must be a positive multiple of 16");
  need(image_width > 0 && image_width % 16 == 0, "data.image_width", "must be a positive multiple of 16");
  need(model.extent > 0.0 && std::isfinite(model.extent), "data.extent", "must be positive");
  for (std::size_t v : drop_views) need(v < views, "run.drop_views", "view index out of range");
  need(drop_views.size() < views || views == 0, "run.drop_views", "at least one view must be kept");
  need(!out.empty(), "run.out", "must not be empty");
}

/// Applies "key = value" lines under [section] headers on top of `base`.
inline RunConfig parse_config(std::istream& is, RunConfig base = {}) {
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno), "unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno), "expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    base.set(section.empty() ? key : section + "." + key, line.substr(eq + 1));
  }
  return base;
}

inline RunConfig parse_config_text(const std::string& text, RunConfig base = {}) {
  std::istringstream is(text);
  return parse_config(is, std::move(base));
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("--config", "cannot open " + path);
  return parse_config(f);
}

}  // namespace bevx
