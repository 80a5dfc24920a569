#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

#include "lcp/bev.hpp"
#include "lcp/common.hpp"
#include "lcp/model.hpp"
#include "lcp/scenarios.hpp"
#include "lcp/synthgen.hpp"
#include "lcp/train.hpp"

namespace lcp {

// Everything a run needs, loadable from a plain-text key-value file
// (`key = value`, one per line, '#' starts a comment).  Command-line flags
// overlay individual fields afterwards.
struct RunConfig {
  std::uint64_t seed = 1;
  ProblemConfig problem;
  BevSpec bev;
  TrainConfig train;
  CurriculumSchedule curriculum;
  SceneRecipe synth;
  int synth_recordings = 1;

  // Model geometry overrides; the feature-map split defaults derive from
  // the raster extents when unset.
  std::size_t model_channels = 16;
  std::size_t model_cls_hidden = 128;
  std::size_t model_reg_hidden = 512;
  double model_dropout = 0.5;
  std::optional<std::size_t> model_front_rows;
  std::optional<std::size_t> model_right_cols;
};

inline ModelConfig make_model_config(const RunConfig& c) {
  ModelConfig mc = derive_model_config(c.problem, c.bev);
  mc.channels = c.model_channels;
  mc.cls_hidden = c.model_cls_hidden;
  mc.reg_hidden = c.model_reg_hidden;
  mc.dropout = c.model_dropout;
  if (c.model_front_rows) mc.front_rows = *c.model_front_rows;
  if (c.model_right_cols) mc.right_cols = *c.model_right_cols;
  mc.validate();
  return mc;
}

namespace detail {

inline double config_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  require(r.ec == std::errc() && r.ptr == v.data() + v.size(),
          ErrorKind::Config,
          "config key '" + std::string(key) + "': expected number, got '" +
              std::string(v) + "'");
  return out;
}

inline long long config_int(std::string_view key, std::string_view v) {
  long long out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  require(r.ec == std::errc() && r.ptr == v.data() + v.size(),
          ErrorKind::Config,
          "config key '" + std::string(key) + "': expected integer, got '" +
              std::string(v) + "'");
  return out;
}

inline std::uint64_t config_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  require(r.ec == std::errc() && r.ptr == v.data() + v.size(),
          ErrorKind::Config,
          "config key '" + std::string(key) +
              "': expected unsigned integer, got '" + std::string(v) + "'");
  return out;
}

inline bool config_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(ErrorKind::Config, "config key '" + std::string(key) +
                              "': expected true/false, got '" +
                              std::string(v) + "'");
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t'))
    s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' ||
                        s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

}  // namespace detail

// Apply one key-value pair; unknown keys are configuration errors so typos
// cannot silently fall back to defaults.
inline void apply_config_key(RunConfig& c, std::string_view key,
                             std::string_view value) {
  using detail::config_bool;
  using detail::config_double;
  using detail::config_int;
  using detail::config_u64;
  auto positive_size = [&](std::string_view k, std::string_view v) {
    const long long n = config_int(k, v);
    require(n >= 1, ErrorKind::Config,
            "config key '" + std::string(k) + "': must be >= 1");
    return static_cast<std::size_t>(n);
  };
  if (key == "seed") c.seed = config_u64(key, value);
  else if (key == "problem.t_pw") c.problem.t_pw = config_double(key, value);
  else if (key == "problem.t_obs") c.problem.t_obs = config_double(key, value);
  else if (key == "problem.fps") c.problem.fps = config_double(key, value);
  else if (key == "bev.long_px")
    c.bev.long_px = positive_size(key, value);
  else if (key == "bev.lat_px")
    c.bev.lat_px = positive_size(key, value);
  else if (key == "bev.long_range")
    c.bev.long_range = config_double(key, value);
  else if (key == "bev.lat_range")
    c.bev.lat_range = config_double(key, value);
  else if (key == "model.channels")
    c.model_channels = positive_size(key, value);
  else if (key == "model.cls_hidden")
    c.model_cls_hidden = positive_size(key, value);
  else if (key == "model.reg_hidden")
    c.model_reg_hidden = positive_size(key, value);
  else if (key == "model.dropout")
    c.model_dropout = config_double(key, value);
  else if (key == "model.front_rows")
    c.model_front_rows = positive_size(key, value);
  else if (key == "model.right_cols")
    c.model_right_cols = positive_size(key, value);
  else if (key == "train.learning_rate")
    c.train.adam.lr = config_double(key, value);
  else if (key == "train.batch_size")
    c.train.batch_size = positive_size(key, value);
  else if (key == "train.max_epochs")
    c.train.max_epochs = static_cast<int>(config_int(key, value));
  else if (key == "train.patience")
    c.train.patience = static_cast<int>(config_int(key, value));
  else if (key == "train.min_epochs")
    c.train.min_epochs = static_cast<int>(config_int(key, value));
  else if (key == "train.curriculum")
    c.curriculum.enabled = config_bool(key, value);
  else if (key == "synth.recordings")
    c.synth_recordings = static_cast<int>(positive_size(key, value));
  else if (key == "synth.n_lanes")
    c.synth.n_lanes = static_cast<int>(positive_size(key, value));
  else if (key == "synth.lane_width")
    c.synth.lane_width = config_double(key, value);
  else if (key == "synth.road_length")
    c.synth.road_length = config_double(key, value);
  else if (key == "synth.duration")
    c.synth.duration = config_double(key, value);
  else if (key == "synth.arrival_rate")
    c.synth.arrival_rate = config_double(key, value);
  else if (key == "synth.speed_min")
    c.synth.speed_min = config_double(key, value);
  else if (key == "synth.speed_max")
    c.synth.speed_max = config_double(key, value);
  else if (key == "synth.lc_fraction")
    c.synth.lc_fraction = config_double(key, value);
  else if (key == "synth.lc_duration_min")
    c.synth.lc_duration_min = config_double(key, value);
  else if (key == "synth.lc_duration_max")
    c.synth.lc_duration_max = config_double(key, value);
  else
    fail(ErrorKind::Config, "unknown config key '" + std::string(key) + "'");
}

inline void load_run_config(const std::filesystem::path& path, RunConfig& c) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::Io, "cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view s = detail::trim(line);
    if (const std::size_t hash = s.find('#'); hash != std::string_view::npos)
      s = detail::trim(s.substr(0, hash));
    if (s.empty()) continue;
    const std::size_t eq = s.find('=');
    require(eq != std::string_view::npos, ErrorKind::Config,
            path.string() + ":" + std::to_string(line_no) +
                ": expected 'key = value'");
    apply_config_key(c, detail::trim(s.substr(0, eq)),
                     detail::trim(s.substr(eq + 1)));
  }
}

// Effective-configuration snapshot for run manifests.
inline nlohmann::json config_json(const RunConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["problem"] = {{"t_pw", c.problem.t_pw},
                  {"t_obs", c.problem.t_obs},
                  {"fps", c.problem.fps}};
  j["bev"] = {{"long_px", c.bev.long_px},
              {"lat_px", c.bev.lat_px},
              {"long_range", c.bev.long_range},
              {"lat_range", c.bev.lat_range}};
  const ModelConfig mc = make_model_config(c);
  j["model"] = {{"channels", mc.channels},
                {"in_channels", mc.in_channels},
                {"feat_rows", mc.feat_rows},
                {"feat_cols", mc.feat_cols},
                {"front_rows", mc.front_rows},
                {"right_cols", mc.right_cols},
                {"cls_hidden", mc.cls_hidden},
                {"reg_hidden", mc.reg_hidden},
                {"dropout", mc.dropout}};
  j["train"] = {{"learning_rate", c.train.adam.lr},
                {"batch_size", c.train.batch_size},
                {"max_epochs", c.train.max_epochs},
                {"patience", c.train.patience},
                {"min_epochs", c.train.min_epochs},
                {"curriculum", c.curriculum.enabled}};
  j["synth"] = {{"recordings", c.synth_recordings},
                {"n_lanes", c.synth.n_lanes},
                {"lane_width", c.synth.lane_width},
                {"road_length", c.synth.road_length},
                {"duration", c.synth.duration},
                {"arrival_rate", c.synth.arrival_rate},
                {"speed_min", c.synth.speed_min},
                {"speed_max", c.synth.speed_max},
                {"lc_fraction", c.synth.lc_fraction},
                {"lc_duration_min", c.synth.lc_duration_min},
                {"lc_duration_max", c.synth.lc_duration_max}};
  return j;
}

}  // namespace lcp
