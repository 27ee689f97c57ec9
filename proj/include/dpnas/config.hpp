#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "dpnas/compile.hpp"
#include "dpnas/errors.hpp"
#include "dpnas/nsc.hpp"

namespace dpnas {

inline OpType op_from_name(const std::string& s) {
  for (OpType t : {OpType::kConvolution, OpType::kDownsampling,
                   OpType::kUpsampling, OpType::kIdentity,
                   OpType::kElementalAdd, OpType::kConcat, OpType::kTerminal1,
                   OpType::kTerminal2})
    if (s == op_name(t)) return t;
  throw ParseError("unknown op name '" + s + "'");
}

// Resolved run configuration. Defaults are the desk-scale setup; every field
// is overridable from a JSON file (unknown keys are rejected) and the full
// resolved set echoes back out so runs are auditable.
struct SearchConfig {
  // problem
  double noise_sigma = 25.0;  // 0-255 scale
  int image_size = 32;
  int image_channels = 1;
  int patch = 32;
  int train_images = 64;
  int val_images = 8;
  int test_images = 64;
  std::string data_dir;  // empty = procedural images

  // search space
  int base_width = 8;
  int max_layers = 8;
  DmmMode dmm_mode = DmmMode::kFull;
  int spatial_floor = 2;
  int spatial_ceiling_factor = 4;  // cap = factor * image spatial; 0 = off
  int channel_cap_factor = 8;      // cap = factor * base_width; 0 = off
  std::vector<std::string> allowed_ops;  // empty = all

  // agent
  int episodes = 200;
  double mu = 0.5;
  std::string reward_mode = "penalized";  // or "psnr_only"
  double alpha = 0.01;
  double gamma = 1.0;
  int update_batch = 64;
  int update_start = 50;
  int replay_capacity = 2000;
  std::string selection = "reward";  // or "psnr"
  int top_k = 10;
  bool surrogate = false;

  // candidate training
  int candidate_budget = 2000;
  int early_stop_interval = 50;
  int early_stop_patience = 5;
  double candidate_lr = 1e-3;
  int batch_size = 4;

  // full training
  int k = 2;
  int full_train_iters = 2000;
  int steps_per_epoch = 7;
  double full_lr = 1e-3;
  int metrics_interval = 100;

  // run plumbing
  int workers = 1;
  std::uint64_t seed = 1;
  int checkpoint_interval = 0;  // episodes between search checkpoints; 0 = end only
  std::string precision = "f32";  // or "f64"

  double effective_mu() const {
    return reward_mode == "psnr_only" ? 0.0 : mu;
  }

  SearchSpace search_space() const {
    SearchSpace s;
    s.max_layers = max_layers;
    s.base_width = base_width;
    s.image_channels = image_channels;
    s.spatial_floor = spatial_floor;
    s.channel_cap = channel_cap_factor > 0 ? channel_cap_factor * base_width : 0;
    s.spatial_cap =
        spatial_ceiling_factor > 0 ? spatial_ceiling_factor * image_size : 0;
    if (!allowed_ops.empty()) {
      s.allowed.clear();
      for (const auto& nm : allowed_ops) s.allowed.insert(op_from_name(nm));
    }
    return s;
  }

  void check() const {
    if (patch > image_size)
      throw ValidationError("patch must not exceed image_size");
    if (episodes < 1) throw ValidationError("episodes must be >= 1");
    if (k < 1) throw ValidationError("K must be >= 1");
    if (workers < 1) throw ValidationError("workers must be >= 1");
    if (reward_mode != "penalized" && reward_mode != "psnr_only")
      throw ValidationError("reward_mode must be penalized or psnr_only");
    if (selection != "reward" && selection != "psnr")
      throw ValidationError("selection must be reward or psnr");
    if (precision != "f32" && precision != "f64")
      throw ValidationError("precision must be f32 or f64");
  }
};

inline nlohmann::json config_to_json(const SearchConfig& c) {
  return {
      {"noise_sigma", c.noise_sigma},
      {"image_size", c.image_size},
      {"image_channels", c.image_channels},
      {"patch", c.patch},
      {"train_images", c.train_images},
      {"val_images", c.val_images},
      {"test_images", c.test_images},
      {"data_dir", c.data_dir},
      {"base_width", c.base_width},
      {"max_layers", c.max_layers},
      {"dmm_mode", dmm_mode_name(c.dmm_mode)},
      {"spatial_floor", c.spatial_floor},
      {"spatial_ceiling_factor", c.spatial_ceiling_factor},
      {"channel_cap_factor", c.channel_cap_factor},
      {"allowed_ops", c.allowed_ops},
      {"episodes", c.episodes},
      {"mu", c.mu},
      {"reward_mode", c.reward_mode},
      {"alpha", c.alpha},
      {"gamma", c.gamma},
      {"update_batch", c.update_batch},
      {"update_start", c.update_start},
      {"replay_capacity", c.replay_capacity},
      {"selection", c.selection},
      {"top_k", c.top_k},
      {"surrogate", c.surrogate},
      {"candidate_budget", c.candidate_budget},
      {"early_stop", {{"interval", c.early_stop_interval},
                      {"patience", c.early_stop_patience}}},
      {"candidate_lr", c.candidate_lr},
      {"batch_size", c.batch_size},
      {"K", c.k},
      {"full_train_iters", c.full_train_iters},
      {"steps_per_epoch", c.steps_per_epoch},
      {"full_lr", c.full_lr},
      {"metrics_interval", c.metrics_interval},
      {"workers", c.workers},
      {"seed", c.seed},
      {"checkpoint_interval", c.checkpoint_interval},
      {"precision", c.precision},
  };
}

inline SearchConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("config: expected an object");
  SearchConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "noise_sigma") c.noise_sigma = v.get<double>();
      else if (key == "image_size") c.image_size = v.get<int>();
      else if (key == "image_channels") c.image_channels = v.get<int>();
      else if (key == "patch") c.patch = v.get<int>();
      else if (key == "train_images") c.train_images = v.get<int>();
      else if (key == "val_images") c.val_images = v.get<int>();
      else if (key == "test_images") c.test_images = v.get<int>();
      else if (key == "data_dir") c.data_dir = v.get<std::string>();
      else if (key == "base_width") c.base_width = v.get<int>();
      else if (key == "max_layers") c.max_layers = v.get<int>();
      else if (key == "dmm_mode")
        c.dmm_mode = dmm_mode_from_name(v.get<std::string>());
      else if (key == "spatial_floor") c.spatial_floor = v.get<int>();
      else if (key == "spatial_ceiling_factor")
        c.spatial_ceiling_factor = v.get<int>();
      else if (key == "channel_cap_factor")
        c.channel_cap_factor = v.get<int>();
      else if (key == "allowed_ops") {
        c.allowed_ops = v.get<std::vector<std::string>>();
        for (const auto& nm : c.allowed_ops) op_from_name(nm);
      } else if (key == "episodes") c.episodes = v.get<int>();
      else if (key == "mu") c.mu = v.get<double>();
      else if (key == "reward_mode") c.reward_mode = v.get<std::string>();
      else if (key == "alpha") c.alpha = v.get<double>();
      else if (key == "gamma") c.gamma = v.get<double>();
      else if (key == "update_batch") c.update_batch = v.get<int>();
      else if (key == "update_start") c.update_start = v.get<int>();
      else if (key == "replay_capacity") c.replay_capacity = v.get<int>();
      else if (key == "selection") c.selection = v.get<std::string>();
      else if (key == "top_k") c.top_k = v.get<int>();
      else if (key == "surrogate") c.surrogate = v.get<bool>();
      else if (key == "candidate_budget") c.candidate_budget = v.get<int>();
      else if (key == "early_stop") {
        if (!v.is_object()) throw ParseError("early_stop must be an object");
        for (const auto& [ek, ev] : v.items()) {
          if (ek == "interval") c.early_stop_interval = ev.get<int>();
          else if (ek == "patience") c.early_stop_patience = ev.get<int>();
          else throw ParseError("unknown early_stop key '" + ek + "'");
        }
      } else if (key == "candidate_lr") c.candidate_lr = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "K") c.k = v.get<int>();
      else if (key == "full_train_iters") c.full_train_iters = v.get<int>();
      else if (key == "steps_per_epoch") c.steps_per_epoch = v.get<int>();
      else if (key == "full_lr") c.full_lr = v.get<double>();
      else if (key == "metrics_interval") c.metrics_interval = v.get<int>();
      else if (key == "workers") c.workers = v.get<int>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "checkpoint_interval")
        c.checkpoint_interval = v.get<int>();
      else if (key == "precision") c.precision = v.get<std::string>();
      else throw ParseError("unknown config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("config key '" + key + "': " + e.what());
    }
  }
  c.check();
  return c;
}

inline SearchConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open for reading: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("config '" + path + "': " + e.what());
  }
  return config_from_json(j);
}

}  // namespace dpnas
