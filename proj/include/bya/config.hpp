#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include "bya/model.hpp"
#include "bya/router_net.hpp"

namespace bya {

struct TrainConfig {
  double lr = 1e-5;
  int batch = 16;
  std::uint64_t seed = 0;
  std::array<int, 3> stage_steps = {500, 2000, 1000};
  double stage1_inpaint_drop = 0.5;
  double dynamic_mask_rate = 0.5;
  double dynamic_mask_kappa = 1.0;
  /// Independent drop rate of each of ref, inpaint, audio and text in stages 2-3.
  double condition_drop = 0.05;
  double teacher_p_drop = 0.1;
  double teacher_sigma = 0.05;
  double router_loss_weight = 1.0;
  double grad_clip = 1.0;
  double face_noise = 0.3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct SampleConfig {
  std::string mode = "intra";
  int steps = 50;
  double cfg_scale = 7.0;
  double theta = 0.6;
  int refine_iters = 64;
  int diffusion_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::uint64_t seed = 0;
};

struct DataConfig {
  std::string manifest;
};

struct Config {
  DataConfig data;
  ModelConfig model;
  RouterLossWeights loss;
  bool loss_mean = false;
  TrainConfig train;
  SampleConfig sample;
};

/// Flat `section.key = value` lines; `#` starts a comment. Unknown keys and
/// malformed values raise ConfigError, as does a data path that does not exist.
Config parse_config(const std::string& text);
Config load_config(const std::filesystem::path& path);
/// Every key with its current value, in the same format.
std::string dump_config(const Config& config);

}  // namespace bya
