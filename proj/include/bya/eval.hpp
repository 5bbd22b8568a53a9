#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "bya/config.hpp"
#include "bya/sampler.hpp"

namespace bya {

struct EvalOptions {
  RouterMode mode = RouterMode::intra;
  int steps = 50;
  double cfg_scale = 7.0;
  double theta = 0.6;
  int refine_iters = 64;
  bool use_audio = true;
  bool router_trained = true;
  double face_noise = 0.3;
  int diffusion_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::uint64_t seed = 0;

  static EvalOptions from_config(const Config& config);
};

struct ClipMetrics {
  std::string name;
  TrajectoryKind kind = TrajectoryKind::still;
  std::vector<double> mask_iou;  // per character
  double routing_accuracy = 0.0;     // 1 when the generated video scores to GT A^ac
  double routing_accuracy_gt = 0.0;  // same scorer on the ground-truth video
  double sync_proxy_margin = 0.0;
  double eps_mse = 0.0;
  int nfe = 0;
};

struct EvalReport {
  RouterMode mode = RouterMode::intra;
  std::vector<ClipMetrics> clips;
  std::vector<double> mask_iou;  // per character, mean over clips
  double routing_accuracy = 0.0;
  double routing_accuracy_gt = 0.0;
  double sync_proxy_margin = 0.0;
  double sync_positive_fraction = 0.0;
  double eps_mse = 0.0;
};

/// IoU per character between argmax of the mask's layer mean and the
/// downsampled ground-truth labels over the whole token grid.
std::vector<double> mask_iou(const RoutingMask& mask, const std::vector<int>& truth);

/// Mean over characters of corr(mouth brightness, assigned envelope) minus
/// corr(mouth brightness, the other envelope). `video` is pixels or latent
/// cells of `pixel_scale` pixels.
double sync_proxy_margin(const ClipRecord& clip, const Tensor& video, int pixel_scale);

/// 1 when the correlation scorer on `video` recovers the clip's A^ac.
double routing_accuracy(const ClipRecord& clip, const Tensor& video, int pixel_scale);

/// Noise-prediction MSE at a seeded timestep with ground-truth gates.
double eps_mse(Model<float>& model, const ClipRecord& clip, const ClipConditions& cond, const EvalOptions& opt, std::uint64_t seed);

/// Generates with GT A^ac and scores one clip. Single-character clips are
/// replicated to the model's character count first.
ClipMetrics evaluate_clip(Model<float>& model, const ClipRecord& clip, const EvalOptions& opt, std::uint64_t seed,
                          const std::string& name);

/// Aggregates are plain means of the per-clip entries.
EvalReport aggregate(RouterMode mode, std::vector<ClipMetrics> clips);

/// Evaluates every clip of a split; InputError when the split is empty.
EvalReport evaluate(Model<float>& model, const DatasetManifest& manifest, const std::string& split, const EvalOptions& opt,
                    const std::function<void(const ClipMetrics&)>& on_clip = {});

std::string eval_report_json(const EvalReport& report);

}  // namespace bya
