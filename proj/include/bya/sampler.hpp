#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bya/model.hpp"

namespace bya {

enum class RouterMode { pre, post, intra };

std::string to_string(RouterMode mode);
/// ConfigError on anything but pre, post or intra.
RouterMode router_mode_from_string(const std::string& name);

/// eps_uncond + scale * (eps_cond - eps_uncond).
template <typename S>
Matrix<S> cfg_combine(const Matrix<S>& eps_uncond, const Matrix<S>& eps_cond, double scale);
Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double scale);

struct SampleRequest {
  RouterMode mode = RouterMode::intra;
  int steps = 50;
  double cfg_scale = 7.0;
  ClipConditions conditions;
  std::optional<AssignmentMatrix> a_ac;
  /// Used to predict A^ac with the correlation scorer when `a_ac` is absent.
  std::optional<ScorerInput> alignment;
  std::uint64_t seed = 0;
  double theta = 0.6;
  int refine_iters = 64;
  bool use_audio = true;
  /// Conditions the conditional branch keeps; the unconditional branch drops all.
  ConditionSet keep;
  /// False when the checkpoint predates router training.
  bool router_trained = true;
};

struct SampleResult {
  RouterMode mode = RouterMode::intra;
  Tensor video_latent;  // T' x 3 x H' x W' in [0,1] (not clamped)
  Tensor view;          // T x 3 x H x W u8
  std::vector<RoutingMask> masks;  // per step of the final pass, in sampling order
  int nfe = 0;
  AssignmentMatrix a_ac;
  std::uint64_t seed = 0;
};

/// Strided timesteps, largest first: floor(k * T / steps) for k = steps-1 .. 0.
std::vector<int> sampling_timesteps(int diffusion_steps, int steps);

/// Guided ancestral sampling with the router strategy of `req.mode`.
SampleResult sample(Model<float>& model, const SampleRequest& req, const NoiseSchedule& schedule);

/// Clamp to [0,1], nearest upsample by `factor`, round half up to u8.
Tensor decode_for_view(const Tensor& video_latent, int factor);

/// video.byat, view.u8.byat, masks_step{k}.byat and result.json.
void write_sample(const SampleResult& result, const std::filesystem::path& dir);
std::string sample_result_json(const SampleResult& result);

}  // namespace bya
