#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "bya/conditioning.hpp"
#include "bya/denoiser.hpp"
#include "bya/mask_algebra.hpp"
#include "bya/router_net.hpp"

namespace bya {

/// Sizes of every sub-network; `sync` derives the dependent fields from the
/// denoiser and clip dimensions so the pieces agree.
struct ModelConfig {
  DiTConfig dit;
  ConditioningConfig cond;
  RouterConfig router;
  int spatial_factor = 4;

  void sync();
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

template <typename S>
struct Model {
  ModelConfig cfg;
  ParamStore<S> store;
  DenoiserParams<S> dit;
  AudioEncoderParams<S> audio;
  FaceEncoderParams<S> face;
  TextParams<S> text;
  RouterParams<S> router;
};

template <typename S>
Model<S> build_model(ModelConfig cfg, std::uint64_t seed);

/// Checkpoint with the model configuration stored in its metadata.
template <typename S>
void save_model(const Model<S>& model, const std::filesystem::path& dir, int stage);
/// Rebuilds the model from the stored configuration and loads its values.
Model<float> load_model(const std::filesystem::path& dir, int* stage = nullptr);

/// Which conditions a sample keeps. A dropped reference removes both the
/// reference latent and the face embedding.
struct ConditionSet {
  bool text = true;
  bool ref = true;
  bool audio = true;
  bool inpaint = true;

  bool operator==(const ConditionSet&) const = default;
};

/// Diffusion runs on latents mapped from [0,1] to [-1,1].
Tensor to_diffusion_space(const Tensor& latent01);
Tensor from_diffusion_space(const Tensor& latent);

/// A clip's conditioning inputs in model form.
struct ClipConditions {
  Tensor refs;         // n x 3 x R x R, background removed
  Tensor audio_feats;  // n x T_a x d_a
  Tensor inpaint_frame;   // 3 x H x W pixels, rank 0 when absent
  Tensor inpaint_latent;  // T' x 3 x H' x W' (frame 0 only) or zeros
  Tensor ref_latent;      // T' x 3 x H' x W' (frame 0 only)
  int prompt_id = 0;
};

ClipConditions clip_conditions(const ClipRecord& clip, int spatial_factor, double face_noise, std::mt19937_64& rng);

/// Embedded conditions on a tape; dropped ones use the learned null rows.
/// `use_audio` false leaves the audio list empty (the audio step is skipped).
template <typename S>
DenoiserInputs<S> encode_conditions(Model<S>& model, Tape<S>& tape, const ClipConditions& cond, const ConditionSet& keep,
                                    bool use_audio);

/// T' x (3 + 6) x H' x W' denoiser input from a noisy latent and conditions.
Tensor model_input(const Tensor& noisy, const ClipConditions& cond, const ConditionSet& keep);

/// Face gate = character rows of the layer's mask; audio gate = A^ac times
/// those rows, inflated first when `inflate` is set.
template <typename S>
LayerGates<S> gates_from_mask(const RoutingMask& mask, int layer, const AssignmentMatrix& a_ac, bool inflate);

/// Two-character copy of a single-character clip: every per-character input
/// duplicated, A^ac = identity.
ClipRecord replicate_characters(const ClipRecord& clip, int characters);

/// Router target per token: one-hot argmax of ground-truth coverage; for a
/// replicated clip the character mass is split evenly over the copies.
Matrix<float> routing_target(const ClipRecord& clip, const TokenGridDims& grid, int spatial_factor, int patch, bool replicated);

}  // namespace bya
