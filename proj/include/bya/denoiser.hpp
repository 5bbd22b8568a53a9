#pragma once

#include <functional>
#include <random>
#include <vector>

#include "bya/autodiff.hpp"
#include "bya/params.hpp"
#include "bya/router_net.hpp"
#include "bya/tensor_store.hpp"

namespace bya {

struct DiTConfig {
  int layers = 4;            // L
  int width = 64;            // d
  int heads = 4;
  int patch = 2;             // tau
  int latent_channels = 3;   // C'
  int cond_channels = 6;     // inpainting + reference latents
  int frames = 8;            // T'
  int height = 8;            // H'
  int latent_width = 8;      // W'
  int text_len = 4;          // k
  int characters = 2;        // n
  int face_queries = 4;      // q
  int mlp_ratio = 4;
  int lora_rank = 4;
  double lora_alpha = 4.0;
  /// Audio tokens visible to a visual token: |t_audio - t_visual| <= window.
  /// Negative means every audio token.
  int audio_window = 1;
  /// false: v'' = v + audio(v') as written; true: v'' = v' + audio(v').
  bool audio_residual_on_face = false;

  int head_dim() const { return width / heads; }
  int input_channels() const { return latent_channels + cond_channels; }
  TokenGridDims grid() const { return {frames, height / patch, latent_width / patch}; }
  int tokens() const { return grid().tokens(); }
  int patch_features() const { return input_channels() * patch * patch; }
  int output_features() const { return latent_channels * patch * patch; }
  void validate() const;
};

/// Linear beta schedule and its cumulative products.
struct NoiseSchedule {
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  static NoiseSchedule linear(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);
  int steps() const { return static_cast<int>(beta.size()); }
};

/// Low-rank update of a base weight: A is r x d_in, B is d_out x r, and the
/// effective column-convention weight is W + (alpha / r) B A.
template <typename S>
struct LoRAAdapter {
  Parameter<S>* a = nullptr;
  Parameter<S>* b = nullptr;
  int rank = 0;
  double alpha = 0.0;

  double scale() const { return rank > 0 ? alpha / rank : 0.0; }
};

/// Dense (W + (alpha/r) B A) x for W d_out x d_in and x d_in x m.
template <typename S>
Matrix<S> lora_apply(const Matrix<S>& w, const LoRAAdapter<S>& adapter, const Matrix<S>& x);

/// Row-convention linear layer with an optional adapter: x (N x d_in) times
/// base (d_in x d_out) plus scale * (x A^T) B^T.
template <typename S>
Var<S> lora_linear(Var<S> x, Parameter<S>& base, const LoRAAdapter<S>* adapter);

template <typename S>
struct CrossAttentionParams {
  Parameter<S>* wq = nullptr;
  Parameter<S>* wk = nullptr;
  Parameter<S>* wv = nullptr;
  Parameter<S>* wo = nullptr;
};

template <typename S>
struct DiTBlockParams {
  Parameter<S>* wqkv = nullptr;
  Parameter<S>* wo = nullptr;
  Parameter<S>* fc1 = nullptr;
  Parameter<S>* fc1_b = nullptr;
  Parameter<S>* fc2 = nullptr;
  Parameter<S>* fc2_b = nullptr;
  LoRAAdapter<S> lora_qkv, lora_o, lora_fc1, lora_fc2;
  CrossAttentionParams<S> face;
  CrossAttentionParams<S> audio;
};

template <typename S>
struct DenoiserParams {
  DiTConfig cfg;
  Parameter<S>* patch_w = nullptr;
  Parameter<S>* patch_b = nullptr;
  Parameter<S>* time_w1 = nullptr;
  Parameter<S>* time_b1 = nullptr;
  Parameter<S>* time_w2 = nullptr;
  Parameter<S>* time_b2 = nullptr;
  std::vector<DiTBlockParams<S>> blocks;
  Parameter<S>* head_w = nullptr;
  Parameter<S>* head_b = nullptr;
  Matrix<S> position;  // fixed S x d sinusoidal
};

template <typename S>
DenoiserParams<S> add_denoiser(ParamStore<S>& store, const DiTConfig& cfg, std::mt19937_64& rng);

/// T' x C x H' x W' latent to S x (C * tau^2) patch rows, t-major token order,
/// features ordered (channel, dy, dx).
template <typename S>
Matrix<S> patchify_rows(const Tensor& latent, int patch);
Tensor unpatchify_rows(const Matrix<float>& rows, const TokenGridDims& grid, int channels, int patch);

/// Patch rows linearly embedded to d (no positional term).
template <typename S>
Var<S> patchify(Tape<S>& tape, const DenoiserParams<S>& p, const Tensor& latent);

/// Fixed 3D sinusoidal table, S x d.
Matrix<double> sinusoidal_positions(const TokenGridDims& grid, int width);
/// Sinusoidal embedding of a diffusion time, 1 x d.
Matrix<double> sinusoidal_time(double t, int width);

/// Sum_i diag(gate[i]) * CrossAttn(queries from x, keys/values from embeds[i]),
/// projected by wo; the caller adds it to its residual base. `bias`, when
/// given, is added to every character's attention logits. `query_out` and
/// `key_out` receive the projected queries and the stacked keys.
template <typename S>
Var<S> masked_cross_attention(Var<S> x, const std::vector<Var<S>>& embeds, const Matrix<S>& gate,
                              const CrossAttentionParams<S>& p, int heads, const Matrix<S>* bias = nullptr,
                              Var<S>* query_out = nullptr, Var<S>* key_out = nullptr);

template <typename S>
struct LayerGates {
  Matrix<S> face;   // n x S
  Matrix<S> audio;  // n x S, rows indexed by audio stream
};

/// Called once per layer with that layer's face-attention taps.
template <typename S>
using GateProvider = std::function<LayerGates<S>(int layer, const AttentionTap<S>& tap)>;

template <typename S>
struct DenoiserInputs {
  const Tensor* latent = nullptr;  // T' x (C' + cond) x H' x W', noisy video first
  double t = 0.0;
  Var<S> text;                     // k x d
  std::vector<Var<S>> faces;       // per character, q x d
  std::vector<Var<S>> audio;       // per audio stream, T' x d; empty skips the audio step
};

/// Predicted noise in patch-row layout, S x (C' * tau^2). `taps`, when given,
/// receives one tap per layer.
template <typename S>
Var<S> denoiser_forward(const DenoiserParams<S>& p, const DenoiserInputs<S>& in, const GateProvider<S>& gates,
                        std::vector<AttentionTap<S>>* taps = nullptr);

/// z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps.
Tensor add_noise(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& schedule);

/// Mean of w * (eps_hat - eps)^2 with w = 1 + kappa * weight_mask when the
/// dynamic term applies. All arguments share one layout.
template <typename S>
Var<S> diffusion_loss(Var<S> eps_hat, const Matrix<S>& eps, const Matrix<S>* weight_mask, double kappa = 1.0);

/// Tensor form: eps tensors T' x C' x H' x W'; `union_mask` T' x H' x W'.
double diffusion_loss(const Tensor& eps_hat, const Tensor& eps, const Tensor* union_mask, bool apply_dynamic,
                      double kappa = 1.0);

/// Union of character masks at latent resolution (T' x H' x W', values in
/// [0,1]) from n x T x H x W pixel masks.
Tensor latent_union_mask(const Tensor& gt_masks, int spatial_factor);

}  // namespace bya
