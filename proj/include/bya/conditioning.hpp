#pragma once

#include <functional>
#include <random>
#include <vector>

#include "bya/autodiff.hpp"
#include "bya/params.hpp"
#include "bya/synthgen.hpp"
#include "bya/tensor_store.hpp"

namespace bya {

struct ConditioningConfig {
  int width = 64;           // d
  int audio_dim = 8;        // d_a
  int audio_frames = 32;    // T_a
  int latent_frames = 8;    // T'
  int face_queries = 4;     // q
  int face_grid = 2;        // g
  int text_len = 4;         // k
  int prompt_classes = kPromptClasses;
  int spatial_factor = 4;   // pixel -> latent pooling

  int audio_stride() const { return audio_frames / latent_frames; }
  int face_tokens() const { return 1 + face_grid * face_grid; }
};

/// Per-region colour statistics fed to the face encoder.
inline constexpr int kFaceDescriptorDim = 6;

template <typename S>
struct AudioEncoderParams {
  Parameter<S>* proj_w = nullptr;  // d_a x d
  Parameter<S>* proj_b = nullptr;  // 1 x d
  Parameter<S>* conv_k = nullptr;  // 3 x 3 over (time, feature)
  Parameter<S>* conv_b = nullptr;  // 1 x 1
  Parameter<S>* null_embed = nullptr;  // T' x d
};

template <typename S>
struct FaceEncoderParams {
  Parameter<S>* global_w = nullptr;  // 6 x d
  Parameter<S>* global_b = nullptr;
  Parameter<S>* local_w = nullptr;   // 6 x d
  Parameter<S>* local_b = nullptr;
  Parameter<S>* local_pos = nullptr;  // g^2 x d
  Parameter<S>* queries = nullptr;    // q x d
  Parameter<S>* wq = nullptr;
  Parameter<S>* wk = nullptr;
  Parameter<S>* wv = nullptr;
  Parameter<S>* wo = nullptr;
  Parameter<S>* null_embed = nullptr;  // q x d
};

template <typename S>
struct TextParams {
  Parameter<S>* table = nullptr;       // (classes * k) x d
  Parameter<S>* null_embed = nullptr;  // k x d
};

template <typename S>
AudioEncoderParams<S> add_audio_encoder(ParamStore<S>& store, const ConditioningConfig& cfg, std::mt19937_64& rng);
template <typename S>
FaceEncoderParams<S> add_face_encoder(ParamStore<S>& store, const ConditioningConfig& cfg, std::mt19937_64& rng);
template <typename S>
TextParams<S> add_text_table(ParamStore<S>& store, const ConditioningConfig& cfg, std::mt19937_64& rng);

/// Audio features of one stream (T_a x d_a) to its embedding (T' x d):
/// linear projection, then a 3x3 convolution over the (time x feature) plane
/// with temporal stride T_a / T' and zero padding 1.
template <typename S>
Var<S> audio_project(Tape<S>& tape, const AudioEncoderParams<S>& p, const Matrix<S>& feats, int latent_frames);

/// n x T_a x d_a tensor to one embedding per stream.
template <typename S>
std::vector<Var<S>> audio_project(Tape<S>& tape, const AudioEncoderParams<S>& p, const Tensor& audio_feats,
                                  int latent_frames);

/// Global (row 0) and g x g local colour statistics of one reference crop.
/// `refs` is n x 3 x R x R, already background-free.
Matrix<double> face_descriptors(const Tensor& refs, std::size_t character, int grid);

/// Learned queries cross-attend over [global; locals] -> q x d.
template <typename S>
Var<S> face_encode(Tape<S>& tape, const FaceEncoderParams<S>& p, const Matrix<S>& descriptors);

/// One embedding per reference image; row order follows the reference order.
template <typename S>
std::vector<Var<S>> face_encode(Tape<S>& tape, const FaceEncoderParams<S>& p, const Tensor& refs,
                                const ConditioningConfig& cfg);

template <typename S>
Var<S> text_embed(Tape<S>& tape, const TextParams<S>& p, int prompt_id, const ConditioningConfig& cfg);

struct VisualConditions {
  Tensor video_latent;    // T' x C' x H' x W'
  Tensor inpaint_latent;  // T' x C' x H' x W', frame 0 only
  Tensor ref_latent;      // T' x C' x H' x W', frame 0 only
  bool inpaint_dropped = false;
};

struct VisualConditionOptions {
  double face_noise = 0.3;
  int face_dilation = 2;
  bool drop_inpaint = false;
};

/// Zero out reference pixels outside their masks.
Tensor remove_reference_background(const Tensor& refs, const Tensor& ref_masks);

VisualConditions prep_visual_conditions(const ClipRecord& clip, const VisualConditionOptions& options,
                                        std::mt19937_64& rng, int spatial_factor = 4);

/// Channel concatenation of T' x C' x H' x W' tensors.
Tensor concat_channels(std::span<const Tensor> parts);

/// Binary audio-character assignment, row = audio, column = character.
using AssignmentMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Votes per chunk, then the permutation with most votes. Ties prefer the
/// identity, then the lexicographically smallest permutation.
AssignmentMatrix predict_audio_character_matrix(const std::vector<Eigen::MatrixXd>& chunk_scores);

AssignmentMatrix assignment_from_tensor(const Tensor& a_ac);
Tensor assignment_to_tensor(const AssignmentMatrix& a_ac);

/// Signals a relevance scorer sees: per audio stream and per character, one
/// value per video frame.
struct ScorerInput {
  std::vector<std::vector<double>> audio;
  std::vector<std::vector<double>> mouth;
};

using RelevanceScorer = std::function<std::vector<Eigen::MatrixXd>(const ScorerInput&)>;

/// Pearson correlation of each audio signal with each mouth signal over
/// sliding windows of `window` frames.
RelevanceScorer correlation_scorer(int window = 6);

/// Mouth-region brightness per frame, from pixels (T x 3 x H x W) or from a
/// latent video (T' x 3 x H' x W', boxes scaled by `pixel_scale`) with
/// area-weighted overlap.
std::vector<double> mouth_signal(const Tensor& video, std::span<const Box> boxes, int pixel_scale);

/// Scorer input built from a clip's audio features and a (generated or
/// ground-truth) video at `pixel_scale` pixels per video cell.
ScorerInput scorer_input(const ClipRecord& clip, const Tensor& video, int pixel_scale);

}  // namespace bya
