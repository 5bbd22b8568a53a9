#pragma once

#include <vector>

#include "bya/autodiff.hpp"
#include "bya/conditioning.hpp"
#include "bya/tensor_store.hpp"

namespace bya {

/// Per-layer class distributions over the token grid. Each layer is an
/// S x (n+1) matrix with rows in token_flatten order; class n is background.
struct RoutingMask {
  TokenGridDims grid;
  int characters = 0;
  std::vector<Matrix<float>> layers;

  int classes() const { return characters + 1; }
  int layer_count() const { return static_cast<int>(layers.size()); }

  static RoutingMask uniform(const TokenGridDims& grid, int characters, int layers);
  /// Every token background on every layer.
  static RoutingMask background(const TokenGridDims& grid, int characters, int layers);

  /// L x (n+1) x T' x h x w.
  Tensor to_tensor() const;
  static RoutingMask from_tensor(const Tensor& probs);

  /// Throws ContractError unless every row is a distribution within `tol`.
  void check_simplex(double tol = 1e-5) const;

  /// Mean over layers, as one S x (n+1) matrix.
  Matrix<float> layer_mean() const;
};

/// Argmax class per token of an S x (n+1) matrix; ties go to the lower index.
std::vector<int> argmax_labels(const Matrix<float>& probs);

/// Hard one-hot S x (n+1) matrix from per-token labels.
Matrix<float> one_hot(const std::vector<int>& labels, int classes);

/// n x S character-visual matrix of one layer (background dropped).
Matrix<float> mask_to_cv_matrix(const RoutingMask& mask, int layer);

/// A^av = A^ac * A^cv.
template <typename S>
Matrix<S> compose_av(const AssignmentMatrix& a_ac, const Matrix<S>& a_cv) {
  if (a_ac.cols() != a_cv.rows()) throw ShapeError("A^ac columns must match A^cv rows");
  return a_ac.template cast<S>() * a_cv;
}

/// Confident tokens (max prob >= theta) seed labels; the rest take the
/// majority label of their labelled 6-neighbours, repeated until stable or
/// `max_iters` sweeps. Each sweep reads the labels of the previous one. Ties
/// among neighbour votes go to the class the token itself rates highest, then
/// to the lower index. Tokens never reached become background.
RoutingMask refine_mask(const RoutingMask& mask, double theta = 0.6, int max_iters = 64);

/// Row i becomes 1 - row of the other character. Two characters only.
template <typename S>
Matrix<S> inflate_audio_matrix(const Matrix<S>& a_cv_hard) {
  if (a_cv_hard.rows() != 2) throw UnsupportedError("audio mask inflation is defined for two characters only");
  Matrix<S> out(2, a_cv_hard.cols());
  out.row(0) = (S(1) - a_cv_hard.row(1).array()).matrix();
  out.row(1) = (S(1) - a_cv_hard.row(0).array()).matrix();
  return out;
}

/// Dominant colour of each reference crop (median over non-background pixels).
std::vector<Rgb> reference_colors(const Tensor& refs);

/// Per-character coverage of one 3 x h x w frame. Each cell is unmixed into
/// background, the reference colours and a grey term; grey coverage goes to
/// the strongest neighbouring character. Only the largest connected component
/// whose coverage passes `threshold` is kept per character.
struct FrameSegmentation {
  int height = 0;
  int width = 0;
  std::vector<std::vector<float>> coverage;  // [character][y * width + x]
  std::vector<std::vector<std::uint8_t>> component;  // kept component per character
  std::vector<int> component_size;
};

FrameSegmentation segment_frame(std::span<const float> frame, int height, int width, const std::vector<Rgb>& colors,
                                double threshold = 0.35);

/// Bounding boxes of each character in the inpainting frame, rasterised to
/// the token grid (a token is inside when the box covers half its area).
/// Tokens claimed by two boxes go to the nearer component centroid. The
/// result is replicated over every frame and layer.
RoutingMask pre_denoise_mask(const Tensor& inpaint, const Tensor& refs, const TokenGridDims& dims, int layers);

/// Per-frame segmentation of a T' x 3 x H' x W' latent video into token
/// classes by coverage argmax, replicated over layers.
RoutingMask segment_coarse_video(const Tensor& coarse_latent, const Tensor& refs, const TokenGridDims& dims, int layers);

/// Ground-truth token classes from n x T x H x W pixel masks: area coverage
/// per class with background = 1 - sum, then argmax.
std::vector<int> ground_truth_labels(const Tensor& gt_masks, const TokenGridDims& dims, int spatial_factor, int patch);

/// Soft ground-truth distribution S x (n+1) from the same coverage.
Matrix<float> ground_truth_probs(const Tensor& gt_masks, const TokenGridDims& dims, int spatial_factor, int patch);

/// Intersection over union of label == cls between two label maps; 1 when
/// neither contains the class.
double label_iou(const std::vector<int>& pred, const std::vector<int>& truth, int cls);

/// IoU restricted to one frame of the token grid.
double label_iou_frame(const std::vector<int>& pred, const std::vector<int>& truth, int cls, const TokenGridDims& dims, int t);

}  // namespace bya
