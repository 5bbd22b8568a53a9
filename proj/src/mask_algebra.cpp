#include "bya/mask_algebra.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include <Eigen/QR>

namespace bya {

RoutingMask RoutingMask::uniform(const TokenGridDims& grid, int characters, int layers) {
  RoutingMask m;
  m.grid = grid;
  m.characters = characters;
  m.layers.assign(static_cast<std::size_t>(layers),
                  Matrix<float>::Constant(grid.tokens(), characters + 1, 1.0f / static_cast<float>(characters + 1)));
  return m;
}

RoutingMask RoutingMask::background(const TokenGridDims& grid, int characters, int layers) {
  RoutingMask m;
  m.grid = grid;
  m.characters = characters;
  Matrix<float> bg = Matrix<float>::Zero(grid.tokens(), characters + 1);
  bg.col(characters).setOnes();
  m.layers.assign(static_cast<std::size_t>(layers), bg);
  return m;
}

Tensor RoutingMask::to_tensor() const {
  const auto l_count = layers.size();
  const auto c_count = static_cast<std::size_t>(classes());
  const auto s_count = static_cast<std::size_t>(grid.tokens());
  Tensor t = Tensor::zeros({l_count, c_count, static_cast<std::size_t>(grid.t_len), static_cast<std::size_t>(grid.h_len),
                            static_cast<std::size_t>(grid.w_len)});
  auto data = t.f32();
  for (std::size_t l = 0; l < l_count; ++l)
    for (std::size_t c = 0; c < c_count; ++c)
      for (std::size_t s = 0; s < s_count; ++s)
        data[(l * c_count + c) * s_count + s] = layers[l](static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(c));
  return t;
}

RoutingMask RoutingMask::from_tensor(const Tensor& probs) {
  if (probs.rank() != 5) throw ShapeError("routing mask tensor must be L x (n+1) x T' x h x w");
  if (probs.dim(1) < 2) throw ShapeError("routing mask needs at least one character and the background");
  RoutingMask m;
  m.grid = {static_cast<int>(probs.dim(2)), static_cast<int>(probs.dim(3)), static_cast<int>(probs.dim(4))};
  m.characters = static_cast<int>(probs.dim(1)) - 1;
  const std::size_t c_count = probs.dim(1), s_count = probs.dim(2) * probs.dim(3) * probs.dim(4);
  const auto data = probs.f32();
  for (std::size_t l = 0; l < probs.dim(0); ++l) {
    Matrix<float> layer(static_cast<Eigen::Index>(s_count), static_cast<Eigen::Index>(c_count));
    for (std::size_t c = 0; c < c_count; ++c)
      for (std::size_t s = 0; s < s_count; ++s)
        layer(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(c)) = data[(l * c_count + c) * s_count + s];
    m.layers.push_back(std::move(layer));
  }
  return m;
}

void RoutingMask::check_simplex(double tol) const {
  for (const auto& layer : layers) {
    if (layer.rows() != grid.tokens() || layer.cols() != classes()) throw ContractError("routing mask layer has the wrong shape");
    if ((layer.array() < -static_cast<float>(tol)).any() || (layer.array() > 1.0f + static_cast<float>(tol)).any())
      throw ContractError("routing mask value outside [0,1]");
    const Eigen::VectorXf sums = layer.rowwise().sum();
    if (((sums.array() - 1.0f).abs() > static_cast<float>(tol)).any()) throw ContractError("routing mask rows do not sum to 1");
  }
}

Matrix<float> RoutingMask::layer_mean() const {
  if (layers.empty()) throw ShapeError("routing mask has no layers");
  Matrix<float> acc = Matrix<float>::Zero(layers[0].rows(), layers[0].cols());
  for (const auto& layer : layers) acc += layer;
  return acc / static_cast<float>(layers.size());
}

std::vector<int> argmax_labels(const Matrix<float>& probs) {
  std::vector<int> labels(static_cast<std::size_t>(probs.rows()));
  for (Eigen::Index s = 0; s < probs.rows(); ++s) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < probs.cols(); ++c)
      if (probs(s, c) > probs(s, best)) best = c;
    labels[static_cast<std::size_t>(s)] = static_cast<int>(best);
  }
  return labels;
}

Matrix<float> one_hot(const std::vector<int>& labels, int classes) {
  Matrix<float> out = Matrix<float>::Zero(static_cast<Eigen::Index>(labels.size()), classes);
  for (std::size_t s = 0; s < labels.size(); ++s) out(static_cast<Eigen::Index>(s), labels[s]) = 1.0f;
  return out;
}

Matrix<float> mask_to_cv_matrix(const RoutingMask& mask, int layer) {
  if (layer < 0 || layer >= mask.layer_count())
    throw BoundsError("layer " + std::to_string(layer) + " out of range for " + std::to_string(mask.layer_count()) + " layers");
  return mask.layers[static_cast<std::size_t>(layer)].leftCols(mask.characters).transpose();
}

RoutingMask refine_mask(const RoutingMask& mask, double theta, int max_iters) {
  const TokenGridDims& g = mask.grid;
  const int classes = mask.classes();
  const int tokens = g.tokens();
  RoutingMask out;
  out.grid = g;
  out.characters = mask.characters;
  for (const auto& probs : mask.layers) {
    std::vector<int> labels(static_cast<std::size_t>(tokens), -1);
    for (int s = 0; s < tokens; ++s) {
      Eigen::Index best = 0;
      const float peak = probs.row(s).maxCoeff(&best);
      if (peak >= static_cast<float>(theta)) labels[static_cast<std::size_t>(s)] = static_cast<int>(best);
    }
    std::vector<int> votes(static_cast<std::size_t>(classes));
    for (int iter = 0; iter < max_iters; ++iter) {
      std::vector<int> next = labels;
      bool changed = false;
      for (int s = 0; s < tokens; ++s) {
        if (labels[static_cast<std::size_t>(s)] >= 0) continue;
        const TokenIndex p = token_unflatten(s, g);
        std::fill(votes.begin(), votes.end(), 0);
        int total = 0;
        auto visit = [&](int t, int h, int w) {
          if (t < 0 || t >= g.t_len || h < 0 || h >= g.h_len || w < 0 || w >= g.w_len) return;
          const int label = labels[static_cast<std::size_t>(token_flatten(t, h, w, g))];
          if (label < 0) return;
          ++votes[static_cast<std::size_t>(label)];
          ++total;
        };
        visit(p.t - 1, p.h, p.w);
        visit(p.t + 1, p.h, p.w);
        visit(p.t, p.h - 1, p.w);
        visit(p.t, p.h + 1, p.w);
        visit(p.t, p.h, p.w - 1);
        visit(p.t, p.h, p.w + 1);
        if (total == 0) continue;
        int best = 0;
        for (int c = 1; c < classes; ++c) {
          const auto uc = static_cast<std::size_t>(c), ub = static_cast<std::size_t>(best);
          if (votes[uc] > votes[ub] || (votes[uc] == votes[ub] && probs(s, c) > probs(s, best))) best = c;
        }
        next[static_cast<std::size_t>(s)] = best;
        changed = true;
      }
      labels = std::move(next);
      if (!changed) break;
    }
    for (auto& label : labels)
      if (label < 0) label = mask.characters;
    out.layers.push_back(one_hot(labels, classes));
  }
  return out;
}

namespace {

constexpr double kBackground = kBackgroundLevel;

/// Non-negative least squares for a 3-channel residual against up to a few
/// basis columns, by exhaustive active-set enumeration.
Eigen::VectorXd nnls_small(const Eigen::MatrixXd& basis, const Eigen::Vector3d& target) {
  const int k = static_cast<int>(basis.cols());
  Eigen::VectorXd best = Eigen::VectorXd::Zero(k);
  double best_err = target.squaredNorm();
  for (int subset = 1; subset < (1 << k); ++subset) {
    std::vector<int> cols;
    for (int j = 0; j < k; ++j)
      if (subset & (1 << j)) cols.push_back(j);
    if (cols.size() > 3) continue;
    Eigen::MatrixXd a(3, static_cast<Eigen::Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j) a.col(static_cast<Eigen::Index>(j)) = basis.col(cols[j]);
    const Eigen::VectorXd x = a.colPivHouseholderQr().solve(target);
    if ((x.array() < 0.0).any() || !x.allFinite()) continue;
    const double err = (a * x - target).squaredNorm();
    if (err < best_err - 1e-12) {
      best_err = err;
      best.setZero();
      for (std::size_t j = 0; j < cols.size(); ++j) best(cols[j]) = x(static_cast<Eigen::Index>(j));
    }
  }
  return best;
}

/// Largest 4-connected component of `on`; ties keep the first found in
/// raster order.
std::vector<std::uint8_t> largest_component(const std::vector<std::uint8_t>& on, int height, int width, int& size) {
  std::vector<int> label(on.size(), -1);
  int best_label = -1, best_size = 0, next = 0;
  std::vector<int> stack;
  for (int start = 0; start < height * width; ++start) {
    if (!on[static_cast<std::size_t>(start)] || label[static_cast<std::size_t>(start)] >= 0) continue;
    int count = 0;
    stack.assign(1, start);
    label[static_cast<std::size_t>(start)] = next;
    while (!stack.empty()) {
      const int cur = stack.back();
      stack.pop_back();
      ++count;
      const int y = cur / width, x = cur % width;
      const std::array<std::array<int, 2>, 4> nb = {{{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}}};
      for (const auto& [ny, nx] : nb) {
        if (ny < 0 || ny >= height || nx < 0 || nx >= width) continue;
        const int id = ny * width + nx;
        if (!on[static_cast<std::size_t>(id)] || label[static_cast<std::size_t>(id)] >= 0) continue;
        label[static_cast<std::size_t>(id)] = next;
        stack.push_back(id);
      }
    }
    if (count > best_size) {
      best_size = count;
      best_label = next;
    }
    ++next;
  }
  size = best_size;
  std::vector<std::uint8_t> out(on.size(), 0);
  for (std::size_t i = 0; i < on.size(); ++i) out[i] = label[i] == best_label && best_label >= 0 ? 1 : 0;
  return out;
}

std::size_t frame_size_check(const Tensor& video, const TokenGridDims& dims, int& cell) {
  const std::size_t h = video.dim(video.rank() - 2), w = video.dim(video.rank() - 1);
  if (dims.h_len <= 0 || dims.w_len <= 0 || h % static_cast<std::size_t>(dims.h_len) != 0 ||
      w % static_cast<std::size_t>(dims.w_len) != 0 || h / static_cast<std::size_t>(dims.h_len) != w / static_cast<std::size_t>(dims.w_len))
    throw ShapeError("frame size is not a multiple of the token grid");
  cell = static_cast<int>(h / static_cast<std::size_t>(dims.h_len));
  return h * w;
}

}  // namespace

std::vector<Rgb> reference_colors(const Tensor& refs) {
  if (refs.rank() != 4 || refs.dim(1) != 3) throw ShapeError("references must be n x 3 x R x R");
  const std::size_t plane = refs.dim(2) * refs.dim(3);
  std::vector<Rgb> colors;
  for (std::size_t i = 0; i < refs.dim(0); ++i) {
    std::array<std::vector<float>, 3> channel;
    for (std::size_t p = 0; p < plane; ++p) {
      double dist = 0.0, mass = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        dist += std::abs(refs.f32()[(i * 3 + c) * plane + p] - kBackground);
        mass += std::abs(refs.f32()[(i * 3 + c) * plane + p]);
      }
      // Skip the background and pixels already cleared by background removal.
      if (dist < 0.15 || mass < 1e-6) continue;
      for (std::size_t c = 0; c < 3; ++c) channel[c].push_back(refs.f32()[(i * 3 + c) * plane + p]);
    }
    if (channel[0].empty()) throw DetectionError("reference " + std::to_string(i) + " has no foreground");
    Rgb rgb{};
    for (std::size_t c = 0; c < 3; ++c) {
      auto& v = channel[c];
      std::nth_element(v.begin(), v.begin() + static_cast<long>(v.size() / 2), v.end());
      rgb[c] = v[v.size() / 2];
    }
    colors.push_back(rgb);
  }
  return colors;
}

FrameSegmentation segment_frame(std::span<const float> frame, int height, int width, const std::vector<Rgb>& colors,
                                double threshold) {
  const auto plane = static_cast<std::size_t>(height * width);
  if (frame.size() < 3 * plane) throw ShapeError("frame buffer smaller than 3 x h x w");
  const std::size_t n = colors.size();
  Eigen::MatrixXd basis(3, static_cast<Eigen::Index>(n + 1));
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) basis(c, static_cast<Eigen::Index>(i)) = colors[i][static_cast<std::size_t>(c)] - kBackground;
  // Grey brightening; a full-coverage mouth pixel sits around 0.5 above the background.
  basis.col(static_cast<Eigen::Index>(n)).setConstant(0.5);

  std::vector<std::vector<double>> alpha(n, std::vector<double>(plane, 0.0));
  std::vector<double> grey(plane, 0.0);
  for (std::size_t p = 0; p < plane; ++p) {
    Eigen::Vector3d v;
    for (int c = 0; c < 3; ++c) v(c) = frame[static_cast<std::size_t>(c) * plane + p] - kBackground;
    const Eigen::VectorXd x = nnls_small(basis, v);
    for (std::size_t i = 0; i < n; ++i) alpha[i][p] = std::min(1.0, x(static_cast<Eigen::Index>(i)));
    grey[p] = std::min(1.0, x(static_cast<Eigen::Index>(n)));
  }
  // Grey goes to the character with the strongest colour in the 3x3 window.
  std::vector<std::vector<double>> cover = alpha;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const auto p = static_cast<std::size_t>(y * width + x);
      if (grey[p] <= 0.0 || n == 0) continue;
      int owner = -1;
      double strongest = 0.05;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int ny = y + dy, nx = x + dx;
          if (ny < 0 || ny >= height || nx < 0 || nx >= width) continue;
          for (std::size_t i = 0; i < n; ++i) {
            const double a = alpha[i][static_cast<std::size_t>(ny * width + nx)];
            if (a > strongest) {
              strongest = a;
              owner = static_cast<int>(i);
            }
          }
        }
      if (owner >= 0) cover[static_cast<std::size_t>(owner)][p] += grey[p];
    }

  FrameSegmentation seg;
  seg.height = height;
  seg.width = width;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::uint8_t> on(plane, 0);
    for (std::size_t p = 0; p < plane; ++p) on[p] = cover[i][p] >= threshold ? 1 : 0;
    int size = 0;
    std::vector<std::uint8_t> comp = largest_component(on, height, width, size);
    // Keep soft coverage on the component and its one-cell rim.
    std::vector<float> kept(plane, 0.0f);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        bool near = false;
        for (int dy = -1; dy <= 1 && !near; ++dy)
          for (int dx = -1; dx <= 1 && !near; ++dx) {
            const int ny = y + dy, nx = x + dx;
            if (ny >= 0 && ny < height && nx >= 0 && nx < width && comp[static_cast<std::size_t>(ny * width + nx)]) near = true;
          }
        if (near) kept[static_cast<std::size_t>(y * width + x)] = static_cast<float>(std::min(1.0, cover[i][static_cast<std::size_t>(y * width + x)]));
      }
    seg.coverage.push_back(std::move(kept));
    seg.component.push_back(std::move(comp));
    seg.component_size.push_back(size);
  }
  for (std::size_t p = 0; p < plane; ++p) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += seg.coverage[i][p];
    if (total > 1.0)
      for (std::size_t i = 0; i < n; ++i) seg.coverage[i][p] = static_cast<float>(seg.coverage[i][p] / total);
  }
  return seg;
}

RoutingMask pre_denoise_mask(const Tensor& inpaint, const Tensor& refs, const TokenGridDims& dims, int layers) {
  if (inpaint.rank() != 3 || inpaint.dim(0) != 3) throw ShapeError("inpainting frame must be 3 x H x W");
  int cell = 0;
  frame_size_check(inpaint, dims, cell);
  const int height = static_cast<int>(inpaint.dim(1)), width = static_cast<int>(inpaint.dim(2));
  const std::vector<Rgb> colors = reference_colors(refs);
  const int n = static_cast<int>(colors.size());
  const FrameSegmentation seg = segment_frame(inpaint.f32(), height, width, colors);
  const int min_area = std::max(1, height * width / 256);

  struct Detection {
    int x0, y0, x1, y1;
    double cx, cy;
  };
  std::vector<Detection> boxes;
  for (int i = 0; i < n; ++i) {
    if (seg.component_size[static_cast<std::size_t>(i)] < min_area)
      throw DetectionError("found fewer than " + std::to_string(n) + " characters in the inpainting frame");
    Detection d{width, height, 0, 0, 0.0, 0.0};
    int count = 0;
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        if (!seg.component[static_cast<std::size_t>(i)][static_cast<std::size_t>(y * width + x)]) continue;
        d.x0 = std::min(d.x0, x);
        d.y0 = std::min(d.y0, y);
        d.x1 = std::max(d.x1, x + 1);
        d.y1 = std::max(d.y1, y + 1);
        d.cx += x + 0.5;
        d.cy += y + 0.5;
        ++count;
      }
    d.cx /= count;
    d.cy /= count;
    boxes.push_back(d);
  }

  const int plane = dims.plane();
  std::vector<int> frame_labels(static_cast<std::size_t>(plane), n);
  for (int h = 0; h < dims.h_len; ++h)
    for (int w = 0; w < dims.w_len; ++w) {
      const int ty0 = h * cell, tx0 = w * cell;
      const double tcx = tx0 + cell / 2.0, tcy = ty0 + cell / 2.0;
      int owner = n;
      double nearest = std::numeric_limits<double>::infinity();
      for (int i = 0; i < n; ++i) {
        const Detection& d = boxes[static_cast<std::size_t>(i)];
        const int ox = std::max(0, std::min(d.x1, tx0 + cell) - std::max(d.x0, tx0));
        const int oy = std::max(0, std::min(d.y1, ty0 + cell) - std::max(d.y0, ty0));
        if (2 * ox * oy < cell * cell) continue;
        const double dist = std::hypot(tcx - d.cx, tcy - d.cy);
        if (dist < nearest) {
          nearest = dist;
          owner = i;
        }
      }
      frame_labels[static_cast<std::size_t>(h * dims.w_len + w)] = owner;
    }
  std::vector<int> labels;
  for (int t = 0; t < dims.t_len; ++t) labels.insert(labels.end(), frame_labels.begin(), frame_labels.end());
  RoutingMask m;
  m.grid = dims;
  m.characters = n;
  m.layers.assign(static_cast<std::size_t>(layers), one_hot(labels, n + 1));
  return m;
}

RoutingMask segment_coarse_video(const Tensor& coarse_latent, const Tensor& refs, const TokenGridDims& dims, int layers) {
  if (coarse_latent.rank() != 4 || coarse_latent.dim(1) < 3) throw ShapeError("coarse video must be T' x C' x H' x W'");
  if (static_cast<int>(coarse_latent.dim(0)) != dims.t_len) throw ShapeError("coarse video frames do not match the token grid");
  int cell = 0;
  frame_size_check(coarse_latent, dims, cell);
  const int height = static_cast<int>(coarse_latent.dim(2)), width = static_cast<int>(coarse_latent.dim(3));
  const std::size_t frame_values = coarse_latent.dim(1) * static_cast<std::size_t>(height * width);
  const std::vector<Rgb> colors = reference_colors(refs);
  const int n = static_cast<int>(colors.size());
  std::vector<int> labels(static_cast<std::size_t>(dims.tokens()), n);
  Eigen::VectorXd cov(n + 1);
  for (int t = 0; t < dims.t_len; ++t) {
    const FrameSegmentation seg =
        segment_frame(coarse_latent.f32().subspan(static_cast<std::size_t>(t) * frame_values, frame_values), height, width, colors);
    for (int h = 0; h < dims.h_len; ++h)
      for (int w = 0; w < dims.w_len; ++w) {
        cov.setZero();
        for (int y = h * cell; y < (h + 1) * cell; ++y)
          for (int x = w * cell; x < (w + 1) * cell; ++x)
            for (int i = 0; i < n; ++i) cov(i) += seg.coverage[static_cast<std::size_t>(i)][static_cast<std::size_t>(y * width + x)];
        cov /= static_cast<double>(cell * cell);
        cov(n) = 1.0 - cov.head(n).sum();
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c <= n; ++c)
          if (cov(c) > cov(best)) best = c;
        labels[static_cast<std::size_t>(token_flatten(t, h, w, dims))] = static_cast<int>(best);
      }
  }
  RoutingMask m;
  m.grid = dims;
  m.characters = n;
  m.layers.assign(static_cast<std::size_t>(layers), one_hot(labels, n + 1));
  return m;
}

Matrix<float> ground_truth_probs(const Tensor& gt_masks, const TokenGridDims& dims, int spatial_factor, int patch) {
  const Tensor cov = downsample_mask(gt_masks, spatial_factor, patch);
  const std::size_t n = cov.dim(0);
  if (static_cast<int>(cov.dim(1)) != dims.t_len || static_cast<int>(cov.dim(2)) != dims.h_len ||
      static_cast<int>(cov.dim(3)) != dims.w_len)
    throw ShapeError("ground-truth masks do not map onto the token grid");
  const auto s_count = static_cast<std::size_t>(dims.tokens());
  Matrix<float> probs(static_cast<Eigen::Index>(s_count), static_cast<Eigen::Index>(n + 1));
  for (std::size_t s = 0; s < s_count; ++s) {
    float total = 0.0f;
    for (std::size_t i = 0; i < n; ++i) {
      const float v = cov.f32()[i * s_count + s];
      probs(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(i)) = v;
      total += v;
    }
    probs(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(n)) = std::max(0.0f, 1.0f - total);
  }
  return probs;
}

std::vector<int> ground_truth_labels(const Tensor& gt_masks, const TokenGridDims& dims, int spatial_factor, int patch) {
  return argmax_labels(ground_truth_probs(gt_masks, dims, spatial_factor, patch));
}

double label_iou(const std::vector<int>& pred, const std::vector<int>& truth, int cls) {
  if (pred.size() != truth.size()) throw ShapeError("label maps differ in size");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] == cls, b = truth[i] == cls;
    inter += (a && b) ? 1 : 0;
    uni += (a || b) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double label_iou_frame(const std::vector<int>& pred, const std::vector<int>& truth, int cls, const TokenGridDims& dims, int t) {
  const auto plane = static_cast<std::size_t>(dims.plane());
  const auto begin = static_cast<std::size_t>(t) * plane;
  return label_iou(std::vector<int>(pred.begin() + static_cast<long>(begin), pred.begin() + static_cast<long>(begin + plane)),
                   std::vector<int>(truth.begin() + static_cast<long>(begin), truth.begin() + static_cast<long>(begin + plane)),
                   cls);
}

}  // namespace bya
