#include "bya/conditioning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace bya {

namespace {

template <typename S>
Matrix<S> xavier(Eigen::Index in, Eigen::Index out, std::mt19937_64& rng) {
  return random_normal<S>(in, out, std::sqrt(1.0 / static_cast<double>(in)), rng);
}

template <typename S>
Matrix<S> to_matrix(std::span<const float> data, Eigen::Index rows, Eigen::Index cols) {
  Matrix<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(data[static_cast<std::size_t>(i)]);
  return m;
}

}  // namespace

template <typename S>
AudioEncoderParams<S> add_audio_encoder(ParamStore<S>& store, const ConditioningConfig& cfg, std::mt19937_64& rng) {
  AudioEncoderParams<S> p;
  p.proj_w = &store.add("audio.proj_w", group::kAudioEncoder, xavier<S>(cfg.audio_dim, cfg.width, rng));
  p.proj_b = &store.add("audio.proj_b", group::kAudioEncoder, Matrix<S>::Zero(1, cfg.width));
  Matrix<S> k = random_normal<S>(3, 3, 0.1, rng);
  k.col(1).array() += S(1) / S(3);
  p.conv_k = &store.add("audio.conv_k", group::kAudioEncoder, k);
  p.conv_b = &store.add("audio.conv_b", group::kAudioEncoder, Matrix<S>::Zero(1, 1));
  p.null_embed = &store.add("audio.null", group::kAudioEncoder, random_normal<S>(cfg.latent_frames, cfg.width, 0.5, rng));
  return p;
}

template <typename S>
FaceEncoderParams<S> add_face_encoder(ParamStore<S>& store, const ConditioningConfig& cfg, std::mt19937_64& rng) {
  FaceEncoderParams<S> p;
  const int d = cfg.width;
  const int cells = cfg.face_grid * cfg.face_grid;
  p.global_w = &store.add("face.global_w", group::kFaceEncoder, xavier<S>(kFaceDescriptorDim, d, rng));
  p.global_b = &store.add("face.global_b", group::kFaceEncoder, Matrix<S>::Zero(1, d));
  p.local_w = &store.add("face.local_w", group::kFaceEncoder, xavier<S>(kFaceDescriptorDim, d, rng));
  p.local_b = &store.add("face.local_b", group::kFaceEncoder, Matrix<S>::Zero(1, d));
  p.local_pos = &store.add("face.local_pos", group::kFaceEncoder, random_normal<S>(cells, d, 0.1, rng));
  p.queries = &store.add("face.queries", group::kFaceEncoder, random_normal<S>(cfg.face_queries, d, 0.2, rng));
  p.wq = &store.add("face.wq", group::kFaceEncoder, xavier<S>(d, d, rng));
  p.wk = &store.add("face.wk", group::kFaceEncoder, xavier<S>(d, d, rng));
  p.wv = &store.add("face.wv", group::kFaceEncoder, xavier<S>(d, d, rng));
  p.wo = &store.add("face.wo", group::kFaceEncoder, xavier<S>(d, d, rng));
  p.null_embed = &store.add("face.null", group::kFaceEncoder, random_normal<S>(cfg.face_queries, d, 0.5, rng));
  return p;
}

template <typename S>
TextParams<S> add_text_table(ParamStore<S>& store, const ConditioningConfig& cfg, std::mt19937_64& rng) {
  TextParams<S> p;
  p.table = &store.add("text.table", group::kText, random_normal<S>(cfg.prompt_classes * cfg.text_len, cfg.width, 1.0, rng));
  p.null_embed = &store.add("text.null", group::kText, random_normal<S>(cfg.text_len, cfg.width, 1.0, rng));
  return p;
}

template <typename S>
Var<S> audio_project(Tape<S>& tape, const AudioEncoderParams<S>& p, const Matrix<S>& feats, int latent_frames) {
  const Eigen::Index t_audio = feats.rows();
  if (latent_frames <= 0 || t_audio % latent_frames != 0)
    throw ShapeError("audio frames must be an integer multiple of latent frames");
  if (feats.cols() != p.proj_w->value.rows()) throw ShapeError("audio feature width does not match the projection");
  const int stride = static_cast<int>(t_audio / latent_frames);
  Var<S> x = tape.constant(feats);
  Var<S> y = ad::add_row(ad::matmul(x, tape.param(*p.proj_w)), tape.param(*p.proj_b));
  const Eigen::Index d = y.cols();
  Var<S> kernel = tape.param(*p.conv_k);
  Var<S> out;
  std::vector<int> index(static_cast<std::size_t>(latent_frames * d));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      for (int t = 0; t < latent_frames; ++t)
        for (Eigen::Index f = 0; f < d; ++f) {
          const Eigen::Index row = static_cast<Eigen::Index>(stride) * t + i - 1;
          const Eigen::Index col = f + j - 1;
          const bool inside = row >= 0 && row < t_audio && col >= 0 && col < d;
          index[static_cast<std::size_t>(t * d + f)] = inside ? static_cast<int>(row * d + col) : -1;
        }
      Var<S> term = ad::scale_by(ad::gather<S>(y, index, latent_frames, d), ad::block(kernel, i, j, 1, 1));
      out = out.valid() ? ad::add(out, term) : term;
    }
  std::vector<int> zeros(static_cast<std::size_t>(latent_frames * d), 0);
  return ad::add(out, ad::gather<S>(tape.param(*p.conv_b), zeros, latent_frames, d));
}

template <typename S>
std::vector<Var<S>> audio_project(Tape<S>& tape, const AudioEncoderParams<S>& p, const Tensor& audio_feats,
                                  int latent_frames) {
  if (audio_feats.rank() != 3) throw ShapeError("audio features must be n x T_a x d_a");
  const std::size_t n = audio_feats.dim(0), ta = audio_feats.dim(1), da = audio_feats.dim(2);
  std::vector<Var<S>> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto slice = audio_feats.f32().subspan(i * ta * da, ta * da);
    out.push_back(audio_project(tape, p, to_matrix<S>(slice, static_cast<Eigen::Index>(ta), static_cast<Eigen::Index>(da)),
                                latent_frames));
  }
  return out;
}

Matrix<double> face_descriptors(const Tensor& refs, std::size_t character, int grid) {
  if (refs.rank() != 4 || refs.dim(1) != 3) throw ShapeError("references must be n x 3 x R x R");
  const std::size_t h = refs.dim(2), w = refs.dim(3);
  const auto g = static_cast<std::size_t>(grid);
  if (grid <= 0 || h % g != 0 || w % g != 0) throw ShapeError("reference size must be divisible by the face grid");
  Matrix<double> out(static_cast<Eigen::Index>(1 + g * g), kFaceDescriptorDim);
  auto stats = [&](std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1, Eigen::Index row) {
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0, s2 = 0;
      for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) {
          const double v = refs.at({character, c, y, x});
          s += v;
          s2 += v * v;
        }
      const double n = static_cast<double>((y1 - y0) * (x1 - x0));
      const double mu = s / n;
      out(row, static_cast<Eigen::Index>(c)) = mu;
      out(row, static_cast<Eigen::Index>(3 + c)) = std::sqrt(std::max(0.0, s2 / n - mu * mu));
    }
  };
  stats(0, h, 0, w, 0);
  for (std::size_t gy = 0; gy < g; ++gy)
    for (std::size_t gx = 0; gx < g; ++gx)
      stats(gy * h / g, (gy + 1) * h / g, gx * w / g, (gx + 1) * w / g, static_cast<Eigen::Index>(1 + gy * g + gx));
  return out;
}

template <typename S>
Var<S> face_encode(Tape<S>& tape, const FaceEncoderParams<S>& p, const Matrix<S>& descriptors) {
  const Eigen::Index cells = p.local_pos->value.rows();
  if (descriptors.rows() != 1 + cells || descriptors.cols() != kFaceDescriptorDim)
    throw ShapeError("face descriptors have the wrong shape");
  Var<S> global = tape.constant(descriptors.topRows(1));
  Var<S> local = tape.constant(descriptors.bottomRows(cells));
  Var<S> g_tok = ad::add_row(ad::matmul(global, tape.param(*p.global_w)), tape.param(*p.global_b));
  Var<S> l_tok = ad::add(ad::add_row(ad::matmul(local, tape.param(*p.local_w)), tape.param(*p.local_b)),
                         tape.param(*p.local_pos));
  const std::vector<Var<S>> parts = {g_tok, l_tok};
  Var<S> tokens = ad::concat_rows<S>(parts);
  Var<S> queries = tape.param(*p.queries);
  Var<S> q = ad::matmul(queries, tape.param(*p.wq));
  Var<S> k = ad::matmul(tokens, tape.param(*p.wk));
  Var<S> v = ad::matmul(tokens, tape.param(*p.wv));
  Var<S> attended = ad::attention(q, k, v, 1);
  return ad::add(queries, ad::matmul(attended, tape.param(*p.wo)));
}

template <typename S>
std::vector<Var<S>> face_encode(Tape<S>& tape, const FaceEncoderParams<S>& p, const Tensor& refs,
                                const ConditioningConfig& cfg) {
  std::vector<Var<S>> out;
  for (std::size_t i = 0; i < refs.dim(0); ++i)
    out.push_back(face_encode(tape, p, Matrix<S>(face_descriptors(refs, i, cfg.face_grid).template cast<S>())));
  return out;
}

template <typename S>
Var<S> text_embed(Tape<S>& tape, const TextParams<S>& p, int prompt_id, const ConditioningConfig& cfg) {
  if (prompt_id < 0 || prompt_id >= cfg.prompt_classes) throw ConfigError("unknown prompt id " + std::to_string(prompt_id));
  return ad::slice_rows(tape.param(*p.table), static_cast<Eigen::Index>(prompt_id) * cfg.text_len, cfg.text_len);
}

Tensor remove_reference_background(const Tensor& refs, const Tensor& ref_masks) {
  if (refs.rank() != 4 || ref_masks.rank() != 3 || refs.dim(0) != ref_masks.dim(0) || refs.dim(2) != ref_masks.dim(1) ||
      refs.dim(3) != ref_masks.dim(2))
    throw ShapeError("reference masks do not match references");
  Tensor out = refs;
  for (std::size_t i = 0; i < refs.dim(0); ++i)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < refs.dim(2); ++y)
        for (std::size_t x = 0; x < refs.dim(3); ++x)
          if (ref_masks.at_u8({i, y, x}) == 0) out.at({i, c, y, x}) = 0.0f;
  return out;
}

VisualConditions prep_visual_conditions(const ClipRecord& clip, const VisualConditionOptions& options,
                                        std::mt19937_64& rng, int spatial_factor) {
  if (clip.video.rank() != 4) throw ShapeError("clip video must be T x 3 x H x W");
  const std::size_t frames = clip.video.dim(0), height = clip.video.dim(2), width = clip.video.dim(3);
  const auto sf = static_cast<std::size_t>(spatial_factor);
  if (height % sf != 0 || width % sf != 0) throw ShapeError("clip size is not divisible by the spatial factor");
  VisualConditions out;
  out.video_latent = avg_pool_spatial(clip.video, spatial_factor);
  const std::size_t lh = height / sf, lw = width / sf;
  const Shape latent_shape{frames, 3, lh, lw};
  const std::size_t frame_size = 3 * lh * lw;

  out.inpaint_latent = Tensor::zeros(latent_shape);
  const bool missing = clip.inpaint.rank() == 0;
  out.inpaint_dropped = missing || options.drop_inpaint;
  if (!out.inpaint_dropped) {
    Tensor noisy = clip.inpaint;
    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<std::uint8_t> face(height * width, 0);
    for (const auto& per_char : clip.mouth_boxes) {
      if (per_char.empty()) continue;
      const Box& b = per_char.front();
      for (int y = std::max(0, b.y0 - options.face_dilation); y < std::min<int>(static_cast<int>(height), b.y1 + options.face_dilation); ++y)
        for (int x = std::max(0, b.x0 - options.face_dilation); x < std::min<int>(static_cast<int>(width), b.x1 + options.face_dilation); ++x)
          face[static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)] = 1;
    }
    if (options.face_noise > 0.0) {
      auto data = noisy.f32();
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < height * width; ++i)
          if (face[i]) data[c * height * width + i] += static_cast<float>(options.face_noise * noise(rng));
    }
    const Tensor pooled = avg_pool_spatial(noisy, spatial_factor);
    std::copy(pooled.f32().begin(), pooled.f32().end(), out.inpaint_latent.f32().begin());
  }

  out.ref_latent = Tensor::zeros(latent_shape);
  if (clip.refs.rank() == 4) {
    const Tensor clean = clip.ref_masks.rank() == 3 ? remove_reference_background(clip.refs, clip.ref_masks) : clip.refs;
    const std::size_t n = clean.dim(0), rh = clean.dim(2), rw = clean.dim(3);
    // Horizontal concatenation, then nearest resize to H x W.
    const std::size_t cat_w = rw * n;
    Tensor resized = Tensor::zeros({3, height, width});
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
          const std::size_t sy = y * rh / height, sx = x * cat_w / width;
          resized.at({c, y, x}) = clean.at({sx / rw, c, sy, sx % rw});
        }
    const Tensor pooled = avg_pool_spatial(resized, spatial_factor);
    std::copy(pooled.f32().begin(), pooled.f32().begin() + static_cast<long>(frame_size), out.ref_latent.f32().begin());
  }
  return out;
}

Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("nothing to concatenate");
  const Shape& s0 = parts[0].shape();
  if (s0.size() != 4) throw ShapeError("latents must be T x C x H x W");
  std::size_t channels = 0;
  for (const auto& p : parts) {
    if (p.rank() != 4 || p.dim(0) != s0[0] || p.dim(2) != s0[2] || p.dim(3) != s0[3])
      throw ShapeError("latent shapes differ outside the channel axis");
    channels += p.dim(1);
  }
  Tensor out = Tensor::zeros({s0[0], channels, s0[2], s0[3]});
  const std::size_t plane = s0[2] * s0[3];
  auto dst = out.f32();
  for (std::size_t t = 0; t < s0[0]; ++t) {
    std::size_t at = t * channels * plane;
    for (const auto& p : parts) {
      const std::size_t n = p.dim(1) * plane;
      const auto src = p.f32().subspan(t * n, n);
      std::copy(src.begin(), src.end(), dst.begin() + static_cast<long>(at));
      at += n;
    }
  }
  return out;
}

AssignmentMatrix predict_audio_character_matrix(const std::vector<Eigen::MatrixXd>& chunk_scores) {
  if (chunk_scores.empty()) throw InputError("no score chunks");
  const Eigen::Index n = chunk_scores.front().rows();
  for (const auto& s : chunk_scores)
    if (s.rows() != n || s.cols() != n) throw ShapeError("score chunks must be n x n with equal audio and character counts");
  if (n > 4) throw UnsupportedError("audio router enumerates permutations only for n <= 4");
  Eigen::MatrixXi votes = Eigen::MatrixXi::Zero(n, n);
  for (const auto& s : chunk_scores)
    for (Eigen::Index a = 0; a < n; ++a) {
      Eigen::Index best = 0;
      for (Eigen::Index c = 1; c < n; ++c)
        if (s(a, c) > s(a, best)) best = c;
      votes(a, best) += 1;
    }
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  auto total = [&](const std::vector<int>& p) {
    int v = 0;
    for (Eigen::Index a = 0; a < n; ++a) v += votes(a, p[static_cast<std::size_t>(a)]);
    return v;
  };
  // Permutations come out in lexicographic order starting from the identity,
  // so keeping the first strict maximum implements the tie-break.
  std::vector<int> best = perm;
  int best_votes = total(perm);
  while (std::next_permutation(perm.begin(), perm.end())) {
    const int v = total(perm);
    if (v > best_votes) {
      best_votes = v;
      best = perm;
    }
  }
  AssignmentMatrix out = AssignmentMatrix::Zero(n, n);
  for (Eigen::Index a = 0; a < n; ++a) out(a, best[static_cast<std::size_t>(a)]) = 1;
  return out;
}

AssignmentMatrix assignment_from_tensor(const Tensor& a_ac) {
  if (a_ac.rank() != 2 || a_ac.dim(0) != a_ac.dim(1)) throw ShapeError("A^ac must be square");
  const auto n = static_cast<Eigen::Index>(a_ac.dim(0));
  AssignmentMatrix m(n, n);
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index c = 0; c < n; ++c)
      m(r, c) = a_ac.at_u8({static_cast<std::size_t>(r), static_cast<std::size_t>(c)});
  return m;
}

Tensor assignment_to_tensor(const AssignmentMatrix& a_ac) {
  const auto n = static_cast<std::size_t>(a_ac.rows());
  Tensor t = Tensor::zeros({n, static_cast<std::size_t>(a_ac.cols())}, DType::u8);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < static_cast<std::size_t>(a_ac.cols()); ++c)
      t.at_u8({r, c}) = static_cast<std::uint8_t>(a_ac(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
  return t;
}

RelevanceScorer correlation_scorer(int window) {
  return [window](const ScorerInput& in) {
    const std::size_t n_audio = in.audio.size(), n_char = in.mouth.size();
    const std::size_t frames = in.audio.empty() ? 0 : in.audio.front().size();
    const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(std::max(window, 2)), frames);
    std::vector<Eigen::MatrixXd> chunks;
    for (std::size_t start = 0; start + w <= frames; ++start) {
      Eigen::MatrixXd s(static_cast<Eigen::Index>(n_audio), static_cast<Eigen::Index>(n_char));
      for (std::size_t a = 0; a < n_audio; ++a)
        for (std::size_t c = 0; c < n_char; ++c)
          s(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(c)) =
              pearson(std::span<const double>(in.audio[a]).subspan(start, w), std::span<const double>(in.mouth[c]).subspan(start, w));
      chunks.push_back(std::move(s));
    }
    return chunks;
  };
}

std::vector<double> mouth_signal(const Tensor& video, std::span<const Box> boxes, int pixel_scale) {
  if (video.rank() != 4 || video.dim(1) < 1) throw ShapeError("video must be T x C x H x W");
  const std::size_t frames = video.dim(0), channels = video.dim(1), h = video.dim(2), w = video.dim(3);
  std::vector<double> out(frames, 0.0);
  for (std::size_t t = 0; t < frames && t < boxes.size(); ++t) {
    const Box& b = boxes[t];
    double acc = 0.0, weight = 0.0;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const int px0 = static_cast<int>(x) * pixel_scale, py0 = static_cast<int>(y) * pixel_scale;
        const int ox = std::max(0, std::min(b.x1, px0 + pixel_scale) - std::max(b.x0, px0));
        const int oy = std::max(0, std::min(b.y1, py0 + pixel_scale) - std::max(b.y0, py0));
        const double wgt = static_cast<double>(ox * oy);
        if (wgt == 0.0) continue;
        double v = 0.0;
        for (std::size_t c = 0; c < channels; ++c) v += video.at({t, c, y, x});
        acc += wgt * v / static_cast<double>(channels);
        weight += wgt;
      }
    out[t] = weight > 0 ? acc / weight : 0.0;
  }
  return out;
}

ScorerInput scorer_input(const ClipRecord& clip, const Tensor& video, int pixel_scale) {
  ScorerInput in;
  const int frames = static_cast<int>(video.dim(0));
  for (std::size_t a = 0; a < clip.audio_feats.dim(0); ++a)
    in.audio.push_back(to_frame_rate(features_to_envelope(clip.audio_feats, a, kAudioFeatureSeed), frames));
  for (const auto& boxes : clip.mouth_boxes) in.mouth.push_back(mouth_signal(video, boxes, pixel_scale));
  return in;
}

#define BYA_INSTANTIATE_COND(S)                                                                                  \
  template AudioEncoderParams<S> add_audio_encoder(ParamStore<S>&, const ConditioningConfig&, std::mt19937_64&); \
  template FaceEncoderParams<S> add_face_encoder(ParamStore<S>&, const ConditioningConfig&, std::mt19937_64&);   \
  template TextParams<S> add_text_table(ParamStore<S>&, const ConditioningConfig&, std::mt19937_64&);            \
  template Var<S> audio_project(Tape<S>&, const AudioEncoderParams<S>&, const Matrix<S>&, int);                  \
  template std::vector<Var<S>> audio_project(Tape<S>&, const AudioEncoderParams<S>&, const Tensor&, int);        \
  template Var<S> face_encode(Tape<S>&, const FaceEncoderParams<S>&, const Matrix<S>&);                          \
  template std::vector<Var<S>> face_encode(Tape<S>&, const FaceEncoderParams<S>&, const Tensor&,                 \
                                           const ConditioningConfig&);                                           \
  template Var<S> text_embed(Tape<S>&, const TextParams<S>&, int, const ConditioningConfig&);

BYA_INSTANTIATE_COND(float)
BYA_INSTANTIATE_COND(double)

}  // namespace bya
