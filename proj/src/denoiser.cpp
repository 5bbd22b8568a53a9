#include "bya/denoiser.hpp"

#include <cmath>

namespace bya {

void DiTConfig::validate() const {
  if (layers < 1 || width < 1 || heads < 1 || patch < 1) throw ConfigError("denoiser sizes must be positive");
  if (width % heads != 0) throw ConfigError("width must be divisible by heads");
  if (height % patch != 0 || latent_width % patch != 0) throw ConfigError("latent size must be divisible by the patch size");
  if (lora_rank < 0) throw ConfigError("LoRA rank must be nonnegative");
  if (characters < 1 || face_queries < 1 || text_len < 1) throw ConfigError("condition sizes must be positive");
}

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("noise schedule needs at least one step");
  if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end)) throw ConfigError("betas must satisfy 0 < start <= end < 1");
  NoiseSchedule s;
  double prod = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double b = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (steps - 1);
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bar.push_back(prod);
  }
  return s;
}

template <typename S>
Matrix<S> lora_apply(const Matrix<S>& w, const LoRAAdapter<S>& adapter, const Matrix<S>& x) {
  if (w.cols() != x.rows()) throw ShapeError("LoRA input does not match the weight");
  if (adapter.rank == 0 || adapter.a == nullptr || adapter.b == nullptr) return w * x;
  const Matrix<S>& a = adapter.a->value;
  const Matrix<S>& b = adapter.b->value;
  if (a.rows() != adapter.rank || b.cols() != adapter.rank || a.cols() != w.cols() || b.rows() != w.rows())
    throw ShapeError("LoRA factors do not match the rank or the weight");
  return w * x + static_cast<S>(adapter.scale()) * (b * (a * x));
}

template <typename S>
Var<S> lora_linear(Var<S> x, Parameter<S>& base, const LoRAAdapter<S>* adapter) {
  Tape<S>& tape = *x.tape;
  Var<S> y = ad::matmul(x, tape.param(base));
  if (adapter == nullptr || adapter->rank == 0 || adapter->a == nullptr) return y;
  if (adapter->a->value.rows() != adapter->rank || adapter->a->value.cols() != base.value.rows() ||
      adapter->b->value.rows() != base.value.cols() || adapter->b->value.cols() != adapter->rank)
    throw ShapeError("LoRA factors do not match the rank or the weight");
  Var<S> low = ad::matmul_nt(ad::matmul_nt(x, tape.param(*adapter->a)), tape.param(*adapter->b));
  return ad::add(y, ad::scale(low, static_cast<S>(adapter->scale())));
}

Matrix<double> sinusoidal_positions(const TokenGridDims& grid, int width) {
  const int wt = 2 * (width / 4), wh = 2 * (width / 8);
  const int ww = width - wt - wh;
  Matrix<double> out = Matrix<double>::Zero(grid.tokens(), width);
  for (int s = 0; s < grid.tokens(); ++s) {
    const TokenIndex p = token_unflatten(s, grid);
    const int pos[3] = {p.t, p.h, p.w};
    const int chunk[3] = {wt, wh, ww};
    int offset = 0;
    for (int axis = 0; axis < 3; ++axis) {
      for (int j = 0; j + 1 < chunk[axis]; j += 2) {
        const double freq = std::pow(100.0, -static_cast<double>(j) / chunk[axis]);
        out(s, offset + j) = std::sin(pos[axis] * freq);
        out(s, offset + j + 1) = std::cos(pos[axis] * freq);
      }
      offset += chunk[axis];
    }
  }
  return out;
}

Matrix<double> sinusoidal_time(double t, int width) {
  Matrix<double> out = Matrix<double>::Zero(1, width);
  const int half = width / 2;
  for (int j = 0; j < half; ++j) {
    const double freq = std::pow(10000.0, -static_cast<double>(j) / half);
    out(0, j) = std::sin(t * freq);
    out(0, half + j) = std::cos(t * freq);
  }
  return out;
}

namespace {

template <typename S>
Parameter<S>& linear(ParamStore<S>& store, const std::string& name, const std::string& group, int in, int out, double gain,
                     std::mt19937_64& rng) {
  return store.add(name, group, random_normal<S>(in, out, gain / std::sqrt(static_cast<double>(in)), rng));
}

template <typename S>
LoRAAdapter<S> add_lora(ParamStore<S>& store, const std::string& name, int in, int out, const DiTConfig& cfg,
                        std::mt19937_64& rng) {
  LoRAAdapter<S> a;
  a.rank = cfg.lora_rank;
  a.alpha = cfg.lora_alpha;
  if (cfg.lora_rank == 0) return a;
  a.a = &store.add(name + ".lora_a", group::kLora,
                   random_normal<S>(cfg.lora_rank, in, 1.0 / std::sqrt(static_cast<double>(in)), rng));
  a.b = &store.add(name + ".lora_b", group::kLora, Matrix<S>::Zero(out, cfg.lora_rank));
  return a;
}

template <typename S>
CrossAttentionParams<S> add_cross(ParamStore<S>& store, const std::string& name, const std::string& group, int d,
                                  std::mt19937_64& rng) {
  CrossAttentionParams<S> c;
  c.wq = &linear(store, name + ".wq", group, d, d, 1.0, rng);
  c.wk = &linear(store, name + ".wk", group, d, d, 1.0, rng);
  c.wv = &linear(store, name + ".wv", group, d, d, 1.0, rng);
  c.wo = &linear(store, name + ".wo", group, d, d, 0.1, rng);
  return c;
}

/// Gated sum of per-character attention, then the output projection.
template <typename S>
Var<S> gated_attention(Var<S> q, const std::vector<Var<S>>& keys, const std::vector<Var<S>>& values, const Matrix<S>& gate,
                       Parameter<S>& wo, int heads, const Matrix<S>* bias) {
  Tape<S>& tape = *q.tape;
  Var<S> acc;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    Var<S> col = tape.constant(gate.row(static_cast<Eigen::Index>(i)).transpose());
    Var<S> term = ad::mul_col(ad::attention(q, keys[i], values[i], heads, bias), col);
    acc = acc.valid() ? ad::add(acc, term) : term;
  }
  return ad::matmul(acc, tape.param(wo));
}

template <typename S>
void check_gate(const Matrix<S>& gate, std::size_t characters, Eigen::Index tokens, const char* what) {
  if (gate.rows() != static_cast<Eigen::Index>(characters) || gate.cols() != tokens)
    throw ShapeError(std::string(what) + " gate must be n x S");
}

}  // namespace

template <typename S>
DenoiserParams<S> add_denoiser(ParamStore<S>& store, const DiTConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  DenoiserParams<S> p;
  p.cfg = cfg;
  const int d = cfg.width;
  const std::string dit = group::kDit;
  p.patch_w = &linear(store, "dit.patch_w", dit, cfg.patch_features(), d, 1.0, rng);
  p.patch_b = &store.add("dit.patch_b", dit, Matrix<S>::Zero(1, d));
  p.time_w1 = &linear(store, "dit.time_w1", dit, d, d, 1.0, rng);
  p.time_b1 = &store.add("dit.time_b1", dit, Matrix<S>::Zero(1, d));
  p.time_w2 = &linear(store, "dit.time_w2", dit, d, d, 1.0, rng);
  p.time_b2 = &store.add("dit.time_b2", dit, Matrix<S>::Zero(1, d));
  const int hidden = d * cfg.mlp_ratio;
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string pre = "dit.block" + std::to_string(l);
    DiTBlockParams<S> b;
    b.wqkv = &linear(store, pre + ".wqkv", dit, d, 3 * d, 1.0, rng);
    b.wo = &linear(store, pre + ".wo", dit, d, d, 0.5, rng);
    b.fc1 = &linear(store, pre + ".fc1", dit, d, hidden, 1.0, rng);
    b.fc1_b = &store.add(pre + ".fc1_b", dit, Matrix<S>::Zero(1, hidden));
    b.fc2 = &linear(store, pre + ".fc2", dit, hidden, d, 0.5, rng);
    b.fc2_b = &store.add(pre + ".fc2_b", dit, Matrix<S>::Zero(1, d));
    b.lora_qkv = add_lora(store, pre + ".wqkv", d, 3 * d, cfg, rng);
    b.lora_o = add_lora(store, pre + ".wo", d, d, cfg, rng);
    b.lora_fc1 = add_lora(store, pre + ".fc1", d, hidden, cfg, rng);
    b.lora_fc2 = add_lora(store, pre + ".fc2", hidden, d, cfg, rng);
    b.face = add_cross(store, "face_xattn" + std::to_string(l), group::kFaceXattn, d, rng);
    b.audio = add_cross(store, "audio_xattn" + std::to_string(l), group::kAudioXattn, d, rng);
    p.blocks.push_back(b);
  }
  p.head_w = &linear(store, "dit.head_w", dit, d, cfg.output_features(), 0.1, rng);
  p.head_b = &store.add("dit.head_b", dit, Matrix<S>::Zero(1, cfg.output_features()));
  p.position = sinusoidal_positions(cfg.grid(), d).template cast<S>();
  return p;
}

template <typename S>
Matrix<S> patchify_rows(const Tensor& latent, int patch) {
  if (latent.rank() != 4) throw ShapeError("latent must be T' x C x H' x W'");
  const std::size_t frames = latent.dim(0), channels = latent.dim(1), h = latent.dim(2), w = latent.dim(3);
  const auto tau = static_cast<std::size_t>(patch);
  if (patch < 1 || h % tau != 0 || w % tau != 0) throw ShapeError("latent size must be divisible by the patch size");
  const std::size_t hp = h / tau, wp = w / tau;
  Matrix<S> rows(static_cast<Eigen::Index>(frames * hp * wp), static_cast<Eigen::Index>(channels * tau * tau));
  const auto data = latent.f32();
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t ph = 0; ph < hp; ++ph)
      for (std::size_t pw = 0; pw < wp; ++pw) {
        const auto r = static_cast<Eigen::Index>((t * hp + ph) * wp + pw);
        for (std::size_t c = 0; c < channels; ++c)
          for (std::size_t dy = 0; dy < tau; ++dy)
            for (std::size_t dx = 0; dx < tau; ++dx)
              rows(r, static_cast<Eigen::Index>((c * tau + dy) * tau + dx)) =
                  static_cast<S>(data[((t * channels + c) * h + ph * tau + dy) * w + pw * tau + dx]);
      }
  return rows;
}

Tensor unpatchify_rows(const Matrix<float>& rows, const TokenGridDims& grid, int channels, int patch) {
  const auto tau = static_cast<std::size_t>(patch);
  const auto c_count = static_cast<std::size_t>(channels);
  if (rows.rows() != grid.tokens() || rows.cols() != static_cast<Eigen::Index>(c_count * tau * tau))
    throw ShapeError("patch rows do not match the grid");
  const auto frames = static_cast<std::size_t>(grid.t_len), hp = static_cast<std::size_t>(grid.h_len),
             wp = static_cast<std::size_t>(grid.w_len);
  const std::size_t h = hp * tau, w = wp * tau;
  Tensor out = Tensor::zeros({frames, c_count, h, w});
  auto data = out.f32();
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t ph = 0; ph < hp; ++ph)
      for (std::size_t pw = 0; pw < wp; ++pw) {
        const auto r = static_cast<Eigen::Index>((t * hp + ph) * wp + pw);
        for (std::size_t c = 0; c < c_count; ++c)
          for (std::size_t dy = 0; dy < tau; ++dy)
            for (std::size_t dx = 0; dx < tau; ++dx)
              data[((t * c_count + c) * h + ph * tau + dy) * w + pw * tau + dx] =
                  rows(r, static_cast<Eigen::Index>((c * tau + dy) * tau + dx));
      }
  return out;
}

template <typename S>
Var<S> patchify(Tape<S>& tape, const DenoiserParams<S>& p, const Tensor& latent) {
  const DiTConfig& cfg = p.cfg;
  if (latent.rank() != 4 || static_cast<int>(latent.dim(0)) != cfg.frames ||
      static_cast<int>(latent.dim(1)) != cfg.input_channels() || static_cast<int>(latent.dim(2)) != cfg.height ||
      static_cast<int>(latent.dim(3)) != cfg.latent_width)
    throw ShapeError("latent shape does not match the denoiser configuration");
  Var<S> rows = tape.constant(patchify_rows<S>(latent, cfg.patch));
  return ad::add_row(ad::matmul(rows, tape.param(*p.patch_w)), tape.param(*p.patch_b));
}

template <typename S>
Var<S> masked_cross_attention(Var<S> x, const std::vector<Var<S>>& embeds, const Matrix<S>& gate,
                              const CrossAttentionParams<S>& p, int heads, const Matrix<S>* bias, Var<S>* query_out,
                              Var<S>* key_out) {
  if (embeds.empty()) throw ShapeError("cross-attention needs at least one embedding sequence");
  check_gate(gate, embeds.size(), x.rows(), "cross-attention");
  Tape<S>& tape = *x.tape;
  Var<S> q = ad::matmul(x, tape.param(*p.wq));
  std::vector<Var<S>> keys, values;
  for (const auto& e : embeds) {
    if (e.cols() != x.cols()) throw ShapeError("embedding width does not match the visual tokens");
    keys.push_back(ad::matmul(e, tape.param(*p.wk)));
    values.push_back(ad::matmul(e, tape.param(*p.wv)));
  }
  if (query_out != nullptr) *query_out = q;
  if (key_out != nullptr) *key_out = ad::concat_rows<S>(keys);
  return gated_attention(q, keys, values, gate, *p.wo, heads, bias);
}

template <typename S>
Var<S> denoiser_forward(const DenoiserParams<S>& p, const DenoiserInputs<S>& in, const GateProvider<S>& gates,
                        std::vector<AttentionTap<S>>* taps) {
  const DiTConfig& cfg = p.cfg;
  if (!gates) throw ContractError("denoiser needs gates for every layer");
  if (in.latent == nullptr) throw ContractError("denoiser input latent missing");
  if (static_cast<int>(in.faces.size()) != cfg.characters) throw ShapeError("one face embedding per character required");
  if (!in.audio.empty() && static_cast<int>(in.audio.size()) != cfg.characters)
    throw ShapeError("one audio embedding per character required");
  Tape<S>& tape = *in.text.tape;
  const int tokens = cfg.tokens();
  const int d = cfg.width;

  Var<S> v = ad::add(patchify(tape, p, *in.latent), tape.constant(p.position));
  Var<S> temb = tape.constant(sinusoidal_time(in.t, d).template cast<S>());
  temb = ad::silu(ad::add_row(ad::matmul(temb, tape.param(*p.time_w1)), tape.param(*p.time_b1)));
  temb = ad::add_row(ad::matmul(temb, tape.param(*p.time_w2)), tape.param(*p.time_b2));
  v = ad::add_row(v, temb);

  Matrix<S> audio_bias;
  const Matrix<S>* audio_bias_ptr = nullptr;
  if (!in.audio.empty() && cfg.audio_window >= 0) {
    const Eigen::Index audio_len = in.audio.front().rows();
    audio_bias = Matrix<S>::Zero(tokens, audio_len);
    const TokenGridDims grid = cfg.grid();
    for (int s = 0; s < tokens; ++s) {
      const int t = token_unflatten(s, grid).t;
      for (Eigen::Index a = 0; a < audio_len; ++a) {
        const long frame = static_cast<long>(a) * cfg.frames / static_cast<long>(audio_len);
        if (std::abs(frame - t) > cfg.audio_window) audio_bias(s, a) = S(-1e9);
      }
    }
    audio_bias_ptr = &audio_bias;
  }

  if (taps != nullptr) taps->clear();
  Var<S> text = in.text;
  for (int l = 0; l < cfg.layers; ++l) {
    const DiTBlockParams<S>& blk = p.blocks[static_cast<std::size_t>(l)];
    const std::vector<Var<S>> seq = {v, text};
    Var<S> x = ad::concat_rows<S>(seq);
    Var<S> h = ad::layer_norm_rows(x);
    Var<S> qkv = lora_linear(h, *blk.wqkv, &blk.lora_qkv);
    Var<S> attn = ad::attention(ad::slice_cols(qkv, 0, d), ad::slice_cols(qkv, d, d), ad::slice_cols(qkv, 2 * d, d), cfg.heads);
    x = ad::add(x, lora_linear(attn, *blk.wo, &blk.lora_o));
    h = ad::layer_norm_rows(x);
    Var<S> m = ad::silu(ad::add_row(lora_linear(h, *blk.fc1, &blk.lora_fc1), tape.param(*blk.fc1_b)));
    x = ad::add(x, ad::add_row(lora_linear(m, *blk.fc2, &blk.lora_fc2), tape.param(*blk.fc2_b)));
    v = ad::slice_rows(x, 0, tokens);
    text = ad::slice_rows(x, tokens, x.rows() - tokens);

    // Face step: the gate is requested once the taps exist.
    Var<S> hv = ad::layer_norm_rows(v);
    AttentionTap<S> tap;
    tap.q = ad::matmul(hv, tape.param(*blk.face.wq));
    std::vector<Var<S>> keys, values;
    for (const auto& e : in.faces) {
      keys.push_back(ad::matmul(e, tape.param(*blk.face.wk)));
      values.push_back(ad::matmul(e, tape.param(*blk.face.wv)));
    }
    tap.k = ad::concat_rows<S>(keys);
    if (taps != nullptr) taps->push_back(tap);
    const LayerGates<S> g = gates(l, tap);
    check_gate(g.face, in.faces.size(), tokens, "face");
    Var<S> v_face = ad::add(v, gated_attention(tap.q, keys, values, g.face, *blk.face.wo, cfg.heads, static_cast<const Matrix<S>*>(nullptr)));

    if (in.audio.empty()) {
      v = v_face;
    } else {
      check_gate(g.audio, in.audio.size(), tokens, "audio");
      Var<S> inc = masked_cross_attention(ad::layer_norm_rows(v_face), in.audio, g.audio, blk.audio, cfg.heads, audio_bias_ptr);
      v = ad::add(cfg.audio_residual_on_face ? v_face : v, inc);
    }
  }
  return ad::add_row(ad::matmul(ad::layer_norm_rows(v), tape.param(*p.head_w)), tape.param(*p.head_b));
}

Tensor add_noise(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
  if (t < 0 || t >= schedule.steps()) throw BoundsError("diffusion time " + std::to_string(t) + " out of range");
  if (z0.shape() != eps.shape()) throw ShapeError("noise shape differs from the latent");
  const double ab = schedule.alpha_bar[static_cast<std::size_t>(t)];
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out = z0;
  auto o = out.f32();
  const auto e = eps.f32();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<float>(a * o[i] + b * e[i]);
  return out;
}

template <typename S>
Var<S> diffusion_loss(Var<S> eps_hat, const Matrix<S>& eps, const Matrix<S>* weight_mask, double kappa) {
  if (eps_hat.rows() != eps.rows() || eps_hat.cols() != eps.cols()) throw ShapeError("noise prediction shape mismatch");
  Tape<S>& tape = *eps_hat.tape;
  Var<S> sq = ad::square(ad::sub(eps_hat, tape.constant(eps)));
  if (weight_mask != nullptr) {
    if (weight_mask->rows() != eps.rows() || weight_mask->cols() != eps.cols()) throw ShapeError("loss weight shape mismatch");
    const Matrix<S> w = (S(1) + static_cast<S>(kappa) * weight_mask->array()).matrix();
    sq = ad::mul(sq, tape.constant(w));
  }
  return ad::mean(sq);
}

double diffusion_loss(const Tensor& eps_hat, const Tensor& eps, const Tensor* union_mask, bool apply_dynamic, double kappa) {
  if (eps_hat.shape() != eps.shape() || eps.rank() != 4) throw ShapeError("noise tensors must share a T' x C' x H' x W' shape");
  const std::size_t frames = eps.dim(0), channels = eps.dim(1), plane = eps.dim(2) * eps.dim(3);
  std::vector<double> weight(frames * plane, 0.0);
  if (apply_dynamic && union_mask != nullptr) {
    const Tensor& m = *union_mask;
    if (m.rank() == 3 && m.dim(0) == frames && m.dim(1) * m.dim(2) == plane) {
      for (std::size_t i = 0; i < weight.size(); ++i) weight[i] = m.f32()[i];
    } else if (m.rank() == 4 && m.dim(1) == frames && m.dim(2) * m.dim(3) == plane) {
      for (std::size_t c = 0; c < m.dim(0); ++c)
        for (std::size_t i = 0; i < weight.size(); ++i) weight[i] += m.f32()[c * weight.size() + i];
      for (auto& w : weight) w = std::min(1.0, w);
    } else {
      throw ShapeError("dynamic mask does not match the latent grid");
    }
  }
  double acc = 0.0;
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t k = (t * channels + c) * plane + i;
        const double diff = static_cast<double>(eps_hat.f32()[k]) - eps.f32()[k];
        acc += (1.0 + kappa * weight[t * plane + i]) * diff * diff;
      }
  return acc / static_cast<double>(eps.size());
}

Tensor latent_union_mask(const Tensor& gt_masks, int spatial_factor) {
  const Tensor cov = downsample_mask(gt_masks, spatial_factor, 1);
  const std::size_t n = cov.dim(0), rest = cov.size() / n;
  Tensor out = Tensor::zeros({cov.dim(1), cov.dim(2), cov.dim(3)});
  for (std::size_t i = 0; i < rest; ++i) {
    float total = 0.0f;
    for (std::size_t c = 0; c < n; ++c) total += cov.f32()[c * rest + i];
    out.f32()[i] = std::min(1.0f, total);
  }
  return out;
}

#define BYA_INSTANTIATE_DIT(S)                                                                                          \
  template Matrix<S> lora_apply(const Matrix<S>&, const LoRAAdapter<S>&, const Matrix<S>&);                             \
  template Var<S> lora_linear(Var<S>, Parameter<S>&, const LoRAAdapter<S>*);                                            \
  template DenoiserParams<S> add_denoiser(ParamStore<S>&, const DiTConfig&, std::mt19937_64&);                          \
  template Matrix<S> patchify_rows(const Tensor&, int);                                                                 \
  template Var<S> patchify(Tape<S>&, const DenoiserParams<S>&, const Tensor&);                                          \
  template Var<S> masked_cross_attention(Var<S>, const std::vector<Var<S>>&, const Matrix<S>&,                          \
                                         const CrossAttentionParams<S>&, int, const Matrix<S>*, Var<S>*, Var<S>*);      \
  template Var<S> denoiser_forward(const DenoiserParams<S>&, const DenoiserInputs<S>&, const GateProvider<S>&,          \
                                   std::vector<AttentionTap<S>>*);                                                      \
  template Var<S> diffusion_loss(Var<S>, const Matrix<S>&, const Matrix<S>*, double);

BYA_INSTANTIATE_DIT(float)
BYA_INSTANTIATE_DIT(double)

}  // namespace bya
