#include "bya/router_net.hpp"

#include <cmath>

namespace bya {

std::array<int, 3> RouterConfig::rope_split() const {
  const int pairs = block_head_dim() / 2;
  const int extent = grid.t_len + grid.h_len + grid.w_len;
  const int h_pairs = pairs * grid.h_len / extent;
  const int w_pairs = pairs * grid.w_len / extent;
  return {2 * (pairs - h_pairs - w_pairs), 2 * h_pairs, 2 * w_pairs};
}

namespace {

void check_split(const std::array<int, 3>& split, Eigen::Index dim) {
  for (int c : split)
    if (c < 0 || c % 2 != 0) throw ConfigError("rotary chunks must be even and nonnegative");
  if (split[0] + split[1] + split[2] != dim) throw ConfigError("rotary split does not add up to the feature width");
}

/// Rotate every head chunk of `m` in place; `sign` = -1 applies the inverse.
template <typename S>
void rotate(Matrix<S>& m, const std::vector<TokenIndex>& positions, const std::array<int, 3>& split, int sign) {
  const Eigen::Index chunk = split[0] + split[1] + split[2];
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const TokenIndex& p = positions[static_cast<std::size_t>(r)];
    const std::array<int, 3> pos = {p.t, p.h, p.w};
    for (Eigen::Index base = 0; base < m.cols(); base += chunk) {
      Eigen::Index offset = base;
      for (int axis = 0; axis < 3; ++axis) {
        const int d = split[static_cast<std::size_t>(axis)];
        for (int j = 0; j < d / 2; ++j) {
          const double theta = sign * pos[static_cast<std::size_t>(axis)] * std::pow(10000.0, -2.0 * j / d);
          const S c = static_cast<S>(std::cos(theta)), s = static_cast<S>(std::sin(theta));
          const S x0 = m(r, offset + 2 * j), x1 = m(r, offset + 2 * j + 1);
          m(r, offset + 2 * j) = x0 * c - x1 * s;
          m(r, offset + 2 * j + 1) = x0 * s + x1 * c;
        }
        offset += d;
      }
    }
  }
}

template <typename S>
Matrix<S> identity_init(int dim, std::mt19937_64& rng) {
  Matrix<S> m = Matrix<S>::Identity(dim, dim);
  return m + random_normal<S>(dim, dim, 0.02, rng);
}

std::vector<TokenIndex> grid_positions(const TokenGridDims& grid) {
  std::vector<TokenIndex> pos;
  for (int s = 0; s < grid.tokens(); ++s) pos.push_back(token_unflatten(s, grid));
  return pos;
}

}  // namespace

template <typename S>
Matrix<S> rope3d_apply(const Matrix<S>& features, const std::vector<TokenIndex>& positions, const std::array<int, 3>& split) {
  check_split(split, features.cols());
  if (static_cast<Eigen::Index>(positions.size()) != features.rows()) throw ShapeError("one position per row required");
  Matrix<S> out = features;
  rotate(out, positions, split, 1);
  return out;
}

namespace ad {

template <typename S>
Var<S> rope3d(Var<S> features, const std::vector<TokenIndex>& positions, const std::array<int, 3>& split) {
  const Eigen::Index chunk = split[0] + split[1] + split[2];
  if (chunk <= 0 || features.cols() % chunk != 0) throw ConfigError("rotary chunk does not divide the feature width");
  check_split(split, chunk);
  if (static_cast<Eigen::Index>(positions.size()) != features.rows()) throw ShapeError("one position per row required");
  Matrix<S> out = features.value();
  rotate(out, positions, split, 1);
  Tape<S>& t = *features.tape;
  const int id = features.id;
  return t.record(std::move(out), t.needs_grad(id), [id, positions, split](Tape<S>& tp, const Matrix<S>& g) {
    Matrix<S> back = g;
    rotate(back, positions, split, -1);
    tp.accumulate(id, back);
  });
}

}  // namespace ad

template <typename S>
RouterParams<S> add_router(ParamStore<S>& store, const RouterConfig& cfg, std::mt19937_64& rng) {
  if (cfg.width % cfg.block_heads != 0) throw ConfigError("router width must divide into block heads");
  RouterParams<S> p;
  p.cfg = cfg;
  const std::string g = group::kRouter;
  for (int l = 0; l < cfg.layers; ++l) {
    p.qmap.push_back(&store.add("router.qmap." + std::to_string(l), g, identity_init<S>(cfg.head_dim, rng)));
    p.kmap.push_back(&store.add("router.kmap." + std::to_string(l), g, identity_init<S>(cfg.head_dim, rng)));
  }
  const int features = cfg.heads * cfg.keys();
  const double in_std = 1.0 / std::sqrt(static_cast<double>(features));
  const double w_std = 1.0 / std::sqrt(static_cast<double>(cfg.width));
  p.in_w = &store.add("router.in_w", g, random_normal<S>(features, cfg.width, in_std * 4.0, rng));
  p.in_b = &store.add("router.in_b", g, Matrix<S>::Zero(1, cfg.width));
  const int hidden = cfg.width * cfg.mlp_ratio;
  for (int b = 0; b < cfg.blocks; ++b) {
    const std::string pre = "router.block" + std::to_string(b) + ".";
    RouterBlockParams<S> blk;
    blk.wq = &store.add(pre + "wq", g, random_normal<S>(cfg.width, cfg.width, w_std, rng));
    blk.wk = &store.add(pre + "wk", g, random_normal<S>(cfg.width, cfg.width, w_std, rng));
    blk.wv = &store.add(pre + "wv", g, random_normal<S>(cfg.width, cfg.width, w_std, rng));
    blk.wo = &store.add(pre + "wo", g, random_normal<S>(cfg.width, cfg.width, w_std * 0.5, rng));
    blk.fc1 = &store.add(pre + "fc1", g, random_normal<S>(cfg.width, hidden, w_std, rng));
    blk.fc1_b = &store.add(pre + "fc1_b", g, Matrix<S>::Zero(1, hidden));
    blk.fc2 = &store.add(pre + "fc2", g, random_normal<S>(hidden, cfg.width, 0.5 / std::sqrt(static_cast<double>(hidden)), rng));
    blk.fc2_b = &store.add(pre + "fc2_b", g, Matrix<S>::Zero(1, cfg.width));
    p.blocks.push_back(blk);
  }
  p.head_w = &store.add("router.head_w", g, random_normal<S>(cfg.width, cfg.characters + 1, w_std, rng));
  p.head_b = &store.add("router.head_b", g, Matrix<S>::Zero(1, cfg.characters + 1));
  return p;
}

template <typename S>
Var<S> router_layer_logits(const RouterParams<S>& p, int layer, const AttentionTap<S>& tap) {
  const RouterConfig& cfg = p.cfg;
  const Eigen::Index tokens = cfg.grid.tokens();
  if (layer < 0 || layer >= cfg.layers) throw ShapeError("router layer out of range");
  if (tap.q.rows() != tokens || tap.q.cols() != cfg.heads * cfg.head_dim)
    throw ShapeError("router query tap must be S x (heads * d_h)");
  if (tap.k.rows() != cfg.keys() || tap.k.cols() != cfg.heads * cfg.head_dim)
    throw ShapeError("router key tap must be (n * q) x (heads * d_h)");
  Tape<S>& tape = *tap.q.tape;
  Var<S> q = ad::detach(tap.q);
  Var<S> k = ad::detach(tap.k);
  Var<S> qmap = tape.param(*p.qmap[static_cast<std::size_t>(layer)]);
  Var<S> kmap = tape.param(*p.kmap[static_cast<std::size_t>(layer)]);
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(cfg.head_dim));
  std::vector<Var<S>> weights;
  for (int h = 0; h < cfg.heads; ++h) {
    Var<S> qh = ad::matmul(ad::slice_cols(q, h * cfg.head_dim, cfg.head_dim), qmap);
    Var<S> kh = ad::matmul(ad::slice_cols(k, h * cfg.head_dim, cfg.head_dim), kmap);
    weights.push_back(ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt)));
  }
  Var<S> x = ad::add_row(ad::matmul(ad::concat_cols<S>(weights), tape.param(*p.in_w)), tape.param(*p.in_b));

  const std::vector<TokenIndex> positions = grid_positions(cfg.grid);
  const std::array<int, 3> split = cfg.rope_split();
  for (const auto& blk : p.blocks) {
    Var<S> h = ad::layer_norm_rows(x);
    Var<S> qb = ad::rope3d(ad::matmul(h, tape.param(*blk.wq)), positions, split);
    Var<S> kb = ad::rope3d(ad::matmul(h, tape.param(*blk.wk)), positions, split);
    Var<S> vb = ad::matmul(h, tape.param(*blk.wv));
    x = ad::add(x, ad::matmul(ad::attention(qb, kb, vb, cfg.block_heads), tape.param(*blk.wo)));
    Var<S> m = ad::layer_norm_rows(x);
    m = ad::silu(ad::add_row(ad::matmul(m, tape.param(*blk.fc1)), tape.param(*blk.fc1_b)));
    x = ad::add(x, ad::add_row(ad::matmul(m, tape.param(*blk.fc2)), tape.param(*blk.fc2_b)));
  }
  return ad::add_row(ad::matmul(ad::layer_norm_rows(x), tape.param(*p.head_w)), tape.param(*p.head_b));
}

template <typename S>
RouterOutput<S> router_forward(const RouterParams<S>& p, const std::vector<AttentionTap<S>>& taps) {
  if (static_cast<int>(taps.size()) != p.cfg.layers) throw ShapeError("router expects one tap per denoiser layer");
  RouterOutput<S> out;
  for (int l = 0; l < p.cfg.layers; ++l) {
    out.logits.push_back(router_layer_logits(p, l, taps[static_cast<std::size_t>(l)]));
    out.probs.push_back(ad::softmax_rows(out.logits.back()));
  }
  return out;
}

template <typename S>
RoutingMask to_routing_mask(const RouterOutput<S>& out, const TokenGridDims& grid, int characters) {
  RoutingMask m;
  m.grid = grid;
  m.characters = characters;
  for (const auto& p : out.probs) m.layers.push_back(p.value().template cast<float>());
  return m;
}

template <typename S>
Var<S> loss_ce(const std::vector<Var<S>>& probs, const std::vector<Matrix<S>>& targets, bool mean) {
  if (probs.empty() || probs.size() != targets.size()) throw ShapeError("cross-entropy needs one target per layer");
  Tape<S>& tape = *probs.front().tape;
  Var<S> total;
  Eigen::Index positions = 0;
  for (std::size_t l = 0; l < probs.size(); ++l) {
    if (probs[l].rows() != targets[l].rows() || probs[l].cols() != targets[l].cols())
      throw ShapeError("cross-entropy target shape mismatch");
    Var<S> term = ad::sum(ad::mul(tape.constant(targets[l]), ad::log_clamped(probs[l], S(1e-12))));
    total = total.valid() ? ad::add(total, term) : term;
    positions += probs[l].rows();
  }
  const S factor = mean ? S(-1) / static_cast<S>(positions) : S(-1);
  return ad::scale(total, factor);
}

template <typename S>
Var<S> loss_st(const std::vector<Var<S>>& probs, const TokenGridDims& grid, int characters) {
  if (probs.empty()) throw ShapeError("smoothness loss needs at least one layer");
  const int tokens = grid.tokens();
  const Eigen::Index cols = probs.front().cols();
  if (probs.front().rows() != tokens || cols < characters) throw ShapeError("smoothness loss input does not match the grid");
  // Flat indices into an S x cols layer for every (neighbour pair, character).
  std::vector<int> idx_cur, idx_nxt;
  for (int axis = 0; axis < 3; ++axis)
    for (int s = 0; s < tokens; ++s) {
      TokenIndex p = token_unflatten(s, grid);
      if (axis == 0) ++p.t;
      if (axis == 1) ++p.h;
      if (axis == 2) ++p.w;
      if (p.t >= grid.t_len || p.h >= grid.h_len || p.w >= grid.w_len) continue;
      const int other = token_flatten(p.t, p.h, p.w, grid);
      for (int c = 0; c < characters; ++c) {
        idx_cur.push_back(s * static_cast<int>(cols) + c);
        idx_nxt.push_back(other * static_cast<int>(cols) + c);
      }
    }
  Var<S> total;
  const auto count = static_cast<Eigen::Index>(idx_cur.size());
  if (count == 0) return ad::scale(ad::sum(probs.front()), S(0));
  for (const auto& p : probs) {
    Var<S> diff = ad::sub(ad::gather<S>(p, idx_nxt, count, 1), ad::gather<S>(p, idx_cur, count, 1));
    Var<S> term = ad::sum(ad::abs(diff));
    total = total.valid() ? ad::add(total, term) : term;
  }
  return total;
}

template <typename S>
Var<S> loss_layer(const std::vector<Var<S>>& probs, int characters) {
  if (probs.size() < 2) throw ConfigError("layer-consistency loss needs at least two layers");
  std::vector<Var<S>> chars;
  for (const auto& p : probs) chars.push_back(ad::slice_cols(p, 0, characters));
  Var<S> mean_l = chars.front();
  for (std::size_t l = 1; l < chars.size(); ++l) mean_l = ad::add(mean_l, chars[l]);
  const S inv = S(1) / static_cast<S>(chars.size());
  mean_l = ad::scale(mean_l, inv);
  Var<S> total;
  for (const auto& c : chars) {
    Var<S> term = ad::sum(ad::square(ad::sub(c, mean_l)));
    total = total.valid() ? ad::add(total, term) : term;
  }
  return ad::scale(total, inv);
}

template <typename S>
Var<S> loss_router(const std::vector<Var<S>>& probs, const std::vector<Matrix<S>>& targets, const TokenGridDims& grid,
                   int characters, const RouterLossWeights& weights, bool mean) {
  if (weights.ce < 0 || weights.st < 0 || weights.layer < 0) throw ConfigError("router loss weights must be nonnegative");
  Var<S> total = ad::scale(loss_ce(probs, targets, mean), static_cast<S>(weights.ce));
  if (weights.st != 0.0) total = ad::add(total, ad::scale(loss_st(probs, grid, characters), static_cast<S>(weights.st)));
  if (weights.layer != 0.0) total = ad::add(total, ad::scale(loss_layer(probs, characters), static_cast<S>(weights.layer)));
  return total;
}

namespace {

/// L x C x T' x h x w tensor to per-layer S x C matrices on `tape`.
std::vector<Var<double>> layers_of(Tape<double>& tape, const Tensor& t, TokenGridDims& grid) {
  if (t.rank() != 5) throw ShapeError("mask tensor must be L x C x T' x h x w");
  grid = {static_cast<int>(t.dim(2)), static_cast<int>(t.dim(3)), static_cast<int>(t.dim(4))};
  const std::size_t c_count = t.dim(1), s_count = t.dim(2) * t.dim(3) * t.dim(4);
  std::vector<Var<double>> out;
  for (std::size_t l = 0; l < t.dim(0); ++l) {
    Matrix<double> m(static_cast<Eigen::Index>(s_count), static_cast<Eigen::Index>(c_count));
    for (std::size_t c = 0; c < c_count; ++c)
      for (std::size_t s = 0; s < s_count; ++s)
        m(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(c)) = t.f32()[(l * c_count + c) * s_count + s];
    out.push_back(tape.constant(std::move(m)));
  }
  return out;
}

std::vector<Matrix<double>> values_of(const std::vector<Var<double>>& vars) {
  std::vector<Matrix<double>> out;
  for (const auto& v : vars) out.push_back(v.value());
  return out;
}

}  // namespace

double loss_ce(const Tensor& probs, const Tensor& targets, bool mean) {
  if (probs.shape() != targets.shape()) throw ShapeError("cross-entropy target shape mismatch");
  Tape<double> tape;
  TokenGridDims grid;
  const auto p = layers_of(tape, probs, grid);
  const auto y = layers_of(tape, targets, grid);
  return loss_ce(p, values_of(y), mean).item();
}

double loss_st(const Tensor& mask) {
  Tape<double> tape;
  TokenGridDims grid;
  const auto m = layers_of(tape, mask, grid);
  return loss_st(m, grid, static_cast<int>(mask.dim(1))).item();
}

double loss_layer(const Tensor& mask) {
  Tape<double> tape;
  TokenGridDims grid;
  const auto m = layers_of(tape, mask, grid);
  return loss_layer(m, static_cast<int>(mask.dim(1))).item();
}

double loss_router(const Tensor& probs, const Tensor& targets, const RouterLossWeights& weights, bool mean) {
  if (probs.shape() != targets.shape()) throw ShapeError("cross-entropy target shape mismatch");
  Tape<double> tape;
  TokenGridDims grid;
  const auto p = layers_of(tape, probs, grid);
  const auto y = layers_of(tape, targets, grid);
  return loss_router(p, values_of(y), grid, static_cast<int>(probs.dim(1)) - 1, weights, mean).item();
}

#define BYA_INSTANTIATE_ROUTER(S)                                                                                   \
  template Matrix<S> rope3d_apply(const Matrix<S>&, const std::vector<TokenIndex>&, const std::array<int, 3>&);     \
  template Var<S> ad::rope3d(Var<S>, const std::vector<TokenIndex>&, const std::array<int, 3>&);                    \
  template RouterParams<S> add_router(ParamStore<S>&, const RouterConfig&, std::mt19937_64&);                       \
  template Var<S> router_layer_logits(const RouterParams<S>&, int, const AttentionTap<S>&);                         \
  template RouterOutput<S> router_forward(const RouterParams<S>&, const std::vector<AttentionTap<S>>&);             \
  template RoutingMask to_routing_mask(const RouterOutput<S>&, const TokenGridDims&, int);                          \
  template Var<S> loss_ce(const std::vector<Var<S>>&, const std::vector<Matrix<S>>&, bool);                         \
  template Var<S> loss_st(const std::vector<Var<S>>&, const TokenGridDims&, int);                                   \
  template Var<S> loss_layer(const std::vector<Var<S>>&, int);                                                      \
  template Var<S> loss_router(const std::vector<Var<S>>&, const std::vector<Matrix<S>>&, const TokenGridDims&, int, \
                              const RouterLossWeights&, bool);

BYA_INSTANTIATE_ROUTER(float)
BYA_INSTANTIATE_ROUTER(double)

}  // namespace bya
