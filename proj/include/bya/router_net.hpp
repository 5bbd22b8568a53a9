#pragma once

#include <array>
#include <random>
#include <vector>

#include "bya/autodiff.hpp"
#include "bya/mask_algebra.hpp"
#include "bya/params.hpp"
#include "bya/tensor_store.hpp"

namespace bya {

struct RouterConfig {
  int layers = 4;        // L
  int heads = 4;         // heads of the tapped face cross-attention
  int head_dim = 16;     // d_h
  int characters = 2;    // n
  int face_queries = 4;  // q
  TokenGridDims grid{8, 4, 4};
  int width = 64;
  int blocks = 2;
  int block_heads = 4;
  int mlp_ratio = 2;

  int keys() const { return characters * face_queries; }
  int block_head_dim() const { return width / block_heads; }
  /// Rotary split of the block head dimension over (t, h, w), proportional to
  /// the grid extents, remainder to t.
  std::array<int, 3> rope_split() const;
};

/// Axial rotary embedding of rows of `features` (S x d_r). Each axis chunk
/// rotates consecutive pairs by position * 10000^(-2j / chunk).
template <typename S>
Matrix<S> rope3d_apply(const Matrix<S>& features, const std::vector<TokenIndex>& positions, const std::array<int, 3>& split);

namespace ad {
/// Rotary embedding applied to every `split`-sized head chunk of the columns.
template <typename S>
Var<S> rope3d(Var<S> features, const std::vector<TokenIndex>& positions, const std::array<int, 3>& split);
}  // namespace ad

template <typename S>
struct RouterBlockParams {
  Parameter<S>* wq = nullptr;
  Parameter<S>* wk = nullptr;
  Parameter<S>* wv = nullptr;
  Parameter<S>* wo = nullptr;
  Parameter<S>* fc1 = nullptr;
  Parameter<S>* fc1_b = nullptr;
  Parameter<S>* fc2 = nullptr;
  Parameter<S>* fc2_b = nullptr;
};

/// Per-layer query/key maps (shared by all heads of that layer) feeding a
/// stack of spatio-temporal blocks and a head that are shared across layers.
template <typename S>
struct RouterParams {
  RouterConfig cfg;
  std::vector<Parameter<S>*> qmap;  // L x (d_h x d_h)
  std::vector<Parameter<S>*> kmap;
  Parameter<S>* in_w = nullptr;  // (heads * n * q) x width
  Parameter<S>* in_b = nullptr;
  std::vector<RouterBlockParams<S>> blocks;
  Parameter<S>* head_w = nullptr;  // width x (n + 1)
  Parameter<S>* head_b = nullptr;
};

template <typename S>
RouterParams<S> add_router(ParamStore<S>& store, const RouterConfig& cfg, std::mt19937_64& rng);

/// Face cross-attention activations of one layer: queries S x (heads * d_h)
/// and keys (n * q) x (heads * d_h), head h in columns [h * d_h, (h+1) * d_h).
template <typename S>
struct AttentionTap {
  Var<S> q;
  Var<S> k;
};

template <typename S>
struct RouterOutput {
  std::vector<Var<S>> logits;  // per layer, S x (n + 1)
  std::vector<Var<S>> probs;
};

/// One layer of the router. Taps are detached: the router never pushes
/// gradient into the denoiser.
template <typename S>
Var<S> router_layer_logits(const RouterParams<S>& p, int layer, const AttentionTap<S>& tap);

template <typename S>
RouterOutput<S> router_forward(const RouterParams<S>& p, const std::vector<AttentionTap<S>>& taps);

/// Probabilities of a router output as a routing mask.
template <typename S>
RoutingMask to_routing_mask(const RouterOutput<S>& out, const TokenGridDims& grid, int characters);

struct RouterLossWeights {
  double ce = 1.0;
  double st = 0.001;
  double layer = 8.0;
};

/// -sum y log(max(p, 1e-12)) over layers, classes and tokens; divided by the
/// number of (layer, token) positions when `mean` is set.
template <typename S>
Var<S> loss_ce(const std::vector<Var<S>>& probs, const std::vector<Matrix<S>>& targets, bool mean = false);

/// Sum of |forward differences| along t, h and w of the character channels
/// (the first `characters` columns of each layer).
template <typename S>
Var<S> loss_st(const std::vector<Var<S>>& probs, const TokenGridDims& grid, int characters);

/// Population variance across layers at every (character, token), summed.
template <typename S>
Var<S> loss_layer(const std::vector<Var<S>>& probs, int characters);

template <typename S>
Var<S> loss_router(const std::vector<Var<S>>& probs, const std::vector<Matrix<S>>& targets, const TokenGridDims& grid,
                   int characters, const RouterLossWeights& weights, bool mean = false);

/// Tensor forms: probs and targets L x (n+1) x T' x h x w; masks for the
/// smoothness terms L x n x T' x h x w.
double loss_ce(const Tensor& probs, const Tensor& targets, bool mean = false);
double loss_st(const Tensor& mask);
double loss_layer(const Tensor& mask);
double loss_router(const Tensor& probs, const Tensor& targets, const RouterLossWeights& weights, bool mean = false);

}  // namespace bya
