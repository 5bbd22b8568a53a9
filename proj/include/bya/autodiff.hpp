#pragma once

#include <Eigen/Core>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bya/errors.hpp"

namespace bya {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
class Tape;

/// A named trainable matrix. `group` selects the freeze set a training stage
/// applies; `trainable` is what the tape consults when recording.
template <typename Scalar>
struct Parameter {
  std::string name;
  std::string group;
  Matrix<Scalar> value;
  Matrix<Scalar> grad;
  bool trainable = true;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Handle to a node on a tape.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Matrix<Scalar>& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Scalar item() const { return value()(0, 0); }
};

/// Reverse-mode tape over row-major dense matrices.
///
/// Nodes are appended in evaluation order, so a reverse sweep is a valid
/// topological order. Parameters recorded through `param` receive their
/// gradient in `Parameter::grad` (accumulated) when `backward` runs.
template <typename Scalar>
class Tape {
 public:
  using M = Matrix<Scalar>;
  /// Receives the gradient of the node's output and accumulates into inputs.
  using Backward = std::function<void(Tape&, const M&)>;

  Var<Scalar> constant(M value);
  Var<Scalar> leaf(M value);
  Var<Scalar> param(Parameter<Scalar>& p);

  /// Record a derived node. `needs_grad` should be true when any input does.
  Var<Scalar> record(M value, bool needs_grad, Backward backward);

  void backward(Var<Scalar> root);
  /// Drop node gradients so another root can be back-propagated.
  void clear_grads();

  const M& value(int id) const {
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    return node.owner != nullptr ? node.owner->value : node.value;
  }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  bool needs_grad(Var<Scalar> v) const { return needs_grad(v.id); }

  /// Gradient of a node after backward (zeros when it received none).
  M grad(Var<Scalar> v) const;

  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    Node& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.needs_grad) return;
    if (node.grad.size() == 0) {
      node.grad = g;
    } else {
      node.grad += g;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    M value;
    M grad;
    bool needs_grad = false;
    Backward backward;
    Parameter<Scalar>* owner = nullptr;
  };
  std::vector<Node> nodes_;
};

template <typename Scalar>
const Matrix<Scalar>& Var<Scalar>::value() const {
  return tape->value(id);
}

namespace ad {

template <typename S> Var<S> matmul(Var<S> a, Var<S> b);
/// a * b^T
template <typename S> Var<S> matmul_nt(Var<S> a, Var<S> b);
template <typename S> Var<S> add(Var<S> a, Var<S> b);
template <typename S> Var<S> sub(Var<S> a, Var<S> b);
template <typename S> Var<S> mul(Var<S> a, Var<S> b);
template <typename S> Var<S> scale(Var<S> a, S factor);
template <typename S> Var<S> add_scalar(Var<S> a, S offset);
/// Multiply every entry by a 1x1 node.
template <typename S> Var<S> scale_by(Var<S> a, Var<S> factor);
/// Broadcast a 1 x cols row over every row.
template <typename S> Var<S> add_row(Var<S> a, Var<S> row);
template <typename S> Var<S> mul_row(Var<S> a, Var<S> row);
/// Scale row r of `a` by col(r, 0): diag(col) * a.
template <typename S> Var<S> mul_col(Var<S> a, Var<S> col);
template <typename S> Var<S> softmax_rows(Var<S> a);
template <typename S> Var<S> layer_norm_rows(Var<S> a, S eps = S(1e-5));
template <typename S> Var<S> silu(Var<S> a);
template <typename S> Var<S> square(Var<S> a);
template <typename S> Var<S> abs(Var<S> a);
/// log(max(a, floor)); entries at or below the floor get zero gradient.
template <typename S> Var<S> log_clamped(Var<S> a, S floor);
template <typename S> Var<S> sum(Var<S> a);
template <typename S> Var<S> mean(Var<S> a);
template <typename S> Var<S> transpose(Var<S> a);
template <typename S> Var<S> reshape(Var<S> a, Eigen::Index rows, Eigen::Index cols);
template <typename S> Var<S> block(Var<S> a, Eigen::Index row, Eigen::Index col, Eigen::Index rows, Eigen::Index cols);
template <typename S> Var<S> slice_rows(Var<S> a, Eigen::Index row, Eigen::Index rows);
template <typename S> Var<S> slice_cols(Var<S> a, Eigen::Index col, Eigen::Index cols);
template <typename S> Var<S> concat_rows(std::span<const Var<S>> parts);
template <typename S> Var<S> concat_cols(std::span<const Var<S>> parts);
/// out(r, c) = flat(a)[index[r * cols + c]], or 0 where the index is -1.
template <typename S> Var<S> gather(Var<S> a, std::span<const int> index, Eigen::Index rows, Eigen::Index cols);
/// Same value, no gradient path.
template <typename S> Var<S> detach(Var<S> a);

/// Multi-head scaled dot-product attention. `bias` (optional, queries x keys)
/// is added to the logits before the softmax; use a large negative value to
/// block a key.
template <typename S>
Var<S> attention(Var<S> q, Var<S> k, Var<S> v, int heads, const Matrix<S>* bias = nullptr);

}  // namespace ad

}  // namespace bya
