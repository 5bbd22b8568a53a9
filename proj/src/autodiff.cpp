#include "bya/autodiff.hpp"

#include <cmath>

namespace bya {

template <typename S>
Var<S> Tape<S>::constant(M value) {
  nodes_.push_back(Node{std::move(value), M(), false, nullptr, nullptr});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename S>
Var<S> Tape<S>::leaf(M value) {
  nodes_.push_back(Node{std::move(value), M(), true, nullptr, nullptr});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename S>
Var<S> Tape<S>::param(Parameter<S>& p) {
  nodes_.push_back(Node{M(), M(), p.trainable, nullptr, &p});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename S>
Var<S> Tape<S>::record(M value, bool needs_grad, Backward backward) {
  nodes_.push_back(Node{std::move(value), M(), needs_grad, needs_grad ? std::move(backward) : nullptr, nullptr});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename S>
void Tape<S>::backward(Var<S> root) {
  if (root.tape != this) throw ContractError("backward root belongs to another tape");
  const M& rv = value(root.id);
  if (rv.rows() != 1 || rv.cols() != 1) throw ShapeError("backward root must be 1x1");
  if (!nodes_[static_cast<std::size_t>(root.id)].needs_grad) return;
  accumulate(root.id, M::Ones(1, 1));
  for (int i = root.id; i >= 0; --i) {
    Node& node = nodes_[static_cast<std::size_t>(i)];
    if (node.grad.size() == 0) continue;
    if (node.backward) node.backward(*this, node.grad);
    if (node.owner != nullptr) {
      if (node.owner->grad.size() == 0) {
        node.owner->grad = node.grad;
      } else {
        node.owner->grad += node.grad;
      }
    }
  }
}

template <typename S>
void Tape<S>::clear_grads() {
  for (Node& node : nodes_) node.grad.resize(0, 0);
}

template <typename S>
Matrix<S> Tape<S>::grad(Var<S> v) const {
  const Node& node = nodes_[static_cast<std::size_t>(v.id)];
  if (node.grad.size() == 0) return M::Zero(value(v.id).rows(), value(v.id).cols());
  return node.grad;
}

namespace ad {

namespace {

template <typename S>
void same_tape(Var<S> a, Var<S> b) {
  if (a.tape != b.tape) throw ContractError("operands live on different tapes");
}

template <typename S>
void same_shape(Var<S> a, Var<S> b, const char* op) {
  same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

}  // namespace

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  same_tape(a, b);
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  Tape<S>& t = *a.tape;
  const int ia = a.id, ib = b.id;
  Matrix<S> out = a.value() * b.value();
  return t.record(std::move(out), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](Tape<S>& tp, const Matrix<S>& g) {
    if (tp.needs_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
    if (tp.needs_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
  });
}

template <typename S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  same_tape(a, b);
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimensions differ");
  Tape<S>& t = *a.tape;
  const int ia = a.id, ib = b.id;
  Matrix<S> out = a.value() * b.value().transpose();
  return t.record(std::move(out), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](Tape<S>& tp, const Matrix<S>& g) {
    if (tp.needs_grad(ia)) tp.accumulate(ia, g * tp.value(ib));
    if (tp.needs_grad(ib)) tp.accumulate(ib, g.transpose() * tp.value(ia));
  });
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  same_shape(a, b, "add");
  Tape<S>& t = *a.tape;
  const int ia = a.id, ib = b.id;
  return t.record(a.value() + b.value(), t.needs_grad(ia) || t.needs_grad(ib),
                  [ia, ib](Tape<S>& tp, const Matrix<S>& g) {
                    tp.accumulate(ia, g);
                    tp.accumulate(ib, g);
                  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  same_shape(a, b, "sub");
  Tape<S>& t = *a.tape;
  const int ia = a.id, ib = b.id;
  return t.record(a.value() - b.value(), t.needs_grad(ia) || t.needs_grad(ib),
                  [ia, ib](Tape<S>& tp, const Matrix<S>& g) {
                    tp.accumulate(ia, g);
                    tp.accumulate(ib, -g);
                  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  same_shape(a, b, "mul");
  Tape<S>& t = *a.tape;
  const int ia = a.id, ib = b.id;
  Matrix<S> out = a.value().cwiseProduct(b.value());
  return t.record(std::move(out), t.needs_grad(ia) || t.needs_grad(ib), [ia, ib](Tape<S>& tp, const Matrix<S>& g) {
    if (tp.needs_grad(ia)) tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
    if (tp.needs_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
  });
}

template <typename S>
Var<S> scale(Var<S> a, S factor) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  return t.record(a.value() * factor, t.needs_grad(ia),
                  [ia, factor](Tape<S>& tp, const Matrix<S>& g) { tp.accumulate(ia, g * factor); });
}

template <typename S>
Var<S> add_scalar(Var<S> a, S offset) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  Matrix<S> out = a.value().array() + offset;
  return t.record(std::move(out), t.needs_grad(ia), [ia](Tape<S>& tp, const Matrix<S>& g) { tp.accumulate(ia, g); });
}

template <typename S>
Var<S> scale_by(Var<S> a, Var<S> factor) {
  same_tape(a, factor);
  if (factor.rows() != 1 || factor.cols() != 1) throw ShapeError("scale_by: factor must be 1x1");
  Tape<S>& t = *a.tape;
  const int ia = a.id, ifac = factor.id;
  Matrix<S> out = a.value() * factor.item();
  return t.record(std::move(out), t.needs_grad(ia) || t.needs_grad(ifac),
                  [ia, ifac](Tape<S>& tp, const Matrix<S>& g) {
                    if (tp.needs_grad(ia)) tp.accumulate(ia, g * tp.value(ifac)(0, 0));
                    if (tp.needs_grad(ifac))
                      tp.accumulate(ifac, Matrix<S>::Constant(1, 1, g.cwiseProduct(tp.value(ia)).sum()));
                  });
}

template <typename S>
Var<S> add_row(Var<S> a, Var<S> row) {
  same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: row shape mismatch");
  Tape<S>& t = *a.tape;
  const int ia = a.id, ir = row.id;
  Matrix<S> out = a.value().rowwise() + row.value().row(0);
  return t.record(std::move(out), t.needs_grad(ia) || t.needs_grad(ir), [ia, ir](Tape<S>& tp, const Matrix<S>& g) {
    tp.accumulate(ia, g);
    if (tp.needs_grad(ir)) tp.accumulate(ir, g.colwise().sum());
  });
}

template <typename S>
Var<S> mul_row(Var<S> a, Var<S> row) {
  same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("mul_row: row shape mismatch");
  Tape<S>& t = *a.tape;
  const int ia = a.id, ir = row.id;
  Matrix<S> out = a.value().array().rowwise() * row.value().row(0).array();
  return t.record(std::move(out), t.needs_grad(ia) || t.needs_grad(ir), [ia, ir](Tape<S>& tp, const Matrix<S>& g) {
    if (tp.needs_grad(ia)) {
      Matrix<S> ga = g.array().rowwise() * tp.value(ir).row(0).array();
      tp.accumulate(ia, ga);
    }
    if (tp.needs_grad(ir)) tp.accumulate(ir, g.cwiseProduct(tp.value(ia)).colwise().sum());
  });
}

template <typename S>
Var<S> mul_col(Var<S> a, Var<S> col) {
  same_tape(a, col);
  if (col.cols() != 1 || col.rows() != a.rows()) throw ShapeError("mul_col: column shape mismatch");
  Tape<S>& t = *a.tape;
  const int ia = a.id, ic = col.id;
  Matrix<S> out = a.value().array().colwise() * col.value().col(0).array();
  return t.record(std::move(out), t.needs_grad(ia) || t.needs_grad(ic), [ia, ic](Tape<S>& tp, const Matrix<S>& g) {
    if (tp.needs_grad(ia)) {
      Matrix<S> ga = g.array().colwise() * tp.value(ic).col(0).array();
      tp.accumulate(ia, ga);
    }
    if (tp.needs_grad(ic)) tp.accumulate(ic, g.cwiseProduct(tp.value(ia)).rowwise().sum());
  });
}

template <typename S>
Var<S> softmax_rows(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  const Matrix<S>& x = a.value();
  Matrix<S> y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  const int out_id = static_cast<int>(t.size());
  return t.record(std::move(y), t.needs_grad(ia), [ia, out_id](Tape<S>& tp, const Matrix<S>& g) {
    const Matrix<S>& yv = tp.value(out_id);
    Eigen::Matrix<S, Eigen::Dynamic, 1> dots = g.cwiseProduct(yv).rowwise().sum();
    Matrix<S> ga = yv.cwiseProduct(g.colwise() - dots);
    tp.accumulate(ia, ga);
  });
}

template <typename S>
Var<S> layer_norm_rows(Var<S> a, S eps) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  const Matrix<S>& x = a.value();
  const Eigen::Index n = x.cols();
  Matrix<S> xhat(x.rows(), n);
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S mu = x.row(r).mean();
    const S var = (x.row(r).array() - mu).square().mean();
    inv_std(r) = S(1) / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv_std(r);
  }
  const int out_id = static_cast<int>(t.size());
  return t.record(std::move(xhat), t.needs_grad(ia), [ia, out_id, inv_std](Tape<S>& tp, const Matrix<S>& g) {
    const Matrix<S>& xh = tp.value(out_id);
    Matrix<S> ga(g.rows(), g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const S gm = g.row(r).mean();
      const S gx = g.row(r).cwiseProduct(xh.row(r)).mean();
      ga.row(r) = inv_std(r) * (g.row(r).array() - gm - xh.row(r).array() * gx);
    }
    tp.accumulate(ia, ga);
  });
}

template <typename S>
Var<S> silu(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  Matrix<S> sig = (S(1) + (-a.value().array()).exp()).inverse();
  Matrix<S> out = a.value().cwiseProduct(sig);
  return t.record(std::move(out), t.needs_grad(ia), [ia, sig](Tape<S>& tp, const Matrix<S>& g) {
    const auto& x = tp.value(ia).array();
    Matrix<S> d = sig.array() * (S(1) + x * (S(1) - sig.array()));
    tp.accumulate(ia, g.cwiseProduct(d));
  });
}

template <typename S>
Var<S> square(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  return t.record(a.value().cwiseAbs2(), t.needs_grad(ia), [ia](Tape<S>& tp, const Matrix<S>& g) {
    tp.accumulate(ia, S(2) * g.cwiseProduct(tp.value(ia)));
  });
}

template <typename S>
Var<S> abs(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  return t.record(a.value().cwiseAbs(), t.needs_grad(ia), [ia](Tape<S>& tp, const Matrix<S>& g) {
    Matrix<S> sign = tp.value(ia).unaryExpr([](S v) { return v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0)); });
    tp.accumulate(ia, g.cwiseProduct(sign));
  });
}

template <typename S>
Var<S> log_clamped(Var<S> a, S floor) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  Matrix<S> out = a.value().unaryExpr([floor](S v) { return std::log(v > floor ? v : floor); });
  return t.record(std::move(out), t.needs_grad(ia), [ia, floor](Tape<S>& tp, const Matrix<S>& g) {
    Matrix<S> d = tp.value(ia).unaryExpr([floor](S v) { return v > floor ? S(1) / v : S(0); });
    tp.accumulate(ia, g.cwiseProduct(d));
  });
}

template <typename S>
Var<S> sum(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  const Eigen::Index r = a.rows(), c = a.cols();
  return t.record(Matrix<S>::Constant(1, 1, a.value().sum()), t.needs_grad(ia),
                  [ia, r, c](Tape<S>& tp, const Matrix<S>& g) { tp.accumulate(ia, Matrix<S>::Constant(r, c, g(0, 0))); });
}

template <typename S>
Var<S> mean(Var<S> a) {
  return scale(sum(a), S(1) / static_cast<S>(a.value().size()));
}

template <typename S>
Var<S> transpose(Var<S> a) {
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  Matrix<S> out = a.value().transpose();
  return t.record(std::move(out), t.needs_grad(ia),
                  [ia](Tape<S>& tp, const Matrix<S>& g) { tp.accumulate(ia, g.transpose()); });
}

template <typename S>
Var<S> reshape(Var<S> a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) throw ShapeError("reshape: element count changes");
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  Matrix<S> out = Eigen::Map<const Matrix<S>>(a.value().data(), rows, cols);
  return t.record(std::move(out), t.needs_grad(ia), [ia, r0, c0](Tape<S>& tp, const Matrix<S>& g) {
    tp.accumulate(ia, Eigen::Map<const Matrix<S>>(g.data(), r0, c0));
  });
}

template <typename S>
Var<S> block(Var<S> a, Eigen::Index row, Eigen::Index col, Eigen::Index rows, Eigen::Index cols) {
  if (row < 0 || col < 0 || row + rows > a.rows() || col + cols > a.cols())
    throw BoundsError("block: range outside matrix");
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  Matrix<S> out = a.value().block(row, col, rows, cols);
  return t.record(std::move(out), t.needs_grad(ia), [=](Tape<S>& tp, const Matrix<S>& g) {
    Matrix<S> full = Matrix<S>::Zero(r0, c0);
    full.block(row, col, rows, cols) = g;
    tp.accumulate(ia, full);
  });
}

template <typename S>
Var<S> slice_rows(Var<S> a, Eigen::Index row, Eigen::Index rows) {
  return block(a, row, 0, rows, a.cols());
}

template <typename S>
Var<S> slice_cols(Var<S> a, Eigen::Index col, Eigen::Index cols) {
  return block(a, 0, col, a.rows(), cols);
}

template <typename S>
Var<S> concat_rows(std::span<const Var<S>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  Tape<S>& t = *parts[0].tape;
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  bool needs = false;
  std::vector<int> ids;
  std::vector<Eigen::Index> counts;
  for (const auto& p : parts) {
    same_tape(parts[0], p);
    if (p.cols() != cols) throw ShapeError("concat_rows: column count mismatch");
    rows += p.rows();
    needs = needs || t.needs_grad(p.id);
    ids.push_back(p.id);
    counts.push_back(p.rows());
  }
  Matrix<S> out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return t.record(std::move(out), needs, [ids, counts](Tape<S>& tp, const Matrix<S>& g) {
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (tp.needs_grad(ids[i])) tp.accumulate(ids[i], g.middleRows(off, counts[i]));
      off += counts[i];
    }
  });
}

template <typename S>
Var<S> concat_cols(std::span<const Var<S>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  Tape<S>& t = *parts[0].tape;
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts[0].rows();
  bool needs = false;
  std::vector<int> ids;
  std::vector<Eigen::Index> counts;
  for (const auto& p : parts) {
    same_tape(parts[0], p);
    if (p.rows() != rows) throw ShapeError("concat_cols: row count mismatch");
    cols += p.cols();
    needs = needs || t.needs_grad(p.id);
    ids.push_back(p.id);
    counts.push_back(p.cols());
  }
  Matrix<S> out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return t.record(std::move(out), needs, [ids, counts](Tape<S>& tp, const Matrix<S>& g) {
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (tp.needs_grad(ids[i])) tp.accumulate(ids[i], g.middleCols(off, counts[i]));
      off += counts[i];
    }
  });
}

template <typename S>
Var<S> gather(Var<S> a, std::span<const int> index, Eigen::Index rows, Eigen::Index cols) {
  if (static_cast<Eigen::Index>(index.size()) != rows * cols) throw ShapeError("gather: index length mismatch");
  Tape<S>& t = *a.tape;
  const int ia = a.id;
  const Eigen::Index n = a.value().size();
  Matrix<S> out(rows, cols);
  const S* src = a.value().data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    const int k = index[i];
    if (k >= n) throw BoundsError("gather: index out of range");
    out.data()[i] = k < 0 ? S(0) : src[k];
  }
  std::vector<int> idx(index.begin(), index.end());
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  return t.record(std::move(out), t.needs_grad(ia), [ia, idx = std::move(idx), r0, c0](Tape<S>& tp, const Matrix<S>& g) {
    Matrix<S> ga = Matrix<S>::Zero(r0, c0);
    for (std::size_t i = 0; i < idx.size(); ++i)
      if (idx[i] >= 0) ga.data()[idx[i]] += g.data()[i];
    tp.accumulate(ia, ga);
  });
}

template <typename S>
Var<S> detach(Var<S> a) {
  return a.tape->constant(a.value());
}

template <typename S>
Var<S> attention(Var<S> q, Var<S> k, Var<S> v, int heads, const Matrix<S>* bias) {
  if (q.cols() != k.cols() || k.rows() != v.rows() || q.cols() % heads != 0 || v.cols() % heads != 0)
    throw ShapeError("attention: incompatible q/k/v shapes");
  if (bias != nullptr && (bias->rows() != q.rows() || bias->cols() != k.rows()))
    throw ShapeError("attention: bias shape mismatch");
  const Eigen::Index dh = q.cols() / heads, dv = v.cols() / heads;
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));
  std::vector<Var<S>> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  Var<S> bias_var;
  if (bias != nullptr) bias_var = q.tape->constant(*bias);
  for (int h = 0; h < heads; ++h) {
    Var<S> qh = heads == 1 ? q : slice_cols(q, h * dh, dh);
    Var<S> kh = heads == 1 ? k : slice_cols(k, h * dh, dh);
    Var<S> vh = heads == 1 ? v : slice_cols(v, h * dv, dv);
    Var<S> logits = scale(matmul_nt(qh, kh), inv_sqrt);
    if (bias != nullptr) logits = add(logits, bias_var);
    outs.push_back(matmul(softmax_rows(logits), vh));
  }
  if (heads == 1) return outs[0];
  return concat_cols<S>(outs);
}

#define BYA_INSTANTIATE_AD(S)                                                                    \
  template Var<S> matmul(Var<S>, Var<S>);                                                        \
  template Var<S> matmul_nt(Var<S>, Var<S>);                                                     \
  template Var<S> add(Var<S>, Var<S>);                                                           \
  template Var<S> sub(Var<S>, Var<S>);                                                           \
  template Var<S> mul(Var<S>, Var<S>);                                                           \
  template Var<S> scale(Var<S>, S);                                                              \
  template Var<S> add_scalar(Var<S>, S);                                                         \
  template Var<S> scale_by(Var<S>, Var<S>);                                                      \
  template Var<S> add_row(Var<S>, Var<S>);                                                       \
  template Var<S> mul_row(Var<S>, Var<S>);                                                       \
  template Var<S> mul_col(Var<S>, Var<S>);                                                       \
  template Var<S> softmax_rows(Var<S>);                                                          \
  template Var<S> layer_norm_rows(Var<S>, S);                                                    \
  template Var<S> silu(Var<S>);                                                                  \
  template Var<S> square(Var<S>);                                                                \
  template Var<S> abs(Var<S>);                                                                   \
  template Var<S> log_clamped(Var<S>, S);                                                        \
  template Var<S> sum(Var<S>);                                                                   \
  template Var<S> mean(Var<S>);                                                                  \
  template Var<S> transpose(Var<S>);                                                             \
  template Var<S> reshape(Var<S>, Eigen::Index, Eigen::Index);                                   \
  template Var<S> block(Var<S>, Eigen::Index, Eigen::Index, Eigen::Index, Eigen::Index);         \
  template Var<S> slice_rows(Var<S>, Eigen::Index, Eigen::Index);                                \
  template Var<S> slice_cols(Var<S>, Eigen::Index, Eigen::Index);                                \
  template Var<S> concat_rows(std::span<const Var<S>>);                                          \
  template Var<S> concat_cols(std::span<const Var<S>>);                                          \
  template Var<S> gather(Var<S>, std::span<const int>, Eigen::Index, Eigen::Index);              \
  template Var<S> detach(Var<S>);                                                                \
  template Var<S> attention(Var<S>, Var<S>, Var<S>, int, const Matrix<S>*);

BYA_INSTANTIATE_AD(float)
BYA_INSTANTIATE_AD(double)

}  // namespace ad

template class Tape<float>;
template class Tape<double>;

}  // namespace bya
