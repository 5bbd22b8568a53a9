#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "bya/autodiff.hpp"
#include "bya/params.hpp"
#include "bya/tensor_store.hpp"

namespace bya::testing {

inline Matrix<double> random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

/// Rows drawn uniformly from the probability simplex.
inline Matrix<double> random_simplex_rows(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::exponential_distribution<double> e(1.0);
  Matrix<double> m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = e(rng) + 1e-3;
    m.row(r) /= m.row(r).sum();
  }
  return m;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, float lo = 0.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> u(lo, hi);
  std::vector<float> v(shape_size(shape));
  for (float& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
inline double relative_error(const Matrix<double>& a, const Matrix<double>& b) {
  const double scale = std::max(a.norm(), b.norm());
  return scale < 1e-300 ? 0.0 : (a - b).norm() / scale;
}

/// Central differences of `f` over the entries of `x`, restored afterwards.
/// `stride` > 1 checks every stride-th entry only (others left zero).
inline Matrix<double> numeric_gradient(Matrix<double>& x, const std::function<double()>& f, double h = 1e-6, int stride = 1) {
  Matrix<double> g = Matrix<double>::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); i += stride) {
    const double keep = x.data()[i];
    x.data()[i] = keep + h;
    const double up = f();
    x.data()[i] = keep - h;
    const double down = f();
    x.data()[i] = keep;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// Same entries as numeric_gradient keeps, for comparing a strided check.
inline Matrix<double> strided(const Matrix<double>& g, int stride) {
  Matrix<double> out = Matrix<double>::Zero(g.rows(), g.cols());
  for (Eigen::Index i = 0; i < g.size(); i += stride) out.data()[i] = g.data()[i];
  return out;
}

/// Analytic-versus-numeric error for one parameter. `loss` builds a fresh
/// tape, evaluates the scalar and, when asked, runs backward.
inline double parameter_gradient_error(ParamStore<double>& store, Parameter<double>& p, const std::function<double(bool)>& loss,
                                       double h = 1e-6, int stride = 1) {
  store.zero_grads();
  loss(true);
  const Matrix<double> analytic = strided(p.grad, stride);
  const Matrix<double> numeric = numeric_gradient(p.value, [&] { return loss(false); }, h, stride);
  return relative_error(analytic, numeric);
}

}  // namespace bya::testing
