#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "recap/error.hpp"
#include "recap/numerics/matrix.hpp"

namespace recap {

// All reductions accumulate left to right over the contraction index so
// results are bit-stable for a fixed build.

/// c += a · b
template <typename T>
void matmul_accumulate(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  detail::require_shape(a.cols() == b.rows(), "matmul: inner dimensions differ");
  detail::require_shape(c.rows() == a.rows() && c.cols() == b.cols(),
                        "matmul: output shape mismatch");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    T* ci = c.data() + i * m;
    const T* ai = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = ai[p];
      const T* bp = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
}

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require_shape(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix<T> c(a.rows(), b.cols());
  matmul_accumulate(a, b, c);
  return c;
}

/// aᵀ · b without materialising aᵀ.
template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require_shape(a.rows() == b.rows(), "matmul_tn: row counts differ");
  Matrix<T> c(a.cols(), b.cols());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t r = 0; r < n; ++r) {
    const T* ar = a.data() + r * k;
    const T* br = b.data() + r * m;
    for (std::size_t i = 0; i < k; ++i) {
      const T v = ar[i];
      T* ci = c.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += v * br[j];
    }
  }
  return c;
}

/// a · bᵀ
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  return matmul(a, transpose(b));
}

/// Adds a 1×m bias row to every row of `x`.
template <typename T>
void add_row_bias(Matrix<T>& x, const Matrix<T>& bias) {
  detail::require_shape(bias.size() == x.cols(), "bias length mismatch");
  for (std::size_t i = 0; i < x.rows(); ++i) {
    T* xi = x.data() + i * x.cols();
    for (std::size_t j = 0; j < x.cols(); ++j) xi[j] += bias.data()[j];
  }
}

template <typename T>
std::vector<T> softmax(std::span<const T> v, T temperature = T{1}) {
  if (v.empty()) throw DomainError("softmax: empty input");
  if (!(temperature > T{0})) throw DomainError("softmax: temperature must be positive");
  T mx = v[0];
  for (T x : v) mx = std::max(mx, x);
  std::vector<T> out(v.size());
  T sum{0};
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp((v[i] - mx) / temperature);
    sum += out[i];
  }
  for (T& x : out) x /= sum;
  return out;
}

template <typename T>
std::vector<T> softmax(const std::vector<T>& v, T temperature = T{1}) {
  return softmax(std::span<const T>(v), temperature);
}

template <typename T>
std::vector<T> log_softmax(std::span<const T> v) {
  if (v.empty()) throw DomainError("log_softmax: empty input");
  T mx = v[0];
  for (T x : v) mx = std::max(mx, x);
  T sum{0};
  for (T x : v) sum += std::exp(x - mx);
  const T lse = mx + std::log(sum);
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - lse;
  return out;
}

/// In-place row-wise softmax of a score matrix (temperature 1).
template <typename T>
void softmax_rows(Matrix<T>& s) {
  for (std::size_t i = 0; i < s.rows(); ++i) {
    T* r = s.data() + i * s.cols();
    T mx = r[0];
    for (std::size_t j = 1; j < s.cols(); ++j) mx = std::max(mx, r[j]);
    T sum{0};
    for (std::size_t j = 0; j < s.cols(); ++j) {
      r[j] = std::exp(r[j] - mx);
      sum += r[j];
    }
    const T inv = T{1} / sum;
    for (std::size_t j = 0; j < s.cols(); ++j) r[j] *= inv;
  }
}

template <typename T>
std::vector<T> layer_norm(std::span<const T> x, std::span<const T> gain,
                          std::span<const T> bias, T epsilon) {
  detail::require_shape(x.size() == gain.size() && x.size() == bias.size(),
                        "layer_norm: length mismatch");
  if (x.empty()) throw DimensionError("layer_norm: empty input");
  if (!(epsilon > T{0})) throw DomainError("layer_norm: epsilon must be positive");
  const T n = static_cast<T>(x.size());
  T mean{0};
  for (T v : x) mean += v;
  mean /= n;
  T var{0};
  for (T v : x) var += (v - mean) * (v - mean);
  var /= n;
  const T rstd = T{1} / std::sqrt(var + epsilon);
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
  return out;
}

/// Per-row statistics kept for the backward pass.
template <typename T>
struct LayerNormStats {
  std::vector<T> rstd;
  Matrix<T> xhat;
};

/// Row-wise layer norm; `stats` is filled when non-null.
template <typename T>
Matrix<T> layer_norm_rows(const Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& bias,
                          T epsilon, LayerNormStats<T>* stats = nullptr) {
  detail::require_shape(gain.size() == x.cols() && bias.size() == x.cols(),
                        "layer_norm: length mismatch");
  const std::size_t d = x.cols();
  Matrix<T> out(x.rows(), d);
  if (stats) {
    stats->rstd.assign(x.rows(), T{0});
    stats->xhat = Matrix<T>(x.rows(), d);
  }
  const T n = static_cast<T>(d);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const T* xi = x.data() + i * d;
    T mean{0};
    for (std::size_t j = 0; j < d; ++j) mean += xi[j];
    mean /= n;
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= n;
    const T rstd = T{1} / std::sqrt(var + epsilon);
    T* oi = out.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = (xi[j] - mean) * rstd;
      if (stats) stats->xhat(i, j) = xh;
      oi[j] = xh * gain.data()[j] + bias.data()[j];
    }
    if (stats) stats->rstd[i] = rstd;
  }
  return out;
}

template <typename T>
T gelu(T x) {
  return T{0.5} * x * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_derivative(T x) {
  const T cdf = T{0.5} * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T{-0.5} * x * x) / std::sqrt(T{2} * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  detail::require_shape(a.size() == b.size(), "dot: length mismatch");
  T s{0};
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Cosine similarity in double precision; identical vectors give exactly 1.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  detail::require_shape(a.size() == b.size(), "cosine: length mismatch");
  if (std::equal(a.begin(), a.end(), b.begin())) return 1.0;
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0 || bb == 0) return 0.0;
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

}  // namespace recap
