#ifndef CPNN_MATHUTIL_HPP
#define CPNN_MATHUTIL_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>

namespace cpnn {

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// ln(1 + e^x), overflow-safe.
inline double softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

/// Inverse of softplus; y must be positive.
inline double inv_softplus(double y) {
  if (y > 30.0) return y;
  return std::log(std::expm1(y));
}

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
}

inline double gelu_grad(double x) {
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

/// In-place softmax of one row, stabilized by max subtraction.
inline void softmax_row(double* v, std::size_t n) {
  double mx = v[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, v[i]);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = std::exp(v[i] - mx);
    total += v[i];
  }
  for (std::size_t i = 0; i < n; ++i) v[i] /= total;
}

}  // namespace cpnn

#endif
