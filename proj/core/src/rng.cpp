#include "cpnn/rng.hpp"

#include <cmath>
#include <stdexcept>

#include "cpnn/nb.hpp"

namespace cpnn {

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below: n must be >= 1");
  // Rejection to remove modulo bias.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t r;
  do {
    r = gen_();
  } while (r >= limit);
  return r % n;
}

double Rng::normal() {
  if (have_cached_normal_) {
    have_cached_normal_ = false;
    return cached_normal_;
  }
  const double u1 = uniform_pos();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double t = 2.0 * M_PI * u2;
  cached_normal_ = r * std::sin(t);
  have_cached_normal_ = true;
  return r * std::cos(t);
}

double Rng::lognormal(double mu, double sigma) {
  return std::exp(mu + sigma * normal());
}

double Rng::gamma(double shape, double scale) {
  if (!(shape > 0.0) || !(scale > 0.0))
    throw std::invalid_argument("Rng::gamma: shape and scale must be positive");
  if (shape < 1.0) {
    // Boost to shape+1 and rescale by u^(1/shape).
    const double u = uniform_pos();
    return gamma(shape + 1.0, scale) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform_pos();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v * scale;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v * scale;
  }
}

std::int64_t Rng::poisson(double rate) {
  if (!(rate >= 0.0) || !std::isfinite(rate))
    throw std::invalid_argument("Rng::poisson: rate must be finite and >= 0");
  if (rate == 0.0) return 0;
  if (rate < 10.0) {
    // Knuth product-of-uniforms.
    const double limit = std::exp(-rate);
    std::int64_t k = 0;
    double p = 1.0;
    do {
      ++k;
      p *= uniform_pos();
    } while (p > limit);
    return k - 1;
  }
  // PTRS transformed rejection (Hormann 1993), exact for rate >= 10.
  const double b = 0.931 + 2.53 * std::sqrt(rate);
  const double a = -0.059 + 0.02483 * b;
  const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
  const double vr = 0.9277 - 3.6224 / (b - 2.0);
  const double log_rate = std::log(rate);
  for (;;) {
    const double u = uniform() - 0.5;
    const double v = uniform_pos();
    const double us = 0.5 - std::fabs(u);
    const double kf = std::floor((2.0 * a / us + b) * u + rate + 0.43);
    if (us >= 0.07 && v <= vr) return static_cast<std::int64_t>(kf);
    if (kf < 0.0 || (us < 0.013 && v > us)) continue;
    const double lhs = std::log(v * inv_alpha / (a / (us * us) + b));
    const double rhs = kf * log_rate - rate - log_gamma(kf + 1.0);
    if (lhs <= rhs) return static_cast<std::int64_t>(kf);
  }
}

std::vector<double> Rng::dirichlet(double alpha, std::size_t k) {
  if (!(alpha > 0.0)) throw std::invalid_argument("Rng::dirichlet: alpha must be positive");
  std::vector<double> draw(k);
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    draw[i] = gamma(alpha, 1.0);
    total += draw[i];
  }
  for (std::size_t i = 0; i < k; ++i) draw[i] /= total;
  return draw;
}

}  // namespace cpnn
