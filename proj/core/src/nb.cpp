#include "cpnn/nb.hpp"

#include <cmath>
#include <string>

#include "cpnn/errors.hpp"

namespace cpnn {

namespace {

// Godfrey's Lanczos coefficients for g = 607/128, n = 15.
constexpr double kLanczosG = 4.7421875;
constexpr double kLanczos[15] = {
    0.99999999999999709182,
    57.156235665862923517,
    -59.597960355475491248,
    14.136097974741747174,
    -0.49191381609762019978,
    0.33994649984811888699e-4,
    0.46523628927048575665e-4,
    -0.98374475304879564677e-4,
    0.15808870322491248884e-3,
    -0.21026444172410488319e-3,
    0.21743961811521264320e-3,
    -0.16431810653676389022e-3,
    0.84418223983852743293e-4,
    -0.26190838401581408670e-4,
    0.36899182659531622704e-5,
};

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // ln(2*pi)/2

double lanczos_main(double x) {
  // Valid for x >= 0.5.
  const double z = x - 1.0;
  double series = kLanczos[0];
  for (int i = 1; i < 15; ++i) series += kLanczos[i] / (z + i);
  const double t = z + kLanczosG + 0.5;
  return kHalfLog2Pi + (z + 0.5) * std::log(t) - t + std::log(series);
}

void check_params(const NbParams& p) {
  if (!(p.mu > 0.0) || !std::isfinite(p.mu) || !(p.theta > 0.0) || !std::isfinite(p.theta))
    throw NumericError("invalid NB parameters: mu=" + std::to_string(p.mu) +
                       " theta=" + std::to_string(p.theta));
}

}  // namespace

double log_gamma(double x) {
  if (!(x > 0.0) || !std::isfinite(x))
    throw NumericError("log_gamma: argument must be positive and finite, got " +
                       std::to_string(x));
  if (x < 0.5) {
    // Reflection: lgamma(x) = ln(pi / sin(pi x)) - lgamma(1 - x).
    return std::log(M_PI / std::sin(M_PI * x)) - lanczos_main(1.0 - x);
  }
  return lanczos_main(x);
}

double digamma(double x) {
  if (!(x > 0.0) || !std::isfinite(x))
    throw NumericError("digamma: argument must be positive and finite, got " +
                       std::to_string(x));
  double acc = 0.0;
  while (x < 10.0) {
    acc -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  // Bernoulli series: truncation below 1e-15 once x >= 10.
  double series = inv2 * (1.0 / 12.0 -
                  inv2 * (1.0 / 120.0 -
                  inv2 * (1.0 / 252.0 -
                  inv2 * (1.0 / 240.0 -
                  inv2 * (1.0 / 132.0 -
                  inv2 * (691.0 / 32760.0 -
                  inv2 * (1.0 / 12.0)))))));
  return acc + std::log(x) - 0.5 * inv - series;
}

double nb_log_pmf(std::int64_t k, const NbParams& p) {
  check_params(p);
  if (k < 0) throw NumericError("nb_log_pmf: count must be nonnegative");
  const double kd = static_cast<double>(k);
  const double log_mu_theta = std::log(p.mu + p.theta);
  double v = log_gamma(kd + p.theta) - log_gamma(p.theta) - log_gamma(kd + 1.0);
  v += kd * (std::log(p.mu) - log_mu_theta);
  v += p.theta * (std::log(p.theta) - log_mu_theta);
  return v;
}

double pairwise_sum(const double* values, std::size_t n) {
  if (n == 0) return 0.0;
  if (n <= 8) {
    double s = values[0];
    for (std::size_t i = 1; i < n; ++i) s += values[i];
    return s;
  }
  const std::size_t half = n / 2;
  return pairwise_sum(values, half) + pairwise_sum(values + half, n - half);
}

double nb_nll_batch(const CountGrid& counts, const Matrix& mu,
                    const std::vector<double>& theta) {
  const std::size_t n = counts.rows(), g = counts.cols();
  if (n == 0 || g == 0) throw NumericError("nb_nll_batch: empty batch");
  mu.require_shape(n, g, "nb_nll_batch");
  if (theta.size() != g) throw std::invalid_argument("nb_nll_batch: theta length mismatch");
  for (std::size_t j = 0; j < g; ++j)
    if (!(theta[j] > 0.0) || !std::isfinite(theta[j]))
      throw NumericError("nb_nll_batch: non-positive dispersion at gene " + std::to_string(j));

  // Per-gene constants reused across the batch.
  std::vector<double> lg_theta(g), log_theta(g);
  for (std::size_t j = 0; j < g; ++j) {
    lg_theta[j] = log_gamma(theta[j]);
    log_theta[j] = std::log(theta[j]);
  }

  std::vector<double> terms(n * g);
  for (std::size_t i = 0; i < n; ++i) {
    const std::int64_t* row_k = counts.row(i);
    const double* row_mu = mu.row(i);
    for (std::size_t j = 0; j < g; ++j) {
      const std::int64_t ki = row_k[j];
      if (ki < 0) throw NumericError("nb_nll_batch: negative count");
      const double k = static_cast<double>(ki);
      const double m = row_mu[j] < kMeanFloor ? kMeanFloor : row_mu[j];
      if (!std::isfinite(m)) throw NumericError("nb_nll_batch: non-finite mean");
      const double th = theta[j];
      // Five-term expansion of the NB log pmf.
      const double t1 = log_gamma(k + th);
      const double t2 = -lg_theta[j];
      const double t3 = -log_gamma(k + 1.0);
      const double t4 = k * std::log(m / (th + m));
      const double t5 = th * std::log(th / (th + m));
      terms[i * g + j] = t1 + t2 + t3 + t4 + t5;
    }
  }
  return -pairwise_sum(terms.data(), terms.size()) / static_cast<double>(n);
}

NbNllGrads nb_nll_grads(const CountGrid& counts, const Matrix& mu,
                        const std::vector<double>& theta) {
  const std::size_t n = counts.rows(), g = counts.cols();
  if (n == 0 || g == 0) throw NumericError("nb_nll_grads: empty batch");
  mu.require_shape(n, g, "nb_nll_grads");
  if (theta.size() != g) throw std::invalid_argument("nb_nll_grads: theta length mismatch");

  NbNllGrads out;
  out.d_mu = Matrix(n, g, 0.0);
  out.d_theta.assign(g, 0.0);
  const double inv_n = 1.0 / static_cast<double>(n);

  std::vector<double> psi_theta(g), log_theta(g);
  for (std::size_t j = 0; j < g; ++j) {
    if (!(theta[j] > 0.0) || !std::isfinite(theta[j]))
      throw NumericError("nb_nll_grads: non-positive dispersion at gene " + std::to_string(j));
    psi_theta[j] = digamma(theta[j]);
    log_theta[j] = std::log(theta[j]);
  }

  for (std::size_t i = 0; i < n; ++i) {
    const std::int64_t* row_k = counts.row(i);
    const double* row_mu = mu.row(i);
    double* row_dmu = out.d_mu.row(i);
    for (std::size_t j = 0; j < g; ++j) {
      const double k = static_cast<double>(row_k[j]);
      const double raw = row_mu[j];
      const bool clamped = raw < kMeanFloor;
      const double m = clamped ? kMeanFloor : raw;
      const double th = theta[j];
      const double denom = m + th;
      // Zero gradient through clamped means.
      row_dmu[j] = clamped ? 0.0 : -inv_n * (k / m - (k + th) / denom);
      out.d_theta[j] += -inv_n * (digamma(k + th) - psi_theta[j] + log_theta[j] + 1.0 -
                                  std::log(denom) - (k + th) / denom);
    }
  }
  return out;
}

}  // namespace cpnn
