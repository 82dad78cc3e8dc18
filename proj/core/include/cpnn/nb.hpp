#ifndef CPNN_NB_HPP
#define CPNN_NB_HPP

#include <cstdint>
#include <vector>

#include "cpnn/grid.hpp"

namespace cpnn {

/// Mean/dispersion pair of a negative binomial. Both must be positive and
/// finite; variance is mu + mu^2/theta.
struct NbParams {
  double mu;
  double theta;
};

/// ln Gamma(x) for x > 0.
///
/// Lanczos approximation, g = 607/128 with 15 coefficients (Godfrey's set),
/// reflection below 0.5. Self-contained so results are bit-stable across
/// libm implementations.
double log_gamma(double x);

/// Digamma psi(x) for x > 0: upward recurrence to x >= 10, then the
/// asymptotic Bernoulli series through x^-14.
double digamma(double x);

/// Log pmf of NB(mu, theta) at count k:
///   lgamma(k+theta) - lgamma(theta) - lgamma(k+1)
///     + k (ln mu - ln(mu+theta)) + theta (ln theta - ln(mu+theta)).
double nb_log_pmf(std::int64_t k, const NbParams& p);

/// Mini-batch NB negative log-likelihood,
///   -(1/N_m) sum_n sum_g log NB(E[n,g]; Mu[n,g], theta[g]),
/// written as the expanded five-term sum. Deliberately a separate code path
/// from nb_log_pmf; terms are combined by pairwise reduction in row-major
/// order. Means below 1e-8 are clamped up before evaluation.
double nb_nll_batch(const CountGrid& counts, const Matrix& mu,
                    const std::vector<double>& theta);

struct NbNllGrads {
  Matrix d_mu;                  // same shape as the batch
  std::vector<double> d_theta;  // per gene
};

/// Analytic partials of nb_nll_batch:
///   d/dmu   = -(1/N_m) (k/mu - (k+theta)/(mu+theta))
///   d/dtheta= -(1/N_m) sum_n [psi(k+theta) - psi(theta) + ln theta + 1
///                              - ln(mu+theta) - (k+theta)/(mu+theta)]
/// Entries whose mean was clamped get zero mean-gradient.
NbNllGrads nb_nll_grads(const CountGrid& counts, const Matrix& mu,
                        const std::vector<double>& theta);

/// Floor applied to NB means before likelihood evaluation.
inline constexpr double kMeanFloor = 1e-8;

/// Fixed-order pairwise sum of a buffer; the reproducible reduction used by
/// the likelihood code.
double pairwise_sum(const double* values, std::size_t n);

}  // namespace cpnn

#endif
