#include <doctest.h>

#include <cmath>
#include <vector>

#include "cpnn/errors.hpp"
#include "cpnn/nb.hpp"
#include "cpnn/rng.hpp"

using namespace cpnn;

TEST_CASE("log_gamma matches known values") {
  CHECK(log_gamma(1.0) == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(log_gamma(2.0) == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(log_gamma(0.5) == doctest::Approx(0.5 * std::log(M_PI)).epsilon(1e-14));
  CHECK(log_gamma(5.0) == doctest::Approx(std::log(24.0)).epsilon(1e-14));
  CHECK_THROWS_AS(log_gamma(0.0), NumericError);
  CHECK_THROWS_AS(log_gamma(-1.0), NumericError);
}

TEST_CASE("log_gamma tracks the libm reference across the working range") {
  // 1e-12 absolute where |lgamma| <= 1, relative beyond.
  for (double x : {1e-6, 1e-4, 0.01, 0.3, 0.5, 0.9, 1.0, 1.5, 2.7, 10.0, 123.4, 5e3, 7e4, 1e6}) {
    const double ref = std::lgamma(x);
    const double err = std::fabs(log_gamma(x) - ref);
    CHECK_MESSAGE(err <= 1e-12 * std::max(1.0, std::fabs(ref)), "x=", x, " err=", err);
  }
}

TEST_CASE("digamma matches known values and differentiates log_gamma") {
  const double euler = 0.57721566490153286;
  CHECK(digamma(1.0) == doctest::Approx(-euler).epsilon(1e-13));
  CHECK(digamma(0.5) == doctest::Approx(-euler - 2.0 * std::log(2.0)).epsilon(1e-13));
  CHECK(digamma(2.0) == doctest::Approx(1.0 - euler).epsilon(1e-13));
  for (double x : {0.2, 1.3, 4.7, 25.0, 400.0}) {
    const double h = 1e-6 * std::max(1.0, x);
    const double numeric = (log_gamma(x + h) - log_gamma(x - h)) / (2.0 * h);
    CHECK(digamma(x) == doctest::Approx(numeric).epsilon(1e-6));
  }
}

TEST_CASE("nb_log_pmf closed forms") {
  // k = 0: only the theta terms survive.
  for (double mu : {0.3, 1.0, 7.5})
    for (double theta : {0.4, 1.0, 12.0})
      CHECK(nb_log_pmf(0, {mu, theta}) ==
            doctest::Approx(theta * (std::log(theta) - std::log(mu + theta))).epsilon(1e-13));
  // Geometric case: mu = theta = 1 gives P(k=1) = 1/4.
  CHECK(nb_log_pmf(1, {1.0, 1.0}) == doctest::Approx(std::log(0.25)).epsilon(1e-13));
  CHECK_THROWS_AS(nb_log_pmf(3, {-1.0, 1.0}), NumericError);
  CHECK_THROWS_AS(nb_log_pmf(3, {1.0, 0.0}), NumericError);
}

namespace {

// Truncated-sum normalization oracle: sum exp(log pmf) until the tail bound
// theta*log(theta/(mu+theta)) ... is negligible; here until terms drop below
// 1e-18 for a stretch.
double pmf_mass(double mu, double theta, std::int64_t k_max) {
  double mass = 0.0;
  for (std::int64_t k = 0; k <= k_max; ++k) mass += std::exp(nb_log_pmf(k, {mu, theta}));
  return mass;
}

}  // namespace

TEST_CASE("nb pmf sums to one (truncated-sum oracle)") {
  // Includes the spec instance (k=3, mu=2.5, theta=0.7).
  CHECK(std::exp(nb_log_pmf(3, {2.5, 0.7})) > 0.0);
  struct Case {
    double mu, theta;
    std::int64_t k_max;
  };
  for (const auto& c : std::vector<Case>{{2.5, 0.7, 100000}, {1.0, 1.0, 4000}, {30.0, 5.0, 4000}, {0.2, 3.0, 2000}}) {
    const double mass = pmf_mass(c.mu, c.theta, c.k_max);
    CHECK(mass >= 1.0 - 1e-9);
    CHECK(mass <= 1.0 + 1e-12);
  }
}

TEST_CASE("nb_nll_batch trivial values and batch-mean semantics") {
  CountGrid counts(1, 1, 0);
  Matrix mu(1, 1, 1.0);
  std::vector<double> theta{1.0};
  CHECK(nb_nll_batch(counts, mu, theta) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // Duplicating the row leaves the mean unchanged.
  CountGrid counts2(2, 1, 0);
  Matrix mu2(2, 1, 1.0);
  CHECK(nb_nll_batch(counts2, mu2, theta) ==
        doctest::Approx(nb_nll_batch(counts, mu, theta)).epsilon(1e-15));

  CHECK_THROWS_AS(nb_nll_batch(counts, mu, std::vector<double>{-1.0}), NumericError);
}

TEST_CASE("nb_nll_batch equals the elementwise pmf mean (dual-path oracle)") {
  Rng rng(1234);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t n = 4, g = 7;
    CountGrid counts(n, g);
    Matrix mu(n, g);
    std::vector<double> theta(g);
    for (std::size_t j = 0; j < g; ++j) theta[j] = 0.2 + 5.0 * rng.uniform();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < g; ++j) {
        counts(i, j) = static_cast<std::int64_t>(rng.below(40));
        mu(i, j) = 0.05 + 20.0 * rng.uniform();
      }
    double direct = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < g; ++j) direct += nb_log_pmf(counts(i, j), {mu(i, j), theta[j]});
    direct = -direct / static_cast<double>(n);
    CHECK(nb_nll_batch(counts, mu, theta) == doctest::Approx(direct).epsilon(1e-10));
  }
}

TEST_CASE("nb_nll_grads: zero at the mean MLE and matches finite differences") {
  // dL/dmu vanishes where k = mu.
  CountGrid counts(1, 1, 4);
  Matrix mu(1, 1, 4.0);
  std::vector<double> theta{2.3};
  auto grads = nb_nll_grads(counts, mu, theta);
  CHECK(grads.d_mu(0, 0) == doctest::Approx(0.0).epsilon(1e-14));

  Rng rng(77);
  for (int rep = 0; rep < 5; ++rep) {
    const std::size_t n = 3, g = 5;
    CountGrid ks(n, g);
    Matrix mus(n, g);
    std::vector<double> thetas(g);
    for (std::size_t j = 0; j < g; ++j) thetas[j] = 0.3 + 4.0 * rng.uniform();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < g; ++j) {
        ks(i, j) = static_cast<std::int64_t>(rng.below(30));
        mus(i, j) = 0.2 + 15.0 * rng.uniform();
      }
    auto analytic = nb_nll_grads(ks, mus, thetas);
    const double h = 1e-5;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < g; ++j) {
        Matrix up = mus, down = mus;
        up(i, j) += h;
        down(i, j) -= h;
        const double numeric =
            (nb_nll_batch(ks, up, thetas) - nb_nll_batch(ks, down, thetas)) / (2.0 * h);
        const double denom = std::max({std::fabs(analytic.d_mu(i, j)), std::fabs(numeric), 1e-8});
        CHECK(std::fabs(analytic.d_mu(i, j) - numeric) / denom < 1e-6);
      }
    for (std::size_t j = 0; j < g; ++j) {
      auto up = thetas, down = thetas;
      up[j] += h;
      down[j] -= h;
      const double numeric =
          (nb_nll_batch(ks, mus, up) - nb_nll_batch(ks, mus, down)) / (2.0 * h);
      const double denom = std::max({std::fabs(analytic.d_theta[j]), std::fabs(numeric), 1e-8});
      CHECK(std::fabs(analytic.d_theta[j] - numeric) / denom < 1e-6);
    }
  }
}

TEST_CASE("nb_nll_grads: dispersion gradient vanishes in the Poisson limit at k = mu") {
  CountGrid counts(1, 1, 5);
  Matrix mu(1, 1, 5.0);
  std::vector<double> theta{1e6};
  auto grads = nb_nll_grads(counts, mu, theta);
  CHECK(std::fabs(grads.d_theta[0]) < 1e-6);
}

TEST_CASE("pairwise_sum matches sequential summation") {
  Rng rng(9);
  std::vector<double> values(1000);
  for (auto& v : values) v = rng.normal();
  double seq = 0.0;
  for (double v : values) seq += v;
  CHECK(pairwise_sum(values.data(), values.size()) == doctest::Approx(seq).epsilon(1e-12));
}
