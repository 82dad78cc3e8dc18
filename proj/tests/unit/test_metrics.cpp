#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "cpnn/metrics.hpp"
#include "cpnn/rng.hpp"

using namespace cpnn;

namespace {

// Brute-force covariance-based PCC, kept deliberately naive.
double pcc_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxy += x[i] * y[i];
    sxx += x[i] * x[i];
    syy += y[i] * y[i];
  }
  const double cov = sxy / n - (sx / n) * (sy / n);
  const double vx = sxx / n - (sx / n) * (sx / n);
  const double vy = syy / n - (sy / n) * (sy / n);
  return cov / std::sqrt(vx * vy);
}

// Naive O(n^2) average ranks.
std::vector<double> rank_oracle(const std::vector<double>& x) {
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double below = 0, equal = 0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (x[j] < x[i]) ++below;
      if (x[j] == x[i]) ++equal;
    }
    ranks[i] = below + 0.5 * (equal + 1);
  }
  return ranks;
}

}  // namespace

TEST_CASE("pearson: exact values") {
  CHECK(pearson({1, 2, 3}, {1, 2, 3}) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(pearson({1, 2, 3}, {-1, -2, -3}) == doctest::Approx(-1.0).epsilon(1e-14));
  CHECK(pearson({1, 2, 3, 4}, {1, 3, 2, 4}) == doctest::Approx(0.8).epsilon(1e-14));
  CHECK(std::isnan(pearson({2, 2, 2}, {1, 2, 3})));
}

TEST_CASE("spearman: monotone invariance and tie handling") {
  std::vector<double> x{0.1, 0.7, 1.4, 2.0};
  std::vector<double> ex(x.size());
  std::transform(x.begin(), x.end(), ex.begin(), [](double v) { return std::exp(v); });
  CHECK(spearman(x, ex) == doctest::Approx(1.0).epsilon(1e-14));

  CHECK(spearman({1, 2, 3}, {3, 1, 2}) == doctest::Approx(-0.5).epsilon(1e-14));

  // Tie: ranks of (1,1,2) are (1.5,1.5,3).
  auto ranks = average_ranks({1, 1, 2});
  CHECK(ranks == std::vector<double>{1.5, 1.5, 3.0});
  const double expected = pcc_oracle({1.5, 1.5, 3.0}, {1.0, 2.0, 3.0});
  CHECK(spearman({1, 1, 2}, {1, 2, 3}) == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("pearson/spearman match brute-force oracles on random vectors with ties") {
  Rng rng(2024);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 3 + rng.below(30);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      // Coarse grid values force frequent ties.
      x[i] = static_cast<double>(rng.below(8));
      y[i] = rng.normal();
    }
    if (std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; })) x[0] += 1.0;
    CHECK(pearson(x, y) == doctest::Approx(pcc_oracle(x, y)).epsilon(1e-12));
    CHECK(spearman(x, y) ==
          doctest::Approx(pcc_oracle(rank_oracle(x), rank_oracle(y))).epsilon(1e-12));
  }
}

TEST_CASE("pearson affine invariance, spearman monotone-map invariance") {
  Rng rng(7);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t n = 5 + rng.below(20);
    std::vector<double> x(n), y(n), xa(n), ym(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.normal();
      y[i] = rng.normal();
    }
    const double a = 0.1 + rng.uniform() * 5.0, b = rng.normal();
    for (std::size_t i = 0; i < n; ++i) xa[i] = a * x[i] + b;
    CHECK(pearson(xa, y) == doctest::Approx(pearson(x, y)).epsilon(1e-12));
    // Strictly increasing map: x -> x^3 + 2x.
    for (std::size_t i = 0; i < n; ++i) ym[i] = y[i] * y[i] * y[i] + 2.0 * y[i];
    CHECK(spearman(x, ym) == doctest::Approx(spearman(x, y)).epsilon(1e-14));
  }
}

TEST_CASE("evaluate: per-gene correlations with exclusion of constant genes") {
  const std::size_t n = 6, g = 4;
  CountGrid truth(n, g);
  Matrix pred(n, g);
  Rng rng(5);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < g; ++j) {
      truth(i, j) = static_cast<std::int64_t>(rng.below(50)) + 1;
      pred(i, j) = static_cast<double>(truth(i, j));
    }
  // Gene 3 constant in truth: excluded.
  for (std::size_t i = 0; i < n; ++i) truth(i, 3) = 7;

  const std::vector<std::string> ids{"a", "b", "c", "d"};
  auto report = evaluate(pred, truth, ids);
  CHECK(report.n_genes_evaluated == 3);
  CHECK(report.n_genes_excluded == 1);
  CHECK(report.mean_pcc == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(report.mean_scc == doctest::Approx(1.0).epsilon(1e-12));

  // Column-wise positive affine transform preserves per-gene PCC = 1.
  Matrix scaled = pred;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < g; ++j) scaled(i, j) = 3.5 * pred(i, j) + double(j);
  auto report2 = evaluate(scaled, truth, ids);
  CHECK(report2.mean_pcc == doctest::Approx(1.0).epsilon(1e-12));

  // Symmetry under swapping pred/truth.
  Matrix truth_as_pred(n, g);
  CountGrid pred_as_truth(n, g);
  bool integral = true;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < g; ++j) {
      truth_as_pred(i, j) = static_cast<double>(truth(i, j));
      pred_as_truth(i, j) = static_cast<std::int64_t>(pred(i, j));
      integral &= pred(i, j) == std::floor(pred(i, j));
    }
  REQUIRE(integral);
  auto swapped = evaluate(truth_as_pred, pred_as_truth, ids);
  CHECK(swapped.mean_pcc == doctest::Approx(report.mean_pcc).epsilon(1e-12));
}
