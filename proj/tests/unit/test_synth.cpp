#include <doctest.h>

#include <cmath>

#include "cpnn/rng.hpp"
#include "cpnn/synth.hpp"

using namespace cpnn;

TEST_CASE("nb_sample: Monte Carlo moments match mu and mu + mu^2/theta") {
  Rng rng(2718);
  const double mu = 5.0, theta = 2.0;
  const int n = 100000;
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double k = static_cast<double>(nb_sample(mu, theta, rng));
    sum += k;
    sum_sq += k * k;
  }
  const double mean = sum / n;
  const double var = sum_sq / n - mean * mean;
  CHECK(mean >= 4.9);
  CHECK(mean <= 5.1);
  CHECK(var == doctest::Approx(17.5).epsilon(0.05));
}

TEST_CASE("nb_sample: Poisson limit at huge dispersion") {
  Rng rng(3141);
  const int n = 100000;
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double k = static_cast<double>(nb_sample(5.0, 1e6, rng));
    sum += k;
    sum_sq += k * k;
  }
  const double mean = sum / n;
  const double var = sum_sq / n - mean * mean;
  CHECK(var == doctest::Approx(5.0).epsilon(0.10));
}

TEST_CASE("generate: noiseless features are an exact linear map of true weights") {
  SynthConfig cfg;
  cfg.n_types = 4;
  cfg.n_genes = 30;
  cfg.feature_dim = 6;
  cfg.n_cells = 8;
  cfg.n_slides = 3;
  cfg.patches_per_slide = 5;
  cfg.feature_noise_sigma = 0.0;
  cfg.seed = 1;
  auto data = generate(cfg);
  for (std::size_t n = 0; n < cfg.n_slides; ++n)
    for (std::size_t i = 0; i < cfg.patches_per_slide; ++i)
      for (std::size_t d = 0; d < cfg.feature_dim; ++d) {
        double expected = 0.0;
        for (std::size_t c = 0; c < cfg.n_types; ++c)
          expected += data.truth.feature_map(d, c) * data.truth.patch_weights[n](i, c);
        CHECK(data.slides[n].features.features(i, d) ==
              doctest::Approx(expected).epsilon(1e-12));
      }
}

TEST_CASE("generate: dirichlet concentration pushes proportions to uniform") {
  SynthConfig cfg;
  cfg.n_types = 5;
  cfg.n_genes = 20;
  cfg.n_cells = 5;
  cfg.n_slides = 50;
  cfg.patches_per_slide = 2;
  cfg.dirichlet_alpha = 1e4;
  cfg.seed = 2;
  auto data = generate(cfg);
  for (std::size_t n = 0; n < cfg.n_slides; ++n)
    for (std::size_t c = 0; c < cfg.n_types; ++c)
      CHECK(std::fabs(data.truth.slide_proportions.values(n, c) - 0.2) < 0.02);
}

TEST_CASE("generate: fixed seed reproduces bit-identical output") {
  SynthConfig cfg;
  cfg.n_types = 3;
  cfg.n_genes = 25;
  cfg.n_batches = 2;
  cfg.n_cells = 60;
  cfg.n_slides = 6;
  cfg.patches_per_slide = 4;
  cfg.batch_scale_sigma = 0.3;
  cfg.modality_gap = {0.4, 0.2};
  cfg.seed = 777;
  auto a = generate(cfg);
  auto b = generate(cfg);
  CHECK(a.sc_counts.values.data() == b.sc_counts.values.data());
  CHECK(a.truth.prototypes.values.data() == b.truth.prototypes.values.data());
  CHECK(a.truth.alpha == b.truth.alpha);
  for (std::size_t n = 0; n < cfg.n_slides; ++n) {
    CHECK(a.slides[n].target_counts == b.slides[n].target_counts);
    CHECK(a.slides[n].features.features.data() == b.slides[n].features.features.data());
    CHECK(a.spot_counts[n].data() == b.spot_counts[n].data());
  }
}

TEST_CASE("generate: bulk totals concentrate near the nominal library size") {
  SynthConfig cfg;
  cfg.n_types = 5;
  cfg.n_genes = 200;
  cfg.n_cells = 5;
  cfg.n_slides = 10;
  cfg.patches_per_slide = 8;
  cfg.library_size = 100000;
  cfg.seed = 3;
  auto data = generate(cfg);
  double mean_dev = 0.0;
  for (const auto& slide : data.slides) {
    const double dev =
        std::fabs(static_cast<double>(slide.total_count) - 1e5) / 1e5;
    mean_dev += dev;
  }
  mean_dev /= static_cast<double>(data.slides.size());
  CHECK(mean_dev < 0.05);
}

TEST_CASE("generate: truth tensors satisfy their own invariants") {
  SynthConfig cfg;
  cfg.n_types = 4;
  cfg.n_genes = 30;
  cfg.n_cells = 8;
  cfg.n_slides = 5;
  cfg.patches_per_slide = 6;
  cfg.seed = 4;
  auto data = generate(cfg);
  // Prototype rows normalized.
  for (std::size_t c = 0; c < cfg.n_types; ++c) {
    double total = 0.0;
    for (std::size_t g = 0; g < cfg.n_genes; ++g) total += data.truth.prototypes.values(c, g);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
  }
  // Proportions and patch weights on the simplex.
  data.truth.slide_proportions.validate();
  for (const auto& weights : data.truth.patch_weights)
    for (std::size_t i = 0; i < weights.rows(); ++i) {
      double total = 0.0;
      for (std::size_t c = 0; c < weights.cols(); ++c) total += weights(i, c);
      CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
    }
  // Records self-validate.
  for (const auto& slide : data.slides) slide.validate();
}

TEST_CASE("SynthConfig validation rejects nonsense") {
  SynthConfig cfg;
  cfg.n_types = 0;
  CHECK_THROWS(cfg.validate());
  SynthConfig cfg2;
  cfg2.dirichlet_alpha = 0.0;
  CHECK_THROWS(cfg2.validate());
  SynthConfig cfg3;
  cfg3.n_cells = 1;
  cfg3.n_batches = 2;
  CHECK_THROWS(cfg3.validate());
}
