#ifndef CPNN_SYNTH_HPP
#define CPNN_SYNTH_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "cpnn/data.hpp"
#include "cpnn/deconv.hpp"
#include "cpnn/prototype.hpp"
#include "cpnn/rng.hpp"

namespace cpnn {

struct ModalityGap {
  double alpha_spread = 0.0;  // alpha*_g = exp(N(0, alpha_spread))
  double beta_level = 0.0;    // beta*_g = beta_level * (N_p / G) * U[0,1]
};

struct SynthConfig {
  std::size_t n_types = 5;
  std::size_t n_genes = 200;
  std::size_t feature_dim = 16;
  std::size_t n_batches = 1;
  std::size_t n_cells = 2000;
  std::size_t n_slides = 120;
  std::size_t patches_per_slide = 32;
  std::int64_t library_size = 100000;  // nominal l per slide
  double dirichlet_alpha = 1.0;
  double feature_noise_sigma = 0.1;
  double batch_scale_sigma = 0.0;  // also scales the additive shift level
  ModalityGap modality_gap;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Starred ground truth behind a generated dataset.
struct SynthTruth {
  PrototypeMatrix prototypes;          // normalized rows
  ProportionMatrix slide_proportions;  // N x C
  std::vector<Matrix> patch_weights;   // per slide, N_p x C
  std::vector<double> alpha;
  std::vector<double> beta;
  BatchNuisance nuisance;
  Matrix feature_map;  // D x C map from weights to features
};

struct SynthData {
  CountMatrix sc_counts;
  CellAnnotations annotations;
  std::vector<SampleRecord> slides;
  std::vector<CountGrid> spot_counts;  // per slide, N_p x G (patch-level task)
  SynthTruth truth;
};

/// NB(mu, theta) draw via the Gamma-Poisson mixture:
/// rate ~ Gamma(shape=theta, scale=mu/theta), count ~ Poisson(rate).
std::int64_t nb_sample(double mu, double theta, Rng& rng);

/// Samples a full dataset from the model's own generative assumptions.
/// Cells rotate through (type, batch) pairs; prototype rows are normalized
/// log-normal draws; per-slide proportions are Dirichlet; patch weights are
/// logit-space perturbations of their slide's proportions; features are a
/// fixed random linear map of the true weights plus Gaussian noise; bulk and
/// spot counts are NB draws around the model mean. One seeded generator
/// drives everything.
SynthData generate(const SynthConfig& cfg);

/// Writes the dataset in the formats the pipeline consumes plus a truth/
/// directory and manifest.json. Timestamps are written only when
/// `timestamp` is nonempty.
void write_synth_dataset(const SynthData& data, const SynthConfig& cfg,
                         const std::string& out_dir, const std::string& timestamp = "");

SynthConfig read_synth_config(const std::string& path);

}  // namespace cpnn

#endif
