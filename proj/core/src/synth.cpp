#include "cpnn/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "cpnn/errors.hpp"
#include "cpnn/io.hpp"
#include "cpnn/mathutil.hpp"

namespace fs = std::filesystem;

namespace cpnn {

namespace {

// Internal scales of the generator; not exposed in the config.
constexpr double kCellLibrary = 2000.0;   // count scale of one cell
constexpr double kScDispersion = 2.0;     // per-gene NB dispersion of sc draws
constexpr double kBulkDispersion = 25.0;  // dispersion of bulk and spot draws
constexpr double kPatchLogitSigma = 0.3;  // within-slide weight heterogeneity

std::string zero_pad(std::size_t v, int width) {
  std::string s = std::to_string(v);
  while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
  return s;
}

}  // namespace

void SynthConfig::validate() const {
  if (n_types < 1 || n_genes < 1 || feature_dim < 1 || n_batches < 1 || n_cells < 1 ||
      n_slides < 1 || patches_per_slide < 1 || library_size < 1)
    throw DataError("SynthConfig: all counts must be >= 1");
  if (feature_noise_sigma < 0.0 || batch_scale_sigma < 0.0 || modality_gap.alpha_spread < 0.0 ||
      modality_gap.beta_level < 0.0)
    throw DataError("SynthConfig: sigmas must be >= 0");
  if (!(dirichlet_alpha > 0.0)) throw DataError("SynthConfig: dirichlet_alpha must be > 0");
  if (n_cells < n_types * n_batches)
    throw DataError("SynthConfig: need at least one cell per (type, batch) pair");
}

std::int64_t nb_sample(double mu, double theta, Rng& rng) {
  if (!(mu > 0.0) || !(theta > 0.0) || !std::isfinite(mu) || !std::isfinite(theta))
    throw NumericError("nb_sample: mu and theta must be positive and finite");
  const double rate = rng.gamma(theta, mu / theta);
  return rng.poisson(rate);
}

SynthData generate(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const std::size_t C = cfg.n_types, G = cfg.n_genes, D = cfg.feature_dim;

  SynthData data;
  SynthTruth& truth = data.truth;

  std::vector<std::string> gene_ids(G), type_names(C), batch_names(cfg.n_batches);
  for (std::size_t g = 0; g < G; ++g) gene_ids[g] = "g_" + zero_pad(g, 4);
  for (std::size_t c = 0; c < C; ++c) type_names[c] = "type_" + std::to_string(c);
  for (std::size_t d = 0; d < cfg.n_batches; ++d) batch_names[d] = "batch_" + std::to_string(d);

  // Normalized log-normal prototype rows.
  truth.prototypes.values = Matrix(C, G);
  truth.prototypes.cell_type_names = type_names;
  truth.prototypes.gene_ids = gene_ids;
  for (std::size_t c = 0; c < C; ++c) {
    double total = 0.0;
    for (std::size_t g = 0; g < G; ++g) {
      const double v = rng.lognormal(0.0, 1.0);
      truth.prototypes.values(c, g) = v;
      total += v;
    }
    for (std::size_t g = 0; g < G; ++g) truth.prototypes.values(c, g) /= total;
  }

  // Batch nuisance: batch 0 is the clean anchor.
  truth.nuisance.s.assign(cfg.n_batches, 1.0);
  truth.nuisance.b = Matrix(cfg.n_batches, G, 0.0);
  truth.nuisance.batch_names = batch_names;
  for (std::size_t d = 1; d < cfg.n_batches; ++d) {
    truth.nuisance.s[d] = rng.lognormal(0.0, cfg.batch_scale_sigma);
    for (std::size_t g = 0; g < G; ++g)
      truth.nuisance.b(d, g) = rng.uniform(0.0, 2.0 * cfg.batch_scale_sigma);
  }

  // Single-cell counts: cells rotate through (type, batch) pairs.
  data.sc_counts.values = CountGrid(cfg.n_cells, G);
  data.sc_counts.gene_ids = gene_ids;
  data.sc_counts.row_ids.resize(cfg.n_cells);
  data.annotations.type_names = type_names;
  data.annotations.batch_names = batch_names;
  data.annotations.cell_type.resize(cfg.n_cells);
  data.annotations.batch.resize(cfg.n_cells);
  for (std::size_t k = 0; k < cfg.n_cells; ++k) {
    const int type = static_cast<int>(k % C);
    const int batch = static_cast<int>((k / C) % cfg.n_batches);
    data.sc_counts.row_ids[k] = "cell_" + zero_pad(k, 6);
    data.annotations.cell_type[k] = type;
    data.annotations.batch[k] = batch;
    const double sd = truth.nuisance.s[batch];
    for (std::size_t g = 0; g < G; ++g) {
      const double t_count = truth.prototypes.values(type, g) * kCellLibrary;
      const double mu = (t_count + truth.nuisance.b(batch, g)) * sd;
      data.sc_counts.values(k, g) = mu > 0.0 ? nb_sample(mu, kScDispersion, rng) : 0;
    }
  }

  // Modality gap between the cell-derived prototypes and bulk measurement.
  truth.alpha.resize(G);
  truth.beta.resize(G);
  const double beta_scale =
      cfg.modality_gap.beta_level * static_cast<double>(cfg.patches_per_slide) /
      static_cast<double>(G);
  for (std::size_t g = 0; g < G; ++g)
    truth.alpha[g] = cfg.modality_gap.alpha_spread > 0.0
                         ? std::exp(rng.normal(0.0, cfg.modality_gap.alpha_spread))
                         : 1.0;
  for (std::size_t g = 0; g < G; ++g)
    truth.beta[g] = cfg.modality_gap.beta_level > 0.0 ? rng.uniform(0.0, beta_scale) : 0.0;

  // Fixed linear map from weights to features.
  truth.feature_map = Matrix(D, C);
  for (auto& v : truth.feature_map.data()) v = rng.normal();

  truth.slide_proportions.values = Matrix(cfg.n_slides, C);
  truth.slide_proportions.cell_type_names = type_names;
  truth.patch_weights.reserve(cfg.n_slides);
  data.slides.reserve(cfg.n_slides);
  data.spot_counts.reserve(cfg.n_slides);

  const std::size_t n_patches = cfg.patches_per_slide;
  const double spot_library =
      std::max(200.0, static_cast<double>(cfg.library_size) / static_cast<double>(n_patches));

  for (std::size_t n = 0; n < cfg.n_slides; ++n) {
    const std::string slide_id = "slide_" + zero_pad(n, 4);
    truth.slide_proportions.row_ids.push_back(slide_id);
    const auto props = rng.dirichlet(cfg.dirichlet_alpha, C);
    for (std::size_t c = 0; c < C; ++c) truth.slide_proportions.values(n, c) = props[c];

    // Patch weights: logit-space Gaussian perturbation of the slide mix.
    Matrix weights(n_patches, C);
    for (std::size_t i = 0; i < n_patches; ++i) {
      double* row = weights.row(i);
      for (std::size_t c = 0; c < C; ++c)
        row[c] = std::log(std::max(props[c], 1e-12)) + rng.normal(0.0, kPatchLogitSigma);
      softmax_row(row, C);
    }

    SampleRecord record;
    record.slide_id = slide_id;
    record.features.slide_id = slide_id;
    record.features.features = Matrix(n_patches, D);
    record.features.patch_ids.resize(n_patches);
    for (std::size_t i = 0; i < n_patches; ++i) {
      record.features.patch_ids[i] = "patch_" + zero_pad(i, 4);
      for (std::size_t d = 0; d < D; ++d) {
        double acc = 0.0;
        for (std::size_t c = 0; c < C; ++c) acc += truth.feature_map(d, c) * weights(i, c);
        if (cfg.feature_noise_sigma > 0.0) acc += rng.normal(0.0, cfg.feature_noise_sigma);
        record.features.features(i, d) = acc;
      }
    }

    // Bulk counts around the Eq. 1-2 mean with the true gap parameters.
    std::vector<double> mix(G, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
      double s_c = 0.0;
      for (std::size_t i = 0; i < n_patches; ++i) s_c += weights(i, c);
      const double* proto_row = truth.prototypes.values.row(c);
      for (std::size_t g = 0; g < G; ++g) mix[g] += s_c * proto_row[g];
    }
    std::vector<double> mu(G);
    double total_mu = 0.0;
    for (std::size_t g = 0; g < G; ++g) {
      mu[g] = truth.alpha[g] * mix[g] + truth.beta[g];
      total_mu += mu[g];
    }
    record.target_counts.resize(G);
    record.total_count = 0;
    for (std::size_t g = 0; g < G; ++g) {
      const double mu_bar = static_cast<double>(cfg.library_size) * mu[g] / total_mu;
      record.target_counts[g] = mu_bar > 0.0 ? nb_sample(mu_bar, kBulkDispersion, rng) : 0;
      record.total_count += record.target_counts[g];
    }
    if (record.total_count == 0) record.target_counts[0] = record.total_count = 1;

    // Spot counts around the per-patch mean, rescaled to a spot library.
    CountGrid spots(n_patches, G);
    for (std::size_t i = 0; i < n_patches; ++i) {
      double spot_total = 0.0;
      std::vector<double> spot_mu(G);
      for (std::size_t g = 0; g < G; ++g) {
        double acc = 0.0;
        for (std::size_t c = 0; c < C; ++c)
          acc += weights(i, c) * truth.prototypes.values(c, g);
        spot_mu[g] = truth.alpha[g] * acc + truth.beta[g] / static_cast<double>(n_patches);
        spot_total += spot_mu[g];
      }
      for (std::size_t g = 0; g < G; ++g) {
        const double m = spot_library * spot_mu[g] / spot_total;
        spots(i, g) = m > 0.0 ? nb_sample(m, kBulkDispersion, rng) : 0;
      }
    }

    truth.patch_weights.push_back(std::move(weights));
    data.slides.push_back(std::move(record));
    data.spot_counts.push_back(std::move(spots));
  }
  return data;
}

void write_synth_dataset(const SynthData& data, const SynthConfig& cfg,
                         const std::string& out_dir, const std::string& timestamp) {
  fs::create_directories(out_dir);
  fs::create_directories(out_dir + "/features");
  fs::create_directories(out_dir + "/spots");
  fs::create_directories(out_dir + "/truth/patch_weights");

  write_sparse_counts(data.sc_counts, out_dir + "/sc_counts.mtx", out_dir + "/sc_rows.txt",
                      out_dir + "/sc_genes.txt");
  write_annotations(data.annotations, data.sc_counts.row_ids, out_dir + "/annotations.csv");

  CountMatrix bulk;
  bulk.gene_ids = data.sc_counts.gene_ids;
  bulk.values = CountGrid(data.slides.size(), bulk.gene_ids.size());
  for (std::size_t n = 0; n < data.slides.size(); ++n) {
    bulk.row_ids.push_back(data.slides[n].slide_id);
    for (std::size_t g = 0; g < bulk.gene_ids.size(); ++g)
      bulk.values(n, g) = data.slides[n].target_counts[g];
  }
  write_dense_counts(bulk, out_dir + "/bulk.csv");

  for (std::size_t n = 0; n < data.slides.size(); ++n) {
    const auto& record = data.slides[n];
    write_feature_set(record.features, out_dir + "/features/" + record.slide_id + ".csv");
    CountMatrix spots;
    spots.gene_ids = bulk.gene_ids;
    spots.row_ids = record.features.patch_ids;
    spots.values = data.spot_counts[n];
    write_dense_counts(spots, out_dir + "/spots/" + record.slide_id + ".csv");
  }

  write_prototype_csv(data.truth.prototypes, out_dir + "/truth/prototypes.csv");
  write_proportions_csv(data.truth.slide_proportions, out_dir + "/truth/proportions.csv");
  {
    std::ofstream out(out_dir + "/truth/alpha_beta.csv");
    out << "gene,alpha,beta\n";
    for (std::size_t g = 0; g < data.truth.alpha.size(); ++g)
      out << data.truth.prototypes.gene_ids[g] << ',' << format_double(data.truth.alpha[g]) << ','
          << format_double(data.truth.beta[g]) << '\n';
  }
  {
    std::ofstream out(out_dir + "/truth/batch_scales.csv");
    out << "batch,s\n";
    for (std::size_t d = 0; d < data.truth.nuisance.s.size(); ++d)
      out << data.truth.nuisance.batch_names[d] << ',' << format_double(data.truth.nuisance.s[d])
          << '\n';
  }
  {
    RealTable t;
    t.values = data.truth.nuisance.b;
    t.row_ids = data.truth.nuisance.batch_names;
    t.col_ids = data.truth.prototypes.gene_ids;
    write_real_table(t, out_dir + "/truth/batch_shift.csv", "batch");
  }
  for (std::size_t n = 0; n < data.truth.patch_weights.size(); ++n) {
    RealTable t;
    t.values = data.truth.patch_weights[n];
    t.row_ids = data.slides[n].features.patch_ids;
    t.col_ids = data.truth.prototypes.cell_type_names;
    write_real_table(t, out_dir + "/truth/patch_weights/" + data.slides[n].slide_id + ".csv",
                     "patch_id");
  }

  nlohmann::json manifest;
  manifest["config"] = {{"n_types", cfg.n_types},
                        {"n_genes", cfg.n_genes},
                        {"feature_dim", cfg.feature_dim},
                        {"n_batches", cfg.n_batches},
                        {"n_cells", cfg.n_cells},
                        {"n_slides", cfg.n_slides},
                        {"patches_per_slide", cfg.patches_per_slide},
                        {"library_size", cfg.library_size},
                        {"dirichlet_alpha", cfg.dirichlet_alpha},
                        {"feature_noise_sigma", cfg.feature_noise_sigma},
                        {"batch_scale_sigma", cfg.batch_scale_sigma},
                        {"modality_gap",
                         {{"alpha_spread", cfg.modality_gap.alpha_spread},
                          {"beta_level", cfg.modality_gap.beta_level}}},
                        {"seed", cfg.seed}};
  if (!timestamp.empty()) manifest["timestamp"] = timestamp;
  std::ofstream out(out_dir + "/manifest.json");
  if (!out) throw DataError("cannot open manifest.json for writing");
  out << manifest.dump(2) << '\n';
}

SynthConfig read_synth_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "' for reading");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  if (j.contains("config")) j = j.at("config");  // accept a manifest too
  SynthConfig cfg;
  cfg.n_types = j.value("n_types", cfg.n_types);
  cfg.n_genes = j.value("n_genes", cfg.n_genes);
  cfg.feature_dim = j.value("feature_dim", cfg.feature_dim);
  cfg.n_batches = j.value("n_batches", cfg.n_batches);
  cfg.n_cells = j.value("n_cells", cfg.n_cells);
  cfg.n_slides = j.value("n_slides", cfg.n_slides);
  cfg.patches_per_slide = j.value("patches_per_slide", cfg.patches_per_slide);
  cfg.library_size = j.value("library_size", cfg.library_size);
  cfg.dirichlet_alpha = j.value("dirichlet_alpha", cfg.dirichlet_alpha);
  cfg.feature_noise_sigma = j.value("feature_noise_sigma", cfg.feature_noise_sigma);
  cfg.batch_scale_sigma = j.value("batch_scale_sigma", cfg.batch_scale_sigma);
  if (j.contains("modality_gap")) {
    cfg.modality_gap.alpha_spread = j["modality_gap"].value("alpha_spread", 0.0);
    cfg.modality_gap.beta_level = j["modality_gap"].value("beta_level", 0.0);
  }
  cfg.seed = j.value("seed", cfg.seed);
  cfg.validate();
  return cfg;
}

}  // namespace cpnn
