#include "cpnn/deconv.hpp"

#include <cmath>

#include "cpnn/errors.hpp"
#include "cpnn/io.hpp"
#include "cpnn/mathutil.hpp"
#include "cpnn/nb.hpp"
#include "cpnn/optim.hpp"
#include "cpnn/parallel.hpp"

namespace cpnn {

void ProportionMatrix::validate() const {
  if (row_ids.size() != values.rows() || cell_type_names.size() != values.cols())
    throw DataError("ProportionMatrix: id/shape mismatch");
  for (std::size_t r = 0; r < values.rows(); ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < values.cols(); ++c) {
      if (!(values(r, c) >= 0.0))
        throw DataError("ProportionMatrix: negative entry in row '" + row_ids[r] + "'");
      total += values(r, c);
    }
    if (std::fabs(total - 1.0) > 1e-9)
      throw DataError("ProportionMatrix: row '" + row_ids[r] + "' sums to " +
                      std::to_string(total));
  }
}

namespace {

// One sample's MLE: minimize sum_g -log NB(e_g; exp(zeta) * (p . T)_g * l, theta_g)
// over z (p = softmax(z)) and zeta.
std::vector<double> fit_sample(const std::int64_t* counts, double total_count,
                               const PrototypeMatrix& proto, const std::vector<double>& theta,
                               const DeconvConfig& cfg) {
  const std::size_t n_types = proto.n_types();
  const std::size_t n_genes = proto.n_genes();
  if (n_types == 1) return {1.0};

  std::vector<double> z(n_types, 0.0), zeta(1, 0.0);
  std::vector<double> g_z(n_types), g_zeta(1);
  std::vector<double> p(n_types), base(n_genes), d_base(n_genes);

  AdamW opt({cfg.lr, 0.9, 0.999, 1e-8});
  std::vector<TensorRef> tensors = {
      {"deconv.z", z.data(), g_z.data(), z.size(), 0.0},
      {"deconv.zeta", zeta.data(), g_zeta.data(), 1, 0.0},
  };

  for (int step = 0; step < cfg.steps; ++step) {
    for (std::size_t c = 0; c < n_types; ++c) p[c] = z[c];
    softmax_row(p.data(), n_types);
    const double scale = std::exp(zeta[0]) * total_count;

    for (std::size_t g = 0; g < n_genes; ++g) base[g] = 0.0;
    for (std::size_t c = 0; c < n_types; ++c) {
      const double pc = p[c];
      const double* row = proto.values.row(c);
      for (std::size_t g = 0; g < n_genes; ++g) base[g] += pc * row[g];
    }

    double loss = 0.0;
    g_zeta[0] = 0.0;
    for (std::size_t g = 0; g < n_genes; ++g) {
      const double mu0 = scale * base[g];
      const bool clamped = mu0 < kMeanFloor;
      const double mu = clamped ? kMeanFloor : mu0;
      const double k = static_cast<double>(counts[g]);
      const double th = theta[g];
      const double denom = mu + th;
      loss -= log_gamma(k + th) - log_gamma(th) - log_gamma(k + 1.0) +
              k * (std::log(mu) - std::log(denom)) + th * (std::log(th) - std::log(denom));
      const double d_mu = clamped ? 0.0 : -(k / mu - (k + th) / denom);
      d_base[g] = d_mu * scale;
      g_zeta[0] += d_mu * mu0;  // mu0 = exp(zeta) * l * base
    }
    if (!std::isfinite(loss)) throw NumericError("deconvolve: non-finite loss");

    // Softmax backprop for the mixing weights.
    std::vector<double> d_p(n_types, 0.0);
    for (std::size_t c = 0; c < n_types; ++c) {
      const double* row = proto.values.row(c);
      double acc = 0.0;
      for (std::size_t g = 0; g < n_genes; ++g) acc += d_base[g] * row[g];
      d_p[c] = acc;
    }
    double dot = 0.0;
    for (std::size_t c = 0; c < n_types; ++c) dot += d_p[c] * p[c];
    for (std::size_t c = 0; c < n_types; ++c) g_z[c] = p[c] * (d_p[c] - dot);

    opt.step(tensors);
  }

  for (std::size_t c = 0; c < n_types; ++c) p[c] = z[c];
  softmax_row(p.data(), n_types);
  return p;
}

}  // namespace

ProportionMatrix deconvolve(const CountMatrix& bulk, const PrototypeMatrix& proto,
                            const ScDispersion& disp, const DeconvConfig& cfg) {
  if (bulk.gene_ids != proto.gene_ids)
    throw DataError("deconvolve: bulk and prototype gene lists differ (align genes first)");
  if (disp.theta.size() != proto.n_genes())
    throw DataError("deconvolve: dispersion length does not match gene count");

  ProportionMatrix out;
  out.row_ids = bulk.row_ids;
  out.cell_type_names = proto.cell_type_names;
  out.values = Matrix(bulk.n_rows(), proto.n_types());

  parallel_for(bulk.n_rows(), cfg.jobs, [&](std::size_t n) {
    const double l = static_cast<double>(bulk.row_total(n));
    if (!(l > 0.0)) throw DataError("deconvolve: sample '" + bulk.row_ids[n] + "' has zero total");
    const auto p = fit_sample(bulk.values.row(n), l, proto, disp.theta, cfg);
    for (std::size_t c = 0; c < p.size(); ++c) out.values(n, c) = p[c];
  });

  out.validate();
  return out;
}

void write_proportions_csv(const ProportionMatrix& w, const std::string& path) {
  RealTable t;
  t.values = w.values;
  t.row_ids = w.row_ids;
  t.col_ids = w.cell_type_names;
  write_real_table(t, path, "slide_id");
}

ProportionMatrix read_proportions_csv(const std::string& path) {
  RealTable t = read_real_table(path);
  ProportionMatrix w;
  w.values = std::move(t.values);
  w.row_ids = std::move(t.row_ids);
  w.cell_type_names = std::move(t.col_ids);
  w.validate();
  return w;
}

}  // namespace cpnn
