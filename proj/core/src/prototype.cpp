#include "cpnn/prototype.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "cpnn/errors.hpp"
#include "cpnn/io.hpp"
#include "cpnn/mathutil.hpp"
#include "cpnn/nb.hpp"
#include "cpnn/optim.hpp"

namespace cpnn {

namespace {

// Per-(type,batch) cell groups; all cells of a group share one NB mean row.
struct CellGroup {
  int type;
  int batch;
  std::vector<std::size_t> rows;
};

std::vector<CellGroup> group_cells(const CellAnnotations& ann) {
  std::vector<CellGroup> groups;
  const int types = static_cast<int>(ann.n_types());
  std::vector<int> index(types * ann.n_batches(), -1);
  for (std::size_t k = 0; k < ann.n_cells(); ++k) {
    const int flat = ann.batch[k] * types + ann.cell_type[k];
    if (index[flat] < 0) {
      index[flat] = static_cast<int>(groups.size());
      groups.push_back({ann.cell_type[k], ann.batch[k], {}});
    }
    groups[index[flat]].rows.push_back(k);
  }
  return groups;
}

}  // namespace

PrototypeFit fit_prototypes(const CountMatrix& sc, const CellAnnotations& ann,
                            const FitConfig& cfg) {
  sc.validate();
  ann.validate();
  if (ann.n_cells() != sc.n_rows())
    throw DataError("fit_prototypes: annotation count does not match cell count");
  const std::size_t n_types = ann.n_types();
  const std::size_t n_batches = ann.n_batches();
  const std::size_t n_genes = sc.n_genes();

  PrototypeFit fit;
  std::vector<std::size_t> cells_per_type(n_types, 0);
  for (int t : ann.cell_type) ++cells_per_type[t];
  for (std::size_t t = 0; t < n_types; ++t)
    if (cells_per_type[t] < 2)
      fit.warnings.push_back("cell type '" + ann.type_names[t] + "' has only " +
                             std::to_string(cells_per_type[t]) + " cell(s)");

  const auto groups = group_cells(ann);

  // Free parameters: t = softplus(ft), b = softplus(fb), s_d = exp(fs_{d-1})
  // for d >= 1 (s_0 = 1), theta = exp(fth).
  std::vector<double> ft(n_types * n_genes);
  std::vector<double> fb(n_batches * n_genes, inv_softplus(1e-4));
  std::vector<double> fs(n_batches > 1 ? n_batches - 1 : 0, 0.0);
  std::vector<double> fth(n_genes, 0.0);

  // Method-of-moments warm start: per-type empirical mean + 1e-4.
  {
    Matrix mean(n_types, n_genes, 0.0);
    for (std::size_t k = 0; k < sc.n_rows(); ++k) {
      const int t = ann.cell_type[k];
      for (std::size_t g = 0; g < n_genes; ++g)
        mean(t, g) += static_cast<double>(sc.values(k, g));
    }
    for (std::size_t t = 0; t < n_types; ++t)
      for (std::size_t g = 0; g < n_genes; ++g)
        ft[t * n_genes + g] =
            inv_softplus(mean(t, g) / static_cast<double>(cells_per_type[t]) + 1e-4);
  }

  std::vector<double> g_ft(ft.size()), g_fb(fb.size()), g_fs(fs.size()), g_fth(fth.size());

  // lgamma(k+1) only depends on the count; cache it across all epochs.
  std::int64_t max_count = 0;
  for (auto v : sc.values.data()) max_count = std::max(max_count, v);
  std::vector<double> lg_fact(static_cast<std::size_t>(max_count) + 1);
  for (std::size_t k = 0; k < lg_fact.size(); ++k)
    lg_fact[k] = log_gamma(static_cast<double>(k) + 1.0);

  std::vector<double> t_val(ft.size()), b_val(fb.size()), theta(n_genes);
  std::vector<double> lg_theta(n_genes), psi_theta(n_genes), log_theta(n_genes);
  std::vector<double> s_val(n_batches);
  // (lgamma(k+theta), digamma(k+theta)) per count value, rebuilt per gene.
  // Stamped cache: valid entries are those whose stamp matches the current
  // (group, gene) pass, so no O(max_count) reset per gene.
  std::vector<double> lg_k(lg_fact.size()), psi_k(lg_fact.size());
  std::vector<std::uint32_t> k_stamp(lg_fact.size(), 0);
  std::uint32_t stamp = 0;

  auto eval_epoch = [&](bool with_grads) -> double {
    for (std::size_t i = 0; i < ft.size(); ++i) t_val[i] = softplus(ft[i]);
    for (std::size_t i = 0; i < fb.size(); ++i) b_val[i] = softplus(fb[i]);
    s_val[0] = 1.0;
    for (std::size_t d = 1; d < n_batches; ++d) s_val[d] = std::exp(fs[d - 1]);
    for (std::size_t g = 0; g < n_genes; ++g) {
      theta[g] = std::exp(fth[g]);
      lg_theta[g] = log_gamma(theta[g]);
      psi_theta[g] = digamma(theta[g]);
      log_theta[g] = std::log(theta[g]);
    }
    if (with_grads) {
      std::fill(g_ft.begin(), g_ft.end(), 0.0);
      std::fill(g_fb.begin(), g_fb.end(), 0.0);
      std::fill(g_fs.begin(), g_fs.end(), 0.0);
      std::fill(g_fth.begin(), g_fth.end(), 0.0);
    }

    double nll = 0.0;
    for (const auto& grp : groups) {
      const std::size_t t_off = static_cast<std::size_t>(grp.type) * n_genes;
      const std::size_t b_off = static_cast<std::size_t>(grp.batch) * n_genes;
      const double sd = s_val[grp.batch];
      double d_sd = 0.0;
      for (std::size_t g = 0; g < n_genes; ++g) {
        const double tb = t_val[t_off + g] + b_val[b_off + g];
        const double mu0 = tb * sd;
        const bool clamped = mu0 < kMeanFloor;
        const double mu = clamped ? kMeanFloor : mu0;
        const double th = theta[g];
        const double denom = mu + th;
        const double log_denom = std::log(denom);
        const double log_mu = std::log(mu);
        const double const_term = -lg_theta[g] + th * (log_theta[g] - log_denom);
        ++stamp;

        double d_mu_sum = 0.0, d_th_sum = 0.0;
        for (std::size_t row : grp.rows) {
          const std::int64_t ki = sc.values(row, g);
          const auto kz = static_cast<std::size_t>(ki);
          const double k = static_cast<double>(ki);
          if (k_stamp[kz] != stamp) {
            lg_k[kz] = ki == 0 ? lg_theta[g] : log_gamma(k + th);
            if (with_grads) psi_k[kz] = ki == 0 ? psi_theta[g] : digamma(k + th);
            k_stamp[kz] = stamp;
          }
          nll -= lg_k[kz] - lg_theta[g] - lg_fact[kz] + k * (log_mu - log_denom) + const_term;
          if (with_grads) {
            d_mu_sum -= k / mu - (k + th) / denom;
            d_th_sum -= psi_k[kz] - psi_theta[g] + log_theta[g] + 1.0 - log_denom -
                        (k + th) / denom;
          }
        }
        if (with_grads) {
          g_fth[g] += d_th_sum * th;
          if (!clamped) {
            const double d_tb = d_mu_sum * sd;
            g_ft[t_off + g] += d_tb * sigmoid(ft[t_off + g]);
            g_fb[b_off + g] += d_tb * sigmoid(fb[b_off + g]);
            d_sd += d_mu_sum * tb;
          }
        }
      }
      if (with_grads && grp.batch > 0) g_fs[grp.batch - 1] += d_sd * sd;
    }

    // Weak quadratic penalty keeps the background shift from absorbing signal.
    for (std::size_t i = 0; i < fb.size(); ++i) {
      nll += cfg.b_penalty * b_val[i] * b_val[i];
      if (with_grads) g_fb[i] += 2.0 * cfg.b_penalty * b_val[i] * sigmoid(fb[i]);
    }
    return nll;
  };

  const double initial_nll = eval_epoch(false);
  if (!std::isfinite(initial_nll))
    throw NumericError("fit_prototypes: NLL non-finite at initialization");
  fit.nll_milestones.push_back(initial_nll);

  AdamW opt({cfg.lr, 0.9, 0.999, 1e-8});
  std::vector<TensorRef> tensors = {
      {"prototype.t", ft.data(), g_ft.data(), ft.size(), 0.0},
      {"prototype.b", fb.data(), g_fb.data(), fb.size(), 0.0},
      {"prototype.theta", fth.data(), g_fth.data(), fth.size(), 0.0},
  };
  if (!fs.empty()) tensors.push_back({"prototype.s", fs.data(), g_fs.data(), fs.size(), 0.0});

  double last_nll = initial_nll;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    last_nll = eval_epoch(true);
    if (!std::isfinite(last_nll))
      throw NumericError("fit_prototypes: NLL non-finite at epoch " + std::to_string(epoch));
    opt.step(tensors);
    if (epoch % cfg.milestone_every == 0) fit.nll_milestones.push_back(last_nll);
  }
  const double final_nll = eval_epoch(false);
  fit.nll_milestones.push_back(final_nll);
  if (final_nll > initial_nll)
    throw NumericError("fit_prototypes: NLL failed to decrease over the run (initial " +
                       std::to_string(initial_nll) + ", final " + std::to_string(final_nll) + ")");

  fit.raw.values = Matrix(n_types, n_genes);
  for (std::size_t i = 0; i < ft.size(); ++i) fit.raw.values.data()[i] = softplus(ft[i]);
  fit.raw.cell_type_names = ann.type_names;
  fit.raw.gene_ids = sc.gene_ids;

  fit.nuisance.s.assign(n_batches, 1.0);
  for (std::size_t d = 1; d < n_batches; ++d) fit.nuisance.s[d] = std::exp(fs[d - 1]);
  fit.nuisance.b = Matrix(n_batches, n_genes);
  for (std::size_t i = 0; i < fb.size(); ++i) fit.nuisance.b.data()[i] = softplus(fb[i]);
  fit.nuisance.batch_names = ann.batch_names;

  fit.dispersion.theta.resize(n_genes);
  for (std::size_t g = 0; g < n_genes; ++g) fit.dispersion.theta[g] = std::exp(fth[g]);

  fit.normalized = normalize_prototype(fit.raw);
  return fit;
}

PrototypeMatrix normalize_prototype(const PrototypeMatrix& raw) {
  PrototypeMatrix out = raw;
  for (std::size_t c = 0; c < out.n_types(); ++c) {
    double total = 0.0;
    for (std::size_t g = 0; g < out.n_genes(); ++g) total += out.values(c, g);
    if (!(total > 0.0))
      throw NumericError("normalize_prototype: row '" +
                         (c < out.cell_type_names.size() ? out.cell_type_names[c]
                                                         : std::to_string(c)) +
                         "' has non-positive sum");
    for (std::size_t g = 0; g < out.n_genes(); ++g) out.values(c, g) /= total;
  }
  return out;
}

void write_prototype_csv(const PrototypeMatrix& proto, const std::string& path) {
  RealTable t;
  t.values = proto.values;
  t.row_ids = proto.cell_type_names;
  t.col_ids = proto.gene_ids;
  write_real_table(t, path, "cell_type");
}

PrototypeMatrix read_prototype_csv(const std::string& path) {
  RealTable t = read_real_table(path);
  PrototypeMatrix proto;
  proto.values = std::move(t.values);
  proto.cell_type_names = std::move(t.row_ids);
  proto.gene_ids = std::move(t.col_ids);
  for (double v : proto.values.data())
    if (!(v >= 0.0) || !std::isfinite(v))
      throw DataError(path + ": prototype entries must be finite and nonnegative");
  return proto;
}

void write_prototype_sidecar(const PrototypeFit& fit, const std::string& path) {
  nlohmann::json j;
  j["s"] = fit.nuisance.s;
  j["batch_names"] = fit.nuisance.batch_names;
  j["theta_sc"] = fit.dispersion.theta;
  nlohmann::json b_summary = nlohmann::json::array();
  for (std::size_t d = 0; d < fit.nuisance.b.rows(); ++d) {
    double mean = 0.0, mx = 0.0;
    for (std::size_t g = 0; g < fit.nuisance.b.cols(); ++g) {
      mean += fit.nuisance.b(d, g);
      mx = std::max(mx, fit.nuisance.b(d, g));
    }
    mean /= static_cast<double>(fit.nuisance.b.cols());
    b_summary.push_back({{"batch", fit.nuisance.batch_names[d]}, {"mean", mean}, {"max", mx}});
  }
  j["b_summary"] = b_summary;
  j["nll_milestones"] = fit.nll_milestones;
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << j.dump(2) << '\n';
}

PrototypeSidecar read_prototype_sidecar(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "' for reading");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  PrototypeSidecar side;
  side.s = j.at("s").get<std::vector<double>>();
  side.batch_names = j.at("batch_names").get<std::vector<std::string>>();
  side.theta_sc = j.at("theta_sc").get<std::vector<double>>();
  for (double th : side.theta_sc)
    if (!(th > 0.0)) throw DataError(path + ": theta_sc entries must be positive");
  return side;
}

}  // namespace cpnn
