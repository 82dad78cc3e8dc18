#include "cpnn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "cpnn/errors.hpp"
#include "cpnn/io.hpp"

namespace cpnn {

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("pearson: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) throw std::invalid_argument("pearson: need at least 2 points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

std::vector<double> average_ranks(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    // Positions i..j (0-based) share the mean of ranks i+1..j+1.
    const double mean_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mean_rank;
    i = j + 1;
  }
  return ranks;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman: length mismatch");
  return pearson(average_ranks(x), average_ranks(y));
}

EvalReport evaluate(const Matrix& pred, const CountGrid& truth,
                    const std::vector<std::string>& gene_ids, const EvalOptions& opts) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols())
    throw std::invalid_argument("evaluate: shape mismatch");

  // With per_gene=false the roles of rows and columns swap.
  const std::size_t n_series = opts.per_gene ? pred.cols() : pred.rows();
  const std::size_t series_len = opts.per_gene ? pred.rows() : pred.cols();
  if (series_len < 2) throw DataError("evaluate: need at least 2 samples");
  if (gene_ids.size() != n_series)
    throw std::invalid_argument("evaluate: id list does not match series count");

  EvalReport report;
  std::vector<double> a(series_len), b(series_len);
  for (std::size_t s = 0; s < n_series; ++s) {
    for (std::size_t i = 0; i < series_len; ++i) {
      const double pv = opts.per_gene ? pred(i, s) : pred(s, i);
      const double tv =
          static_cast<double>(opts.per_gene ? truth(i, s) : truth(s, i));
      a[i] = opts.log1p ? std::log1p(pv) : pv;
      b[i] = opts.log1p ? std::log1p(tv) : tv;
    }
    const double pcc = pearson(a, b);
    if (std::isnan(pcc)) {
      ++report.n_genes_excluded;
      continue;
    }
    report.gene_ids.push_back(gene_ids[s]);
    report.per_gene_pcc.push_back(pcc);
    report.per_gene_scc.push_back(spearman(a, b));
  }
  report.n_genes_evaluated = report.per_gene_pcc.size();
  if (report.n_genes_evaluated == 0) throw DataError("evaluate: all genes excluded as constant");
  for (std::size_t i = 0; i < report.n_genes_evaluated; ++i) {
    report.mean_pcc += report.per_gene_pcc[i];
    report.mean_scc += report.per_gene_scc[i];
  }
  report.mean_pcc /= static_cast<double>(report.n_genes_evaluated);
  report.mean_scc /= static_cast<double>(report.n_genes_evaluated);
  return report;
}

void write_metrics_csv(const EvalReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << "gene,pcc,scc\n";
  for (std::size_t i = 0; i < report.n_genes_evaluated; ++i)
    out << report.gene_ids[i] << ',' << format_double(report.per_gene_pcc[i]) << ','
        << format_double(report.per_gene_scc[i]) << '\n';
}

}  // namespace cpnn
