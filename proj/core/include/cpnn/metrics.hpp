#ifndef CPNN_METRICS_HPP
#define CPNN_METRICS_HPP

#include <string>
#include <vector>

#include "cpnn/grid.hpp"

namespace cpnn {

/// Sample Pearson correlation. Returns NaN when either input is constant
/// (the undefined marker; evaluate() excludes such genes).
double pearson(const std::vector<double>& x, const std::vector<double>& y);

/// Spearman correlation: Pearson of average-rank transforms; ties get the
/// mean of their rank positions.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

/// Average ranks (1-based) with ties averaged.
std::vector<double> average_ranks(const std::vector<double>& x);

struct EvalOptions {
  bool per_gene = true;  // correlate across samples per gene; false: per sample across genes
  bool log1p = false;    // transform both tensors before correlating
};

struct EvalReport {
  std::vector<std::string> gene_ids;  // evaluated genes only
  std::vector<double> per_gene_pcc;
  std::vector<double> per_gene_scc;
  double mean_pcc = 0.0;
  double mean_scc = 0.0;
  std::size_t n_genes_evaluated = 0;
  std::size_t n_genes_excluded = 0;
};

/// Per-gene correlations of prediction vs truth across rows; genes constant
/// in either tensor are excluded and counted. Throws on fewer than 2 rows or
/// when every gene is excluded. With per_gene=false rows and columns swap
/// roles (the report's "gene" entries are then row ids).
EvalReport evaluate(const Matrix& pred, const CountGrid& truth,
                    const std::vector<std::string>& gene_ids, const EvalOptions& opts = {});

/// `gene,pcc,scc` rows for the evaluated genes.
void write_metrics_csv(const EvalReport& report, const std::string& path);

}  // namespace cpnn

#endif
