#ifndef CPNN_DATA_HPP
#define CPNN_DATA_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cpnn/grid.hpp"

namespace cpnn {

/// Nonnegative integer expression counts, rows (samples or cells) x genes.
/// Immutable after construction; validate() enforces the invariants.
struct CountMatrix {
  CountGrid values;
  std::vector<std::string> row_ids;
  std::vector<std::string> gene_ids;

  std::size_t n_rows() const { return values.rows(); }
  std::size_t n_genes() const { return values.cols(); }

  /// Checks nonnegativity, id uniqueness, and id/shape agreement.
  void validate() const;

  std::int64_t row_total(std::size_t r) const;
};

/// Per-cell type and batch assignments for a single-cell CountMatrix.
struct CellAnnotations {
  std::vector<int> cell_type;  // index into type_names
  std::vector<int> batch;      // index into batch_names
  std::vector<std::string> type_names;
  std::vector<std::string> batch_names;

  std::size_t n_cells() const { return cell_type.size(); }
  std::size_t n_types() const { return type_names.size(); }
  std::size_t n_batches() const { return batch_names.size(); }

  /// Every index in range, every category nonempty, sizes agree with n_cells.
  void validate() const;
};

/// Ordered patch feature vectors for one slide.
struct PatchFeatureSet {
  std::string slide_id;
  Matrix features;  // N_p x D
  std::vector<std::string> patch_ids;

  std::size_t n_patches() const { return features.rows(); }
  std::size_t dim() const { return features.cols(); }

  void validate() const;
};

/// One slide-level training example: features plus the observed bulk counts.
struct SampleRecord {
  std::string slide_id;
  PatchFeatureSet features;
  std::vector<std::int64_t> target_counts;
  std::int64_t total_count = 0;  // l^(n) = sum of target_counts

  void validate() const;
};

/// Per-slide spot expression for the patch-level task; spot rows are aligned
/// with the feature rows.
struct PatchRecord {
  PatchFeatureSet features;
  CountGrid spot_counts;  // N_p x G

  void validate() const;
};

/// Cross-validation fold assignment plus the explicit validation slides.
struct SplitPlan {
  std::vector<std::string> slide_ids;
  std::vector<int> fold_of;  // parallel to slide_ids
  std::vector<std::string> validation_ids;

  int n_folds() const;
  void validate() const;
};

/// Restrict both matrices to the genes they share, reordered
/// lexicographically. Throws DataError if the intersection is empty.
std::pair<CountMatrix, CountMatrix> align_genes(const CountMatrix& a, const CountMatrix& b);

/// Quality-filter thresholds. Defaults match the bulk profile; sc_defaults()
/// gives the single-cell profile.
struct FilterThresholds {
  double max_mito_fraction = 0.30;
  std::int64_t max_total_count = 40000;
  std::int64_t min_genes_per_row = 5000;
  std::int64_t min_rows_per_gene = 50;

  static FilterThresholds bulk_defaults() { return {}; }
  static FilterThresholds sc_defaults() {
    FilterThresholds t;
    t.max_total_count = 2500;
    t.min_genes_per_row = 200;
    t.min_rows_per_gene = 200;
    return t;
  }
};

struct FilterReport {
  std::size_t rows_dropped_mito = 0;
  std::size_t rows_dropped_total = 0;
  std::size_t rows_dropped_genes = 0;
  std::size_t genes_dropped = 0;
};

/// Optional preprocessing: drop rows by mitochondrial fraction (only when a
/// mito gene set is supplied), total count, and detected-gene count, then
/// drop rarely detected genes. Row filters run before the gene filter.
CountMatrix filter_counts(const CountMatrix& counts, const FilterThresholds& thresholds,
                          const std::unordered_set<std::string>* mito_genes,
                          FilterReport* report = nullptr);

}  // namespace cpnn

#endif
