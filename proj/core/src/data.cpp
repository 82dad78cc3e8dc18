#include "cpnn/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <unordered_map>

#include "cpnn/errors.hpp"

namespace cpnn {

namespace {

void require_unique(const std::vector<std::string>& ids, const char* what) {
  std::unordered_set<std::string> seen;
  seen.reserve(ids.size());
  for (const auto& id : ids)
    if (!seen.insert(id).second)
      throw DataError(std::string("duplicate ") + what + " '" + id + "'");
}

}  // namespace

void CountMatrix::validate() const {
  if (row_ids.size() != values.rows())
    throw DataError("CountMatrix: row id count does not match matrix rows");
  if (gene_ids.size() != values.cols())
    throw DataError("CountMatrix: gene id count does not match matrix columns");
  require_unique(row_ids, "row id");
  require_unique(gene_ids, "gene id");
  for (std::size_t r = 0; r < values.rows(); ++r)
    for (std::size_t c = 0; c < values.cols(); ++c)
      if (values(r, c) < 0)
        throw DataError("CountMatrix: negative count at row '" + row_ids[r] + "', gene '" +
                        gene_ids[c] + "'");
}

std::int64_t CountMatrix::row_total(std::size_t r) const {
  std::int64_t total = 0;
  for (std::size_t c = 0; c < values.cols(); ++c) total += values(r, c);
  return total;
}

void CellAnnotations::validate() const {
  if (cell_type.size() != batch.size())
    throw DataError("CellAnnotations: cell_type/batch length mismatch");
  std::vector<int> type_count(type_names.size(), 0), batch_count(batch_names.size(), 0);
  for (std::size_t i = 0; i < cell_type.size(); ++i) {
    if (cell_type[i] < 0 || static_cast<std::size_t>(cell_type[i]) >= type_names.size())
      throw DataError("CellAnnotations: cell type index out of range at cell " +
                      std::to_string(i));
    if (batch[i] < 0 || static_cast<std::size_t>(batch[i]) >= batch_names.size())
      throw DataError("CellAnnotations: batch index out of range at cell " + std::to_string(i));
    ++type_count[cell_type[i]];
    ++batch_count[batch[i]];
  }
  for (std::size_t t = 0; t < type_count.size(); ++t)
    if (type_count[t] == 0)
      throw DataError("CellAnnotations: empty cell type '" + type_names[t] + "'");
  for (std::size_t b = 0; b < batch_count.size(); ++b)
    if (batch_count[b] == 0)
      throw DataError("CellAnnotations: empty batch '" + batch_names[b] + "'");
}

void PatchFeatureSet::validate() const {
  if (features.rows() == 0) throw DataError("PatchFeatureSet '" + slide_id + "': no patches");
  if (patch_ids.size() != features.rows())
    throw DataError("PatchFeatureSet '" + slide_id + "': patch id count mismatch");
  for (std::size_t i = 0; i < features.rows(); ++i)
    for (std::size_t j = 0; j < features.cols(); ++j)
      if (!std::isfinite(features(i, j)))
        throw DataError("PatchFeatureSet '" + slide_id + "': non-finite feature at patch '" +
                        patch_ids[i] + "'");
}

void SampleRecord::validate() const {
  features.validate();
  std::int64_t total = 0;
  for (auto v : target_counts) {
    if (v < 0) throw DataError("SampleRecord '" + slide_id + "': negative target count");
    total += v;
  }
  if (total != total_count)
    throw DataError("SampleRecord '" + slide_id + "': total_count does not equal count sum");
  if (total_count <= 0)
    throw DataError("SampleRecord '" + slide_id + "': total count must be positive");
}

void PatchRecord::validate() const {
  features.validate();
  if (spot_counts.rows() != features.n_patches())
    throw DataError("PatchRecord '" + features.slide_id +
                    "': spot rows not aligned with feature rows");
  for (std::size_t i = 0; i < spot_counts.rows(); ++i)
    for (std::size_t j = 0; j < spot_counts.cols(); ++j)
      if (spot_counts(i, j) < 0)
        throw DataError("PatchRecord '" + features.slide_id + "': negative spot count");
}

int SplitPlan::n_folds() const {
  int mx = -1;
  for (int f : fold_of) mx = std::max(mx, f);
  return mx + 1;
}

void SplitPlan::validate() const {
  if (slide_ids.size() != fold_of.size())
    throw DataError("SplitPlan: slide/fold length mismatch");
  const int k = n_folds();
  std::vector<int> fold_count(std::max(k, 1), 0);
  std::unordered_set<std::string> slides;
  for (std::size_t i = 0; i < slide_ids.size(); ++i) {
    if (fold_of[i] < 0 || fold_of[i] >= k) throw DataError("SplitPlan: fold index out of range");
    ++fold_count[fold_of[i]];
    slides.insert(slide_ids[i]);
  }
  if (slides.size() != slide_ids.size()) throw DataError("SplitPlan: duplicate slide id");
  for (int f = 0; f < k; ++f)
    if (fold_count[f] == 0) throw DataError("SplitPlan: fold " + std::to_string(f) + " is empty");
  // Validation slides stay out of the folds so no test fold can contain one.
  for (const auto& v : validation_ids)
    if (slides.count(v))
      throw DataError("SplitPlan: validation id '" + v +
                      "' also appears in the fold table; validation slides must be held out");
}

std::pair<CountMatrix, CountMatrix> align_genes(const CountMatrix& a, const CountMatrix& b) {
  if (a.n_rows() == 0 || b.n_rows() == 0) throw DataError("align_genes: empty matrix");
  std::unordered_map<std::string, std::size_t> pos_b;
  pos_b.reserve(b.gene_ids.size());
  for (std::size_t j = 0; j < b.gene_ids.size(); ++j) pos_b.emplace(b.gene_ids[j], j);

  // Shared genes in lexicographic order; std::map keeps them sorted.
  std::map<std::string, std::pair<std::size_t, std::size_t>> shared;
  for (std::size_t j = 0; j < a.gene_ids.size(); ++j) {
    auto it = pos_b.find(a.gene_ids[j]);
    if (it != pos_b.end()) shared.emplace(a.gene_ids[j], std::make_pair(j, it->second));
  }
  if (shared.empty()) throw DataError("align_genes: no genes in common");

  auto take = [&](const CountMatrix& src, bool first) {
    CountMatrix out;
    out.row_ids = src.row_ids;
    out.gene_ids.reserve(shared.size());
    out.values = CountGrid(src.n_rows(), shared.size());
    std::size_t col = 0;
    for (const auto& [gene, idx] : shared) {
      out.gene_ids.push_back(gene);
      const std::size_t src_col = first ? idx.first : idx.second;
      for (std::size_t r = 0; r < src.n_rows(); ++r) out.values(r, col) = src.values(r, src_col);
      ++col;
    }
    return out;
  };
  return {take(a, true), take(b, false)};
}

CountMatrix filter_counts(const CountMatrix& counts, const FilterThresholds& thresholds,
                          const std::unordered_set<std::string>* mito_genes,
                          FilterReport* report) {
  FilterReport local;
  const std::size_t n = counts.n_rows(), g = counts.n_genes();

  std::vector<std::size_t> mito_cols;
  if (mito_genes) {
    for (std::size_t j = 0; j < g; ++j)
      if (mito_genes->count(counts.gene_ids[j])) mito_cols.push_back(j);
  }

  std::vector<std::size_t> kept_rows;
  for (std::size_t r = 0; r < n; ++r) {
    const std::int64_t total = counts.row_total(r);
    if (mito_genes && total > 0) {
      std::int64_t mito = 0;
      for (std::size_t j : mito_cols) mito += counts.values(r, j);
      if (static_cast<double>(mito) > thresholds.max_mito_fraction * static_cast<double>(total)) {
        ++local.rows_dropped_mito;
        continue;
      }
    }
    if (total > thresholds.max_total_count) {
      ++local.rows_dropped_total;
      continue;
    }
    std::int64_t detected = 0;
    for (std::size_t j = 0; j < g; ++j)
      if (counts.values(r, j) > 0) ++detected;
    if (detected < thresholds.min_genes_per_row) {
      ++local.rows_dropped_genes;
      continue;
    }
    kept_rows.push_back(r);
  }
  if (kept_rows.empty()) throw DataError("filter_counts: all rows filtered out");

  std::vector<std::size_t> kept_genes;
  for (std::size_t j = 0; j < g; ++j) {
    std::int64_t detected = 0;
    for (std::size_t r : kept_rows)
      if (counts.values(r, j) > 0) ++detected;
    if (detected >= thresholds.min_rows_per_gene)
      kept_genes.push_back(j);
    else
      ++local.genes_dropped;
  }
  if (kept_genes.empty()) throw DataError("filter_counts: all genes filtered out");

  CountMatrix out;
  out.values = CountGrid(kept_rows.size(), kept_genes.size());
  out.row_ids.reserve(kept_rows.size());
  out.gene_ids.reserve(kept_genes.size());
  for (std::size_t j : kept_genes) out.gene_ids.push_back(counts.gene_ids[j]);
  for (std::size_t i = 0; i < kept_rows.size(); ++i) {
    out.row_ids.push_back(counts.row_ids[kept_rows[i]]);
    for (std::size_t jj = 0; jj < kept_genes.size(); ++jj)
      out.values(i, jj) = counts.values(kept_rows[i], kept_genes[jj]);
  }
  if (report) *report = local;
  return out;
}

}  // namespace cpnn
