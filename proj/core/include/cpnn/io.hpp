#ifndef CPNN_IO_HPP
#define CPNN_IO_HPP

#include <string>
#include <vector>

#include "cpnn/data.hpp"

namespace cpnn {

/// Shortest-exact decimal for a double (17 significant digits, "%.17g").
/// Every float written by this project goes through here so that
/// write-then-read round-trips are bit-exact.
std::string format_double(double v);

/// Dense counts CSV: header `id,<gene_1>,...,<gene_G>`, one row id plus G
/// integers per body row. UTF-8, comma separated, ids unquoted.
CountMatrix read_dense_counts(const std::string& path);
void write_dense_counts(const CountMatrix& m, const std::string& path);

/// Matrix Market `matrix coordinate integer general` plus one-id-per-line
/// sidecar files for rows and genes. Unlisted coordinates are zero.
CountMatrix read_sparse_counts(const std::string& matrix_path, const std::string& row_ids_path,
                               const std::string& gene_ids_path);
void write_sparse_counts(const CountMatrix& m, const std::string& matrix_path,
                         const std::string& row_ids_path, const std::string& gene_ids_path);

/// Feature CSV: header `patch_id,f_0,...,f_{D-1}`. The slide id is the file
/// stem unless overridden.
PatchFeatureSet read_feature_set(const std::string& path, const std::string& slide_id = "");
void write_feature_set(const PatchFeatureSet& fs, const std::string& path);

/// All `<slide>.csv` feature files in a directory, sorted by slide id.
std::vector<PatchFeatureSet> read_feature_dir(const std::string& dir);

/// Splits CSV `slide_id,fold[,patient]`. When the patient column is present,
/// all slides of a patient must share a fold. The optional validation file is
/// one slide id per line.
SplitPlan read_split_plan(const std::string& path, const std::string& validation_path = "");
void write_split_plan(const SplitPlan& plan, const std::string& path);

/// Cell annotations CSV `cell_id,cell_type,batch`; rows are matched to
/// `row_ids` by cell_id (every id must be annotated exactly once).
CellAnnotations read_annotations(const std::string& path,
                                 const std::vector<std::string>& row_ids);
void write_annotations(const CellAnnotations& ann, const std::vector<std::string>& row_ids,
                       const std::string& path);

/// Real-valued table with the dense-counts layout (used for predictions and
/// truth tensors).
struct RealTable {
  Matrix values;
  std::vector<std::string> row_ids;
  std::vector<std::string> col_ids;
};

RealTable read_real_table(const std::string& path);
void write_real_table(const RealTable& t, const std::string& path,
                      const std::string& id_header = "id");

}  // namespace cpnn

#endif
