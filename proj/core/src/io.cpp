#include "cpnn/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "cpnn/errors.hpp"

namespace fs = std::filesystem;

namespace cpnn {

namespace {

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "' for reading");
  return in;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  return out;
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      out.emplace_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

std::int64_t parse_count(const std::string& tok, const std::string& path, std::size_t line_no,
                         std::size_t col_no) {
  std::int64_t v = 0;
  const char* begin = tok.data();
  const char* end = begin + tok.size();
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc() || ptr != end)
    throw DataError(path + ": malformed integer '" + tok + "' at row " + std::to_string(line_no) +
                    ", column " + std::to_string(col_no));
  if (v < 0)
    throw DataError(path + ": negative count at row " + std::to_string(line_no) + ", column " +
                    std::to_string(col_no));
  return v;
}

double parse_real(const std::string& tok, const std::string& path, std::size_t line_no,
                  std::size_t col_no) {
  double v = 0.0;
  const char* begin = tok.data();
  const char* end = begin + tok.size();
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc() || ptr != end)
    throw DataError(path + ": malformed number '" + tok + "' at row " + std::to_string(line_no) +
                    ", column " + std::to_string(col_no));
  return v;
}

std::vector<std::string> read_id_file(const std::string& path) {
  auto in = open_in(path);
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    strip_cr(line);
    if (!line.empty()) ids.push_back(line);
  }
  return ids;
}

}  // namespace

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

CountMatrix read_dense_counts(const std::string& path) {
  auto in = open_in(path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  strip_cr(line);
  auto header = split_csv(line);
  if (header.size() < 2) throw DataError(path + ": header must name at least one gene");

  CountMatrix m;
  m.gene_ids.assign(header.begin() + 1, header.end());
  {
    std::unordered_map<std::string, int> seen;
    for (const auto& g : m.gene_ids)
      if (++seen[g] > 1) throw DataError(path + ": duplicate gene name '" + g + "' in header");
  }

  std::vector<std::int64_t> body;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    auto tokens = split_csv(line);
    if (tokens.size() != header.size())
      throw DataError(path + ": row " + std::to_string(line_no) + " has " +
                      std::to_string(tokens.size() - 1) + " values, expected " +
                      std::to_string(header.size() - 1));
    m.row_ids.push_back(tokens[0]);
    for (std::size_t c = 1; c < tokens.size(); ++c)
      body.push_back(parse_count(tokens[c], path, line_no, c + 1));
  }
  if (m.row_ids.empty()) throw DataError(path + ": no data rows");

  m.values = CountGrid(m.row_ids.size(), m.gene_ids.size());
  m.values.data() = std::move(body);
  m.validate();
  return m;
}

void write_dense_counts(const CountMatrix& m, const std::string& path) {
  auto out = open_out(path);
  out << "id";
  for (const auto& g : m.gene_ids) out << ',' << g;
  out << '\n';
  for (std::size_t r = 0; r < m.n_rows(); ++r) {
    out << m.row_ids[r];
    for (std::size_t c = 0; c < m.n_genes(); ++c) out << ',' << m.values(r, c);
    out << '\n';
  }
}

CountMatrix read_sparse_counts(const std::string& matrix_path, const std::string& row_ids_path,
                               const std::string& gene_ids_path) {
  auto in = open_in(matrix_path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(matrix_path + ": empty file");
  strip_cr(line);
  {
    std::istringstream banner(line);
    std::string tag, object, fmt, field, symmetry;
    banner >> tag >> object >> fmt >> field >> symmetry;
    if (tag != "%%MatrixMarket" || object != "matrix" || fmt != "coordinate" ||
        field != "integer" || symmetry != "general")
      throw DataError(matrix_path + ": expected '%%MatrixMarket matrix coordinate integer general'");
  }
  std::size_t line_no = 1;
  std::size_t rows = 0, cols = 0, nnz = 0;
  for (;;) {
    if (!std::getline(in, line)) throw DataError(matrix_path + ": missing size line");
    ++line_no;
    strip_cr(line);
    if (line.empty() || line[0] == '%') continue;
    std::istringstream sizes(line);
    if (!(sizes >> rows >> cols >> nnz))
      throw DataError(matrix_path + ": malformed size line at row " + std::to_string(line_no));
    break;
  }

  const auto row_ids = read_id_file(row_ids_path);
  const auto gene_ids = read_id_file(gene_ids_path);
  if (row_ids.size() != rows)
    throw DataError(matrix_path + ": header declares " + std::to_string(rows) + " rows but '" +
                    row_ids_path + "' lists " + std::to_string(row_ids.size()));
  if (gene_ids.size() != cols)
    throw DataError(matrix_path + ": header declares " + std::to_string(cols) + " columns but '" +
                    gene_ids_path + "' lists " + std::to_string(gene_ids.size()));

  CountMatrix m;
  m.row_ids = row_ids;
  m.gene_ids = gene_ids;
  m.values = CountGrid(rows, cols, 0);
  std::vector<bool> filled(rows * cols, false);
  std::size_t seen = 0;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty() || line[0] == '%') continue;
    std::istringstream entry(line);
    std::size_t i = 0, j = 0;
    std::int64_t v = 0;
    if (!(entry >> i >> j >> v))
      throw DataError(matrix_path + ": malformed entry at row " + std::to_string(line_no));
    if (i < 1 || i > rows || j < 1 || j > cols)
      throw DataError(matrix_path + ": coordinate (" + std::to_string(i) + "," +
                      std::to_string(j) + ") out of range at row " + std::to_string(line_no));
    if (v < 0)
      throw DataError(matrix_path + ": negative count at row " + std::to_string(line_no));
    const std::size_t flat = (i - 1) * cols + (j - 1);
    if (filled[flat])
      throw DataError(matrix_path + ": duplicate entry (" + std::to_string(i) + "," +
                      std::to_string(j) + ") at row " + std::to_string(line_no));
    filled[flat] = true;
    m.values(i - 1, j - 1) = v;
    ++seen;
  }
  if (seen != nnz)
    throw DataError(matrix_path + ": header declares " + std::to_string(nnz) +
                    " entries but file has " + std::to_string(seen));
  m.validate();
  return m;
}

void write_sparse_counts(const CountMatrix& m, const std::string& matrix_path,
                         const std::string& row_ids_path, const std::string& gene_ids_path) {
  {
    auto out = open_out(matrix_path);
    std::size_t nnz = 0;
    for (auto v : m.values.data())
      if (v != 0) ++nnz;
    out << "%%MatrixMarket matrix coordinate integer general\n";
    out << m.n_rows() << ' ' << m.n_genes() << ' ' << nnz << '\n';
    for (std::size_t r = 0; r < m.n_rows(); ++r)
      for (std::size_t c = 0; c < m.n_genes(); ++c)
        if (m.values(r, c) != 0) out << (r + 1) << ' ' << (c + 1) << ' ' << m.values(r, c) << '\n';
  }
  {
    auto out = open_out(row_ids_path);
    for (const auto& id : m.row_ids) out << id << '\n';
  }
  {
    auto out = open_out(gene_ids_path);
    for (const auto& id : m.gene_ids) out << id << '\n';
  }
}

PatchFeatureSet read_feature_set(const std::string& path, const std::string& slide_id) {
  auto in = open_in(path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  strip_cr(line);
  auto header = split_csv(line);
  if (header.size() < 2 || header[0] != "patch_id")
    throw DataError(path + ": expected header 'patch_id,f_0,...'");
  const std::size_t dim = header.size() - 1;

  PatchFeatureSet fsx;
  fsx.slide_id = slide_id.empty() ? fs::path(path).stem().string() : slide_id;
  std::vector<double> body;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    auto tokens = split_csv(line);
    if (tokens.size() != header.size())
      throw DataError(path + ": ragged row " + std::to_string(line_no) + " (" +
                      std::to_string(tokens.size() - 1) + " values, expected " +
                      std::to_string(dim) + ")");
    fsx.patch_ids.push_back(tokens[0]);
    for (std::size_t c = 1; c < tokens.size(); ++c) {
      const double v = parse_real(tokens[c], path, line_no, c + 1);
      if (!std::isfinite(v))
        throw DataError(path + ": non-finite feature at row " + std::to_string(line_no) +
                        ", column " + std::to_string(c + 1));
      body.push_back(v);
    }
  }
  if (fsx.patch_ids.empty()) throw DataError(path + ": no data rows");
  fsx.features = Matrix(fsx.patch_ids.size(), dim);
  fsx.features.data() = std::move(body);
  fsx.validate();
  return fsx;
}

void write_feature_set(const PatchFeatureSet& fsx, const std::string& path) {
  auto out = open_out(path);
  out << "patch_id";
  for (std::size_t j = 0; j < fsx.dim(); ++j) out << ",f_" << j;
  out << '\n';
  for (std::size_t i = 0; i < fsx.n_patches(); ++i) {
    out << fsx.patch_ids[i];
    for (std::size_t j = 0; j < fsx.dim(); ++j) out << ',' << format_double(fsx.features(i, j));
    out << '\n';
  }
}

std::vector<PatchFeatureSet> read_feature_dir(const std::string& dir) {
  if (!fs::is_directory(dir)) throw DataError("'" + dir + "' is not a directory");
  std::vector<std::string> paths;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".csv")
      paths.push_back(entry.path().string());
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw DataError("no .csv feature files in '" + dir + "'");
  std::vector<PatchFeatureSet> sets;
  sets.reserve(paths.size());
  for (const auto& p : paths) sets.push_back(read_feature_set(p));
  std::sort(sets.begin(), sets.end(),
            [](const auto& a, const auto& b) { return a.slide_id < b.slide_id; });
  for (std::size_t i = 0; i + 1 < sets.size(); ++i)
    if (sets[i].slide_id == sets[i + 1].slide_id)
      throw DataError("duplicate slide id '" + sets[i].slide_id + "' in '" + dir + "'");
  return sets;
}

SplitPlan read_split_plan(const std::string& path, const std::string& validation_path) {
  auto in = open_in(path);
  SplitPlan plan;
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  strip_cr(line);
  auto header = split_csv(line);
  const bool has_patient = header.size() >= 3 && header[2] == "patient";
  if (header.size() < 2 || header[0] != "slide_id" || header[1] != "fold")
    throw DataError(path + ": expected header 'slide_id,fold[,patient]'");

  std::unordered_map<std::string, int> patient_fold;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    auto tokens = split_csv(line);
    if (tokens.size() != header.size())
      throw DataError(path + ": ragged row " + std::to_string(line_no));
    const int fold = static_cast<int>(parse_count(tokens[1], path, line_no, 2));
    plan.slide_ids.push_back(tokens[0]);
    plan.fold_of.push_back(fold);
    if (has_patient) {
      auto [it, inserted] = patient_fold.emplace(tokens[2], fold);
      if (!inserted && it->second != fold)
        throw DataError(path + ": patient '" + tokens[2] +
                        "' is assigned to multiple folds (slides must be grouped by patient)");
    }
  }
  if (!validation_path.empty()) plan.validation_ids = read_id_file(validation_path);
  plan.validate();
  return plan;
}

void write_split_plan(const SplitPlan& plan, const std::string& path) {
  auto out = open_out(path);
  out << "slide_id,fold\n";
  for (std::size_t i = 0; i < plan.slide_ids.size(); ++i)
    out << plan.slide_ids[i] << ',' << plan.fold_of[i] << '\n';
}

CellAnnotations read_annotations(const std::string& path,
                                 const std::vector<std::string>& row_ids) {
  auto in = open_in(path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  strip_cr(line);
  auto header = split_csv(line);
  if (header.size() != 3 || header[0] != "cell_id")
    throw DataError(path + ": expected header 'cell_id,cell_type,batch'");

  std::unordered_map<std::string, std::pair<std::string, std::string>> by_id;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    auto tokens = split_csv(line);
    if (tokens.size() != 3) throw DataError(path + ": ragged row " + std::to_string(line_no));
    if (!by_id.emplace(tokens[0], std::make_pair(tokens[1], tokens[2])).second)
      throw DataError(path + ": duplicate cell id '" + tokens[0] + "'");
  }

  CellAnnotations ann;
  std::unordered_map<std::string, int> type_idx, batch_idx;
  ann.cell_type.reserve(row_ids.size());
  ann.batch.reserve(row_ids.size());
  for (const auto& id : row_ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError(path + ": missing annotation for cell '" + id + "'");
    auto [t_it, t_new] = type_idx.emplace(it->second.first, static_cast<int>(ann.type_names.size()));
    if (t_new) ann.type_names.push_back(it->second.first);
    auto [b_it, b_new] =
        batch_idx.emplace(it->second.second, static_cast<int>(ann.batch_names.size()));
    if (b_new) ann.batch_names.push_back(it->second.second);
    ann.cell_type.push_back(t_it->second);
    ann.batch.push_back(b_it->second);
  }
  ann.validate();
  return ann;
}

void write_annotations(const CellAnnotations& ann, const std::vector<std::string>& row_ids,
                       const std::string& path) {
  if (row_ids.size() != ann.n_cells())
    throw DataError("write_annotations: id/annotation length mismatch");
  auto out = open_out(path);
  out << "cell_id,cell_type,batch\n";
  for (std::size_t i = 0; i < row_ids.size(); ++i)
    out << row_ids[i] << ',' << ann.type_names[ann.cell_type[i]] << ','
        << ann.batch_names[ann.batch[i]] << '\n';
}

RealTable read_real_table(const std::string& path) {
  auto in = open_in(path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  strip_cr(line);
  auto header = split_csv(line);
  if (header.size() < 2) throw DataError(path + ": header must name at least one column");
  RealTable t;
  t.col_ids.assign(header.begin() + 1, header.end());
  std::vector<double> body;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    auto tokens = split_csv(line);
    if (tokens.size() != header.size())
      throw DataError(path + ": ragged row " + std::to_string(line_no));
    t.row_ids.push_back(tokens[0]);
    for (std::size_t c = 1; c < tokens.size(); ++c)
      body.push_back(parse_real(tokens[c], path, line_no, c + 1));
  }
  if (t.row_ids.empty()) throw DataError(path + ": no data rows");
  t.values = Matrix(t.row_ids.size(), t.col_ids.size());
  t.values.data() = std::move(body);
  return t;
}

void write_real_table(const RealTable& t, const std::string& path, const std::string& id_header) {
  auto out = open_out(path);
  out << id_header;
  for (const auto& c : t.col_ids) out << ',' << c;
  out << '\n';
  for (std::size_t r = 0; r < t.values.rows(); ++r) {
    out << t.row_ids[r];
    for (std::size_t c = 0; c < t.values.cols(); ++c) out << ',' << format_double(t.values(r, c));
    out << '\n';
  }
}

}  // namespace cpnn
