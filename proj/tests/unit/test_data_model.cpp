#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "cpnn/data.hpp"
#include "cpnn/errors.hpp"
#include "cpnn/io.hpp"
#include "cpnn/rng.hpp"

using namespace cpnn;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("cpnn_test_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_file(const std::string& path, const std::string& body) {
  std::ofstream out(path);
  out << body;
}

}  // namespace

TEST_CASE("read_dense_counts: direct echo, degenerate input, duplicate gene") {
  TempDir dir;
  write_file(dir.file("ok.csv"), "id,gA,gB\ns1,3,0\ns2,1,7\n");
  auto m = read_dense_counts(dir.file("ok.csv"));
  CHECK(m.n_rows() == 2);
  CHECK(m.n_genes() == 2);
  CHECK(m.values(0, 0) == 3);
  CHECK(m.values(0, 1) == 0);
  CHECK(m.values(1, 0) == 1);
  CHECK(m.values(1, 1) == 7);
  CHECK(m.row_ids == std::vector<std::string>{"s1", "s2"});

  write_file(dir.file("empty.csv"), "id,gA,gB\n");
  CHECK_THROWS_WITH_AS(read_dense_counts(dir.file("empty.csv")),
                       doctest::Contains("no data rows"), DataError);

  write_file(dir.file("dup.csv"), "id,gA,gA\ns1,1,2\n");
  CHECK_THROWS_WITH_AS(read_dense_counts(dir.file("dup.csv")), doctest::Contains("gA"), DataError);

  write_file(dir.file("neg.csv"), "id,gA\ns1,-2\n");
  CHECK_THROWS_AS(read_dense_counts(dir.file("neg.csv")), DataError);

  write_file(dir.file("bad.csv"), "id,gA,gB\ns1,3,x7\n");
  CHECK_THROWS_WITH_AS(read_dense_counts(dir.file("bad.csv")), doctest::Contains("row 2"),
                       DataError);

  write_file(dir.file("dup_row.csv"), "id,gA\ns1,1\ns1,2\n");
  CHECK_THROWS_WITH_AS(read_dense_counts(dir.file("dup_row.csv")),
                       doctest::Contains("duplicate row id"), DataError);
}

TEST_CASE("read_sparse_counts: coordinate semantics and well-formedness") {
  TempDir dir;
  write_file(dir.file("m.mtx"), "%%MatrixMarket matrix coordinate integer general\n3 2 1\n1 1 5\n");
  write_file(dir.file("rows.txt"), "r1\nr2\nr3\n");
  write_file(dir.file("genes.txt"), "gA\ngB\n");
  auto m = read_sparse_counts(dir.file("m.mtx"), dir.file("rows.txt"), dir.file("genes.txt"));
  CHECK(m.n_rows() == 3);
  CHECK(m.n_genes() == 2);
  CHECK(m.values(0, 0) == 5);
  std::int64_t total = 0;
  for (auto v : m.values.data()) total += v;
  CHECK(total == 5);

  write_file(dir.file("short.mtx"),
             "%%MatrixMarket matrix coordinate integer general\n2 2 1\n1 1 5\n");
  CHECK_THROWS_WITH_AS(
      read_sparse_counts(dir.file("short.mtx"), dir.file("rows.txt"), dir.file("genes.txt")),
      doctest::Contains("declares 2 rows"), DataError);

  write_file(dir.file("dup.mtx"),
             "%%MatrixMarket matrix coordinate integer general\n3 2 2\n1 1 5\n1 1 2\n");
  CHECK_THROWS_WITH_AS(
      read_sparse_counts(dir.file("dup.mtx"), dir.file("rows.txt"), dir.file("genes.txt")),
      doctest::Contains("duplicate entry"), DataError);

  write_file(dir.file("oob.mtx"),
             "%%MatrixMarket matrix coordinate integer general\n3 2 1\n4 1 5\n");
  CHECK_THROWS_WITH_AS(
      read_sparse_counts(dir.file("oob.mtx"), dir.file("rows.txt"), dir.file("genes.txt")),
      doctest::Contains("out of range"), DataError);
}

TEST_CASE("read_feature_set: order, dimensions, finiteness") {
  TempDir dir;
  write_file(dir.file("one.csv"), "patch_id,f_0,f_1,f_2\np0,0,0,0\n");
  auto one = read_feature_set(dir.file("one.csv"));
  CHECK(one.n_patches() == 1);
  CHECK(one.dim() == 3);
  CHECK(one.features(0, 2) == 0.0);
  CHECK(one.slide_id == "one");

  write_file(dir.file("two.csv"), "patch_id,f_0,f_1\np0,1.5,-2\np1,0.25,3e-2\n");
  auto two = read_feature_set(dir.file("two.csv"));
  CHECK(two.n_patches() == 2);
  CHECK(two.dim() == 2);
  CHECK(two.features(1, 1) == doctest::Approx(0.03));

  write_file(dir.file("nan.csv"), "patch_id,f_0\np0,nan\n");
  CHECK_THROWS_WITH_AS(read_feature_set(dir.file("nan.csv")), doctest::Contains("non-finite"),
                       DataError);

  write_file(dir.file("ragged.csv"), "patch_id,f_0,f_1\np0,1\n");
  CHECK_THROWS_WITH_AS(read_feature_set(dir.file("ragged.csv")), doctest::Contains("ragged"),
                       DataError);
}

TEST_CASE("align_genes: lexicographic intersection, idempotence, disjoint error") {
  CountMatrix a, b;
  a.row_ids = {"r1"};
  a.gene_ids = {"A", "B", "C"};
  a.values = CountGrid(1, 3);
  a.values(0, 0) = 1;
  a.values(0, 1) = 2;
  a.values(0, 2) = 3;
  b.row_ids = {"q1"};
  b.gene_ids = {"D", "C", "B"};
  b.values = CountGrid(1, 3);
  b.values(0, 0) = 9;
  b.values(0, 1) = 8;
  b.values(0, 2) = 7;

  auto [a2, b2] = align_genes(a, b);
  CHECK(a2.gene_ids == std::vector<std::string>{"B", "C"});
  CHECK(b2.gene_ids == std::vector<std::string>{"B", "C"});
  CHECK(a2.values(0, 0) == 2);
  CHECK(a2.values(0, 1) == 3);
  CHECK(b2.values(0, 0) == 7);
  CHECK(b2.values(0, 1) == 8);

  // Idempotent once aligned.
  auto [a3, b3] = align_genes(a2, b2);
  CHECK(a3.gene_ids == a2.gene_ids);
  CHECK(a3.values.data() == a2.values.data());

  // Identical gene sets: pure reordering.
  auto [a4, a5] = align_genes(a, a);
  CHECK(a4.gene_ids == std::vector<std::string>{"A", "B", "C"});
  CHECK(a4.values.data() == a5.values.data());

  CountMatrix c;
  c.row_ids = {"x"};
  c.gene_ids = {"Z"};
  c.values = CountGrid(1, 1, 0);
  CHECK_THROWS_WITH_AS(align_genes(a, c), doctest::Contains("no genes in common"), DataError);
}

TEST_CASE("round-trips are bit-exact: dense, sparse, features") {
  TempDir dir;
  Rng rng(42);
  CountMatrix m;
  m.values = CountGrid(5, 7);
  for (std::size_t r = 0; r < 5; ++r) m.row_ids.push_back("row" + std::to_string(r));
  for (std::size_t c = 0; c < 7; ++c) m.gene_ids.push_back("gene" + std::to_string(c));
  for (auto& v : m.values.data()) v = static_cast<std::int64_t>(rng.below(1000));

  write_dense_counts(m, dir.file("m.csv"));
  auto dense = read_dense_counts(dir.file("m.csv"));
  CHECK(dense.values.data() == m.values.data());
  CHECK(dense.row_ids == m.row_ids);
  CHECK(dense.gene_ids == m.gene_ids);

  write_sparse_counts(m, dir.file("m.mtx"), dir.file("r.txt"), dir.file("g.txt"));
  auto sparse = read_sparse_counts(dir.file("m.mtx"), dir.file("r.txt"), dir.file("g.txt"));
  CHECK(sparse.values.data() == m.values.data());

  PatchFeatureSet fsx;
  fsx.slide_id = "s";
  fsx.features = Matrix(4, 3);
  for (auto& v : fsx.features.data()) v = rng.normal() * std::pow(10.0, rng.uniform(-8, 8));
  for (std::size_t i = 0; i < 4; ++i) fsx.patch_ids.push_back("p" + std::to_string(i));
  write_feature_set(fsx, dir.file("f.csv"));
  auto back = read_feature_set(dir.file("f.csv"), "s");
  for (std::size_t i = 0; i < fsx.features.size(); ++i)
    CHECK(back.features.data()[i] == fsx.features.data()[i]);
}

TEST_CASE("filter_counts applies the documented thresholds") {
  CountMatrix m;
  m.gene_ids = {"MT-1", "gA", "gB", "gC"};
  m.row_ids = {"ok", "mito", "tiny"};
  m.values = CountGrid(3, 4, 0);
  // ok: low mito, expresses 3 genes
  m.values(0, 1) = 5;
  m.values(0, 2) = 4;
  m.values(0, 3) = 2;
  // mito: 90% mitochondrial
  m.values(1, 0) = 90;
  m.values(1, 1) = 5;
  m.values(1, 2) = 5;
  // tiny: expresses only 1 gene
  m.values(2, 1) = 3;

  FilterThresholds t;
  t.max_mito_fraction = 0.30;
  t.max_total_count = 1000;
  t.min_genes_per_row = 2;
  t.min_rows_per_gene = 1;
  std::unordered_set<std::string> mito{"MT-1"};
  FilterReport report;
  auto out = filter_counts(m, t, &mito, &report);
  CHECK(out.row_ids == std::vector<std::string>{"ok"});
  CHECK(report.rows_dropped_mito == 1);
  CHECK(report.rows_dropped_genes == 1);
  // MT-1 no longer detected in any kept row.
  CHECK(out.gene_ids == std::vector<std::string>{"gA", "gB", "gC"});
  CHECK(report.genes_dropped == 1);
}

TEST_CASE("split plan: patient grouping and validation holdout") {
  TempDir dir;
  write_file(dir.file("ok.csv"), "slide_id,fold\ns1,0\ns2,1\ns3,0\n");
  auto plan = read_split_plan(dir.file("ok.csv"));
  CHECK(plan.n_folds() == 2);

  write_file(dir.file("pat.csv"), "slide_id,fold,patient\ns1,0,p1\ns2,0,p1\ns3,1,p2\n");
  CHECK_NOTHROW(read_split_plan(dir.file("pat.csv")));

  write_file(dir.file("bad_pat.csv"), "slide_id,fold,patient\ns1,0,p1\ns2,1,p1\n");
  CHECK_THROWS_WITH_AS(read_split_plan(dir.file("bad_pat.csv")),
                       doctest::Contains("grouped by patient"), DataError);

  write_file(dir.file("val.txt"), "s9\n");
  auto plan2 = read_split_plan(dir.file("ok.csv"), dir.file("val.txt"));
  CHECK(plan2.validation_ids == std::vector<std::string>{"s9"});

  // A validation slide may not also be folded.
  write_file(dir.file("val_bad.txt"), "s1\n");
  CHECK_THROWS_AS(read_split_plan(dir.file("ok.csv"), dir.file("val_bad.txt")), DataError);
}

TEST_CASE("annotations reader matches cells by id") {
  TempDir dir;
  write_file(dir.file("ann.csv"), "cell_id,cell_type,batch\nc2,T,b0\nc1,B,b1\n");
  auto ann = read_annotations(dir.file("ann.csv"), {"c1", "c2"});
  CHECK(ann.n_cells() == 2);
  CHECK(ann.type_names[ann.cell_type[0]] == "B");
  CHECK(ann.type_names[ann.cell_type[1]] == "T");
  CHECK(ann.batch_names[ann.batch[0]] == "b1");

  CHECK_THROWS_WITH_AS(read_annotations(dir.file("ann.csv"), {"c1", "c3"}),
                       doctest::Contains("missing annotation"), DataError);
}
