// cpnn: command-line pipeline for prototype-informed gene expression
// prediction. Subcommands: synth, fit-prototypes, deconvolve, train-slide,
// train-patch, predict, evaluate, gradcheck, export-weights.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <unordered_map>
#include <unordered_set>

#include <CLI11.hpp>
#include <json.hpp>

#include "cpnn/data.hpp"
#include "cpnn/deconv.hpp"
#include "cpnn/errors.hpp"
#include "cpnn/gradcheck.hpp"
#include "cpnn/io.hpp"
#include "cpnn/metrics.hpp"
#include "cpnn/model.hpp"
#include "cpnn/prototype.hpp"
#include "cpnn/synth.hpp"
#include "cpnn/train.hpp"

namespace fs = std::filesystem;
using namespace cpnn;

namespace {

std::string now_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

struct CommonOpts {
  bool no_timestamp = false;
  std::string timestamp() const { return no_timestamp ? "" : now_timestamp(); }
};

// ---------------------------------------------------------------------------
// Input assembly

CountMatrix load_counts(const std::string& dense_csv, const std::string& mtx,
                        const std::string& row_ids, const std::string& gene_ids) {
  if (!dense_csv.empty()) return read_dense_counts(dense_csv);
  return read_sparse_counts(mtx, row_ids, gene_ids);
}

CountMatrix apply_filter(const CountMatrix& counts, const std::string& profile,
                         const std::string& mito_prefix) {
  if (profile == "none") return counts;
  FilterThresholds thresholds =
      profile == "sc" ? FilterThresholds::sc_defaults() : FilterThresholds::bulk_defaults();
  std::unordered_set<std::string> mito;
  for (const auto& gene : counts.gene_ids)
    if (!mito_prefix.empty() && gene.rfind(mito_prefix, 0) == 0) mito.insert(gene);
  FilterReport report;
  auto out = filter_counts(counts, thresholds, mito.empty() ? nullptr : &mito, &report);
  std::cerr << "filter(" << profile << "): dropped " << report.rows_dropped_mito << " mito, "
            << report.rows_dropped_total << " high-count, " << report.rows_dropped_genes
            << " low-gene rows; " << report.genes_dropped << " genes\n";
  return out;
}

// Restrict bulk columns to the prototype gene list (which the prototypes
// were fitted on); order follows the prototype.
CountMatrix subset_to_genes(const CountMatrix& counts, const std::vector<std::string>& genes) {
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t j = 0; j < counts.gene_ids.size(); ++j) pos.emplace(counts.gene_ids[j], j);
  CountMatrix out;
  out.row_ids = counts.row_ids;
  out.gene_ids = genes;
  out.values = CountGrid(counts.n_rows(), genes.size());
  for (std::size_t j = 0; j < genes.size(); ++j) {
    auto it = pos.find(genes[j]);
    if (it == pos.end())
      throw DataError("gene '" + genes[j] +
                      "' required by the prototypes is missing from the counts; fit the "
                      "prototypes on the shared gene set");
    for (std::size_t r = 0; r < counts.n_rows(); ++r)
      out.values(r, j) = counts.values(r, it->second);
  }
  return out;
}

std::vector<SampleRecord> assemble_slides(const CountMatrix& bulk,
                                          const std::string& features_dir) {
  auto feature_sets = read_feature_dir(features_dir);
  std::unordered_map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < feature_sets.size(); ++i)
    by_id.emplace(feature_sets[i].slide_id, i);
  std::vector<SampleRecord> records;
  records.reserve(bulk.n_rows());
  for (std::size_t r = 0; r < bulk.n_rows(); ++r) {
    auto it = by_id.find(bulk.row_ids[r]);
    if (it == by_id.end())
      throw DataError("no feature file for slide '" + bulk.row_ids[r] + "' in " + features_dir);
    SampleRecord record;
    record.slide_id = bulk.row_ids[r];
    record.features = feature_sets[it->second];
    record.target_counts.assign(bulk.values.row(r), bulk.values.row(r) + bulk.n_genes());
    record.total_count = bulk.row_total(r);
    record.validate();
    records.push_back(std::move(record));
  }
  return records;
}

std::vector<PatchRecord> assemble_patches(const std::string& spots_dir,
                                          const std::string& features_dir,
                                          const std::vector<std::string>& genes) {
  auto feature_sets = read_feature_dir(features_dir);
  std::vector<PatchRecord> records;
  for (auto& fsx : feature_sets) {
    const std::string path = spots_dir + "/" + fsx.slide_id + ".csv";
    if (!fs::exists(path))
      throw DataError("no spot counts for slide '" + fsx.slide_id + "' in " + spots_dir);
    CountMatrix spots = subset_to_genes(read_dense_counts(path), genes);
    if (spots.row_ids != fsx.patch_ids)
      throw DataError("spot rows of '" + path + "' are not aligned with the feature patches");
    PatchRecord record;
    record.features = std::move(fsx);
    record.spot_counts = std::move(spots.values);
    record.validate();
    records.push_back(std::move(record));
  }
  return records;
}

TrainConfig load_train_config(const std::string& path) {
  TrainConfig cfg;
  if (path.empty()) return cfg;
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "' for reading");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  cfg.lr = j.value("lr", cfg.lr);
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.lambda = j.value("lambda", cfg.lambda);
  cfg.patience = j.value("patience", cfg.patience);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.folds = j.value("folds", cfg.folds);
  cfg.validation_count = j.value("validation_count", cfg.validation_count);
  cfg.val_includes_reg = j.value("val_includes_reg", cfg.val_includes_reg);
  cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
  cfg.hidden_dim = j.value("hidden_dim", cfg.hidden_dim);
  cfg.patch_log1p = j.value("patch_log1p", cfg.patch_log1p);
  cfg.patch_lambda = j.value("patch_lambda", cfg.patch_lambda);
  cfg.patch_corr_per_gene = j.value("patch_corr_per_gene", cfg.patch_corr_per_gene);
  if (j.contains("flags")) {
    const auto& f = j["flags"];
    cfg.flags.prototype_init = f.value("PI", cfg.flags.prototype_init);
    cfg.flags.modality_correction = f.value("MC", cfg.flags.modality_correction);
    cfg.flags.update_prototype = f.value("U", cfg.flags.update_prototype);
    cfg.flags.regularization = f.value("R", cfg.flags.regularization);
    cfg.flags.head_activation = f.value("head_activation", cfg.flags.head_activation);
  }
  return cfg;
}

void write_cv_outputs(const CvResult& cv, const std::string& out_dir,
                      const std::string& timestamp) {
  write_split_plan(cv.plan, out_dir + "/splits.csv");
  write_metrics_csv(cv.pooled, out_dir + "/metrics.csv");
  nlohmann::json summary;
  summary["mean_pcc"] = cv.mean_pcc;
  summary["std_pcc"] = cv.std_pcc;
  summary["mean_scc"] = cv.mean_scc;
  summary["std_scc"] = cv.std_scc;
  summary["pooled_mean_pcc"] = cv.pooled.mean_pcc;
  summary["pooled_mean_scc"] = cv.pooled.mean_scc;
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& fold : cv.folds)
    folds.push_back({{"fold", fold.fold},
                     {"mean_pcc", fold.report.mean_pcc},
                     {"mean_scc", fold.report.mean_scc},
                     {"best_epoch", fold.best_epoch},
                     {"best_val", fold.best_val}});
  summary["folds"] = folds;
  if (!timestamp.empty()) summary["timestamp"] = timestamp;
  std::ofstream out(out_dir + "/cv_summary.json");
  out << summary.dump(2) << '\n';
  for (std::size_t f = 0; f < cv.fold_models.size(); ++f)
    save_checkpoint(cv.fold_models[f], out_dir + "/checkpoint_fold" + std::to_string(f) + ".json",
                    timestamp);
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_synth(const std::string& config, const std::string& out_dir, std::uint64_t seed,
              bool seed_given, const CommonOpts& common) {
  SynthConfig cfg = config.empty() ? SynthConfig{} : read_synth_config(config);
  if (seed_given) cfg.seed = seed;
  const auto data = generate(cfg);
  write_synth_dataset(data, cfg, out_dir, common.timestamp());
  std::cout << "synth: wrote " << data.slides.size() << " slides, " << data.sc_counts.n_rows()
            << " cells to " << out_dir << "\n";
  return 0;
}

int cmd_fit_prototypes(const std::string& sc_csv, const std::string& sc_mtx,
                       const std::string& sc_rows, const std::string& sc_genes,
                       const std::string& annotations, const std::string& out_dir, double lr,
                       int epochs, const std::string& filter, const std::string& mito_prefix,
                       const CommonOpts&) {
  CountMatrix sc = load_counts(sc_csv, sc_mtx, sc_rows, sc_genes);
  sc = apply_filter(sc, filter, mito_prefix);
  const auto ann = read_annotations(annotations, sc.row_ids);

  FitConfig cfg;
  cfg.lr = lr;
  cfg.epochs = epochs;
  const auto fit = fit_prototypes(sc, ann, cfg);
  for (const auto& warning : fit.warnings) std::cerr << "warning: " << warning << "\n";

  fs::create_directories(out_dir);
  write_prototype_csv(fit.raw, out_dir + "/prototypes_raw.csv");
  write_prototype_csv(fit.normalized, out_dir + "/prototypes_normalized.csv");
  write_prototype_sidecar(fit, out_dir + "/prototype_sidecar.json");
  std::cout << "fit-prototypes: " << fit.raw.n_types() << " types x " << fit.raw.n_genes()
            << " genes, nll " << format_double(fit.nll_milestones.front()) << " -> "
            << format_double(fit.nll_milestones.back()) << "\n";
  return 0;
}

int cmd_deconvolve(const std::string& bulk_csv, const std::string& proto_csv,
                   const std::string& sidecar, const std::string& out_csv, double lr, int steps,
                   int jobs, const CommonOpts&) {
  const auto proto = read_prototype_csv(proto_csv);
  const auto side = read_prototype_sidecar(sidecar);
  if (side.theta_sc.size() != proto.n_genes())
    throw DataError("sidecar dispersion length does not match the prototype gene count");
  CountMatrix bulk = subset_to_genes(read_dense_counts(bulk_csv), proto.gene_ids);

  DeconvConfig cfg;
  cfg.lr = lr;
  cfg.steps = steps;
  cfg.jobs = jobs;
  ScDispersion disp{side.theta_sc};
  const auto w = deconvolve(bulk, proto, disp, cfg);
  write_proportions_csv(w, out_csv);
  std::cout << "deconvolve: " << w.n_rows() << " samples x " << w.n_types() << " cell types -> "
            << out_csv << "\n";
  return 0;
}

int cmd_train_slide(const std::string& bulk_csv, const std::string& features_dir,
                    const std::string& proto_csv, const std::string& wref_csv,
                    const std::string& out_dir, TrainConfig cfg, bool cv,
                    const std::string& splits_csv, const std::string& validation_file,
                    const CommonOpts& common) {
  const auto proto0 = read_prototype_csv(proto_csv);
  CountMatrix bulk = subset_to_genes(read_dense_counts(bulk_csv), proto0.gene_ids);
  const auto wref = read_proportions_csv(wref_csv);
  const auto dataset = assemble_slides(bulk, features_dir);
  fs::create_directories(out_dir);

  if (cv) {
    SplitPlan plan;
    const bool have_plan = !splits_csv.empty();
    if (have_plan) plan = read_split_plan(splits_csv, validation_file);
    const auto result =
        run_cv_slide(dataset, proto0, wref, cfg, have_plan ? &plan : nullptr);
    write_cv_outputs(result, out_dir, common.timestamp());
    std::printf("cv: mean_pcc=%.6f mean_scc=%.6f pooled_pcc=%.6f pooled_scc=%.6f\n",
                result.mean_pcc, result.mean_scc, result.pooled.mean_pcc,
                result.pooled.mean_scc);
    return 0;
  }

  std::vector<std::string> validation_ids;
  if (!validation_file.empty()) {
    std::ifstream in(validation_file);
    if (!in) throw DataError("cannot open '" + validation_file + "'");
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) validation_ids.push_back(line);
    }
  }
  const auto result = train_slide(dataset, proto0, wref, cfg, validation_ids);
  save_checkpoint(result.best, out_dir + "/checkpoint.json", common.timestamp());
  write_history_csv(result.history, out_dir + "/history.csv");
  {
    std::ofstream out(out_dir + "/validation_ids.txt");
    for (const auto& id : result.validation_ids) out << id << '\n';
  }
  std::printf("train-slide: best_epoch=%d best_val=%.6f steps=%d\n", result.history.best_epoch,
              result.history.best_val, result.history.total_steps);
  return 0;
}

int cmd_train_patch(const std::string& spots_dir, const std::string& features_dir,
                    const std::string& proto_csv, const std::string& out_dir, TrainConfig cfg,
                    bool cv, bool loo, const std::string& splits_csv,
                    const std::string& validation_file, const CommonOpts& common) {
  const auto proto0 = read_prototype_csv(proto_csv);
  const auto dataset = assemble_patches(spots_dir, features_dir, proto0.gene_ids);
  fs::create_directories(out_dir);
  if (loo) cfg.folds = static_cast<int>(dataset.size());

  if (cv || loo) {
    SplitPlan plan;
    const bool have_plan = !splits_csv.empty();
    if (have_plan) plan = read_split_plan(splits_csv, validation_file);
    const auto result = run_cv_patch(dataset, proto0, cfg, have_plan ? &plan : nullptr);
    write_cv_outputs(result, out_dir, common.timestamp());
    std::printf("cv: mean_pcc=%.6f mean_scc=%.6f pooled_pcc=%.6f pooled_scc=%.6f\n",
                result.mean_pcc, result.mean_scc, result.pooled.mean_pcc,
                result.pooled.mean_scc);
    return 0;
  }

  const auto result = train_patch(dataset, proto0, cfg);
  save_checkpoint(result.best, out_dir + "/checkpoint.json", common.timestamp());
  write_history_csv(result.history, out_dir + "/history.csv");
  std::printf("train-patch: best_epoch=%d best_val=%.6f steps=%d\n", result.history.best_epoch,
              result.history.best_val, result.history.total_steps);
  return 0;
}

int cmd_predict(const std::string& checkpoint, const std::string& features_dir,
                const std::string& mode, const std::string& bulk_csv, const std::string& out,
                const CommonOpts&) {
  const auto params = load_checkpoint(checkpoint);
  const auto feature_sets = read_feature_dir(features_dir);

  if (mode == "slide") {
    if (bulk_csv.empty())
      throw DataError("predict --mode slide needs --bulk to supply per-slide total counts");
    CountMatrix bulk = read_dense_counts(bulk_csv);
    std::unordered_map<std::string, std::size_t> row_of;
    for (std::size_t r = 0; r < bulk.n_rows(); ++r) row_of.emplace(bulk.row_ids[r], r);

    RealTable table;
    table.col_ids = params.gene_ids;
    table.values = Matrix(feature_sets.size(), params.n_genes());
    for (std::size_t i = 0; i < feature_sets.size(); ++i) {
      auto it = row_of.find(feature_sets[i].slide_id);
      if (it == row_of.end())
        throw DataError("no bulk row (total count) for slide '" + feature_sets[i].slide_id + "'");
      const double l = static_cast<double>(bulk.row_total(it->second));
      const auto trace = forward_slide(params, feature_sets[i], l);
      table.row_ids.push_back(feature_sets[i].slide_id);
      for (std::size_t g = 0; g < params.n_genes(); ++g) table.values(i, g) = trace.mu_bar[g];
    }
    write_real_table(table, out);
    std::cout << "predict: " << table.row_ids.size() << " slides -> " << out << "\n";
    return 0;
  }

  fs::create_directories(out);
  for (const auto& fsx : feature_sets) {
    const auto trace = forward_patch(params, fsx);
    RealTable table;
    table.col_ids = params.gene_ids;
    table.row_ids = fsx.patch_ids;
    table.values = trace.pred;
    write_real_table(table, out + "/" + fsx.slide_id + ".csv", "patch_id");
  }
  std::cout << "predict: " << feature_sets.size() << " slides -> " << out << "/\n";
  return 0;
}

int cmd_evaluate(const std::string& pred_csv, const std::string& truth_csv,
                 const std::string& out_csv, bool per_sample, bool log1p, const CommonOpts&) {
  const auto pred = read_real_table(pred_csv);
  CountMatrix truth = read_dense_counts(truth_csv);
  if (pred.col_ids != truth.gene_ids || pred.row_ids != truth.row_ids) {
    // Try aligning truth columns/rows to the prediction's.
    truth = subset_to_genes(truth, pred.col_ids);
    std::unordered_map<std::string, std::size_t> row_of;
    for (std::size_t r = 0; r < truth.n_rows(); ++r) row_of.emplace(truth.row_ids[r], r);
    CountGrid reordered(pred.row_ids.size(), truth.n_genes());
    for (std::size_t r = 0; r < pred.row_ids.size(); ++r) {
      auto it = row_of.find(pred.row_ids[r]);
      if (it == row_of.end()) throw DataError("truth has no row '" + pred.row_ids[r] + "'");
      for (std::size_t g = 0; g < truth.n_genes(); ++g)
        reordered(r, g) = truth.values(it->second, g);
    }
    truth.values = std::move(reordered);
    truth.row_ids = pred.row_ids;
  }

  EvalOptions opts;
  opts.per_gene = !per_sample;
  opts.log1p = log1p;
  const auto ids = opts.per_gene ? pred.col_ids : pred.row_ids;
  const auto report = evaluate(pred.values, truth.values, ids, opts);
  if (!out_csv.empty()) write_metrics_csv(report, out_csv);
  std::printf("mean_pcc=%.10g mean_scc=%.10g n_genes=%zu\n", report.mean_pcc, report.mean_scc,
              report.n_genes_evaluated);
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, double h, double tol, const CommonOpts&) {
  const auto slide = gradcheck_slide(seed, h, tol);
  const auto patch = gradcheck_patch(seed, h, tol);
  const bool slide_worse = slide.max_rel_err >= patch.max_rel_err;
  const auto& worst = slide_worse ? slide : patch;
  const std::string label = std::string(slide_worse ? "slide:" : "patch:") + worst.worst_param;
  const bool pass = slide.pass && patch.pass;
  std::printf("max_rel_err=%.10g worst=%s pass=%s\n", worst.max_rel_err, label.c_str(),
              pass ? "true" : "false");
  if (!pass) throw NumericError("gradient check failed");
  return 0;
}

int cmd_export_weights(const std::string& checkpoint, const std::string& features_dir,
                       const std::string& out_csv, const CommonOpts&) {
  const auto params = load_checkpoint(checkpoint);
  const auto feature_sets = read_feature_dir(features_dir);
  const auto weights = export_mean_weights(params, feature_sets);
  write_proportions_csv(weights, out_csv);
  std::cout << "export-weights: " << weights.n_rows() << " slides -> " << out_csv << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prototype-informed gene expression prediction pipeline"};
  app.require_subcommand(1);
  CommonOpts common;
  app.add_flag("--no-timestamp", common.no_timestamp,
               "omit timestamps from outputs (byte-identical reruns)");

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset with ground truth");
  std::string synth_config, synth_out;
  std::uint64_t synth_seed = 0;
  synth_cmd->add_option("--config", synth_config, "SynthConfig JSON");
  synth_cmd->add_option("--out", synth_out, "output directory")->required();
  auto* synth_seed_opt = synth_cmd->add_option("--seed", synth_seed, "override config seed");

  // fit-prototypes
  auto* fit_cmd = app.add_subcommand("fit-prototypes",
                                     "fit batch-agnostic cell-type prototypes from sc counts");
  std::string fit_sc_csv, fit_mtx, fit_rows, fit_genes, fit_ann, fit_out;
  std::string fit_filter = "none", fit_mito = "MT-";
  double fit_lr = 1e-2;
  int fit_epochs = 300;
  fit_cmd->add_option("--sc-csv", fit_sc_csv, "dense sc counts CSV");
  fit_cmd->add_option("--sc-mtx", fit_mtx, "sparse MatrixMarket counts");
  fit_cmd->add_option("--sc-rows", fit_rows, "cell id sidecar");
  fit_cmd->add_option("--sc-genes", fit_genes, "gene id sidecar");
  fit_cmd->add_option("--annotations", fit_ann, "cell_id,cell_type,batch CSV")->required();
  fit_cmd->add_option("--out", fit_out, "output directory")->required();
  fit_cmd->add_option("--lr", fit_lr, "learning rate (default 1e-2)");
  fit_cmd->add_option("--epochs", fit_epochs, "full-batch epochs (default 300)");
  fit_cmd->add_option("--filter", fit_filter, "quality filter profile: none|sc|bulk")
      ->check(CLI::IsMember({"none", "sc", "bulk"}));
  fit_cmd->add_option("--mito-prefix", fit_mito, "gene prefix marking mitochondrial genes");

  // deconvolve
  auto* deconv_cmd = app.add_subcommand("deconvolve",
                                        "estimate per-sample cell-type proportions");
  std::string dc_bulk, dc_proto, dc_side, dc_out;
  double dc_lr = 1e-2;
  int dc_steps = 500, dc_jobs = 1;
  deconv_cmd->add_option("--bulk", dc_bulk, "bulk counts CSV")->required();
  deconv_cmd->add_option("--prototypes", dc_proto, "normalized prototype CSV")->required();
  deconv_cmd->add_option("--sidecar", dc_side, "prototype sidecar JSON (dispersions)")
      ->required();
  deconv_cmd->add_option("--out", dc_out, "output proportions CSV")->required();
  deconv_cmd->add_option("--lr", dc_lr, "learning rate (default 1e-2)");
  deconv_cmd->add_option("--steps", dc_steps, "optimizer steps per sample (default 500)");
  deconv_cmd->add_option("--jobs", dc_jobs, "parallel workers across samples");

  // shared training options
  auto add_train_options = [&](CLI::App* cmd, std::string& config_path, std::uint64_t& seed,
                               bool& no_pi, bool& no_mc, bool& no_u, bool& no_r, bool& cv,
                               std::string& splits, std::string& validation, int& jobs,
                               TrainConfig& cfg) {
    cmd->add_option("--config", config_path, "TrainConfig JSON (flags override it)");
    cmd->add_option("--seed", seed, "random seed (required: no silent nondeterminism)")
        ->required();
    cmd->add_option("--lr", cfg.lr, "learning rate (default 1e-3)");
    cmd->add_option("--epochs", cfg.epochs, "max epochs (default 500)");
    cmd->add_option("--batch-size", cfg.batch_size, "mini-batch size (default 16)");
    cmd->add_option("--lambda", cfg.lambda, "regularization coefficient (default 1e3)");
    cmd->add_option("--patience", cfg.patience, "early-stopping patience (default 20)");
    cmd->add_option("--folds", cfg.folds, "cross-validation folds (default 4)");
    cmd->add_option("--validation-count", cfg.validation_count,
                    "validation slides carved from training (default 30)");
    cmd->add_option("--hidden", cfg.hidden_dim, "head hidden width (default: feature dim)");
    cmd->add_flag("--no-pi", no_pi, "ablation: random prototype initialization");
    cmd->add_flag("--no-mc", no_mc, "ablation: freeze modality correction (alpha=1, beta=0)");
    cmd->add_flag("--no-u", no_u, "ablation: freeze the prototype tensor");
    cmd->add_flag("--no-r", no_r, "ablation: drop the regularization loss");
    cmd->add_flag("--cv", cv, "run k-fold cross-validation");
    cmd->add_option("--splits", splits, "explicit slide_id,fold[,patient] CSV");
    cmd->add_option("--validation", validation, "one validation slide id per line");
    cmd->add_option("--jobs", jobs, "parallel fold workers");
  };

  // train-slide
  auto* ts_cmd = app.add_subcommand("train-slide", "train the slide-level model");
  std::string ts_bulk, ts_features, ts_proto, ts_wref, ts_out, ts_config, ts_splits, ts_val;
  std::uint64_t ts_seed = 0;
  bool ts_no_pi = false, ts_no_mc = false, ts_no_u = false, ts_no_r = false, ts_cv = false;
  int ts_jobs = 1;
  TrainConfig ts_cfg;
  ts_cmd->add_option("--bulk", ts_bulk, "bulk counts CSV")->required();
  ts_cmd->add_option("--features-dir", ts_features, "per-slide feature CSV directory")
      ->required();
  ts_cmd->add_option("--prototypes", ts_proto, "normalized prototype CSV")->required();
  ts_cmd->add_option("--wref", ts_wref, "deconvolution reference proportions CSV")->required();
  ts_cmd->add_option("--out", ts_out, "output directory")->required();
  add_train_options(ts_cmd, ts_config, ts_seed, ts_no_pi, ts_no_mc, ts_no_u, ts_no_r, ts_cv,
                    ts_splits, ts_val, ts_jobs, ts_cfg);

  // train-patch
  auto* tp_cmd = app.add_subcommand("train-patch", "train the patch-level model");
  std::string tp_spots, tp_features, tp_proto, tp_out, tp_config, tp_splits, tp_val;
  std::uint64_t tp_seed = 0;
  bool tp_no_pi = false, tp_no_mc = false, tp_no_u = false, tp_no_r = false, tp_cv = false;
  bool tp_loo = false, tp_no_log1p = false;
  int tp_jobs = 1;
  TrainConfig tp_cfg;
  tp_cmd->add_option("--spots-dir", tp_spots, "per-slide spot counts CSV directory")->required();
  tp_cmd->add_option("--features-dir", tp_features, "per-slide feature CSV directory")
      ->required();
  tp_cmd->add_option("--prototypes", tp_proto, "normalized prototype CSV")->required();
  tp_cmd->add_option("--out", tp_out, "output directory")->required();
  add_train_options(tp_cmd, tp_config, tp_seed, tp_no_pi, tp_no_mc, tp_no_u, tp_no_r, tp_cv,
                    tp_splits, tp_val, tp_jobs, tp_cfg);
  tp_cmd->add_flag("--loo", tp_loo, "leave-one-slide-out cross-validation");
  tp_cmd->add_flag("--no-log1p", tp_no_log1p, "correlate raw counts in the patch loss");
  tp_cmd->add_option("--patch-lambda", tp_cfg.patch_lambda,
                     "prototype regularization weight (default 1)");

  // predict
  auto* pred_cmd = app.add_subcommand("predict", "predict expression from features");
  std::string pr_ckpt, pr_features, pr_mode = "slide", pr_bulk, pr_out;
  pred_cmd->add_option("--checkpoint", pr_ckpt, "model checkpoint JSON")->required();
  pred_cmd->add_option("--features-dir", pr_features, "per-slide feature CSV directory")
      ->required();
  pred_cmd->add_option("--mode", pr_mode, "slide|patch")
      ->check(CLI::IsMember({"slide", "patch"}));
  pred_cmd->add_option("--bulk", pr_bulk, "bulk CSV supplying per-slide total counts");
  pred_cmd->add_option("--out", pr_out, "output CSV (slide) or directory (patch)")->required();

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "correlation metrics of pred vs truth");
  std::string ev_pred, ev_truth, ev_out;
  bool ev_per_sample = false, ev_log1p = false;
  eval_cmd->add_option("--pred", ev_pred, "prediction CSV")->required();
  eval_cmd->add_option("--truth", ev_truth, "truth counts CSV")->required();
  eval_cmd->add_option("--out", ev_out, "metrics CSV (gene,pcc,scc)");
  eval_cmd->add_flag("--per-sample", ev_per_sample, "correlate per sample across genes");
  eval_cmd->add_flag("--log1p", ev_log1p, "log1p both tensors before correlating");

  // gradcheck
  auto* gc_cmd = app.add_subcommand("gradcheck",
                                    "finite-difference check of the end-to-end gradients");
  std::uint64_t gc_seed = 7;
  double gc_h = 1e-5, gc_tol = 1e-4;
  gc_cmd->add_option("--seed", gc_seed, "seed for the tiny random instance (default 7)");
  gc_cmd->add_option("--fd-step", gc_h, "central-difference step (default 1e-5)");
  gc_cmd->add_option("--tol", gc_tol, "relative error tolerance (default 1e-4)");

  // export-weights
  auto* ew_cmd = app.add_subcommand("export-weights",
                                    "per-slide mean cell-type weights from a checkpoint");
  std::string ew_ckpt, ew_features, ew_out;
  ew_cmd->add_option("--checkpoint", ew_ckpt, "model checkpoint JSON")->required();
  ew_cmd->add_option("--features-dir", ew_features, "per-slide feature CSV directory")
      ->required();
  ew_cmd->add_option("--out", ew_out, "output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << std::flush;
    return 1;
  }

  try {
    if (*synth_cmd)
      return cmd_synth(synth_config, synth_out, synth_seed, synth_seed_opt->count() > 0, common);
    if (*fit_cmd)
      return cmd_fit_prototypes(fit_sc_csv, fit_mtx, fit_rows, fit_genes, fit_ann, fit_out,
                                fit_lr, fit_epochs, fit_filter, fit_mito, common);
    if (*deconv_cmd)
      return cmd_deconvolve(dc_bulk, dc_proto, dc_side, dc_out, dc_lr, dc_steps, dc_jobs, common);
    if (*ts_cmd) {
      TrainConfig cfg = load_train_config(ts_config);
      // Explicit flags win over the config file.
      for (const auto* opt : ts_cmd->get_options())
        if (opt->count() > 0) {
          const std::string name = opt->get_name();
          if (name == "--lr") cfg.lr = ts_cfg.lr;
          else if (name == "--epochs") cfg.epochs = ts_cfg.epochs;
          else if (name == "--batch-size") cfg.batch_size = ts_cfg.batch_size;
          else if (name == "--lambda") cfg.lambda = ts_cfg.lambda;
          else if (name == "--patience") cfg.patience = ts_cfg.patience;
          else if (name == "--folds") cfg.folds = ts_cfg.folds;
          else if (name == "--validation-count") cfg.validation_count = ts_cfg.validation_count;
          else if (name == "--hidden") cfg.hidden_dim = ts_cfg.hidden_dim;
        }
      cfg.seed = ts_seed;
      cfg.jobs = ts_jobs;
      if (ts_no_pi) cfg.flags.prototype_init = false;
      if (ts_no_mc) cfg.flags.modality_correction = false;
      if (ts_no_u) cfg.flags.update_prototype = false;
      if (ts_no_r) cfg.flags.regularization = false;
      return cmd_train_slide(ts_bulk, ts_features, ts_proto, ts_wref, ts_out, cfg, ts_cv,
                             ts_splits, ts_val, common);
    }
    if (*tp_cmd) {
      TrainConfig cfg = load_train_config(tp_config);
      for (const auto* opt : tp_cmd->get_options())
        if (opt->count() > 0) {
          const std::string name = opt->get_name();
          if (name == "--lr") cfg.lr = tp_cfg.lr;
          else if (name == "--epochs") cfg.epochs = tp_cfg.epochs;
          else if (name == "--batch-size") cfg.batch_size = tp_cfg.batch_size;
          else if (name == "--lambda") cfg.lambda = tp_cfg.lambda;
          else if (name == "--patience") cfg.patience = tp_cfg.patience;
          else if (name == "--folds") cfg.folds = tp_cfg.folds;
          else if (name == "--validation-count") cfg.validation_count = tp_cfg.validation_count;
          else if (name == "--hidden") cfg.hidden_dim = tp_cfg.hidden_dim;
          else if (name == "--patch-lambda") cfg.patch_lambda = tp_cfg.patch_lambda;
        }
      cfg.seed = tp_seed;
      cfg.jobs = tp_jobs;
      if (tp_no_pi) cfg.flags.prototype_init = false;
      if (tp_no_mc) cfg.flags.modality_correction = false;
      if (tp_no_u) cfg.flags.update_prototype = false;
      if (tp_no_r) cfg.flags.regularization = false;
      if (tp_no_log1p) cfg.patch_log1p = false;
      return cmd_train_patch(tp_spots, tp_features, tp_proto, tp_out, cfg, tp_cv, tp_loo,
                             tp_splits, tp_val, common);
    }
    if (*pred_cmd) return cmd_predict(pr_ckpt, pr_features, pr_mode, pr_bulk, pr_out, common);
    if (*eval_cmd)
      return cmd_evaluate(ev_pred, ev_truth, ev_out, ev_per_sample, ev_log1p, common);
    if (*gc_cmd) return cmd_gradcheck(gc_seed, gc_h, gc_tol, common);
    if (*ew_cmd) return cmd_export_weights(ew_ckpt, ew_features, ew_out, common);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
