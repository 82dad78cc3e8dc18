#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_set>

#include "cpnn/prototype.hpp"
#include "cpnn/synth.hpp"
#include "cpnn/train.hpp"

using namespace cpnn;

namespace {

struct Pipeline {
  SynthData data;
  PrototypeMatrix proto0;
  ProportionMatrix wref;
};

// Shared small-dataset fixture: synthetic slides plus prototypes fitted on
// the generated sc data and a deconvolution reference.
Pipeline make_pipeline(std::uint64_t seed, std::size_t n_slides = 40, std::size_t n_genes = 40,
                       double alpha_spread = 0.0) {
  SynthConfig cfg;
  cfg.n_types = 3;
  cfg.n_genes = n_genes;
  cfg.feature_dim = 8;
  cfg.n_cells = 300;
  cfg.n_slides = n_slides;
  cfg.patches_per_slide = 8;
  cfg.library_size = 30000;
  cfg.modality_gap.alpha_spread = alpha_spread;
  cfg.seed = seed;

  Pipeline p;
  p.data = generate(cfg);
  FitConfig fit_cfg;
  fit_cfg.epochs = 150;
  auto fit = fit_prototypes(p.data.sc_counts, p.data.annotations, fit_cfg);
  p.proto0 = fit.normalized;

  CountMatrix bulk;
  bulk.gene_ids = p.data.sc_counts.gene_ids;
  bulk.values = CountGrid(n_slides, n_genes);
  for (std::size_t n = 0; n < n_slides; ++n) {
    bulk.row_ids.push_back(p.data.slides[n].slide_id);
    for (std::size_t g = 0; g < n_genes; ++g) bulk.values(n, g) = p.data.slides[n].target_counts[g];
  }
  DeconvConfig dcfg;
  dcfg.steps = 300;
  p.wref = deconvolve(bulk, p.proto0, fit.dispersion, dcfg);
  return p;
}

std::vector<PatchRecord> patch_records(const SynthData& data) {
  std::vector<PatchRecord> records;
  for (std::size_t n = 0; n < data.slides.size(); ++n) {
    PatchRecord r;
    r.features = data.slides[n].features;
    r.spot_counts = data.spot_counts[n];
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace

TEST_CASE("train_slide: epochs=1 records exactly ceil(N/16) optimizer steps") {
  auto p = make_pipeline(50);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.seed = 1;
  auto result = train_slide(p.data.slides, p.proto0, p.wref, cfg);
  // 40 slides, validation = min(30, ceil(8)) = 8, so 32 training slides.
  CHECK(result.validation_ids.size() == 8);
  CHECK(result.history.total_steps == 2);
  CHECK(result.history.rows.size() == 1);
}

TEST_CASE("train_slide: learns model-generated data (val NB drops by >= 20%)") {
  auto p = make_pipeline(51);
  TrainConfig cfg;
  cfg.epochs = 80;
  cfg.patience = 80;
  cfg.seed = 2;
  auto result = train_slide(p.data.slides, p.proto0, p.wref, cfg);
  CHECK(result.history.best_val < 0.8 * result.history.initial_val);
  // Early stopping bookkeeping: the best epoch is recorded and no later
  // parameters are returned.
  CHECK(result.history.best_epoch >= 1);
  CHECK(result.history.best_epoch <= static_cast<int>(result.history.rows.size()));
}

TEST_CASE("train_slide: deterministic across reruns; validation never in gradients") {
  auto p = make_pipeline(52);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.seed = 3;
  std::unordered_set<std::string> touched;
  cfg.gradient_hook = [&](const std::string& id) { touched.insert(id); };
  auto a = train_slide(p.data.slides, p.proto0, p.wref, cfg);
  for (const auto& id : a.validation_ids) CHECK(touched.count(id) == 0);

  cfg.gradient_hook = nullptr;
  auto b = train_slide(p.data.slides, p.proto0, p.wref, cfg);
  CHECK(a.history.best_val == b.history.best_val);
  CHECK(a.best.head.w1.data() == b.best.head.w1.data());
  CHECK(a.best.proto_free.data() == b.best.proto_free.data());
  for (std::size_t i = 0; i < a.history.rows.size(); ++i) {
    CHECK(a.history.rows[i].train_loss == b.history.rows[i].train_loss);
    CHECK(a.history.rows[i].val_loss == b.history.rows[i].val_loss);
  }
}

TEST_CASE("train_slide: early stopping halts after patience epochs without improvement") {
  auto p = make_pipeline(53, 20);
  TrainConfig cfg;
  cfg.epochs = 500;
  cfg.patience = 3;
  cfg.lr = 0.0;  // nothing can improve, so epoch 1 is best
  cfg.seed = 4;
  auto result = train_slide(p.data.slides, p.proto0, p.wref, cfg);
  CHECK(result.history.best_epoch == 1);
  CHECK(result.history.rows.size() == 4);  // best + patience more
}

TEST_CASE("run_cv_slide: partition, determinism, per-fold isolation") {
  auto p = make_pipeline(54, 12);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.folds = 2;
  cfg.seed = 9;
  auto cv = run_cv_slide(p.data.slides, p.proto0, p.wref, cfg);

  // Every slide appears in exactly one test fold.
  CHECK(cv.plan.slide_ids.size() == 12);
  std::vector<int> count(2, 0);
  for (int f : cv.plan.fold_of) ++count[f];
  CHECK(count[0] == 6);
  CHECK(count[1] == 6);
  CHECK(cv.folds.size() == 2);

  // Identical seeds: identical folds and metrics.
  auto cv2 = run_cv_slide(p.data.slides, p.proto0, p.wref, cfg);
  CHECK(cv.plan.fold_of == cv2.plan.fold_of);
  CHECK(cv.pooled.mean_scc == cv2.pooled.mean_scc);
  CHECK(cv.pooled_predictions.data() == cv2.pooled_predictions.data());

  // The training subset of fold 0 never receives gradients from fold-0
  // test slides (the hook sees only its own training slides).
  std::unordered_set<std::string> fold0_test;
  std::vector<SampleRecord> fold0_train;
  for (std::size_t i = 0; i < p.data.slides.size(); ++i) {
    if (cv.plan.fold_of[i] == 0)
      fold0_test.insert(p.data.slides[i].slide_id);
    else
      fold0_train.push_back(p.data.slides[i]);
  }
  std::unordered_set<std::string> touched;
  TrainConfig hook_cfg = cfg;
  hook_cfg.gradient_hook = [&](const std::string& id) { touched.insert(id); };
  auto trained = train_slide(fold0_train, p.proto0, p.wref, hook_cfg);
  for (const auto& id : fold0_test) CHECK(touched.count(id) == 0);
  for (const auto& id : trained.validation_ids) CHECK(touched.count(id) == 0);
}

TEST_CASE("train_patch: correlation term decreases on synthetic data") {
  auto p = make_pipeline(55, 6);
  auto records = patch_records(p.data);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.patience = 50;
  cfg.seed = 5;
  auto result = train_patch(records, p.proto0, cfg);
  CHECK(result.history.best_val < result.history.initial_val);
  // Training-loss trace also heads down.
  CHECK(result.history.rows.back().nb < result.history.rows.front().nb);
}

TEST_CASE("train_patch: frozen prototype stays bit-identical with patch_lambda 0") {
  auto p = make_pipeline(56, 4);
  auto records = patch_records(p.data);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.seed = 6;
  cfg.patch_lambda = 0.0;
  cfg.flags.update_prototype = false;
  auto result = train_patch(records, p.proto0, cfg);

  auto reference = init_cpnn(p.proto0, records.front().features.dim(), cfg.hidden_dim, cfg.flags,
                             cfg.seed);
  CHECK(result.best.proto_free.data() == reference.proto_free.data());
}

TEST_CASE("run_cv_patch: leave-one-out trains one model per slide") {
  auto p = make_pipeline(57, 3);
  auto records = patch_records(p.data);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.folds = 3;  // = n_slides: leave-one-out
  cfg.seed = 7;
  auto cv = run_cv_patch(records, p.proto0, cfg);
  CHECK(cv.fold_models.size() == 3);
  CHECK(cv.folds.size() == 3);
  // Each fold holds exactly one slide.
  std::set<int> fold_set(cv.plan.fold_of.begin(), cv.plan.fold_of.end());
  CHECK(fold_set.size() == 3);
}

TEST_CASE("export_mean_weights: simplex rows matching forward traces") {
  auto p = make_pipeline(58, 5);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 8;
  auto result = train_slide(p.data.slides, p.proto0, p.wref, cfg);
  std::vector<PatchFeatureSet> features;
  for (const auto& s : p.data.slides) features.push_back(s.features);
  auto weights = export_mean_weights(result.best, features);
  weights.validate();
  const auto trace = forward_slide(result.best, p.data.slides[2].features,
                                   static_cast<double>(p.data.slides[2].total_count));
  for (std::size_t c = 0; c < weights.n_types(); ++c)
    CHECK(weights.values(2, c) == doctest::Approx(trace.mean_weight[c]).epsilon(1e-12));
}

TEST_CASE("TrainConfig validation") {
  TrainConfig cfg;
  cfg.epochs = 0;
  CHECK_THROWS(cfg.validate());
  TrainConfig cfg2;
  cfg2.folds = 1;
  CHECK_THROWS(cfg2.validate());
  TrainConfig cfg3;
  cfg3.batch_size = 0;
  CHECK_THROWS(cfg3.validate());
  TrainConfig cfg4;
  cfg4.patience = 0;
  CHECK_THROWS(cfg4.validate());
}
