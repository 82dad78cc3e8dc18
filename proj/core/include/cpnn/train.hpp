#ifndef CPNN_TRAIN_HPP
#define CPNN_TRAIN_HPP

#include <functional>
#include <string>
#include <vector>

#include "cpnn/data.hpp"
#include "cpnn/deconv.hpp"
#include "cpnn/losses.hpp"
#include "cpnn/metrics.hpp"
#include "cpnn/model.hpp"

namespace cpnn {

struct TrainConfig {
  double lr = 1e-3;
  int epochs = 500;
  int batch_size = 16;
  double lambda = 1e3;
  int patience = 20;
  std::uint64_t seed = 0;
  int folds = 4;
  int validation_count = 30;  // clipped to ceil(20% of the training fold)
  AblationFlags flags;
  bool val_includes_reg = false;
  double weight_decay = 0.01;  // head tensors only
  std::size_t hidden_dim = 0;  // 0 -> feature dim
  bool patch_log1p = true;
  double patch_lambda = 1.0;
  bool patch_corr_per_gene = false;
  int jobs = 1;

  /// Test-only instrumentation: invoked once per slide per gradient
  /// contribution (use with jobs = 1).
  std::function<void(const std::string&)> gradient_hook;

  void validate() const;
};

struct EpochRow {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double nb = 0.0;
  double reg = 0.0;
};

struct History {
  std::vector<EpochRow> rows;
  int best_epoch = 0;
  double best_val = 0.0;
  double initial_val = 0.0;  // validation loss before any update
  int total_steps = 0;
};

/// CSV `epoch,train_loss,val_loss,nb,reg`.
void write_history_csv(const History& history, const std::string& path);

struct TrainResult {
  CpnnParameters best;
  History history;
  std::vector<std::string> validation_ids;
};

/// Slide-level training: seeded mini-batches, AdamW, early stopping on the
/// L_NB validation loss (regularizer excluded unless val_includes_reg).
/// Validation slides come from `explicit_validation` or are carved from the
/// dataset by seeded draw. The returned parameters are the snapshot from the
/// best-validation epoch.
TrainResult train_slide(const std::vector<SampleRecord>& dataset, const PrototypeMatrix& proto0,
                        const ProportionMatrix& wref, const TrainConfig& cfg,
                        const std::vector<std::string>& explicit_validation = {});

/// Patch-level training: same loop over forward_patch + the correlation
/// loss; early stopping on the correlation term.
TrainResult train_patch(const std::vector<PatchRecord>& dataset, const PrototypeMatrix& proto0,
                        const TrainConfig& cfg,
                        const std::vector<std::string>& explicit_validation = {});

struct FoldResult {
  int fold = 0;
  EvalReport report;
  int best_epoch = 0;
  double best_val = 0.0;
};

struct CvResult {
  std::vector<FoldResult> folds;
  EvalReport pooled;              // out-of-fold predictions pooled over all slides
  double mean_pcc = 0.0, std_pcc = 0.0;
  double mean_scc = 0.0, std_scc = 0.0;
  SplitPlan plan;
  Matrix pooled_predictions;      // rows in dataset order (slides, or spots concatenated)
  Matrix pooled_mean_weights;     // slide mode: out-of-fold Wbar per slide
  std::vector<CpnnParameters> fold_models;
};

/// Seeded, persisted fold assignment; per-fold train/predict/evaluate; fold
/// aggregation by mean and sample standard deviation. An explicit plan
/// overrides the seeded assignment.
CvResult run_cv_slide(const std::vector<SampleRecord>& dataset, const PrototypeMatrix& proto0,
                      const ProportionMatrix& wref, const TrainConfig& cfg,
                      const SplitPlan* explicit_plan = nullptr);

/// Patch-level cross-validation; folds = n_slides gives leave-one-slide-out.
CvResult run_cv_patch(const std::vector<PatchRecord>& dataset, const PrototypeMatrix& proto0,
                      const TrainConfig& cfg, const SplitPlan* explicit_plan = nullptr);

/// Per-slide mean weights Wbar from a trained model; rows on the simplex.
ProportionMatrix export_mean_weights(const CpnnParameters& params,
                                     const std::vector<PatchFeatureSet>& features);

}  // namespace cpnn

#endif
