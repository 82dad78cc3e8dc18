#include "cpnn/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "cpnn/errors.hpp"
#include "cpnn/io.hpp"
#include "cpnn/mathutil.hpp"
#include "cpnn/nb.hpp"
#include "cpnn/optim.hpp"
#include "cpnn/parallel.hpp"
#include "cpnn/rng.hpp"

namespace cpnn {

void TrainConfig::validate() const {
  if (epochs < 1) throw DataError("TrainConfig: epochs must be >= 1");
  if (batch_size < 1) throw DataError("TrainConfig: batch_size must be >= 1");
  if (folds < 2) throw DataError("TrainConfig: folds must be >= 2");
  if (patience < 1) throw DataError("TrainConfig: patience must be >= 1");
  if (validation_count < 1) throw DataError("TrainConfig: validation_count must be >= 1");
  if (lambda < 0.0 || patch_lambda < 0.0) throw DataError("TrainConfig: lambda must be >= 0");
}

void write_history_csv(const History& history, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << "epoch,train_loss,val_loss,nb,reg\n";
  for (const auto& row : history.rows)
    out << row.epoch << ',' << format_double(row.train_loss) << ','
        << format_double(row.val_loss) << ',' << format_double(row.nb) << ','
        << format_double(row.reg) << '\n';
}

namespace {

// Carve validation indices from [0, n): validation_count clipped to
// ceil(20% of n), leaving at least one training element.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> carve_validation(
    std::size_t n, const TrainConfig& cfg, Rng& rng) {
  if (n < 2) throw DataError("training needs at least 2 slides (one must validate)");
  std::size_t want = std::min<std::size_t>(static_cast<std::size_t>(cfg.validation_count),
                                           (n + 4) / 5);
  want = std::max<std::size_t>(want, 1);
  if (want >= n) want = n - 1;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::vector<std::size_t> val(order.begin(), order.begin() + want);
  std::vector<std::size_t> train(order.begin() + want, order.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {train, val};
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_by_ids(
    std::size_t n, const std::vector<std::string>& ids,
    const std::function<std::string(std::size_t)>& id_of) {
  std::unordered_set<std::string> val_ids(ids.begin(), ids.end());
  std::vector<std::size_t> train, val;
  for (std::size_t i = 0; i < n; ++i)
    (val_ids.count(id_of(i)) ? val : train).push_back(i);
  if (val.size() != ids.size())
    throw DataError("validation list names slides missing from the dataset");
  if (train.empty()) throw DataError("validation list leaves no training slides");
  if (val.empty()) throw DataError("validation set is empty");
  return {train, val};
}

std::vector<TensorRef> tensor_refs(CpnnParameters& params, CpnnGrads& grads,
                                   const TrainConfig& cfg) {
  std::vector<TensorRef> refs = {
      {"head.w1", params.head.w1.data().data(), grads.w1.data().data(), params.head.w1.size(),
       cfg.weight_decay},
      {"head.b1", params.head.b1.data(), grads.b1.data(), params.head.b1.size(),
       cfg.weight_decay},
      {"head.w2", params.head.w2.data().data(), grads.w2.data().data(), params.head.w2.size(),
       cfg.weight_decay},
      {"head.b2", params.head.b2.data(), grads.b2.data(), params.head.b2.size(),
       cfg.weight_decay},
      {"rho", params.rho.data(), grads.rho.data(), params.rho.size(), 0.0},
  };
  if (params.flags.modality_correction) {
    refs.push_back({"correction.a", params.correction.a.data(), grads.a.data(),
                    params.correction.a.size(), 0.0});
    refs.push_back({"correction.c", params.correction.c.data(), grads.c.data(),
                    params.correction.c.size(), 0.0});
  }
  if (params.flags.update_prototype)
    refs.push_back({"proto_free", params.proto_free.data().data(),
                    grads.proto_free.data().data(), params.proto_free.size(), 0.0});
  return refs;
}

// Adds the regularizer's direct prototype pull and the dispersion chain
// (theta = exp(rho)) to the accumulated gradients.
void apply_loss_chains(CpnnParameters& params, CpnnGrads& grads,
                       const std::vector<double>& d_theta, const Matrix* d_proto) {
  const auto theta = params.theta();
  for (std::size_t g = 0; g < theta.size(); ++g) grads.rho[g] += d_theta[g] * theta[g];
  if (d_proto && params.flags.update_prototype) {
    for (std::size_t i = 0; i < params.proto_free.size(); ++i)
      grads.proto_free.data()[i] +=
          d_proto->data()[i] * sigmoid(params.proto_free.data()[i]);
  }
}

struct WrefLookup {
  const ProportionMatrix* wref;
  std::unordered_map<std::string, std::size_t> row_of;

  explicit WrefLookup(const ProportionMatrix& w) : wref(&w) {
    for (std::size_t i = 0; i < w.row_ids.size(); ++i) row_of.emplace(w.row_ids[i], i);
  }

  std::size_t row(const std::string& slide_id) const {
    auto it = row_of.find(slide_id);
    if (it == row_of.end())
      throw DataError("missing deconvolution reference row for slide '" + slide_id + "'");
    return it->second;
  }
};

}  // namespace

TrainResult train_slide(const std::vector<SampleRecord>& dataset, const PrototypeMatrix& proto0,
                        const ProportionMatrix& wref, const TrainConfig& cfg,
                        const std::vector<std::string>& explicit_validation) {
  cfg.validate();
  if (dataset.empty()) throw DataError("train_slide: empty dataset");
  const std::size_t n_genes = proto0.n_genes();
  const std::size_t n_types = proto0.n_types();
  for (const auto& record : dataset) {
    if (record.target_counts.size() != n_genes)
      throw DataError("train_slide: slide '" + record.slide_id +
                      "' gene count does not match the prototype");
  }
  if (wref.n_types() != n_types)
    throw DataError("train_slide: deconvolution reference cell-type count mismatch");

  Rng rng(cfg.seed);
  auto [train_idx, val_idx] =
      explicit_validation.empty()
          ? carve_validation(dataset.size(), cfg, rng)
          : split_by_ids(dataset.size(), explicit_validation,
                         [&](std::size_t i) { return dataset[i].slide_id; });

  const WrefLookup lookup(wref);
  for (std::size_t i : train_idx) lookup.row(dataset[i].slide_id);  // fail fast

  CpnnParameters params = init_cpnn(proto0, dataset.front().features.dim(), cfg.hidden_dim,
                                    cfg.flags, cfg.seed);
  CpnnGrads grads(params);
  LossConfig lcfg;
  lcfg.lambda = cfg.flags.regularization ? cfg.lambda : 0.0;

  AdamW opt({cfg.lr, 0.9, 0.999, 1e-8});
  auto refs = tensor_refs(params, grads, cfg);

  const Matrix proto0_vals = proto0.values;
  auto validation_loss = [&]() {
    CountGrid targets(val_idx.size(), n_genes);
    std::vector<ForwardTrace> traces;
    traces.reserve(val_idx.size());
    std::vector<const ForwardTrace*> trace_ptrs;
    Matrix wref_rows(val_idx.size(), n_types, 0.0);
    for (std::size_t v = 0; v < val_idx.size(); ++v) {
      const auto& record = dataset[val_idx[v]];
      traces.push_back(forward_slide(params, record.features,
                                     static_cast<double>(record.total_count)));
      for (std::size_t g = 0; g < n_genes; ++g) targets(v, g) = record.target_counts[g];
      if (cfg.val_includes_reg) {
        const std::size_t row = lookup.row(record.slide_id);
        for (std::size_t c = 0; c < n_types; ++c) wref_rows(v, c) = wref.values(row, c);
      }
    }
    for (const auto& t : traces) trace_ptrs.push_back(&t);
    const Matrix proto = params.prototype();
    if (cfg.val_includes_reg) {
      return loss_slide(trace_ptrs, targets, params.theta(), wref_rows, proto, proto0_vals, lcfg)
          .total;
    }
    Matrix mu(val_idx.size(), n_genes);
    for (std::size_t v = 0; v < val_idx.size(); ++v)
      for (std::size_t g = 0; g < n_genes; ++g) mu(v, g) = traces[v].mu_bar[g];
    return nb_nll_batch(targets, mu, params.theta());
  };

  TrainResult result;
  result.history.best_val = std::numeric_limits<double>::infinity();
  result.history.initial_val = validation_loss();
  for (std::size_t i : val_idx) result.validation_ids.push_back(dataset[i].slide_id);
  CpnnParameters best = params;
  int epochs_since_best = 0;

  std::vector<std::size_t> order = train_idx;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double ep_total = 0.0, ep_nb = 0.0, ep_reg = 0.0;
    std::size_t ep_count = 0;

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::size_t n_batch = stop - start;

      std::vector<ForwardTrace> traces;
      traces.reserve(n_batch);
      std::vector<const ForwardTrace*> trace_ptrs;
      CountGrid targets(n_batch, n_genes);
      Matrix wref_rows(n_batch, n_types);
      for (std::size_t b = 0; b < n_batch; ++b) {
        const auto& record = dataset[order[start + b]];
        traces.push_back(forward_slide(params, record.features,
                                       static_cast<double>(record.total_count)));
        for (std::size_t g = 0; g < n_genes; ++g) targets(b, g) = record.target_counts[g];
        const std::size_t row = lookup.row(record.slide_id);
        for (std::size_t c = 0; c < n_types; ++c) wref_rows(b, c) = wref.values(row, c);
      }
      for (const auto& t : traces) trace_ptrs.push_back(&t);

      const Matrix proto = params.prototype();
      auto loss = loss_slide_grads(trace_ptrs, targets, params.theta(), wref_rows, proto,
                                   proto0_vals, lcfg);
      if (!std::isfinite(loss.parts.total))
        throw NumericError("train_slide: non-finite loss at epoch " + std::to_string(epoch));

      grads.zero();
      for (std::size_t b = 0; b < n_batch; ++b) {
        const auto& record = dataset[order[start + b]];
        std::vector<double> d_mu_bar(loss.d_mu_bar.row(b), loss.d_mu_bar.row(b) + n_genes);
        std::vector<double> d_mw(loss.d_mean_weight.row(b),
                                 loss.d_mean_weight.row(b) + n_types);
        backward_slide(params, record.features, traces[b], d_mu_bar, d_mw, grads);
        if (cfg.gradient_hook) cfg.gradient_hook(record.slide_id);
      }
      apply_loss_chains(params, grads, loss.d_theta, &loss.d_proto);
      opt.step(refs);
      ++result.history.total_steps;

      ep_total += loss.parts.total * static_cast<double>(n_batch);
      ep_nb += loss.parts.nb * static_cast<double>(n_batch);
      ep_reg += loss.parts.reg * static_cast<double>(n_batch);
      ep_count += n_batch;
    }

    const double val = validation_loss();
    EpochRow row;
    row.epoch = epoch;
    row.train_loss = ep_total / static_cast<double>(ep_count);
    row.val_loss = val;
    row.nb = ep_nb / static_cast<double>(ep_count);
    row.reg = ep_reg / static_cast<double>(ep_count);
    result.history.rows.push_back(row);

    if (val < result.history.best_val) {
      result.history.best_val = val;
      result.history.best_epoch = epoch;
      best = params;
      epochs_since_best = 0;
    } else if (++epochs_since_best >= cfg.patience) {
      break;
    }
  }

  result.best = std::move(best);
  return result;
}

TrainResult train_patch(const std::vector<PatchRecord>& dataset, const PrototypeMatrix& proto0,
                        const TrainConfig& cfg,
                        const std::vector<std::string>& explicit_validation) {
  cfg.validate();
  if (dataset.empty()) throw DataError("train_patch: empty dataset");
  const std::size_t n_genes = proto0.n_genes();
  for (const auto& record : dataset) {
    record.validate();
    if (record.spot_counts.cols() != n_genes)
      throw DataError("train_patch: slide '" + record.features.slide_id +
                      "' gene count does not match the prototype");
  }

  Rng rng(cfg.seed);
  auto [train_idx, val_idx] =
      explicit_validation.empty()
          ? carve_validation(dataset.size(), cfg, rng)
          : split_by_ids(dataset.size(), explicit_validation,
                         [&](std::size_t i) { return dataset[i].features.slide_id; });

  CpnnParameters params = init_cpnn(proto0, dataset.front().features.dim(), cfg.hidden_dim,
                                    cfg.flags, cfg.seed);
  CpnnGrads grads(params);
  LossConfig lcfg;
  lcfg.patch_log1p = cfg.patch_log1p;
  lcfg.patch_corr_per_gene = cfg.patch_corr_per_gene;
  lcfg.patch_lambda = cfg.patch_lambda;
  LossConfig corr_only = lcfg;
  corr_only.patch_lambda = 0.0;

  AdamW opt({cfg.lr, 0.9, 0.999, 1e-8});
  auto refs = tensor_refs(params, grads, cfg);
  const Matrix proto0_vals = proto0.values;

  auto validation_loss = [&]() {
    double acc = 0.0;
    const Matrix proto = params.prototype();
    for (std::size_t i : val_idx) {
      const auto trace = forward_patch(params, dataset[i].features);
      acc += loss_patch(trace.pred, dataset[i].spot_counts, proto, proto0_vals, corr_only).corr;
    }
    return acc / static_cast<double>(val_idx.size());
  };

  TrainResult result;
  result.history.best_val = std::numeric_limits<double>::infinity();
  result.history.initial_val = validation_loss();
  for (std::size_t i : val_idx) result.validation_ids.push_back(dataset[i].features.slide_id);
  CpnnParameters best = params;
  int epochs_since_best = 0;

  std::vector<std::size_t> order = train_idx;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double ep_total = 0.0, ep_corr = 0.0, ep_reg = 0.0;
    std::size_t ep_count = 0;

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::size_t n_batch = stop - start;
      const double inv_batch = 1.0 / static_cast<double>(n_batch);
      const Matrix proto = params.prototype();

      grads.zero();
      double batch_corr = 0.0;
      for (std::size_t b = 0; b < n_batch; ++b) {
        const auto& record = dataset[order[start + b]];
        const auto trace = forward_patch(params, record.features);
        auto loss = loss_patch_grads(trace.pred, record.spot_counts, proto, proto0_vals,
                                     corr_only);
        batch_corr += loss.parts.corr;
        for (auto& v : loss.d_pred.data()) v *= inv_batch;
        backward_patch(params, record.features, trace, loss.d_pred, grads);
        if (cfg.gradient_hook) cfg.gradient_hook(record.features.slide_id);
      }
      batch_corr *= inv_batch;

      // Prototype-only regularization, once per batch.
      double proto_reg = 0.0;
      for (std::size_t i = 0; i < proto.size(); ++i) {
        const double d = proto0_vals.data()[i] - proto.data()[i];
        proto_reg += d * d;
      }
      if (params.flags.update_prototype && cfg.patch_lambda > 0.0) {
        for (std::size_t i = 0; i < proto.size(); ++i)
          grads.proto_free.data()[i] += 2.0 * cfg.patch_lambda *
                                        (proto.data()[i] - proto0_vals.data()[i]) *
                                        sigmoid(params.proto_free.data()[i]);
      }
      const double batch_total = batch_corr + cfg.patch_lambda * proto_reg;
      if (!std::isfinite(batch_total))
        throw NumericError("train_patch: non-finite loss at epoch " + std::to_string(epoch));
      opt.step(refs);
      ++result.history.total_steps;

      ep_total += batch_total * static_cast<double>(n_batch);
      ep_corr += batch_corr * static_cast<double>(n_batch);
      ep_reg += proto_reg * static_cast<double>(n_batch);
      ep_count += n_batch;
    }

    const double val = validation_loss();
    EpochRow row;
    row.epoch = epoch;
    row.train_loss = ep_total / static_cast<double>(ep_count);
    row.val_loss = val;
    row.nb = ep_corr / static_cast<double>(ep_count);  // correlation part
    row.reg = ep_reg / static_cast<double>(ep_count);
    result.history.rows.push_back(row);

    if (val < result.history.best_val) {
      result.history.best_val = val;
      result.history.best_epoch = epoch;
      best = params;
      epochs_since_best = 0;
    } else if (++epochs_since_best >= cfg.patience) {
      break;
    }
  }

  result.best = std::move(best);
  return result;
}

namespace {

SplitPlan assign_folds(const std::vector<std::string>& slide_ids, int folds, std::uint64_t seed) {
  if (static_cast<std::size_t>(folds) > slide_ids.size())
    throw DataError("run_cv: more folds than slides");
  SplitPlan plan;
  plan.slide_ids = slide_ids;
  plan.fold_of.assign(slide_ids.size(), 0);
  std::vector<std::size_t> order(slide_ids.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order);
  for (std::size_t pos = 0; pos < order.size(); ++pos)
    plan.fold_of[order[pos]] = static_cast<int>(pos % static_cast<std::size_t>(folds));
  plan.validate();
  return plan;
}

// Resolves a plan against the dataset: tested indices in plan order, plus
// the indices of the fixed validation slides (held out of all folds).
struct CvSplit {
  std::vector<std::size_t> tested;
  std::vector<std::size_t> shared_validation;
};

CvSplit resolve_plan(const SplitPlan& plan, const std::vector<std::string>& dataset_ids) {
  std::unordered_map<std::string, std::size_t> index_of;
  for (std::size_t i = 0; i < dataset_ids.size(); ++i) index_of.emplace(dataset_ids[i], i);
  CvSplit split;
  for (const auto& id : plan.slide_ids) {
    auto it = index_of.find(id);
    if (it == index_of.end()) throw DataError("run_cv: plan slide '" + id + "' not in dataset");
    split.tested.push_back(it->second);
  }
  for (const auto& id : plan.validation_ids) {
    auto it = index_of.find(id);
    if (it == index_of.end())
      throw DataError("run_cv: validation slide '" + id + "' not in dataset");
    split.shared_validation.push_back(it->second);
  }
  return split;
}

void aggregate_folds(CvResult& result) {
  const double n = static_cast<double>(result.folds.size());
  for (const auto& fold : result.folds) {
    result.mean_pcc += fold.report.mean_pcc;
    result.mean_scc += fold.report.mean_scc;
  }
  result.mean_pcc /= n;
  result.mean_scc /= n;
  if (result.folds.size() > 1) {
    double vp = 0.0, vs = 0.0;
    for (const auto& fold : result.folds) {
      vp += (fold.report.mean_pcc - result.mean_pcc) * (fold.report.mean_pcc - result.mean_pcc);
      vs += (fold.report.mean_scc - result.mean_scc) * (fold.report.mean_scc - result.mean_scc);
    }
    result.std_pcc = std::sqrt(vp / (n - 1.0));
    result.std_scc = std::sqrt(vs / (n - 1.0));
  }
}

}  // namespace

CvResult run_cv_slide(const std::vector<SampleRecord>& dataset, const PrototypeMatrix& proto0,
                      const ProportionMatrix& wref, const TrainConfig& cfg,
                      const SplitPlan* explicit_plan) {
  cfg.validate();
  if (dataset.empty()) throw DataError("run_cv_slide: empty dataset");
  const std::size_t n_genes = proto0.n_genes();

  std::vector<std::string> slide_ids;
  for (const auto& record : dataset) slide_ids.push_back(record.slide_id);

  CvResult result;
  result.plan = explicit_plan ? *explicit_plan : assign_folds(slide_ids, cfg.folds, cfg.seed);
  if (explicit_plan) result.plan.validate();
  const CvSplit split = resolve_plan(result.plan, slide_ids);
  const std::size_t n_tested = split.tested.size();
  const int n_folds = result.plan.n_folds();

  result.pooled_predictions = Matrix(n_tested, n_genes, 0.0);
  result.pooled_mean_weights = Matrix(n_tested, proto0.n_types(), 0.0);
  result.folds.resize(n_folds);
  result.fold_models.resize(n_folds);

  CountGrid truth_all(n_tested, n_genes);
  for (std::size_t r = 0; r < n_tested; ++r)
    for (std::size_t g = 0; g < n_genes; ++g)
      truth_all(r, g) = dataset[split.tested[r]].target_counts[g];

  parallel_for(static_cast<std::size_t>(n_folds), cfg.jobs, [&](std::size_t f) {
    std::vector<SampleRecord> train_set;
    std::vector<std::size_t> test_positions;  // positions within split.tested
    for (std::size_t r = 0; r < n_tested; ++r) {
      if (result.plan.fold_of[r] == static_cast<int>(f))
        test_positions.push_back(r);
      else
        train_set.push_back(dataset[split.tested[r]]);
    }
    if (test_positions.empty()) throw DataError("run_cv_slide: fold with no test samples");
    for (std::size_t i : split.shared_validation) train_set.push_back(dataset[i]);

    auto trained = train_slide(train_set, proto0, wref, cfg, result.plan.validation_ids);

    CountGrid truth(test_positions.size(), n_genes);
    Matrix pred(test_positions.size(), n_genes);
    for (std::size_t r = 0; r < test_positions.size(); ++r) {
      const auto& record = dataset[split.tested[test_positions[r]]];
      const auto trace = forward_slide(trained.best, record.features,
                                       static_cast<double>(record.total_count));
      for (std::size_t g = 0; g < n_genes; ++g) {
        pred(r, g) = trace.mu_bar[g];
        truth(r, g) = record.target_counts[g];
        result.pooled_predictions(test_positions[r], g) = trace.mu_bar[g];
      }
      for (std::size_t c = 0; c < proto0.n_types(); ++c)
        result.pooled_mean_weights(test_positions[r], c) = trace.mean_weight[c];
    }

    FoldResult fold;
    fold.fold = static_cast<int>(f);
    fold.report = evaluate(pred, truth, proto0.gene_ids);
    fold.best_epoch = trained.history.best_epoch;
    fold.best_val = trained.history.best_val;
    result.folds[f] = std::move(fold);
    result.fold_models[f] = std::move(trained.best);
  });

  result.pooled = evaluate(result.pooled_predictions, truth_all, proto0.gene_ids);
  aggregate_folds(result);
  return result;
}

CvResult run_cv_patch(const std::vector<PatchRecord>& dataset, const PrototypeMatrix& proto0,
                      const TrainConfig& cfg, const SplitPlan* explicit_plan) {
  cfg.validate();
  if (dataset.empty()) throw DataError("run_cv_patch: empty dataset");
  const std::size_t n_genes = proto0.n_genes();

  std::vector<std::string> slide_ids;
  for (const auto& record : dataset) slide_ids.push_back(record.features.slide_id);

  CvResult result;
  result.plan = explicit_plan ? *explicit_plan : assign_folds(slide_ids, cfg.folds, cfg.seed);
  if (explicit_plan) result.plan.validate();
  const CvSplit split = resolve_plan(result.plan, slide_ids);
  const std::size_t n_tested = split.tested.size();
  const int n_folds = result.plan.n_folds();

  // Spot rows of the tested slides, concatenated in plan order.
  std::vector<std::size_t> row_offset(n_tested + 1, 0);
  for (std::size_t r = 0; r < n_tested; ++r)
    row_offset[r + 1] = row_offset[r] + dataset[split.tested[r]].features.n_patches();
  const std::size_t total_spots = row_offset.back();
  result.pooled_predictions = Matrix(total_spots, n_genes, 0.0);
  result.folds.resize(n_folds);
  result.fold_models.resize(n_folds);

  CountGrid truth_all(total_spots, n_genes);
  for (std::size_t r = 0; r < n_tested; ++r) {
    const auto& spots = dataset[split.tested[r]].spot_counts;
    for (std::size_t s = 0; s < spots.rows(); ++s)
      for (std::size_t g = 0; g < n_genes; ++g) truth_all(row_offset[r] + s, g) = spots(s, g);
  }

  parallel_for(static_cast<std::size_t>(n_folds), cfg.jobs, [&](std::size_t f) {
    std::vector<PatchRecord> train_set;
    std::vector<std::size_t> test_positions;
    for (std::size_t r = 0; r < n_tested; ++r) {
      if (result.plan.fold_of[r] == static_cast<int>(f))
        test_positions.push_back(r);
      else
        train_set.push_back(dataset[split.tested[r]]);
    }
    if (test_positions.empty()) throw DataError("run_cv_patch: fold with no test samples");
    for (std::size_t i : split.shared_validation) train_set.push_back(dataset[i]);

    auto trained = train_patch(train_set, proto0, cfg, result.plan.validation_ids);

    std::size_t n_rows = 0;
    for (std::size_t r : test_positions) n_rows += dataset[split.tested[r]].features.n_patches();
    CountGrid truth(n_rows, n_genes);
    Matrix pred(n_rows, n_genes);
    std::size_t row = 0;
    for (std::size_t r : test_positions) {
      const auto& record = dataset[split.tested[r]];
      const auto trace = forward_patch(trained.best, record.features);
      for (std::size_t s = 0; s < trace.pred.rows(); ++s, ++row) {
        for (std::size_t g = 0; g < n_genes; ++g) {
          pred(row, g) = trace.pred(s, g);
          truth(row, g) = record.spot_counts(s, g);
          result.pooled_predictions(row_offset[r] + s, g) = trace.pred(s, g);
        }
      }
    }

    FoldResult fold;
    fold.fold = static_cast<int>(f);
    fold.report = evaluate(pred, truth, proto0.gene_ids);
    fold.best_epoch = trained.history.best_epoch;
    fold.best_val = trained.history.best_val;
    result.folds[f] = std::move(fold);
    result.fold_models[f] = std::move(trained.best);
  });

  result.pooled = evaluate(result.pooled_predictions, truth_all, proto0.gene_ids);
  aggregate_folds(result);
  return result;
}

ProportionMatrix export_mean_weights(const CpnnParameters& params,
                                     const std::vector<PatchFeatureSet>& features) {
  ProportionMatrix out;
  out.cell_type_names = params.cell_type_names;
  out.values = Matrix(features.size(), params.n_types());
  for (std::size_t i = 0; i < features.size(); ++i) {
    out.row_ids.push_back(features[i].slide_id);
    const Matrix weights =
        compute_weights(params.head, features[i], params.flags.head_activation);
    for (std::size_t c = 0; c < weights.cols(); ++c) {
      double acc = 0.0;
      for (std::size_t p = 0; p < weights.rows(); ++p) acc += weights(p, c);
      out.values(i, c) = acc / static_cast<double>(weights.rows());
    }
  }
  out.validate();
  return out;
}

}  // namespace cpnn
