#ifndef CPNN_LOSSES_HPP
#define CPNN_LOSSES_HPP

#include <vector>

#include "cpnn/grid.hpp"
#include "cpnn/model.hpp"

namespace cpnn {

struct LossConfig {
  double lambda = 1e3;          // slide-level regularization coefficient
  bool patch_log1p = true;      // log1p both tensors inside the patch loss
  double patch_lambda = 1.0;    // prototype-only regularization weight
  bool patch_corr_per_gene = false;  // correlate per gene across spots instead
};

struct LossParts {
  double total = 0.0;
  double nb = 0.0;
  double reg = 0.0;  // unweighted; total = nb + lambda * reg
};

/// Slide-level total loss over a mini-batch:
///   nb  = nb_nll_batch(targets, mubar, theta)
///   reg = |T0 - T|_F^2 + mean_n |W(n) - Wbar(n)|^2
/// Traces, target rows, and wref rows are index-aligned.
LossParts loss_slide(const std::vector<const ForwardTrace*>& traces, const CountGrid& targets,
                     const std::vector<double>& theta, const Matrix& wref, const Matrix& proto,
                     const Matrix& proto0, const LossConfig& cfg);

struct SlideLossGrads {
  LossParts parts;
  Matrix d_mu_bar;        // N_m x G, one row per trace
  Matrix d_mean_weight;   // N_m x C
  std::vector<double> d_theta;
  Matrix d_proto;         // direct regularizer pull on T (not chained)
};

SlideLossGrads loss_slide_grads(const std::vector<const ForwardTrace*>& traces,
                                const CountGrid& targets, const std::vector<double>& theta,
                                const Matrix& wref, const Matrix& proto, const Matrix& proto0,
                                const LossConfig& cfg);

struct PatchLossParts {
  double total = 0.0;
  double corr = 0.0;       // mean over evaluated spots of (1 - PCC)
  double proto_reg = 0.0;  // unweighted; total = corr + patch_lambda * proto_reg
  std::size_t n_evaluated = 0;
  std::size_t n_skipped = 0;  // zero-variance rows
};

/// Patch-level loss: per-spot (1 - Pearson across genes) of the transformed
/// prediction vs observation, plus prototype-only regularization. Spots with
/// zero variance on either side are skipped and counted. Throws when every
/// spot is skipped.
PatchLossParts loss_patch(const Matrix& pred, const CountGrid& obs, const Matrix& proto,
                          const Matrix& proto0, const LossConfig& cfg);

struct PatchLossGrads {
  PatchLossParts parts;
  Matrix d_pred;
  Matrix d_proto;  // direct pull on T from the prototype regularizer
};

PatchLossGrads loss_patch_grads(const Matrix& pred, const CountGrid& obs, const Matrix& proto,
                                const Matrix& proto0, const LossConfig& cfg);

}  // namespace cpnn

#endif
