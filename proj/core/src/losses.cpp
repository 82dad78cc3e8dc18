#include "cpnn/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "cpnn/errors.hpp"
#include "cpnn/nb.hpp"

namespace cpnn {

namespace {

double proto_residual_sq(const Matrix& proto, const Matrix& proto0) {
  if (!proto.same_shape(proto0))
    throw std::invalid_argument("regularizer: prototype shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < proto.size(); ++i) {
    const double d = proto0.data()[i] - proto.data()[i];
    acc += d * d;
  }
  return acc;
}

Matrix gather_mu(const std::vector<const ForwardTrace*>& traces, std::size_t n_genes) {
  Matrix mu(traces.size(), n_genes);
  for (std::size_t n = 0; n < traces.size(); ++n) {
    if (traces[n]->mu_bar.size() != n_genes)
      throw std::invalid_argument("loss_slide: trace gene dim mismatch");
    for (std::size_t g = 0; g < n_genes; ++g) mu(n, g) = traces[n]->mu_bar[g];
  }
  return mu;
}

double weight_residual_sq(const std::vector<const ForwardTrace*>& traces, const Matrix& wref) {
  const std::size_t n_types = wref.cols();
  double acc = 0.0;
  for (std::size_t n = 0; n < traces.size(); ++n) {
    if (traces[n]->mean_weight.size() != n_types)
      throw std::invalid_argument("loss_slide: wref cell-type dim mismatch");
    for (std::size_t c = 0; c < n_types; ++c) {
      const double d = wref(n, c) - traces[n]->mean_weight[c];
      acc += d * d;
    }
  }
  return acc / static_cast<double>(traces.size());
}

}  // namespace

LossParts loss_slide(const std::vector<const ForwardTrace*>& traces, const CountGrid& targets,
                     const std::vector<double>& theta, const Matrix& wref, const Matrix& proto,
                     const Matrix& proto0, const LossConfig& cfg) {
  if (traces.empty()) throw std::invalid_argument("loss_slide: empty batch");
  if (targets.rows() != traces.size() || wref.rows() != traces.size())
    throw std::invalid_argument("loss_slide: batch row mismatch");

  LossParts parts;
  const Matrix mu = gather_mu(traces, targets.cols());
  parts.nb = nb_nll_batch(targets, mu, theta);
  parts.reg = proto_residual_sq(proto, proto0) + weight_residual_sq(traces, wref);
  parts.total = parts.nb + cfg.lambda * parts.reg;
  return parts;
}

SlideLossGrads loss_slide_grads(const std::vector<const ForwardTrace*>& traces,
                                const CountGrid& targets, const std::vector<double>& theta,
                                const Matrix& wref, const Matrix& proto, const Matrix& proto0,
                                const LossConfig& cfg) {
  if (traces.empty()) throw std::invalid_argument("loss_slide_grads: empty batch");
  if (targets.rows() != traces.size() || wref.rows() != traces.size())
    throw std::invalid_argument("loss_slide_grads: batch row mismatch");
  const std::size_t n_batch = traces.size();
  const std::size_t n_genes = targets.cols();
  const std::size_t n_types = wref.cols();

  SlideLossGrads out;
  const Matrix mu = gather_mu(traces, n_genes);
  out.parts.nb = nb_nll_batch(targets, mu, theta);
  auto nb_grads = nb_nll_grads(targets, mu, theta);
  out.d_mu_bar = std::move(nb_grads.d_mu);
  out.d_theta = std::move(nb_grads.d_theta);

  out.parts.reg = proto_residual_sq(proto, proto0) + weight_residual_sq(traces, wref);
  out.parts.total = out.parts.nb + cfg.lambda * out.parts.reg;

  out.d_mean_weight = Matrix(n_batch, n_types);
  const double w_scale = 2.0 * cfg.lambda / static_cast<double>(n_batch);
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t c = 0; c < n_types; ++c)
      out.d_mean_weight(n, c) = w_scale * (traces[n]->mean_weight[c] - wref(n, c));

  out.d_proto = Matrix(proto.rows(), proto.cols());
  for (std::size_t i = 0; i < proto.size(); ++i)
    out.d_proto.data()[i] = 2.0 * cfg.lambda * (proto.data()[i] - proto0.data()[i]);
  return out;
}

namespace {

// Shared by value and gradient paths. Computes the mean (1 - PCC) over
// series (spot rows, or gene columns when per_gene), optionally writing
// dL/dpred. A series is skipped when either side has zero variance.
PatchLossParts patch_corr_impl(const Matrix& pred, const CountGrid& obs, const LossConfig& cfg,
                               Matrix* d_pred) {
  if (pred.rows() != obs.rows() || pred.cols() != obs.cols())
    throw std::invalid_argument("loss_patch: pred/obs shape mismatch");
  const std::size_t n_series = cfg.patch_corr_per_gene ? pred.cols() : pred.rows();
  const std::size_t len = cfg.patch_corr_per_gene ? pred.rows() : pred.cols();
  if (len < 2) throw std::invalid_argument("loss_patch: series too short");

  auto pred_at = [&](std::size_t s, std::size_t e) {
    return cfg.patch_corr_per_gene ? pred(e, s) : pred(s, e);
  };
  auto obs_at = [&](std::size_t s, std::size_t e) {
    return static_cast<double>(cfg.patch_corr_per_gene ? obs(e, s) : obs(s, e));
  };

  PatchLossParts parts;
  std::vector<double> a(len), b(len);
  std::vector<std::size_t> kept;
  std::vector<double> da(len);
  // First pass records which series count; the mean needs the final count
  // before gradients can be scaled, so gradients are scaled afterwards.
  std::vector<std::vector<double>> raw_grads;
  for (std::size_t s = 0; s < n_series; ++s) {
    double ma = 0.0, mb = 0.0;
    for (std::size_t e = 0; e < len; ++e) {
      a[e] = cfg.patch_log1p ? std::log1p(pred_at(s, e)) : pred_at(s, e);
      b[e] = cfg.patch_log1p ? std::log1p(obs_at(s, e)) : obs_at(s, e);
      ma += a[e];
      mb += b[e];
    }
    ma /= static_cast<double>(len);
    mb /= static_cast<double>(len);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t e = 0; e < len; ++e) {
      a[e] -= ma;
      b[e] -= mb;
      sab += a[e] * b[e];
      saa += a[e] * a[e];
      sbb += b[e] * b[e];
    }
    if (saa <= 0.0 || sbb <= 0.0) {
      ++parts.n_skipped;
      continue;
    }
    const double norm = std::sqrt(saa * sbb);
    const double r = sab / norm;
    parts.corr += 1.0 - r;
    kept.push_back(s);
    if (d_pred) {
      // d(1-r)/da_e = -(b~_e / norm - r a~_e / saa); centering needs no
      // extra projection because both residuals already sum to zero.
      for (std::size_t e = 0; e < len; ++e) da[e] = -(b[e] / norm - r * a[e] / saa);
      raw_grads.push_back(da);
    }
  }
  if (kept.empty()) throw NumericError("loss_patch: every spot has zero variance");
  parts.n_evaluated = kept.size();
  parts.corr /= static_cast<double>(parts.n_evaluated);

  if (d_pred) {
    *d_pred = Matrix(pred.rows(), pred.cols(), 0.0);
    const double inv = 1.0 / static_cast<double>(parts.n_evaluated);
    for (std::size_t idx = 0; idx < kept.size(); ++idx) {
      const std::size_t s = kept[idx];
      for (std::size_t e = 0; e < len; ++e) {
        double grad = inv * raw_grads[idx][e];
        if (cfg.patch_log1p) grad /= 1.0 + pred_at(s, e);
        if (cfg.patch_corr_per_gene)
          (*d_pred)(e, s) = grad;
        else
          (*d_pred)(s, e) = grad;
      }
    }
  }
  return parts;
}

}  // namespace

PatchLossParts loss_patch(const Matrix& pred, const CountGrid& obs, const Matrix& proto,
                          const Matrix& proto0, const LossConfig& cfg) {
  PatchLossParts parts = patch_corr_impl(pred, obs, cfg, nullptr);
  parts.proto_reg = proto_residual_sq(proto, proto0);
  parts.total = parts.corr + cfg.patch_lambda * parts.proto_reg;
  return parts;
}

PatchLossGrads loss_patch_grads(const Matrix& pred, const CountGrid& obs, const Matrix& proto,
                                const Matrix& proto0, const LossConfig& cfg) {
  PatchLossGrads out;
  out.parts = patch_corr_impl(pred, obs, cfg, &out.d_pred);
  out.parts.proto_reg = proto_residual_sq(proto, proto0);
  out.parts.total = out.parts.corr + cfg.patch_lambda * out.parts.proto_reg;
  out.d_proto = Matrix(proto.rows(), proto.cols());
  for (std::size_t i = 0; i < proto.size(); ++i)
    out.d_proto.data()[i] = 2.0 * cfg.patch_lambda * (proto.data()[i] - proto0.data()[i]);
  return out;
}

}  // namespace cpnn
