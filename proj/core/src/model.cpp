#include "cpnn/model.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "cpnn/errors.hpp"
#include "cpnn/io.hpp"
#include "cpnn/mathutil.hpp"
#include "cpnn/nb.hpp"
#include "cpnn/rng.hpp"

namespace cpnn {

std::vector<double> CpnnParameters::alpha() const {
  std::vector<double> out(n_genes(), 1.0);
  if (flags.modality_correction)
    for (std::size_t g = 0; g < out.size(); ++g) out[g] = std::exp(correction.a[g]);
  return out;
}

std::vector<double> CpnnParameters::beta() const {
  std::vector<double> out(n_genes(), 0.0);
  if (flags.modality_correction)
    for (std::size_t g = 0; g < out.size(); ++g) out[g] = softplus(correction.c[g]);
  return out;
}

std::vector<double> CpnnParameters::theta() const {
  std::vector<double> out(n_genes());
  for (std::size_t g = 0; g < out.size(); ++g) out[g] = std::exp(rho[g]);
  return out;
}

Matrix CpnnParameters::prototype() const {
  Matrix out(proto_free.rows(), proto_free.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = softplus(proto_free.data()[i]);
  return out;
}

CpnnParameters init_cpnn(const PrototypeMatrix& proto0, std::size_t feature_dim,
                         std::size_t hidden_dim, const AblationFlags& flags, std::uint64_t seed) {
  const std::size_t n_types = proto0.n_types();
  const std::size_t n_genes = proto0.n_genes();
  if (n_types == 0 || n_genes == 0) throw DataError("init_cpnn: empty prototype");
  if (hidden_dim == 0) hidden_dim = feature_dim;

  CpnnParameters p;
  p.flags = flags;
  p.seed = seed;
  p.gene_ids = proto0.gene_ids;
  p.cell_type_names = proto0.cell_type_names;
  p.proto_init = proto0.values;

  Rng rng(seed);
  auto uniform_init = [&](Matrix& w, std::vector<double>& bias, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : w.data()) v = rng.uniform(-bound, bound);
    for (auto& v : bias) v = rng.uniform(-bound, bound);
  };
  p.head.w1 = Matrix(hidden_dim, feature_dim);
  p.head.b1.assign(hidden_dim, 0.0);
  p.head.w2 = Matrix(n_types, hidden_dim);
  p.head.b2.assign(n_types, 0.0);
  uniform_init(p.head.w1, p.head.b1, feature_dim);
  uniform_init(p.head.w2, p.head.b2, hidden_dim);

  p.correction.a.assign(n_genes, 0.0);
  p.correction.c.assign(n_genes, inv_softplus(1e-6));
  p.rho.assign(n_genes, 0.0);

  p.proto_free = Matrix(n_types, n_genes);
  if (flags.prototype_init) {
    for (std::size_t i = 0; i < p.proto_free.size(); ++i)
      p.proto_free.data()[i] = inv_softplus(std::max(proto0.values.data()[i], 1e-8));
  } else {
    // Entries around 1/G without any prototype information.
    const double lo = inv_softplus(0.1 / static_cast<double>(n_genes));
    const double hi = inv_softplus(10.0 / static_cast<double>(n_genes));
    for (std::size_t i = 0; i < p.proto_free.size(); ++i)
      p.proto_free.data()[i] = rng.uniform(lo, hi);
  }
  return p;
}

CpnnGrads::CpnnGrads(const CpnnParameters& p)
    : w1(p.head.w1.rows(), p.head.w1.cols()),
      b1(p.head.b1.size(), 0.0),
      w2(p.head.w2.rows(), p.head.w2.cols()),
      b2(p.head.b2.size(), 0.0),
      a(p.correction.a.size(), 0.0),
      c(p.correction.c.size(), 0.0),
      rho(p.rho.size(), 0.0),
      proto_free(p.proto_free.rows(), p.proto_free.cols()) {}

void CpnnGrads::zero() {
  w1.fill(0.0);
  std::fill(b1.begin(), b1.end(), 0.0);
  w2.fill(0.0);
  std::fill(b2.begin(), b2.end(), 0.0);
  std::fill(a.begin(), a.end(), 0.0);
  std::fill(c.begin(), c.end(), 0.0);
  std::fill(rho.begin(), rho.end(), 0.0);
  proto_free.fill(0.0);
}

namespace {

struct HeadCache {
  Matrix z1;
  Matrix act;
  Matrix weights;
};

HeadCache head_forward(const WeightHead& head, const PatchFeatureSet& features,
                       bool use_activation) {
  const std::size_t n_patches = features.n_patches();
  const std::size_t dim = features.dim();
  const std::size_t hidden = head.w1.rows();
  const std::size_t n_types = head.w2.rows();
  if (head.w1.cols() != dim)
    throw DataError("weight head expects feature dim " + std::to_string(head.w1.cols()) +
                    ", got " + std::to_string(dim));

  HeadCache cache;
  cache.z1 = Matrix(n_patches, hidden);
  cache.act = Matrix(n_patches, hidden);
  cache.weights = Matrix(n_patches, n_types);
  for (std::size_t i = 0; i < n_patches; ++i) {
    const double* h = features.features.row(i);
    double* z1 = cache.z1.row(i);
    double* act = cache.act.row(i);
    for (std::size_t j = 0; j < hidden; ++j) {
      const double* w_row = head.w1.row(j);
      double acc = head.b1[j];
      for (std::size_t d = 0; d < dim; ++d) acc += w_row[d] * h[d];
      z1[j] = acc;
      act[j] = use_activation ? gelu(acc) : acc;
    }
    double* logits = cache.weights.row(i);
    for (std::size_t cix = 0; cix < n_types; ++cix) {
      const double* w_row = head.w2.row(cix);
      double acc = head.b2[cix];
      for (std::size_t j = 0; j < hidden; ++j) acc += w_row[j] * act[j];
      logits[cix] = acc;
    }
    softmax_row(logits, n_types);
  }
  return cache;
}

// dL/dlogits -> parameter and nothing else; shared by both backward passes.
void head_backward(const WeightHead& head, const PatchFeatureSet& features, const Matrix& z1,
                   const Matrix& act, const Matrix& weights, const Matrix& d_weights,
                   bool use_activation, CpnnGrads& grads) {
  const std::size_t n_patches = features.n_patches();
  const std::size_t dim = features.dim();
  const std::size_t hidden = head.w1.rows();
  const std::size_t n_types = head.w2.rows();

  std::vector<double> d_logits(n_types), d_act(hidden);
  for (std::size_t i = 0; i < n_patches; ++i) {
    const double* w = weights.row(i);
    const double* dw = d_weights.row(i);
    double dot = 0.0;
    for (std::size_t cix = 0; cix < n_types; ++cix) dot += dw[cix] * w[cix];
    for (std::size_t cix = 0; cix < n_types; ++cix) d_logits[cix] = w[cix] * (dw[cix] - dot);

    const double* act_row = act.row(i);
    std::fill(d_act.begin(), d_act.end(), 0.0);
    for (std::size_t cix = 0; cix < n_types; ++cix) {
      const double dl = d_logits[cix];
      grads.b2[cix] += dl;
      double* gw2 = grads.w2.row(cix);
      const double* w2_row = head.w2.row(cix);
      for (std::size_t j = 0; j < hidden; ++j) {
        gw2[j] += dl * act_row[j];
        d_act[j] += dl * w2_row[j];
      }
    }

    const double* z1_row = z1.row(i);
    const double* h = features.features.row(i);
    for (std::size_t j = 0; j < hidden; ++j) {
      const double dz = use_activation ? d_act[j] * gelu_grad(z1_row[j]) : d_act[j];
      grads.b1[j] += dz;
      double* gw1 = grads.w1.row(j);
      for (std::size_t d = 0; d < dim; ++d) gw1[d] += dz * h[d];
    }
  }
}

}  // namespace

Matrix compute_weights(const WeightHead& head, const PatchFeatureSet& features,
                       bool use_activation) {
  return head_forward(head, features, use_activation).weights;
}

ForwardTrace forward_slide(const CpnnParameters& params, const PatchFeatureSet& features,
                           double l) {
  if (!(l > 0.0) || !std::isfinite(l))
    throw DataError("forward_slide: total count must be positive and finite");
  const std::size_t n_types = params.n_types();
  const std::size_t n_genes = params.n_genes();

  ForwardTrace trace;
  trace.l = l;
  auto cache = head_forward(params.head, features, params.flags.head_activation);
  trace.z1 = std::move(cache.z1);
  trace.act = std::move(cache.act);
  trace.weights = std::move(cache.weights);

  const std::size_t n_patches = features.n_patches();
  trace.patch_sum.assign(n_types, 0.0);
  for (std::size_t i = 0; i < n_patches; ++i)
    for (std::size_t cix = 0; cix < n_types; ++cix)
      trace.patch_sum[cix] += trace.weights(i, cix);
  trace.mean_weight.resize(n_types);
  for (std::size_t cix = 0; cix < n_types; ++cix)
    trace.mean_weight[cix] = trace.patch_sum[cix] / static_cast<double>(n_patches);

  const Matrix proto = params.prototype();
  trace.mix.assign(n_genes, 0.0);
  for (std::size_t cix = 0; cix < n_types; ++cix) {
    const double sc = trace.patch_sum[cix];
    const double* row = proto.row(cix);
    for (std::size_t g = 0; g < n_genes; ++g) trace.mix[g] += sc * row[g];
  }

  const auto alpha = params.alpha();
  const auto beta = params.beta();
  trace.mu.resize(n_genes);
  trace.clamped.assign(n_genes, false);
  double total = 0.0;
  for (std::size_t g = 0; g < n_genes; ++g) {
    const double pre = alpha[g] * trace.mix[g] + beta[g];
    trace.clamped[g] = pre < kMeanFloor;
    trace.mu[g] = trace.clamped[g] ? kMeanFloor : pre;
    total += trace.mu[g];
  }
  if (!std::isfinite(total) || !(total > 0.0))
    throw NumericError("forward_slide: non-finite or non-positive mean total");
  trace.total_mu = total;

  trace.mu_bar.resize(n_genes);
  for (std::size_t g = 0; g < n_genes; ++g) trace.mu_bar[g] = l * trace.mu[g] / total;
  return trace;
}

PatchTrace forward_patch(const CpnnParameters& params, const PatchFeatureSet& features) {
  const std::size_t n_types = params.n_types();
  const std::size_t n_genes = params.n_genes();
  const std::size_t n_patches = features.n_patches();

  PatchTrace trace;
  auto cache = head_forward(params.head, features, params.flags.head_activation);
  trace.z1 = std::move(cache.z1);
  trace.act = std::move(cache.act);
  trace.weights = std::move(cache.weights);

  const Matrix proto = params.prototype();
  const auto alpha = params.alpha();
  const auto beta = params.beta();

  trace.mix = Matrix(n_patches, n_genes, 0.0);
  trace.pred = Matrix(n_patches, n_genes);
  trace.clamped = Matrix(n_patches, n_genes, 0.0);
  for (std::size_t i = 0; i < n_patches; ++i) {
    double* mix = trace.mix.row(i);
    for (std::size_t cix = 0; cix < n_types; ++cix) {
      const double wc = trace.weights(i, cix);
      const double* row = proto.row(cix);
      for (std::size_t g = 0; g < n_genes; ++g) mix[g] += wc * row[g];
    }
    double* pred = trace.pred.row(i);
    double* clamped = trace.clamped.row(i);
    for (std::size_t g = 0; g < n_genes; ++g) {
      const double pre = alpha[g] * mix[g] + beta[g];
      clamped[g] = pre < 0.0 ? 1.0 : 0.0;
      pred[g] = pre < 0.0 ? 0.0 : pre;
      if (!std::isfinite(pred[g])) throw NumericError("forward_patch: non-finite prediction");
    }
  }
  return trace;
}

void backward_slide(const CpnnParameters& params, const PatchFeatureSet& features,
                    const ForwardTrace& trace, const std::vector<double>& d_mu_bar,
                    const std::vector<double>& d_mean_weight, CpnnGrads& grads) {
  const std::size_t n_types = params.n_types();
  const std::size_t n_genes = params.n_genes();
  const std::size_t n_patches = features.n_patches();
  if (d_mu_bar.size() != n_genes || trace.mu_bar.size() != n_genes ||
      trace.weights.rows() != n_patches)
    throw std::invalid_argument("backward_slide: stale trace (shape mismatch)");

  // Quotient rule through mubar = l * mu / total.
  const double total = trace.total_mu;
  double dot = 0.0;
  for (std::size_t g = 0; g < n_genes; ++g) dot += d_mu_bar[g] * trace.mu[g];
  std::vector<double> d_mix(n_genes);
  const auto alpha = params.alpha();
  const bool mc = params.flags.modality_correction;
  for (std::size_t g = 0; g < n_genes; ++g) {
    const double d_mu = (trace.l / total) * (d_mu_bar[g] - dot / total);
    const double d_pre = trace.clamped[g] ? 0.0 : d_mu;
    if (mc) {
      grads.a[g] += d_pre * trace.mix[g] * alpha[g];
      grads.c[g] += d_pre * sigmoid(params.correction.c[g]);
    }
    d_mix[g] = d_pre * alpha[g];
  }

  const Matrix proto = params.prototype();
  std::vector<double> d_patch_sum(n_types, 0.0);
  for (std::size_t cix = 0; cix < n_types; ++cix) {
    const double sc = trace.patch_sum[cix];
    const double* row = proto.row(cix);
    const double* free_row = params.proto_free.row(cix);
    double* gproto = grads.proto_free.row(cix);
    double acc = 0.0;
    for (std::size_t g = 0; g < n_genes; ++g) {
      acc += d_mix[g] * row[g];
      if (params.flags.update_prototype) gproto[g] += d_mix[g] * sc * sigmoid(free_row[g]);
    }
    d_patch_sum[cix] = acc;
  }

  // Identical dL/dw row for every patch: the mixture sees only column sums,
  // and the mean-weight pull is 1/N_p per patch.
  std::vector<double> dw_row(n_types);
  for (std::size_t cix = 0; cix < n_types; ++cix) {
    dw_row[cix] = d_patch_sum[cix];
    if (!d_mean_weight.empty()) dw_row[cix] += d_mean_weight[cix] / static_cast<double>(n_patches);
  }
  Matrix d_weights(n_patches, n_types);
  for (std::size_t i = 0; i < n_patches; ++i)
    for (std::size_t cix = 0; cix < n_types; ++cix) d_weights(i, cix) = dw_row[cix];

  head_backward(params.head, features, trace.z1, trace.act, trace.weights, d_weights,
                params.flags.head_activation, grads);
}

void backward_patch(const CpnnParameters& params, const PatchFeatureSet& features,
                    const PatchTrace& trace, const Matrix& d_pred, CpnnGrads& grads) {
  const std::size_t n_types = params.n_types();
  const std::size_t n_genes = params.n_genes();
  const std::size_t n_patches = features.n_patches();
  if (d_pred.rows() != n_patches || d_pred.cols() != n_genes ||
      trace.weights.rows() != n_patches)
    throw std::invalid_argument("backward_patch: stale trace (shape mismatch)");

  const Matrix proto = params.prototype();
  const auto alpha = params.alpha();
  const bool mc = params.flags.modality_correction;

  Matrix d_weights(n_patches, n_types, 0.0);
  std::vector<double> d_mix(n_genes);
  for (std::size_t i = 0; i < n_patches; ++i) {
    const double* dp = d_pred.row(i);
    const double* clamped = trace.clamped.row(i);
    const double* mix = trace.mix.row(i);
    for (std::size_t g = 0; g < n_genes; ++g) {
      const double d_pre = clamped[g] > 0.0 ? 0.0 : dp[g];
      if (mc) {
        grads.a[g] += d_pre * mix[g] * alpha[g];
        grads.c[g] += d_pre * sigmoid(params.correction.c[g]);
      }
      d_mix[g] = d_pre * alpha[g];
    }
    double* dwr = d_weights.row(i);
    for (std::size_t cix = 0; cix < n_types; ++cix) {
      const double wc = trace.weights(i, cix);
      const double* row = proto.row(cix);
      const double* free_row = params.proto_free.row(cix);
      double* gproto = grads.proto_free.row(cix);
      double acc = 0.0;
      for (std::size_t g = 0; g < n_genes; ++g) {
        acc += d_mix[g] * row[g];
        if (params.flags.update_prototype) gproto[g] += d_mix[g] * wc * sigmoid(free_row[g]);
      }
      dwr[cix] = acc;
    }
  }

  head_backward(params.head, features, trace.z1, trace.act, trace.weights, d_weights,
                params.flags.head_activation, grads);
}

namespace {

void dump_array(std::ofstream& out, const char* name, const double* values, std::size_t n,
                bool last = false) {
  out << "    \"" << name << "\": [";
  for (std::size_t i = 0; i < n; ++i) {
    if (i) out << ',';
    out << format_double(values[i]);
  }
  out << (last ? "]\n" : "],\n");
}

}  // namespace

void save_checkpoint(const CpnnParameters& params, const std::string& path,
                     const std::string& timestamp) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");

  nlohmann::json meta;
  meta["n_types"] = params.n_types();
  meta["n_genes"] = params.n_genes();
  meta["feature_dim"] = params.feature_dim();
  meta["hidden_dim"] = params.hidden_dim();
  meta["gene_ids"] = params.gene_ids;
  meta["cell_type_names"] = params.cell_type_names;
  meta["flags"] = {{"prototype_init", params.flags.prototype_init},
                   {"modality_correction", params.flags.modality_correction},
                   {"update_prototype", params.flags.update_prototype},
                   {"regularization", params.flags.regularization},
                   {"head_activation", params.flags.head_activation}};
  meta["seed"] = params.seed;
  if (!timestamp.empty()) meta["timestamp"] = timestamp;

  // Arrays are written by hand so every value carries 17 significant digits.
  out << "{\n  \"format\": \"cpnn-checkpoint\",\n  \"version\": 1,\n";
  out << "  \"meta\": " << meta.dump() << ",\n";
  out << "  \"tensors\": {\n";
  dump_array(out, "head.w1", params.head.w1.data().data(), params.head.w1.size());
  dump_array(out, "head.b1", params.head.b1.data(), params.head.b1.size());
  dump_array(out, "head.w2", params.head.w2.data().data(), params.head.w2.size());
  dump_array(out, "head.b2", params.head.b2.data(), params.head.b2.size());
  dump_array(out, "correction.a", params.correction.a.data(), params.correction.a.size());
  dump_array(out, "correction.c", params.correction.c.data(), params.correction.c.size());
  dump_array(out, "rho", params.rho.data(), params.rho.size());
  dump_array(out, "proto_free", params.proto_free.data().data(), params.proto_free.size());
  dump_array(out, "proto_init", params.proto_init.data().data(), params.proto_init.size(), true);
  out << "  }\n}\n";
}

CpnnParameters load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "' for reading");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  if (j.value("format", "") != "cpnn-checkpoint")
    throw DataError(path + ": not a cpnn checkpoint");

  const auto& meta = j.at("meta");
  CpnnParameters p;
  const std::size_t n_types = meta.at("n_types").get<std::size_t>();
  const std::size_t n_genes = meta.at("n_genes").get<std::size_t>();
  const std::size_t dim = meta.at("feature_dim").get<std::size_t>();
  const std::size_t hidden = meta.at("hidden_dim").get<std::size_t>();
  p.gene_ids = meta.at("gene_ids").get<std::vector<std::string>>();
  p.cell_type_names = meta.at("cell_type_names").get<std::vector<std::string>>();
  const auto& flags = meta.at("flags");
  p.flags.prototype_init = flags.at("prototype_init").get<bool>();
  p.flags.modality_correction = flags.at("modality_correction").get<bool>();
  p.flags.update_prototype = flags.at("update_prototype").get<bool>();
  p.flags.regularization = flags.at("regularization").get<bool>();
  p.flags.head_activation = flags.at("head_activation").get<bool>();
  p.seed = meta.at("seed").get<std::uint64_t>();
  if (p.gene_ids.size() != n_genes || p.cell_type_names.size() != n_types)
    throw DataError(path + ": meta id lists do not match declared dims");

  const auto& tensors = j.at("tensors");
  auto fetch = [&](const char* name, std::size_t expected) {
    auto v = tensors.at(name).get<std::vector<double>>();
    if (v.size() != expected)
      throw DataError(path + ": tensor '" + name + "' has " + std::to_string(v.size()) +
                      " values, expected " + std::to_string(expected));
    return v;
  };
  p.head.w1 = Matrix(hidden, dim);
  p.head.w1.data() = fetch("head.w1", hidden * dim);
  p.head.b1 = fetch("head.b1", hidden);
  p.head.w2 = Matrix(n_types, hidden);
  p.head.w2.data() = fetch("head.w2", n_types * hidden);
  p.head.b2 = fetch("head.b2", n_types);
  p.correction.a = fetch("correction.a", n_genes);
  p.correction.c = fetch("correction.c", n_genes);
  p.rho = fetch("rho", n_genes);
  p.proto_free = Matrix(n_types, n_genes);
  p.proto_free.data() = fetch("proto_free", n_types * n_genes);
  p.proto_init = Matrix(n_types, n_genes);
  p.proto_init.data() = fetch("proto_init", n_types * n_genes);
  return p;
}

}  // namespace cpnn
