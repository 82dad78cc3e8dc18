#include "cpnn/gradcheck.hpp"

#include <cmath>

#include "cpnn/losses.hpp"
#include "cpnn/mathutil.hpp"
#include "cpnn/rng.hpp"

namespace cpnn {

namespace {

struct Block {
  const char* name;
  std::size_t size;
  bool included;
};

std::vector<Block> blocks(const CpnnParameters& p) {
  return {
      {"head.w1", p.head.w1.size(), true},
      {"head.b1", p.head.b1.size(), true},
      {"head.w2", p.head.w2.size(), true},
      {"head.b2", p.head.b2.size(), true},
      {"correction.a", p.correction.a.size(), p.flags.modality_correction},
      {"correction.c", p.correction.c.size(), p.flags.modality_correction},
      {"rho", p.rho.size(), true},
      {"proto_free", p.proto_free.size(), p.flags.update_prototype},
  };
}

double* block_data(CpnnParameters& p, const char* name) {
  const std::string key(name);
  if (key == "head.w1") return p.head.w1.data().data();
  if (key == "head.b1") return p.head.b1.data();
  if (key == "head.w2") return p.head.w2.data().data();
  if (key == "head.b2") return p.head.b2.data();
  if (key == "correction.a") return p.correction.a.data();
  if (key == "correction.c") return p.correction.c.data();
  if (key == "rho") return p.rho.data();
  return p.proto_free.data().data();
}

const double* grad_block_data(const CpnnGrads& g, const char* name) {
  const std::string key(name);
  if (key == "head.w1") return g.w1.data().data();
  if (key == "head.b1") return g.b1.data();
  if (key == "head.w2") return g.w2.data().data();
  if (key == "head.b2") return g.b2.data();
  if (key == "correction.a") return g.a.data();
  if (key == "correction.c") return g.c.data();
  if (key == "rho") return g.rho.data();
  return g.proto_free.data().data();
}

PrototypeMatrix random_proto(Rng& rng, std::size_t n_types, std::size_t n_genes) {
  PrototypeMatrix proto;
  proto.values = Matrix(n_types, n_genes);
  for (std::size_t c = 0; c < n_types; ++c) {
    proto.cell_type_names.push_back("type_" + std::to_string(c));
    double total = 0.0;
    for (std::size_t g = 0; g < n_genes; ++g) {
      proto.values(c, g) = rng.lognormal(0.0, 0.8);
      total += proto.values(c, g);
    }
    for (std::size_t g = 0; g < n_genes; ++g) proto.values(c, g) /= total;
  }
  for (std::size_t g = 0; g < n_genes; ++g) proto.gene_ids.push_back("g_" + std::to_string(g));
  return proto;
}

PatchFeatureSet random_features(Rng& rng, const std::string& id, std::size_t n_patches,
                                std::size_t dim) {
  PatchFeatureSet fsx;
  fsx.slide_id = id;
  fsx.features = Matrix(n_patches, dim);
  for (auto& v : fsx.features.data()) v = rng.normal();
  for (std::size_t i = 0; i < n_patches; ++i) fsx.patch_ids.push_back("p_" + std::to_string(i));
  return fsx;
}

// Spread the free parameters away from their symmetric init so the check
// probes a generic point.
void jitter_params(Rng& rng, CpnnParameters& p) {
  for (auto& v : p.correction.a) v = rng.normal(0.0, 0.3);
  for (auto& v : p.correction.c) v = rng.normal(-2.0, 0.5);
  for (auto& v : p.rho) v = rng.normal(0.0, 0.3);
  for (auto& v : p.proto_free.data()) v += rng.normal(0.0, 0.2);
}

void chain_into_grads(const CpnnParameters& params, const std::vector<double>& d_theta,
                      const Matrix& d_proto, CpnnGrads& grads) {
  const auto theta = params.theta();
  for (std::size_t g = 0; g < theta.size(); ++g) grads.rho[g] += d_theta[g] * theta[g];
  if (params.flags.update_prototype)
    for (std::size_t i = 0; i < params.proto_free.size(); ++i)
      grads.proto_free.data()[i] += d_proto.data()[i] * sigmoid(params.proto_free.data()[i]);
}

}  // namespace

std::vector<double> flatten_params(const CpnnParameters& params) {
  std::vector<double> flat;
  CpnnParameters& p = const_cast<CpnnParameters&>(params);
  for (const auto& block : blocks(params)) {
    if (!block.included) continue;
    const double* data = block_data(p, block.name);
    flat.insert(flat.end(), data, data + block.size);
  }
  return flat;
}

void unflatten_params(const std::vector<double>& flat, CpnnParameters& params) {
  std::size_t offset = 0;
  for (const auto& block : blocks(params)) {
    if (!block.included) continue;
    double* data = block_data(params, block.name);
    for (std::size_t i = 0; i < block.size; ++i) data[i] = flat[offset + i];
    offset += block.size;
  }
  if (offset != flat.size())
    throw std::invalid_argument("unflatten_params: flat vector length mismatch");
}

std::vector<double> flatten_grads(const CpnnGrads& grads, const CpnnParameters& params) {
  std::vector<double> flat;
  for (const auto& block : blocks(params)) {
    if (!block.included) continue;
    const double* data = grad_block_data(grads, block.name);
    flat.insert(flat.end(), data, data + block.size);
  }
  return flat;
}

std::vector<std::string> param_coordinate_names(const CpnnParameters& params) {
  std::vector<std::string> names;
  for (const auto& block : blocks(params)) {
    if (!block.included) continue;
    for (std::size_t i = 0; i < block.size; ++i)
      names.push_back(std::string(block.name) + "[" + std::to_string(i) + "]");
  }
  return names;
}

GradCheckReport gradcheck_slide(std::uint64_t seed, double h, double tol) {
  constexpr std::size_t kSlides = 2, kPatches = 3, kTypes = 3, kGenes = 5, kDim = 4, kHidden = 3;
  Rng rng(seed);
  const auto proto0 = random_proto(rng, kTypes, kGenes);
  CpnnParameters params = init_cpnn(proto0, kDim, kHidden, AblationFlags{}, seed);
  jitter_params(rng, params);

  std::vector<PatchFeatureSet> features;
  CountGrid targets(kSlides, kGenes);
  std::vector<double> totals(kSlides, 0.0);
  Matrix wref(kSlides, kTypes);
  for (std::size_t n = 0; n < kSlides; ++n) {
    features.push_back(random_features(rng, "s_" + std::to_string(n), kPatches, kDim));
    for (std::size_t g = 0; g < kGenes; ++g) {
      targets(n, g) = static_cast<std::int64_t>(rng.below(20)) + (g == 0 ? 1 : 0);
      totals[n] += static_cast<double>(targets(n, g));
    }
    const auto ref = rng.dirichlet(1.0, kTypes);
    for (std::size_t c = 0; c < kTypes; ++c) wref(n, c) = ref[c];
  }

  LossConfig lcfg;
  lcfg.lambda = 3.0;

  auto loss_at = [&](const std::vector<double>& flat) {
    CpnnParameters probe = params;
    unflatten_params(flat, probe);
    std::vector<ForwardTrace> traces;
    std::vector<const ForwardTrace*> ptrs;
    for (std::size_t n = 0; n < kSlides; ++n)
      traces.push_back(forward_slide(probe, features[n], totals[n]));
    for (const auto& t : traces) ptrs.push_back(&t);
    return loss_slide(ptrs, targets, probe.theta(), wref, probe.prototype(), probe.proto_init,
                      lcfg)
        .total;
  };

  // Analytic gradient at the base point.
  std::vector<ForwardTrace> traces;
  std::vector<const ForwardTrace*> ptrs;
  for (std::size_t n = 0; n < kSlides; ++n)
    traces.push_back(forward_slide(params, features[n], totals[n]));
  for (const auto& t : traces) ptrs.push_back(&t);
  auto loss = loss_slide_grads(ptrs, targets, params.theta(), wref, params.prototype(),
                               params.proto_init, lcfg);
  CpnnGrads grads(params);
  for (std::size_t n = 0; n < kSlides; ++n) {
    std::vector<double> d_mu(loss.d_mu_bar.row(n), loss.d_mu_bar.row(n) + kGenes);
    std::vector<double> d_mw(loss.d_mean_weight.row(n), loss.d_mean_weight.row(n) + kTypes);
    backward_slide(params, features[n], traces[n], d_mu, d_mw, grads);
  }
  chain_into_grads(params, loss.d_theta, loss.d_proto, grads);

  return finite_diff_check(loss_at, flatten_params(params), flatten_grads(grads, params),
                           param_coordinate_names(params), h, tol);
}

GradCheckReport gradcheck_patch(std::uint64_t seed, double h, double tol) {
  constexpr std::size_t kPatches = 4, kTypes = 3, kGenes = 6, kDim = 5, kHidden = 4;
  Rng rng(seed);
  const auto proto0 = random_proto(rng, kTypes, kGenes);
  CpnnParameters params = init_cpnn(proto0, kDim, kHidden, AblationFlags{}, seed);
  jitter_params(rng, params);

  const auto features = random_features(rng, "s_0", kPatches, kDim);
  CountGrid obs(kPatches, kGenes);
  for (std::size_t i = 0; i < kPatches; ++i)
    for (std::size_t g = 0; g < kGenes; ++g)
      obs(i, g) = static_cast<std::int64_t>(rng.below(15)) + (g == 0 ? i + 1 : 0);

  LossConfig lcfg;
  lcfg.patch_log1p = true;
  lcfg.patch_lambda = 1.0;

  auto loss_at = [&](const std::vector<double>& flat) {
    CpnnParameters probe = params;
    unflatten_params(flat, probe);
    const auto trace = forward_patch(probe, features);
    return loss_patch(trace.pred, obs, probe.prototype(), probe.proto_init, lcfg).total;
  };

  const auto trace = forward_patch(params, features);
  auto loss = loss_patch_grads(trace.pred, obs, params.prototype(), params.proto_init, lcfg);
  CpnnGrads grads(params);
  backward_patch(params, features, trace, loss.d_pred, grads);
  const std::vector<double> no_theta(params.rho.size(), 0.0);
  chain_into_grads(params, no_theta, loss.d_proto, grads);

  return finite_diff_check(loss_at, flatten_params(params), flatten_grads(grads, params),
                           param_coordinate_names(params), h, tol);
}

}  // namespace cpnn
