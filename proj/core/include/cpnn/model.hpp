#ifndef CPNN_MODEL_HPP
#define CPNN_MODEL_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "cpnn/data.hpp"
#include "cpnn/grid.hpp"
#include "cpnn/prototype.hpp"

namespace cpnn {

/// Table-2 style switches.
///   prototype_init     (PI) initialize the trainable prototype from T^0
///   modality_correction(MC) learn per-gene scale alpha and shift beta
///   update_prototype   (U)  let the prototype tensor train
///   regularization     (R)  apply the consistency regularizer (lambda > 0)
/// head_activation drops the GELU between the two linear layers when false.
struct AblationFlags {
  bool prototype_init = true;
  bool modality_correction = true;
  bool update_prototype = true;
  bool regularization = true;
  bool head_activation = true;
};

/// Two linear layers; weights row-major.
struct WeightHead {
  Matrix w1;               // H x D
  std::vector<double> b1;  // H
  Matrix w2;               // C x H
  std::vector<double> b2;  // C
};

/// Free per-gene correction parameters: alpha = exp(a), beta = softplus(c).
struct ModalityCorrection {
  std::vector<double> a;
  std::vector<double> c;
};

/// All trainable state of the CPNN plus the frozen initial prototype.
struct CpnnParameters {
  WeightHead head;
  ModalityCorrection correction;
  std::vector<double> rho;  // theta_b = exp(rho)
  Matrix proto_free;        // T = softplus(proto_free), C x G
  Matrix proto_init;        // T^0, frozen, rows sum to 1
  AblationFlags flags;
  std::vector<std::string> gene_ids;
  std::vector<std::string> cell_type_names;
  std::uint64_t seed = 0;

  std::size_t n_types() const { return proto_free.rows(); }
  std::size_t n_genes() const { return proto_free.cols(); }
  std::size_t feature_dim() const { return head.w1.cols(); }
  std::size_t hidden_dim() const { return head.w1.rows(); }

  /// Effective (constrained) tensors.
  std::vector<double> alpha() const;  // all-ones when MC is off
  std::vector<double> beta() const;   // all-zeros when MC is off
  std::vector<double> theta() const;
  Matrix prototype() const;
};

/// Head init uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)] from the seed;
/// prototype init from T^0 (PI) or uniform free values giving entries near
/// 1/G (no PI); a = 0, softplus(c) ~ 1e-6, rho = 0.
CpnnParameters init_cpnn(const PrototypeMatrix& proto0, std::size_t feature_dim,
                         std::size_t hidden_dim, const AblationFlags& flags, std::uint64_t seed);

/// Gradient buffers mirroring the free parameters.
struct CpnnGrads {
  Matrix w1;
  std::vector<double> b1;
  Matrix w2;
  std::vector<double> b2;
  std::vector<double> a;
  std::vector<double> c;
  std::vector<double> rho;
  Matrix proto_free;

  explicit CpnnGrads(const CpnnParameters& p);
  void zero();
};

/// Everything the backward pass needs from one slide-level forward.
struct ForwardTrace {
  Matrix z1;                         // N_p x H, pre-activation
  Matrix act;                        // N_p x H
  Matrix weights;                    // N_p x C, simplex rows
  std::vector<double> patch_sum;     // S_c = sum_i weights(i, c)
  std::vector<double> mean_weight;   // S / N_p
  std::vector<double> mix;           // m_g = sum_c S_c T_{c,g}
  std::vector<double> mu;            // alpha * m + beta, floored at 1e-8
  std::vector<bool> clamped;         // where the floor bound
  double total_mu = 0.0;             // sum_g mu_g
  std::vector<double> mu_bar;        // l * mu / total_mu
  double l = 0.0;
};

/// Patch-level forward cache: per-patch mixtures and clamped predictions.
struct PatchTrace {
  Matrix z1;
  Matrix act;
  Matrix weights;
  Matrix mix;        // N_p x G
  Matrix pred;       // alpha * mix + beta, floored at 0
  Matrix clamped;    // 1.0 where the floor bound
};

/// softmax(W2 act(W1 h + b1) + b2) per patch; rows on the simplex.
Matrix compute_weights(const WeightHead& head, const PatchFeatureSet& features,
                       bool use_activation = true);

/// Slide-level forward:
///   mu_g   = alpha_g sum_i sum_c w(x_i)_c T_{c,g} + beta_g   (floored at 1e-8)
///   mubar_g = l * mu_g / sum_g' mu_g'
ForwardTrace forward_slide(const CpnnParameters& params, const PatchFeatureSet& features,
                           double l);

/// Patch-level forward: pred_{i,g} = alpha_g sum_c w(x_i)_c T_{c,g} + beta_g,
/// floored at 0.
PatchTrace forward_patch(const CpnnParameters& params, const PatchFeatureSet& features);

/// Backprop through forward_slide. d_mean_weight (dL/dWbar, may be empty)
/// carries the regularizer's direct pull on the mean weights. Gradients
/// accumulate; frozen tensors (flags) receive none.
void backward_slide(const CpnnParameters& params, const PatchFeatureSet& features,
                    const ForwardTrace& trace, const std::vector<double>& d_mu_bar,
                    const std::vector<double>& d_mean_weight, CpnnGrads& grads);

/// Backprop through forward_patch given dL/dpred.
void backward_patch(const CpnnParameters& params, const PatchFeatureSet& features,
                    const PatchTrace& trace, const Matrix& d_pred, CpnnGrads& grads);

/// Checkpoint: one JSON document with a meta object and flat parameter
/// arrays (17 significant digits) in a fixed order. `timestamp` empty means
/// no timestamp field is written.
void save_checkpoint(const CpnnParameters& params, const std::string& path,
                     const std::string& timestamp = "");
CpnnParameters load_checkpoint(const std::string& path);

}  // namespace cpnn

#endif
