#ifndef CPNN_PROTOTYPE_HPP
#define CPNN_PROTOTYPE_HPP

#include <string>
#include <vector>

#include "cpnn/data.hpp"
#include "cpnn/grid.hpp"

namespace cpnn {

/// C x G cell-type expression profiles. Raw form holds fitted means t_c in
/// count units; normalized form holds rows rescaled to sum to 1.
struct PrototypeMatrix {
  Matrix values;
  std::vector<std::string> cell_type_names;
  std::vector<std::string> gene_ids;

  std::size_t n_types() const { return values.rows(); }
  std::size_t n_genes() const { return values.cols(); }
};

/// Per-batch technical effects of the single-cell model: multiplicative
/// scale s_d (s_0 pinned to 1) and a nonnegative per-gene additive shift.
struct BatchNuisance {
  std::vector<double> s;   // length D_b
  Matrix b;                // D_b x G
  std::vector<std::string> batch_names;
};

struct ScDispersion {
  std::vector<double> theta;  // per gene, > 0
};

struct FitConfig {
  double lr = 1e-2;
  int epochs = 300;
  double b_penalty = 1e-3;    // quadratic penalty weight on the background shift
  int milestone_every = 10;   // NLL recording cadence
};

struct PrototypeFit {
  PrototypeMatrix raw;         // fitted t, count units
  BatchNuisance nuisance;
  ScDispersion dispersion;
  PrototypeMatrix normalized;  // rows of t rescaled to sum to 1
  std::vector<double> nll_milestones;  // includes the initial NLL
  std::vector<std::string> warnings;
};

/// Fits mu_{c,g} = (t_{c,g} + b_{d,g}) * s_d with per-gene NB dispersion by
/// full-batch AdamW on unconstrained reparameterizations (softplus for t and
/// b, exp for s and theta; s_0 fixed to 1). Deterministic: initialization is
/// the per-type empirical mean and there is no random state.
PrototypeFit fit_prototypes(const CountMatrix& sc, const CellAnnotations& ann,
                            const FitConfig& cfg = {});

/// Rescales each row to sum to 1. Throws NumericError on an all-zero row.
PrototypeMatrix normalize_prototype(const PrototypeMatrix& raw);

/// CSV `cell_type,<gene_1>,...` with 17-significant-digit values.
void write_prototype_csv(const PrototypeMatrix& proto, const std::string& path);
PrototypeMatrix read_prototype_csv(const std::string& path);

/// JSON sidecar carrying s, per-batch summaries of b, and theta_sc.
void write_prototype_sidecar(const PrototypeFit& fit, const std::string& path);

struct PrototypeSidecar {
  std::vector<double> s;
  std::vector<std::string> batch_names;
  std::vector<double> theta_sc;
};

PrototypeSidecar read_prototype_sidecar(const std::string& path);

}  // namespace cpnn

#endif
