#ifndef CPNN_DECONV_HPP
#define CPNN_DECONV_HPP

#include <string>
#include <vector>

#include "cpnn/data.hpp"
#include "cpnn/prototype.hpp"

namespace cpnn {

/// N x C proportions; every row lies on the simplex by construction.
struct ProportionMatrix {
  Matrix values;
  std::vector<std::string> row_ids;
  std::vector<std::string> cell_type_names;

  std::size_t n_rows() const { return values.rows(); }
  std::size_t n_types() const { return values.cols(); }

  /// Entries nonnegative, rows summing to 1 within 1e-9.
  void validate() const;
};

struct DeconvConfig {
  double lr = 1e-2;
  int steps = 500;
  int jobs = 1;
};

/// Per-sample maximum-likelihood deconvolution against normalized prototype
/// rows: p = softmax(z) and a free scale exp(zeta) minimizing the NB
/// negative log-likelihood of the bulk counts with gene dispersions from the
/// prototype fit. Samples are independent; `jobs` parallelizes across them
/// without changing results.
ProportionMatrix deconvolve(const CountMatrix& bulk, const PrototypeMatrix& proto,
                            const ScDispersion& disp, const DeconvConfig& cfg = {});

void write_proportions_csv(const ProportionMatrix& w, const std::string& path);
ProportionMatrix read_proportions_csv(const std::string& path);

}  // namespace cpnn

#endif
