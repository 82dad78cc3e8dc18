#ifndef CPNN_OPTIM_HPP
#define CPNN_OPTIM_HPP

#include <functional>
#include <string>
#include <vector>

namespace cpnn {

/// One named parameter tensor, viewed flat, with its gradient buffer and
/// per-tensor decoupled weight decay.
struct TensorRef {
  std::string name;
  double* values = nullptr;
  const double* grads = nullptr;
  std::size_t size = 0;
  double weight_decay = 0.0;
};

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Decoupled-weight-decay Adam. Moment buffers are keyed by tensor
/// registration order; the tensor list must be identical on every step.
class AdamW {
 public:
  explicit AdamW(const AdamWConfig& cfg) : cfg_(cfg) {}

  /// p <- p - lr * (mhat / (sqrt(vhat) + eps) + wd * p).
  /// Throws NumericError on a non-finite gradient, naming the tensor.
  void step(const std::vector<TensorRef>& tensors);

  int step_count() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  int step_ = 0;
  std::vector<std::vector<double>> m_, v_;
  std::vector<std::string> names_;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  bool pass = false;
};

/// Central-difference check of an analytic gradient. Relative error uses
/// denominator max(|analytic|, |numeric|, 1e-8); coordinates larger than 1e3
/// in magnitude get h scaled by the magnitude. `names` labels coordinates and
/// may be empty (coordinates then report as p[i]).
GradCheckReport finite_diff_check(const std::function<double(const std::vector<double>&)>& loss_fn,
                                  const std::vector<double>& params,
                                  const std::vector<double>& analytic_grad,
                                  const std::vector<std::string>& names, double h = 1e-5,
                                  double tol = 1e-4);

}  // namespace cpnn

#endif
