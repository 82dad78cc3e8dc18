#include "cpnn/optim.hpp"

#include <cmath>
#include <stdexcept>

#include "cpnn/errors.hpp"

namespace cpnn {

void AdamW::step(const std::vector<TensorRef>& tensors) {
  if (step_ == 0) {
    m_.resize(tensors.size());
    v_.resize(tensors.size());
    for (std::size_t t = 0; t < tensors.size(); ++t) {
      m_[t].assign(tensors[t].size, 0.0);
      v_[t].assign(tensors[t].size, 0.0);
      names_.push_back(tensors[t].name);
    }
  } else {
    if (tensors.size() != m_.size())
      throw std::invalid_argument("AdamW::step: tensor list changed between steps");
    for (std::size_t t = 0; t < tensors.size(); ++t)
      if (tensors[t].size != m_[t].size() || tensors[t].name != names_[t])
        throw std::invalid_argument("AdamW::step: tensor '" + tensors[t].name +
                                    "' changed between steps");
  }

  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, step_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, step_);

  for (std::size_t t = 0; t < tensors.size(); ++t) {
    const TensorRef& ref = tensors[t];
    for (std::size_t i = 0; i < ref.size; ++i) {
      const double g = ref.grads[i];
      if (!std::isfinite(g))
        throw NumericError("non-finite gradient in parameter '" + ref.name + "' at index " +
                           std::to_string(i));
      double& m = m_[t][i];
      double& v = v_[t][i];
      m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
      v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      ref.values[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + ref.weight_decay * ref.values[i]);
    }
  }
}

GradCheckReport finite_diff_check(const std::function<double(const std::vector<double>&)>& loss_fn,
                                  const std::vector<double>& params,
                                  const std::vector<double>& analytic_grad,
                                  const std::vector<std::string>& names, double h, double tol) {
  if (params.size() != analytic_grad.size())
    throw std::invalid_argument("finite_diff_check: gradient length mismatch");

  GradCheckReport report;
  std::vector<double> probe = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double hi = std::fabs(params[i]) > 1e3 ? h * std::fabs(params[i]) : h;
    probe[i] = params[i] + hi;
    const double up = loss_fn(probe);
    probe[i] = params[i] - hi;
    const double down = loss_fn(probe);
    probe[i] = params[i];
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("finite_diff_check: non-finite loss at perturbed point " +
                         std::to_string(i));
    const double numeric = (up - down) / (2.0 * hi);
    const double denom = std::max({std::fabs(analytic_grad[i]), std::fabs(numeric), 1e-8});
    const double rel = std::fabs(analytic_grad[i] - numeric) / denom;
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_param = i < names.size() ? names[i] : "p[" + std::to_string(i) + "]";
    }
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

}  // namespace cpnn
