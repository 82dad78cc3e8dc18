#ifndef CPNN_GRADCHECK_HPP
#define CPNN_GRADCHECK_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "cpnn/model.hpp"
#include "cpnn/optim.hpp"

namespace cpnn {

/// Flat view of the trainable free parameters in checkpoint order, honoring
/// the ablation flags (frozen tensors are not included).
std::vector<double> flatten_params(const CpnnParameters& params);
void unflatten_params(const std::vector<double>& flat, CpnnParameters& params);
std::vector<double> flatten_grads(const CpnnGrads& grads, const CpnnParameters& params);
std::vector<std::string> param_coordinate_names(const CpnnParameters& params);

/// End-to-end finite-difference check of the slide loss composed with the
/// slide forward on a seeded tiny instance (2 slides, N_p=3, C=3, G=5, D=4).
GradCheckReport gradcheck_slide(std::uint64_t seed, double h = 1e-5, double tol = 1e-4);

/// Same for the patch loss with log1p transform (1 slide, N_p=4, C=3, G=6).
GradCheckReport gradcheck_patch(std::uint64_t seed, double h = 1e-5, double tol = 1e-4);

}  // namespace cpnn

#endif
