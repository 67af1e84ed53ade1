#pragma once

#include <functional>
#include <string>

#include "vfa/autograd.hpp"

namespace vfa {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

// Builds a scalar objective on a fresh tape from the parameters in the store.
using Objective = std::function<Var<double>(Tape<double>&)>;

// Compares reverse-mode gradients against central finite differences for
// every element of every parameter in `store`. The relative error of an
// element is |a - n| / max(|a|, |n|, floor).
GradCheckResult check_gradients(ParameterStore<double>& store, const Objective& objective,
                                double step = 1e-4, double floor = 1e-6);

}  // namespace vfa
