#include "vfa/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace vfa {

GradCheckResult check_gradients(ParameterStore<double>& store, const Objective& objective, double step,
                                double floor) {
  store.zero_grad();
  {
    Tape<double> tape;
    tape.backward(objective(tape));
  }
  auto eval = [&] {
    Tape<double> tape;
    return objective(tape).value()[0];
  };

  GradCheckResult result;
  for (auto& p : store) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + step;
      const double up = eval();
      p->value[i] = saved - step;
      const double down = eval();
      p->value[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = p->grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++result.checked;
      if (rel > result.max_rel_error || result.worst_parameter.empty()) {
        result.max_rel_error = std::max(rel, result.max_rel_error);
        result.worst_parameter = p->name;
        result.worst_index = i;
        result.analytic = analytic;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace vfa
