#pragma once

#include <functional>

#include "sim/tensor.hpp"

namespace sim {

struct GradCheckResult {
  bool ok = true;
  double max_rel_err = 0.0;
  int64_t worst_input = -1;  // which tensor in `inputs`
  int64_t worst_index = -1;  // flat element within that tensor
  double analytic = 0.0;
  double numeric = 0.0;
  std::string to_string() const;
};

// Central-difference check of a scalar-valued function against the tape
// gradients. `fn` must build its graph from the given inputs on the active
// tape and return a scalar. Inputs should be F64 for meaningful tolerances.
GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                           std::vector<Tensor> inputs, double epsilon = 1e-5,
                           double tolerance = 1e-6);

}  // namespace sim
