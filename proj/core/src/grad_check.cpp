#include "sim/grad_check.hpp"

#include <cmath>
#include <sstream>

#include "sim/tape.hpp"

namespace sim {

std::string GradCheckResult::to_string() const {
  std::ostringstream os;
  if (ok) {
    os << "grad_check ok, max rel err " << max_rel_err;
  } else {
    os << "grad_check failed at input " << worst_input << " element " << worst_index
       << ": analytic " << analytic << " vs numeric " << numeric << " (rel err " << max_rel_err
       << ")";
  }
  return os.str();
}

GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                           std::vector<Tensor> inputs, double epsilon, double tolerance) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }

  {
    Tape tape;
    TapeScope scope(tape);
    Tensor root = fn(inputs);
    SIM_CHECK(root.numel() == 1,
              "grad_check: function must return a scalar, got " << shape_str(root.shape()));
    tape.backward(root);
  }

  GradCheckResult res;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor& t = inputs[ti];
    SIM_CHECK(t.has_grad(), "grad_check: input " << ti << " received no gradient");
    Tensor g = t.grad();
    for (int64_t i = 0; i < t.numel(); ++i) {
      double x0 = t.value_at(i);
      double fp, fm;
      {
        NoGradScope ng;
        t.set_value_at(i, x0 + epsilon);
        fp = fn(inputs).item();
        t.set_value_at(i, x0 - epsilon);
        fm = fn(inputs).item();
        t.set_value_at(i, x0);
      }
      double numeric = (fp - fm) / (2.0 * epsilon);
      double analytic = g.value_at(i);
      double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      double rel = std::abs(analytic - numeric) / denom;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_input = static_cast<int64_t>(ti);
        res.worst_index = i;
        res.analytic = analytic;
        res.numeric = numeric;
      }
    }
  }
  res.ok = res.max_rel_err <= tolerance;
  return res;
}

}  // namespace sim
