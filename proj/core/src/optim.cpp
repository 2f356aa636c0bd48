#include "sim/optim.hpp"

#include <cmath>

#include "sim/dtype.hpp"
#include "sim/error.hpp"

namespace sim {

double effective_lr(double base_lr, int64_t batch_size) {
  SIM_CHECK(base_lr >= 0.0, "effective_lr: base_lr must be >= 0, got " << base_lr);
  SIM_CHECK(batch_size >= 1, "effective_lr: batch_size must be >= 1, got " << batch_size);
  return base_lr * static_cast<double>(batch_size) / 256.0;
}

double lr_at(int64_t step, int64_t warmup_steps, int64_t total_steps, double peak_lr) {
  SIM_CHECK(total_steps >= 1, "lr_at: total_steps must be >= 1, got " << total_steps);
  SIM_CHECK(warmup_steps >= 0 && warmup_steps < total_steps,
            "lr_at: warmup_steps " << warmup_steps << " must sit in [0, " << total_steps << ")");
  SIM_CHECK(step >= 0 && step <= total_steps,
            "lr_at: step " << step << " outside [0, " << total_steps << "]");
  if (step < warmup_steps)
    return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double phase = static_cast<double>(step - warmup_steps) /
                       static_cast<double>(total_steps - warmup_steps);
  return peak_lr * 0.5 * (std::cos(M_PI * phase) + 1.0);
}

double clip_global_grad_norm(const std::vector<ParamEntry>& params, double max_norm) {
  SIM_CHECK(max_norm > 0.0, "clip_global_grad_norm: max_norm must be positive, got " << max_norm);
  double sq = 0.0;
  for (const auto& e : params) {
    if (!e.trainable || !e.tensor.has_grad()) continue;
    const Tensor& g = e.tensor.grad();
    for (int64_t i = 0; i < g.numel(); ++i) {
      const double v = g.value_at(i);
      sq += v * v;
    }
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return norm;
  const double factor = max_norm / norm;
  for (const auto& e : params) {
    if (!e.trainable || !e.tensor.has_grad()) continue;
    Tensor g = e.tensor.grad();
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto p = g.data<T>();
      for (int64_t i = 0; i < g.numel(); ++i)
        p[static_cast<size_t>(i)] = static_cast<T>(p[static_cast<size_t>(i)] * factor);
    });
  }
  return norm;
}

AdamW::AdamW(const std::vector<ParamEntry>& params, double beta1, double beta2,
             double weight_decay, double eps)
    : beta1_(beta1), beta2_(beta2), wd_(weight_decay), eps_(eps) {
  SIM_CHECK(beta1 >= 0.0 && beta1 < 1.0, "AdamW: beta1 must be in [0, 1), got " << beta1);
  SIM_CHECK(beta2 >= 0.0 && beta2 < 1.0, "AdamW: beta2 must be in [0, 1), got " << beta2);
  SIM_CHECK(weight_decay >= 0.0, "AdamW: weight_decay must be >= 0, got " << weight_decay);
  SIM_CHECK(eps > 0.0, "AdamW: eps must be positive, got " << eps);
  for (const auto& e : params) {
    if (!e.trainable) continue;
    Slot s;
    s.name = e.name;
    s.param = e.tensor;
    s.m = Tensor::zeros(e.tensor.shape(), e.tensor.dtype());
    s.v = Tensor::zeros(e.tensor.shape(), e.tensor.dtype());
    slots_.push_back(std::move(s));
  }
}

void AdamW::set_step_count(int64_t t) {
  SIM_CHECK(t >= 0, "AdamW: step count must be >= 0, got " << t);
  t_ = t;
}

void AdamW::step(double lr) {
  SIM_CHECK(std::isfinite(lr) && lr >= 0.0, "AdamW: lr must be finite and >= 0, got " << lr);
  for (const auto& s : slots_) {
    if (!s.param.has_grad()) continue;
    const Tensor& g = s.param.grad();
    for (int64_t i = 0; i < g.numel(); ++i)
      SIM_CHECK(std::isfinite(g.value_at(i)),
                "AdamW: parameter " << s.name << " has a non-finite gradient");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& s : slots_) {
    if (!s.param.has_grad()) continue;
    const Tensor grad = s.param.grad();
    const double decay = s.param.rank() >= 2 ? wd_ : 0.0;
    dispatch(s.param.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto p = s.param.data<T>();
      auto gp = grad.data<T>();
      auto mp = s.m.data<T>();
      auto vp = s.v.data<T>();
      for (int64_t i = 0; i < s.param.numel(); ++i) {
        const size_t u = static_cast<size_t>(i);
        const double gv = gp[u];
        const double m = beta1_ * static_cast<double>(mp[u]) + (1.0 - beta1_) * gv;
        const double v = beta2_ * static_cast<double>(vp[u]) + (1.0 - beta2_) * gv * gv;
        mp[u] = static_cast<T>(m);
        vp[u] = static_cast<T>(v);
        const double update = (m / bc1) / (std::sqrt(v / bc2) + eps_) +
                              decay * static_cast<double>(p[u]);
        p[u] = static_cast<T>(static_cast<double>(p[u]) - lr * update);
      }
    });
  }
}

}  // namespace sim
