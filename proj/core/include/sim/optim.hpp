#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sim/model.hpp"
#include "sim/tensor.hpp"

namespace sim {

// Linear lr scaling: base_lr * batch_size / 256.
double effective_lr(double base_lr, int64_t batch_size);

// Linear ramp 0 -> peak over the warmup, then half-cosine decay to 0.
double lr_at(int64_t step, int64_t warmup_steps, int64_t total_steps, double peak_lr);

// Global L2 clip over every present gradient; returns the pre-clip norm.
double clip_global_grad_norm(const std::vector<ParamEntry>& params, double max_norm);

// Adam with decoupled weight decay over the trainable entries of a parameter
// list. Decay skips 1-D tensors (biases, norm gains, the mask token). A
// parameter with no gradient this step is left completely untouched, moments
// included, so heads that are unused in the current mode stay at init.
class AdamW {
 public:
  struct Slot {
    std::string name;
    Tensor param;
    Tensor m;
    Tensor v;
  };

  AdamW(const std::vector<ParamEntry>& params, double beta1 = 0.9, double beta2 = 0.95,
        double weight_decay = 0.05, double eps = 1e-8);

  void step(double lr);

  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t);

  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }

 private:
  std::vector<Slot> slots_;
  double beta1_, beta2_, wd_, eps_;
  int64_t t_ = 0;
};

}  // namespace sim
