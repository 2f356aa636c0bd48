#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sim/augment.hpp"
#include "sim/config.hpp"
#include "sim/dataset.hpp"
#include "sim/loss.hpp"
#include "sim/model.hpp"
#include "sim/optim.hpp"

namespace sim {

struct TrainConfig {
  double base_lr = 1.5e-4;
  int64_t batch_size = 64;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  int64_t warmup_epochs = 5;
  int64_t total_epochs = 100;
  uint64_t seed = 0;
  int64_t checkpoint_every = 10;  // epochs
  double grad_clip = 0.0;         // 0 disables
  std::string target_type = "feature";  // "feature" | "pixel"
  bool same_view = false;
  LossConfig loss;
  double ema_base = 0.99;
  double ema_final = 1.0;

  void validate() const;
};

TrainConfig train_config(const Config& c);

// One step's inputs, already augmented and stacked.
struct Batch {
  Tensor images_a, images_b;  // (B, H, W, 3)
  std::vector<CropSpec> crops_a, crops_b;
  std::vector<MaskPattern> masks;
};

// Augments `indices` of the dataset into a batch. Every item's randomness
// comes from derive_seed(seed, 4, epoch, first_pos + i), so batches are
// reproducible from coordinates alone, independent of thread count or
// history.
Batch make_batch(const Dataset& data, const std::vector<int64_t>& indices,
                 const AugmentConfig& acfg, bool same_view, const ViTConfig& mcfg, uint64_t seed,
                 int64_t epoch, int64_t first_pos, DType dt);

// Deterministic epoch ordering: Fisher-Yates under derive_seed(seed, 3, epoch).
std::vector<int64_t> epoch_order(int64_t n, uint64_t seed, int64_t epoch);

// Owns the optimizer and EMA schedule for one model.
class Trainer {
 public:
  Trainer(SimModel& model, const TrainConfig& cfg, int64_t total_steps);

  // Forward (masked online encode -> decode at target positions), loss
  // against the EMA branch's features (or normalized pixels in the pixel
  // ablation), backward, AdamW update, EMA update.
  LossReport train_step(const Batch& batch, int64_t step);

  AdamW& optimizer() { return opt_; }
  const EmaSchedule& ema() const { return ema_; }
  double lr_for_step(int64_t step) const;
  int64_t total_steps() const { return total_steps_; }

 private:
  SimModel& model_;
  TrainConfig cfg_;
  AdamW opt_;
  EmaSchedule ema_;
  double peak_lr_ = 0.0;
  int64_t warmup_steps_ = 0;
  int64_t total_steps_ = 0;
};

struct FitResult {
  std::string checkpoint_path;
  std::string log_path;
  int64_t steps_run = 0;
};

// Epoch loop with drop-last batching, JSON-lines logging, periodic
// checkpoints, and bit-exact resume. `config_echo` is stored verbatim in
// every checkpoint. A non-finite loss or gradient saves a debug checkpoint
// before the error propagates.
FitResult fit(SimModel& model, const Dataset& data, const TrainConfig& cfg,
              const AugmentConfig& acfg, const std::string& out_dir,
              const std::string& config_echo, const std::string& resume_path = "");

// Serializes model parameters plus optimizer state.
void save_train_state(const std::string& path, SimModel& model, const AdamW& opt, uint64_t step,
                      uint64_t seed, const std::string& config_echo);
// Restores into an already-constructed model of the same architecture.
uint64_t load_train_state(const std::string& path, SimModel& model, AdamW* opt);

// One JSON log line; doubles are printed with enough digits to round-trip.
std::string log_line(int64_t step, const LossReport& rep, double lr, double ema_m);

}  // namespace sim
