#include "sim/trainer.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "sim/checkpoint.hpp"
#include "sim/dtype.hpp"
#include "sim/error.hpp"
#include "sim/ops.hpp"
#include "sim/tape.hpp"
#include "sim/threading.hpp"

namespace sim {

void TrainConfig::validate() const {
  SIM_CHECK(base_lr >= 0.0, "TrainConfig: base_lr must be >= 0, got " << base_lr);
  SIM_CHECK(batch_size >= 2, "TrainConfig: batch_size must be >= 2 so negatives exist, got "
                                 << batch_size);
  SIM_CHECK(weight_decay >= 0.0, "TrainConfig: weight_decay must be >= 0");
  SIM_CHECK(warmup_epochs >= 0 && warmup_epochs < total_epochs,
            "TrainConfig: warmup_epochs " << warmup_epochs << " must sit in [0, " << total_epochs
                                          << ")");
  SIM_CHECK(checkpoint_every >= 1, "TrainConfig: checkpoint_every must be >= 1");
  SIM_CHECK(grad_clip >= 0.0, "TrainConfig: grad_clip must be >= 0");
  SIM_CHECK(target_type == "feature" || target_type == "pixel",
            "TrainConfig: target_type must be feature or pixel, got \"" << target_type << "\"");
  loss.validate();
  EmaSchedule probe{ema_base, ema_final, 1};
  probe.validate();
}

TrainConfig train_config(const Config& c) {
  TrainConfig t;
  t.base_lr = c.get_double("train.base_lr");
  t.batch_size = c.get_int("train.batch_size");
  t.weight_decay = c.get_double("train.weight_decay");
  t.beta1 = c.get_double("train.beta1");
  t.beta2 = c.get_double("train.beta2");
  t.warmup_epochs = c.get_int("train.warmup_epochs");
  t.total_epochs = c.get_int("train.total_epochs");
  t.seed = static_cast<uint64_t>(c.get_int("train.seed"));
  t.checkpoint_every = c.get_int("train.checkpoint_every");
  t.grad_clip = c.get_double("train.grad_clip");
  t.target_type = c.get_string("train.target_type");
  t.same_view = c.get_bool("augment.same_view");
  t.loss.lambda = c.get_double("loss.lambda");
  t.loss.alpha_global = c.get_double("loss.alpha_global");
  t.loss.alpha_dense = c.get_double("loss.alpha_dense");
  t.loss.de_center_dense = c.get_bool("loss.de_center_dense");
  t.ema_base = c.get_double("ema.base");
  t.ema_final = c.get_double("ema.final");
  t.validate();
  return t;
}

std::vector<int64_t> epoch_order(int64_t n, uint64_t seed, int64_t epoch) {
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng(derive_seed(seed, 3, static_cast<uint64_t>(epoch)));
  for (int64_t i = n - 1; i > 0; --i) {
    const int64_t j = static_cast<int64_t>(rng.bounded(static_cast<uint64_t>(i + 1)));
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
  }
  return order;
}

Batch make_batch(const Dataset& data, const std::vector<int64_t>& indices,
                 const AugmentConfig& acfg, bool same_view, const ViTConfig& mcfg, uint64_t seed,
                 int64_t epoch, int64_t first_pos, DType dt) {
  const int64_t b = static_cast<int64_t>(indices.size());
  SIM_CHECK(b >= 1, "make_batch: empty index list");
  std::vector<ViewPair> pairs(static_cast<size_t>(b));
  parallel_for_each(b, [&](int64_t i) {
    const int64_t idx = indices[static_cast<size_t>(i)];
    SIM_CHECK(idx >= 0 && idx < data.size(), "make_batch: index " << idx << " out of range");
    Rng rng(derive_seed(seed, 4, static_cast<uint64_t>(epoch),
                        static_cast<uint64_t>(first_pos + i)));
    pairs[static_cast<size_t>(i)] =
        make_view_pair(rng, data.images[static_cast<size_t>(idx)], acfg, same_view,
                       mcfg.image_size, mcfg.n_tokens(), data.mean, data.stddev);
  });

  Batch batch;
  std::vector<const Image*> va(static_cast<size_t>(b)), vb(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i) {
    const auto& p = pairs[static_cast<size_t>(i)];
    va[static_cast<size_t>(i)] = &p.image_a;
    vb[static_cast<size_t>(i)] = &p.image_b;
    batch.crops_a.push_back(p.crop_a);
    batch.crops_b.push_back(p.crop_b);
    batch.masks.push_back(p.mask);
  }
  batch.images_a = stack_images(va, dt);
  batch.images_b = stack_images(vb, dt);
  return batch;
}

Trainer::Trainer(SimModel& model, const TrainConfig& cfg, int64_t total_steps)
    : model_(model),
      cfg_(cfg),
      opt_(model.params().entries(), cfg.beta1, cfg.beta2, cfg.weight_decay),
      total_steps_(total_steps) {
  cfg_.validate();
  SIM_CHECK(total_steps >= 1, "Trainer: total_steps must be >= 1, got " << total_steps);
  const int64_t steps_per_epoch = total_steps / cfg.total_epochs;
  warmup_steps_ = cfg.warmup_epochs * steps_per_epoch;
  peak_lr_ = effective_lr(cfg.base_lr, cfg.batch_size);
  ema_ = EmaSchedule{cfg.ema_base, cfg.ema_final, total_steps};
  ema_.validate();
}

double Trainer::lr_for_step(int64_t step) const {
  return lr_at(step, warmup_steps_, total_steps_, peak_lr_);
}

LossReport Trainer::train_step(const Batch& batch, int64_t step) {
  SIM_CHECK(step >= 0 && step < total_steps_,
            "train_step: step " << step << " outside [0, " << total_steps_ << ")");
  for (auto& e : model_.params().entries())
    if (e.trainable) e.tensor.zero_grad();

  Tape tape;
  TapeScope scope(tape);
  auto pos = model_.decoder_pos_embeds(batch.crops_a, batch.crops_b, batch.masks);
  Tensor y_a = model_.encode_online(batch.images_a, batch.masks, true);
  Tensor y_b = model_.decode_predict(y_a, pos.first, pos.second, true);

  LossReport rep;
  if (cfg_.target_type == "pixel") {
    Tensor target = model_.pixel_targets(batch.images_b);
    Tensor pred = model_.predict_pixels(y_b);
    Tensor diff = sub(pred, target);
    rep.loss = mean(mul(diff, diff));
    rep.total = rep.loss.item();
    rep.dense_term = rep.total;
    rep.feat_std = feature_std(y_b);
  } else {
    Tensor z_b = model_.encode_target(batch.images_b, true);
    rep = total_loss(y_b, z_b, cfg_.loss);
  }
  SIM_CHECK(std::isfinite(rep.total), "train_step: non-finite loss at step " << step);

  backward(rep.loss);
  if (cfg_.grad_clip > 0.0) clip_global_grad_norm(model_.params().entries(), cfg_.grad_clip);
  opt_.step(lr_for_step(step));
  model_.ema_update(ema_momentum(step, ema_));
  return rep;
}

void save_train_state(const std::string& path, SimModel& model, const AdamW& opt, uint64_t step,
                      uint64_t seed, const std::string& config_echo) {
  Checkpoint ckpt;
  ckpt.step = step;
  ckpt.seed = seed;
  ckpt.config_text = config_echo;
  for (const auto& e : model.params().entries()) ckpt.add(e.name, e.tensor);
  for (const auto& s : opt.slots()) {
    ckpt.add("opt.m." + s.name, s.m);
    ckpt.add("opt.v." + s.name, s.v);
  }
  save_checkpoint(path, ckpt);
}

namespace {

void copy_into(Tensor& dst, const Tensor& src, const std::string& name, const std::string& path) {
  SIM_CHECK(dst.dtype() == src.dtype(), "checkpoint: " << path << " entry " << name
                                                       << " has a different dtype than the model");
  SIM_CHECK(dst.shape() == src.shape(), "checkpoint: " << path << " entry " << name << " has shape "
                                                       << shape_str(src.shape()) << ", model wants "
                                                       << shape_str(dst.shape()));
  dispatch(dst.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto d = dst.data<T>();
    auto s = src.data<T>();
    for (int64_t i = 0; i < dst.numel(); ++i) d[static_cast<size_t>(i)] = s[static_cast<size_t>(i)];
  });
}

}  // namespace

uint64_t load_train_state(const std::string& path, SimModel& model, AdamW* opt) {
  Checkpoint ckpt = load_checkpoint(path);
  for (auto& e : model.params().entries()) {
    const Tensor* src = ckpt.find(e.name);
    SIM_CHECK(src != nullptr, "checkpoint: " << path << " is missing parameter " << e.name);
    copy_into(e.tensor, *src, e.name, path);
  }
  if (opt) {
    for (auto& s : opt->slots()) {
      const Tensor* m = ckpt.find("opt.m." + s.name);
      const Tensor* v = ckpt.find("opt.v." + s.name);
      SIM_CHECK(m != nullptr && v != nullptr,
                "checkpoint: " << path << " is missing optimizer state for " << s.name);
      copy_into(s.m, *m, "opt.m." + s.name, path);
      copy_into(s.v, *v, "opt.v." + s.name, path);
    }
    opt->set_step_count(static_cast<int64_t>(ckpt.step));
  }
  return ckpt.step;
}

std::string log_line(int64_t step, const LossReport& rep, double lr, double ema_m) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "{\"step\":%" PRId64
                ",\"total\":%.17g,\"global\":%.17g,\"dense\":%.17g,\"align\":%.17g,"
                "\"uniform\":%.17g,\"feat_std\":%.17g,\"lr\":%.17g,\"ema_m\":%.17g}",
                step, rep.total, rep.global_term, rep.dense_term, rep.alignment, rep.uniformity,
                rep.feat_std, lr, ema_m);
  return std::string(buf);
}

FitResult fit(SimModel& model, const Dataset& data, const TrainConfig& cfg,
              const AugmentConfig& acfg, const std::string& out_dir,
              const std::string& config_echo, const std::string& resume_path) {
  cfg.validate();
  SIM_CHECK(data.size() >= 1, "fit: dataset at " << data.root << " is empty");
  const int64_t steps_per_epoch = data.size() / cfg.batch_size;
  SIM_CHECK(steps_per_epoch >= 1, "fit: batch_size " << cfg.batch_size
                                                     << " exceeds the dataset size "
                                                     << data.size());
  const int64_t total_steps = steps_per_epoch * cfg.total_epochs;

  std::filesystem::create_directories(out_dir);
  Trainer trainer(model, cfg, total_steps);

  int64_t start_epoch = 0;
  if (!resume_path.empty()) {
    const uint64_t step = load_train_state(resume_path, model, &trainer.optimizer());
    SIM_CHECK(step % static_cast<uint64_t>(steps_per_epoch) == 0,
              "fit: checkpoint " << resume_path << " stops mid-epoch at step " << step);
    start_epoch = static_cast<int64_t>(step) / steps_per_epoch;
    SIM_CHECK(start_epoch <= cfg.total_epochs, "fit: checkpoint " << resume_path
                                                                  << " already covers epoch "
                                                                  << start_epoch);
  }

  const std::string log_path = out_dir + "/train_log.jsonl";
  std::ofstream log(log_path, start_epoch > 0 ? std::ios::app : std::ios::trunc);
  SIM_CHECK(log.good(), "fit: cannot open " << log_path << " for writing");

  const std::string final_path = out_dir + "/final.ckpt";
  int64_t steps_run = 0;
  for (int64_t epoch = start_epoch; epoch < cfg.total_epochs; ++epoch) {
    const std::vector<int64_t> order = epoch_order(data.size(), cfg.seed, epoch);
    for (int64_t s = 0; s < steps_per_epoch; ++s) {
      const int64_t step = epoch * steps_per_epoch + s;
      std::vector<int64_t> idx(order.begin() + s * cfg.batch_size,
                               order.begin() + (s + 1) * cfg.batch_size);
      Batch batch = make_batch(data, idx, acfg, cfg.same_view, model.config(), cfg.seed, epoch,
                               s * cfg.batch_size, model.dtype());
      LossReport rep;
      try {
        rep = trainer.train_step(batch, step);
      } catch (const Error& e) {
        const std::string debug_path = out_dir + "/debug_step_" + std::to_string(step) + ".ckpt";
        save_train_state(debug_path, model, trainer.optimizer(), static_cast<uint64_t>(step),
                         cfg.seed, config_echo);
        throw Error(std::string(e.what()) + "; state saved to " + debug_path);
      }
      log << log_line(step, rep, trainer.lr_for_step(step), ema_momentum(step, trainer.ema()))
          << "\n";
      log.flush();
      ++steps_run;
    }
    const int64_t done = epoch + 1;
    if (done % cfg.checkpoint_every == 0 || done == cfg.total_epochs) {
      char name[64];
      std::snprintf(name, sizeof(name), "/ckpt_epoch_%04" PRId64 ".ckpt", done);
      save_train_state(out_dir + name, model, trainer.optimizer(),
                       static_cast<uint64_t>(done * steps_per_epoch), cfg.seed, config_echo);
    }
  }
  save_train_state(final_path, model, trainer.optimizer(), static_cast<uint64_t>(total_steps),
                   cfg.seed, config_echo);
  return {final_path, log_path, steps_run};
}

}  // namespace sim
