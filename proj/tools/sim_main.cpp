#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sim/checkpoint.hpp"
#include "sim/config.hpp"
#include "sim/eval.hpp"
#include "sim/tape.hpp"
#include "sim/trainer.hpp"

using nlohmann::json;

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  std::string checkpoint;
  std::string out;
};

// Base config comes from --config when given, else from the checkpoint's
// embedded echo, else the built-in defaults; --set overrides apply last.
sim::Config resolve_config(const CommonOpts& o, const std::string& ckpt_text = "") {
  sim::Config c = !o.config_path.empty() ? sim::Config::from_file(o.config_path)
                  : !ckpt_text.empty()   ? sim::Config::from_text(ckpt_text, "checkpoint")
                                         : sim::Config::defaults();
  for (const auto& kv : o.sets) c.apply_override(kv);
  std::cout << c.echo();
  return c;
}

sim::DType parse_dtype(const std::string& s) {
  if (s == "f32") return sim::DType::F32;
  if (s == "f64") return sim::DType::F64;
  throw sim::Error("train.dtype must be f32 or f64, got \"" + s + "\"");
}

void emit_json(const json& j, const std::string& out) {
  if (out.empty()) {
    std::cout << j.dump() << "\n";
    return;
  }
  std::ofstream f(out);
  if (!f.good()) throw sim::Error("cannot open " + out + " for writing");
  f << j.dump(2) << "\n";
  std::cout << "wrote " << out << "\n";
}

int run_gen_synthetic(const CommonOpts& o) {
  sim::Config c = resolve_config(o);
  sim::SyntheticConfig scfg = sim::synthetic_config(c);
  const std::string root = c.get_string("data.dir");
  sim::generate_synthetic(root, scfg);
  emit_json({{"dataset", root}, {"train", scfg.n_train}, {"test", scfg.n_test}}, o.out);
  return 0;
}

int run_pretrain(const CommonOpts& o) {
  sim::Config c = resolve_config(o);
  sim::TrainConfig tcfg = sim::train_config(c);
  sim::AugmentConfig acfg = sim::augment_config(c);
  sim::ViTConfig mcfg = sim::model_config(c);
  sim::Dataset train = sim::load_dataset(c.get_string("data.dir") + "/train");

  sim::SimModel model(mcfg, tcfg.seed, parse_dtype(c.get_string("train.dtype")));
  const std::string out_dir = o.out.empty() ? "run" : o.out;
  sim::FitResult res = sim::fit(model, train, tcfg, acfg, out_dir, c.echo(), o.checkpoint);
  std::cout << json{{"checkpoint", res.checkpoint_path},
                    {"log", res.log_path},
                    {"steps", res.steps_run}}
                   .dump()
            << "\n";
  return 0;
}

int run_eval(const CommonOpts& o, bool knn) {
  if (o.checkpoint.empty()) throw sim::Error("eval needs --checkpoint <path>");
  sim::Checkpoint ckpt = sim::load_checkpoint(o.checkpoint);
  sim::Config c = resolve_config(o, ckpt.config_text);
  sim::ViTConfig mcfg = sim::model_config(c);

  sim::SimModel model(mcfg, 0, parse_dtype(c.get_string("train.dtype")));
  sim::load_train_state(o.checkpoint, model, nullptr);

  const std::string root = c.get_string("data.dir");
  sim::Dataset train = sim::load_dataset(root + "/train");
  sim::Dataset test = sim::load_dataset(root + "/test");
  sim::FeatureBank bank_train = sim::build_bank(model, train);
  sim::FeatureBank bank_test = sim::build_bank(model, test);

  json j{{"checkpoint", o.checkpoint}};
  if (knn) {
    const int64_t k = c.get_int("eval.knn_k");
    const double t = c.get_double("eval.knn_temperature");
    j["metric"] = "knn";
    j["value"] = sim::knn_classify(bank_train, bank_test, k, t);
    j["k"] = k;
    j["temperature"] = t;
  } else {
    const int64_t epochs = c.get_int("eval.probe_epochs");
    j["metric"] = "linear_probe";
    j["value"] = sim::linear_probe(bank_train, bank_test, epochs, c.get_double("eval.probe_lr"));
    j["epochs"] = epochs;
  }
  emit_json(j, o.out);
  return 0;
}

sim::CropSpec parse_crop(const std::string& value, const std::string& key) {
  sim::CropSpec crop{};
  long long top, left, height, width;
  char extra;
  if (std::sscanf(value.c_str(), "%lld,%lld,%lld,%lld%c", &top, &left, &height, &width, &extra) !=
      4)
    throw sim::Error("inspect-geometry: " + key + " wants top,left,height,width, got \"" + value +
                     "\"");
  crop.top = top;
  crop.left = left;
  crop.height = height;
  crop.width = width;
  return crop;
}

// Positions of view b's tokens in view a's grid frame, as the decoder sees
// them. Token labels u,v are 1-based; token (1,1) anchors at grid cell (0,0).
int run_inspect_geometry(const CommonOpts& o) {
  bool have_a = false, have_b = false;
  sim::CropSpec crop_a{}, crop_b{};
  int64_t grid = 14;
  for (const auto& kv : o.sets) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw sim::Error("inspect-geometry: override \"" + kv + "\" has no '='");
    const std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
    if (key == "crop_a") {
      crop_a = parse_crop(value, key);
      have_a = true;
    } else if (key == "crop_b") {
      crop_b = parse_crop(value, key);
      have_b = true;
    } else if (key == "grid") {
      char extra;
      long long g;
      if (std::sscanf(value.c_str(), "%lld%c", &g, &extra) != 1 || g < 1)
        throw sim::Error("inspect-geometry: grid wants a positive integer, got \"" + value + "\"");
      grid = g;
    } else {
      throw sim::Error("inspect-geometry: unknown key '" + key +
                       "' (expected crop_a, crop_b, grid)");
    }
  }
  if (!have_a || !have_b)
    throw sim::Error("inspect-geometry: both crop_a and crop_b must be set");

  sim::Tensor pos = sim::relative_positions(crop_a, crop_b, grid, grid, sim::DType::F64);
  std::ostringstream csv;
  csv << "u,v,pos_h,pos_w\n";
  char num[64];
  for (int64_t u = 0; u < grid; ++u)
    for (int64_t v = 0; v < grid; ++v) {
      const int64_t r = u * grid + v;
      csv << (u + 1) << "," << (v + 1);
      std::snprintf(num, sizeof(num), ",%.17g,%.17g\n", pos.value_at(r * 2),
                    pos.value_at(r * 2 + 1));
      csv << num;
    }
  if (o.out.empty()) {
    std::cout << csv.str();
  } else {
    std::ofstream f(o.out);
    if (!f.good()) throw sim::Error("cannot open " + o.out + " for writing");
    f << csv.str();
    std::cout << "wrote " << o.out << "\n";
  }
  return 0;
}

int run_grad_check(const CommonOpts& o) {
  sim::Config c = resolve_config(o);
  sim::ViTConfig mcfg = sim::model_config(c);
  sim::TrainConfig tcfg = sim::train_config(c);
  sim::AugmentConfig acfg = sim::augment_config(c);

  // the check always runs in 64-bit, whatever train.dtype says
  sim::SimModel model(mcfg, tcfg.seed, sim::DType::F64);

  sim::Dataset data;
  data.root = "<random>";
  sim::Rng rng(sim::derive_seed(tcfg.seed, 9));
  for (int i = 0; i < 2; ++i) {
    sim::Image img(mcfg.image_size * 2, mcfg.image_size * 2);
    for (auto& p : img.px) p = static_cast<float>(rng.uniform());
    data.images.push_back(std::move(img));
    data.items.push_back({"", i});
  }
  sim::Batch batch = sim::make_batch(data, {0, 1}, acfg, tcfg.same_view, mcfg, tcfg.seed, 0, 0,
                                     sim::DType::F64);

  auto forward = [&]() {
    auto pos = model.decoder_pos_embeds(batch.crops_a, batch.crops_b, batch.masks);
    sim::Tensor ya = model.encode_online(batch.images_a, batch.masks, true);
    sim::Tensor yb = model.decode_predict(ya, pos.first, pos.second, true);
    sim::Tensor zb = model.encode_target(batch.images_b, true);
    return sim::total_loss(yb, zb, tcfg.loss).loss;
  };
  auto loss_value = [&]() {
    sim::Tape tape;
    sim::TapeScope scope(tape);
    return forward().item();
  };

  {
    sim::Tape tape;
    sim::TapeScope scope(tape);
    sim::backward(forward());
  }

  auto& entries = model.params().entries();
  std::vector<size_t> eligible;
  for (size_t k = 0; k < entries.size(); ++k)
    if (entries[k].trainable && entries[k].tensor.has_grad()) eligible.push_back(k);

  const double eps = 1e-5;
  double max_rel = 0.0;
  int probed = 0;
  const size_t stride = eligible.size() / 8 + 1;
  for (size_t j = 0; j < eligible.size() && probed < 8; j += stride) {
    auto& e = entries[eligible[j]];
    const int64_t i = e.tensor.numel() / 2;
    const double ad = e.tensor.grad().value_at(i);
    const double p0 = e.tensor.value_at(i);
    e.tensor.set_value_at(i, p0 + eps);
    const double up = loss_value();
    e.tensor.set_value_at(i, p0 - eps);
    const double dn = loss_value();
    e.tensor.set_value_at(i, p0);
    const double fd = (up - dn) / (2.0 * eps);
    const double rel = std::fabs(ad - fd) / std::max({std::fabs(ad), std::fabs(fd), 1e-6});
    std::printf("%-32s analytic %+.6e fd %+.6e rel %.3e\n", e.name.c_str(), ad, fd, rel);
    max_rel = std::max(max_rel, rel);
    ++probed;
  }
  std::printf("max relative error %.3e\n", max_rel);
  const bool pass = probed >= 4 && max_rel < 1e-3;
  std::printf("%s\n", pass ? "PASS" : "FAIL");
  return pass ? 0 : 1;
}

void add_common(CLI::App* cmd, CommonOpts& o, bool checkpoint = true) {
  cmd->add_option("--config", o.config_path, "flat key = value config file");
  cmd->add_option("--set", o.sets, "override one config key, key=value")->take_all();
  if (checkpoint) cmd->add_option("--checkpoint", o.checkpoint, "checkpoint to load or resume");
  cmd->add_option("--out", o.out, "output path");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"masked siamese pretraining on dense features"};
  app.require_subcommand(1);
  app.footer("SIM_THREADS caps the worker thread count.");

  CommonOpts o;
  CLI::App* pretrain = app.add_subcommand("pretrain", "train a model, optionally resuming");
  add_common(pretrain, o);
  CLI::App* eval_knn = app.add_subcommand("eval-knn", "weighted kNN accuracy of a checkpoint");
  add_common(eval_knn, o);
  CLI::App* eval_linear =
      app.add_subcommand("eval-linear", "linear probe accuracy of a checkpoint");
  add_common(eval_linear, o);
  CLI::App* inspect =
      app.add_subcommand("inspect-geometry", "dump relative token positions as CSV");
  inspect->add_option("--set", o.sets, "crop_a=t,l,h,w  crop_b=t,l,h,w  grid=n")->take_all();
  inspect->add_option("--out", o.out, "CSV output path");
  CLI::App* grad = app.add_subcommand("grad-check", "finite-difference gradient audit");
  add_common(grad, o, false);
  CLI::App* gen = app.add_subcommand("gen-synthetic", "write the procedural shapes dataset");
  add_common(gen, o, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (pretrain->parsed()) return run_pretrain(o);
    if (eval_knn->parsed()) return run_eval(o, true);
    if (eval_linear->parsed()) return run_eval(o, false);
    if (inspect->parsed()) return run_inspect_geometry(o);
    if (grad->parsed()) return run_grad_check(o);
    if (gen->parsed()) return run_gen_synthetic(o);
  } catch (const sim::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
