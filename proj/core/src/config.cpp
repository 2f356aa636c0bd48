#include "sim/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "sim/error.hpp"

namespace sim {

namespace {

const std::map<std::string, std::string>& registry() {
  static const std::map<std::string, std::string> keys = {
      {"data.dir", "data"},
      {"data.n_train", "2000"},
      {"data.n_test", "500"},
      {"data.image_size", "32"},
      {"data.n_classes", "4"},
      {"data.seed", "7"},

      {"model.image_size", "32"},
      {"model.patch_size", "4"},
      {"model.backbone_dim", "96"},
      {"model.backbone_depth", "4"},
      {"model.backbone_heads", "4"},
      {"model.proj_dec_dim", "64"},
      {"model.proj_dec_heads", "4"},
      {"model.projector_depth", "2"},
      {"model.decoder_depth", "4"},
      {"model.mlp_ratio", "4"},
      {"model.norm_kind", "bn"},

      {"augment.crop_scale_min", "0.2"},
      {"augment.crop_scale_max", "1.0"},
      {"augment.aspect_min", "0.75"},
      {"augment.aspect_max", "1.3333333333333333"},
      {"augment.flip_prob", "0.5"},
      {"augment.jitter_prob", "0.8"},
      {"augment.brightness", "0.4"},
      {"augment.contrast", "0.4"},
      {"augment.saturation", "0.2"},
      {"augment.hue", "0.1"},
      {"augment.grayscale_prob", "0.2"},
      {"augment.blur_prob_a", "1.0"},
      {"augment.blur_prob_b", "0.1"},
      {"augment.solarize_prob_a", "0.0"},
      {"augment.solarize_prob_b", "0.2"},
      {"augment.solarize_threshold", "0.5"},
      {"augment.blur_sigma_min", "0.1"},
      {"augment.blur_sigma_max", "2.0"},
      {"augment.use_color_aug", "true"},
      {"augment.mask_ratio", "0.75"},
      {"augment.same_view", "false"},

      {"train.base_lr", "0.00015"},
      {"train.batch_size", "64"},
      {"train.weight_decay", "0.05"},
      {"train.beta1", "0.9"},
      {"train.beta2", "0.95"},
      {"train.warmup_epochs", "5"},
      {"train.total_epochs", "100"},
      {"train.seed", "0"},
      {"train.checkpoint_every", "10"},
      {"train.grad_clip", "0"},
      {"train.target_type", "feature"},
      {"train.dtype", "f32"},

      {"loss.lambda", "1.0"},
      {"loss.alpha_global", "0.0"},
      {"loss.alpha_dense", "1.0"},
      {"loss.de_center_dense", "true"},

      {"ema.base", "0.99"},
      {"ema.final", "1.0"},

      {"eval.knn_k", "20"},
      {"eval.knn_temperature", "0.07"},
      {"eval.probe_epochs", "200"},
      {"eval.probe_lr", "0.5"},
  };
  return keys;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

Config parse_lines(std::istream& in, const std::string& origin) {
  Config c = Config::defaults();
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    SIM_CHECK(eq != std::string::npos,
              "config: " << origin << ":" << lineno << " has no '=': \"" << line << "\"");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    SIM_CHECK(!key.empty(), "config: " << origin << ":" << lineno << " has an empty key");
    try {
      c.set(key, value);
    } catch (const Error& e) {
      throw Error("config: " + origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

}  // namespace

Config Config::defaults() {
  Config c;
  c.values_ = registry();
  return c;
}

Config Config::from_file(const std::string& path) {
  std::ifstream in(path);
  SIM_CHECK(in.good(), "config: cannot open " << path);
  return parse_lines(in, path);
}

Config Config::from_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  return parse_lines(in, origin);
}

void Config::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  SIM_CHECK(it != values_.end(), "unknown config key '" << key << "'");
  it->second = value;
}

void Config::apply_override(const std::string& kv) {
  const size_t eq = kv.find('=');
  SIM_CHECK(eq != std::string::npos && eq > 0,
            "config: override \"" << kv << "\" is not of the form key=value");
  set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
}

bool Config::has(const std::string& key) const { return values_.count(key) > 0; }

const std::string& Config::get_string(const std::string& key) const {
  auto it = values_.find(key);
  SIM_CHECK(it != values_.end(), "unknown config key '" << key << "'");
  return it->second;
}

double Config::get_double(const std::string& key) const {
  const std::string& s = get_string(key);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  SIM_CHECK(end == s.c_str() + s.size() && !s.empty(),
            "config: " << key << " expects a number, got \"" << s << "\"");
  return v;
}

int64_t Config::get_int(const std::string& key) const {
  const std::string& s = get_string(key);
  char* end = nullptr;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  SIM_CHECK(end == s.c_str() + s.size() && !s.empty(),
            "config: " << key << " expects an integer, got \"" << s << "\"");
  return static_cast<int64_t>(v);
}

bool Config::get_bool(const std::string& key) const {
  const std::string& s = get_string(key);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw Error("config: " + key + " expects true/false, got \"" + s + "\"");
}

std::string Config::echo() const {
  std::ostringstream out;
  for (const auto& [k, v] : values_) out << k << " = " << v << "\n";
  return out.str();
}

ViTConfig model_config(const Config& c) {
  ViTConfig m;
  m.image_size = c.get_int("model.image_size");
  m.patch_size = c.get_int("model.patch_size");
  m.backbone_dim = c.get_int("model.backbone_dim");
  m.backbone_depth = c.get_int("model.backbone_depth");
  m.backbone_heads = c.get_int("model.backbone_heads");
  m.proj_dec_dim = c.get_int("model.proj_dec_dim");
  m.proj_dec_heads = c.get_int("model.proj_dec_heads");
  m.projector_depth = c.get_int("model.projector_depth");
  m.decoder_depth = c.get_int("model.decoder_depth");
  m.mlp_ratio = c.get_int("model.mlp_ratio");
  m.norm_kind = parse_norm_kind(c.get_string("model.norm_kind"));
  m.validate();
  return m;
}

AugmentConfig augment_config(const Config& c) {
  AugmentConfig a;
  a.crop_scale_min = c.get_double("augment.crop_scale_min");
  a.crop_scale_max = c.get_double("augment.crop_scale_max");
  a.aspect_min = c.get_double("augment.aspect_min");
  a.aspect_max = c.get_double("augment.aspect_max");
  a.flip_prob = c.get_double("augment.flip_prob");
  a.jitter_prob = c.get_double("augment.jitter_prob");
  a.brightness = c.get_double("augment.brightness");
  a.contrast = c.get_double("augment.contrast");
  a.saturation = c.get_double("augment.saturation");
  a.hue = c.get_double("augment.hue");
  a.grayscale_prob = c.get_double("augment.grayscale_prob");
  a.blur_prob = {c.get_double("augment.blur_prob_a"), c.get_double("augment.blur_prob_b")};
  a.solarize_prob = {c.get_double("augment.solarize_prob_a"),
                     c.get_double("augment.solarize_prob_b")};
  a.solarize_threshold = c.get_double("augment.solarize_threshold");
  a.blur_sigma_min = c.get_double("augment.blur_sigma_min");
  a.blur_sigma_max = c.get_double("augment.blur_sigma_max");
  a.use_color_aug = c.get_bool("augment.use_color_aug");
  a.mask_ratio = c.get_double("augment.mask_ratio");
  a.validate();
  return a;
}

SyntheticConfig synthetic_config(const Config& c) {
  SyntheticConfig s;
  s.n_train = c.get_int("data.n_train");
  s.n_test = c.get_int("data.n_test");
  s.image_size = c.get_int("data.image_size");
  s.n_classes = c.get_int("data.n_classes");
  s.seed = static_cast<uint64_t>(c.get_int("data.seed"));
  return s;
}

}  // namespace sim
