#pragma once

#include <map>
#include <string>

#include "sim/augment.hpp"
#include "sim/dataset.hpp"
#include "sim/model.hpp"

namespace sim {

// Flat dotted-key configuration over a fixed key registry. Every key has a
// default; files and --set overrides can only touch known keys. Values stay
// as strings until a typed getter parses them, naming the key on failure.
class Config {
 public:
  static Config defaults();
  // defaults overlaid with `key = value` lines; '#' starts a comment
  static Config from_file(const std::string& path);
  // round-trip of echo() output, used when reading a checkpoint's config
  static Config from_text(const std::string& text, const std::string& origin);

  void set(const std::string& key, const std::string& value);
  void apply_override(const std::string& key_equals_value);

  bool has(const std::string& key) const;
  const std::string& get_string(const std::string& key) const;
  double get_double(const std::string& key) const;
  int64_t get_int(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  // sorted "key = value" lines, parseable by from_text
  std::string echo() const;

 private:
  std::map<std::string, std::string> values_;
};

// Typed views over the flat map. Each validates its result.
ViTConfig model_config(const Config& c);
AugmentConfig augment_config(const Config& c);
SyntheticConfig synthetic_config(const Config& c);

}  // namespace sim
