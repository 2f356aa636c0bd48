#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sim/tensor.hpp"

namespace sim {

// Binary container for named tensors plus run state.
//
// Layout (all integers little-endian):
//   magic "SIMCKPT1" (8 bytes)
//   u32 version (= 1)
//   u64 step, u64 seed
//   u64 config length, config echo bytes (flat key=value text)
//   u32 entry count, then per entry:
//     u16 name length, name bytes
//     u8 dtype (0 = f32, 1 = f64), u8 rank, u64 dims[rank]
//   raw payloads in entry order, each dim-product * element-size bytes
struct Checkpoint {
  uint64_t step = 0;
  uint64_t seed = 0;
  std::string config_text;
  struct Entry {
    std::string name;
    Tensor tensor;
  };
  std::vector<Entry> entries;

  const Tensor* find(const std::string& name) const;
  void add(const std::string& name, const Tensor& t);
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace sim
