#pragma once

#include <cstdint>
#include <string>

#include "sim/error.hpp"

namespace sim {

enum class DType : uint8_t { F32 = 0, F64 = 1 };

inline size_t dtype_size(DType dt) { return dt == DType::F32 ? 4 : 8; }

inline const char* dtype_name(DType dt) { return dt == DType::F32 ? "f32" : "f64"; }

inline DType parse_dtype(const std::string& s) {
  if (s == "f32" || s == "float32") return DType::F32;
  if (s == "f64" || s == "float64") return DType::F64;
  throw Error("unknown dtype '" + s + "' (expected f32 or f64)");
}

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::F32; }
template <>
constexpr DType dtype_of<double>() { return DType::F64; }

// Calls f with a value of the runtime dtype's element type, so kernels can
// be written once as templates over decltype(tag).
template <typename F>
void dispatch(DType dt, F&& f) {
  if (dt == DType::F32) {
    f(float{});
  } else {
    f(double{});
  }
}

}  // namespace sim
