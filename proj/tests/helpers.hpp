#pragma once

#include <unistd.h>

#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "sim/tensor.hpp"

// Expects `expr` to throw ExType whose message contains `substr`.
#define CHECK_THROWS_MSG(expr, ExType, substr)                                              \
  do {                                                                                      \
    bool threw_ = false;                                                                    \
    try {                                                                                   \
      (void)(expr);                                                                         \
    } catch (const ExType& e_) {                                                            \
      threw_ = true;                                                                        \
      CHECK_MESSAGE(std::string(e_.what()).find(substr) != std::string::npos,               \
                    "message was: " << e_.what());                                          \
    }                                                                                       \
    CHECK_MESSAGE(threw_, "expected " #ExType " from " #expr);                              \
  } while (0)

namespace testutil {

// Scratch directory under the system temp root, wiped on construction and
// destruction. The pid suffix keeps parallel ctest processes apart.
struct TempDir {
  std::string path;

  explicit TempDir(const std::string& name) {
    namespace fs = std::filesystem;
    path = (fs::temp_directory_path() / ("sim_" + name + "_" + std::to_string(getpid()))).string();
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

inline sim::Tensor rand_t(sim::Rng& rng, sim::Shape shape, double lo = -1.0, double hi = 1.0) {
  return sim::Tensor::rand_uniform(rng, std::move(shape), sim::DType::F64, lo, hi);
}

inline void check_close(const sim::Tensor& t, const std::vector<double>& expected,
                        double tol = 1e-9) {
  REQUIRE(t.numel() == static_cast<int64_t>(expected.size()));
  for (int64_t i = 0; i < t.numel(); ++i) {
    CHECK(t.value_at(i) == doctest::Approx(expected[static_cast<size_t>(i)]).epsilon(tol).scale(1.0));
  }
}

}  // namespace testutil
