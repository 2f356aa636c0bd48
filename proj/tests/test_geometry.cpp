#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "sim/geometry.hpp"
#include "sim/ops.hpp"

using namespace sim;
using testutil::check_close;

TEST_SUITE_BEGIN("geometry");

TEST_CASE("grid_positions walks rows first") {
  Tensor g = grid_positions(2, 3, DType::F64);
  CHECK(g.shape() == Shape{6, 2});
  check_close(g, {0, 0, 0, 1, 0, 2, 1, 0, 1, 1, 1, 2});
}

TEST_CASE("relative_positions of a crop against itself is the grid") {
  CropSpec a{17, 23, 140, 90};
  Tensor rel = relative_positions(a, a, 4, 8, DType::F64);
  Tensor g = grid_positions(4, 8, DType::F64);
  for (int64_t i = 0; i < g.numel(); ++i)
    CHECK(rel.value_at(i) == doctest::Approx(g.value_at(i)).epsilon(1e-12));
}

TEST_CASE("relative_positions matches the raw-pixel oracle") {
  // oracle route: token (u,v) of a crop sits at raw pixel
  // (top + u*h/N_h, left + v*w/N_w); re-expressing that pixel in the
  // reference crop's token frame must reproduce relative_positions.
  Rng rng(2024);
  const int64_t n_h = 4, n_w = 8;  // non-square grid guards axis mixups
  for (int iter = 0; iter < 25; ++iter) {
    auto rand_crop = [&](int64_t raw_h, int64_t raw_w) {
      CropSpec c;
      c.height = 8 + static_cast<int64_t>(rng.bounded(static_cast<uint64_t>(raw_h - 8)));
      c.width = 8 + static_cast<int64_t>(rng.bounded(static_cast<uint64_t>(raw_w - 8)));
      c.top = static_cast<int64_t>(rng.bounded(static_cast<uint64_t>(raw_h - c.height + 1)));
      c.left = static_cast<int64_t>(rng.bounded(static_cast<uint64_t>(raw_w - c.width + 1)));
      return c;
    };
    CropSpec ref = rand_crop(100, 120);
    CropSpec tgt = rand_crop(100, 120);
    Tensor rel = relative_positions(ref, tgt, n_h, n_w, DType::F64);
    for (int64_t u = 0; u < n_h; ++u) {
      for (int64_t v = 0; v < n_w; ++v) {
        double pix_h = static_cast<double>(tgt.top) +
                       static_cast<double>(u) * static_cast<double>(tgt.height) / n_h;
        double pix_w = static_cast<double>(tgt.left) +
                       static_cast<double>(v) * static_cast<double>(tgt.width) / n_w;
        double oracle_h = (pix_h - ref.top) / static_cast<double>(ref.height) * n_h;
        double oracle_w = (pix_w - ref.left) / static_cast<double>(ref.width) * n_w;
        int64_t r = u * n_w + v;
        CHECK(rel.value_at(r * 2) == doctest::Approx(oracle_h).epsilon(1e-10));
        CHECK(rel.value_at(r * 2 + 1) == doctest::Approx(oracle_w).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("pure translation shifts every token equally") {
  CropSpec ref{10, 20, 50, 60};
  CropSpec tgt{35, 50, 50, 60};  // same size, shifted by (25, 30)
  Tensor rel = relative_positions(ref, tgt, 8, 8, DType::F64);
  Tensor g = grid_positions(8, 8, DType::F64);
  double dh = 25.0 / 50.0 * 8, dw = 30.0 / 60.0 * 8;
  for (int64_t r = 0; r < 64; ++r) {
    CHECK(rel.value_at(r * 2) == doctest::Approx(g.value_at(r * 2) + dh).epsilon(1e-12));
    CHECK(rel.value_at(r * 2 + 1) == doctest::Approx(g.value_at(r * 2 + 1) + dw).epsilon(1e-12));
  }
}

TEST_CASE("relative_scale is a decibel-style log ratio") {
  CropSpec ref{0, 0, 100, 100};
  SUBCASE("identity") {
    auto s = relative_scale(ref, ref);
    CHECK(s[0] == doctest::Approx(0.0));
    CHECK(s[1] == doctest::Approx(0.0));
  }
  SUBCASE("tenfold and half") {
    CropSpec tgt{0, 0, 1000, 50};
    auto s = relative_scale(ref, tgt);
    CHECK(s[0] == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(s[1] == doctest::Approx(10.0 * std::log10(0.5)).epsilon(1e-12));
  }
  SUBCASE("antisymmetric under swap") {
    CropSpec tgt{4, 7, 37, 181};
    auto fwd = relative_scale(ref, tgt);
    auto bwd = relative_scale(tgt, ref);
    CHECK(fwd[0] == doctest::Approx(-bwd[0]).epsilon(1e-12));
    CHECK(fwd[1] == doctest::Approx(-bwd[1]).epsilon(1e-12));
  }
  SUBCASE("configurable base") {
    CropSpec tgt{0, 0, 200, 100};
    auto s = relative_scale(ref, tgt, std::exp(1.0));
    CHECK(s[0] == doctest::Approx(10.0 * std::log(2.0)).epsilon(1e-12));
  }
}

TEST_CASE("sincos_embed pins the interleaved pair layout") {
  // position (1,0), dim 8: first frequency pair of the height half is
  // (sin 1, cos 1); the width half encodes zero as (0,1) pairs.
  Tensor pos = Tensor::from_data({1.0, 0.0}, {1, 2}, DType::F64);
  Tensor e = sincos_embed(pos, 8);
  CHECK(e.shape() == Shape{1, 8});
  CHECK(e.value_at(0) == doctest::Approx(0.8414709848078965).epsilon(1e-12));
  CHECK(e.value_at(1) == doctest::Approx(0.5403023058681398).epsilon(1e-12));
  // k=1: omega = 10000^(4/8) = 100
  CHECK(e.value_at(2) == doctest::Approx(std::sin(0.01)).epsilon(1e-12));
  CHECK(e.value_at(3) == doctest::Approx(std::cos(0.01)).epsilon(1e-12));
  check_close(slice(e, 1, 4, 8), {0.0, 1.0, 0.0, 1.0}, 1e-12);
}

TEST_CASE("sincos_embed separates the axes") {
  Tensor pos = Tensor::from_data({3.0, 0.0, 0.0, 3.0}, {2, 2}, DType::F64);
  Tensor e = sincos_embed(pos, 16);
  // swapping (h,w) swaps the halves
  for (int64_t k = 0; k < 8; ++k) {
    CHECK(e.value_at(k) == doctest::Approx(e.value_at(16 + 8 + k)).epsilon(1e-12));
    CHECK(e.value_at(8 + k) == doctest::Approx(e.value_at(16 + k)).epsilon(1e-12));
  }
}

TEST_CASE("sincos_embed unit norm per sin/cos pair") {
  Rng rng(5);
  Tensor pos = Tensor::rand_uniform(rng, {5, 2}, DType::F64, -20.0, 20.0);
  Tensor e = sincos_embed(pos, 12);
  for (int64_t r = 0; r < 5; ++r) {
    for (int64_t k = 0; k < 3; ++k) {
      double s1 = e.value_at(r * 12 + 2 * k), c1 = e.value_at(r * 12 + 2 * k + 1);
      CHECK(s1 * s1 + c1 * c1 == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("sincos_embed validates its inputs") {
  Tensor pos = Tensor::zeros({2, 2}, DType::F32);
  CHECK_THROWS_MSG(sincos_embed(pos, 6), Error, "divisible by 4");
  Tensor bad = Tensor::zeros({2, 3}, DType::F32);
  CHECK_THROWS_MSG(sincos_embed(bad, 8), Error, "(M,2)");
}

TEST_CASE("scale embedding reuses the positional frequency table") {
  auto s = relative_scale({0, 0, 100, 100}, {0, 0, 150, 80});
  Tensor via_pair = sincos_embed_pair(s[0], s[1], 8, DType::F64);
  Tensor via_matrix = sincos_embed(Tensor::from_data({s[0], s[1]}, {1, 2}, DType::F64), 8);
  for (int64_t i = 0; i < 8; ++i)
    CHECK(via_pair.value_at(i) == doctest::Approx(via_matrix.value_at(i)).epsilon(1e-12));
}

TEST_CASE("degenerate crops are rejected") {
  CropSpec ok{0, 0, 10, 10};
  CropSpec flat{0, 0, 0, 10};
  CHECK_THROWS_MSG(relative_positions(ok, flat, 4, 4, DType::F64), Error, "positive extent");
  CHECK_THROWS_AS(relative_scale(flat, ok), Error);
}

TEST_SUITE_END();
