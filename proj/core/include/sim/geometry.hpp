#pragma once

#include <array>

#include "sim/tensor.hpp"

namespace sim {

// Axis-aligned crop box on the raw image, in pixels.
struct CropSpec {
  int64_t top = 0;
  int64_t left = 0;
  int64_t height = 0;
  int64_t width = 0;
};

// Token-center coordinates of a view's own grid: row-major (N_h*N_w, 2)
// holding (u-1, v-1) for 1-based token indices (u, v).
Tensor grid_positions(int64_t n_h, int64_t n_w, DType dt);

// Positions of `tgt` tokens expressed in the token frame of `ref`. Token
// (u, v) of the target crop lands at
//   ( (h2/h1)(u-1) + (i2-i1)/h1 * N_h,  (w2/w1)(v-1) + (j2-j1)/w1 * N_w ).
// With tgt == ref this reduces to grid_positions.
Tensor relative_positions(const CropSpec& ref, const CropSpec& tgt, int64_t n_h, int64_t n_w,
                          DType dt);

// Log-scale size ratio between the crops, one entry per axis:
// 10*log10(h2/h1) and 10*log10(w2/w1).
std::array<double, 2> relative_scale(const CropSpec& ref, const CropSpec& tgt,
                                     double log_base = 10.0);

// Fixed 2-D sine/cosine embedding. `positions` is (M, 2); the output is
// (M, dim) with the first half encoding the height coordinate and the
// second half the width coordinate. Within each half, frequency k occupies
// the adjacent pair (sin(p/w_k), cos(p/w_k)) with w_k = 10000^(4k/dim).
// dim must be divisible by 4.
Tensor sincos_embed(const Tensor& positions, int64_t dim);

// Convenience: sincos_embed of a single (scale) coordinate pair -> (1, dim).
Tensor sincos_embed_pair(double ph, double pw, int64_t dim, DType dt);

}  // namespace sim
