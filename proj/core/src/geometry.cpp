#include "sim/geometry.hpp"

#include <cmath>

namespace sim {

namespace {
void check_crop(const CropSpec& c, const char* which) {
  SIM_CHECK(c.height > 0 && c.width > 0,
            "crop '" << which << "' must have positive extent, got " << c.height << "x" << c.width);
}
}  // namespace

Tensor grid_positions(int64_t n_h, int64_t n_w, DType dt) {
  SIM_CHECK(n_h > 0 && n_w > 0, "grid_positions: grid " << n_h << "x" << n_w << " is empty");
  Tensor out = Tensor::zeros({n_h * n_w, 2}, dt);
  for (int64_t u = 0; u < n_h; ++u) {
    for (int64_t v = 0; v < n_w; ++v) {
      int64_t r = u * n_w + v;
      out.set_value_at(r * 2, static_cast<double>(u));
      out.set_value_at(r * 2 + 1, static_cast<double>(v));
    }
  }
  return out;
}

Tensor relative_positions(const CropSpec& ref, const CropSpec& tgt, int64_t n_h, int64_t n_w,
                          DType dt) {
  check_crop(ref, "ref");
  check_crop(tgt, "tgt");
  SIM_CHECK(n_h > 0 && n_w > 0, "relative_positions: grid " << n_h << "x" << n_w << " is empty");

  double h1 = static_cast<double>(ref.height), w1 = static_cast<double>(ref.width);
  double h2 = static_cast<double>(tgt.height), w2 = static_cast<double>(tgt.width);
  double off_h = static_cast<double>(tgt.top - ref.top) / h1 * static_cast<double>(n_h);
  double off_w = static_cast<double>(tgt.left - ref.left) / w1 * static_cast<double>(n_w);

  Tensor out = Tensor::zeros({n_h * n_w, 2}, dt);
  for (int64_t u = 0; u < n_h; ++u) {
    for (int64_t v = 0; v < n_w; ++v) {
      int64_t r = u * n_w + v;
      out.set_value_at(r * 2, h2 / h1 * static_cast<double>(u) + off_h);
      out.set_value_at(r * 2 + 1, w2 / w1 * static_cast<double>(v) + off_w);
    }
  }
  return out;
}

std::array<double, 2> relative_scale(const CropSpec& ref, const CropSpec& tgt, double log_base) {
  check_crop(ref, "ref");
  check_crop(tgt, "tgt");
  SIM_CHECK(log_base > 1.0, "relative_scale: log base must exceed 1, got " << log_base);
  double lb = std::log(log_base);
  double sh = 10.0 * std::log(static_cast<double>(tgt.height) / static_cast<double>(ref.height)) / lb;
  double sw = 10.0 * std::log(static_cast<double>(tgt.width) / static_cast<double>(ref.width)) / lb;
  return {sh, sw};
}

Tensor sincos_embed(const Tensor& positions, int64_t dim) {
  SIM_CHECK(positions.rank() == 2 && positions.dim(1) == 2,
            "sincos_embed: positions must be (M,2), got " << shape_str(positions.shape()));
  SIM_CHECK(dim > 0 && dim % 4 == 0, "sincos_embed: dim " << dim << " must be divisible by 4");

  int64_t m = positions.dim(0);
  int64_t quarter = dim / 4;
  Tensor out = Tensor::zeros({m, dim}, positions.dtype());
  for (int64_t r = 0; r < m; ++r) {
    double ph = positions.value_at(r * 2);
    double pw = positions.value_at(r * 2 + 1);
    for (int64_t k = 0; k < quarter; ++k) {
      double omega = std::pow(10000.0, 4.0 * static_cast<double>(k) / static_cast<double>(dim));
      double ah = ph / omega, aw = pw / omega;
      out.set_value_at(r * dim + 2 * k, std::sin(ah));
      out.set_value_at(r * dim + 2 * k + 1, std::cos(ah));
      out.set_value_at(r * dim + dim / 2 + 2 * k, std::sin(aw));
      out.set_value_at(r * dim + dim / 2 + 2 * k + 1, std::cos(aw));
    }
  }
  return out;
}

Tensor sincos_embed_pair(double ph, double pw, int64_t dim, DType dt) {
  Tensor pos = Tensor::from_data({ph, pw}, {1, 2}, dt);
  return sincos_embed(pos, dim);
}

}  // namespace sim
