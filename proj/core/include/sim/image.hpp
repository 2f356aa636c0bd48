#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sim/error.hpp"

namespace sim {

// Float RGB image in [0,1], row-major, channels interleaved.
struct Image {
  int64_t h = 0;
  int64_t w = 0;
  std::vector<float> px;

  Image() = default;
  Image(int64_t height, int64_t width) : h(height), w(width), px(static_cast<size_t>(height * width * 3), 0.0f) {}

  float& at(int64_t y, int64_t x, int c) { return px[static_cast<size_t>((y * w + x) * 3 + c)]; }
  float at(int64_t y, int64_t x, int c) const {
    return px[static_cast<size_t>((y * w + x) * 3 + c)];
  }
};

// Binary (P6, maxval 255) PPM files.
Image read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Image& img);

// Triangle-filter resampling on a half-pixel grid; when downscaling with
// antialias the filter support widens by the scale factor.
Image resize_bilinear(const Image& img, int64_t out_h, int64_t out_w, bool antialias = true);

Image crop_image(const Image& img, int64_t top, int64_t left, int64_t height, int64_t width);
Image hflip(const Image& img);

Image grayscale(const Image& img);  // luma weights 0.299/0.587/0.114
Image adjust_brightness(const Image& img, double factor);
Image adjust_contrast(const Image& img, double factor);
Image adjust_saturation(const Image& img, double factor);
// shift is a fraction of the full hue circle, in [-0.5, 0.5]
Image adjust_hue(const Image& img, double shift);
Image solarize(const Image& img, double threshold);  // p >= threshold -> 1-p
Image gaussian_blur(const Image& img, double sigma, int kernel_size);

}  // namespace sim
