#pragma once

#include <array>

#include "sim/geometry.hpp"
#include "sim/image.hpp"
#include "sim/rng.hpp"
#include "sim/tensor.hpp"

namespace sim {

struct AugmentConfig {
  double crop_scale_min = 0.2;  // fraction of raw area
  double crop_scale_max = 1.0;
  double aspect_min = 3.0 / 4.0;  // w/h
  double aspect_max = 4.0 / 3.0;

  double flip_prob = 0.5;
  double jitter_prob = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.2;
  double hue = 0.1;
  double grayscale_prob = 0.2;
  // index 0 = view a (online), index 1 = view b (target)
  std::array<double, 2> blur_prob{1.0, 0.1};
  std::array<double, 2> solarize_prob{0.0, 0.2};
  double solarize_threshold = 0.5;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 2.0;

  bool use_color_aug = true;
  double mask_ratio = 0.75;

  void validate() const;
};

struct MaskPattern {
  std::vector<int64_t> visible;  // sorted, unique, in [0, total)
  int64_t total = 0;
};

struct ViewPair {
  Image image_a, image_b;  // normalized, model resolution
  CropSpec crop_a, crop_b;
  bool flipped = false;  // one flip decision covers both views
  MaskPattern mask;      // visible tokens of view a
};

// Rejection-samples a crop box with area fraction in the scale range and
// log-uniform aspect ratio; falls back to an aspect-clamped center crop
// after 10 failed attempts.
CropSpec sample_crop(Rng& rng, int64_t raw_h, int64_t raw_w, const AugmentConfig& cfg);

// Color pipeline in fixed order: jitter (brightness, contrast, saturation,
// hue), grayscale, blur, solarize. view_index selects the per-view blur and
// solarize probabilities.
Image apply_color(Rng& rng, const Image& img, int view_index, const AugmentConfig& cfg);

// Exactly round((1-ratio)*n) visible indices, uniform without replacement.
MaskPattern sample_mask(Rng& rng, int64_t n_tokens, double mask_ratio);

// Full pipeline for one image: shared flip, two crops (one when same_view),
// resize to image_size, per-view color, normalization last, mask for view a.
ViewPair make_view_pair(Rng& rng, const Image& raw, const AugmentConfig& cfg, bool same_view,
                        int64_t image_size, int64_t n_tokens, const std::array<double, 3>& mean,
                        const std::array<double, 3>& stddev);

Image normalize_image(const Image& img, const std::array<double, 3>& mean,
                      const std::array<double, 3>& stddev);

// (B, H, W, 3) batch tensor from equally sized images.
Tensor stack_images(const std::vector<const Image*>& images, DType dt);

}  // namespace sim
