#include "sim/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sim {

void AugmentConfig::validate() const {
  auto prob = [](double p, const char* name) {
    SIM_CHECK(p >= 0.0 && p <= 1.0, "augment config: " << name << " = " << p << " is not in [0,1]");
  };
  prob(flip_prob, "flip_prob");
  prob(jitter_prob, "jitter_prob");
  prob(grayscale_prob, "grayscale_prob");
  prob(blur_prob[0], "blur_prob[0]");
  prob(blur_prob[1], "blur_prob[1]");
  prob(solarize_prob[0], "solarize_prob[0]");
  prob(solarize_prob[1], "solarize_prob[1]");
  SIM_CHECK(mask_ratio > 0.0 && mask_ratio < 1.0,
            "augment config: mask_ratio " << mask_ratio << " must lie in (0,1)");
  SIM_CHECK(crop_scale_min > 0.0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0,
            "augment config: crop scale range (" << crop_scale_min << "," << crop_scale_max
                                                 << ") must sit inside (0,1]");
  SIM_CHECK(aspect_min > 0.0 && aspect_min <= aspect_max,
            "augment config: aspect range (" << aspect_min << "," << aspect_max << ") is invalid");
  SIM_CHECK(blur_sigma_min > 0.0 && blur_sigma_min <= blur_sigma_max,
            "augment config: blur sigma range is invalid");
}

CropSpec sample_crop(Rng& rng, int64_t raw_h, int64_t raw_w, const AugmentConfig& cfg) {
  SIM_CHECK(raw_h >= 8 && raw_w >= 8, "sample_crop: raw image " << raw_h << "x" << raw_w
                                                                << " is below the 8 px minimum");
  double area = static_cast<double>(raw_h) * static_cast<double>(raw_w);
  for (int attempt = 0; attempt < 10; ++attempt) {
    double target_area = rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max) * area;
    double log_ratio = rng.uniform(std::log(cfg.aspect_min), std::log(cfg.aspect_max));
    double ar = std::exp(log_ratio);  // w/h
    int64_t cw = static_cast<int64_t>(std::llround(std::sqrt(target_area * ar)));
    int64_t ch = static_cast<int64_t>(std::llround(std::sqrt(target_area / ar)));
    if (cw > 0 && ch > 0 && cw <= raw_w && ch <= raw_h) {
      CropSpec c;
      c.height = ch;
      c.width = cw;
      c.top = static_cast<int64_t>(rng.bounded(static_cast<uint64_t>(raw_h - ch + 1)));
      c.left = static_cast<int64_t>(rng.bounded(static_cast<uint64_t>(raw_w - cw + 1)));
      return c;
    }
  }
  // center crop at the nearest representable aspect ratio
  double in_ratio = static_cast<double>(raw_w) / static_cast<double>(raw_h);
  int64_t cw, ch;
  if (in_ratio < cfg.aspect_min) {
    cw = raw_w;
    ch = static_cast<int64_t>(std::llround(static_cast<double>(cw) / cfg.aspect_min));
  } else if (in_ratio > cfg.aspect_max) {
    ch = raw_h;
    cw = static_cast<int64_t>(std::llround(static_cast<double>(ch) * cfg.aspect_max));
  } else {
    cw = raw_w;
    ch = raw_h;
  }
  ch = std::max<int64_t>(1, std::min(ch, raw_h));
  cw = std::max<int64_t>(1, std::min(cw, raw_w));
  CropSpec c;
  c.height = ch;
  c.width = cw;
  c.top = (raw_h - ch) / 2;
  c.left = (raw_w - cw) / 2;
  return c;
}

namespace {
int blur_kernel_for(int64_t image_size) {
  int k = static_cast<int>(std::llround(static_cast<double>(image_size) / 10.0));
  if (k < 1) k = 1;
  if (k % 2 == 0) ++k;
  return k;
}
}  // namespace

Image apply_color(Rng& rng, const Image& img, int view_index, const AugmentConfig& cfg) {
  SIM_CHECK(view_index == 0 || view_index == 1, "apply_color: view index must be 0 or 1");
  if (!cfg.use_color_aug) return img;

  Image out = img;
  if (rng.uniform() < cfg.jitter_prob) {
    double b = rng.uniform(std::max(0.0, 1.0 - cfg.brightness), 1.0 + cfg.brightness);
    out = adjust_brightness(out, b);
    double c = rng.uniform(std::max(0.0, 1.0 - cfg.contrast), 1.0 + cfg.contrast);
    out = adjust_contrast(out, c);
    double s = rng.uniform(std::max(0.0, 1.0 - cfg.saturation), 1.0 + cfg.saturation);
    out = adjust_saturation(out, s);
    double h = rng.uniform(-cfg.hue, cfg.hue);
    out = adjust_hue(out, h);
  }
  if (rng.uniform() < cfg.grayscale_prob) out = grayscale(out);
  if (rng.uniform() < cfg.blur_prob[static_cast<size_t>(view_index)]) {
    double sigma = rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max);
    out = gaussian_blur(out, sigma, blur_kernel_for(std::min(out.h, out.w)));
  }
  if (rng.uniform() < cfg.solarize_prob[static_cast<size_t>(view_index)]) {
    out = solarize(out, cfg.solarize_threshold);
  }
  return out;
}

MaskPattern sample_mask(Rng& rng, int64_t n_tokens, double mask_ratio) {
  SIM_CHECK(n_tokens >= 1, "sample_mask: token count " << n_tokens << " must be positive");
  int64_t n_visible = static_cast<int64_t>(std::llround((1.0 - mask_ratio) * static_cast<double>(n_tokens)));
  SIM_CHECK(n_visible >= 1, "sample_mask: ratio " << mask_ratio << " over " << n_tokens
                                                  << " tokens leaves no visible token");

  // partial Fisher-Yates: first n_visible slots become the sample
  std::vector<int64_t> idx(static_cast<size_t>(n_tokens));
  std::iota(idx.begin(), idx.end(), 0);
  for (int64_t i = 0; i < n_visible; ++i) {
    int64_t j = i + static_cast<int64_t>(rng.bounded(static_cast<uint64_t>(n_tokens - i)));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  MaskPattern m;
  m.total = n_tokens;
  m.visible.assign(idx.begin(), idx.begin() + n_visible);
  std::sort(m.visible.begin(), m.visible.end());
  return m;
}

Image normalize_image(const Image& img, const std::array<double, 3>& mean,
                      const std::array<double, 3>& stddev) {
  for (int c = 0; c < 3; ++c)
    SIM_CHECK(stddev[static_cast<size_t>(c)] > 0.0,
              "normalize_image: channel " << c << " std must be positive");
  Image out(img.h, img.w);
  for (int64_t i = 0; i < img.h * img.w; ++i) {
    for (int c = 0; c < 3; ++c) {
      size_t u = static_cast<size_t>(i * 3 + c);
      out.px[u] = static_cast<float>((static_cast<double>(img.px[u]) - mean[static_cast<size_t>(c)]) /
                                     stddev[static_cast<size_t>(c)]);
    }
  }
  return out;
}

ViewPair make_view_pair(Rng& rng, const Image& raw, const AugmentConfig& cfg, bool same_view,
                        int64_t image_size, int64_t n_tokens, const std::array<double, 3>& mean,
                        const std::array<double, 3>& stddev) {
  cfg.validate();
  SIM_CHECK(raw.h > 0 && raw.w > 0, "make_view_pair: empty raw image");

  ViewPair pair;
  pair.flipped = rng.uniform() < cfg.flip_prob;
  const Image base = pair.flipped ? hflip(raw) : raw;

  pair.crop_a = sample_crop(rng, base.h, base.w, cfg);
  pair.crop_b = same_view ? pair.crop_a : sample_crop(rng, base.h, base.w, cfg);

  Image view_a = resize_bilinear(
      crop_image(base, pair.crop_a.top, pair.crop_a.left, pair.crop_a.height, pair.crop_a.width),
      image_size, image_size);
  view_a = apply_color(rng, view_a, 0, cfg);

  Image view_b;
  if (same_view) {
    view_b = view_a;  // one augmented copy feeds both branches
  } else {
    view_b = resize_bilinear(
        crop_image(base, pair.crop_b.top, pair.crop_b.left, pair.crop_b.height, pair.crop_b.width),
        image_size, image_size);
    view_b = apply_color(rng, view_b, 1, cfg);
  }

  pair.image_a = normalize_image(view_a, mean, stddev);
  pair.image_b = normalize_image(view_b, mean, stddev);
  pair.mask = sample_mask(rng, n_tokens, cfg.mask_ratio);
  return pair;
}

Tensor stack_images(const std::vector<const Image*>& images, DType dt) {
  SIM_CHECK(!images.empty(), "stack_images: no images");
  int64_t h = images[0]->h, w = images[0]->w;
  int64_t b = static_cast<int64_t>(images.size());
  Tensor out = Tensor::zeros({b, h, w, 3}, dt);
  for (int64_t i = 0; i < b; ++i) {
    const Image& im = *images[static_cast<size_t>(i)];
    SIM_CHECK(im.h == h && im.w == w, "stack_images: image " << i << " is " << im.h << "x" << im.w
                                                             << ", expected " << h << "x" << w);
    for (size_t k = 0; k < im.px.size(); ++k)
      out.set_value_at(i * h * w * 3 + static_cast<int64_t>(k), im.px[k]);
  }
  return out;
}

}  // namespace sim
