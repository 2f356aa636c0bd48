#include "sim/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace sim {

namespace {

float clamp01(double v) { return static_cast<float>(std::min(1.0, std::max(0.0, v))); }

int read_header_int(std::istream& in, const std::string& path) {
  // PPM headers allow '#' comments anywhere between tokens
  while (true) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  int value = -1;
  in >> value;
  SIM_CHECK(in.good() && value >= 0, "malformed PPM header in " << path);
  return value;
}

}  // namespace

Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  SIM_CHECK(in.is_open(), "cannot open " << path);
  std::string magic;
  in >> magic;
  SIM_CHECK(magic == "P6", path << " is not a binary PPM (want magic P6, got '" << magic << "')");
  int w = read_header_int(in, path);
  int h = read_header_int(in, path);
  int maxval = read_header_int(in, path);
  SIM_CHECK(w > 0 && h > 0, "PPM " << path << " has degenerate size " << w << "x" << h);
  SIM_CHECK(maxval == 255,
            "PPM " << path << " has unsupported maxval " << maxval << ", only 255 is handled");
  in.get();  // single whitespace byte before the raster

  std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  SIM_CHECK(in.gcount() == static_cast<std::streamsize>(raw.size()),
            "PPM " << path << " is truncated");

  Image img(h, w);
  for (size_t i = 0; i < raw.size(); ++i) img.px[i] = static_cast<float>(raw[i]) / 255.0f;
  return img;
}

void write_ppm(const std::string& path, const Image& img) {
  SIM_CHECK(img.h > 0 && img.w > 0, "write_ppm: empty image");
  std::ofstream out(path, std::ios::binary);
  SIM_CHECK(out.is_open(), "cannot write " << path);
  out << "P6\n" << img.w << " " << img.h << "\n255\n";
  std::vector<unsigned char> raw(img.px.size());
  for (size_t i = 0; i < raw.size(); ++i) {
    double v = std::round(static_cast<double>(img.px[i]) * 255.0);
    raw[i] = static_cast<unsigned char>(std::min(255.0, std::max(0.0, v)));
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  SIM_CHECK(out.good(), "failed writing " << path);
}

namespace {

// Per-output-index filter taps for one axis of a separable resample.
struct Taps {
  std::vector<int64_t> first;    // first source index per output index
  std::vector<double> weights;   // ntaps weights per output index
  int64_t ntaps = 0;
};

Taps make_taps(int64_t in_size, int64_t out_size, bool antialias) {
  double scale = static_cast<double>(in_size) / static_cast<double>(out_size);
  double filterscale = antialias ? std::max(scale, 1.0) : 1.0;
  double support = filterscale;  // triangle filter radius 1, scaled

  Taps t;
  t.ntaps = static_cast<int64_t>(std::ceil(support)) * 2 + 1;
  t.first.resize(static_cast<size_t>(out_size));
  t.weights.assign(static_cast<size_t>(out_size * t.ntaps), 0.0);

  for (int64_t o = 0; o < out_size; ++o) {
    double center = (static_cast<double>(o) + 0.5) * scale;
    int64_t xmin = static_cast<int64_t>(std::floor(center - support + 0.5));
    int64_t xmax = static_cast<int64_t>(std::floor(center + support + 0.5));
    xmin = std::max<int64_t>(xmin, 0);
    xmax = std::min(xmax, in_size);
    SIM_CHECK(xmax > xmin, "resize: empty filter window");
    t.first[static_cast<size_t>(o)] = xmin;
    double total = 0.0;
    for (int64_t k = xmin; k < xmax; ++k) {
      double d = (static_cast<double>(k) + 0.5 - center) / filterscale;
      double wgt = std::max(0.0, 1.0 - std::abs(d));
      t.weights[static_cast<size_t>(o * t.ntaps + (k - xmin))] = wgt;
      total += wgt;
    }
    SIM_CHECK(total > 0.0, "resize: degenerate filter weights");
    for (int64_t k = 0; k < t.ntaps; ++k)
      t.weights[static_cast<size_t>(o * t.ntaps + k)] /= total;
  }
  return t;
}

}  // namespace

Image resize_bilinear(const Image& img, int64_t out_h, int64_t out_w, bool antialias) {
  SIM_CHECK(img.h > 0 && img.w > 0, "resize: empty input image");
  SIM_CHECK(out_h > 0 && out_w > 0, "resize: target " << out_h << "x" << out_w << " is empty");

  Taps tx = make_taps(img.w, out_w, antialias);
  // horizontal pass
  Image mid(img.h, out_w);
  for (int64_t y = 0; y < img.h; ++y) {
    for (int64_t x = 0; x < out_w; ++x) {
      int64_t x0 = tx.first[static_cast<size_t>(x)];
      const double* wgt = tx.weights.data() + x * tx.ntaps;
      double acc[3] = {0, 0, 0};
      for (int64_t k = 0; k < tx.ntaps; ++k) {
        double wv = wgt[k];
        if (wv == 0.0) continue;
        int64_t sx = x0 + k;
        if (sx >= img.w) break;
        for (int c = 0; c < 3; ++c) acc[c] += wv * img.at(y, sx, c);
      }
      for (int c = 0; c < 3; ++c) mid.at(y, x, c) = clamp01(acc[c]);
    }
  }
  // vertical pass
  Taps ty = make_taps(img.h, out_h, antialias);
  Image out(out_h, out_w);
  for (int64_t y = 0; y < out_h; ++y) {
    int64_t y0 = ty.first[static_cast<size_t>(y)];
    const double* wgt = ty.weights.data() + y * ty.ntaps;
    for (int64_t x = 0; x < out_w; ++x) {
      double acc[3] = {0, 0, 0};
      for (int64_t k = 0; k < ty.ntaps; ++k) {
        double wv = wgt[k];
        if (wv == 0.0) continue;
        int64_t sy = y0 + k;
        if (sy >= img.h) break;
        for (int c = 0; c < 3; ++c) acc[c] += wv * mid.at(sy, x, c);
      }
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = clamp01(acc[c]);
    }
  }
  return out;
}

Image crop_image(const Image& img, int64_t top, int64_t left, int64_t height, int64_t width) {
  SIM_CHECK(height > 0 && width > 0, "crop: empty region " << height << "x" << width);
  SIM_CHECK(top >= 0 && left >= 0 && top + height <= img.h && left + width <= img.w,
            "crop: region " << height << "x" << width << "+" << top << "+" << left
                            << " escapes image " << img.h << "x" << img.w);
  Image out(height, width);
  for (int64_t y = 0; y < height; ++y) {
    const float* src = img.px.data() + ((top + y) * img.w + left) * 3;
    float* dst = out.px.data() + y * width * 3;
    std::copy(src, src + width * 3, dst);
  }
  return out;
}

Image hflip(const Image& img) {
  Image out(img.h, img.w);
  for (int64_t y = 0; y < img.h; ++y) {
    for (int64_t x = 0; x < img.w; ++x) {
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, img.w - 1 - x, c);
    }
  }
  return out;
}

namespace {
double luma(const Image& img, int64_t y, int64_t x) {
  return 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
}
}  // namespace

Image grayscale(const Image& img) {
  Image out(img.h, img.w);
  for (int64_t y = 0; y < img.h; ++y) {
    for (int64_t x = 0; x < img.w; ++x) {
      float g = clamp01(luma(img, y, x));
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = g;
    }
  }
  return out;
}

Image adjust_brightness(const Image& img, double factor) {
  SIM_CHECK(factor >= 0.0, "adjust_brightness: negative factor " << factor);
  Image out(img.h, img.w);
  for (size_t i = 0; i < img.px.size(); ++i) out.px[i] = clamp01(factor * img.px[i]);
  return out;
}

Image adjust_contrast(const Image& img, double factor) {
  SIM_CHECK(factor >= 0.0, "adjust_contrast: negative factor " << factor);
  // blend against the mean luma of the whole image
  double m = 0.0;
  for (int64_t y = 0; y < img.h; ++y)
    for (int64_t x = 0; x < img.w; ++x) m += luma(img, y, x);
  m /= static_cast<double>(img.h * img.w);
  Image out(img.h, img.w);
  for (size_t i = 0; i < img.px.size(); ++i)
    out.px[i] = clamp01(factor * img.px[i] + (1.0 - factor) * m);
  return out;
}

Image adjust_saturation(const Image& img, double factor) {
  SIM_CHECK(factor >= 0.0, "adjust_saturation: negative factor " << factor);
  // blend against the per-pixel luma
  Image out(img.h, img.w);
  for (int64_t y = 0; y < img.h; ++y) {
    for (int64_t x = 0; x < img.w; ++x) {
      double g = luma(img, y, x);
      for (int c = 0; c < 3; ++c)
        out.at(y, x, c) = clamp01(factor * img.at(y, x, c) + (1.0 - factor) * g);
    }
  }
  return out;
}

namespace {

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  v = mx;
  double d = mx - mn;
  s = mx == 0.0 ? 0.0 : d / mx;
  if (d == 0.0) {
    h = 0.0;
  } else if (mx == r) {
    h = (g - b) / d;
  } else if (mx == g) {
    h = 2.0 + (b - r) / d;
  } else {
    h = 4.0 + (r - g) / d;
  }
  h /= 6.0;
  if (h < 0.0) h += 1.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  h = h - std::floor(h);
  double i = std::floor(h * 6.0);
  double f = h * 6.0 - i;
  double p = v * (1.0 - s);
  double q = v * (1.0 - s * f);
  double t = v * (1.0 - s * (1.0 - f));
  switch (static_cast<int>(i) % 6) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

}  // namespace

Image adjust_hue(const Image& img, double shift) {
  SIM_CHECK(shift >= -0.5 && shift <= 0.5, "adjust_hue: shift " << shift << " outside [-0.5,0.5]");
  Image out(img.h, img.w);
  for (int64_t y = 0; y < img.h; ++y) {
    for (int64_t x = 0; x < img.w; ++x) {
      double h, s, v, r, g, b;
      rgb_to_hsv(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2), h, s, v);
      hsv_to_rgb(h + shift, s, v, r, g, b);
      out.at(y, x, 0) = clamp01(r);
      out.at(y, x, 1) = clamp01(g);
      out.at(y, x, 2) = clamp01(b);
    }
  }
  return out;
}

Image solarize(const Image& img, double threshold) {
  Image out(img.h, img.w);
  for (size_t i = 0; i < img.px.size(); ++i) {
    float p = img.px[i];
    out.px[i] = p >= threshold ? 1.0f - p : p;
  }
  return out;
}

Image gaussian_blur(const Image& img, double sigma, int kernel_size) {
  SIM_CHECK(sigma > 0.0, "gaussian_blur: sigma must be positive, got " << sigma);
  SIM_CHECK(kernel_size >= 1 && kernel_size % 2 == 1,
            "gaussian_blur: kernel size " << kernel_size << " must be odd");
  int radius = kernel_size / 2;
  std::vector<double> kernel(static_cast<size_t>(kernel_size));
  double total = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    double w = std::exp(-0.5 * (static_cast<double>(k) / sigma) * (static_cast<double>(k) / sigma));
    kernel[static_cast<size_t>(k + radius)] = w;
    total += w;
  }
  for (auto& w : kernel) w /= total;

  auto reflect = [](int64_t i, int64_t n) {
    if (n == 1) return int64_t{0};
    while (i < 0 || i >= n) {
      if (i < 0) i = -i;
      if (i >= n) i = 2 * (n - 1) - i;
    }
    return i;
  };

  Image mid(img.h, img.w);
  for (int64_t y = 0; y < img.h; ++y) {
    for (int64_t x = 0; x < img.w; ++x) {
      double acc[3] = {0, 0, 0};
      for (int k = -radius; k <= radius; ++k) {
        int64_t sx = reflect(x + k, img.w);
        double wv = kernel[static_cast<size_t>(k + radius)];
        for (int c = 0; c < 3; ++c) acc[c] += wv * img.at(y, sx, c);
      }
      for (int c = 0; c < 3; ++c) mid.at(y, x, c) = clamp01(acc[c]);
    }
  }
  Image out(img.h, img.w);
  for (int64_t y = 0; y < img.h; ++y) {
    for (int64_t x = 0; x < img.w; ++x) {
      double acc[3] = {0, 0, 0};
      for (int k = -radius; k <= radius; ++k) {
        int64_t sy = reflect(y + k, img.h);
        double wv = kernel[static_cast<size_t>(k + radius)];
        for (int c = 0; c < 3; ++c) acc[c] += wv * mid.at(sy, x, c);
      }
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = clamp01(acc[c]);
    }
  }
  return out;
}

}  // namespace sim
