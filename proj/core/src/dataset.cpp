#include "sim/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <utility>

#include "sim/error.hpp"
#include "sim/rng.hpp"

namespace fs = std::filesystem;

namespace sim {

int64_t Dataset::num_classes() const {
  int64_t hi = -1;
  for (const auto& it : items) hi = std::max(hi, it.label);
  return hi + 1;
}

Dataset load_dataset(const std::string& dir) {
  const fs::path manifest = fs::path(dir) / "manifest.tsv";
  std::ifstream in(manifest);
  SIM_CHECK(in.good(), "dataset: cannot open " << manifest.string());

  Dataset ds;
  ds.root = dir;
  bool saw_mean = false;
  bool saw_std = false;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream ls(line.substr(1));
      std::string key;
      ls >> key;
      if (key == "mean" || key == "std") {
        std::array<double, 3> v{};
        ls >> v[0] >> v[1] >> v[2];
        SIM_CHECK(!ls.fail(), "dataset: malformed stats comment at " << manifest.string() << ":"
                                                                     << lineno << ": " << line);
        (key == "mean" ? ds.mean : ds.stddev) = v;
        (key == "mean" ? saw_mean : saw_std) = true;
      }
      continue;
    }
    const auto tab = line.find('\t');
    SIM_CHECK(tab != std::string::npos && tab > 0,
              "dataset: expected `path<TAB>label` at " << manifest.string() << ":" << lineno);
    DatasetItem item;
    item.rel_path = line.substr(0, tab);
    const std::string label_str = line.substr(tab + 1);
    try {
      size_t used = 0;
      item.label = std::stoll(label_str, &used);
      SIM_CHECK(used == label_str.size() && item.label >= 0,
                "dataset: bad label `" << label_str << "` at " << manifest.string() << ":"
                                       << lineno);
    } catch (const std::invalid_argument&) {
      throw Error("dataset: bad label `" + label_str + "` at " + manifest.string() + ":" +
                  std::to_string(lineno));
    }
    ds.items.push_back(std::move(item));
  }
  SIM_CHECK(!ds.items.empty(), "dataset: no entries in " << manifest.string());
  ds.has_stats = saw_mean && saw_std;

  ds.images.reserve(ds.items.size());
  for (const auto& item : ds.items) {
    ds.images.push_back(read_ppm((fs::path(dir) / item.rel_path).string()));
  }
  return ds;
}

void compute_channel_stats(const std::vector<Image>& images, std::array<double, 3>& mean,
                           std::array<double, 3>& stddev) {
  SIM_CHECK(!images.empty(), "compute_channel_stats: no images");
  double sum[3] = {0, 0, 0};
  double sumsq[3] = {0, 0, 0};
  int64_t count = 0;
  for (const auto& img : images) {
    const int64_t n = img.h * img.w;
    for (int64_t i = 0; i < n; ++i) {
      for (int c = 0; c < 3; ++c) {
        const double v = img.px[static_cast<size_t>(i * 3 + c)];
        sum[c] += v;
        sumsq[c] += v * v;
      }
    }
    count += n;
  }
  for (int c = 0; c < 3; ++c) {
    mean[c] = sum[c] / static_cast<double>(count);
    const double var = sumsq[c] / static_cast<double>(count) - mean[c] * mean[c];
    stddev[c] = std::sqrt(std::max(var, 0.0));
  }
}

void write_manifest(const std::string& dir, const std::vector<DatasetItem>& items,
                    const std::array<double, 3>* mean, const std::array<double, 3>* stddev) {
  const fs::path p = fs::path(dir) / "manifest.tsv";
  std::ofstream out(p);
  SIM_CHECK(out.good(), "dataset: cannot write " << p.string());
  out << std::setprecision(17);
  if (mean != nullptr && stddev != nullptr) {
    out << "# mean " << (*mean)[0] << " " << (*mean)[1] << " " << (*mean)[2] << "\n";
    out << "# std " << (*stddev)[0] << " " << (*stddev)[1] << " " << (*stddev)[2] << "\n";
  }
  for (const auto& item : items) {
    out << item.rel_path << "\t" << item.label << "\n";
  }
  out.flush();
  SIM_CHECK(out.good(), "dataset: write failed for " << p.string());
}

namespace {

constexpr double kPi = 3.14159265358979323846;

struct ShapeParams {
  int64_t cls = 0;
  double cx = 0, cy = 0;
  double r = 0;       // base size scale, pixels
  double rot = 0;     // radians; circle ignores it
  double thick = 0;   // cross arm half-width as a fraction of r
  double fg[3] = {0, 0, 0};
  double bg[3] = {0, 0, 0};
};

double luma_of(const double c[3]) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; }

ShapeParams sample_shape(Rng& rng, int64_t cls, int64_t size) {
  ShapeParams p;
  p.cls = cls;
  const double s = static_cast<double>(size);
  p.cx = s * (0.5 + 0.30 * (rng.uniform() - 0.5));
  p.cy = s * (0.5 + 0.30 * (rng.uniform() - 0.5));
  p.r = s * rng.uniform(0.20, 0.34);
  p.rot = rng.uniform(-kPi / 4.0, kPi / 4.0);
  p.thick = rng.uniform(0.28, 0.42);
  // Colors are class-independent; require enough luma contrast that the
  // shape survives a grayscale augmentation.
  for (;;) {
    for (int c = 0; c < 3; ++c) p.bg[c] = rng.uniform();
    for (int c = 0; c < 3; ++c) p.fg[c] = rng.uniform();
    if (std::abs(luma_of(p.fg) - luma_of(p.bg)) >= 0.25) break;
  }
  return p;
}

bool in_triangle(double x, double y, double circumradius) {
  double vx[3];
  double vy[3];
  for (int k = 0; k < 3; ++k) {
    const double a = kPi / 2.0 + 2.0 * kPi * k / 3.0;
    vx[k] = circumradius * std::cos(a);
    vy[k] = circumradius * std::sin(a);
  }
  bool pos = false;
  bool neg = false;
  for (int k = 0; k < 3; ++k) {
    const int j = (k + 1) % 3;
    const double c = (vx[j] - vx[k]) * (y - vy[k]) - (vy[j] - vy[k]) * (x - vx[k]);
    if (c > 0) pos = true;
    if (c < 0) neg = true;
  }
  return !(pos && neg);
}

bool inside(const ShapeParams& p, double x, double y) {
  const double dx = x - p.cx;
  const double dy = y - p.cy;
  // Un-rotate into the shape frame.
  const double ca = std::cos(-p.rot);
  const double sa = std::sin(-p.rot);
  const double rx = ca * dx - sa * dy;
  const double ry = sa * dx + ca * dy;
  switch (p.cls) {
    case 0:
      return dx * dx + dy * dy <= p.r * p.r;
    case 1: {
      const double half = p.r * 0.82;
      return std::abs(rx) <= half && std::abs(ry) <= half;
    }
    case 2:
      return in_triangle(rx, ry, p.r * 1.25);
    case 3: {
      const double arm = p.r * 1.1;
      const double t = p.thick * p.r;
      return (std::abs(rx) <= arm && std::abs(ry) <= t) ||
             (std::abs(ry) <= arm && std::abs(rx) <= t);
    }
    default:
      throw Error("synthetic: unknown shape class " + std::to_string(p.cls));
  }
}

Image render_shape(const ShapeParams& p, int64_t size) {
  constexpr int kSub = 4;  // 4x4 coverage supersampling
  Image img(size, size);
  for (int64_t y = 0; y < size; ++y) {
    for (int64_t x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          const double px = static_cast<double>(x) + (sx + 0.5) / kSub;
          const double py = static_cast<double>(y) + (sy + 0.5) / kSub;
          if (inside(p, px, py)) ++hits;
        }
      }
      const double cov = static_cast<double>(hits) / (kSub * kSub);
      for (int c = 0; c < 3; ++c) {
        const double v = p.bg[c] + cov * (p.fg[c] - p.bg[c]);
        // Quantize to the PPM's 8-bit grid so in-memory pixels match what a
        // reader sees and the stored stats are exact.
        img.at(y, x, c) = static_cast<float>(std::round(v * 255.0) / 255.0);
      }
    }
  }
  return img;
}

}  // namespace

void generate_synthetic(const std::string& out_dir, const SyntheticConfig& cfg) {
  SIM_CHECK(cfg.n_classes >= 2 && cfg.n_classes <= 4,
            "synthetic: n_classes must be in [2,4], got " << cfg.n_classes);
  SIM_CHECK(cfg.image_size >= 8, "synthetic: image_size must be >= 8, got " << cfg.image_size);
  SIM_CHECK(cfg.n_train >= 1 && cfg.n_test >= 1,
            "synthetic: split sizes must be positive, got train=" << cfg.n_train << " test="
                                                                  << cfg.n_test);

  auto make_split = [&](const char* name, int64_t count, uint64_t salt) {
    const fs::path dir = fs::path(out_dir) / name;
    std::error_code ec;
    fs::create_directories(dir, ec);
    SIM_CHECK(!ec, "synthetic: cannot create " << dir.string() << ": " << ec.message());
    std::vector<DatasetItem> items;
    std::vector<Image> images;
    items.reserve(static_cast<size_t>(count));
    images.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
      const int64_t cls = i % cfg.n_classes;
      Rng rng(derive_seed(cfg.seed, salt, static_cast<uint64_t>(i)));
      const ShapeParams params = sample_shape(rng, cls, cfg.image_size);
      Image img = render_shape(params, cfg.image_size);
      char buf[32];
      std::snprintf(buf, sizeof(buf), "img_%05lld.ppm", static_cast<long long>(i));
      write_ppm((dir / buf).string(), img);
      items.push_back({buf, cls});
      images.push_back(std::move(img));
    }
    return std::make_pair(std::move(items), std::move(images));
  };

  auto [train_items, train_images] = make_split("train", cfg.n_train, 1);
  auto [test_items, test_images] = make_split("test", cfg.n_test, 2);

  std::array<double, 3> mean{};
  std::array<double, 3> stddev{};
  compute_channel_stats(train_images, mean, stddev);
  write_manifest((fs::path(out_dir) / "train").string(), train_items, &mean, &stddev);
  write_manifest((fs::path(out_dir) / "test").string(), test_items, &mean, &stddev);
}

}  // namespace sim
