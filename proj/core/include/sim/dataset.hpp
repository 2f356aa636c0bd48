#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "sim/image.hpp"

namespace sim {

// One manifest row: image path relative to the dataset root plus its label.
struct DatasetItem {
  std::string rel_path;
  int64_t label = 0;
};

// Eagerly loaded labeled-image dataset.
//
// On-disk layout: a directory holding `manifest.tsv` and binary PPM (P6,
// 8-bit) images. Manifest data lines are `relative_path<TAB>label`; lines
// starting with '#' are comments. Two special comments carry the
// normalization constants of the training split:
//   # mean <r> <g> <b>
//   # std <r> <g> <b>
struct Dataset {
  std::string root;
  std::vector<DatasetItem> items;
  std::vector<Image> images;
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};
  bool has_stats = false;

  int64_t size() const { return static_cast<int64_t>(items.size()); }
  // Highest label + 1; labels are expected to be dense starting at 0.
  int64_t num_classes() const;
};

Dataset load_dataset(const std::string& dir);

// Per-channel mean and population std over every pixel of every image.
void compute_channel_stats(const std::vector<Image>& images, std::array<double, 3>& mean,
                           std::array<double, 3>& stddev);

// Writes manifest.tsv under dir. Stats comments are emitted when both
// pointers are non-null.
void write_manifest(const std::string& dir, const std::vector<DatasetItem>& items,
                    const std::array<double, 3>* mean, const std::array<double, 3>* stddev);

struct SyntheticConfig {
  int64_t n_train = 2000;
  int64_t n_test = 500;
  int64_t image_size = 32;
  int64_t n_classes = 4;  // circle, square, triangle, cross
  uint64_t seed = 7;
};

// Procedural shapes-on-color dataset: one centered-ish filled shape per
// image, class = shape kind, colors drawn independently of the class so
// color statistics alone carry no label signal. Writes self-contained
// train/ and test/ splits under out_dir; normalization constants are
// computed on the train split and copied into both manifests so the test
// split is normalized consistently.
void generate_synthetic(const std::string& out_dir, const SyntheticConfig& cfg);

}  // namespace sim
