#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "helpers.hpp"
#include "sim/dataset.hpp"
#include "sim/image.hpp"

using namespace sim;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

Image flat_image(int64_t h, int64_t w, float r, float g, float b) {
  Image img(h, w);
  for (int64_t i = 0; i < h * w; ++i) {
    img.px[static_cast<size_t>(i * 3 + 0)] = r;
    img.px[static_cast<size_t>(i * 3 + 1)] = g;
    img.px[static_cast<size_t>(i * 3 + 2)] = b;
  }
  return img;
}

}  // namespace

TEST_SUITE("dataset") {
  TEST_CASE("manifest roundtrip keeps items and stats") {
    testutil::TempDir dir("manifest_rt");
    write_ppm((fs::path(dir.path) / "a.ppm").string(), flat_image(2, 2, 0.0f, 0.0f, 0.0f));
    write_ppm((fs::path(dir.path) / "b.ppm").string(), flat_image(2, 2, 1.0f, 1.0f, 1.0f));
    std::array<double, 3> mean{0.5, 0.5, 0.5};
    std::array<double, 3> stddev{0.25, 0.25, 0.25};
    write_manifest(dir.path, {{"a.ppm", 0}, {"b.ppm", 1}}, &mean, &stddev);

    Dataset ds = load_dataset(dir.path);
    CHECK(ds.size() == 2);
    CHECK(ds.num_classes() == 2);
    CHECK(ds.items[0].rel_path == "a.ppm");
    CHECK(ds.items[1].label == 1);
    CHECK(ds.has_stats);
    CHECK(ds.mean[0] == doctest::Approx(0.5));
    CHECK(ds.stddev[2] == doctest::Approx(0.25));
    CHECK(ds.images[1].at(0, 0, 0) == doctest::Approx(1.0));
  }

  TEST_CASE("manifest without stats loads with has_stats false") {
    testutil::TempDir dir("manifest_nostat");
    write_ppm((fs::path(dir.path) / "a.ppm").string(), flat_image(1, 1, 0.5f, 0.5f, 0.5f));
    write_manifest(dir.path, {{"a.ppm", 0}}, nullptr, nullptr);
    Dataset ds = load_dataset(dir.path);
    CHECK(!ds.has_stats);
  }

  TEST_CASE("loading errors name the offending path") {
    testutil::TempDir dir("manifest_bad");
    CHECK_THROWS_MSG(load_dataset(dir.path), Error, "manifest.tsv");

    write_manifest(dir.path, {{"ghost.ppm", 0}}, nullptr, nullptr);
    CHECK_THROWS_MSG(load_dataset(dir.path), Error, "ghost.ppm");

    {
      std::ofstream out(fs::path(dir.path) / "manifest.tsv");
      out << "a.ppm\tnot_a_number\n";
    }
    CHECK_THROWS_MSG(load_dataset(dir.path), Error, "bad label");

    {
      std::ofstream out(fs::path(dir.path) / "manifest.tsv");
      out << "no_tab_here\n";
    }
    CHECK_THROWS_MSG(load_dataset(dir.path), Error, "TAB");

    {
      std::ofstream out(fs::path(dir.path) / "manifest.tsv");
      out << "# only a comment\n";
    }
    CHECK_THROWS_MSG(load_dataset(dir.path), Error, "no entries");
  }

  TEST_CASE("channel stats match a hand-computed oracle") {
    std::vector<Image> imgs;
    imgs.push_back(flat_image(1, 1, 0.0f, 0.2f, 1.0f));
    imgs.push_back(flat_image(1, 1, 1.0f, 0.6f, 1.0f));
    std::array<double, 3> mean{}, stddev{};
    compute_channel_stats(imgs, mean, stddev);
    CHECK(mean[0] == doctest::Approx(0.5));
    CHECK(mean[1] == doctest::Approx(0.4));
    CHECK(mean[2] == doctest::Approx(1.0));
    CHECK(stddev[0] == doctest::Approx(0.5));
    CHECK(stddev[1] == doctest::Approx(0.2).epsilon(1e-6));
    CHECK(stddev[2] == doctest::Approx(0.0).scale(1.0));
  }

  TEST_CASE("synthetic generator writes loadable balanced splits") {
    testutil::TempDir dir("synth_small");
    SyntheticConfig cfg;
    cfg.n_train = 16;
    cfg.n_test = 8;
    cfg.image_size = 16;
    cfg.seed = 5;
    generate_synthetic(dir.path, cfg);

    Dataset train = load_dataset((fs::path(dir.path) / "train").string());
    Dataset test = load_dataset((fs::path(dir.path) / "test").string());
    CHECK(train.size() == 16);
    CHECK(test.size() == 8);
    CHECK(train.num_classes() == 4);
    CHECK(train.has_stats);
    CHECK(test.has_stats);
    // the test manifest carries the training-split constants
    for (int c = 0; c < 3; ++c) {
      CHECK(test.mean[static_cast<size_t>(c)] == train.mean[static_cast<size_t>(c)]);
      CHECK(test.stddev[static_cast<size_t>(c)] == train.stddev[static_cast<size_t>(c)]);
    }

    int per_class[4] = {0, 0, 0, 0};
    for (const auto& it : train.items) per_class[it.label]++;
    for (int c = 0; c < 4; ++c) CHECK(per_class[c] == 4);

    for (const auto& img : train.images) {
      CHECK(img.h == 16);
      CHECK(img.w == 16);
      for (auto p : img.px) {
        CHECK(p >= 0.0f);
        CHECK(p <= 1.0f);
      }
    }
  }

  TEST_CASE("stored stats agree with recomputation on the loaded images") {
    testutil::TempDir dir("synth_stats");
    SyntheticConfig cfg;
    cfg.n_train = 12;
    cfg.n_test = 4;
    cfg.image_size = 12;
    cfg.seed = 9;
    generate_synthetic(dir.path, cfg);
    Dataset train = load_dataset((fs::path(dir.path) / "train").string());
    std::array<double, 3> mean{}, stddev{};
    compute_channel_stats(train.images, mean, stddev);
    // generator quantizes to the 8-bit grid before computing stats, so the
    // manifest values are exact for what a reader sees
    for (int c = 0; c < 3; ++c) {
      CHECK(train.mean[static_cast<size_t>(c)] ==
            doctest::Approx(mean[static_cast<size_t>(c)]).epsilon(1e-12));
      CHECK(train.stddev[static_cast<size_t>(c)] ==
            doctest::Approx(stddev[static_cast<size_t>(c)]).epsilon(1e-12));
    }
  }

  TEST_CASE("generation is deterministic per seed") {
    testutil::TempDir d1("synth_det1");
    testutil::TempDir d2("synth_det2");
    SyntheticConfig cfg;
    cfg.n_train = 8;
    cfg.n_test = 4;
    cfg.image_size = 12;
    cfg.seed = 21;
    generate_synthetic(d1.path, cfg);
    generate_synthetic(d2.path, cfg);
    for (const char* rel : {"train/manifest.tsv", "test/manifest.tsv", "train/img_00003.ppm",
                            "test/img_00001.ppm"}) {
      CHECK(slurp((fs::path(d1.path) / rel).string()) ==
            slurp((fs::path(d2.path) / rel).string()));
    }
    SyntheticConfig other = cfg;
    other.seed = 22;
    testutil::TempDir d3("synth_det3");
    generate_synthetic(d3.path, other);
    CHECK(slurp((fs::path(d1.path) / "train/img_00003.ppm").string()) !=
          slurp((fs::path(d3.path) / "train/img_00003.ppm").string()));
  }

  TEST_CASE("shapes keep luma contrast against their background") {
    testutil::TempDir dir("synth_contrast");
    SyntheticConfig cfg;
    cfg.n_train = 20;
    cfg.n_test = 4;
    cfg.image_size = 24;
    cfg.seed = 3;
    generate_synthetic(dir.path, cfg);
    Dataset train = load_dataset((fs::path(dir.path) / "train").string());
    for (const auto& img : train.images) {
      Image g = grayscale(img);
      float lo = 1.0f, hi = 0.0f;
      for (auto p : g.px) {
        lo = std::min(lo, p);
        hi = std::max(hi, p);
      }
      // the colors were drawn with at least 0.25 luma separation
      CHECK(hi - lo >= 0.2f);
    }
  }

  TEST_CASE("generator validates its configuration") {
    testutil::TempDir dir("synth_badcfg");
    SyntheticConfig cfg;
    cfg.n_classes = 7;
    CHECK_THROWS_MSG(generate_synthetic(dir.path, cfg), Error, "n_classes");
    cfg = SyntheticConfig{};
    cfg.image_size = 4;
    CHECK_THROWS_MSG(generate_synthetic(dir.path, cfg), Error, "image_size");
    cfg = SyntheticConfig{};
    cfg.n_test = 0;
    CHECK_THROWS_MSG(generate_synthetic(dir.path, cfg), Error, "positive");
  }
}
