#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "sim/eval.hpp"
#include "sim/trainer.hpp"

using namespace sim;

namespace {

ViTConfig tiny_config() {
  ViTConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.backbone_dim = 8;
  cfg.backbone_depth = 1;
  cfg.backbone_heads = 2;
  cfg.proj_dec_dim = 8;
  cfg.proj_dec_heads = 2;
  cfg.projector_depth = 1;
  cfg.decoder_depth = 1;
  cfg.mlp_ratio = 2;
  return cfg;
}

Dataset random_dataset(int64_t n, uint64_t seed, int64_t side = 16) {
  Dataset d;
  d.root = "<memory>";
  Rng rng(seed);
  for (int64_t i = 0; i < n; ++i) {
    Image img(side, side);
    for (auto& p : img.px) p = static_cast<float>(rng.uniform());
    d.images.push_back(std::move(img));
    d.items.push_back({"img_" + std::to_string(i) + ".ppm", i % 2});
  }
  d.mean = {0.5, 0.5, 0.5};
  d.stddev = {0.25, 0.25, 0.25};
  d.has_stats = true;
  return d;
}

// Bank of rows center[label] + sigma * noise.
FeatureBank cluster_bank(Rng& rng, int64_t per_class, int64_t dim, double sigma) {
  FeatureBank bank;
  const int64_t m = 2 * per_class;
  bank.features = Tensor::zeros({m, dim}, DType::F64);
  for (int64_t i = 0; i < m; ++i) {
    const int64_t label = i < per_class ? 0 : 1;
    bank.labels.push_back(label);
    for (int64_t c = 0; c < dim; ++c) {
      const double center = (c == label) ? 1.0 : 0.0;
      bank.features.set_value_at(i * dim + c, center + sigma * rng.normal());
    }
  }
  return bank;
}

FeatureBank random_bank(Rng& rng, int64_t m, int64_t dim) {
  FeatureBank bank;
  bank.features = Tensor::rand_uniform(rng, {m, dim}, DType::F64, -1.0, 1.0);
  for (int64_t i = 0; i < m; ++i) bank.labels.push_back(static_cast<int64_t>(rng.bounded(2)));
  return bank;
}

// Orthonormal matrix: Gram-Schmidt over a random square one.
Tensor random_rotation(Rng& rng, int64_t dim) {
  Tensor q = Tensor::rand_uniform(rng, {dim, dim}, DType::F64, -1.0, 1.0);
  for (int64_t r = 0; r < dim; ++r) {
    for (int64_t p = 0; p < r; ++p) {
      double dot = 0.0;
      for (int64_t c = 0; c < dim; ++c) dot += q.value_at(r * dim + c) * q.value_at(p * dim + c);
      for (int64_t c = 0; c < dim; ++c)
        q.set_value_at(r * dim + c, q.value_at(r * dim + c) - dot * q.value_at(p * dim + c));
    }
    double norm = 0.0;
    for (int64_t c = 0; c < dim; ++c) norm += q.value_at(r * dim + c) * q.value_at(r * dim + c);
    norm = std::sqrt(norm);
    REQUIRE(norm > 1e-6);
    for (int64_t c = 0; c < dim; ++c) q.set_value_at(r * dim + c, q.value_at(r * dim + c) / norm);
  }
  return q;
}

FeatureBank rotate_bank(const FeatureBank& bank, const Tensor& q) {
  FeatureBank out;
  out.labels = bank.labels;
  out.l2_normalized = bank.l2_normalized;
  const int64_t m = bank.features.dim(0);
  const int64_t d = bank.features.dim(1);
  out.features = Tensor::zeros({m, d}, DType::F64);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t c = 0; c < d; ++c) {
      double s = 0.0;
      for (int64_t k = 0; k < d; ++k)
        s += bank.features.value_at(i * d + k) * q.value_at(k * d + c);
      out.features.set_value_at(i * d + c, s);
    }
  return out;
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("bank covers the dataset in order") {
    Dataset data = random_dataset(6, 4);
    SimModel model(tiny_config(), 9, DType::F32);
    FeatureBank bank = build_bank(model, data, 4);  // uneven final chunk

    CHECK(bank.features.shape() == Shape{6, 8});
    CHECK(bank.l2_normalized);
    REQUIRE(bank.labels.size() == 6);
    for (size_t i = 0; i < 6; ++i) CHECK(bank.labels[i] == data.items[i].label);

    for (int64_t i = 0; i < 6; ++i) {
      double norm = 0.0;
      for (int64_t c = 0; c < 8; ++c) {
        const double v = bank.features.value_at(i * 8 + c);
        REQUIRE(std::isfinite(v));
        norm += v * v;
      }
      CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-5));
    }

    bool rows_differ = false;
    for (int64_t c = 0; c < 8 && !rows_differ; ++c)
      rows_differ = bank.features.value_at(c) != bank.features.value_at(8 + c);
    CHECK(rows_differ);

    // chunk size must not matter
    FeatureBank whole = build_bank(model, data, 64);
    for (int64_t i = 0; i < whole.features.numel(); ++i)
      REQUIRE(whole.features.value_at(i) == doctest::Approx(bank.features.value_at(i)).epsilon(1e-9));
  }

  TEST_CASE("identical images produce identical rows") {
    Dataset data = random_dataset(4, 12);
    data.images[3] = data.images[0];
    SimModel model(tiny_config(), 2, DType::F32);
    FeatureBank bank = build_bank(model, data, 4);
    for (int64_t c = 0; c < 8; ++c)
      CHECK(bank.features.value_at(c) == bank.features.value_at(3 * 8 + c));
  }

  TEST_CASE("knn: a point is its own nearest neighbor") {
    Rng rng(5);
    FeatureBank bank = random_bank(rng, 30, 6);
    CHECK(knn_classify(bank, bank, 1, 0.07) == doctest::Approx(1.0));
  }

  TEST_CASE("knn: clean clusters classify perfectly") {
    Rng rng(6);
    FeatureBank train = cluster_bank(rng, 20, 8, 0.05);
    FeatureBank test = cluster_bank(rng, 10, 8, 0.05);
    CHECK(knn_classify(train, test, 5, 0.07) == doctest::Approx(1.0));
  }

  TEST_CASE("knn: shuffled labels sit at chance") {
    Rng rng(7);
    FeatureBank train = random_bank(rng, 400, 8);
    FeatureBank test = random_bank(rng, 200, 8);
    const double acc = knn_classify(train, test, 20, 0.07);
    CHECK(acc > 0.45);
    CHECK(acc < 0.55);
  }

  TEST_CASE("knn: invariant under a common rotation") {
    Rng rng(8);
    FeatureBank train = cluster_bank(rng, 15, 8, 0.4);  // noisy, accuracy < 1
    FeatureBank test = cluster_bank(rng, 15, 8, 0.4);
    const double base = knn_classify(train, test, 5, 0.07);
    Tensor q = random_rotation(rng, 8);
    const double rotated = knn_classify(rotate_bank(train, q), rotate_bank(test, q), 5, 0.07);
    CHECK(rotated == doctest::Approx(base));
  }

  TEST_CASE("knn: invariant to train order") {
    Rng rng(9);
    FeatureBank train = cluster_bank(rng, 15, 8, 0.4);
    FeatureBank test = cluster_bank(rng, 10, 8, 0.4);
    const double base = knn_classify(train, test, 5, 0.07);

    FeatureBank shuffled;
    const int64_t m = train.features.dim(0);
    std::vector<int64_t> perm(static_cast<size_t>(m));
    std::iota(perm.begin(), perm.end(), 0);
    for (int64_t i = m - 1; i > 0; --i)
      std::swap(perm[static_cast<size_t>(i)], perm[rng.bounded(static_cast<uint64_t>(i + 1))]);
    shuffled.features = Tensor::zeros({m, 8}, DType::F64);
    shuffled.labels.resize(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i) {
      const int64_t src = perm[static_cast<size_t>(i)];
      shuffled.labels[static_cast<size_t>(i)] = train.labels[static_cast<size_t>(src)];
      for (int64_t c = 0; c < 8; ++c)
        shuffled.features.set_value_at(i * 8 + c, train.features.value_at(src * 8 + c));
    }
    CHECK(knn_classify(shuffled, test, 5, 0.07) == doctest::Approx(base));
  }

  TEST_CASE("knn: input validation") {
    Rng rng(10);
    FeatureBank a = random_bank(rng, 10, 4);
    FeatureBank b = random_bank(rng, 5, 6);
    CHECK_THROWS_MSG(knn_classify(a, b, 3, 0.07), Error, "feature dims");
    FeatureBank c = random_bank(rng, 5, 4);
    CHECK_THROWS_MSG(knn_classify(a, c, 0, 0.07), Error, "k must be in [1, 10]");
    CHECK_THROWS_MSG(knn_classify(a, c, 11, 0.07), Error, "k must be in");
    CHECK_THROWS_MSG(knn_classify(a, c, 3, 0.0), Error, "temperature");
    a.labels.pop_back();
    CHECK_THROWS_MSG(knn_classify(a, c, 3, 0.07), Error, "labels");
  }

  TEST_CASE("probe: separable features reach full accuracy") {
    Rng rng(11);
    FeatureBank train = cluster_bank(rng, 25, 4, 0.1);
    FeatureBank test = cluster_bank(rng, 15, 4, 0.1);
    CHECK(linear_probe(train, test, 300, 0.5) == doctest::Approx(1.0));
  }

  TEST_CASE("probe: zero features fall back to the majority class") {
    FeatureBank bank;
    bank.features = Tensor::zeros({10, 4}, DType::F64);
    bank.labels = {1, 1, 1, 1, 1, 1, 1, 0, 0, 0};
    CHECK(linear_probe(bank, bank, 50, 0.5) == doctest::Approx(0.7));
  }

  TEST_CASE("probe: loss decreases monotonically at a small lr") {
    Rng rng(13);
    FeatureBank train = cluster_bank(rng, 20, 6, 0.5);
    std::vector<double> curve;
    linear_probe(train, train, 60, 0.05, &curve);
    REQUIRE(curve.size() == 60);
    CHECK(curve.front() == doctest::Approx(std::log(2.0)));  // zero init: uniform softmax
    for (size_t i = 1; i < curve.size(); ++i) CHECK(curve[i] <= curve[i - 1] + 1e-12);
  }

  TEST_CASE("probe: input validation") {
    Rng rng(14);
    FeatureBank a = random_bank(rng, 10, 4);
    FeatureBank b = random_bank(rng, 5, 6);
    CHECK_THROWS_MSG(linear_probe(a, b, 10, 0.1), Error, "feature dims");
    FeatureBank c = random_bank(rng, 5, 4);
    CHECK_THROWS_MSG(linear_probe(a, c, 0, 0.1), Error, "epochs");
    CHECK_THROWS_MSG(linear_probe(a, c, 10, 0.0), Error, "lr");

    FeatureBank mono = random_bank(rng, 8, 4);
    std::fill(mono.labels.begin(), mono.labels.end(), 2);
    CHECK_THROWS_MSG(linear_probe(mono, c, 10, 0.1), Error, "single class");
  }

  TEST_CASE("probe tracks knn on a briefly trained model") {
    testutil::TempDir tmp("eval_band");
    SyntheticConfig scfg;
    scfg.n_train = 48;
    scfg.n_test = 24;
    scfg.image_size = 8;
    scfg.n_classes = 2;
    scfg.seed = 3;
    generate_synthetic(tmp.path, scfg);
    Dataset train = load_dataset(tmp.path + "/train");
    Dataset test = load_dataset(tmp.path + "/test");

    ViTConfig mcfg = tiny_config();
    SimModel model(mcfg, 44, DType::F32);
    TrainConfig tcfg;
    tcfg.batch_size = 8;
    tcfg.warmup_epochs = 1;
    tcfg.total_epochs = 6;
    tcfg.checkpoint_every = 100;
    AugmentConfig acfg;
    fit(model, train, tcfg, acfg, tmp.path + "/run", "");

    FeatureBank bank_train = build_bank(model, train);
    FeatureBank bank_test = build_bank(model, test);
    const double knn = knn_classify(bank_train, bank_test, 5, 0.07);
    const double probe = linear_probe(bank_train, bank_test, 150, 0.5);
    CHECK(probe >= knn - 0.1);
  }
}
