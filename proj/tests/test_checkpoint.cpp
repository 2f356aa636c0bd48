#include <fstream>

#include "doctest.h"
#include "helpers.hpp"
#include "sim/checkpoint.hpp"
#include "sim/rng.hpp"

using namespace sim;

namespace {

Checkpoint sample_ckpt(Rng& rng) {
  Checkpoint c;
  c.step = 1234;
  c.seed = 99;
  c.config_text = "train.seed = 99\ntrain.batch_size = 8\n";
  c.add("w", testutil::rand_t(rng, {3, 4}));
  Tensor f32 = Tensor::zeros({2, 2, 2}, DType::F32);
  for (int64_t i = 0; i < 8; ++i) f32.set_value_at(i, 0.25 * static_cast<double>(i) - 1.0);
  c.add("bias", f32);
  c.add("scalar", Tensor::full({1}, -7.5, DType::F64));
  return c;
}

}  // namespace

TEST_SUITE("checkpoint") {
  TEST_CASE("round trip preserves everything bit for bit") {
    testutil::TempDir tmp("ckpt");
    Rng rng(31);
    Checkpoint c = sample_ckpt(rng);
    const std::string path = tmp.path + "/model.ckpt";
    save_checkpoint(path, c);

    Checkpoint back = load_checkpoint(path);
    CHECK(back.step == 1234);
    CHECK(back.seed == 99);
    CHECK(back.config_text == c.config_text);
    REQUIRE(back.entries.size() == 3);
    for (size_t i = 0; i < c.entries.size(); ++i) {
      CHECK(back.entries[i].name == c.entries[i].name);
      const Tensor& a = c.entries[i].tensor;
      const Tensor& b = back.entries[i].tensor;
      CHECK(a.dtype() == b.dtype());
      REQUIRE(a.shape() == b.shape());
      for (int64_t j = 0; j < a.numel(); ++j) CHECK(a.value_at(j) == b.value_at(j));
    }

    CHECK(back.find("bias") != nullptr);
    CHECK(back.find("bias")->dtype() == DType::F32);
    CHECK(back.find("ghost") == nullptr);
  }

  TEST_CASE("saving twice produces identical bytes") {
    testutil::TempDir tmp("ckpt_det");
    Rng rng(32);
    Checkpoint c = sample_ckpt(rng);
    save_checkpoint(tmp.path + "/a.ckpt", c);
    save_checkpoint(tmp.path + "/b.ckpt", c);
    std::ifstream fa(tmp.path + "/a.ckpt", std::ios::binary);
    std::ifstream fb(tmp.path + "/b.ckpt", std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);
    CHECK(sa.size() > 0);
  }

  TEST_CASE("duplicate entry names are rejected at build time") {
    Checkpoint c;
    c.add("w", Tensor::zeros({2}, DType::F32));
    CHECK_THROWS_MSG(c.add("w", Tensor::zeros({2}, DType::F32)), Error, "duplicate");
  }

  TEST_CASE("corrupt files are rejected with a reason") {
    testutil::TempDir tmp("ckpt_bad");
    Rng rng(33);
    Checkpoint c = sample_ckpt(rng);
    const std::string path = tmp.path + "/good.ckpt";
    save_checkpoint(path, c);

    CHECK_THROWS_MSG(load_checkpoint(tmp.path + "/absent.ckpt"), Error, "cannot open");

    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    {
      std::string bad = bytes;
      bad[0] = 'X';
      std::ofstream f(tmp.path + "/magic.ckpt", std::ios::binary);
      f << bad;
    }
    CHECK_THROWS_MSG(load_checkpoint(tmp.path + "/magic.ckpt"), Error, "bad magic");

    {
      std::string bad = bytes;
      bad[8] = 9;  // version field
      std::ofstream f(tmp.path + "/version.ckpt", std::ios::binary);
      f << bad;
    }
    CHECK_THROWS_MSG(load_checkpoint(tmp.path + "/version.ckpt"), Error, "version");

    {
      std::string bad = bytes.substr(0, bytes.size() - 5);
      std::ofstream f(tmp.path + "/short.ckpt", std::ios::binary);
      f << bad;
    }
    CHECK_THROWS_MSG(load_checkpoint(tmp.path + "/short.ckpt"), Error, "truncated");

    {
      std::string bad = bytes + "zzz";
      std::ofstream f(tmp.path + "/long.ckpt", std::ios::binary);
      f << bad;
    }
    CHECK_THROWS_MSG(load_checkpoint(tmp.path + "/long.ckpt"), Error, "trailing");
  }
}
