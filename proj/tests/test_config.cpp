#include <fstream>

#include "doctest.h"
#include "helpers.hpp"
#include "sim/config.hpp"

using namespace sim;

TEST_SUITE("config") {
  TEST_CASE("defaults cover the full registry with sane values") {
    Config c = Config::defaults();
    CHECK(c.get_int("model.image_size") == 32);
    CHECK(c.get_int("model.patch_size") == 4);
    CHECK(c.get_string("model.norm_kind") == "bn");
    CHECK(c.get_double("train.base_lr") == doctest::Approx(1.5e-4));
    CHECK(c.get_int("train.batch_size") == 64);
    CHECK(c.get_double("train.weight_decay") == doctest::Approx(0.05));
    CHECK(c.get_double("train.beta1") == doctest::Approx(0.9));
    CHECK(c.get_double("train.beta2") == doctest::Approx(0.95));
    CHECK(c.get_int("train.warmup_epochs") == 5);
    CHECK(c.get_int("train.total_epochs") == 100);
    CHECK(c.get_double("loss.alpha_global") == 0.0);
    CHECK(c.get_double("loss.alpha_dense") == 1.0);
    CHECK(c.get_bool("loss.de_center_dense"));
    CHECK(c.get_double("ema.base") == doctest::Approx(0.99));
    CHECK(c.get_double("ema.final") == doctest::Approx(1.0));
    CHECK(c.get_double("augment.mask_ratio") == doctest::Approx(0.75));
    CHECK_FALSE(c.get_bool("augment.same_view"));
    CHECK(c.get_int("eval.knn_k") == 20);
    CHECK(c.get_double("eval.knn_temperature") == doctest::Approx(0.07));
  }

  TEST_CASE("unknown keys are rejected everywhere") {
    Config c = Config::defaults();
    CHECK_THROWS_MSG(c.set("model.nonsense", "1"), Error, "unknown config key 'model.nonsense'");
    CHECK_THROWS_MSG(c.get_string("nope"), Error, "unknown config key");
    CHECK_THROWS_MSG(c.apply_override("typo.lr=3"), Error, "unknown config key");
    CHECK_THROWS_MSG(c.apply_override("no_equals_here"), Error, "key=value");
  }

  TEST_CASE("typed getters name the key on a bad value") {
    Config c = Config::defaults();
    c.set("train.base_lr", "fast");
    CHECK_THROWS_MSG(c.get_double("train.base_lr"), Error, "train.base_lr");
    c.set("train.batch_size", "64.5");
    CHECK_THROWS_MSG(c.get_int("train.batch_size"), Error, "train.batch_size");
    c.set("augment.same_view", "maybe");
    CHECK_THROWS_MSG(c.get_bool("augment.same_view"), Error, "augment.same_view");
    c.set("augment.same_view", "1");
    CHECK(c.get_bool("augment.same_view"));
    c.set("augment.same_view", "0");
    CHECK_FALSE(c.get_bool("augment.same_view"));
  }

  TEST_CASE("files overlay defaults, with comments and loose spacing") {
    testutil::TempDir tmp("config");
    const std::string path = tmp.path + "/run.cfg";
    {
      std::ofstream f(path);
      f << "# desk run\n";
      f << "train.batch_size = 16\n";
      f << "loss.alpha_global=1   # short schedule\n";
      f << "\n";
      f << "model.norm_kind =ln\n";
    }
    Config c = Config::from_file(path);
    CHECK(c.get_int("train.batch_size") == 16);
    CHECK(c.get_double("loss.alpha_global") == 1.0);
    CHECK(c.get_string("model.norm_kind") == "ln");
    CHECK(c.get_int("model.image_size") == 32);  // untouched default

    CHECK_THROWS_MSG(Config::from_file(tmp.path + "/missing.cfg"), Error, "cannot open");

    const std::string bad = tmp.path + "/bad.cfg";
    {
      std::ofstream f(bad);
      f << "train.batch_size 16\n";
    }
    CHECK_THROWS_MSG(Config::from_file(bad), Error, "no '='");

    const std::string unknown = tmp.path + "/unknown.cfg";
    {
      std::ofstream f(unknown);
      f << "trainer.lr = 1\n";
    }
    CHECK_THROWS_MSG(Config::from_file(unknown), Error, "unknown.cfg:1");
  }

  TEST_CASE("echo round-trips through from_text") {
    Config c = Config::defaults();
    c.set("train.seed", "42");
    c.set("model.backbone_dim", "48");
    const std::string text = c.echo();
    Config back = Config::from_text(text, "echo");
    CHECK(back.echo() == text);
    CHECK(back.get_int("train.seed") == 42);
    CHECK(back.get_int("model.backbone_dim") == 48);
  }

  TEST_CASE("typed views build validated module configs") {
    Config c = Config::defaults();
    ViTConfig m = model_config(c);
    CHECK(m.image_size == 32);
    CHECK(m.norm_kind == NormKind::BatchNorm);
    CHECK(m.n_tokens() == 64);

    AugmentConfig a = augment_config(c);
    CHECK(a.mask_ratio == doctest::Approx(0.75));
    CHECK(a.blur_prob[0] == doctest::Approx(1.0));
    CHECK(a.solarize_prob[1] == doctest::Approx(0.2));

    SyntheticConfig s = synthetic_config(c);
    CHECK(s.n_train == 2000);
    CHECK(s.n_test == 500);
    CHECK(s.n_classes == 4);

    c.set("model.image_size", "30");
    CHECK_THROWS_MSG(model_config(c), Error, "divisible");
    c.set("model.image_size", "32");
    c.set("augment.mask_ratio", "1.5");
    CHECK_THROWS_MSG(augment_config(c), Error, "mask_ratio");
  }
}
