#include <cmath>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "sim/tape.hpp"
#include "sim/loss.hpp"
#include "sim/ops.hpp"
#include "sim/rng.hpp"

using namespace sim;

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<double> row_of(const Tensor& t, int64_t r, int64_t d) {
  std::vector<double> out(static_cast<size_t>(d));
  for (int64_t c = 0; c < d; ++c) out[static_cast<size_t>(c)] = t.value_at(r * d + c);
  return out;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  return dot(a, b) / (std::sqrt(dot(a, a)) * std::sqrt(dot(b, b)));
}

// direct transcription of the objective with explicit pairwise loops,
// no covariance shortcut
double brute_unigrad(const Tensor& y, const Tensor& z, const Tensor& u, double lambda) {
  const int64_t m = y.shape()[0], d = y.shape()[1], k = u.shape()[0];
  double total = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    auto yi = row_of(y, i, d);
    auto zi = row_of(z, i, d);
    double neg = 0.0;
    for (int64_t j = 0; j < k; ++j) {
      const double c = cosine(yi, row_of(u, j, d));
      neg += c * c;
    }
    total += -cosine(yi, zi) + 0.5 * lambda * neg;
  }
  return total / static_cast<double>(m);
}

Tensor token_means(const Tensor& t) { return mean(t, 1); }

}  // namespace

TEST_SUITE("loss") {
  TEST_CASE("config validation") {
    LossConfig cfg;
    cfg.validate();
    CHECK(cfg.lambda == 1.0);
    CHECK(cfg.alpha_global == 0.0);
    CHECK(cfg.alpha_dense == 1.0);
    CHECK(cfg.de_center_dense);

    LossConfig bad;
    bad.lambda = -0.5;
    CHECK_THROWS_MSG(bad.validate(), Error, "lambda");
    bad = LossConfig{};
    bad.alpha_global = -1.0;
    CHECK_THROWS_MSG(bad.validate(), Error, "alpha_global");
    bad = LossConfig{};
    bad.alpha_dense = -1.0;
    CHECK_THROWS_MSG(bad.validate(), Error, "alpha_dense");
    bad = LossConfig{};
    bad.alpha_global = 0.0;
    bad.alpha_dense = 0.0;
    CHECK_THROWS_MSG(bad.validate(), Error, "both weights are zero");
  }

  TEST_CASE("identical unit rows with no uniformity weight give -1") {
    Tensor y = Tensor::from_data({1.0, 0.0}, {1, 2}, DType::F64);
    Tensor u = Tensor::from_data({0.0, 1.0}, {1, 2}, DType::F64);
    CHECK(unigrad_loss(y, y, u, 0.0).item() == doctest::Approx(-1.0).epsilon(1e-12));

    // an orthogonal negative contributes nothing even with lambda = 2
    CHECK(unigrad_loss(y, y, u, 2.0).item() == doctest::Approx(-1.0).epsilon(1e-12));

    // the positive itself as the negative contributes cos^2 = 1
    CHECK(unigrad_loss(y, y, y, 2.0).item() == doctest::Approx(0.0).scale(1.0));
  }

  TEST_CASE("covariance form matches the pairwise sum") {
    Rng rng(11);
    for (auto [m, k, d] : std::vector<std::array<int64_t, 3>>{
             {8, 32, 16}, {1, 1, 4}, {64, 64, 32}, {3, 17, 8}}) {
      Tensor y = testutil::rand_t(rng, {m, d});
      Tensor z = testutil::rand_t(rng, {m, d});
      Tensor u = testutil::rand_t(rng, {k, d});
      UniGradStats st;
      const double got = unigrad_loss(y, z, u, 1.3, &st).item();
      const double want = brute_unigrad(y, z, u, 1.3);
      CHECK(got == doctest::Approx(want).epsilon(1e-10));

      // diagnostics agree with direct means
      double a = 0.0;
      for (int64_t i = 0; i < m; ++i) a += cosine(row_of(y, i, d), row_of(z, i, d));
      CHECK(st.alignment == doctest::Approx(a / static_cast<double>(m)).epsilon(1e-10));
      CHECK(st.alignment <= 1.0 + 1e-12);
      CHECK(st.alignment >= -1.0 - 1e-12);
      CHECK(st.uniformity >= -1e-12);
    }
  }

  TEST_CASE("loss only sees feature directions") {
    Rng rng(12);
    Tensor y = testutil::rand_t(rng, {6, 8});
    Tensor z = testutil::rand_t(rng, {6, 8});
    Tensor u = testutil::rand_t(rng, {10, 8});
    const double base = unigrad_loss(y, z, u, 0.7).item();
    for (double c : {0.5, 3.7, 250.0}) {
      CHECK(unigrad_loss(scale(y, c), z, u, 0.7).item() == doctest::Approx(base).epsilon(1e-10));
    }
  }

  TEST_CASE("exactly zero rows are rejected, tiny rows are not") {
    Rng rng(13);
    Tensor y = testutil::rand_t(rng, {3, 4});
    Tensor z = testutil::rand_t(rng, {3, 4});
    Tensor u = testutil::rand_t(rng, {2, 4});

    Tensor y0 = y.clone();
    for (int64_t c = 0; c < 4; ++c) y0.set_value_at(1 * 4 + c, 0.0);
    CHECK_THROWS_MSG(unigrad_loss(y0, z, u, 1.0), Error, "prediction row 1");

    Tensor z0 = z.clone();
    for (int64_t c = 0; c < 4; ++c) z0.set_value_at(2 * 4 + c, 0.0);
    CHECK_THROWS_MSG(unigrad_loss(y, z0, u, 1.0), Error, "target row 2");

    Tensor u0 = u.clone();
    for (int64_t c = 0; c < 4; ++c) u0.set_value_at(c, 0.0);
    CHECK_THROWS_MSG(unigrad_loss(y, z, u0, 1.0), Error, "negative row 0");

    Tensor ytiny = y.clone();
    for (int64_t c = 0; c < 4; ++c) ytiny.set_value_at(c, c == 0 ? 1e-100 : 0.0);
    CHECK(std::isfinite(unigrad_loss(ytiny, z, u, 1.0).item()));
  }

  TEST_CASE("shape and argument errors") {
    Rng rng(14);
    Tensor y = testutil::rand_t(rng, {3, 4});
    Tensor z = testutil::rand_t(rng, {3, 4});
    Tensor u = testutil::rand_t(rng, {2, 4});
    CHECK_THROWS_MSG(unigrad_loss(y, testutil::rand_t(rng, {3, 5}), u, 1.0), Error, "target shape");
    CHECK_THROWS_MSG(unigrad_loss(y, z, testutil::rand_t(rng, {2, 5}), 1.0), Error, "negatives");
    CHECK_THROWS_MSG(unigrad_loss(y, z, u, -1.0), Error, "lambda");
    CHECK_THROWS_MSG(unigrad_loss(testutil::rand_t(rng, {3, 4, 1}), z, u, 1.0), Error, "2-D");
    CHECK_THROWS_MSG(global_loss(y, z, 1.0), Error, "(batch, tokens, dim)");
  }

  TEST_CASE("global loss averages tokens then applies the row objective") {
    // image 0 aligned with e1, image 1 aligned with e2, orthogonal pairs
    Tensor y_b = Tensor::zeros({2, 3, 4}, DType::F64);
    Tensor z_b = Tensor::zeros({2, 3, 4}, DType::F64);
    for (int64_t n = 0; n < 3; ++n) {
      y_b.set_value_at((0 * 3 + n) * 4 + 0, 2.0);
      z_b.set_value_at((0 * 3 + n) * 4 + 0, 5.0);
      y_b.set_value_at((1 * 3 + n) * 4 + 1, 1.0);
      z_b.set_value_at((1 * 3 + n) * 4 + 1, 0.5);
    }
    CHECK(global_loss(y_b, z_b, 0.0).item() == doctest::Approx(-1.0).epsilon(1e-12));

    // with lambda, each global has itself and one orthogonal negative
    // cos^2 with self = 1, with the other = 0, so each row adds lambda/2
    CHECK(global_loss(y_b, z_b, 2.0).item() == doctest::Approx(0.0).scale(1.0));
  }

  TEST_CASE("global loss matches an independent transcription") {
    Rng rng(15);
    Tensor y_b = testutil::rand_t(rng, {4, 4, 8});
    Tensor z_b = testutil::rand_t(rng, {4, 4, 8});
    Tensor yg = token_means(y_b);
    Tensor zg = token_means(z_b);
    const double want = brute_unigrad(yg, zg, zg, 0.8);
    UniGradStats st;
    const double got = global_loss(y_b, z_b, 0.8, &st).item();
    CHECK(got == doctest::Approx(want).epsilon(1e-10));
    CHECK(st.uniformity > 0.0);

    // single-image batches warn but still produce a finite value
    Tensor y1 = testutil::rand_t(rng, {1, 4, 8});
    Tensor z1 = testutil::rand_t(rng, {1, 4, 8});
    CHECK(std::isfinite(global_loss(y1, z1, 1.0).item()));
  }

  TEST_CASE("dense loss centers per image and matches the pairwise oracle") {
    Rng rng(16);
    const int64_t b = 2, n = 4, d = 8;
    Tensor y_b = testutil::rand_t(rng, {b, n, d});
    Tensor z_b = testutil::rand_t(rng, {b, n, d});

    for (bool de_center : {true, false}) {
      Tensor y = y_b, z = z_b;
      if (de_center) {
        y = sub(y_b, mean(y_b, 1, true));
        z = sub(z_b, mean(z_b, 1, true));
      }
      Tensor yr = reshape(y, {b * n, d});
      Tensor zr = reshape(z, {b * n, d});
      const double want = brute_unigrad(yr, zr, zr, 1.1);
      const double got = dense_loss(y_b, z_b, 1.1, de_center).item();
      CHECK(got == doctest::Approx(want).epsilon(1e-10));
    }
  }

  TEST_CASE("opposite tokens align perfectly after centering") {
    Tensor y_b = Tensor::zeros({1, 2, 3}, DType::F64);
    y_b.set_value_at(0 * 3 + 0, 0.7);
    y_b.set_value_at(1 * 3 + 0, -0.7);
    y_b.set_value_at(0 * 3 + 2, 0.1);
    y_b.set_value_at(1 * 3 + 2, -0.1);
    CHECK(dense_loss(y_b, y_b.clone(), 0.0, true).item() ==
          doctest::Approx(-1.0).epsilon(1e-12));
  }

  TEST_CASE("centering is a per-image shift, so shifted inputs agree") {
    Rng rng(17);
    Tensor y_b = testutil::rand_t(rng, {2, 4, 8});
    Tensor z_b = testutil::rand_t(rng, {2, 4, 8});
    const double base = dense_loss(y_b, z_b, 1.0, true).item();

    Tensor y_s = y_b.clone();
    Tensor z_s = z_b.clone();
    for (int64_t n = 0; n < 4; ++n)
      for (int64_t c = 0; c < 8; ++c) {
        y_s.set_value_at((0 * 4 + n) * 8 + c, y_s.value_at((0 * 4 + n) * 8 + c) + 3.25);
        z_s.set_value_at((1 * 4 + n) * 8 + c, z_s.value_at((1 * 4 + n) * 8 + c) - 1.5);
      }
    CHECK(dense_loss(y_s, z_s, 1.0, true).item() == doctest::Approx(base).epsilon(1e-9));

    // without centering the shift changes the answer
    CHECK(dense_loss(y_s, z_s, 1.0, false).item() !=
          doctest::Approx(dense_loss(y_b, z_b, 1.0, false).item()).epsilon(1e-6));
  }

  TEST_CASE("a fully degenerate image is reported by index and branch") {
    Rng rng(18);
    Tensor y_b = testutil::rand_t(rng, {3, 2, 4});
    Tensor z_b = testutil::rand_t(rng, {3, 2, 4});

    Tensor y_deg = y_b.clone();
    for (int64_t n = 0; n < 2; ++n)
      for (int64_t c = 0; c < 4; ++c) y_deg.set_value_at((1 * 2 + n) * 4 + c, 0.75);
    CHECK_THROWS_MSG(dense_loss(y_deg, z_b, 1.0, true), Error, "image 1");
    CHECK_THROWS_MSG(dense_loss(y_deg, z_b, 1.0, true), Error, "prediction tokens");

    Tensor z_deg = z_b.clone();
    for (int64_t n = 0; n < 2; ++n)
      for (int64_t c = 0; c < 4; ++c) z_deg.set_value_at((2 * 2 + n) * 4 + c, -0.25);
    CHECK_THROWS_MSG(dense_loss(y_b, z_deg, 1.0, true), Error, "image 2");
    CHECK_THROWS_MSG(dense_loss(y_b, z_deg, 1.0, true), Error, "target tokens");

    // the same tensors pass with centering off
    CHECK(std::isfinite(dense_loss(y_deg, z_b, 1.0, false).item()));
  }

  TEST_CASE("total loss mixes terms by weight and skips zero weights") {
    Rng rng(19);
    Tensor y_b = testutil::rand_t(rng, {3, 4, 8});
    Tensor z_b = testutil::rand_t(rng, {3, 4, 8});

    LossConfig cfg;
    cfg.lambda = 0.9;
    cfg.alpha_global = 1.0;
    cfg.alpha_dense = 4.0;
    LossReport rep = total_loss(y_b, z_b, cfg);
    const double g = global_loss(y_b, z_b, cfg.lambda).item();
    const double dl = dense_loss(y_b, z_b, cfg.lambda, true).item();
    CHECK(rep.global_term == doctest::Approx(g).epsilon(1e-12));
    CHECK(rep.dense_term == doctest::Approx(dl).epsilon(1e-12));
    CHECK(rep.total == doctest::Approx(1.0 * g + 4.0 * dl).epsilon(1e-6));
    CHECK(rep.loss.item() == doctest::Approx(rep.total).epsilon(1e-12));
    CHECK(rep.feat_std > 0.0);

    // a degenerate image would make the dense term throw; with its weight at
    // zero the term must never run
    Tensor y_deg = y_b.clone();
    for (int64_t n = 0; n < 4; ++n)
      for (int64_t c = 0; c < 8; ++c) y_deg.set_value_at((0 * 4 + n) * 8 + c, 1.0);
    LossConfig global_only;
    global_only.alpha_global = 1.0;
    global_only.alpha_dense = 0.0;
    LossReport gr = total_loss(y_deg, z_b, global_only);
    CHECK(gr.dense_term == 0.0);
    CHECK(gr.total == doctest::Approx(gr.global_term).epsilon(1e-12));

    LossConfig dense_only;
    CHECK_THROWS_MSG(total_loss(y_deg, z_b, dense_only), Error, "image 0");
    LossReport dr = total_loss(y_b, z_b, dense_only);
    CHECK(dr.global_term == 0.0);
    CHECK(dr.total == doctest::Approx(dr.dense_term).epsilon(1e-12));
  }

  TEST_CASE("gradients match finite differences and never reach the target") {
    Rng rng(20);
    Tensor y_b = testutil::rand_t(rng, {2, 4, 8});
    Tensor z_b = testutil::rand_t(rng, {2, 4, 8});
    y_b.set_requires_grad(true);
    z_b.set_requires_grad(true);

    LossConfig cfg;
    cfg.lambda = 1.0;
    cfg.alpha_global = 1.0;
    cfg.alpha_dense = 4.0;

    Tape tape;
    TapeScope scope(tape);
    LossReport rep = total_loss(y_b, z_b, cfg);
    backward(rep.loss);
    REQUIRE(y_b.has_grad());
    CHECK_FALSE(z_b.has_grad());

    auto loss_at = [&](Tensor& t, int64_t idx, double v) {
      const double old = t.value_at(idx);
      t.set_value_at(idx, v);
      NoGradScope ng;
      const double out = total_loss(y_b, z_b, cfg).total;
      t.set_value_at(idx, old);
      return out;
    };

    const Tensor& g = y_b.grad();
    const double eps = 1e-5;
    for (int64_t idx : {0L, 7L, 13L, 31L, 40L, 63L}) {
      const double x0 = y_b.value_at(idx);
      const double fd = (loss_at(y_b, idx, x0 + eps) - loss_at(y_b, idx, x0 - eps)) / (2 * eps);
      const double an = g.value_at(idx);
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
      CHECK(std::abs(fd - an) / denom < 1e-4);
    }
  }

  TEST_CASE("unigrad gradient on a 4x8 batch") {
    Rng rng(21);
    Tensor y = testutil::rand_t(rng, {4, 8});
    Tensor z = testutil::rand_t(rng, {4, 8});
    Tensor u = testutil::rand_t(rng, {6, 8});
    y.set_requires_grad(true);

    Tape tape;
    TapeScope scope(tape);
    Tensor loss = unigrad_loss(y, z, u, 1.5);
    backward(loss);
    REQUIRE(y.has_grad());

    const double eps = 1e-4;
    const Tensor& g = y.grad();
    for (int64_t idx = 0; idx < 32; idx += 5) {
      const double x0 = y.value_at(idx);
      double lo, hi;
      {
        NoGradScope ng;
        y.set_value_at(idx, x0 + eps);
        hi = unigrad_loss(y, z, u, 1.5).item();
        y.set_value_at(idx, x0 - eps);
        lo = unigrad_loss(y, z, u, 1.5).item();
        y.set_value_at(idx, x0);
      }
      const double fd = (hi - lo) / (2 * eps);
      const double an = g.value_at(idx);
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
      CHECK(std::abs(fd - an) / denom < 1e-4);
    }
  }

  TEST_CASE("feature std reads within-image token spread") {
    // one image, two tokens, one dim: values 0 and 2, population std = 1
    Tensor t = Tensor::from_data({0.0, 2.0}, {1, 2, 1}, DType::F64);
    CHECK(feature_std(t) == doctest::Approx(1.0).epsilon(1e-12));

    // identical tokens collapse the statistic to zero
    Tensor flat = Tensor::full({2, 3, 4}, 0.8, DType::F64);
    CHECK(feature_std(flat) == doctest::Approx(0.0).scale(1.0));

    // hand-computed two-dim case: dim 0 spread {1,3} std 1, dim 1 spread {2,2} std 0
    Tensor two = Tensor::from_data({1.0, 2.0, 3.0, 2.0}, {1, 2, 2}, DType::F64);
    CHECK(feature_std(two) == doctest::Approx(0.5).epsilon(1e-12));

    Rng rng(22);
    CHECK(feature_std(testutil::rand_t(rng, {2, 8, 4})) > 0.1);
  }
}
