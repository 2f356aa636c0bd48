#include "sim/loss.hpp"

#include <Eigen/Core>

#include <cmath>
#include <string>

#include "sim/error.hpp"
#include "sim/ops.hpp"

namespace sim {

namespace {

// Exact-zero scan. Near-zero rows are handled by the normalization floor;
// only a bitwise all-zero row is unrecoverable.
int64_t find_zero_row(const Tensor& t, int64_t rows, int64_t dim) {
  for (int64_t r = 0; r < rows; ++r) {
    bool all_zero = true;
    for (int64_t c = 0; c < dim && all_zero; ++c) all_zero = t.value_at(r * dim + c) == 0.0;
    if (all_zero) return r;
  }
  return -1;
}

// Image whose centered tokens all vanished, i.e. every token was identical.
int64_t find_degenerate_image(const Tensor& centered) {
  const int64_t B = centered.shape()[0];
  const int64_t per_image = centered.shape()[1] * centered.shape()[2];
  for (int64_t b = 0; b < B; ++b) {
    bool all_zero = true;
    for (int64_t i = 0; i < per_image && all_zero; ++i)
      all_zero = centered.value_at(b * per_image + i) == 0.0;
    if (all_zero) return b;
  }
  return -1;
}

void check_batch_shapes(const Tensor& y_b, const Tensor& z_b, const char* who) {
  SIM_CHECK(y_b.rank() == 3 && z_b.rank() == 3,
            who << ": expects (batch, tokens, dim) inputs, got ranks " << y_b.rank() << " and "
                << z_b.rank());
  SIM_CHECK(y_b.shape() == z_b.shape(), who << ": prediction shape " << shape_str(y_b.shape())
                                            << " != target shape " << shape_str(z_b.shape()));
}

}  // namespace

void LossConfig::validate() const {
  SIM_CHECK(lambda >= 0.0, "LossConfig: lambda must be >= 0, got " << lambda);
  SIM_CHECK(alpha_global >= 0.0, "LossConfig: alpha_global must be >= 0, got " << alpha_global);
  SIM_CHECK(alpha_dense >= 0.0, "LossConfig: alpha_dense must be >= 0, got " << alpha_dense);
  SIM_CHECK(alpha_global + alpha_dense > 0.0,
            "LossConfig: alpha_global + alpha_dense must be positive, both weights are zero");
}

Tensor unigrad_negative_quad(const Tensor& yh, const Tensor& uh) {
  SIM_CHECK(yh.rank() == 2 && uh.rank() == 2 && yh.shape()[1] == uh.shape()[1],
            "unigrad_negative_quad: expects row features of one width");
  const int64_t k = uh.shape()[0];
  const int64_t d = uh.shape()[1];
  // sum_u cos^2(y,u) = yh^T (U^T U) yh with normalized rows, so the negatives
  // collapse into one d x d matrix before touching the tape. The covariance
  // is accumulated straight off uh's rows; the only temporary is d x d no
  // matter how many negatives arrive. uh never receives gradients (the loss
  // detaches its negatives), so the accumulation itself stays off the tape.
  Tensor cov = Tensor::zeros({d, d}, uh.dtype());
  dispatch(uh.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> u(
        uh.data<T>().data(), k, d);
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> c(
        cov.data<T>().data(), d, d);
    c.noalias() = u.transpose() * u;
  });
  check_finite(cov, "unigrad_negative_quad");
  return sum(mul(matmul(yh, cov), yh), 1);
}

Tensor unigrad_loss(const Tensor& preds, const Tensor& targets, const Tensor& negatives,
                    double lambda, UniGradStats* stats) {
  SIM_CHECK(preds.rank() == 2 && targets.rank() == 2 && negatives.rank() == 2,
            "unigrad_loss: expects 2-D row-feature inputs");
  SIM_CHECK(preds.shape() == targets.shape(), "unigrad_loss: prediction shape "
                                                  << shape_str(preds.shape()) << " != target shape "
                                                  << shape_str(targets.shape()));
  const int64_t m = preds.shape()[0];
  const int64_t d = preds.shape()[1];
  SIM_CHECK(m >= 1, "unigrad_loss: needs at least one row");
  SIM_CHECK(negatives.shape()[0] >= 1, "unigrad_loss: needs at least one negative");
  SIM_CHECK(negatives.shape()[1] == d, "unigrad_loss: negatives have dim "
                                           << negatives.shape()[1] << ", rows have dim " << d);
  SIM_CHECK(lambda >= 0.0, "unigrad_loss: lambda must be >= 0, got " << lambda);

  int64_t zr = find_zero_row(preds, m, d);
  SIM_CHECK(zr < 0, "unigrad_loss: prediction row " << zr << " is exactly zero");
  zr = find_zero_row(targets, m, d);
  SIM_CHECK(zr < 0, "unigrad_loss: target row " << zr << " is exactly zero");
  zr = find_zero_row(negatives, negatives.shape()[0], d);
  SIM_CHECK(zr < 0, "unigrad_loss: negative row " << zr << " is exactly zero");

  Tensor yh = l2_normalize(preds, 1);
  Tensor zh = l2_normalize(targets.detach(), 1);
  Tensor uh = l2_normalize(negatives.detach(), 1);

  Tensor align = sum(mul(yh, zh), 1);
  Tensor quad = unigrad_negative_quad(yh, uh);
  Tensor per_row = add(neg(align), scale(quad, 0.5 * lambda));
  Tensor loss = mean(per_row);

  if (stats) {
    double a = 0.0, q = 0.0;
    for (int64_t i = 0; i < m; ++i) {
      a += align.value_at(i);
      q += quad.value_at(i);
    }
    stats->alignment = a / static_cast<double>(m);
    stats->uniformity = q / static_cast<double>(m);
  }
  return loss;
}

Tensor global_loss(const Tensor& y_b, const Tensor& z_b, double lambda, UniGradStats* stats) {
  check_batch_shapes(y_b, z_b, "global_loss");
  const int64_t b = y_b.shape()[0];
  if (b < 2)
    warn("global_loss: batch of " + std::to_string(b) +
         " leaves only the positive as its own negative");
  Tensor y = mean(y_b, 1);
  Tensor z = mean(z_b.detach(), 1);
  return unigrad_loss(y, z, z, lambda, stats);
}

Tensor dense_loss(const Tensor& y_b, const Tensor& z_b, double lambda, bool de_center,
                  UniGradStats* stats) {
  check_batch_shapes(y_b, z_b, "dense_loss");
  const int64_t b = y_b.shape()[0];
  const int64_t n = y_b.shape()[1];
  const int64_t d = y_b.shape()[2];
  Tensor y = y_b;
  Tensor z = z_b.detach();
  if (de_center) {
    y = sub(y, mean(y, 1, true));
    z = sub(z, mean(z, 1, true));
    int64_t bad = find_degenerate_image(y);
    SIM_CHECK(bad < 0, "dense_loss: image " << bad
                                            << " has identical prediction tokens, nothing is left "
                                               "after removing the per-image mean");
    bad = find_degenerate_image(z);
    SIM_CHECK(bad < 0, "dense_loss: image "
                           << bad
                           << " has identical target tokens, nothing is left after removing the "
                              "per-image mean");
  }
  Tensor yr = reshape(y, {b * n, d});
  Tensor zr = reshape(z, {b * n, d});
  return unigrad_loss(yr, zr, zr, lambda, stats);
}

LossReport total_loss(const Tensor& y_b, const Tensor& z_b, const LossConfig& cfg) {
  cfg.validate();
  check_batch_shapes(y_b, z_b, "total_loss");
  LossReport rep;
  Tensor total;
  bool have_term = false;
  if (cfg.alpha_global > 0.0) {
    UniGradStats st;
    Tensor g = global_loss(y_b, z_b, cfg.lambda, &st);
    rep.global_term = g.item();
    rep.alignment = st.alignment;
    rep.uniformity = st.uniformity;
    total = scale(g, cfg.alpha_global);
    have_term = true;
  }
  if (cfg.alpha_dense > 0.0) {
    UniGradStats st;
    Tensor dl = dense_loss(y_b, z_b, cfg.lambda, cfg.de_center_dense, &st);
    rep.dense_term = dl.item();
    rep.alignment = st.alignment;
    rep.uniformity = st.uniformity;
    Tensor weighted = scale(dl, cfg.alpha_dense);
    total = have_term ? add(total, weighted) : weighted;
    have_term = true;
  }
  rep.loss = total;
  rep.total = total.item();
  rep.feat_std = feature_std(y_b);
  return rep;
}

double feature_std(const Tensor& y_b) {
  SIM_CHECK(y_b.rank() == 3, "feature_std: expects (batch, tokens, dim), got rank " << y_b.rank());
  const int64_t b = y_b.shape()[0];
  const int64_t n = y_b.shape()[1];
  const int64_t d = y_b.shape()[2];
  double acc = 0.0;
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t di = 0; di < d; ++di) {
      double m = 0.0;
      for (int64_t ni = 0; ni < n; ++ni) m += y_b.value_at((bi * n + ni) * d + di);
      m /= static_cast<double>(n);
      double var = 0.0;
      for (int64_t ni = 0; ni < n; ++ni) {
        const double diff = y_b.value_at((bi * n + ni) * d + di) - m;
        var += diff * diff;
      }
      acc += std::sqrt(var / static_cast<double>(n));
    }
  return acc / static_cast<double>(b * d);
}

}  // namespace sim
