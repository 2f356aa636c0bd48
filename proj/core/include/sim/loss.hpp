#pragma once

#include "sim/tensor.hpp"

namespace sim {

// Weights for the combined contrastive objective. lambda scales the push away
// from the negative set; alpha_global / alpha_dense mix the image-level and
// token-level terms. Dense-only (0, 1) is the default; (1, 4) works better on
// short schedules.
struct LossConfig {
  double lambda = 1.0;
  double alpha_global = 0.0;
  double alpha_dense = 1.0;
  bool de_center_dense = true;

  void validate() const;
};

struct UniGradStats {
  double alignment = 0.0;   // mean cos(y_i, z_i)
  double uniformity = 0.0;  // mean sum_u cos^2(y_i, u)
};

// One loss evaluation. `loss` is the differentiable scalar; the doubles are
// detached readings for the log. alignment / uniformity describe the dense
// term when it is active, the global term otherwise. feat_std is the
// within-image per-dimension std of the raw prediction tokens, averaged over
// dimensions and images; it drops to zero when the representation collapses.
struct LossReport {
  Tensor loss;
  double total = 0.0;
  double global_term = 0.0;
  double dense_term = 0.0;
  double alignment = 0.0;
  double uniformity = 0.0;
  double feat_std = 0.0;
};

// L = mean_i [ -cos(y_i, z_i) + lambda/2 * sum_u cos^2(y_i, u) ].
// preds (M,D) may carry grad; targets (M,D) and negatives (K,D) are detached.
// The negative term goes through the D x D covariance of the normalized
// negatives, so memory stays O(D^2) no matter how large K gets.
Tensor unigrad_loss(const Tensor& preds, const Tensor& targets, const Tensor& negatives,
                    double lambda, UniGradStats* stats = nullptr);

// The uniformity term sum_u cos^2(y_i, u) for already-normalized rows,
// computed through the d x d negatives covariance; auxiliary memory is
// O(d^2 + m), independent of the negative count.
Tensor unigrad_negative_quad(const Tensor& yh, const Tensor& uh);

// Token-mean image features; negatives are every target global in the batch.
Tensor global_loss(const Tensor& y_b, const Tensor& z_b, double lambda,
                   UniGradStats* stats = nullptr);

// Each token is its own sample; negatives are every target token in the
// batch. de_center first subtracts each image's token mean on both branches.
Tensor dense_loss(const Tensor& y_b, const Tensor& z_b, double lambda, bool de_center,
                  UniGradStats* stats = nullptr);

// alpha_global * global + alpha_dense * dense; zero-weight terms are skipped
// entirely, not just multiplied by zero.
LossReport total_loss(const Tensor& y_b, const Tensor& z_b, const LossConfig& cfg);

// Collapse diagnostic over raw (B,N,D) prediction tokens, see LossReport.
double feature_std(const Tensor& y_b);

}  // namespace sim
