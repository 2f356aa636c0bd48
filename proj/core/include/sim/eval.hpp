#pragma once

#include <cstdint>
#include <vector>

#include "sim/dataset.hpp"
#include "sim/model.hpp"
#include "sim/tensor.hpp"

namespace sim {

// Frozen backbone features for a labeled dataset, one row per image.
struct FeatureBank {
  Tensor features;  // (M, backbone_dim)
  std::vector<int64_t> labels;
  bool l2_normalized = false;
};

// Mean-pooled backbone features in dataset order: every image is resized to
// the model input size, normalized with the dataset stats, and embedded in
// eval mode without gradients. Rows come out L2-normalized, in 64-bit.
FeatureBank build_bank(SimModel& model, const Dataset& data, int64_t batch_size = 64);

// Weighted k-nearest-neighbor top-1 accuracy. Neighbors are ranked by
// cosine similarity and vote with weight exp(sim / temperature); a tied
// vote picks the lowest class id.
double knn_classify(const FeatureBank& train, const FeatureBank& test, int64_t k,
                    double temperature);

// Multinomial logistic regression on frozen features, trained full-batch
// for `epochs` steps of plain gradient descent; returns test accuracy.
// When given, `loss_curve` receives the training cross-entropy per epoch.
double linear_probe(const FeatureBank& train, const FeatureBank& test, int64_t epochs, double lr,
                    std::vector<double>* loss_curve = nullptr);

}  // namespace sim
