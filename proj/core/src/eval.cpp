#include "sim/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sim/error.hpp"
#include "sim/ops.hpp"
#include "sim/tape.hpp"

namespace sim {

namespace {

// (rows, dim) of a rank-2 feature matrix, with the bank's labels checked
// against it.
std::pair<int64_t, int64_t> bank_dims(const FeatureBank& bank, const char* who) {
  SIM_CHECK(bank.features.rank() == 2, who << ": features must be rank 2, got "
                                           << shape_str(bank.features.shape()));
  const int64_t rows = bank.features.dim(0);
  SIM_CHECK(rows == static_cast<int64_t>(bank.labels.size()),
            who << ": " << rows << " feature rows but " << bank.labels.size() << " labels");
  return {rows, bank.features.dim(1)};
}

std::vector<double> to_doubles(const Tensor& t) {
  std::vector<double> out(static_cast<size_t>(t.numel()));
  for (int64_t i = 0; i < t.numel(); ++i) out[static_cast<size_t>(i)] = t.value_at(i);
  return out;
}

int64_t max_label(const std::vector<int64_t>& labels) {
  int64_t m = 0;
  for (int64_t l : labels) {
    SIM_CHECK(l >= 0, "labels must be non-negative, got " << l);
    m = std::max(m, l);
  }
  return m;
}

}  // namespace

FeatureBank build_bank(SimModel& model, const Dataset& data, int64_t batch_size) {
  SIM_CHECK(data.size() >= 1, "build_bank: dataset at " << data.root << " is empty");
  SIM_CHECK(batch_size >= 1, "build_bank: batch_size must be >= 1");
  const int64_t n = data.size();
  const int64_t s = model.config().image_size;
  const int64_t d = model.config().backbone_dim;

  FeatureBank bank;
  bank.features = Tensor::zeros({n, d}, DType::F64);
  bank.labels.reserve(static_cast<size_t>(n));
  for (const auto& item : data.items) bank.labels.push_back(item.label);

  for (int64_t lo = 0; lo < n; lo += batch_size) {
    const int64_t hi = std::min(n, lo + batch_size);
    std::vector<Image> prepared;
    prepared.reserve(static_cast<size_t>(hi - lo));
    std::vector<const Image*> ptrs;
    for (int64_t i = lo; i < hi; ++i) {
      const Image& raw = data.images[static_cast<size_t>(i)];
      Image sized = (raw.h == s && raw.w == s) ? raw : resize_bilinear(raw, s, s);
      prepared.push_back(normalize_image(sized, data.mean, data.stddev));
      ptrs.push_back(&prepared.back());
    }
    Tensor batch = stack_images(ptrs, model.dtype());
    Tensor feats = model.extract_features(batch);
    for (int64_t r = 0; r < hi - lo; ++r)
      for (int64_t c = 0; c < d; ++c)
        bank.features.set_value_at((lo + r) * d + c, feats.value_at(r * d + c));
  }

  {
    NoGradScope ng;
    bank.features = l2_normalize(bank.features, 1);
  }
  bank.l2_normalized = true;
  return bank;
}

double knn_classify(const FeatureBank& train, const FeatureBank& test, int64_t k,
                    double temperature) {
  const auto [m, d] = bank_dims(train, "knn_classify");
  const auto [n, d_test] = bank_dims(test, "knn_classify");
  SIM_CHECK(d == d_test,
            "knn_classify: feature dims disagree, train " << d << " vs test " << d_test);
  SIM_CHECK(k >= 1 && k <= m, "knn_classify: k must be in [1, " << m << "], got " << k);
  SIM_CHECK(temperature > 0.0, "knn_classify: temperature must be positive");

  const std::vector<double> tf = to_doubles(train.features);
  const std::vector<double> qf = to_doubles(test.features);
  std::vector<double> tnorm(static_cast<size_t>(m));
  for (int64_t j = 0; j < m; ++j) {
    double s = 0.0;
    for (int64_t c = 0; c < d; ++c) {
      const double v = tf[static_cast<size_t>(j * d + c)];
      s += v * v;
    }
    tnorm[static_cast<size_t>(j)] = std::sqrt(s);
  }

  const int64_t n_classes = max_label(train.labels) + 1;
  std::vector<double> sims(static_cast<size_t>(m));
  std::vector<int64_t> order(static_cast<size_t>(m));
  std::vector<double> scores(static_cast<size_t>(n_classes));
  int64_t correct = 0;
  for (int64_t i = 0; i < n; ++i) {
    double qn = 0.0;
    for (int64_t c = 0; c < d; ++c) {
      const double v = qf[static_cast<size_t>(i * d + c)];
      qn += v * v;
    }
    qn = std::sqrt(qn);
    for (int64_t j = 0; j < m; ++j) {
      double dot = 0.0;
      for (int64_t c = 0; c < d; ++c)
        dot += qf[static_cast<size_t>(i * d + c)] * tf[static_cast<size_t>(j * d + c)];
      const double den = qn * tnorm[static_cast<size_t>(j)];
      sims[static_cast<size_t>(j)] = den > 0.0 ? dot / den : 0.0;
    }
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int64_t a, int64_t b) {
      if (sims[static_cast<size_t>(a)] != sims[static_cast<size_t>(b)])
        return sims[static_cast<size_t>(a)] > sims[static_cast<size_t>(b)];
      return a < b;  // deterministic among equal similarities
    });
    std::fill(scores.begin(), scores.end(), 0.0);
    for (int64_t r = 0; r < k; ++r) {
      const int64_t j = order[static_cast<size_t>(r)];
      scores[static_cast<size_t>(train.labels[static_cast<size_t>(j)])] +=
          std::exp(sims[static_cast<size_t>(j)] / temperature);
    }
    int64_t pred = 0;
    for (int64_t c = 1; c < n_classes; ++c)
      if (scores[static_cast<size_t>(c)] > scores[static_cast<size_t>(pred)]) pred = c;
    if (pred == test.labels[static_cast<size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

double linear_probe(const FeatureBank& train, const FeatureBank& test, int64_t epochs, double lr,
                    std::vector<double>* loss_curve) {
  const auto [m, d] = bank_dims(train, "linear_probe");
  const auto [n, d_test] = bank_dims(test, "linear_probe");
  SIM_CHECK(d == d_test,
            "linear_probe: feature dims disagree, train " << d << " vs test " << d_test);
  SIM_CHECK(epochs >= 1, "linear_probe: epochs must be >= 1");
  SIM_CHECK(lr > 0.0, "linear_probe: lr must be positive");
  const bool single_class =
      std::all_of(train.labels.begin(), train.labels.end(),
                  [&](int64_t l) { return l == train.labels.front(); });
  SIM_CHECK(!single_class, "linear_probe: training set has a single class, nothing to separate");
  const int64_t c = std::max(max_label(train.labels), max_label(test.labels)) + 1;

  Tensor x_train = Tensor::zeros({m, d}, DType::F64);
  for (int64_t i = 0; i < m * d; ++i) x_train.set_value_at(i, train.features.value_at(i));
  Tensor onehot = Tensor::zeros({m, c}, DType::F64);
  for (int64_t i = 0; i < m; ++i)
    onehot.set_value_at(i * c + train.labels[static_cast<size_t>(i)], 1.0);

  Tensor w = Tensor::zeros({d, c}, DType::F64);
  Tensor bias = Tensor::zeros({c}, DType::F64);
  w.set_requires_grad(true);
  bias.set_requires_grad(true);
  for (int64_t e = 0; e < epochs; ++e) {
    Tape tape;
    TapeScope scope(tape);
    Tensor logits = add(matmul(x_train, w), bias);
    Tensor ce = neg(mean(sum(mul(log(softmax(logits, 1)), onehot), 1)));
    backward(ce);
    if (loss_curve) loss_curve->push_back(ce.item());
    auto wd = w.data<double>();
    auto wg = w.grad().data<double>();
    for (int64_t i = 0; i < w.numel(); ++i) wd[static_cast<size_t>(i)] -= lr * wg[static_cast<size_t>(i)];
    auto bd = bias.data<double>();
    auto bg = bias.grad().data<double>();
    for (int64_t i = 0; i < bias.numel(); ++i)
      bd[static_cast<size_t>(i)] -= lr * bg[static_cast<size_t>(i)];
    w.zero_grad();
    bias.zero_grad();
  }

  int64_t correct = 0;
  {
    NoGradScope ng;
    Tensor x_test = Tensor::zeros({n, d}, DType::F64);
    for (int64_t i = 0; i < n * d; ++i) x_test.set_value_at(i, test.features.value_at(i));
    Tensor logits = add(matmul(x_test, w), bias);
    for (int64_t i = 0; i < n; ++i) {
      int64_t pred = 0;
      for (int64_t j = 1; j < c; ++j)
        if (logits.value_at(i * c + j) > logits.value_at(i * c + pred)) pred = j;
      if (pred == test.labels[static_cast<size_t>(i)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace sim
