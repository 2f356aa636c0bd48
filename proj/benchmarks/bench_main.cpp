#include <benchmark/benchmark.h>

#include <cstdint>

#include "sim/loss.hpp"
#include "sim/ops.hpp"
#include "sim/tape.hpp"
#include "sim/trainer.hpp"

using namespace sim;

namespace {

Tensor unit_rows(Rng& rng, int64_t m, int64_t d) {
  return l2_normalize(Tensor::rand_uniform(rng, {m, d}, DType::F64, -1.0, 1.0), 1);
}

// Reference negative term without the covariance trick: every (row, negative)
// pair explicitly, O(M*K*D) time and O(M*K) similarity storage.
double brute_negative_quad(const Tensor& yh, const Tensor& uh) {
  const int64_t m = yh.dim(0), k = uh.dim(0), d = yh.dim(1);
  double total = 0.0;
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < k; ++j) {
      double dot = 0.0;
      for (int64_t c = 0; c < d; ++c) dot += yh.value_at(i * d + c) * uh.value_at(j * d + c);
      total += dot * dot;
    }
  return total;
}

void BM_MatmulF32(benchmark::State& state) {
  const int64_t n = state.range(0);
  NoGradScope ng;
  Rng rng(1);
  Tensor a = Tensor::rand_uniform(rng, {n, n}, DType::F32, -1.0, 1.0);
  Tensor b = Tensor::rand_uniform(rng, {n, n}, DType::F32, -1.0, 1.0);
  for (auto _ : state) {
    Tensor c = matmul(a, b);
    benchmark::DoNotOptimize(c);
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_MatmulF32)->Arg(64)->Arg(128)->Arg(256)->Arg(512);

// The point of the covariance path: time stays flat as the negative count
// K grows (one D x D covariance), while the brute-force pairwise version
// scales linearly in K.
void BM_NegativeQuadCovariance(benchmark::State& state) {
  const int64_t k = state.range(0);
  NoGradScope ng;
  Rng rng(2);
  Tensor yh = unit_rows(rng, 64, 32);
  Tensor uh = unit_rows(rng, k, 32);
  for (auto _ : state) {
    Tensor q = unigrad_negative_quad(yh, uh);
    benchmark::DoNotOptimize(q);
  }
}
BENCHMARK(BM_NegativeQuadCovariance)->Arg(64)->Arg(256)->Arg(1024)->Arg(4096);

void BM_NegativeQuadBrute(benchmark::State& state) {
  const int64_t k = state.range(0);
  NoGradScope ng;
  Rng rng(2);
  Tensor yh = unit_rows(rng, 64, 32);
  Tensor uh = unit_rows(rng, k, 32);
  for (auto _ : state) {
    double q = brute_negative_quad(yh, uh);
    benchmark::DoNotOptimize(q);
  }
}
BENCHMARK(BM_NegativeQuadBrute)->Arg(64)->Arg(256)->Arg(1024)->Arg(4096);

void BM_DenseLoss(benchmark::State& state) {
  const int64_t b = state.range(0);
  NoGradScope ng;
  Rng rng(3);
  Tensor y = Tensor::rand_uniform(rng, {b, 64, 32}, DType::F32, -1.0, 1.0);
  Tensor z = Tensor::rand_uniform(rng, {b, 64, 32}, DType::F32, -1.0, 1.0);
  for (auto _ : state) {
    Tensor l = dense_loss(y, z, 1.0, true);
    benchmark::DoNotOptimize(l);
  }
}
BENCHMARK(BM_DenseLoss)->Arg(8)->Arg(32)->Arg(64);

void BM_ViewPair(benchmark::State& state) {
  Rng rng(4);
  Image raw(48, 48);
  for (auto& p : raw.px) p = static_cast<float>(rng.uniform());
  AugmentConfig cfg;
  for (auto _ : state) {
    ViewPair vp = make_view_pair(rng, raw, cfg, false, 32, 64, {0.5, 0.5, 0.5}, {0.25, 0.25, 0.25});
    benchmark::DoNotOptimize(vp);
  }
}
BENCHMARK(BM_ViewPair);

void BM_TrainStep(benchmark::State& state) {
  const int64_t b = state.range(0);
  ViTConfig mcfg;
  mcfg.image_size = 32;
  mcfg.patch_size = 4;
  mcfg.backbone_dim = 48;
  mcfg.backbone_depth = 3;
  mcfg.backbone_heads = 4;
  mcfg.proj_dec_dim = 32;
  mcfg.proj_dec_heads = 4;
  mcfg.projector_depth = 2;
  mcfg.decoder_depth = 2;

  Dataset data;
  data.root = "<memory>";
  Rng rng(5);
  for (int64_t i = 0; i < b; ++i) {
    Image img(48, 48);
    for (auto& p : img.px) p = static_cast<float>(rng.uniform());
    data.images.push_back(std::move(img));
    data.items.push_back({"", 0});
  }
  data.mean = {0.5, 0.5, 0.5};
  data.stddev = {0.25, 0.25, 0.25};
  data.has_stats = true;

  TrainConfig tcfg;
  tcfg.batch_size = b;
  tcfg.warmup_epochs = 0;
  tcfg.total_epochs = 1;

  SimModel model(mcfg, 7, DType::F32);
  const int64_t total = 1 << 30;
  Trainer trainer(model, tcfg, total);
  std::vector<int64_t> idx(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i) idx[static_cast<size_t>(i)] = i;
  Batch batch = make_batch(data, idx, AugmentConfig{}, false, mcfg, 7, 0, 0, DType::F32);

  int64_t step = 0;
  for (auto _ : state) {
    LossReport rep = trainer.train_step(batch, step++ % total);
    benchmark::DoNotOptimize(rep);
  }
}
BENCHMARK(BM_TrainStep)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
