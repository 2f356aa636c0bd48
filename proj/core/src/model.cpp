#include "sim/model.hpp"

#include <cmath>
#include <cstring>

#include "sim/error.hpp"
#include "sim/ops.hpp"
#include "sim/tape.hpp"

namespace sim {

namespace {

constexpr double kLnEps = 1e-6;
constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;
constexpr double kInitStd = 0.02;

}  // namespace

NormKind parse_norm_kind(const std::string& s) {
  if (s == "ln") return NormKind::LayerNorm;
  if (s == "bn") return NormKind::BatchNorm;
  throw Error("norm kind must be `ln` or `bn`, got `" + s + "`");
}

const char* norm_kind_name(NormKind k) { return k == NormKind::LayerNorm ? "ln" : "bn"; }

void ViTConfig::validate() const {
  SIM_CHECK(patch_size >= 1 && image_size >= patch_size,
            "model config: image " << image_size << " / patch " << patch_size << " is degenerate");
  SIM_CHECK(image_size % patch_size == 0, "model config: image_size " << image_size
                                                                      << " is not divisible by patch_size "
                                                                      << patch_size);
  SIM_CHECK(backbone_depth >= 1 && projector_depth >= 1 && decoder_depth >= 1,
            "model config: depths must be >= 1");
  SIM_CHECK(backbone_heads >= 1 && backbone_dim % backbone_heads == 0,
            "model config: backbone_heads " << backbone_heads << " must divide backbone_dim "
                                            << backbone_dim);
  SIM_CHECK(proj_dec_heads >= 1 && proj_dec_dim % proj_dec_heads == 0,
            "model config: proj_dec_heads " << proj_dec_heads << " must divide proj_dec_dim "
                                            << proj_dec_dim);
  SIM_CHECK(backbone_dim % 4 == 0 && proj_dec_dim % 4 == 0,
            "model config: embedding widths must be divisible by 4 for sin-cos tables");
  SIM_CHECK(mlp_ratio >= 1, "model config: mlp_ratio must be >= 1");
}

Tensor ParamStore::add(const std::string& name, Tensor t, bool trainable) {
  SIM_CHECK(find(name) == nullptr, "param store: duplicate name " << name);
  t.set_requires_grad(trainable);
  entries_.push_back({name, t, trainable});
  return t;
}

Tensor* ParamStore::find(const std::string& name) {
  for (auto& e : entries_)
    if (e.name == name) return &e.tensor;
  return nullptr;
}

const Tensor* ParamStore::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e.tensor;
  return nullptr;
}

void EmaSchedule::validate() const {
  SIM_CHECK(base_momentum > 0.0 && base_momentum <= final_momentum && final_momentum <= 1.0,
            "ema schedule: need 0 < base <= final <= 1, got base=" << base_momentum << " final="
                                                                   << final_momentum);
  SIM_CHECK(total_steps >= 1, "ema schedule: total_steps must be >= 1");
}

double ema_momentum(int64_t step, const EmaSchedule& sched) {
  sched.validate();
  if (step < 0 || step > sched.total_steps) {
    warn("ema_momentum: step " + std::to_string(step) + " outside [0, " +
         std::to_string(sched.total_steps) + "], clamping");
    step = std::max<int64_t>(0, std::min(step, sched.total_steps));
  }
  const double t = static_cast<double>(step) / static_cast<double>(sched.total_steps);
  return sched.final_momentum -
         (sched.final_momentum - sched.base_momentum) * (std::cos(t * 3.14159265358979323846) + 1.0) / 2.0;
}

namespace {

LinearLayer make_linear(ParamStore& ps, const std::string& name, int64_t in, int64_t out, Rng& rng,
                        DType dt, bool trainable) {
  LinearLayer l;
  l.w = ps.add(name + ".w", Tensor::randn(rng, {in, out}, dt, kInitStd), trainable);
  l.b = ps.add(name + ".b", Tensor::zeros({out}, dt), trainable);
  return l;
}

NormLayer make_norm(ParamStore& ps, const std::string& name, NormKind kind, int64_t dim, DType dt,
                    bool trainable) {
  NormLayer n;
  n.kind = kind;
  n.g = ps.add(name + ".g", Tensor::ones({dim}, dt), trainable);
  n.b = ps.add(name + ".b", Tensor::zeros({dim}, dt), trainable);
  if (kind == NormKind::BatchNorm) {
    // running stats are buffers: saved in checkpoints, never trained
    n.running_mean = ps.add(name + ".rm", Tensor::zeros({dim}, dt), false);
    n.running_var = ps.add(name + ".rv", Tensor::ones({dim}, dt), false);
  }
  return n;
}

BlockLayer make_block(ParamStore& ps, const std::string& name, int64_t dim, int64_t heads,
                      int64_t mlp_ratio, NormKind kind, Rng& rng, DType dt, bool trainable) {
  BlockLayer b;
  b.heads = heads;
  b.norm1 = make_norm(ps, name + ".norm1", kind, dim, dt, trainable);
  b.qkv = make_linear(ps, name + ".qkv", dim, 3 * dim, rng, dt, trainable);
  b.proj = make_linear(ps, name + ".proj", dim, dim, rng, dt, trainable);
  b.norm2 = make_norm(ps, name + ".norm2", kind, dim, dt, trainable);
  b.fc1 = make_linear(ps, name + ".fc1", dim, mlp_ratio * dim, rng, dt, trainable);
  b.fc2 = make_linear(ps, name + ".fc2", mlp_ratio * dim, dim, rng, dt, trainable);
  return b;
}

Tower make_tower(ParamStore& ps, const std::string& name, int64_t in_dim, int64_t dim,
                 int64_t depth, int64_t heads, int64_t mlp_ratio, NormKind kind, Rng& rng, DType dt,
                 bool trainable, bool force_input = false) {
  Tower t;
  if (in_dim != dim || force_input) {
    t.input = make_linear(ps, name + ".in", in_dim, dim, rng, dt, trainable);
    t.has_input = true;
  }
  for (int64_t i = 0; i < depth; ++i)
    t.blocks.push_back(make_block(ps, name + ".block" + std::to_string(i), dim, heads, mlp_ratio,
                                  kind, rng, dt, trainable));
  t.final_norm = make_norm(ps, name + ".norm", kind, dim, dt, trainable);
  return t;
}

Tensor linear_fwd(const LinearLayer& l, const Tensor& x) { return add(matmul(x, l.w), l.b); }

Tensor norm_fwd(const NormLayer& n, const Tensor& x, bool training) {
  if (n.kind == NormKind::LayerNorm) return layer_norm(x, n.g, n.b, -1, kLnEps);
  return batch_norm(x, n.g, n.b, n.running_mean, n.running_var, training, kBnMomentum, kBnEps);
}

Tensor attn_fwd(const BlockLayer& blk, const Tensor& x, bool identity_attention) {
  const int64_t B = x.dim(0), S = x.dim(1), C = x.dim(2);
  const int64_t H = blk.heads, dh = C / H;
  Tensor qkv = linear_fwd(blk.qkv, x);  // (B,S,3C)
  Tensor v = slice(qkv, 2, 2 * C, 3 * C);
  if (identity_attention) {
    // attention matrix pinned to I: each token attends only to itself
    return linear_fwd(blk.proj, v);
  }
  Tensor q = slice(qkv, 2, 0, C);
  Tensor k = slice(qkv, 2, C, 2 * C);
  auto heads_first = [&](const Tensor& t) {
    return reshape(transpose(reshape(t, {B, S, H, dh}), 1, 2), {B * H, S, dh});
  };
  Tensor q3 = heads_first(scale(q, 1.0 / std::sqrt(static_cast<double>(dh))));
  Tensor k3 = heads_first(k);
  Tensor v3 = heads_first(v);
  Tensor attn = softmax(matmul(q3, transpose(k3, 1, 2)), -1);  // (B*H,S,S)
  Tensor ctx = matmul(attn, v3);                               // (B*H,S,dh)
  Tensor merged = reshape(transpose(reshape(ctx, {B, H, S, dh}), 1, 2), {B, S, C});
  return linear_fwd(blk.proj, merged);
}

Tensor block_fwd(const BlockLayer& blk, const Tensor& x, bool training, bool identity_attention) {
  Tensor h = add(x, attn_fwd(blk, norm_fwd(blk.norm1, x, training), identity_attention));
  Tensor m = linear_fwd(blk.fc2, gelu(linear_fwd(blk.fc1, norm_fwd(blk.norm2, h, training))));
  return add(h, m);
}

Tensor tower_fwd(const Tower& t, Tensor x, bool training, bool identity_attention = false) {
  if (t.has_input) x = linear_fwd(t.input, x);
  for (const auto& blk : t.blocks) x = block_fwd(blk, x, training, identity_attention);
  return norm_fwd(t.final_norm, x, training);
}

}  // namespace

SimModel::SimModel(const ViTConfig& cfg, uint64_t seed, DType dt) : cfg_(cfg), dt_(dt) {
  cfg_.validate();

  // Building each branch from an identically seeded stream makes the target
  // tree a bit-exact copy of the online tree without an explicit sync pass.
  Rng online_rng(derive_seed(seed, 1));
  online_ = build_branch("online", online_rng, true);
  Rng target_rng(derive_seed(seed, 1));
  target_ = build_branch("target", target_rng, false);

  Rng head_rng(derive_seed(seed, 2));
  decoder_ = make_tower(params_, "decoder", cfg_.proj_dec_dim, cfg_.proj_dec_dim,
                        cfg_.decoder_depth, cfg_.proj_dec_heads, cfg_.mlp_ratio, cfg_.norm_kind,
                        head_rng, dt_, true);
  mask_token_ =
      params_.add("mask_token", Tensor::randn(head_rng, {cfg_.proj_dec_dim}, dt_, kInitStd), true);

  // Selector initialization: passes the position encoding through untouched
  // and ignores the scale half until training moves it.
  const int64_t D = cfg_.proj_dec_dim;
  Tensor mixer_w = Tensor::zeros({2 * D, D}, dt_);
  for (int64_t i = 0; i < D; ++i) mixer_w.set_value_at(i * D + i, 1.0);
  scale_mixer_.w = params_.add("scale_mixer.w", mixer_w, true);
  scale_mixer_.b = params_.add("scale_mixer.b", Tensor::zeros({D}, dt_), true);

  pixel_head_ = make_linear(params_, "pixel_head", D, cfg_.patch_dim(), head_rng, dt_, true);

  {
    NoGradScope ng;
    Tensor grid = grid_positions(cfg_.grid(), cfg_.grid(), dt_);
    backbone_pe_ = reshape(sincos_embed(grid, cfg_.backbone_dim),
                           {1, cfg_.n_tokens(), cfg_.backbone_dim});
  }

  // patchify gather table: token-major, then patch pixels row-major, then channel
  const int64_t P = cfg_.patch_size, G = cfg_.grid(), W = cfg_.image_size;
  patch_index_.reserve(static_cast<size_t>(cfg_.n_tokens() * cfg_.patch_dim()));
  for (int64_t gy = 0; gy < G; ++gy)
    for (int64_t gx = 0; gx < G; ++gx)
      for (int64_t py = 0; py < P; ++py)
        for (int64_t px = 0; px < P; ++px)
          for (int64_t c = 0; c < 3; ++c)
            patch_index_.push_back(((gy * P + py) * W + gx * P + px) * 3 + c);
}

SimModel::Branch SimModel::build_branch(const std::string& prefix, Rng& rng, bool trainable) {
  Branch br;
  br.patch = make_linear(params_, prefix + ".patch", cfg_.patch_dim(), cfg_.backbone_dim, rng, dt_,
                         trainable);
  br.backbone = make_tower(params_, prefix + ".backbone", cfg_.backbone_dim, cfg_.backbone_dim,
                           cfg_.backbone_depth, cfg_.backbone_heads, cfg_.mlp_ratio,
                           NormKind::LayerNorm, rng, dt_, trainable);
  br.projector = make_tower(params_, prefix + ".projector", cfg_.backbone_dim, cfg_.proj_dec_dim,
                            cfg_.projector_depth, cfg_.proj_dec_heads, cfg_.mlp_ratio,
                            cfg_.norm_kind, rng, dt_, trainable, /*force_input=*/true);
  return br;
}

Tensor SimModel::patch_tokens(const Tensor& images, bool target_branch) {
  SIM_CHECK(images.rank() == 4 && images.dim(1) == cfg_.image_size &&
                images.dim(2) == cfg_.image_size && images.dim(3) == 3,
            "patch_tokens: want (B," << cfg_.image_size << "," << cfg_.image_size
                                     << ",3) images, got " << shape_str(images.shape()));
  const int64_t B = images.dim(0);
  Tensor flat = reshape(images, {B, cfg_.image_size * cfg_.image_size * 3});
  Tensor patches = reshape(gather_flat(flat, patch_index_), {B, cfg_.n_tokens(), cfg_.patch_dim()});
  const LinearLayer& pl = target_branch ? target_.patch : online_.patch;
  return add(linear_fwd(pl, patches), backbone_pe_);
}

Tensor SimModel::encode_online(const Tensor& images, const std::vector<MaskPattern>& masks,
                               bool training) {
  const int64_t B = images.dim(0);
  SIM_CHECK(B >= 1 && static_cast<int64_t>(masks.size()) == B,
            "encode_online: " << masks.size() << " masks for a batch of " << B);
  const int64_t n_vis = static_cast<int64_t>(masks[0].visible.size());
  SIM_CHECK(n_vis >= 1, "encode_online: empty visible set");
  std::vector<int64_t> flat;
  flat.reserve(static_cast<size_t>(B * n_vis));
  for (const auto& m : masks) {
    SIM_CHECK(m.total == cfg_.n_tokens(), "encode_online: mask over " << m.total
                                                                      << " tokens, model has "
                                                                      << cfg_.n_tokens());
    SIM_CHECK(static_cast<int64_t>(m.visible.size()) == n_vis,
              "encode_online: ragged visible counts in batch");
    flat.insert(flat.end(), m.visible.begin(), m.visible.end());
  }
  Tensor tokens = patch_tokens(images, false);
  Tensor visible = gather_tokens(tokens, flat);  // (B,Nv,Cb)
  Tensor h = tower_fwd(online_.backbone, visible, training);
  return tower_fwd(online_.projector, h, training);
}

std::pair<Tensor, Tensor> SimModel::decoder_pos_embeds(const std::vector<CropSpec>& crops_a,
                                                       const std::vector<CropSpec>& crops_b,
                                                       const std::vector<MaskPattern>& masks) {
  const int64_t B = static_cast<int64_t>(crops_a.size());
  SIM_CHECK(B >= 1 && crops_b.size() == crops_a.size() && masks.size() == crops_a.size(),
            "decoder_pos_embeds: crop/mask lists disagree: " << crops_a.size() << ", "
                                                             << crops_b.size() << ", "
                                                             << masks.size());
  const int64_t G = cfg_.grid(), N = cfg_.n_tokens(), D = cfg_.proj_dec_dim;

  Tensor pa_all;     // (B,N,D)
  Tensor pb_inputs;  // (B,N,2D)
  {
    NoGradScope ng;
    Tensor pa_table = sincos_embed(grid_positions(G, G, dt_), D);  // identical for every sample
    pa_all = broadcast_to(reshape(pa_table, {1, N, D}), {B, N, D});

    std::vector<Tensor> rows;
    rows.reserve(static_cast<size_t>(B));
    for (int64_t i = 0; i < B; ++i) {
      const auto& ca = crops_a[static_cast<size_t>(i)];
      const auto& cb = crops_b[static_cast<size_t>(i)];
      Tensor rel = sincos_embed(relative_positions(ca, cb, G, G, dt_), D);  // (N,D)
      const auto s = relative_scale(ca, cb);
      Tensor pe_s = broadcast_to(sincos_embed_pair(s[0], s[1], D, dt_), {N, D});
      rows.push_back(reshape(concat({rel, pe_s}, 1), {1, N, 2 * D}));
    }
    pb_inputs = B == 1 ? rows[0] : concat(rows, 0);
  }

  const int64_t n_vis = static_cast<int64_t>(masks[0].visible.size());
  std::vector<int64_t> flat;
  flat.reserve(static_cast<size_t>(B * n_vis));
  for (const auto& m : masks) {
    SIM_CHECK(static_cast<int64_t>(m.visible.size()) == n_vis,
              "decoder_pos_embeds: ragged visible counts in batch");
    flat.insert(flat.end(), m.visible.begin(), m.visible.end());
  }
  Tensor p_a_visible = gather_tokens(pa_all, flat);       // (B,Nv,D)
  Tensor p_b = linear_fwd(scale_mixer_, pb_inputs);       // (B,N,D), grad via the mixer
  return {p_a_visible, p_b};
}

Tensor SimModel::decode_predict(const Tensor& y_a, const Tensor& p_a_visible, const Tensor& p_b,
                                bool training) {
  const int64_t D = cfg_.proj_dec_dim, N = cfg_.n_tokens();
  SIM_CHECK(y_a.rank() == 3 && y_a.dim(2) == D,
            "decode_predict: y_a must be (B,Nv," << D << "), got " << shape_str(y_a.shape()));
  SIM_CHECK(p_a_visible.shape() == y_a.shape(),
            "decode_predict: position rows " << shape_str(p_a_visible.shape())
                                             << " do not match y_a " << shape_str(y_a.shape()));
  SIM_CHECK(p_b.rank() == 3 && p_b.dim(0) == y_a.dim(0) && p_b.dim(1) == N && p_b.dim(2) == D,
            "decode_predict: p_b must be (B," << N << "," << D << "), got "
                                              << shape_str(p_b.shape()));
  Tensor masked = add(p_b, reshape(mask_token_, {1, 1, D}));
  Tensor seq = concat({add(y_a, p_a_visible), masked}, 1);  // (B,Nv+N,D)
  Tensor out = tower_fwd(decoder_, seq, training, decoder_identity_attention);
  return slice(out, 1, y_a.dim(1), y_a.dim(1) + N);
}

Tensor SimModel::run_encoder(Branch& br, const Tensor& images, bool training) {
  Tensor tokens = patch_tokens(images, &br == &target_);
  Tensor h = tower_fwd(br.backbone, tokens, training);
  return tower_fwd(br.projector, h, training);
}

Tensor SimModel::encode_target(const Tensor& images, bool training) {
  NoGradScope ng;
  return run_encoder(target_, images, training);
}

Tensor SimModel::pixel_targets(const Tensor& images) const {
  NoGradScope ng;
  const int64_t B = images.dim(0), N = cfg_.n_tokens(), Pd = cfg_.patch_dim();
  Tensor flat = reshape(images, {B, cfg_.image_size * cfg_.image_size * 3});
  Tensor patches = reshape(gather_flat(flat, patch_index_), {B, N, Pd});
  // normalize each patch by its own first and second moments (variance eps
  // keeps constant patches finite)
  Tensor out = Tensor::zeros({B, N, Pd}, images.dtype());
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t n = 0; n < N; ++n) {
      const int64_t base = (b * N + n) * Pd;
      double m = 0.0;
      for (int64_t i = 0; i < Pd; ++i) m += patches.value_at(base + i);
      m /= static_cast<double>(Pd);
      double var = 0.0;
      for (int64_t i = 0; i < Pd; ++i) {
        const double d = patches.value_at(base + i) - m;
        var += d * d;
      }
      var /= static_cast<double>(Pd);
      const double inv = 1.0 / std::sqrt(var + kLnEps);
      for (int64_t i = 0; i < Pd; ++i)
        out.set_value_at(base + i, (patches.value_at(base + i) - m) * inv);
    }
  }
  return out;
}

Tensor SimModel::predict_pixels(const Tensor& y_b) { return linear_fwd(pixel_head_, y_b); }

Tensor SimModel::extract_features(const Tensor& images) {
  NoGradScope ng;
  Tensor tokens = patch_tokens(images, false);
  Tensor h = tower_fwd(online_.backbone, tokens, /*training=*/false);
  return mean(h, 1);  // (B, backbone_dim)
}

void SimModel::ema_update(double m) {
  SIM_CHECK(m >= 0.0 && m <= 1.0, "ema_update: momentum " << m << " outside [0,1]");
  for (auto& e : params_.entries()) {
    if (!e.trainable || e.name.rfind("online.", 0) != 0) continue;
    Tensor* tgt = params_.find("target." + e.name.substr(7));
    if (tgt == nullptr) continue;  // decoder-side params have no twin
    SIM_CHECK(tgt->shape() == e.tensor.shape(),
              "ema_update: tree mismatch at " << e.name << ": online "
                                              << shape_str(e.tensor.shape()) << " vs target "
                                              << shape_str(tgt->shape()));
    dispatch(dt_, [&](auto tag) {
      using T = decltype(tag);
      auto o = e.tensor.data<T>();
      auto t = tgt->data<T>();
      for (size_t i = 0; i < t.size(); ++i)
        t[i] = static_cast<T>(m * static_cast<double>(t[i]) +
                              (1.0 - m) * static_cast<double>(o[i]));
    });
  }
}

}  // namespace sim
