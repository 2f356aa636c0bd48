#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sim/augment.hpp"
#include "sim/geometry.hpp"
#include "sim/rng.hpp"
#include "sim/tensor.hpp"

namespace sim {

enum class NormKind { LayerNorm, BatchNorm };

NormKind parse_norm_kind(const std::string& s);  // "ln" | "bn"
const char* norm_kind_name(NormKind k);

struct ViTConfig {
  int64_t image_size = 32;
  int64_t patch_size = 4;
  int64_t backbone_dim = 96;
  int64_t backbone_depth = 4;
  int64_t backbone_heads = 4;
  int64_t proj_dec_dim = 64;  // shared embedding width of projector and decoder
  int64_t proj_dec_heads = 4;
  int64_t projector_depth = 2;
  int64_t decoder_depth = 4;
  NormKind norm_kind = NormKind::BatchNorm;  // projector/decoder blocks only
  int64_t mlp_ratio = 4;

  void validate() const;
  int64_t grid() const { return image_size / patch_size; }
  int64_t n_tokens() const { return grid() * grid(); }
  int64_t patch_dim() const { return patch_size * patch_size * 3; }
};

// Named tensor registry. Iteration order is insertion order, which is fixed
// by construction, so optimizer state, EMA pairing, and checkpoints all see
// a stable layout.
struct ParamEntry {
  std::string name;
  Tensor tensor;
  bool trainable = false;
};

class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor t, bool trainable);
  Tensor* find(const std::string& name);
  const Tensor* find(const std::string& name) const;
  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::vector<ParamEntry>& entries() { return entries_; }

 private:
  std::vector<ParamEntry> entries_;
};

struct LinearLayer {
  Tensor w;  // (in, out)
  Tensor b;  // (out)
};

struct NormLayer {
  NormKind kind = NormKind::LayerNorm;
  Tensor g, b;
  Tensor running_mean, running_var;  // batch-norm only
};

struct BlockLayer {
  NormLayer norm1;
  LinearLayer qkv;   // dim -> 3*dim
  LinearLayer proj;  // dim -> dim
  NormLayer norm2;
  LinearLayer fc1;  // dim -> mlp_ratio*dim
  LinearLayer fc2;  // mlp_ratio*dim -> dim
  int64_t heads = 1;
};

struct Tower {
  LinearLayer input;  // optional dimension adapter before the blocks
  bool has_input = false;
  std::vector<BlockLayer> blocks;
  NormLayer final_norm;
};

// Cosine ramp of the target-branch momentum.
struct EmaSchedule {
  double base_momentum = 0.99;
  double final_momentum = 1.0;
  int64_t total_steps = 0;

  void validate() const;
};

// m = final - (final-base) * (cos(pi*step/total) + 1) / 2; out-of-range
// steps clamp with a warning.
double ema_momentum(int64_t step, const EmaSchedule& sched);

// Two-branch masked-prediction network: an online encoder (patch embed +
// ViT backbone + projector) over the visible tokens of view a, a decoder
// that predicts dense view-b features from mask tokens placed at their
// relative positions, and a momentum (EMA) copy of the encoder providing
// the targets from the full view b.
class SimModel {
 public:
  SimModel(const ViTConfig& cfg, uint64_t seed, DType dt = DType::F32);

  // (B,H,W,3) images -> (B,N,backbone_dim) patch tokens with fixed 2-D
  // sin-cos position embeddings already added.
  Tensor patch_tokens(const Tensor& images, bool target_branch);

  // Backbone over visible tokens only, then projector: (B,Nv,D), rows
  // ordered by ascending visible index per sample.
  Tensor encode_online(const Tensor& images, const std::vector<MaskPattern>& masks, bool training);

  // Decoder position tables for a batch of crop pairs:
  //   p_a_visible (B,Nv,D) gathered at each sample's visible indices,
  //   p_b (B,N,D) = Linear(Concat(PE(relative positions), PE(scale))).
  // Only the scale mixer weights carry gradient.
  std::pair<Tensor, Tensor> decoder_pos_embeds(const std::vector<CropSpec>& crops_a,
                                               const std::vector<CropSpec>& crops_b,
                                               const std::vector<MaskPattern>& masks);

  // Decoder input = Concat(y_a + p_a_visible, mask_token + p_b) along the
  // token axis; output is the last N rows, one per view-b token.
  Tensor decode_predict(const Tensor& y_a, const Tensor& p_a_visible, const Tensor& p_b,
                        bool training);

  // Momentum branch over all tokens of view b; result never joins the tape.
  Tensor encode_target(const Tensor& images, bool training);

  // Per-patch normalized raw pixels of view b, (B,N,patch_dim); the target
  // for the pixel-regression ablation.
  Tensor pixel_targets(const Tensor& images) const;
  // Maps decoder output to pixel space for that ablation, (B,N,patch_dim).
  Tensor predict_pixels(const Tensor& y_b);

  // Mean-pooled full-token backbone features, eval mode, no gradient:
  // (B, backbone_dim). This is the representation used downstream.
  Tensor extract_features(const Tensor& images);

  // target <- m*target + (1-m)*online for backbone and projector weights.
  void ema_update(double m);

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const ViTConfig& config() const { return cfg_; }
  DType dtype() const { return dt_; }

  // Test hook: pins every decoder attention matrix to identity so rows pass
  // through the blocks independently.
  bool decoder_identity_attention = false;

 private:
  struct Branch {
    LinearLayer patch;  // patch_dim -> backbone_dim
    Tower backbone;
    Tower projector;
  };

  Branch build_branch(const std::string& prefix, Rng& rng, bool trainable);
  Tensor run_encoder(Branch& br, const Tensor& images, bool training);

  ViTConfig cfg_;
  DType dt_;
  ParamStore params_;
  Branch online_;
  Branch target_;
  Tower decoder_;
  Tensor mask_token_;         // (D)
  LinearLayer scale_mixer_;   // 2D -> D, selector init: identity on the
                              // position half, zero on the scale half
  LinearLayer pixel_head_;    // D -> patch_dim, pixel-target ablation only
  Tensor backbone_pe_;        // (1, N, backbone_dim), fixed
  std::vector<int64_t> patch_index_;  // patchify gather table
};

}  // namespace sim
