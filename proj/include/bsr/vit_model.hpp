// SPDX-License-Identifier: Apache-2.0
//
// Pre-LN Vision Transformer on top of the autodiff tape.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bsr/autodiff.hpp"
#include "bsr/bsr_policy.hpp"
#include "bsr/tensor.hpp"
#include "bsr/vit_config.hpp"

namespace bsr {

/// Parameter ids of one encoder block.
struct BlockParams {
  ad::ParamId ln1_gamma = -1, ln1_beta = -1;
  ad::ParamId qkv_weight = -1, qkv_bias = -1;
  ad::ParamId proj_weight = -1, proj_bias = -1;
  ad::ParamId ln2_gamma = -1, ln2_beta = -1;
  ad::ParamId fc1_weight = -1, fc1_bias = -1;
  ad::ParamId fc2_weight = -1, fc2_bias = -1;

  std::vector<ad::ParamId> all() const;
};

/// Width-reduced block running beside a frozen main block:
/// up(block(down(x))).
struct SideBlockParams {
  ad::ParamId down_weight = -1, down_bias = -1;
  BlockParams block;
  ad::ParamId up_weight = -1, up_bias = -1;

  std::vector<ad::ParamId> all() const;
};

/// Side blocks work at a quarter of the embedding width, with the main
/// head count when it divides that width and a single head otherwise.
ViTConfig side_config(const ViTConfig& config);

/// Parameter ids of a whole model.
struct ModelLayout {
  ViTConfig config;
  ad::ParamId patch_weight = -1, patch_bias = -1;
  ad::ParamId cls_token = -1, pos_embed = -1;
  std::vector<BlockParams> blocks;
  std::map<std::size_t, SideBlockParams> side_blocks;
  ad::ParamId norm_gamma = -1, norm_beta = -1;
  ad::ParamId head_weight = -1, head_bias = -1;
};

struct InitOptions {
  std::uint64_t seed = 0;
  /// Std-dev of the truncated normal (cut at two std-devs) for weights and
  /// the cls/positional embeddings. Biases start at zero, LN at (1, 0).
  double weight_std = 0.02;
};

/// Parameters plus the layout that names them.
class VisionTransformer {
 public:
  /// Freshly initialized model; every parameter frozen.
  VisionTransformer(const ViTConfig& config, const InitOptions& init = {});

  const ViTConfig& config() const noexcept { return layout_.config; }
  const ModelLayout& layout() const noexcept { return layout_; }
  const ad::ParamStore& params() const noexcept { return params_; }
  ad::ParamStore& params() noexcept { return params_; }

  /// Adds side blocks at `positions` (existing ones are kept). With
  /// `zero_up` the up-projection starts at zero so the model function is
  /// initially unchanged.
  void add_side_blocks(const std::vector<std::size_t>& positions, const InitOptions& init, bool zero_up = true);

  /// Freezes everything, then unfreezes what `run` trains plus the final
  /// LayerNorm and head. Raises PlanError if a side block is missing.
  void apply_trainable(const policy::RunPlan& run);

  /// Registers an already-built parameter store under `layout`; used by
  /// checkpoint loading.
  VisionTransformer(ModelLayout layout, ad::ParamStore params);

 private:
  ModelLayout layout_;
  ad::ParamStore params_;
};

// ---------------------------------------------------------------------------
// Forward pass

/// [channels x S x S] image to [(N+1) x L] tokens: patch projection, cls
/// row prepended, positional embedding added. Never recorded.
Tensor patch_embed(const ModelLayout& layout, const ad::ParamStore& params, const Tensor& image);

struct MhsaResult {
  ad::Var out;
  ad::Var q, k, v, probs;
  double scale = 1.0;

  policy::AttentionState state() const;
};

/// Multi-head self-attention on [t x L] input (already normalized).
/// t < 2 raises PlanError.
MhsaResult mhsa_forward(ad::OpContext& ctx, const ad::Var& x, const BlockParams& p, std::size_t heads);

struct BlockResult {
  ad::Var out;
  std::size_t mhsa_tokens = 0;
  std::size_t ffn_tokens = 0;
  std::optional<policy::AttentionState> attention;
};

/// x + MHSA(LN1(x)), optional token selection with fusion at `drop_rate`,
/// then y + FFN(LN2(y)).
BlockResult block_forward(ad::OpContext& ctx, const ad::Var& x, const BlockParams& p, std::size_t heads,
                          std::optional<double> drop_rate, bool keep_attention = false);

/// up(block(down(x))) for the side path.
ad::Var side_forward(ad::OpContext& ctx, const ad::Var& x, const SideBlockParams& p, const ViTConfig& side);

struct ForwardTrace {
  std::vector<std::size_t> mhsa_tokens;
  std::vector<std::size_t> ffn_tokens;
  std::vector<policy::AttentionState> attention;
};

struct ForwardOptions {
  bool keep_attention = false;
};

struct ForwardResult {
  /// [1 x num_classes]
  ad::Var logits;
  ForwardTrace trace;
};

/// Full model on one image. With a tape, records from the plan's horizon
/// onwards; block b's nodes carry block index b, the final LayerNorm and
/// head carry index depth.
ForwardResult vit_forward(const ModelLayout& layout, const ad::ParamStore& params, const Tensor& image,
                          const policy::RunPlan& run, ad::Tape* tape = nullptr, const ForwardOptions& options = {});

ForwardResult vit_forward(const VisionTransformer& model, const Tensor& image, const policy::RunPlan& run,
                          ad::Tape* tape = nullptr, const ForwardOptions& options = {});

// ---------------------------------------------------------------------------
// Checkpoints

/// "BSRCKPT1", u64 manifest length, JSON manifest (config, side block
/// positions, tensors with name/shape/offset), then little-endian float64
/// payloads. Loaded parameters are all frozen.
std::vector<std::uint8_t> encode_checkpoint(const VisionTransformer& model);
VisionTransformer decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const VisionTransformer& model, const std::string& path);
VisionTransformer load_checkpoint(const std::string& path);

}  // namespace bsr
