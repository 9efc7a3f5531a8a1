// SPDX-License-Identifier: Apache-2.0
//
// Trainable-block plans, token importance, and top-K token selection with
// fusion of the dropped tokens.
#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "bsr/autodiff.hpp"
#include "bsr/tensor.hpp"
#include "bsr/vit_config.hpp"

namespace bsr::policy {

/// Which blocks train, where tokens are dropped, and at which rate.
/// Block indices are 0-based.
struct BsrPlan {
  std::vector<std::size_t> trainable_blocks;
  std::vector<std::size_t> drop_locations;
  double drop_rate = 0.5;
  bool strict = false;

  /// Earliest trainable block; nothing before it is recorded or updated.
  std::size_t grad_horizon() const;
  bool is_trainable(std::size_t block) const;
  bool is_drop_location(std::size_t block) const;

  friend bool operator==(const BsrPlan&, const BsrPlan&) = default;
};

enum class Strategy {
  /// Selected encoder blocks plus the head train.
  Bsr,
  /// Only the head (and its LayerNorm) trains; `trainable_blocks` is ignored.
  HeadOnly,
  /// Backbone frozen; a width-reduced side block trains at each position in
  /// `trainable_blocks`, its output added to the main block's.
  ResidualSide,
};

const char* strategy_name(Strategy s);

/// A plan together with how it is applied.
struct RunPlan {
  Strategy strategy = Strategy::Bsr;
  BsrPlan plan;

  /// First block whose computation needs a gradient; depth for head-only.
  std::size_t horizon(std::size_t depth) const;
  bool block_trainable(std::size_t block) const;
  bool has_side_block(std::size_t block) const;
  bool drops_at(std::size_t block) const;
};

/// Three trainable blocks and three drop locations spread over the depth;
/// for 12 blocks this is trainable [3,7,11], drops [3,6,9], rate 0.5.
BsrPlan default_plan(std::size_t depth);
/// Every block trainable, no token dropping.
BsrPlan full_plan(std::size_t depth);

struct PlanValidation {
  std::vector<std::string> errors;
  std::vector<std::string> warnings;

  bool ok() const noexcept { return errors.empty(); }
};

PlanValidation validate_plan(const ViTConfig& config, const RunPlan& run);
/// validate_plan, raising PlanError listing every error.
void require_valid(const ViTConfig& config, const RunPlan& run);

/// Plan file: `trainable = 3,7,11`, `drops = 3,6,9`, `rate = 0.5`,
/// `strict = true`. Unknown keys are rejected.
BsrPlan parse_plan(std::string_view text);
std::string format_plan(const BsrPlan& plan);
/// "default", "full", "head-only", "residual", or a plan file path.
RunPlan resolve_plan(std::string_view name_or_path, std::size_t depth);

// ---------------------------------------------------------------------------
// Token counts

/// Image tokens kept at a drop location: ceil((1-r)(t-1)).
std::size_t keep_count(std::size_t tokens, double rate);
/// Rows leaving a drop location: cls + kept + one fused token, or `tokens`
/// unchanged when nothing is dropped.
std::size_t tokens_after_drop(std::size_t tokens, double rate);

struct TokenSchedule {
  std::vector<std::size_t> mhsa_tokens;
  std::vector<std::size_t> ffn_tokens;

  friend bool operator==(const TokenSchedule&, const TokenSchedule&) = default;
};

TokenSchedule token_schedule(const ViTConfig& config, const RunPlan& run);
TokenSchedule token_schedule(const ViTConfig& config, const BsrPlan& plan);

// ---------------------------------------------------------------------------
// Importance and selection

/// Per-head attention tensors of one MHSA call.
struct AttentionState {
  Tensor q;      // [H x t x d]
  Tensor k;      // [H x t x d]
  Tensor v;      // [H x t x d]
  Tensor probs;  // [H x t x t]
  double scale = 1.0;
};

/// Class-token attention over image tokens, softmax-normalized per head and
/// averaged over heads; length t-1, sums to 1.
struct ImportanceScore {
  Tensor scores;
};

ImportanceScore compute_token_importance(const AttentionState& state);

struct TokenSelection {
  /// Row indices (>= 1) of kept image tokens, ascending.
  std::vector<std::size_t> kept;
  /// Row indices of tokens fused into one, ascending.
  std::vector<std::size_t> dropped;
};

/// Top-K image tokens by score; ties go to the lower index.
TokenSelection select_tokens(const Tensor& scores, double rate);

/// Inference-only selection and fusion: rows [cls, kept..., fused].
Tensor select_and_fuse(const Tensor& tokens, const ImportanceScore& score, double rate);

/// Tape-aware selection and fusion used inside a block.
ad::Var fuse_tokens(ad::OpContext& ctx, const ad::Var& tokens, const ad::Var& scores, double rate);

}  // namespace bsr::policy
