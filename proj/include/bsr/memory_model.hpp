// SPDX-License-Identifier: Apache-2.0
//
// Closed-form activation memory and MAC counts for a (config, plan, batch)
// triple, and a byte-exact audit of a recorded tape against them.
#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "bsr/autodiff.hpp"
#include "bsr/bsr_policy.hpp"
#include "bsr/vit_config.hpp"

namespace bsr::memory {

/// Bytes per stored activation element.
inline constexpr std::size_t kElementWidth = 4;
inline constexpr double kBytesPerMB = 1024.0 * 1024.0;

inline double to_mb(std::size_t bytes) noexcept { return static_cast<double>(bytes) / kBytesPerMB; }

/// Paper mode counts the published inventory; exact mode counts what the
/// tape keeps, including LayerNorm state and token-selection buffers.
enum class Mode { Paper, Exact };

const char* mode_name(Mode mode);
Mode parse_mode(std::string_view text);

/// Report roles in lexicographic order.
enum class Role { Gelu, LinearExtras, LnStat, LnXhat, Qkv, Softmax, TokenSelect };
inline constexpr std::array<Role, 7> kRoles = {Role::Gelu,   Role::LinearExtras, Role::LnStat,     Role::LnXhat,
                                               Role::Qkv,    Role::Softmax,      Role::TokenSelect};
const char* role_name(Role role);
Role parse_role(std::string_view text);
/// Report role under which a tape buffer is counted.
Role report_role(ad::BufferRole role);

struct BlockMemory {
  std::size_t qkv = 0;
  std::size_t softmax = 0;
  std::size_t gelu = 0;
  std::size_t linear_extras = 0;
  std::size_t ln_stat = 0;
  std::size_t ln_xhat = 0;
  std::size_t token_select = 0;

  std::size_t total() const noexcept { return qkv + softmax + gelu + linear_extras + ln_stat + ln_xhat + token_select; }
  std::size_t& operator[](Role role);
  std::size_t operator[](Role role) const;
  BlockMemory& operator+=(const BlockMemory& other);
  BlockMemory& operator*=(std::size_t k);

  friend bool operator==(const BlockMemory&, const BlockMemory&) = default;
};

/// One encoder block at batch 1. Token counts below 2 raise DimensionError.
BlockMemory block_memory(const ViTConfig& config, std::size_t t_mhsa, std::size_t t_ffn, bool trainable, Mode mode);

/// Extra exact-mode retention of a drop location at or after the horizon
/// that discards `dropped` > 0 tokens: per-head class-token probabilities
/// and the dropped rows.
BlockMemory token_select_memory(const ViTConfig& config, std::size_t t_mhsa, std::size_t dropped, Mode mode);

/// Trainable side block at `tokens` rows, including the inputs of its down
/// and up projections.
BlockMemory side_block_memory(const ViTConfig& config, std::size_t tokens, Mode mode);

/// Final LayerNorm and head on the class row.
BlockMemory head_memory(const ViTConfig& config, Mode mode);

struct BlockEntry {
  /// Block index; the head entry uses index depth.
  std::size_t index = 0;
  bool trainable = false;
  bool side = false;
  std::size_t mhsa_tokens = 0;
  std::size_t ffn_tokens = 0;
  BlockMemory bytes;
};

struct MemoryReport {
  Mode mode = Mode::Paper;
  std::size_t batch = 1;
  /// Blocks at or after the horizon, then the head.
  std::vector<BlockEntry> blocks;
  std::size_t frozen_total = 0;
  std::size_t trainable_total = 0;
  std::size_t grand_total = 0;
  /// Same mode and batch with every block trainable and no dropping.
  std::size_t baseline_total = 0;
  double reduce_ratio = 1.0;

  double grand_mb() const noexcept { return to_mb(grand_total); }
  /// Sum over entries with this index, or an all-zero entry.
  BlockMemory block(std::size_t index) const;
};

MemoryReport estimate_total(const ViTConfig& config, const policy::RunPlan& run, std::size_t batch, Mode mode);

// ---------------------------------------------------------------------------
// MACs

struct BlockFlops {
  std::size_t index = 0;
  std::size_t qkv_proj = 0;
  std::size_t attn_scores = 0;
  std::size_t attn_apply = 0;
  std::size_t out_proj = 0;
  std::size_t ffn = 0;
  /// Down/up projections plus the narrow block of a side path.
  std::size_t side = 0;

  std::size_t total() const noexcept { return qkv_proj + attn_scores + attn_apply + out_proj + ffn + side; }
};

struct FlopsReport {
  std::size_t batch = 1;
  std::size_t patch_embed = 0;
  std::vector<BlockFlops> blocks;
  std::size_t head = 0;
  std::size_t total = 0;

  double gmacs() const noexcept { return static_cast<double>(total) / 1e9; }
};

/// Forward multiply-accumulates, batch-scaled.
FlopsReport count_flops(const ViTConfig& config, const policy::RunPlan& run, std::size_t batch);

// ---------------------------------------------------------------------------
// Tape audit

/// Retained bytes of a tape per block index and report role; each distinct
/// buffer counts once, against the block of the first node holding it.
struct TapeBreakdown {
  std::vector<std::pair<std::size_t, BlockMemory>> blocks;
  std::size_t total = 0;

  BlockMemory block(std::size_t index) const;
};

TapeBreakdown tape_breakdown(const ad::Tape& tape);

struct AuditDiff {
  std::size_t block = 0;
  Role role = Role::Qkv;
  std::size_t predicted = 0;
  std::size_t actual = 0;
};

struct AuditResult {
  std::vector<AuditDiff> diffs;
  std::size_t predicted_total = 0;
  std::size_t actual_total = 0;

  bool equal() const noexcept { return diffs.empty() && predicted_total == actual_total; }
  std::string describe() const;
};

/// Compares a batch-1 tape with an exact-mode batch-1 report.
AuditResult tape_audit(const ad::Tape& tape, const MemoryReport& report);
/// tape_audit, raising AuditFailure with the itemized diff.
void require_audit(const ad::Tape& tape, const MemoryReport& report);

// ---------------------------------------------------------------------------
// Emission

std::string format_table(const MemoryReport& report);
/// `block,role,bytes,mode`, block ascending then role name.
std::string to_csv(const MemoryReport& report);

struct CsvRow {
  std::size_t block = 0;
  Role role = Role::Qkv;
  std::size_t bytes = 0;
  Mode mode = Mode::Paper;

  friend bool operator==(const CsvRow&, const CsvRow&) = default;
};

/// Parses to_csv output; FormatError on schema violations.
std::vector<CsvRow> parse_csv(std::string_view text);

std::string format_flops_table(const FlopsReport& report);

}  // namespace bsr::memory
