// SPDX-License-Identifier: Apache-2.0
//
// Verification runs and sweeps shared by the command-line tool and tests.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bsr/gradcheck.hpp"
#include "bsr/memory_model.hpp"
#include "bsr/train.hpp"

namespace bsr::experiments {

/// Deterministic standard-normal image for `config`.
Tensor random_image(const ViTConfig& config, std::uint64_t seed);

/// Model initialized from `seed` with the plan's trainable flags; residual
/// plans get side blocks with a random (non-zero) up-projection.
VisionTransformer make_model(const ViTConfig& config, const policy::RunPlan& run, std::uint64_t seed,
                             double weight_std);

struct GradcheckSetup {
  ViTConfig config;
  policy::RunPlan run;
  std::uint64_t seed = 0;
  double weight_std = 0.2;
  double step = 1e-5;
  ad::BackwardFault fault = ad::BackwardFault::None;
};

struct GradcheckOutcome {
  ad::FiniteDiffReport report;
  double tolerance = 1e-5;

  bool passed() const noexcept { return report.max_relative_error < tolerance; }
};

/// Largest model the finite-difference check accepts.
inline constexpr std::size_t kGradcheckMaxEmbed = 64;
inline constexpr std::size_t kGradcheckMaxDepth = 4;

/// Cross-entropy of one random image, tape gradient against central
/// differences. Configs beyond the toy limits raise ContractError.
GradcheckOutcome run_gradcheck(const GradcheckSetup& setup);

/// Batch-1 forward of a random image, audited against exact mode.
memory::AuditResult run_audit(const ViTConfig& config, const policy::RunPlan& run, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Transfer benchmark

struct TransferSetup {
  ViTConfig config = toy_config();
  std::size_t train_size = 256;
  std::size_t test_size = 256;
  double noise = 0.5;
  double target_shift = 0.8;
  train::TrainConfig pretrain;
  train::TrainConfig finetune;

  TransferSetup();
};

/// Source task (shift 0) and target task for one seed, each standardized
/// with its own training statistics.
train::TaskData source_task(const TransferSetup& setup, std::uint64_t seed);
train::TaskData target_task(const TransferSetup& setup, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Comparison and search

struct CompareRow {
  std::string strategy;
  policy::RunPlan run;
  std::size_t memory_bytes = 0;
  double gmacs = 0.0;
  std::optional<double> accuracy;
};

/// FT-Full, FT-Last, and `bsr` at the same batch and mode; with a
/// checkpoint and target data each row is also fine-tuned and evaluated.
std::vector<CompareRow> compare(const ViTConfig& config, const policy::RunPlan& bsr, std::size_t batch,
                                memory::Mode mode, const VisionTransformer* checkpoint,
                                const train::TaskData* target, const train::TrainConfig& train,
                                const train::LoopOptions& loop);

std::string compare_csv(const std::vector<CompareRow>& rows);

/// One grid entry per line: `trainable=3,7,11 drops=3,6,9 rate=0.5`;
/// blank lines and `#` comments are skipped.
std::vector<policy::BsrPlan> parse_grid(std::string_view text);
std::string plan_key(const policy::BsrPlan& plan);

enum class SortKey { Memory, Flops };

struct SearchRow {
  policy::BsrPlan plan;
  std::size_t memory_bytes = 0;
  double gmacs = 0.0;
  std::optional<double> accuracy;
};

struct SearchOptions {
  std::size_t batch = 128;
  memory::Mode mode = memory::Mode::Paper;
  SortKey sort = SortKey::Memory;
  /// Fine-tune epochs per plan on a toy-width model of the same depth; 0
  /// skips accuracy.
  std::size_t finetune_epochs = 0;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

/// Ranked ascending by the sort key, ties broken by plan key.
std::vector<SearchRow> plan_search(const ViTConfig& config, const std::vector<policy::BsrPlan>& grid,
                                   const SearchOptions& options);

std::string search_csv(const std::vector<SearchRow>& rows);
std::string search_table(const std::vector<SearchRow>& rows);

}  // namespace bsr::experiments
