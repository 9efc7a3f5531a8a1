// SPDX-License-Identifier: Apache-2.0
//
// Synthetic datasets, optimizers, and deterministic training loops.
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "bsr/autodiff.hpp"
#include "bsr/bsr_policy.hpp"
#include "bsr/vit_model.hpp"

namespace bsr::train {

// ---------------------------------------------------------------------------
// Data

struct Dataset {
  /// Each [channels x size x size].
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  std::string split;

  std::size_t size() const noexcept { return images.size(); }
};

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

ChannelStats channel_stats(const Dataset& data);
/// Per-channel standardization in place.
void normalize(Dataset& data, const ChannelStats& stats);

struct SyntheticSpec {
  std::size_t num_classes = 4;
  std::size_t image_size = 16;
  std::size_t channels = 3;
  std::size_t train_size = 256;
  std::size_t test_size = 256;
  /// 0 gives the source task: one blob per class on a disjoint region.
  /// 1 replaces it by a class-specific grating; values between blend.
  double shift = 0.0;
  double noise = 0.3;
  std::uint64_t seed = 0;
};

struct TaskData {
  Dataset train;
  Dataset test;
};

/// Labels are assigned round-robin, so class counts differ by at most one.
/// Images are left unnormalized.
TaskData make_synthetic(const SyntheticSpec& spec);

/// Noise-free class pattern at a given shift.
Tensor class_pattern(const SyntheticSpec& spec, std::size_t label);

// ---------------------------------------------------------------------------
// Optimization

enum class OptimizerKind { SgdMomentum, AdamW };
enum class Schedule { Constant, Cosine };

const char* optimizer_name(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view text);
const char* schedule_name(Schedule s);
Schedule parse_schedule(std::string_view text);

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::AdamW;
  double base_lr = 1e-3;
  Schedule schedule = Schedule::Cosine;
  std::size_t epochs = 10;
  std::size_t batch = 16;
  double weight_decay = 0.0;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  /// Rejects batch 0, negative rates and non-finite values.
  void validate() const;
};

/// lr at `step` of `total_steps`; cosine reaches 0 at step == total_steps.
double learning_rate(const TrainConfig& config, std::size_t step, std::size_t total_steps);

struct OptimizerState {
  std::map<ad::ParamId, Tensor> first;
  std::map<ad::ParamId, Tensor> second;
  std::size_t steps = 0;
};

/// One update at learning rate `lr`. Parameters without a gradient entry
/// are untouched; a gradient for a frozen parameter raises ContractError.
void apply_update(ad::ParamStore& params, const ad::GradTable& grads, OptimizerState& state,
                  const TrainConfig& config, double lr);

/// apply_update at the scheduled rate for `step` of `total_steps`.
void step(ad::ParamStore& params, const ad::GradTable& grads, OptimizerState& state, const TrainConfig& config,
          std::size_t step_index, std::size_t total_steps);

// ---------------------------------------------------------------------------
// Loss and loops

struct LossValue {
  double loss = 0.0;
  /// d loss / d logits, same shape as the logits.
  Tensor grad;
  bool correct = false;
};

/// Softmax cross-entropy of [1 x C] logits.
LossValue cross_entropy(const Tensor& logits, std::size_t label);

struct MetricRow {
  std::size_t step = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;
  std::size_t tape_bytes = 0;

  friend bool operator==(const MetricRow&, const MetricRow&) = default;
};

/// `step,split,loss,accuracy,lr,tape_bytes`, numbers at round-trip precision.
std::string metrics_csv(const std::vector<MetricRow>& rows);
std::vector<MetricRow> parse_metrics_csv(std::string_view text);

struct Evaluation {
  double accuracy = 0.0;
  double mean_loss = 0.0;
};

/// Inference with the plan's token dropping; nothing is recorded.
Evaluation evaluate(const VisionTransformer& model, const Dataset& data, const policy::RunPlan& run,
                    std::size_t threads = 1);

struct LoopOptions {
  /// Worker threads for per-sample forward/backward; results are reduced
  /// in sample order, so the count never changes the outcome.
  std::size_t threads = 1;
  /// Compare every step's tape bytes with the exact-mode prediction, and
  /// audit the first tape of each epoch block by block.
  bool check_tape = true;
  /// Evaluate on the test split after every epoch.
  bool eval_each_epoch = true;
};

struct FinetuneResult {
  VisionTransformer model;
  std::vector<MetricRow> trace;
  Evaluation final_test;
};

/// Trains what `run` makes trainable (adding zero-initialized side blocks
/// when the plan needs them). NaN or infinite loss raises NumericError.
FinetuneResult finetune(VisionTransformer model, const TaskData& data, const policy::RunPlan& run,
                        const TrainConfig& config, const LoopOptions& options = {});

/// Trains a fresh model end to end on the source task.
FinetuneResult pretrain(const ViTConfig& config, const TaskData& data, const TrainConfig& train,
                        const InitOptions& init, const LoopOptions& options = {});

/// Threads requested through BSR_THREADS, at least 1; `fallback` when unset.
std::size_t threads_from_env(std::size_t fallback = 1);

}  // namespace bsr::train
