// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode tape with explicit activation retention.
//
// Every recorded node states which buffers it keeps for its backward rule.
// The retention policy is fixed per op:
//   - ops linear in their input (matmul by a parameter, bias add, residual
//     add, scaling, head slicing, row gathers) keep nothing, except that a
//     matmul by a trainable weight keeps its input for the weight gradient;
//   - non-linear ops keep exactly what their backward reads (Q/K for the
//     score product, probabilities and V for the apply product, softmax
//     output, GELU input, LayerNorm normalized input and row statistics).
// Backward can only reach those buffers through TapeNode::find, so a missing
// buffer surfaces as RetentionViolation instead of a silent recompute.
#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "bsr/tensor.hpp"

namespace bsr::ad {

using NodeId = std::int32_t;
using ParamId = std::int32_t;
inline constexpr NodeId kNoNode = -1;

inline constexpr double kLayerNormEpsilon = 1e-6;

enum class OpKind : std::uint8_t {
  Input,
  MatMul,
  BiasAdd,
  Add,
  Scale,
  SliceHeads,
  MergeHeads,
  AttentionScores,
  Softmax,
  AttentionApply,
  Gelu,
  LayerNorm,
  SelectRows,
  TokenImportance,
  SelectAndFuse,
};

enum class Linearity : std::uint8_t { LinearInInput, NonLinearInInput };

enum class BufferRole : std::uint8_t {
  InputActivation,
  Query,
  Key,
  Value,
  Probabilities,
  GeluInput,
  LayerNormStats,
  LayerNormXhat,
  ScoreProbabilities,
  FusionInput,
};

const char* op_name(OpKind op);
const char* role_name(BufferRole role);

struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = false;
};

/// Named parameter tensors plus their trainable flags.
class ParamStore {
 public:
  ParamId add(std::string name, Tensor value, bool trainable = false);

  const Parameter& at(ParamId id) const;
  Parameter& at(ParamId id);
  std::optional<ParamId> find(std::string_view name) const;
  ParamId id(std::string_view name) const;

  std::size_t size() const noexcept { return params_.size(); }
  void set_trainable(ParamId id, bool trainable) { at(id).trainable = trainable; }
  void freeze_all();
  std::size_t trainable_scalars() const;

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter> params_;
  std::map<std::string, ParamId, std::less<>> by_name_;
};

using BufferPtr = std::shared_ptr<const Tensor>;

struct RetainedBuffer {
  BufferRole role;
  BufferPtr tensor;
};

/// Op-specific metadata that is not an activation (indices, weights of a
/// fixed selection, scale factors).
struct NodeAttrs {
  double scale = 1.0;
  std::size_t heads = 0;
  std::size_t part = 0;
  std::vector<std::size_t> rows;
  std::vector<std::size_t> dropped;
  std::vector<double> fusion_weights;
  double fusion_mass = 0.0;
};

struct TapeNode {
  OpKind op = OpKind::Input;
  Linearity linearity = Linearity::LinearInInput;
  /// One entry per tensor operand, kNoNode where the operand is a constant.
  std::vector<NodeId> operands;
  std::vector<ParamId> params;
  std::vector<RetainedBuffer> retained;
  std::optional<int> block_index;
  bool trainable = false;
  /// Set on the node whose output is the input of that block.
  std::optional<int> block_input_of;
  Shape out_shape;
  NodeAttrs attrs;

  std::vector<NodeId> parents() const;
  const RetainedBuffer* find(BufferRole role) const noexcept;
  bool retains(BufferRole role) const noexcept { return find(role) != nullptr; }
};

/// A value flowing through the forward pass. `node` is kNoNode for
/// constants that need no gradient.
struct Var {
  Tensor value;
  NodeId node = kNoNode;

  bool tracked() const noexcept { return node != kNoNode; }
};

/// Append-only record of one forward pass.
class Tape {
 public:
  explicit Tape(const ParamStore& params, std::size_t element_width = 4);

  NodeId append(TapeNode node);

  const std::vector<TapeNode>& nodes() const noexcept { return nodes_; }
  const TapeNode& node(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const noexcept { return nodes_.size(); }
  const ParamStore& params() const noexcept { return *params_; }
  std::size_t element_width() const noexcept { return element_width_; }

  /// Keeps `v` for a backward rule; two retentions of the same tracked
  /// value share one buffer.
  BufferPtr retain(const Var& v);
  BufferPtr retain_new(Tensor value);
  /// Registers `buffer` as the kept copy of node `id`'s output, so later
  /// retentions of that output share it.
  void share_output(NodeId id, BufferPtr buffer);

  /// Bytes of distinct retained buffers at the accounting width.
  std::size_t retained_bytes() const;

  /// Records that node `id` produces the input of `block`.
  void set_block_input(NodeId id, int block) { nodes_.at(static_cast<std::size_t>(id)).block_input_of = block; }

  /// Nodes with a block index below the horizon are skipped by backward.
  void set_horizon(int horizon) noexcept { horizon_ = horizon; }
  int horizon() const noexcept { return horizon_; }

  /// Test hooks: remove a retained buffer, or attach one the op never needed.
  bool drop_retained(NodeId id, BufferRole role);
  void retain_extra(NodeId id, BufferRole role, Tensor value);

 private:
  const ParamStore* params_;
  std::size_t element_width_;
  std::vector<TapeNode> nodes_;
  std::unordered_map<NodeId, BufferPtr> output_buffers_;
  int horizon_ = 0;
};

/// Where ops read parameters from, where they record, and which block they
/// belong to. A null tape means inference: nothing is recorded or kept.
struct OpContext {
  const ParamStore& params;
  Tape* tape = nullptr;
  std::optional<int> block;
};

/// Leaf node carrying a constant into the tape (block inputs at the horizon).
Var input(OpContext& ctx, Tensor value, std::optional<int> block_input_of = std::nullopt);
/// Marks `v` as the input of `block` so backward reports its gradient.
void mark_block_input(OpContext& ctx, const Var& v, int block);

Var matmul(OpContext& ctx, const Var& x, ParamId weight);
Var bias_add(OpContext& ctx, const Var& x, ParamId bias);
Var add(OpContext& ctx, const Var& a, const Var& b);
Var scale(OpContext& ctx, const Var& x, double factor);
/// [t x 3L] -> [H x t x L/H]; `part` 0/1/2 selects Q/K/V.
Var slice_heads(OpContext& ctx, const Var& qkv, std::size_t part, std::size_t heads);
/// [H x t x d] -> [t x H*d].
Var merge_heads(OpContext& ctx, const Var& x);
/// Per head q k^T * scale, [H x t x t].
Var attention_scores(OpContext& ctx, const Var& q, const Var& k, double scale);
Var softmax_rows(OpContext& ctx, const Var& x);
/// Per head probs * v.
Var attention_apply(OpContext& ctx, const Var& probs, const Var& v);
Var gelu(OpContext& ctx, const Var& x);
Var layernorm(OpContext& ctx, const Var& x, ParamId gamma, ParamId beta);
Var select_rows(OpContext& ctx, const Var& x, std::vector<std::size_t> rows);
/// Class-token attention over image tokens: for each head the softmax over
/// j >= 1 of q_0 k_j * scale, averaged over heads. Output has t-1 entries.
Var token_importance(OpContext& ctx, const Var& q, const Var& k, double scale);
/// Output rows: [row 0, kept rows..., fused], the fused row being the
/// score-weighted mean of `dropped` rows. `scores` index image tokens, so
/// token row i has score scores[i-1].
Var select_and_fuse(OpContext& ctx, const Var& tokens, const Var& scores, const std::vector<std::size_t>& kept,
                    const std::vector<std::size_t>& dropped);

double gelu_value(double x) noexcept;
double gelu_derivative(double x) noexcept;

struct GradTable {
  std::map<ParamId, Tensor> params;
  std::map<int, Tensor> block_inputs;

  const Tensor* param(ParamId id) const;
  const Tensor* block_input(int block) const;
};

enum class BackwardFault : std::uint8_t { None, GeluDerivative };

struct BackwardOptions {
  /// Deliberately wrong backward rule, used to prove gradient checks fail.
  BackwardFault fault = BackwardFault::None;
};

/// Reverse sweep from the last node of `tape`, seeded with `seed`.
GradTable backward(const Tape& tape, const Tensor& seed, const BackwardOptions& options = {});

}  // namespace bsr::ad
