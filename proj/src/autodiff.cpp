// SPDX-License-Identifier: Apache-2.0
#include "bsr/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "bsr/errors.hpp"

namespace bsr::ad {

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Input: return "input";
    case OpKind::MatMul: return "matmul";
    case OpKind::BiasAdd: return "bias_add";
    case OpKind::Add: return "add";
    case OpKind::Scale: return "scale";
    case OpKind::SliceHeads: return "slice_heads";
    case OpKind::MergeHeads: return "merge_heads";
    case OpKind::AttentionScores: return "attention_scores";
    case OpKind::Softmax: return "softmax";
    case OpKind::AttentionApply: return "attention_apply";
    case OpKind::Gelu: return "gelu";
    case OpKind::LayerNorm: return "layernorm";
    case OpKind::SelectRows: return "select_rows";
    case OpKind::TokenImportance: return "token_importance";
    case OpKind::SelectAndFuse: return "select_and_fuse";
  }
  return "unknown";
}

const char* role_name(BufferRole role) {
  switch (role) {
    case BufferRole::InputActivation: return "input_activation";
    case BufferRole::Query: return "query";
    case BufferRole::Key: return "key";
    case BufferRole::Value: return "value";
    case BufferRole::Probabilities: return "softmax_probs";
    case BufferRole::GeluInput: return "gelu_input";
    case BufferRole::LayerNormStats: return "ln_stats";
    case BufferRole::LayerNormXhat: return "ln_xhat";
    case BufferRole::ScoreProbabilities: return "score_probs";
    case BufferRole::FusionInput: return "fusion_input";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// ParamStore

ParamId ParamStore::add(std::string name, Tensor value, bool trainable) {
  if (by_name_.contains(name)) {
    throw ContractError("duplicate parameter name " + name);
  }
  const auto id = static_cast<ParamId>(params_.size());
  by_name_.emplace(name, id);
  params_.push_back(Parameter{std::move(name), std::move(value), trainable});
  return id;
}

const Parameter& ParamStore::at(ParamId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= params_.size()) {
    throw ContractError("unknown parameter id " + std::to_string(id));
  }
  return params_[static_cast<std::size_t>(id)];
}

Parameter& ParamStore::at(ParamId id) {
  return const_cast<Parameter&>(static_cast<const ParamStore&>(*this).at(id));
}

std::optional<ParamId> ParamStore::find(std::string_view name) const {
  const auto it = by_name_.find(name);
  if (it == by_name_.end()) {
    return std::nullopt;
  }
  return it->second;
}

ParamId ParamStore::id(std::string_view name) const {
  if (auto found = find(name)) {
    return *found;
  }
  throw ContractError("unknown parameter " + std::string(name));
}

void ParamStore::freeze_all() {
  for (auto& p : params_) {
    p.trainable = false;
  }
}

std::size_t ParamStore::trainable_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (p.trainable) {
      n += p.value.numel();
    }
  }
  return n;
}

// ---------------------------------------------------------------------------
// Tape

std::vector<NodeId> TapeNode::parents() const {
  std::vector<NodeId> out;
  for (NodeId id : operands) {
    if (id != kNoNode) {
      out.push_back(id);
    }
  }
  return out;
}

const RetainedBuffer* TapeNode::find(BufferRole role) const noexcept {
  for (const auto& r : retained) {
    if (r.role == role) {
      return &r;
    }
  }
  return nullptr;
}

Tape::Tape(const ParamStore& params, std::size_t element_width) : params_(&params), element_width_(element_width) {}

NodeId Tape::append(TapeNode node) {
  const auto id = static_cast<NodeId>(nodes_.size());
  for (NodeId parent : node.operands) {
    if (parent != kNoNode && (parent < 0 || parent >= id)) {
      throw ContractError("tape parent " + std::to_string(parent) + " does not precede node " + std::to_string(id));
    }
  }
  nodes_.push_back(std::move(node));
  return id;
}

BufferPtr Tape::retain(const Var& v) {
  if (!v.tracked()) {
    return retain_new(v.value);
  }
  auto& slot = output_buffers_[v.node];
  if (!slot) {
    slot = std::make_shared<const Tensor>(v.value);
  }
  return slot;
}

BufferPtr Tape::retain_new(Tensor value) { return std::make_shared<const Tensor>(std::move(value)); }

void Tape::share_output(NodeId id, BufferPtr buffer) { output_buffers_[id] = std::move(buffer); }

std::size_t Tape::retained_bytes() const {
  std::unordered_set<const Tensor*> seen;
  std::size_t bytes = 0;
  for (const auto& n : nodes_) {
    for (const auto& r : n.retained) {
      if (seen.insert(r.tensor.get()).second) {
        bytes += r.tensor->bytes(element_width_);
      }
    }
  }
  return bytes;
}

bool Tape::drop_retained(NodeId id, BufferRole role) {
  auto& retained = nodes_.at(static_cast<std::size_t>(id)).retained;
  const auto it = std::find_if(retained.begin(), retained.end(), [&](const auto& r) { return r.role == role; });
  if (it == retained.end()) {
    return false;
  }
  retained.erase(it);
  return true;
}

void Tape::retain_extra(NodeId id, BufferRole role, Tensor value) {
  nodes_.at(static_cast<std::size_t>(id)).retained.push_back({role, retain_new(std::move(value))});
}

// ---------------------------------------------------------------------------
// Ops

namespace {

bool recording(const OpContext& ctx) { return ctx.tape != nullptr; }

TapeNode make_node(const OpContext& ctx, OpKind op, Linearity linearity, std::vector<NodeId> operands,
                   const Tensor& out) {
  TapeNode n;
  n.op = op;
  n.linearity = linearity;
  n.operands = std::move(operands);
  n.block_index = ctx.block;
  n.out_shape = out.shape();
  return n;
}

Var emit(OpContext& ctx, TapeNode&& node, Tensor&& value) {
  const NodeId id = ctx.tape->append(std::move(node));
  return Var{std::move(value), id};
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(what) + " expects rank " + std::to_string(rank) + ", got " +
                         shape_to_string(t.shape()));
  }
}

double normal_cdf(double x) noexcept { return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)); }

}  // namespace

double gelu_value(double x) noexcept { return x * normal_cdf(x); }

double gelu_derivative(double x) noexcept {
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return normal_cdf(x) + x * pdf;
}

Var input(OpContext& ctx, Tensor value, std::optional<int> block_input_of) {
  if (!recording(ctx)) {
    return Var{std::move(value)};
  }
  TapeNode n = make_node(ctx, OpKind::Input, Linearity::LinearInInput, {}, value);
  n.block_input_of = block_input_of;
  return emit(ctx, std::move(n), std::move(value));
}

void mark_block_input(OpContext& ctx, const Var& v, int block) {
  if (!recording(ctx) || !v.tracked()) {
    return;
  }
  ctx.tape->set_block_input(v.node, block);
}

Var matmul(OpContext& ctx, const Var& x, ParamId weight) {
  const Parameter& w = ctx.params.at(weight);
  Tensor y = dense::matmul(x.value, w.value);
  require_finite(y, "matmul");
  if (!recording(ctx) || (!x.tracked() && !w.trainable)) {
    return Var{std::move(y)};
  }
  TapeNode n = make_node(ctx, OpKind::MatMul, Linearity::LinearInInput, {x.node}, y);
  n.params = {weight};
  n.trainable = w.trainable;
  if (w.trainable) {
    n.retained.push_back({BufferRole::InputActivation, ctx.tape->retain(x)});
  }
  return emit(ctx, std::move(n), std::move(y));
}

Var bias_add(OpContext& ctx, const Var& x, ParamId bias) {
  const Parameter& b = ctx.params.at(bias);
  require_matrix(x.value, "bias_add");
  if (b.value.numel() != x.value.dim(1)) {
    throw DimensionError("bias of " + std::to_string(b.value.numel()) + " elements for rows of " +
                         std::to_string(x.value.dim(1)));
  }
  Tensor y = x.value;
  for (std::size_t i = 0; i < y.dim(0); ++i) {
    auto r = y.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) {
      r[j] += b.value[j];
    }
  }
  require_finite(y, "bias_add");
  if (!recording(ctx) || (!x.tracked() && !b.trainable)) {
    return Var{std::move(y)};
  }
  TapeNode n = make_node(ctx, OpKind::BiasAdd, Linearity::LinearInInput, {x.node}, y);
  n.params = {bias};
  n.trainable = b.trainable;
  return emit(ctx, std::move(n), std::move(y));
}

Var add(OpContext& ctx, const Var& a, const Var& b) {
  if (a.value.shape() != b.value.shape()) {
    throw DimensionError("add shape mismatch " + shape_to_string(a.value.shape()) + " vs " +
                         shape_to_string(b.value.shape()));
  }
  Tensor y = a.value;
  y += b.value;
  require_finite(y, "add");
  if (!recording(ctx) || (!a.tracked() && !b.tracked())) {
    return Var{std::move(y)};
  }
  return emit(ctx, make_node(ctx, OpKind::Add, Linearity::LinearInInput, {a.node, b.node}, y), std::move(y));
}

Var scale(OpContext& ctx, const Var& x, double factor) {
  Tensor y = x.value;
  y *= factor;
  require_finite(y, "scale");
  if (!recording(ctx) || !x.tracked()) {
    return Var{std::move(y)};
  }
  TapeNode n = make_node(ctx, OpKind::Scale, Linearity::LinearInInput, {x.node}, y);
  n.attrs.scale = factor;
  return emit(ctx, std::move(n), std::move(y));
}

Var slice_heads(OpContext& ctx, const Var& qkv, std::size_t part, std::size_t heads) {
  require_matrix(qkv.value, "slice_heads");
  const std::size_t t = qkv.value.dim(0);
  const std::size_t width = qkv.value.dim(1);
  if (part > 2 || heads == 0 || width % (3 * heads) != 0) {
    throw DimensionError("slice_heads: width " + std::to_string(width) + " is not 3 x heads x d");
  }
  const std::size_t embed = width / 3;
  const std::size_t d = embed / heads;
  Tensor y({heads, t, d});
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < t; ++i) {
      const double* src = qkv.value.raw() + i * width + part * embed + h * d;
      std::copy(src, src + d, y.raw() + (h * t + i) * d);
    }
  }
  if (!recording(ctx) || !qkv.tracked()) {
    return Var{std::move(y)};
  }
  TapeNode n = make_node(ctx, OpKind::SliceHeads, Linearity::LinearInInput, {qkv.node}, y);
  n.attrs.part = part;
  n.attrs.heads = heads;
  return emit(ctx, std::move(n), std::move(y));
}

Var merge_heads(OpContext& ctx, const Var& x) {
  require_rank(x.value, 3, "merge_heads");
  const std::size_t heads = x.value.dim(0);
  const std::size_t t = x.value.dim(1);
  const std::size_t d = x.value.dim(2);
  Tensor y({t, heads * d});
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < t; ++i) {
      const double* src = x.value.raw() + (h * t + i) * d;
      std::copy(src, src + d, y.raw() + i * heads * d + h * d);
    }
  }
  if (!recording(ctx) || !x.tracked()) {
    return Var{std::move(y)};
  }
  return emit(ctx, make_node(ctx, OpKind::MergeHeads, Linearity::LinearInInput, {x.node}, y), std::move(y));
}

Var attention_scores(OpContext& ctx, const Var& q, const Var& k, double scale_factor) {
  require_rank(q.value, 3, "attention_scores");
  require_rank(k.value, 3, "attention_scores");
  if (q.value.shape() != k.value.shape()) {
    throw DimensionError("attention_scores: Q " + shape_to_string(q.value.shape()) + " vs K " +
                         shape_to_string(k.value.shape()));
  }
  const std::size_t heads = q.value.dim(0);
  const std::size_t t = q.value.dim(1);
  const std::size_t d = q.value.dim(2);
  Tensor s({heads, t, t});
  for (std::size_t h = 0; h < heads; ++h) {
    dense::gemm_nt(t, d, t, q.value.raw() + h * t * d, k.value.raw() + h * t * d, s.raw() + h * t * t, false);
  }
  s *= scale_factor;
  require_finite(s, "attention_scores");
  if (!recording(ctx) || (!q.tracked() && !k.tracked())) {
    return Var{std::move(s)};
  }
  TapeNode n = make_node(ctx, OpKind::AttentionScores, Linearity::NonLinearInInput, {q.node, k.node}, s);
  n.attrs.scale = scale_factor;
  n.retained.push_back({BufferRole::Query, ctx.tape->retain(q)});
  n.retained.push_back({BufferRole::Key, ctx.tape->retain(k)});
  return emit(ctx, std::move(n), std::move(s));
}

Var softmax_rows(OpContext& ctx, const Var& x) {
  if (x.value.rank() == 0 || x.value.shape().back() == 0) {
    throw DimensionError("softmax over an empty row");
  }
  const std::size_t n = x.value.shape().back();
  const std::size_t rows = x.value.numel() / n;
  Tensor y = x.value;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = y.raw() + r * n;
    const double m = *std::max_element(row, row + n);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - m);
      sum += row[j];
    }
    for (std::size_t j = 0; j < n; ++j) {
      row[j] /= sum;
    }
  }
  require_finite(y, "softmax");
  if (!recording(ctx) || !x.tracked()) {
    return Var{std::move(y)};
  }
  TapeNode node = make_node(ctx, OpKind::Softmax, Linearity::NonLinearInInput, {x.node}, y);
  auto probs = std::make_shared<const Tensor>(y);
  node.retained.push_back({BufferRole::Probabilities, probs});
  Var out = emit(ctx, std::move(node), std::move(y));
  ctx.tape->share_output(out.node, probs);
  return out;
}

Var attention_apply(OpContext& ctx, const Var& probs, const Var& v) {
  require_rank(probs.value, 3, "attention_apply");
  require_rank(v.value, 3, "attention_apply");
  const std::size_t heads = v.value.dim(0);
  const std::size_t t = v.value.dim(1);
  const std::size_t d = v.value.dim(2);
  if (probs.value.dim(0) != heads || probs.value.dim(1) != t || probs.value.dim(2) != t) {
    throw DimensionError("attention_apply: probs " + shape_to_string(probs.value.shape()) + " vs V " +
                         shape_to_string(v.value.shape()));
  }
  Tensor o({heads, t, d});
  for (std::size_t h = 0; h < heads; ++h) {
    dense::gemm_nn(t, t, d, probs.value.raw() + h * t * t, v.value.raw() + h * t * d, o.raw() + h * t * d, false);
  }
  require_finite(o, "attention_apply");
  if (!recording(ctx) || (!probs.tracked() && !v.tracked())) {
    return Var{std::move(o)};
  }
  TapeNode n = make_node(ctx, OpKind::AttentionApply, Linearity::NonLinearInInput, {probs.node, v.node}, o);
  n.retained.push_back({BufferRole::Probabilities, ctx.tape->retain(probs)});
  n.retained.push_back({BufferRole::Value, ctx.tape->retain(v)});
  return emit(ctx, std::move(n), std::move(o));
}

Var gelu(OpContext& ctx, const Var& x) {
  Tensor y = x.value;
  for (double& v : y.data()) {
    v = gelu_value(v);
  }
  require_finite(y, "gelu");
  if (!recording(ctx) || !x.tracked()) {
    return Var{std::move(y)};
  }
  TapeNode n = make_node(ctx, OpKind::Gelu, Linearity::NonLinearInInput, {x.node}, y);
  n.retained.push_back({BufferRole::GeluInput, ctx.tape->retain(x)});
  return emit(ctx, std::move(n), std::move(y));
}

Var layernorm(OpContext& ctx, const Var& x, ParamId gamma, ParamId beta) {
  require_matrix(x.value, "layernorm");
  const std::size_t t = x.value.dim(0);
  const std::size_t width = x.value.dim(1);
  if (width < 2) {
    throw DimensionError("layernorm needs rows of at least 2 elements");
  }
  const Parameter& g = ctx.params.at(gamma);
  const Parameter& b = ctx.params.at(beta);
  if (g.value.numel() != width || b.value.numel() != width) {
    throw DimensionError("layernorm affine parameters do not match row width " + std::to_string(width));
  }
  Tensor xhat({t, width});
  Tensor stats({t, 2});
  Tensor y({t, width});
  for (std::size_t i = 0; i < t; ++i) {
    const auto row = x.value.row(i);
    double mean = 0.0;
    for (double v : row) {
      mean += v;
    }
    mean /= static_cast<double>(width);
    double var = 0.0;
    for (double v : row) {
      var += (v - mean) * (v - mean);
    }
    var /= static_cast<double>(width);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEpsilon);
    stats.at(i, 0) = mean;
    stats.at(i, 1) = rstd;
    for (std::size_t j = 0; j < width; ++j) {
      const double h = (row[j] - mean) * rstd;
      xhat.at(i, j) = h;
      y.at(i, j) = g.value[j] * h + b.value[j];
    }
  }
  require_finite(y, "layernorm");
  const bool trainable = g.trainable || b.trainable;
  if (!recording(ctx) || (!x.tracked() && !trainable)) {
    return Var{std::move(y)};
  }
  TapeNode n = make_node(ctx, OpKind::LayerNorm, Linearity::NonLinearInInput, {x.node}, y);
  n.params = {gamma, beta};
  n.trainable = trainable;
  n.retained.push_back({BufferRole::LayerNormXhat, ctx.tape->retain_new(std::move(xhat))});
  n.retained.push_back({BufferRole::LayerNormStats, ctx.tape->retain_new(std::move(stats))});
  return emit(ctx, std::move(n), std::move(y));
}

Var select_rows(OpContext& ctx, const Var& x, std::vector<std::size_t> rows) {
  require_matrix(x.value, "select_rows");
  const std::size_t width = x.value.dim(1);
  if (rows.empty()) {
    throw DimensionError("select_rows with no rows");
  }
  Tensor y({rows.size(), width});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= x.value.dim(0)) {
      throw DimensionError("select_rows index " + std::to_string(rows[r]) + " out of range");
    }
    const auto src = x.value.row(rows[r]);
    std::copy(src.begin(), src.end(), y.row(r).begin());
  }
  if (!recording(ctx) || !x.tracked()) {
    return Var{std::move(y)};
  }
  TapeNode n = make_node(ctx, OpKind::SelectRows, Linearity::LinearInInput, {x.node}, y);
  n.attrs.rows = std::move(rows);
  return emit(ctx, std::move(n), std::move(y));
}

Var token_importance(OpContext& ctx, const Var& q, const Var& k, double scale_factor) {
  require_rank(q.value, 3, "token_importance");
  if (q.value.shape() != k.value.shape()) {
    throw DimensionError("token_importance: Q and K shapes differ");
  }
  const std::size_t heads = q.value.dim(0);
  const std::size_t t = q.value.dim(1);
  const std::size_t d = q.value.dim(2);
  if (t < 2) {
    throw PlanError("token importance needs at least one image token");
  }
  const std::size_t n_img = t - 1;
  Tensor probs({heads, n_img});
  Tensor scores({n_img});
  for (std::size_t h = 0; h < heads; ++h) {
    const double* q0 = q.value.raw() + h * t * d;
    double* p = probs.raw() + h * n_img;
    for (std::size_t j = 0; j < n_img; ++j) {
      const double* kj = k.value.raw() + (h * t + j + 1) * d;
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        s += q0[c] * kj[c];
      }
      p[j] = s * scale_factor;
    }
    const double m = *std::max_element(p, p + n_img);
    double sum = 0.0;
    for (std::size_t j = 0; j < n_img; ++j) {
      p[j] = std::exp(p[j] - m);
      sum += p[j];
    }
    for (std::size_t j = 0; j < n_img; ++j) {
      p[j] /= sum;
    }
  }
  for (std::size_t j = 0; j < n_img; ++j) {
    double s = 0.0;
    for (std::size_t h = 0; h < heads; ++h) {
      s += probs.at(h, j);
    }
    scores[j] = s / static_cast<double>(heads);
  }
  require_finite(scores, "token_importance");
  if (!recording(ctx) || (!q.tracked() && !k.tracked())) {
    return Var{std::move(scores)};
  }
  TapeNode n = make_node(ctx, OpKind::TokenImportance, Linearity::NonLinearInInput, {q.node, k.node}, scores);
  n.attrs.scale = scale_factor;
  n.retained.push_back({BufferRole::Query, ctx.tape->retain(q)});
  n.retained.push_back({BufferRole::Key, ctx.tape->retain(k)});
  n.retained.push_back({BufferRole::ScoreProbabilities, ctx.tape->retain_new(std::move(probs))});
  return emit(ctx, std::move(n), std::move(scores));
}

Var select_and_fuse(OpContext& ctx, const Var& tokens, const Var& scores, const std::vector<std::size_t>& kept,
                    const std::vector<std::size_t>& dropped) {
  require_matrix(tokens.value, "select_and_fuse");
  const std::size_t t = tokens.value.dim(0);
  const std::size_t width = tokens.value.dim(1);
  if (scores.value.numel() + 1 != t) {
    throw DimensionError("select_and_fuse: " + std::to_string(scores.value.numel()) + " scores for " +
                         std::to_string(t) + " tokens");
  }
  if (kept.size() + dropped.size() + 1 != t) {
    throw DimensionError("select_and_fuse: kept and dropped sets do not partition the image tokens");
  }
  const bool fuse = !dropped.empty();
  Tensor y({1 + kept.size() + (fuse ? 1 : 0), width});
  std::copy(tokens.value.row(0).begin(), tokens.value.row(0).end(), y.row(0).begin());
  for (std::size_t r = 0; r < kept.size(); ++r) {
    if (kept[r] == 0 || kept[r] >= t) {
      throw DimensionError("select_and_fuse: kept index out of range");
    }
    const auto src = tokens.value.row(kept[r]);
    std::copy(src.begin(), src.end(), y.row(r + 1).begin());
  }
  std::vector<double> weights;
  double mass = 0.0;
  if (fuse) {
    for (std::size_t i : dropped) {
      if (i == 0 || i >= t) {
        throw DimensionError("select_and_fuse: dropped index out of range");
      }
      mass += scores.value[i - 1];
    }
    if (!(mass > 0.0)) {
      throw NumericError("select_and_fuse: dropped tokens carry no score mass");
    }
    auto fused = y.row(y.dim(0) - 1);
    for (std::size_t i : dropped) {
      const double w = scores.value[i - 1] / mass;
      weights.push_back(w);
      const auto src = tokens.value.row(i);
      for (std::size_t c = 0; c < width; ++c) {
        fused[c] += w * src[c];
      }
    }
  }
  require_finite(y, "select_and_fuse");
  if (!recording(ctx) || (!tokens.tracked() && !scores.tracked())) {
    return Var{std::move(y)};
  }
  const bool score_grad = scores.tracked() && fuse;
  TapeNode n = make_node(ctx, OpKind::SelectAndFuse,
                         score_grad ? Linearity::NonLinearInInput : Linearity::LinearInInput,
                         {tokens.node, scores.node}, y);
  n.attrs.rows = kept;
  n.attrs.dropped = dropped;
  n.attrs.fusion_weights = std::move(weights);
  n.attrs.fusion_mass = mass;
  if (score_grad) {
    Tensor dropped_rows({dropped.size(), width});
    for (std::size_t r = 0; r < dropped.size(); ++r) {
      const auto src = tokens.value.row(dropped[r]);
      std::copy(src.begin(), src.end(), dropped_rows.row(r).begin());
    }
    n.retained.push_back({BufferRole::FusionInput, ctx.tape->retain_new(std::move(dropped_rows))});
  }
  return emit(ctx, std::move(n), std::move(y));
}

const Tensor* GradTable::param(ParamId id) const {
  const auto it = params.find(id);
  return it == params.end() ? nullptr : &it->second;
}

const Tensor* GradTable::block_input(int block) const {
  const auto it = block_inputs.find(block);
  return it == block_inputs.end() ? nullptr : &it->second;
}

}  // namespace bsr::ad
