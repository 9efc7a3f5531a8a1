// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <numbers>
#include <optional>

#include "bsr/autodiff.hpp"
#include "bsr/errors.hpp"

namespace bsr::ad {

namespace {

const Tensor& need(const TapeNode& node, BufferRole role) {
  const RetainedBuffer* r = node.find(role);
  if (r == nullptr) {
    throw RetentionViolation(std::string(op_name(node.op)) + " backward needs '" + role_name(role) +
                             "' which was not retained");
  }
  return *r->tensor;
}

class Sweep {
 public:
  Sweep(const Tape& tape, const BackwardOptions& options) : tape_(tape), options_(options), grads_(tape.size()) {}

  GradTable run(const Tensor& seed) {
    if (tape_.size() == 0) {
      throw ContractError("backward on an empty tape");
    }
    const auto last = static_cast<NodeId>(tape_.size() - 1);
    if (seed.shape() != tape_.node(last).out_shape) {
      throw DimensionError("seed " + shape_to_string(seed.shape()) + " does not match output " +
                           shape_to_string(tape_.node(last).out_shape));
    }
    grads_[static_cast<std::size_t>(last)] = seed;
    for (NodeId id = last; id >= 0; --id) {
      const TapeNode& node = tape_.node(id);
      if (node.block_index && *node.block_index < tape_.horizon()) {
        continue;
      }
      auto& slot = grads_[static_cast<std::size_t>(id)];
      if (!slot) {
        continue;
      }
      const Tensor g = std::move(*slot);
      slot.reset();
      if (node.block_input_of) {
        table_.block_inputs[*node.block_input_of] = g;
      }
      visit(node, g);
    }
    return std::move(table_);
  }

 private:
  bool wants(NodeId operand) const { return operand != kNoNode; }

  void send(NodeId operand, Tensor g) {
    if (operand == kNoNode) {
      return;
    }
    auto& slot = grads_[static_cast<std::size_t>(operand)];
    if (slot) {
      *slot += g;
    } else {
      slot = std::move(g);
    }
  }

  void send_param(ParamId id, Tensor g) {
    if (!tape_.params().at(id).trainable) {
      return;
    }
    auto it = table_.params.find(id);
    if (it == table_.params.end()) {
      table_.params.emplace(id, std::move(g));
    } else {
      it->second += g;
    }
  }

  const Shape& operand_shape(NodeId operand) const { return tape_.node(operand).out_shape; }

  void visit(const TapeNode& node, const Tensor& g) {
    switch (node.op) {
      case OpKind::Input:
        return;
      case OpKind::MatMul:
        return matmul(node, g);
      case OpKind::BiasAdd:
        send(node.operands[0], g);
        send_param(node.params[0], dense::column_sum(g));
        return;
      case OpKind::Add:
        send(node.operands[0], g);
        send(node.operands[1], g);
        return;
      case OpKind::Scale: {
        Tensor dx = g;
        dx *= node.attrs.scale;
        send(node.operands[0], std::move(dx));
        return;
      }
      case OpKind::SliceHeads:
        return slice_heads(node, g);
      case OpKind::MergeHeads:
        return merge_heads(node, g);
      case OpKind::AttentionScores:
        return attention_scores(node, g);
      case OpKind::Softmax:
        return softmax(node, g);
      case OpKind::AttentionApply:
        return attention_apply(node, g);
      case OpKind::Gelu:
        return gelu(node, g);
      case OpKind::LayerNorm:
        return layernorm(node, g);
      case OpKind::SelectRows:
        return select_rows(node, g);
      case OpKind::TokenImportance:
        return token_importance(node, g);
      case OpKind::SelectAndFuse:
        return select_and_fuse(node, g);
    }
  }

  void matmul(const TapeNode& node, const Tensor& g) {
    const Parameter& w = tape_.params().at(node.params[0]);
    if (wants(node.operands[0])) {
      // Linear in the input: only the weight is read.
      send(node.operands[0], dense::matmul_nt(g, w.value));
    }
    if (w.trainable) {
      send_param(node.params[0], dense::matmul_tn(need(node, BufferRole::InputActivation), g));
    }
  }

  void slice_heads(const TapeNode& node, const Tensor& g) {
    if (!wants(node.operands[0])) {
      return;
    }
    const Shape& in = operand_shape(node.operands[0]);
    const std::size_t heads = g.dim(0);
    const std::size_t t = g.dim(1);
    const std::size_t d = g.dim(2);
    const std::size_t width = in[1];
    const std::size_t embed = width / 3;
    Tensor dx(in);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < t; ++i) {
        const double* src = g.raw() + (h * t + i) * d;
        double* dst = dx.raw() + i * width + node.attrs.part * embed + h * d;
        for (std::size_t c = 0; c < d; ++c) {
          dst[c] = src[c];
        }
      }
    }
    send(node.operands[0], std::move(dx));
  }

  void merge_heads(const TapeNode& node, const Tensor& g) {
    if (!wants(node.operands[0])) {
      return;
    }
    const Shape& in = operand_shape(node.operands[0]);
    const std::size_t heads = in[0];
    const std::size_t t = in[1];
    const std::size_t d = in[2];
    Tensor dx(in);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < t; ++i) {
        const double* src = g.raw() + i * heads * d + h * d;
        double* dst = dx.raw() + (h * t + i) * d;
        for (std::size_t c = 0; c < d; ++c) {
          dst[c] = src[c];
        }
      }
    }
    send(node.operands[0], std::move(dx));
  }

  void attention_scores(const TapeNode& node, const Tensor& g) {
    const Tensor& q = need(node, BufferRole::Query);
    const Tensor& k = need(node, BufferRole::Key);
    const std::size_t heads = q.dim(0);
    const std::size_t t = q.dim(1);
    const std::size_t d = q.dim(2);
    if (wants(node.operands[0])) {
      Tensor dq(q.shape());
      for (std::size_t h = 0; h < heads; ++h) {
        dense::gemm_nn(t, t, d, g.raw() + h * t * t, k.raw() + h * t * d, dq.raw() + h * t * d, false);
      }
      dq *= node.attrs.scale;
      send(node.operands[0], std::move(dq));
    }
    if (wants(node.operands[1])) {
      Tensor dk(k.shape());
      for (std::size_t h = 0; h < heads; ++h) {
        dense::gemm_tn(t, t, d, g.raw() + h * t * t, q.raw() + h * t * d, dk.raw() + h * t * d, false);
      }
      dk *= node.attrs.scale;
      send(node.operands[1], std::move(dk));
    }
  }

  void softmax(const TapeNode& node, const Tensor& g) {
    const Tensor& y = need(node, BufferRole::Probabilities);
    const std::size_t n = y.shape().back();
    const std::size_t rows = y.numel() / n;
    Tensor dx(y.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y.raw() + r * n;
      const double* gr = g.raw() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        dot += gr[j] * yr[j];
      }
      double* out = dx.raw() + r * n;
      for (std::size_t j = 0; j < n; ++j) {
        out[j] = yr[j] * (gr[j] - dot);
      }
    }
    send(node.operands[0], std::move(dx));
  }

  void attention_apply(const TapeNode& node, const Tensor& g) {
    const Tensor& p = need(node, BufferRole::Probabilities);
    const Tensor& v = need(node, BufferRole::Value);
    const std::size_t heads = v.dim(0);
    const std::size_t t = v.dim(1);
    const std::size_t d = v.dim(2);
    if (wants(node.operands[0])) {
      Tensor dp(p.shape());
      for (std::size_t h = 0; h < heads; ++h) {
        dense::gemm_nt(t, d, t, g.raw() + h * t * d, v.raw() + h * t * d, dp.raw() + h * t * t, false);
      }
      send(node.operands[0], std::move(dp));
    }
    if (wants(node.operands[1])) {
      Tensor dv(v.shape());
      for (std::size_t h = 0; h < heads; ++h) {
        dense::gemm_tn(t, t, d, p.raw() + h * t * t, g.raw() + h * t * d, dv.raw() + h * t * d, false);
      }
      send(node.operands[1], std::move(dv));
    }
  }

  void gelu(const TapeNode& node, const Tensor& g) {
    const Tensor& x = need(node, BufferRole::GeluInput);
    Tensor dx(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double slope = options_.fault == BackwardFault::GeluDerivative
                               ? 0.5 * (1.0 + std::erf(x[i] / std::numbers::sqrt2))
                               : gelu_derivative(x[i]);
      dx[i] = g[i] * slope;
    }
    send(node.operands[0], std::move(dx));
  }

  void layernorm(const TapeNode& node, const Tensor& g) {
    const Tensor& xhat = need(node, BufferRole::LayerNormXhat);
    const Tensor& stats = need(node, BufferRole::LayerNormStats);
    const Tensor& gamma = tape_.params().at(node.params[0]).value;
    const std::size_t t = xhat.dim(0);
    const std::size_t width = xhat.dim(1);
    if (tape_.params().at(node.params[0]).trainable) {
      Tensor dgamma({width});
      for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = 0; j < width; ++j) {
          dgamma[j] += g.at(i, j) * xhat.at(i, j);
        }
      }
      send_param(node.params[0], std::move(dgamma));
    }
    if (tape_.params().at(node.params[1]).trainable) {
      send_param(node.params[1], dense::column_sum(g));
    }
    if (!wants(node.operands[0])) {
      return;
    }
    Tensor dx({t, width});
    const double inv_n = 1.0 / static_cast<double>(width);
    for (std::size_t i = 0; i < t; ++i) {
      double mean_g = 0.0;
      double mean_gx = 0.0;
      for (std::size_t j = 0; j < width; ++j) {
        const double gh = g.at(i, j) * gamma[j];
        mean_g += gh;
        mean_gx += gh * xhat.at(i, j);
      }
      mean_g *= inv_n;
      mean_gx *= inv_n;
      const double rstd = stats.at(i, 1);
      for (std::size_t j = 0; j < width; ++j) {
        const double gh = g.at(i, j) * gamma[j];
        dx.at(i, j) = rstd * (gh - mean_g - xhat.at(i, j) * mean_gx);
      }
    }
    send(node.operands[0], std::move(dx));
  }

  void select_rows(const TapeNode& node, const Tensor& g) {
    if (!wants(node.operands[0])) {
      return;
    }
    Tensor dx(operand_shape(node.operands[0]));
    for (std::size_t r = 0; r < node.attrs.rows.size(); ++r) {
      auto dst = dx.row(node.attrs.rows[r]);
      const auto src = g.row(r);
      for (std::size_t c = 0; c < src.size(); ++c) {
        dst[c] += src[c];
      }
    }
    send(node.operands[0], std::move(dx));
  }

  void token_importance(const TapeNode& node, const Tensor& g) {
    const Tensor& q = need(node, BufferRole::Query);
    const Tensor& k = need(node, BufferRole::Key);
    const Tensor& probs = need(node, BufferRole::ScoreProbabilities);
    const std::size_t heads = q.dim(0);
    const std::size_t t = q.dim(1);
    const std::size_t d = q.dim(2);
    const std::size_t n_img = t - 1;
    const double scale = node.attrs.scale;
    Tensor dq(q.shape());
    Tensor dk(k.shape());
    std::vector<double> dz(n_img);
    for (std::size_t h = 0; h < heads; ++h) {
      const double* p = probs.raw() + h * n_img;
      double dot = 0.0;
      for (std::size_t j = 0; j < n_img; ++j) {
        dot += g[j] * p[j];
      }
      for (std::size_t j = 0; j < n_img; ++j) {
        dz[j] = p[j] * (g[j] - dot) / static_cast<double>(heads);
      }
      const double* q0 = q.raw() + h * t * d;
      double* dq0 = dq.raw() + h * t * d;
      for (std::size_t j = 0; j < n_img; ++j) {
        const double* kj = k.raw() + (h * t + j + 1) * d;
        double* dkj = dk.raw() + (h * t + j + 1) * d;
        for (std::size_t c = 0; c < d; ++c) {
          dq0[c] += dz[j] * kj[c] * scale;
          dkj[c] += dz[j] * q0[c] * scale;
        }
      }
    }
    send(node.operands[0], std::move(dq));
    send(node.operands[1], std::move(dk));
  }

  void select_and_fuse(const TapeNode& node, const Tensor& g) {
    const auto& kept = node.attrs.rows;
    const auto& dropped = node.attrs.dropped;
    const auto& weights = node.attrs.fusion_weights;
    const std::size_t width = g.dim(1);
    const bool fuse = !dropped.empty();
    if (wants(node.operands[0])) {
      Tensor dx(operand_shape(node.operands[0]));
      for (std::size_t c = 0; c < width; ++c) {
        dx.at(0, c) = g.at(0, c);
      }
      for (std::size_t r = 0; r < kept.size(); ++r) {
        for (std::size_t c = 0; c < width; ++c) {
          dx.at(kept[r], c) += g.at(r + 1, c);
        }
      }
      if (fuse) {
        const auto gf = g.row(g.dim(0) - 1);
        for (std::size_t r = 0; r < dropped.size(); ++r) {
          auto dst = dx.row(dropped[r]);
          for (std::size_t c = 0; c < width; ++c) {
            dst[c] += weights[r] * gf[c];
          }
        }
      }
      send(node.operands[0], std::move(dx));
    }
    if (wants(node.operands[1]) && fuse) {
      const Tensor& xd = need(node, BufferRole::FusionInput);
      const auto gf = g.row(g.dim(0) - 1);
      double g_dot_fused = 0.0;
      std::vector<double> g_dot_x(dropped.size());
      for (std::size_t r = 0; r < dropped.size(); ++r) {
        const auto xr = xd.row(r);
        double s = 0.0;
        for (std::size_t c = 0; c < width; ++c) {
          s += gf[c] * xr[c];
        }
        g_dot_x[r] = s;
        g_dot_fused += weights[r] * s;
      }
      Tensor ds(operand_shape(node.operands[1]));
      for (std::size_t r = 0; r < dropped.size(); ++r) {
        ds[dropped[r] - 1] = (g_dot_x[r] - g_dot_fused) / node.attrs.fusion_mass;
      }
      send(node.operands[1], std::move(ds));
    }
  }

  const Tape& tape_;
  const BackwardOptions& options_;
  std::vector<std::optional<Tensor>> grads_;
  GradTable table_;
};

}  // namespace

GradTable backward(const Tape& tape, const Tensor& seed, const BackwardOptions& options) {
  return Sweep(tape, options).run(seed);
}

}  // namespace bsr::ad
