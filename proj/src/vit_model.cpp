// SPDX-License-Identifier: Apache-2.0
#include "bsr/vit_model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>

#include <json.hpp>

#include "bsr/errors.hpp"

namespace bsr {

namespace {

using ad::ParamId;
using ad::Var;

constexpr char kMagic[8] = {'B', 'S', 'R', 'C', 'K', 'P', 'T', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

/// Each parameter draws from its own stream so adding parameters later
/// never perturbs existing ones.
Tensor truncated_normal(const Shape& shape, double stddev, std::uint64_t seed, std::string_view name) {
  std::mt19937_64 rng(seed ^ fnv1a(name));
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor t(shape);
  for (double& v : t.data()) {
    double z = dist(rng);
    while (std::abs(z) > 2.0) {
      z = dist(rng);
    }
    v = z * stddev;
  }
  return t;
}

class Builder {
 public:
  Builder(ad::ParamStore& store, const InitOptions& init) : store_(store), init_(init) {}

  ParamId weight(const std::string& name, Shape shape) {
    return store_.add(name, truncated_normal(shape, init_.weight_std, init_.seed, name));
  }
  ParamId zeros(const std::string& name, Shape shape) { return store_.add(name, Tensor(std::move(shape))); }
  ParamId ones(const std::string& name, Shape shape) { return store_.add(name, Tensor(std::move(shape), 1.0)); }

  BlockParams block(const std::string& prefix, const ViTConfig& c) {
    const std::size_t l = c.embed;
    BlockParams p;
    p.ln1_gamma = ones(prefix + ".ln1.gamma", {l});
    p.ln1_beta = zeros(prefix + ".ln1.beta", {l});
    p.qkv_weight = weight(prefix + ".qkv.weight", {l, 3 * l});
    p.qkv_bias = zeros(prefix + ".qkv.bias", {3 * l});
    p.proj_weight = weight(prefix + ".proj.weight", {l, l});
    p.proj_bias = zeros(prefix + ".proj.bias", {l});
    p.ln2_gamma = ones(prefix + ".ln2.gamma", {l});
    p.ln2_beta = zeros(prefix + ".ln2.beta", {l});
    p.fc1_weight = weight(prefix + ".fc1.weight", {l, c.hidden()});
    p.fc1_bias = zeros(prefix + ".fc1.bias", {c.hidden()});
    p.fc2_weight = weight(prefix + ".fc2.weight", {c.hidden(), l});
    p.fc2_bias = zeros(prefix + ".fc2.bias", {l});
    return p;
  }

 private:
  ad::ParamStore& store_;
  InitOptions init_;
};

Var linear(ad::OpContext& ctx, const Var& x, ParamId w, ParamId b) {
  return ad::bias_add(ctx, ad::matmul(ctx, x, w), b);
}

}  // namespace

std::vector<ad::ParamId> BlockParams::all() const {
  return {ln1_gamma, ln1_beta, qkv_weight, qkv_bias, proj_weight, proj_bias,
          ln2_gamma, ln2_beta, fc1_weight, fc1_bias, fc2_weight, fc2_bias};
}

std::vector<ad::ParamId> SideBlockParams::all() const {
  std::vector<ad::ParamId> ids{down_weight, down_bias};
  for (ParamId id : block.all()) {
    ids.push_back(id);
  }
  ids.push_back(up_weight);
  ids.push_back(up_bias);
  return ids;
}

ViTConfig side_config(const ViTConfig& config) {
  ViTConfig s = config;
  s.embed = config.embed / 4;
  if (s.embed < 2) {
    throw DimensionError("embedding too narrow for a side block");
  }
  s.heads = s.embed % config.heads == 0 ? config.heads : 1;
  return s;
}

VisionTransformer::VisionTransformer(const ViTConfig& config, const InitOptions& init) {
  config.validate();
  layout_.config = config;
  Builder b(params_, init);
  const std::size_t l = config.embed;
  layout_.patch_weight = b.weight("patch_embed.weight", {config.patch_dim(), l});
  layout_.patch_bias = b.zeros("patch_embed.bias", {l});
  layout_.cls_token = b.weight("cls_token", {1, l});
  layout_.pos_embed = b.weight("pos_embed", {config.tokens(), l});
  for (std::size_t i = 0; i < config.depth; ++i) {
    layout_.blocks.push_back(b.block("blocks." + std::to_string(i), config));
  }
  layout_.norm_gamma = b.ones("norm.gamma", {l});
  layout_.norm_beta = b.zeros("norm.beta", {l});
  layout_.head_weight = b.weight("head.weight", {l, config.num_classes});
  layout_.head_bias = b.zeros("head.bias", {config.num_classes});
}

VisionTransformer::VisionTransformer(ModelLayout layout, ad::ParamStore params)
    : layout_(std::move(layout)), params_(std::move(params)) {}

void VisionTransformer::add_side_blocks(const std::vector<std::size_t>& positions, const InitOptions& init,
                                        bool zero_up) {
  const ViTConfig& c = layout_.config;
  const ViTConfig s = side_config(c);
  Builder b(params_, init);
  for (std::size_t pos : positions) {
    if (pos >= c.depth) {
      throw PlanError("side block position " + std::to_string(pos) + " out of range");
    }
    if (layout_.side_blocks.count(pos) != 0) {
      continue;
    }
    const std::string prefix = "side." + std::to_string(pos);
    SideBlockParams p;
    p.down_weight = b.weight(prefix + ".down.weight", {c.embed, s.embed});
    p.down_bias = b.zeros(prefix + ".down.bias", {s.embed});
    p.block = b.block(prefix + ".block", s);
    p.up_weight = zero_up ? b.zeros(prefix + ".up.weight", {s.embed, c.embed})
                          : b.weight(prefix + ".up.weight", {s.embed, c.embed});
    p.up_bias = b.zeros(prefix + ".up.bias", {c.embed});
    layout_.side_blocks.emplace(pos, p);
  }
}

void VisionTransformer::apply_trainable(const policy::RunPlan& run) {
  params_.freeze_all();
  const std::size_t depth = layout_.config.depth;
  for (std::size_t b = 0; b < depth; ++b) {
    if (run.block_trainable(b)) {
      for (ParamId id : layout_.blocks[b].all()) {
        params_.set_trainable(id, true);
      }
    }
    if (run.has_side_block(b)) {
      const auto it = layout_.side_blocks.find(b);
      if (it == layout_.side_blocks.end()) {
        throw PlanError("no side block at position " + std::to_string(b));
      }
      for (ParamId id : it->second.all()) {
        params_.set_trainable(id, true);
      }
    }
  }
  for (ParamId id : {layout_.norm_gamma, layout_.norm_beta, layout_.head_weight, layout_.head_bias}) {
    params_.set_trainable(id, true);
  }
}

// ---------------------------------------------------------------------------

Tensor patch_embed(const ModelLayout& layout, const ad::ParamStore& params, const Tensor& image) {
  const ViTConfig& c = layout.config;
  const Shape want{c.channels, c.image_size, c.image_size};
  if (image.shape() != want) {
    throw DimensionError("image of shape " + shape_to_string(image.shape()) + ", expected " +
                         shape_to_string(want));
  }
  const std::size_t g = c.patches_per_side();
  const std::size_t p = c.patch_size;
  Tensor patches({c.num_patches(), c.patch_dim()});
  for (std::size_t py = 0; py < g; ++py) {
    for (std::size_t px = 0; px < g; ++px) {
      auto row = patches.row(py * g + px);
      std::size_t col = 0;
      for (std::size_t ch = 0; ch < c.channels; ++ch) {
        for (std::size_t dy = 0; dy < p; ++dy) {
          for (std::size_t dx = 0; dx < p; ++dx) {
            row[col++] = image.at(ch, py * p + dy, px * p + dx);
          }
        }
      }
    }
  }
  const Tensor proj = dense::matmul(patches, params.at(layout.patch_weight).value);
  const Tensor& bias = params.at(layout.patch_bias).value;
  const Tensor& cls = params.at(layout.cls_token).value;
  const Tensor& pos = params.at(layout.pos_embed).value;
  Tensor tokens({c.tokens(), c.embed});
  for (std::size_t j = 0; j < c.embed; ++j) {
    tokens.at(0, j) = cls[j] + pos.at(0, j);
  }
  for (std::size_t i = 0; i < c.num_patches(); ++i) {
    for (std::size_t j = 0; j < c.embed; ++j) {
      tokens.at(i + 1, j) = proj.at(i, j) + bias[j] + pos.at(i + 1, j);
    }
  }
  return tokens;
}

policy::AttentionState MhsaResult::state() const {
  return policy::AttentionState{q.value, k.value, v.value, probs.value, scale};
}

MhsaResult mhsa_forward(ad::OpContext& ctx, const Var& x, const BlockParams& p, std::size_t heads) {
  require_matrix(x.value, "mhsa_forward");
  if (x.value.dim(0) < 2) {
    throw PlanError("attention needs the cls token and at least one image token");
  }
  MhsaResult r;
  const Var qkv = linear(ctx, x, p.qkv_weight, p.qkv_bias);
  r.q = ad::slice_heads(ctx, qkv, 0, heads);
  r.k = ad::slice_heads(ctx, qkv, 1, heads);
  r.v = ad::slice_heads(ctx, qkv, 2, heads);
  r.scale = 1.0 / std::sqrt(static_cast<double>(r.q.value.dim(2)));
  const Var scores = ad::attention_scores(ctx, r.q, r.k, r.scale);
  r.probs = ad::softmax_rows(ctx, scores);
  const Var heads_out = ad::attention_apply(ctx, r.probs, r.v);
  r.out = linear(ctx, ad::merge_heads(ctx, heads_out), p.proj_weight, p.proj_bias);
  return r;
}

BlockResult block_forward(ad::OpContext& ctx, const Var& x, const BlockParams& p, std::size_t heads,
                          std::optional<double> drop_rate, bool keep_attention) {
  BlockResult r;
  r.mhsa_tokens = x.value.dim(0);
  const MhsaResult att = mhsa_forward(ctx, ad::layernorm(ctx, x, p.ln1_gamma, p.ln1_beta), p, heads);
  if (keep_attention) {
    r.attention = att.state();
  }
  Var y = ad::add(ctx, x, att.out);
  if (drop_rate && policy::keep_count(r.mhsa_tokens, *drop_rate) < r.mhsa_tokens - 1) {
    const Var score = ad::token_importance(ctx, att.q, att.k, att.scale);
    y = policy::fuse_tokens(ctx, y, score, *drop_rate);
  }
  r.ffn_tokens = y.value.dim(0);
  const Var hidden = ad::gelu(ctx, linear(ctx, ad::layernorm(ctx, y, p.ln2_gamma, p.ln2_beta), p.fc1_weight,
                                          p.fc1_bias));
  r.out = ad::add(ctx, y, linear(ctx, hidden, p.fc2_weight, p.fc2_bias));
  return r;
}

Var side_forward(ad::OpContext& ctx, const Var& x, const SideBlockParams& p, const ViTConfig& side) {
  const Var down = linear(ctx, x, p.down_weight, p.down_bias);
  const BlockResult inner = block_forward(ctx, down, p.block, side.heads, std::nullopt);
  return linear(ctx, inner.out, p.up_weight, p.up_bias);
}

ForwardResult vit_forward(const ModelLayout& layout, const ad::ParamStore& params, const Tensor& image,
                          const policy::RunPlan& run, ad::Tape* tape, const ForwardOptions& options) {
  const ViTConfig& c = layout.config;
  policy::require_valid(c, run);
  const auto horizon = static_cast<int>(run.horizon(c.depth));
  if (tape != nullptr) {
    tape->set_horizon(horizon);
  }
  ad::OpContext ctx{params, tape, std::nullopt};
  ForwardResult result;
  Var x{patch_embed(layout, params, image)};

  // The horizon input enters as a leaf so its gradient can be reported; the
  // side-block baseline keeps it constant, since its frozen main block
  // needs nothing there.
  auto enter = [&](int block) {
    ctx.block = block;
    if (block == horizon && run.strategy != policy::Strategy::ResidualSide) {
      x = ad::input(ctx, std::move(x.value), block);
    } else if (block > horizon) {
      ad::mark_block_input(ctx, x, block);
    }
  };

  std::optional<ViTConfig> side;
  for (std::size_t b = 0; b < c.depth; ++b) {
    enter(static_cast<int>(b));
    const std::optional<double> rate = run.drops_at(b) ? std::optional(run.plan.drop_rate) : std::nullopt;
    BlockResult block = block_forward(ctx, x, layout.blocks[b], c.heads, rate, options.keep_attention);
    if (run.has_side_block(b)) {
      const auto it = layout.side_blocks.find(b);
      if (it == layout.side_blocks.end()) {
        throw PlanError("no side block at position " + std::to_string(b));
      }
      if (!side) {
        side = side_config(c);
      }
      block.out = ad::add(ctx, block.out, side_forward(ctx, x, it->second, *side));
    }
    result.trace.mhsa_tokens.push_back(block.mhsa_tokens);
    result.trace.ffn_tokens.push_back(block.ffn_tokens);
    if (block.attention) {
      result.trace.attention.push_back(std::move(*block.attention));
    }
    x = std::move(block.out);
  }

  enter(static_cast<int>(c.depth));
  const Var cls = ad::select_rows(ctx, x, {0});
  const Var normed = ad::layernorm(ctx, cls, layout.norm_gamma, layout.norm_beta);
  result.logits = linear(ctx, normed, layout.head_weight, layout.head_bias);
  return result;
}

ForwardResult vit_forward(const VisionTransformer& model, const Tensor& image, const policy::RunPlan& run,
                          ad::Tape* tape, const ForwardOptions& options) {
  return vit_forward(model.layout(), model.params(), image, run, tape, options);
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_checkpoint(const VisionTransformer& model) {
  const ViTConfig& c = model.config();
  nlohmann::json manifest;
  manifest["format"] = "BSRCKPT1";
  manifest["version"] = 1;
  manifest["config"] = {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"channels", c.channels},
                        {"embed", c.embed},           {"heads", c.heads},           {"ffn_mult", c.ffn_mult},
                        {"depth", c.depth},           {"num_classes", c.num_classes}};
  std::vector<std::size_t> sides;
  for (const auto& [pos, _] : model.layout().side_blocks) {
    sides.push_back(pos);
  }
  manifest["side_blocks"] = sides;
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const ad::Parameter& p : model.params()) {
    tensors.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", offset}});
    offset += p.value.numel() * sizeof(double);
  }
  manifest["tensors"] = std::move(tensors);
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> out(sizeof(kMagic) + sizeof(std::uint64_t) + text.size() + offset);
  std::uint8_t* cursor = out.data();
  std::memcpy(cursor, kMagic, sizeof(kMagic));
  cursor += sizeof(kMagic);
  const std::uint64_t len = text.size();
  std::memcpy(cursor, &len, sizeof(len));
  cursor += sizeof(len);
  std::memcpy(cursor, text.data(), text.size());
  cursor += text.size();
  for (const ad::Parameter& p : model.params()) {
    std::memcpy(cursor, p.value.raw(), p.value.numel() * sizeof(double));
    cursor += p.value.numel() * sizeof(double);
  }
  return out;
}

VisionTransformer decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  const std::size_t header = sizeof(kMagic) + sizeof(std::uint64_t);
  if (bytes.size() < header || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not a BSRCKPT1 checkpoint");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + sizeof(kMagic), sizeof(len));
  if (len > bytes.size() - header) {
    throw FormatError("checkpoint manifest length exceeds file size");
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + header, bytes.begin() + static_cast<std::ptrdiff_t>(header + len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }
  const std::uint8_t* payload = bytes.data() + header + len;
  const std::size_t payload_size = bytes.size() - header - len;

  try {
    if (manifest.at("version").get<int>() != 1) {
      throw FormatError("unsupported checkpoint version");
    }
    const auto& jc = manifest.at("config");
    ViTConfig c;
    c.image_size = jc.at("image_size").get<std::size_t>();
    c.patch_size = jc.at("patch_size").get<std::size_t>();
    c.channels = jc.at("channels").get<std::size_t>();
    c.embed = jc.at("embed").get<std::size_t>();
    c.heads = jc.at("heads").get<std::size_t>();
    c.ffn_mult = jc.at("ffn_mult").get<std::size_t>();
    c.depth = jc.at("depth").get<std::size_t>();
    c.num_classes = jc.at("num_classes").get<std::size_t>();

    VisionTransformer model(c, InitOptions{0, 0.0});
    model.add_side_blocks(manifest.at("side_blocks").get<std::vector<std::size_t>>(), InitOptions{0, 0.0});
    ad::ParamStore& store = model.params();
    const auto& tensors = manifest.at("tensors");
    if (tensors.size() != store.size()) {
      throw FormatError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model expects " +
                        std::to_string(store.size()));
    }
    for (const auto& jt : tensors) {
      const auto name = jt.at("name").get<std::string>();
      const auto id = store.find(name);
      if (!id) {
        throw FormatError("checkpoint tensor '" + name + "' is not a model parameter");
      }
      Tensor& value = store.at(*id).value;
      if (jt.at("shape").get<Shape>() != value.shape()) {
        throw DimensionError("checkpoint tensor '" + name + "' has shape " +
                             shape_to_string(jt.at("shape").get<Shape>()) + ", expected " +
                             shape_to_string(value.shape()));
      }
      const auto offset = jt.at("offset").get<std::size_t>();
      const std::size_t n = value.numel() * sizeof(double);
      if (offset > payload_size || n > payload_size - offset) {
        throw FormatError("checkpoint tensor '" + name + "' runs past the payload");
      }
      std::memcpy(value.raw(), payload + offset, n);
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }
}

void save_checkpoint(const VisionTransformer& model, const std::string& path) {
  const auto bytes = encode_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw FormatError("cannot open '" + path + "' for writing");
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw FormatError("failed writing '" + path + "'");
  }
}

VisionTransformer load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw FormatError("cannot open '" + path + "'");
  }
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace bsr
