// SPDX-License-Identifier: Apache-2.0
#include "bsr/memory_model.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "bsr/errors.hpp"
#include "bsr/vit_model.hpp"

namespace bsr::memory {

namespace {

constexpr std::size_t w = kElementWidth;

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::string pad_left(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : std::string(width - s.size(), ' ') + s;
}

std::string rule(std::size_t width) {
  std::string r;
  for (std::size_t i = 0; i < width; ++i) {
    r += "─";
  }
  return r;
}

std::size_t dropped_at(const policy::RunPlan& run, std::size_t block, std::size_t t_mhsa) {
  if (!run.drops_at(block)) {
    return 0;
  }
  return t_mhsa - 1 - policy::keep_count(t_mhsa, run.plan.drop_rate);
}

MemoryReport estimate_blocks(const ViTConfig& config, const policy::RunPlan& run, std::size_t batch, Mode mode) {
  MemoryReport r;
  r.mode = mode;
  r.batch = batch;
  const policy::TokenSchedule sched = policy::token_schedule(config, run);
  const std::size_t horizon = run.horizon(config.depth);
  for (std::size_t b = horizon; b < config.depth; ++b) {
    BlockEntry e;
    e.index = b;
    e.trainable = run.block_trainable(b);
    e.side = run.has_side_block(b);
    e.mhsa_tokens = sched.mhsa_tokens[b];
    e.ffn_tokens = sched.ffn_tokens[b];
    // With a constant input, a frozen main block records nothing.
    const bool main_recorded = e.trainable || b > horizon;
    if (main_recorded) {
      e.bytes = block_memory(config, e.mhsa_tokens, e.ffn_tokens, e.trainable, mode);
      if (const std::size_t m = dropped_at(run, b, e.mhsa_tokens); m > 0) {
        e.bytes += token_select_memory(config, e.mhsa_tokens, m, mode);
      }
    }
    if (e.side) {
      e.bytes += side_block_memory(config, e.mhsa_tokens, mode);
    }
    e.bytes *= batch;
    r.blocks.push_back(e);
  }
  BlockEntry head;
  head.index = config.depth;
  head.trainable = true;
  head.mhsa_tokens = head.ffn_tokens = 1;
  head.bytes = head_memory(config, mode);
  head.bytes *= batch;
  r.blocks.push_back(head);

  for (const BlockEntry& e : r.blocks) {
    (e.trainable || e.side ? r.trainable_total : r.frozen_total) += e.bytes.total();
    r.grand_total += e.bytes.total();
  }
  return r;
}

std::size_t parse_size(std::string_view field, const char* what) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size() || field.empty()) {
    throw FormatError(std::string("bad ") + what + " field '" + std::string(field) + "'");
  }
  return v;
}

}  // namespace

const char* mode_name(Mode mode) { return mode == Mode::Paper ? "paper" : "exact"; }

Mode parse_mode(std::string_view text) {
  if (text == "paper") {
    return Mode::Paper;
  }
  if (text == "exact") {
    return Mode::Exact;
  }
  throw FormatError("mode must be 'paper' or 'exact', got '" + std::string(text) + "'");
}

const char* role_name(Role role) {
  switch (role) {
    case Role::Gelu: return "gelu";
    case Role::LinearExtras: return "linear_extras";
    case Role::LnStat: return "ln_stat";
    case Role::LnXhat: return "ln_xhat";
    case Role::Qkv: return "qkv";
    case Role::Softmax: return "softmax";
    case Role::TokenSelect: return "token_select";
  }
  return "unknown";
}

Role parse_role(std::string_view text) {
  for (Role r : kRoles) {
    if (text == role_name(r)) {
      return r;
    }
  }
  throw FormatError("unknown memory role '" + std::string(text) + "'");
}

Role report_role(ad::BufferRole role) {
  using B = ad::BufferRole;
  switch (role) {
    case B::InputActivation: return Role::LinearExtras;
    case B::Query:
    case B::Key:
    case B::Value: return Role::Qkv;
    case B::Probabilities: return Role::Softmax;
    case B::GeluInput: return Role::Gelu;
    case B::LayerNormStats: return Role::LnStat;
    case B::LayerNormXhat: return Role::LnXhat;
    case B::ScoreProbabilities:
    case B::FusionInput: return Role::TokenSelect;
  }
  return Role::LinearExtras;
}

std::size_t& BlockMemory::operator[](Role role) {
  switch (role) {
    case Role::Gelu: return gelu;
    case Role::LinearExtras: return linear_extras;
    case Role::LnStat: return ln_stat;
    case Role::LnXhat: return ln_xhat;
    case Role::Qkv: return qkv;
    case Role::Softmax: return softmax;
    case Role::TokenSelect: return token_select;
  }
  return qkv;
}

std::size_t BlockMemory::operator[](Role role) const { return (*const_cast<BlockMemory*>(this))[role]; }

BlockMemory& BlockMemory::operator+=(const BlockMemory& o) {
  for (Role r : kRoles) {
    (*this)[r] += o[r];
  }
  return *this;
}

BlockMemory& BlockMemory::operator*=(std::size_t k) {
  for (Role r : kRoles) {
    (*this)[r] *= k;
  }
  return *this;
}

BlockMemory block_memory(const ViTConfig& c, std::size_t tm, std::size_t tf, bool trainable, Mode mode) {
  if (tm < 2 || tf < 2) {
    throw DimensionError("block token counts must be at least 2");
  }
  const std::size_t l = c.embed;
  BlockMemory m;
  m.qkv = 3 * tm * l * w;
  m.softmax = c.heads * tm * tm * w;
  m.gelu = tf * c.hidden() * w;
  if (trainable) {
    if (mode == Mode::Paper) {
      m.linear_extras = (3 * tm + (2 + c.ffn_mult) * tf) * l * w;
    } else {
      // LayerNorm inputs are kept in normalized form, so they move to ln_xhat.
      m.linear_extras = (2 * tm + (1 + c.ffn_mult) * tf) * l * w;
      m.ln_xhat = (tm + tf) * l * w;
    }
  } else if (mode == Mode::Exact) {
    m.ln_xhat = (tm + tf) * l * w;
  }
  if (mode == Mode::Exact) {
    m.ln_stat = 2 * (tm + tf) * w;
  }
  return m;
}

BlockMemory token_select_memory(const ViTConfig& c, std::size_t tm, std::size_t dropped, Mode mode) {
  BlockMemory m;
  if (mode == Mode::Exact && dropped > 0) {
    m.token_select = (c.heads * (tm - 1) + dropped * c.embed) * w;
  }
  return m;
}

BlockMemory side_block_memory(const ViTConfig& config, std::size_t tokens, Mode mode) {
  const ViTConfig s = side_config(config);
  BlockMemory m = block_memory(s, tokens, tokens, true, mode);
  m.linear_extras += tokens * (config.embed + s.embed) * w;
  return m;
}

BlockMemory head_memory(const ViTConfig& c, Mode mode) {
  BlockMemory m;
  m.linear_extras = c.embed * w;
  if (mode == Mode::Exact) {
    m.ln_xhat = c.embed * w;
    m.ln_stat = 2 * w;
  }
  return m;
}

BlockMemory MemoryReport::block(std::size_t index) const {
  BlockMemory m;
  for (const BlockEntry& e : blocks) {
    if (e.index == index) {
      m += e.bytes;
    }
  }
  return m;
}

MemoryReport estimate_total(const ViTConfig& config, const policy::RunPlan& run, std::size_t batch, Mode mode) {
  config.validate();
  policy::require_valid(config, run);
  if (batch == 0) {
    throw ContractError("batch must be at least 1");
  }
  MemoryReport r = estimate_blocks(config, run, batch, mode);
  const policy::RunPlan full{policy::Strategy::Bsr, policy::full_plan(config.depth)};
  r.baseline_total = estimate_blocks(config, full, batch, mode).grand_total;
  r.reduce_ratio = static_cast<double>(r.baseline_total) / static_cast<double>(r.grand_total);
  return r;
}

// ---------------------------------------------------------------------------

FlopsReport count_flops(const ViTConfig& c, const policy::RunPlan& run, std::size_t batch) {
  c.validate();
  policy::require_valid(c, run);
  const policy::TokenSchedule sched = policy::token_schedule(c, run);
  const std::size_t l = c.embed;
  auto block_macs = [](const ViTConfig& cfg, std::size_t tm, std::size_t tf, BlockFlops& f) {
    const std::size_t e = cfg.embed;
    f.qkv_proj = 3 * tm * e * e;
    f.attn_scores = cfg.heads * tm * tm * cfg.head_dim();
    f.attn_apply = cfg.heads * tm * tm * cfg.head_dim();
    f.out_proj = tm * e * e;
    f.ffn = 2 * tf * e * e * cfg.ffn_mult;
  };

  FlopsReport r;
  r.batch = batch;
  r.patch_embed = c.num_patches() * l * c.patch_dim() * batch;
  for (std::size_t b = 0; b < c.depth; ++b) {
    BlockFlops f;
    f.index = b;
    block_macs(c, sched.mhsa_tokens[b], sched.ffn_tokens[b], f);
    if (run.has_side_block(b)) {
      const ViTConfig s = side_config(c);
      const std::size_t t = sched.mhsa_tokens[b];
      BlockFlops inner;
      block_macs(s, t, t, inner);
      f.side = 2 * t * l * s.embed + inner.total();
    }
    f.qkv_proj *= batch;
    f.attn_scores *= batch;
    f.attn_apply *= batch;
    f.out_proj *= batch;
    f.ffn *= batch;
    f.side *= batch;
    r.blocks.push_back(f);
  }
  r.head = l * c.num_classes * batch;
  r.total = r.patch_embed + r.head;
  for (const BlockFlops& f : r.blocks) {
    r.total += f.total();
  }
  return r;
}

// ---------------------------------------------------------------------------

BlockMemory TapeBreakdown::block(std::size_t index) const {
  for (const auto& [b, m] : blocks) {
    if (b == index) {
      return m;
    }
  }
  return {};
}

TapeBreakdown tape_breakdown(const ad::Tape& tape) {
  std::map<std::size_t, BlockMemory> per_block;
  std::set<const Tensor*> seen;
  TapeBreakdown out;
  for (const ad::TapeNode& n : tape.nodes()) {
    for (const ad::RetainedBuffer& buf : n.retained) {
      if (!seen.insert(buf.tensor.get()).second) {
        continue;
      }
      if (!n.block_index) {
        throw ContractError(std::string("retaining ") + ad::op_name(n.op) + " node carries no block index");
      }
      const std::size_t bytes = buf.tensor->bytes(tape.element_width());
      per_block[static_cast<std::size_t>(*n.block_index)][report_role(buf.role)] += bytes;
      out.total += bytes;
    }
  }
  out.blocks.assign(per_block.begin(), per_block.end());
  return out;
}

std::string AuditResult::describe() const {
  std::ostringstream os;
  if (equal()) {
    os << "tape matches prediction: " << actual_total << " bytes";
    return os.str();
  }
  os << "tape holds " << actual_total << " bytes, prediction " << predicted_total;
  for (const AuditDiff& d : diffs) {
    os << "\n  block " << d.block << " " << role_name(d.role) << ": predicted " << d.predicted << ", tape "
       << d.actual;
  }
  return os.str();
}

AuditResult tape_audit(const ad::Tape& tape, const MemoryReport& report) {
  if (report.mode != Mode::Exact || report.batch != 1) {
    throw ContractError("tape audit needs an exact-mode report at batch 1");
  }
  const TapeBreakdown actual = tape_breakdown(tape);
  std::set<std::size_t> indices;
  for (const BlockEntry& e : report.blocks) {
    indices.insert(e.index);
  }
  for (const auto& [b, _] : actual.blocks) {
    indices.insert(b);
  }
  AuditResult r;
  r.predicted_total = report.grand_total;
  r.actual_total = actual.total;
  for (std::size_t b : indices) {
    const BlockMemory p = report.block(b);
    const BlockMemory a = actual.block(b);
    for (Role role : kRoles) {
      if (p[role] != a[role]) {
        r.diffs.push_back({b, role, p[role], a[role]});
      }
    }
  }
  return r;
}

void require_audit(const ad::Tape& tape, const MemoryReport& report) {
  const AuditResult r = tape_audit(tape, report);
  if (!r.equal()) {
    throw AuditFailure(r.describe());
  }
}

// ---------------------------------------------------------------------------

std::string format_table(const MemoryReport& r) {
  const std::vector<Role> cols = {Role::Qkv,    Role::Softmax, Role::Gelu,       Role::LinearExtras,
                                  Role::LnXhat, Role::LnStat,  Role::TokenSelect};
  std::ostringstream os;
  std::string header = pad_left("block", 6) + pad_left("t_mhsa", 8) + pad_left("t_ffn", 7) + pad_left("train", 7);
  for (Role c : cols) {
    header += pad_left(role_name(c), 15);
  }
  header += pad_left("total MB", 12);
  os << "activation memory (" << mode_name(r.mode) << " mode, batch " << r.batch << ")\n";
  os << header << '\n' << rule(header.size()) << '\n';
  for (const BlockEntry& e : r.blocks) {
    const bool head = e.index == r.blocks.back().index && &e == &r.blocks.back();
    std::string line = pad_left(head ? "head" : std::to_string(e.index), 6) +
                       pad_left(head ? "-" : std::to_string(e.mhsa_tokens), 8) +
                       pad_left(head ? "-" : std::to_string(e.ffn_tokens), 7) +
                       pad_left(e.side ? "side" : (e.trainable ? "yes" : "no"), 7);
    for (Role c : cols) {
      line += pad_left(fixed(to_mb(e.bytes[c]), 3), 15);
    }
    line += pad_left(fixed(to_mb(e.bytes.total()), 3), 12);
    os << line << '\n';
  }
  os << rule(header.size()) << '\n';
  os << "frozen    " << fixed(to_mb(r.frozen_total), 2) << " MB\n";
  os << "trainable " << fixed(to_mb(r.trainable_total), 2) << " MB\n";
  os << "total     " << fixed(r.grand_mb(), 2) << " MB (" << r.grand_total << " bytes)\n";
  os << "baseline  " << fixed(to_mb(r.baseline_total), 2) << " MB, reduction " << fixed(r.reduce_ratio, 2)
     << "x\n";
  return os.str();
}

std::string to_csv(const MemoryReport& r) {
  std::map<std::size_t, BlockMemory> rows;
  for (const BlockEntry& e : r.blocks) {
    rows[e.index] += e.bytes;
  }
  std::ostringstream os;
  os << "block,role,bytes,mode\n";
  for (const auto& [b, m] : rows) {
    for (Role role : kRoles) {
      os << b << ',' << role_name(role) << ',' << m[role] << ',' << mode_name(r.mode) << '\n';
    }
  }
  return os.str();
}

std::vector<CsvRow> parse_csv(std::string_view text) {
  std::vector<CsvRow> rows;
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != "block,role,bytes,mode") {
    throw FormatError("memory csv must start with 'block,role,bytes,mode'");
  }
  while (std::getline(in, line)) {
    if (line.empty()) {
      continue;
    }
    std::vector<std::string_view> f;
    std::string_view rest = line;
    for (std::size_t pos; (pos = rest.find(',')) != std::string_view::npos; rest.remove_prefix(pos + 1)) {
      f.push_back(rest.substr(0, pos));
    }
    f.push_back(rest);
    if (f.size() != 4) {
      throw FormatError("memory csv row '" + line + "' has " + std::to_string(f.size()) + " fields");
    }
    rows.push_back({parse_size(f[0], "block"), parse_role(f[1]), parse_size(f[2], "bytes"), parse_mode(f[3])});
  }
  return rows;
}

std::string format_flops_table(const FlopsReport& r) {
  std::ostringstream os;
  const std::string header = pad_left("block", 6) + pad_left("qkv", 10) + pad_left("scores", 10) +
                             pad_left("apply", 10) + pad_left("out", 10) + pad_left("ffn", 10) +
                             pad_left("side", 10) + pad_left("GMacs", 10);
  auto g = [](std::size_t v) { return fixed(static_cast<double>(v) / 1e9, 3); };
  os << "forward MACs (batch " << r.batch << ")\n" << header << '\n' << rule(header.size()) << '\n';
  os << pad_left("embed", 6) << pad_left("", 60) << pad_left(g(r.patch_embed), 10) << '\n';
  for (const BlockFlops& f : r.blocks) {
    os << pad_left(std::to_string(f.index), 6) << pad_left(g(f.qkv_proj), 10) << pad_left(g(f.attn_scores), 10)
       << pad_left(g(f.attn_apply), 10) << pad_left(g(f.out_proj), 10) << pad_left(g(f.ffn), 10)
       << pad_left(g(f.side), 10) << pad_left(g(f.total()), 10) << '\n';
  }
  os << pad_left("head", 6) << pad_left("", 60) << pad_left(g(r.head), 10) << '\n';
  os << rule(header.size()) << '\n' << "total " << fixed(r.gmacs(), 2) << " GMacs\n";
  return os.str();
}

}  // namespace bsr::memory
