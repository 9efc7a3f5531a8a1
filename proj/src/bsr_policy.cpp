// SPDX-License-Identifier: Apache-2.0
#include "bsr/bsr_policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "bsr/errors.hpp"
#include "bsr/kv_text.hpp"

namespace bsr::policy {

namespace {

// Rounding slack for (1-r)(t-1): 1-0.7 is 0.30000000000000004, which would
// otherwise turn an exact 18 into 19.
constexpr double kCeilSlack = 1e-9;

bool contains(const std::vector<std::size_t>& v, std::size_t x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

bool strictly_increasing(const std::vector<std::size_t>& v) {
  return std::adjacent_find(v.begin(), v.end(), std::greater_equal<>()) == v.end();
}

std::string join(const std::vector<std::size_t>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) {
    os << (i ? "," : "") << v[i];
  }
  return os.str();
}

}  // namespace

std::size_t BsrPlan::grad_horizon() const {
  if (trainable_blocks.empty()) {
    throw PlanError("plan has no trainable blocks");
  }
  return *std::min_element(trainable_blocks.begin(), trainable_blocks.end());
}

bool BsrPlan::is_trainable(std::size_t block) const { return contains(trainable_blocks, block); }

bool BsrPlan::is_drop_location(std::size_t block) const { return contains(drop_locations, block); }

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Bsr: return "bsr";
    case Strategy::HeadOnly: return "head-only";
    case Strategy::ResidualSide: return "residual";
  }
  return "unknown";
}

std::size_t RunPlan::horizon(std::size_t depth) const {
  if (strategy == Strategy::HeadOnly) {
    return depth;
  }
  return plan.grad_horizon();
}

bool RunPlan::block_trainable(std::size_t block) const {
  return strategy == Strategy::Bsr && plan.is_trainable(block);
}

bool RunPlan::has_side_block(std::size_t block) const {
  return strategy == Strategy::ResidualSide && plan.is_trainable(block);
}

bool RunPlan::drops_at(std::size_t block) const {
  return strategy != Strategy::ResidualSide && plan.is_drop_location(block);
}

BsrPlan default_plan(std::size_t depth) {
  BsrPlan p;
  for (std::size_t k = 0; k < 3; ++k) {
    const auto b = std::min(depth - 1, static_cast<std::size_t>(std::floor(depth / 4.0 + k * depth / 3.0)));
    if (!contains(p.trainable_blocks, b)) {
      p.trainable_blocks.push_back(b);
    }
  }
  for (std::size_t k = 1; k <= 3; ++k) {
    const std::size_t b = std::min(depth - 1, k * depth / 4);
    if (!contains(p.drop_locations, b)) {
      p.drop_locations.push_back(b);
    }
  }
  p.drop_rate = 0.5;
  p.strict = std::all_of(p.drop_locations.begin(), p.drop_locations.end(), [](std::size_t b) { return b >= 3; });
  return p;
}

BsrPlan full_plan(std::size_t depth) {
  BsrPlan p;
  p.trainable_blocks.resize(depth);
  std::iota(p.trainable_blocks.begin(), p.trainable_blocks.end(), std::size_t{0});
  return p;
}

PlanValidation validate_plan(const ViTConfig& config, const RunPlan& run) {
  PlanValidation v;
  const BsrPlan& p = run.plan;
  const std::size_t depth = config.depth;
  if (run.strategy != Strategy::HeadOnly && p.trainable_blocks.empty()) {
    v.errors.push_back("trainable block set is empty");
  }
  if (!strictly_increasing(p.trainable_blocks)) {
    v.errors.push_back("trainable blocks must be strictly increasing");
  }
  if (!strictly_increasing(p.drop_locations)) {
    v.errors.push_back("drop locations must be strictly increasing");
  }
  for (std::size_t b : p.trainable_blocks) {
    if (b >= depth) {
      v.errors.push_back("trainable block " + std::to_string(b) + " out of range [0, " + std::to_string(depth) + ")");
    }
  }
  for (std::size_t b : p.drop_locations) {
    if (b >= depth) {
      v.errors.push_back("drop location " + std::to_string(b) + " out of range [0, " + std::to_string(depth) + ")");
    }
    if (p.strict && b < 3) {
      v.errors.push_back("drop location " + std::to_string(b) + " precedes block 3 (strict mode)");
    }
  }
  if (!(p.drop_rate > 0.0 && p.drop_rate < 1.0)) {
    v.errors.push_back("drop rate must lie in (0, 1)");
  }
  if (run.strategy == Strategy::ResidualSide && !p.drop_locations.empty()) {
    v.errors.push_back("the residual side-block baseline does not drop tokens");
  }
  if (!v.ok() || run.strategy != Strategy::Bsr) {
    return v;
  }

  const auto& tb = p.trainable_blocks;
  if (!p.drop_locations.empty() && tb.back() < p.drop_locations.front()) {
    v.warnings.push_back("all trainable blocks precede all drop locations: token dropping saves no training memory");
  }
  const bool contiguous = tb.back() - tb.front() + 1 == tb.size();
  if (contiguous && tb.back() == depth - 1 && tb.size() < depth && tb.front() > depth / 2) {
    v.warnings.push_back("only terminal blocks are trainable: expect an accuracy gap");
  }
  return v;
}

void require_valid(const ViTConfig& config, const RunPlan& run) {
  const PlanValidation v = validate_plan(config, run);
  if (v.ok()) {
    return;
  }
  std::string msg = "invalid plan:";
  for (const auto& e : v.errors) {
    msg += "\n  " + e;
  }
  throw PlanError(msg);
}

BsrPlan parse_plan(std::string_view text) {
  BsrPlan p;
  for (const auto& [key, value] : parse_key_values(text)) {
    if (key == "trainable") {
      p.trainable_blocks = parse_index_list(key, value);
    } else if (key == "drops") {
      p.drop_locations = parse_index_list(key, value);
    } else if (key == "rate") {
      p.drop_rate = parse_number(key, value);
    } else if (key == "strict") {
      p.strict = parse_bool(key, value);
    } else {
      throw FormatError("unknown plan key '" + key + "'");
    }
  }
  return p;
}

std::string format_plan(const BsrPlan& p) {
  std::ostringstream os;
  os.precision(17);
  os << "trainable = " << join(p.trainable_blocks) << "\ndrops = " << join(p.drop_locations)
     << "\nrate = " << p.drop_rate << "\nstrict = " << (p.strict ? "true" : "false") << '\n';
  return os.str();
}

RunPlan resolve_plan(std::string_view name_or_path, std::size_t depth) {
  RunPlan run;
  if (name_or_path == "default") {
    run.plan = default_plan(depth);
  } else if (name_or_path == "full") {
    run.plan = full_plan(depth);
  } else if (name_or_path == "head-only") {
    run.strategy = Strategy::HeadOnly;
    run.plan = BsrPlan{};
  } else if (name_or_path == "residual") {
    run.strategy = Strategy::ResidualSide;
    run.plan = default_plan(depth);
    run.plan.drop_locations.clear();
  } else {
    run.plan = parse_plan(read_text_file(std::string(name_or_path)));
  }
  return run;
}

// ---------------------------------------------------------------------------

std::size_t keep_count(std::size_t tokens, double rate) {
  if (tokens < 1) {
    throw PlanError("no tokens to keep");
  }
  const double raw = (1.0 - rate) * static_cast<double>(tokens - 1);
  const auto k = static_cast<std::size_t>(std::ceil(raw - kCeilSlack));
  return std::min(k, tokens - 1);
}

std::size_t tokens_after_drop(std::size_t tokens, double rate) {
  const std::size_t kept = keep_count(tokens, rate);
  return kept == tokens - 1 ? tokens : kept + 2;
}

TokenSchedule token_schedule(const ViTConfig& config, const RunPlan& run) {
  TokenSchedule s;
  std::size_t t = config.tokens();
  for (std::size_t b = 0; b < config.depth; ++b) {
    s.mhsa_tokens.push_back(t);
    if (run.drops_at(b)) {
      t = tokens_after_drop(t, run.plan.drop_rate);
    }
    s.ffn_tokens.push_back(t);
  }
  return s;
}

TokenSchedule token_schedule(const ViTConfig& config, const BsrPlan& plan) {
  return token_schedule(config, RunPlan{Strategy::Bsr, plan});
}

ImportanceScore compute_token_importance(const AttentionState& state) {
  ad::ParamStore none;
  ad::OpContext ctx{none, nullptr, std::nullopt};
  ad::Var s = ad::token_importance(ctx, ad::Var{state.q}, ad::Var{state.k}, state.scale);
  return ImportanceScore{std::move(s.value)};
}

TokenSelection select_tokens(const Tensor& scores, double rate) {
  if (!(rate > 0.0 && rate < 1.0)) {
    throw PlanError("drop rate must lie in (0, 1)");
  }
  const std::size_t n_img = scores.numel();
  const std::size_t t = n_img + 1;
  if (t < 3) {
    throw PlanError("token selection needs at least two image tokens");
  }
  const std::size_t k = keep_count(t, rate);
  std::vector<std::size_t> order(n_img);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  TokenSelection sel;
  for (std::size_t r = 0; r < n_img; ++r) {
    (r < k ? sel.kept : sel.dropped).push_back(order[r] + 1);
  }
  std::sort(sel.kept.begin(), sel.kept.end());
  std::sort(sel.dropped.begin(), sel.dropped.end());
  return sel;
}

Tensor select_and_fuse(const Tensor& tokens, const ImportanceScore& score, double rate) {
  ad::ParamStore none;
  ad::OpContext ctx{none, nullptr, std::nullopt};
  return fuse_tokens(ctx, ad::Var{tokens}, ad::Var{score.scores}, rate).value;
}

ad::Var fuse_tokens(ad::OpContext& ctx, const ad::Var& tokens, const ad::Var& scores, double rate) {
  const TokenSelection sel = select_tokens(scores.value, rate);
  return ad::select_and_fuse(ctx, tokens, scores, sel.kept, sel.dropped);
}

}  // namespace bsr::policy
