// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion, indented detail lines
// below it. `--criterion N` runs a single criterion.
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <algorithm>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "bsr/experiments.hpp"
#include "bsr/memory_model.hpp"
#include "bsr/train.hpp"

namespace {

using namespace bsr;
using memory::Mode;
using policy::BsrPlan;
using policy::RunPlan;
using policy::Strategy;

class Criterion {
 public:
  bool ok = true;

  void detail(const char* fmt, ...) __attribute__((format(printf, 2, 3))) {
    char buf[512];
    va_list args;
    va_start(args, fmt);
    std::vsnprintf(buf, sizeof(buf), fmt, args);
    va_end(args);
    lines_.push_back(buf);
  }

  /// |value - target| <= tol * target.
  void near(const char* what, double value, double target, double tol) {
    const bool pass = std::abs(value - target) <= tol * std::abs(target);
    detail("%-44s %10.4f  target %9.4f  +-%.0f%%  %s", what, value, target, tol * 100, pass ? "ok" : "OUT");
    ok = ok && pass;
  }

  void absolute(const char* what, double value, double target, double tol) {
    const bool pass = std::abs(value - target) <= tol;
    detail("%-44s %10.4f  target %9.4f  +-%.3f  %s", what, value, target, tol, pass ? "ok" : "OUT");
    ok = ok && pass;
  }

  void check(const std::string& what, bool pass) {
    detail("%-44s %s", what.c_str(), pass ? "ok" : "FAILED");
    ok = ok && pass;
  }

  const std::vector<std::string>& lines() const { return lines_; }

 private:
  std::vector<std::string> lines_;
};

double mb(std::size_t bytes) { return memory::to_mb(bytes); }

double paper_mb(const ViTConfig& c, const RunPlan& run, std::size_t batch) {
  return memory::estimate_total(c, run, batch, Mode::Paper).grand_mb();
}

// 1 ----------------------------------------------------------------------------

void table1(Criterion& k) {
  const auto b = memory::block_memory(deit_small(), 197, 197, false, Mode::Paper);
  k.absolute("QKV (MB)", mb(b.qkv), 0.87, 0.01);
  k.absolute("softmax (MB)", mb(b.softmax), 0.89, 0.01);
  k.absolute("GELU (MB)", mb(b.gelu), 1.15, 0.01);
}

// 2 ----------------------------------------------------------------------------

void block_totals(Criterion& k) {
  k.near("frozen block (MB)", mb(memory::block_memory(deit_small(), 197, 197, false, Mode::Paper).total()), 2.91, 0.02);
  k.near("trainable block (MB)", mb(memory::block_memory(deit_small(), 197, 197, true, Mode::Paper).total()), 5.51,
         0.02);
}

// 3 ----------------------------------------------------------------------------

void ft_full(Criterion& k) {
  const ViTConfig c = deit_small();
  const RunPlan full{Strategy::Bsr, policy::full_plan(12)};
  k.near("DeiT-S FT-Full batch 128, paper (MB)", paper_mb(c, full, 128), 8649, 0.05);
  const auto exact = memory::estimate_total(c, full, 1, Mode::Exact);
  k.near("DeiT-S FT-Full batch 1, exact (MB)", exact.grand_mb(), 66.9, 0.03);
  const VisionTransformer model = experiments::make_model(c, full, 0, 0.02);
  ad::Tape tape(model.params(), memory::kElementWidth);
  vit_forward(model, experiments::random_image(c, 1), full, &tape);
  k.near("DeiT-S FT-Full batch 1, tape (MB)", mb(tape.retained_bytes()), 66.9, 0.03);
}

// 4 ----------------------------------------------------------------------------

void bsr_memory(Criterion& k) {
  const RunPlan bsr{Strategy::Bsr, policy::default_plan(12)};
  const auto d = memory::estimate_total(deit_small(), bsr, 128, Mode::Paper);
  k.near("DeiT-S default plan batch 128 (MB)", d.grand_mb(), 1433, 0.10);
  k.near("DeiT-S reduce ratio", d.reduce_ratio, 6.03, 0.10);
  k.near("ViT-B reduce ratio", memory::estimate_total(vit_base(), bsr, 128, Mode::Paper).reduce_ratio, 5.92, 0.10);
}

// 5 ----------------------------------------------------------------------------

void flops(Criterion& k) {
  const RunPlan full{Strategy::Bsr, policy::full_plan(12)};
  const RunPlan bsr{Strategy::Bsr, policy::default_plan(12)};
  k.near("DeiT-S no drop, GMacs/sample", memory::count_flops(deit_small(), full, 1).gmacs(), 4.6, 0.05);
  k.near("DeiT-S no drop, batch 128 (GMacs)", memory::count_flops(deit_small(), full, 128).gmacs(), 589, 0.05);
  k.near("DeiT-S default plan, batch 128 (GMacs)", memory::count_flops(deit_small(), bsr, 128).gmacs(), 295, 0.10);
  k.near("ViT-B no drop, batch 128 (GMacs)", memory::count_flops(vit_base(), full, 128).gmacs(), 2249, 0.05);
  k.near("ViT-B default plan, batch 128 (GMacs)", memory::count_flops(vit_base(), bsr, 128).gmacs(), 1129, 0.10);
}

// 6 ----------------------------------------------------------------------------

void orderings(Criterion& k) {
  const ViTConfig c = deit_small();
  struct Row {
    BsrPlan plan;
    double published;
  };
  // Trainable-set rows with drops [3,6,9] at r = 0.5.
  const std::vector<Row> memory_rows = {
      {{{3, 7, 11}, {3, 6, 9}, 0.5, false}, 1433},
      {{{9, 10, 11}, {3, 6, 9}, 0.5, false}, 333},
      {{{4, 11}, {3, 6, 9}, 0.5, false}, 986},
  };
  const std::vector<Row> flops_rows = {
      {{{3, 7, 11}, {1, 3, 5, 7, 9}, 0.3, false}, 270},
      {{{3, 7, 11}, {3, 6, 9}, 0.5, false}, 295},
      {{{3, 7, 11}, {5, 7, 9}, 0.7, false}, 311},
  };
  const auto ranked = [&](const std::vector<Row>& rows, experiments::SortKey key) {
    std::vector<BsrPlan> grid;
    for (const Row& r : rows) {
      grid.push_back(r.plan);
    }
    experiments::SearchOptions o;
    o.sort = key;
    return experiments::plan_search(c, grid, o);
  };
  const auto published_order = [](std::vector<Row> rows) {
    std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.published < b.published; });
    return rows;
  };

  const auto mem = ranked(memory_rows, experiments::SortKey::Memory);
  const auto mem_expect = published_order(memory_rows);
  bool mem_order = mem.size() == mem_expect.size();
  for (std::size_t i = 0; i < mem.size() && mem_order; ++i) {
    mem_order = mem[i].plan == mem_expect[i].plan;
  }
  k.check("memory ranking [9,10,11] < [4,11] < [3,7,11]", mem_order);
  for (const Row& r : memory_rows) {
    const std::string what = "memory " + experiments::plan_key(r.plan) + " (MB)";
    k.near(what.c_str(), paper_mb(c, {Strategy::Bsr, r.plan}, 128), r.published, 0.10);
  }

  const auto fl = ranked(flops_rows, experiments::SortKey::Flops);
  const auto fl_expect = published_order(flops_rows);
  bool fl_order = fl.size() == fl_expect.size();
  for (std::size_t i = 0; i < fl.size() && fl_order; ++i) {
    fl_order = fl[i].plan == fl_expect[i].plan;
  }
  k.check("FLOPs ranking 270 < 295 < 311", fl_order);
  for (const Row& r : flops_rows) {
    const std::string what = "GMacs " + experiments::plan_key(r.plan);
    k.near(what.c_str(), memory::count_flops(c, {Strategy::Bsr, r.plan}, 128).gmacs(), r.published, 0.10);
  }
}

// 7 ----------------------------------------------------------------------------

void audits(Criterion& k) {
  struct Pair {
    std::string name;
    ViTConfig config;
    RunPlan run;
  };
  const ViTConfig toy = toy_config();
  const ViTConfig toy_wide{16, 4, 3, 48, 4, 2, 3, 5};
  const ViTConfig toy_deep{8, 2, 1, 16, 1, 4, 6, 2};
  std::vector<Pair> pairs = {
      {"deit-s default", deit_small(), {Strategy::Bsr, policy::default_plan(12)}},
      {"deit-s full", deit_small(), {Strategy::Bsr, policy::full_plan(12)}},
      {"deit-s head-only", deit_small(), {Strategy::HeadOnly, {}}},
      {"deit-s residual", deit_small(), policy::resolve_plan("residual", 12)},
      {"deit-s [9,10,11]", deit_small(), {Strategy::Bsr, {{9, 10, 11}, {3, 6, 9}, 0.5, false}}},
      {"vit-b default", vit_base(), {Strategy::Bsr, policy::default_plan(12)}},
      {"vit-b residual", vit_base(), policy::resolve_plan("residual", 12)},
  };
  for (const auto& [name, cfg] : {std::pair{"toy", toy}, std::pair{"toy-wide", toy_wide}, std::pair{"toy-deep", toy_deep}}) {
    const std::size_t d = cfg.depth;
    pairs.push_back({std::string(name) + " default", cfg, {Strategy::Bsr, policy::default_plan(d)}});
    pairs.push_back({std::string(name) + " full", cfg, {Strategy::Bsr, policy::full_plan(d)}});
    pairs.push_back({std::string(name) + " head-only", cfg, {Strategy::HeadOnly, {}}});
    pairs.push_back({std::string(name) + " residual", cfg, policy::resolve_plan("residual", d)});
    pairs.push_back({std::string(name) + " early drop", cfg, {Strategy::Bsr, {{d - 1}, {0, 1}, 0.7, false}}});
  }
  std::size_t passed = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const memory::AuditResult a = experiments::run_audit(pairs[i].config, pairs[i].run, i);
    k.check(pairs[i].name + ": " + std::to_string(a.actual_total) + " bytes", a.equal());
    if (!a.equal()) {
      k.detail("%s", a.describe().c_str());
    }
    passed += a.equal() ? 1 : 0;
  }
  k.check(std::to_string(passed) + " byte-exact pairs (need >= 20)", passed >= 20 && passed == pairs.size());
}

// 8 ----------------------------------------------------------------------------

void gradients(Criterion& k) {
  const ViTConfig toy = toy_config();
  const ViTConfig small{8, 2, 2, 16, 2, 2, 3, 3};
  const std::vector<std::pair<std::string, experiments::GradcheckSetup>> runs = {
      {"toy default", {toy, {Strategy::Bsr, policy::default_plan(4)}}},
      {"toy [0,2] drops [1,2]", {toy, {Strategy::Bsr, {{0, 2}, {1, 2}, 0.5, false}}}},
      {"toy residual", {toy, policy::resolve_plan("residual", 4)}},
      {"small full", {small, {Strategy::Bsr, policy::full_plan(3)}}},
      {"small residual [0,2]", {small, {Strategy::ResidualSide, {{0, 2}, {}, 0.5, false}}}},
  };
  for (const auto& [name, setup] : runs) {
    const auto out = experiments::run_gradcheck(setup);
    char line[200];
    std::snprintf(line, sizeof(line), "%s: %.3e (worst %s)", name.c_str(), out.report.max_relative_error,
                  out.report.worst_parameter.c_str());
    k.check(line, out.report.max_relative_error < 1e-5);
  }
}

// 9 ----------------------------------------------------------------------------

std::set<ad::BufferRole> block_roles(const ad::Tape& tape, int block) {
  std::set<ad::BufferRole> roles;
  for (const auto& n : tape.nodes()) {
    if (n.block_index == block) {
      for (const auto& r : n.retained) {
        roles.insert(r.role);
      }
    }
  }
  return roles;
}

void retention(Criterion& k) {
  const ViTConfig c = toy_config();
  const Tensor img = experiments::random_image(c, 3);

  const RunPlan bsr{Strategy::Bsr, {{1, 3}, {}, 0.5, false}};
  const VisionTransformer plain = experiments::make_model(c, bsr, 0, 0.02);
  ad::Tape tape(plain.params(), memory::kElementWidth);
  vit_forward(plain, img, bsr, &tape);
  using R = ad::BufferRole;
  const std::set<R> expect = {R::Query, R::Key, R::Value, R::Probabilities, R::GeluInput, R::LayerNormStats,
                              R::LayerNormXhat};
  k.check("frozen block 2 roles are {Q,K,V,probs,GELU,LN stats,LN xhat}", block_roles(tape, 2) == expect);

  const memory::TapeBreakdown br = memory::tape_breakdown(tape);
  k.check("block 0 before horizon 1 retains 0 bytes", br.block(0).total() == 0);
  const memory::TapeBreakdown deit = [&] {
    const RunPlan d{Strategy::Bsr, policy::default_plan(12)};
    const VisionTransformer m = experiments::make_model(deit_small(), d, 0, 0.02);
    ad::Tape t(m.params(), memory::kElementWidth);
    vit_forward(m, experiments::random_image(deit_small(), 4), d, &t);
    return memory::tape_breakdown(t);
  }();
  k.check("deit-s default: blocks 0-2 retain 0 bytes",
          deit.block(0).total() + deit.block(1).total() + deit.block(2).total() == 0);

  const RunPlan residual{Strategy::ResidualSide, {{1, 2}, {}, 0.5, false}};
  const VisionTransformer side = experiments::make_model(c, residual, 0, 0.02);
  ad::Tape rt(side.params(), memory::kElementWidth);
  vit_forward(side, img, residual, &rt);
  const std::size_t residual_bytes = memory::tape_breakdown(rt).block(2).total();
  const std::size_t frozen_bytes = br.block(2).total();
  k.detail("block 2: residual %zu bytes, frozen plain %zu bytes", residual_bytes, frozen_bytes);
  k.check("residual block retains more than frozen plain block", residual_bytes > frozen_bytes);
}

// 10 ---------------------------------------------------------------------------

void transfer(Criterion& k) {
  const experiments::TransferSetup setup;
  train::LoopOptions loop;
  loop.threads = train::threads_from_env(1);
  loop.eval_each_epoch = false;
  double full = 0, bsr = 0, last = 0;
  const int seeds = 5;
  for (int s = 0; s < seeds; ++s) {
    train::TrainConfig pre = setup.pretrain;
    pre.seed = static_cast<std::uint64_t>(s);
    train::TrainConfig ft = setup.finetune;
    ft.seed = static_cast<std::uint64_t>(s);
    const auto source = train::pretrain(setup.config, experiments::source_task(setup, s), pre,
                                        InitOptions{static_cast<std::uint64_t>(s), 0.02}, loop);
    const train::TaskData target = experiments::target_task(setup, s);
    const auto acc = [&](const RunPlan& run) {
      return train::finetune(source.model, target, run, ft, loop).final_test.accuracy;
    };
    const double a = acc({Strategy::Bsr, policy::full_plan(setup.config.depth)});
    const double b = acc({Strategy::Bsr, policy::default_plan(setup.config.depth)});
    const double l = acc({Strategy::HeadOnly, {}});
    k.detail("seed %d: source %.3f  ft-full %.3f  bsr %.3f  ft-last %.3f", s, source.final_test.accuracy, a, b, l);
    full += a / seeds;
    bsr += b / seeds;
    last += l / seeds;
  }
  k.detail("mean: ft-full %.3f  bsr %.3f  ft-last %.3f", full, bsr, last);
  k.check("FT-Full >= BSR", full >= bsr);
  k.check("BSR >= FT-Last", bsr >= last);
  k.check("BSR - FT-Last >= 5 points", bsr - last >= 0.05);
}

// 11 ---------------------------------------------------------------------------

void token_drop(Criterion& k) {
  const RunPlan d{Strategy::Bsr, policy::default_plan(12)};
  const std::vector<std::size_t> expect = {197, 197, 197, 197, 100, 100, 100, 52, 52, 52, 28, 28};
  k.check("deit-s default MHSA token schedule", policy::token_schedule(deit_small(), d).mhsa_tokens == expect);
  const VisionTransformer m(deit_small(), {5, 0.02});
  const ForwardResult r = vit_forward(m, experiments::random_image(deit_small(), 6), d);
  k.check("deit-s forward trace equals the schedule", r.trace.mhsa_tokens == expect);

  std::mt19937_64 rng(7);
  std::size_t inside = 0;
  const std::size_t trials = 1000;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const std::size_t t = 4 + rng() % 60;
    const std::size_t width = 1 + rng() % 8;
    const double rate = 0.05 + 0.9 * std::uniform_real_distribution<double>(0, 1)(rng);
    std::normal_distribution<double> n(0.0, 1.0);
    Tensor tokens({t, width});
    for (double& v : tokens.data()) {
      v = n(rng);
    }
    Tensor scores({t - 1});
    double sum = 0;
    for (double& v : scores.data()) {
      v = std::exp(2.0 * n(rng));
      sum += v;
    }
    scores *= 1.0 / sum;
    const auto sel = policy::select_tokens(scores, rate);
    const Tensor out = policy::select_and_fuse(tokens, {scores}, rate);
    bool ok = out.dim(0) == policy::tokens_after_drop(t, rate);
    if (!sel.dropped.empty()) {
      const auto fused = out.row(out.dim(0) - 1);
      for (std::size_t c = 0; c < width && ok; ++c) {
        double lo = INFINITY, hi = -INFINITY;
        for (std::size_t i : sel.dropped) {
          lo = std::min(lo, tokens.at(i, c));
          hi = std::max(hi, tokens.at(i, c));
        }
        ok = fused[c] >= lo - 1e-12 && fused[c] <= hi + 1e-12;
      }
    }
    inside += ok ? 1 : 0;
  }
  k.check("fused token inside the hull: " + std::to_string(inside) + "/" + std::to_string(trials), inside == trials);
}

struct Entry {
  int id;
  const char* title;
  std::function<void(Criterion&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Entry> entries = {
      {1, "per-role block memory, DeiT-S, t = 197", table1},
      {2, "frozen and trainable block totals", block_totals},
      {3, "FT-Full activation memory", ft_full},
      {4, "default plan memory and reduce ratios", bsr_memory},
      {5, "forward GMacs", flops},
      {6, "plan-search memory and FLOPs orderings", orderings},
      {7, "tape audit, byte-exact", audits},
      {8, "finite-difference gradients < 1e-5", gradients},
      {9, "retention properties", retention},
      {10, "transfer ordering on the synthetic shift task", transfer},
      {11, "token schedule and fusion hull", token_drop},
  };
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--criterion" && i + 1 < argc) {
      only = std::atoi(argv[++i]);
    } else {
      std::fprintf(stderr, "usage: acceptance [--criterion N]\n");
      return 2;
    }
  }
  int failed = 0;
  int ran = 0;
  for (const Entry& e : entries) {
    if (only != 0 && e.id != only) {
      continue;
    }
    ++ran;
    Criterion k;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      e.run(k);
    } catch (const std::exception& ex) {
      k.ok = false;
      k.detail("exception: %s", ex.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %2d: %s  %s  (%.1f s)\n", e.id, k.ok ? "PASS" : "FAIL", e.title, secs);
    for (const auto& line : k.lines()) {
      std::printf("    %s\n", line.c_str());
    }
    std::fflush(stdout);
    failed += k.ok ? 0 : 1;
  }
  if (ran == 0) {
    std::fprintf(stderr, "no criterion %d\n", only);
    return 2;
  }
  std::printf("%d of %d criteria passed\n", ran - failed, ran);
  return failed == 0 ? 0 : 1;
}
