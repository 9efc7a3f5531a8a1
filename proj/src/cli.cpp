// SPDX-License-Identifier: Apache-2.0
#include "bsr/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <functional>
#include <memory>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "bsr/errors.hpp"
#include "bsr/experiments.hpp"
#include "bsr/kv_text.hpp"
#include "bsr/memory_model.hpp"
#include "bsr/train.hpp"

namespace bsr::cli {

namespace {

struct Common {
  std::string config;
  std::string plan = "default";
  std::size_t batch = 1;
  std::string mode = "paper";
  std::uint64_t seed = 0;
  std::string out;
};

struct TrainFlags {
  std::string optimizer = "adamw";
  std::string schedule = "cosine";
  double lr = 2e-3;
  std::size_t epochs = 5;
  std::size_t train_batch = 16;
  double weight_decay = 0.0;
  double shift = 0.8;
  double noise = 0.5;
  std::size_t train_size = 256;
  std::size_t test_size = 256;
  std::string metrics;

  train::TrainConfig config(std::uint64_t seed) const {
    train::TrainConfig c;
    c.optimizer = train::parse_optimizer(optimizer);
    c.schedule = train::parse_schedule(schedule);
    c.base_lr = lr;
    c.epochs = epochs;
    c.batch = train_batch;
    c.weight_decay = weight_decay;
    c.seed = seed;
    c.validate();
    return c;
  }

  experiments::TransferSetup setup(const ViTConfig& model, std::uint64_t seed) const {
    experiments::TransferSetup s;
    s.config = model;
    s.train_size = train_size;
    s.test_size = test_size;
    s.noise = noise;
    s.target_shift = shift;
    s.pretrain = s.finetune = config(seed);
    return s;
  }
};

void add_common(CLI::App* app, Common& c, const std::string& default_config, std::size_t default_batch) {
  c.config = default_config;
  c.batch = default_batch;
  app->add_option("--config", c.config, "preset (deit-s, vit-b, toy) or config file")->capture_default_str();
  app->add_option("--plan", c.plan, "default, full, head-only, residual, or plan file")->capture_default_str();
  app->add_option("--batch", c.batch, "batch size")->capture_default_str()->check(CLI::PositiveNumber);
  app->add_option("--mode", c.mode, "paper or exact")->capture_default_str()->check(CLI::IsMember({"paper", "exact"}));
  app->add_option("--seed", c.seed, "random seed")->capture_default_str();
  app->add_option("--out", c.out, "output file");
}

void add_train(CLI::App* app, TrainFlags& t, double default_shift) {
  t.shift = default_shift;
  app->add_option("--optimizer", t.optimizer, "adamw or sgd")->capture_default_str()->check(CLI::IsMember({"adamw", "sgd"}));
  app->add_option("--schedule", t.schedule, "cosine or constant")
      ->capture_default_str()
      ->check(CLI::IsMember({"cosine", "constant"}));
  app->add_option("--lr", t.lr, "base learning rate")->capture_default_str();
  app->add_option("--epochs", t.epochs, "training epochs")->capture_default_str();
  app->add_option("--train-batch", t.train_batch, "training batch size")->capture_default_str();
  app->add_option("--weight-decay", t.weight_decay, "weight decay")->capture_default_str();
  app->add_option("--shift", t.shift, "task shift in [0, 1]")->capture_default_str();
  app->add_option("--noise", t.noise, "pixel noise std-dev")->capture_default_str();
  app->add_option("--train-size", t.train_size, "training images")->capture_default_str();
  app->add_option("--test-size", t.test_size, "test images")->capture_default_str();
  app->add_option("--metrics", t.metrics, "metrics csv path");
}

struct Resolved {
  ViTConfig config;
  policy::RunPlan run;
  memory::Mode mode;
};

Resolved resolve(const Common& c, std::ostream& err) {
  Resolved r;
  r.config = resolve_config(c.config);
  r.config.validate();
  r.run = policy::resolve_plan(c.plan, r.config.depth);
  r.mode = memory::parse_mode(c.mode);
  const policy::PlanValidation v = policy::validate_plan(r.config, r.run);
  for (const auto& w : v.warnings) {
    err << "warning: " << w << '\n';
  }
  policy::require_valid(r.config, r.run);
  return r;
}

void emit_file(const std::string& path, const std::string& text) {
  if (!path.empty()) {
    write_text_file(path, text);
  }
}

std::string flops_csv(const memory::FlopsReport& r) {
  std::ostringstream os;
  os << "part,macs\n";
  os << "patch_embed," << r.patch_embed << '\n';
  for (const memory::BlockFlops& f : r.blocks) {
    const std::string b = "block." + std::to_string(f.index) + ".";
    os << b << "qkv_proj," << f.qkv_proj << '\n'
       << b << "attn_scores," << f.attn_scores << '\n'
       << b << "attn_apply," << f.attn_apply << '\n'
       << b << "out_proj," << f.out_proj << '\n'
       << b << "ffn," << f.ffn << '\n'
       << b << "side," << f.side << '\n';
  }
  os << "head," << r.head << '\n' << "total," << r.total << '\n';
  return os.str();
}

std::string number(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Block-selective fine-tuning toolkit for Vision Transformers: memory and FLOPs accounting, "
               "gradient verification, and desk-scale training."};
  app.require_subcommand(1);
  app.name("bsr");

  std::function<int()> action;

  // analyze ------------------------------------------------------------------
  Common analyze_c;
  auto* analyze = app.add_subcommand("analyze", "activation memory report");
  add_common(analyze, analyze_c, "deit-s", 1);
  analyze->callback([&] {
    action = [&] {
      const Resolved r = resolve(analyze_c, err);
      const memory::MemoryReport rep = memory::estimate_total(r.config, r.run, analyze_c.batch, r.mode);
      out << memory::format_table(rep);
      emit_file(analyze_c.out, memory::to_csv(rep));
      return kExitOk;
    };
  });

  // flops --------------------------------------------------------------------
  Common flops_c;
  auto* flops = app.add_subcommand("flops", "forward multiply-accumulate count");
  add_common(flops, flops_c, "deit-s", 1);
  flops->callback([&] {
    action = [&] {
      const Resolved r = resolve(flops_c, err);
      const memory::FlopsReport rep = memory::count_flops(r.config, r.run, flops_c.batch);
      out << memory::format_flops_table(rep);
      emit_file(flops_c.out, flops_csv(rep));
      return kExitOk;
    };
  });

  // gradcheck ----------------------------------------------------------------
  Common grad_c;
  double grad_step = 1e-5;
  double grad_std = 0.2;
  bool corrupt = false;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of tape gradients (toy sizes only)");
  add_common(grad, grad_c, "toy", 1);
  grad->add_option("--step", grad_step, "central-difference step")->capture_default_str();
  grad->add_option("--weight-std", grad_std, "initialization std-dev")->capture_default_str();
  grad->add_flag("--corrupt-backward", corrupt, "use a deliberately wrong GELU derivative");
  grad->callback([&] {
    action = [&] {
      const Resolved r = resolve(grad_c, err);
      experiments::GradcheckSetup s;
      s.config = r.config;
      s.run = r.run;
      s.seed = grad_c.seed;
      s.step = grad_step;
      s.weight_std = grad_std;
      s.fault = corrupt ? ad::BackwardFault::GeluDerivative : ad::BackwardFault::None;
      const experiments::GradcheckOutcome g = experiments::run_gradcheck(s);
      char line[256];
      std::snprintf(line, sizeof(line), "max relative error %.3e (worst %s) over %zu scalars in %zu tensors: %s\n",
                    g.report.max_relative_error, g.report.worst_parameter.c_str(), g.report.scalars_checked,
                    g.report.tensors_checked, g.passed() ? "PASS" : "FAIL");
      out << line;
      emit_file(grad_c.out, "max_relative_error,worst_parameter,scalars,tensors,passed\n" +
                                std::to_string(g.report.max_relative_error) + "," + g.report.worst_parameter + "," +
                                std::to_string(g.report.scalars_checked) + "," +
                                std::to_string(g.report.tensors_checked) + "," + (g.passed() ? "1" : "0") + "\n");
      return g.passed() ? kExitOk : kExitNumeric;
    };
  });

  // audit --------------------------------------------------------------------
  Common audit_c;
  auto* audit = app.add_subcommand("audit", "compare a recorded tape with the exact-mode prediction");
  add_common(audit, audit_c, "toy", 1);
  audit->callback([&] {
    action = [&] {
      const Resolved r = resolve(audit_c, err);
      const memory::AuditResult a = experiments::run_audit(r.config, r.run, audit_c.seed);
      out << a.describe() << '\n';
      emit_file(audit_c.out, memory::to_csv(memory::estimate_total(r.config, r.run, 1, memory::Mode::Exact)));
      return a.equal() ? kExitOk : kExitNumeric;
    };
  });

  // pretrain -----------------------------------------------------------------
  Common pre_c;
  TrainFlags pre_t;
  auto* pre = app.add_subcommand("pretrain", "train a fresh model on the source task and save a checkpoint");
  add_common(pre, pre_c, "toy", 1);
  add_train(pre, pre_t, 0.0);
  pre_t.epochs = 8;
  pre->callback([&] {
    action = [&] {
      if (pre_c.out.empty()) {
        throw ContractError("pretrain needs --out for the checkpoint");
      }
      const ViTConfig c = resolve_config(pre_c.config);
      experiments::TransferSetup s = pre_t.setup(c, pre_c.seed);
      const train::TaskData data = pre_t.shift == 0.0 ? experiments::source_task(s, pre_c.seed)
                                                      : experiments::target_task(s, pre_c.seed);
      train::LoopOptions loop;
      loop.threads = train::threads_from_env();
      const train::FinetuneResult res = train::pretrain(c, data, s.pretrain, InitOptions{pre_c.seed, 0.02}, loop);
      save_checkpoint(res.model, pre_c.out);
      emit_file(pre_t.metrics, train::metrics_csv(res.trace));
      out << "source test accuracy " << number(res.final_test.accuracy, 4) << ", loss "
          << number(res.final_test.mean_loss, 4) << "\ncheckpoint written to " << pre_c.out << '\n';
      return kExitOk;
    };
  });

  // finetune -----------------------------------------------------------------
  Common ft_c;
  TrainFlags ft_t;
  std::string ft_ckpt;
  auto* ft = app.add_subcommand("finetune", "fine-tune a checkpoint on the shifted target task");
  add_common(ft, ft_c, "toy", 1);
  add_train(ft, ft_t, 0.8);
  ft->add_option("--checkpoint", ft_ckpt, "source checkpoint")->required();
  ft->callback([&] {
    action = [&] {
      const VisionTransformer model = load_checkpoint(ft_ckpt);
      const policy::RunPlan run = policy::resolve_plan(ft_c.plan, model.config().depth);
      for (const auto& w : policy::validate_plan(model.config(), run).warnings) {
        err << "warning: " << w << '\n';
      }
      const experiments::TransferSetup s = ft_t.setup(model.config(), ft_c.seed);
      train::LoopOptions loop;
      loop.threads = train::threads_from_env();
      const train::FinetuneResult res =
          train::finetune(model, experiments::target_task(s, ft_c.seed), run, s.finetune, loop);
      if (!ft_c.out.empty()) {
        save_checkpoint(res.model, ft_c.out);
      }
      emit_file(ft_t.metrics, train::metrics_csv(res.trace));
      out << policy::strategy_name(run.strategy) << " target test accuracy " << number(res.final_test.accuracy, 4)
          << ", loss " << number(res.final_test.mean_loss, 4) << '\n';
      return kExitOk;
    };
  });

  // compare ------------------------------------------------------------------
  Common cmp_c;
  TrainFlags cmp_t;
  std::string cmp_ckpt;
  auto* cmp = app.add_subcommand("compare", "FT-Full vs FT-Last vs a plan: memory, FLOPs, and accuracy");
  add_common(cmp, cmp_c, "toy", 1);
  add_train(cmp, cmp_t, 0.8);
  cmp->add_option("--checkpoint", cmp_ckpt, "source checkpoint; enables fine-tuning each row");
  cmp->callback([&] {
    action = [&] {
      const Resolved r = resolve(cmp_c, err);
      std::unique_ptr<VisionTransformer> ckpt;
      std::unique_ptr<train::TaskData> target;
      const experiments::TransferSetup s = cmp_t.setup(r.config, cmp_c.seed);
      if (!cmp_ckpt.empty()) {
        ckpt = std::make_unique<VisionTransformer>(load_checkpoint(cmp_ckpt));
        target = std::make_unique<train::TaskData>(experiments::target_task(s, cmp_c.seed));
      }
      train::LoopOptions loop;
      loop.threads = train::threads_from_env();
      loop.eval_each_epoch = false;
      const auto rows =
          experiments::compare(r.config, r.run, cmp_c.batch, r.mode, ckpt.get(), target.get(), s.finetune, loop);
      out << "strategy     memory MB      GMacs  accuracy\n";
      for (const auto& row : rows) {
        char line[160];
        std::snprintf(line, sizeof(line), "%-10s %11.2f %10.3f  %s\n", row.strategy.c_str(),
                      memory::to_mb(row.memory_bytes), row.gmacs,
                      row.accuracy ? number(*row.accuracy, 4).c_str() : "-");
        out << line;
      }
      emit_file(cmp_c.out, experiments::compare_csv(rows));
      return kExitOk;
    };
  });

  // plan-search --------------------------------------------------------------
  Common ps_c;
  std::string grid_file;
  std::vector<std::string> candidates;
  std::string sort = "memory";
  std::size_t ps_epochs = 0;
  auto* ps = app.add_subcommand("plan-search", "rank candidate plans by memory or FLOPs");
  add_common(ps, ps_c, "deit-s", 128);
  ps->add_option("--grid", grid_file, "grid file, one plan per line");
  ps->add_option("--candidate", candidates, "plan as 'trainable=3,7,11 drops=3,6,9 rate=0.5' (repeatable)");
  ps->add_option("--sort", sort, "memory or flops")->capture_default_str()->check(CLI::IsMember({"memory", "flops"}));
  ps->add_option("--finetune-epochs", ps_epochs, "toy fine-tune epochs per plan; 0 skips accuracy")
      ->capture_default_str();
  ps->callback([&] {
    action = [&] {
      const ViTConfig c = resolve_config(ps_c.config);
      std::vector<policy::BsrPlan> grid;
      if (!grid_file.empty()) {
        grid = experiments::parse_grid(read_text_file(grid_file));
      }
      for (const auto& cand : candidates) {
        for (auto& p : experiments::parse_grid(cand)) {
          grid.push_back(std::move(p));
        }
      }
      for (const auto& p : grid) {
        policy::require_valid(c, {policy::Strategy::Bsr, p});
      }
      experiments::SearchOptions o;
      o.batch = ps_c.batch;
      o.mode = memory::parse_mode(ps_c.mode);
      o.sort = sort == "flops" ? experiments::SortKey::Flops : experiments::SortKey::Memory;
      o.finetune_epochs = ps_epochs;
      o.seed = ps_c.seed;
      o.threads = train::threads_from_env();
      const auto rows = experiments::plan_search(c, grid, o);
      out << experiments::search_table(rows);
      emit_file(ps_c.out, experiments::search_csv(rows));
      return kExitOk;
    };
  });

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << e.what() << '\n';
      return kExitOk;
    }
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  }

  try {
    return action ? action() : kExitValidation;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const AuditFailure& e) {
    err << "audit failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const DeterminismError& e) {
    err << "determinism error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const RetentionViolation& e) {
    err << "retention violation: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  }
}

}  // namespace bsr::cli
