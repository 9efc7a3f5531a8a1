// SPDX-License-Identifier: Apache-2.0
#include "bsr/experiments.hpp"

#include <algorithm>
#include <cstdio>
#include <random>
#include <sstream>

#include "bsr/errors.hpp"
#include "bsr/kv_text.hpp"

namespace bsr::experiments {

namespace {

std::string number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::string fixed_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

std::string join(const std::vector<std::size_t>& v, char sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) {
      s += sep;
    }
    s += std::to_string(v[i]);
  }
  return s;
}

train::TaskData standardized(train::SyntheticSpec spec) {
  train::TaskData d = train::make_synthetic(spec);
  const train::ChannelStats stats = train::channel_stats(d.train);
  train::normalize(d.train, stats);
  train::normalize(d.test, stats);
  return d;
}

}  // namespace

Tensor random_image(const ViTConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor img({config.channels, config.image_size, config.image_size});
  for (double& v : img.data()) {
    v = n(rng);
  }
  return img;
}

VisionTransformer make_model(const ViTConfig& config, const policy::RunPlan& run, std::uint64_t seed,
                             double weight_std) {
  VisionTransformer model(config, InitOptions{seed, weight_std});
  if (run.strategy == policy::Strategy::ResidualSide) {
    model.add_side_blocks(run.plan.trainable_blocks, InitOptions{seed + 1, weight_std}, false);
  }
  model.apply_trainable(run);
  return model;
}

GradcheckOutcome run_gradcheck(const GradcheckSetup& s) {
  if (s.config.embed > kGradcheckMaxEmbed || s.config.depth > kGradcheckMaxDepth) {
    throw ContractError("gradcheck is limited to embed <= " + std::to_string(kGradcheckMaxEmbed) +
                        " and depth <= " + std::to_string(kGradcheckMaxDepth));
  }
  VisionTransformer model = make_model(s.config, s.run, s.seed, s.weight_std);
  const Tensor image = random_image(s.config, s.seed + 7);
  const std::size_t label = s.seed % s.config.num_classes;

  ad::Tape tape(model.params());
  const ForwardResult fwd = vit_forward(model, image, s.run, &tape);
  const train::LossValue loss = train::cross_entropy(fwd.logits.value, label);
  const ad::GradTable grads = ad::backward(tape, loss.grad, ad::BackwardOptions{s.fault});

  const ModelLayout layout = model.layout();
  const ad::LossClosure closure = [&](const ad::ParamStore& params) {
    return train::cross_entropy(vit_forward(layout, params, image, s.run).logits.value, label).loss;
  };
  GradcheckOutcome out;
  out.report = ad::finite_diff_check(closure, model.params(), grads, s.step);
  return out;
}

memory::AuditResult run_audit(const ViTConfig& config, const policy::RunPlan& run, std::uint64_t seed) {
  const VisionTransformer model = make_model(config, run, seed, 0.02);
  ad::Tape tape(model.params(), memory::kElementWidth);
  vit_forward(model, random_image(config, seed + 7), run, &tape);
  return memory::tape_audit(tape, memory::estimate_total(config, run, 1, memory::Mode::Exact));
}

// ---------------------------------------------------------------------------

TransferSetup::TransferSetup() {
  pretrain.optimizer = train::OptimizerKind::AdamW;
  pretrain.base_lr = 2e-3;
  pretrain.schedule = train::Schedule::Cosine;
  pretrain.epochs = 8;
  pretrain.batch = 16;
  finetune = pretrain;
  finetune.epochs = 5;
}

train::TaskData source_task(const TransferSetup& setup, std::uint64_t seed) {
  train::SyntheticSpec spec;
  spec.num_classes = setup.config.num_classes;
  spec.image_size = setup.config.image_size;
  spec.channels = setup.config.channels;
  spec.train_size = setup.train_size;
  spec.test_size = setup.test_size;
  spec.noise = setup.noise;
  spec.shift = 0.0;
  spec.seed = seed;
  return standardized(spec);
}

train::TaskData target_task(const TransferSetup& setup, std::uint64_t seed) {
  train::SyntheticSpec spec;
  spec.num_classes = setup.config.num_classes;
  spec.image_size = setup.config.image_size;
  spec.channels = setup.config.channels;
  spec.train_size = setup.train_size;
  spec.test_size = setup.test_size;
  spec.noise = setup.noise;
  spec.shift = setup.target_shift;
  spec.seed = seed + 100;
  return standardized(spec);
}

// ---------------------------------------------------------------------------

std::vector<CompareRow> compare(const ViTConfig& config, const policy::RunPlan& bsr, std::size_t batch,
                                memory::Mode mode, const VisionTransformer* checkpoint,
                                const train::TaskData* target, const train::TrainConfig& train,
                                const train::LoopOptions& loop) {
  std::vector<CompareRow> rows;
  rows.push_back({"ft-full", {policy::Strategy::Bsr, policy::full_plan(config.depth)}, 0, 0.0, std::nullopt});
  rows.push_back({"ft-last", {policy::Strategy::HeadOnly, {}}, 0, 0.0, std::nullopt});
  rows.push_back({bsr.strategy == policy::Strategy::ResidualSide ? "residual" : "bsr", bsr, 0, 0.0, std::nullopt});
  for (CompareRow& r : rows) {
    r.memory_bytes = memory::estimate_total(config, r.run, batch, mode).grand_total;
    r.gmacs = memory::count_flops(config, r.run, batch).gmacs();
    if (checkpoint != nullptr && target != nullptr) {
      if (!(checkpoint->config() == config)) {
        throw DimensionError("checkpoint config does not match --config");
      }
      r.accuracy = train::finetune(*checkpoint, *target, r.run, train, loop).final_test.accuracy;
    }
  }
  return rows;
}

std::string compare_csv(const std::vector<CompareRow>& rows) {
  std::ostringstream os;
  os << "strategy,memory_bytes,memory_mb,gmacs,accuracy\n";
  for (const CompareRow& r : rows) {
    os << r.strategy << ',' << r.memory_bytes << ',' << number(memory::to_mb(r.memory_bytes)) << ','
       << number(r.gmacs) << ',' << (r.accuracy ? number(*r.accuracy) : std::string()) << '\n';
  }
  return os.str();
}

std::vector<policy::BsrPlan> parse_grid(std::string_view text) {
  std::vector<policy::BsrPlan> grid;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) {
      line.erase(hash);
    }
    std::istringstream words(line);
    std::string kv;
    std::string as_file;
    while (words >> kv) {
      as_file += kv + '\n';
    }
    if (as_file.empty()) {
      continue;
    }
    grid.push_back(policy::parse_plan(as_file));
  }
  return grid;
}

std::string plan_key(const policy::BsrPlan& p) {
  return "t[" + join(p.trainable_blocks, ',') + "] d[" + join(p.drop_locations, ',') + "] r" + fixed_g(p.drop_rate);
}

std::vector<SearchRow> plan_search(const ViTConfig& config, const std::vector<policy::BsrPlan>& grid,
                                   const SearchOptions& options) {
  std::vector<SearchRow> rows;
  for (const policy::BsrPlan& plan : grid) {
    const policy::RunPlan run{policy::Strategy::Bsr, plan};
    SearchRow r;
    r.plan = plan;
    r.memory_bytes = memory::estimate_total(config, run, options.batch, options.mode).grand_total;
    r.gmacs = memory::count_flops(config, run, options.batch).gmacs();
    rows.push_back(r);
  }
  if (options.finetune_epochs > 0 && !rows.empty()) {
    TransferSetup setup;
    setup.config.depth = config.depth;
    setup.finetune.epochs = options.finetune_epochs;
    setup.pretrain.seed = setup.finetune.seed = options.seed;
    train::LoopOptions loop;
    loop.threads = options.threads;
    loop.eval_each_epoch = false;
    const train::FinetuneResult source =
        train::pretrain(setup.config, source_task(setup, options.seed), setup.pretrain,
                        InitOptions{options.seed, 0.02}, loop);
    const train::TaskData target = target_task(setup, options.seed);
    for (SearchRow& r : rows) {
      r.accuracy = train::finetune(source.model, target, {policy::Strategy::Bsr, r.plan}, setup.finetune, loop)
                       .final_test.accuracy;
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [&](const SearchRow& a, const SearchRow& b) {
    const double ka = options.sort == SortKey::Memory ? static_cast<double>(a.memory_bytes) : a.gmacs;
    const double kb = options.sort == SortKey::Memory ? static_cast<double>(b.memory_bytes) : b.gmacs;
    if (ka != kb) {
      return ka < kb;
    }
    return plan_key(a.plan) < plan_key(b.plan);
  });
  return rows;
}

std::string search_csv(const std::vector<SearchRow>& rows) {
  std::ostringstream os;
  os << "rank,trainable,drops,rate,memory_bytes,memory_mb,gmacs,accuracy\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const SearchRow& r = rows[i];
    os << i + 1 << ',' << join(r.plan.trainable_blocks, ' ') << ',' << join(r.plan.drop_locations, ' ') << ','
       << number(r.plan.drop_rate) << ',' << r.memory_bytes << ',' << number(memory::to_mb(r.memory_bytes)) << ','
       << number(r.gmacs) << ',' << (r.accuracy ? number(*r.accuracy) : std::string()) << '\n';
  }
  return os.str();
}

std::string search_table(const std::vector<SearchRow>& rows) {
  std::ostringstream os;
  os << "rank  trainable         drops             rate   memory MB    GMacs  accuracy\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const SearchRow& r = rows[i];
    char line[256];
    std::snprintf(line, sizeof(line), "%4zu  %-16s  %-16s  %4.2f  %10.1f  %7.1f  %s\n", i + 1,
                  ("[" + join(r.plan.trainable_blocks, ',') + "]").c_str(),
                  ("[" + join(r.plan.drop_locations, ',') + "]").c_str(), r.plan.drop_rate,
                  memory::to_mb(r.memory_bytes), r.gmacs, r.accuracy ? fixed(*r.accuracy, 3).c_str() : "-");
    os << line;
  }
  if (rows.empty()) {
    os << "(empty grid)\n";
  }
  return os.str();
}

}  // namespace bsr::experiments
