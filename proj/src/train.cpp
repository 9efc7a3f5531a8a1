// SPDX-License-Identifier: Apache-2.0
#include "bsr/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "bsr/errors.hpp"
#include "bsr/kv_text.hpp"
#include "bsr/memory_model.hpp"

namespace bsr::train {

namespace {

/// Runs fn(i) for i in [0, n) on up to `threads` workers. The exception of
/// the lowest failing index is rethrown.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      fn(i);
    }
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, n); ++t) {
    pool.emplace_back(worker);
  }
  for (auto& t : pool) {
    t.join();
  }
  for (const auto& e : errors) {
    if (e) {
      std::rethrow_exception(e);
    }
  }
}

std::string number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

Dataset make_split(const SyntheticSpec& spec, std::size_t n, const char* split, std::uint64_t seed) {
  Dataset d;
  d.num_classes = spec.num_classes;
  d.split = split;
  std::vector<Tensor> patterns;
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    patterns.push_back(class_pattern(spec, k));
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % spec.num_classes;
    Tensor img = patterns[label];
    if (spec.noise > 0.0) {
      for (double& v : img.data()) {
        v += spec.noise * noise(rng);
      }
    }
    d.images.push_back(std::move(img));
    d.labels.push_back(label);
  }
  return d;
}

}  // namespace

ChannelStats channel_stats(const Dataset& data) {
  if (data.images.empty()) {
    throw ContractError("channel statistics of an empty dataset");
  }
  const std::size_t channels = data.images.front().dim(0);
  const std::size_t plane = data.images.front().numel() / channels;
  ChannelStats s;
  s.mean.assign(channels, 0.0);
  s.stddev.assign(channels, 0.0);
  for (const Tensor& img : data.images) {
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t i = 0; i < plane; ++i) {
        s.mean[c] += img[c * plane + i];
      }
    }
  }
  const double count = static_cast<double>(plane * data.images.size());
  for (double& m : s.mean) {
    m /= count;
  }
  for (const Tensor& img : data.images) {
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = img[c * plane + i] - s.mean[c];
        s.stddev[c] += d * d;
      }
    }
  }
  for (double& v : s.stddev) {
    v = std::sqrt(v / count);
    if (v == 0.0) {
      v = 1.0;
    }
  }
  return s;
}

void normalize(Dataset& data, const ChannelStats& stats) {
  for (Tensor& img : data.images) {
    const std::size_t channels = img.dim(0);
    if (channels != stats.mean.size()) {
      throw DimensionError("normalization stats cover " + std::to_string(stats.mean.size()) + " channels, image has " +
                           std::to_string(channels));
    }
    const std::size_t plane = img.numel() / channels;
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t i = 0; i < plane; ++i) {
        img[c * plane + i] = (img[c * plane + i] - stats.mean[c]) / stats.stddev[c];
      }
    }
  }
}

Tensor class_pattern(const SyntheticSpec& spec, std::size_t label) {
  const std::size_t s = spec.image_size;
  const std::size_t k = spec.num_classes;
  const auto grid = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(k))));
  const std::size_t cell = s / grid;
  if (cell == 0) {
    throw DimensionError("image too small for " + std::to_string(k) + " class regions");
  }
  const std::size_t r0 = (label / grid) * cell;
  const std::size_t c0 = (label % grid) * cell;
  const double theta = std::numbers::pi * static_cast<double>(label) / static_cast<double>(k);
  const double freq = 2.0 + static_cast<double>(label % 2);
  Tensor img({spec.channels, s, s});
  for (std::size_t ch = 0; ch < spec.channels; ++ch) {
    const double gain = 1.0 - 0.25 * static_cast<double>(ch % 3);
    const double hue = 0.5 + 0.5 * std::cos(2.0 * std::numbers::pi *
                                            (static_cast<double>(label) / static_cast<double>(k) +
                                             static_cast<double>(ch) / static_cast<double>(spec.channels)));
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) {
        const bool inside = y >= r0 && y < r0 + cell && x >= c0 && x < c0 + cell;
        const double source = inside ? hue : 0.0;
        const double u = (static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta)) /
                         static_cast<double>(s);
        const double target = std::sin(2.0 * std::numbers::pi * freq * u + 0.5 * static_cast<double>(ch));
        img.at(ch, y, x) = (1.0 - spec.shift) * source + spec.shift * gain * target;
      }
    }
  }
  return img;
}

TaskData make_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) {
    throw ContractError("synthetic task needs at least 2 classes");
  }
  if (!(spec.shift >= 0.0 && spec.shift <= 1.0) || !(spec.noise >= 0.0)) {
    throw ContractError("shift must lie in [0, 1] and noise must be non-negative");
  }
  TaskData t;
  t.train = make_split(spec, spec.train_size, "train", spec.seed * 2 + 1);
  t.test = make_split(spec, spec.test_size, "test", spec.seed * 2 + 2);
  return t;
}

// ---------------------------------------------------------------------------

const char* optimizer_name(OptimizerKind kind) { return kind == OptimizerKind::AdamW ? "adamw" : "sgd"; }

OptimizerKind parse_optimizer(std::string_view text) {
  if (text == "adamw") {
    return OptimizerKind::AdamW;
  }
  if (text == "sgd") {
    return OptimizerKind::SgdMomentum;
  }
  throw FormatError("optimizer must be 'adamw' or 'sgd', got '" + std::string(text) + "'");
}

const char* schedule_name(Schedule s) { return s == Schedule::Cosine ? "cosine" : "constant"; }

Schedule parse_schedule(std::string_view text) {
  if (text == "cosine") {
    return Schedule::Cosine;
  }
  if (text == "constant") {
    return Schedule::Constant;
  }
  throw FormatError("schedule must be 'cosine' or 'constant', got '" + std::string(text) + "'");
}

void TrainConfig::validate() const {
  if (batch == 0) {
    throw ContractError("batch must be at least 1");
  }
  for (double v : {base_lr, weight_decay, momentum, beta1, beta2, adam_eps}) {
    if (!std::isfinite(v) || v < 0.0) {
      throw ContractError("optimizer hyperparameters must be finite and non-negative");
    }
  }
  if (beta1 >= 1.0 || beta2 >= 1.0 || momentum >= 1.0) {
    throw ContractError("momentum and Adam betas must be below 1");
  }
}

double learning_rate(const TrainConfig& config, std::size_t step, std::size_t total_steps) {
  if (config.schedule == Schedule::Constant || total_steps == 0) {
    return config.base_lr;
  }
  const double frac = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
  return config.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

void apply_update(ad::ParamStore& params, const ad::GradTable& grads, OptimizerState& state,
                  const TrainConfig& config, double lr) {
  for (const auto& [id, g] : grads.params) {
    const ad::Parameter& p = params.at(id);
    if (!p.trainable) {
      throw ContractError("gradient present for frozen parameter " + p.name);
    }
    if (g.shape() != p.value.shape()) {
      throw DimensionError("gradient for " + p.name + " has shape " + shape_to_string(g.shape()));
    }
  }
  ++state.steps;
  for (const auto& [id, g] : grads.params) {
    Tensor& value = params.at(id).value;
    const std::size_t n = value.numel();
    if (config.optimizer == OptimizerKind::SgdMomentum) {
      Tensor& buf = state.first.try_emplace(id, value.shape()).first->second;
      for (std::size_t i = 0; i < n; ++i) {
        const double gi = g[i] + config.weight_decay * value[i];
        buf[i] = config.momentum * buf[i] + gi;
        value[i] -= lr * buf[i];
      }
    } else {
      Tensor& m = state.first.try_emplace(id, value.shape()).first->second;
      Tensor& v = state.second.try_emplace(id, value.shape()).first->second;
      const auto t = static_cast<double>(state.steps);
      const double c1 = 1.0 - std::pow(config.beta1, t);
      const double c2 = 1.0 - std::pow(config.beta2, t);
      for (std::size_t i = 0; i < n; ++i) {
        m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
        v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
        const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + config.adam_eps);
        value[i] -= lr * (update + config.weight_decay * value[i]);
      }
    }
  }
}

void step(ad::ParamStore& params, const ad::GradTable& grads, OptimizerState& state, const TrainConfig& config,
          std::size_t step_index, std::size_t total_steps) {
  apply_update(params, grads, state, config, learning_rate(config, step_index, total_steps));
}

// ---------------------------------------------------------------------------

LossValue cross_entropy(const Tensor& logits, std::size_t label) {
  const std::size_t c = logits.numel();
  if (label >= c) {
    throw ContractError("label " + std::to_string(label) + " outside " + std::to_string(c) + " classes");
  }
  double mx = logits[0];
  std::size_t arg = 0;
  for (std::size_t j = 1; j < c; ++j) {
    if (logits[j] > mx) {
      mx = logits[j];
      arg = j;
    }
  }
  double sum = 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    sum += std::exp(logits[j] - mx);
  }
  LossValue out;
  out.loss = std::log(sum) + mx - logits[label];
  out.grad = Tensor(logits.shape());
  for (std::size_t j = 0; j < c; ++j) {
    out.grad[j] = std::exp(logits[j] - mx) / sum - (j == label ? 1.0 : 0.0);
  }
  out.correct = arg == label;
  return out;
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream os;
  os << "step,split,loss,accuracy,lr,tape_bytes\n";
  for (const MetricRow& r : rows) {
    os << r.step << ',' << r.split << ',' << number(r.loss) << ',' << number(r.accuracy) << ',' << number(r.lr)
       << ',' << r.tape_bytes << '\n';
  }
  return os.str();
}

std::vector<MetricRow> parse_metrics_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != "step,split,loss,accuracy,lr,tape_bytes") {
    throw FormatError("metrics csv must start with 'step,split,loss,accuracy,lr,tape_bytes'");
  }
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) {
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) {
      f.push_back(cell);
    }
    if (f.size() != 6) {
      throw FormatError("metrics row '" + line + "' does not have 6 fields");
    }
    if (f[1] != "train" && f[1] != "test") {
      throw FormatError("metrics split must be train or test, got '" + f[1] + "'");
    }
    rows.push_back({parse_count("step", f[0]), f[1], parse_number("loss", f[2]), parse_number("accuracy", f[3]),
                    parse_number("lr", f[4]), parse_count("tape_bytes", f[5])});
  }
  return rows;
}

Evaluation evaluate(const VisionTransformer& model, const Dataset& data, const policy::RunPlan& run,
                    std::size_t threads) {
  if (data.size() == 0) {
    throw ContractError("evaluation on an empty dataset");
  }
  std::vector<LossValue> out(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    out[i] = cross_entropy(vit_forward(model, data.images[i], run).logits.value, data.labels[i]);
  });
  Evaluation e;
  std::size_t correct = 0;
  for (const LossValue& v : out) {
    e.mean_loss += v.loss;
    correct += v.correct ? 1 : 0;
  }
  e.mean_loss /= static_cast<double>(data.size());
  e.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return e;
}

FinetuneResult finetune(VisionTransformer model, const TaskData& data, const policy::RunPlan& run,
                        const TrainConfig& config, const LoopOptions& options) {
  config.validate();
  const ViTConfig& cfg = model.config();
  policy::require_valid(cfg, run);
  if (data.train.size() == 0) {
    throw ContractError("fine-tuning on an empty training split");
  }
  if (data.train.num_classes != cfg.num_classes) {
    throw DimensionError("dataset has " + std::to_string(data.train.num_classes) + " classes, model head " +
                         std::to_string(cfg.num_classes));
  }
  if (run.strategy == policy::Strategy::ResidualSide) {
    model.add_side_blocks(run.plan.trainable_blocks, InitOptions{config.seed, 0.02}, true);
  }
  model.apply_trainable(run);

  const memory::MemoryReport per_sample = memory::estimate_total(cfg, run, 1, memory::Mode::Exact);
  const std::size_t n = data.train.size();
  const std::size_t steps_per_epoch = (n + config.batch - 1) / config.batch;
  const std::size_t total_steps = steps_per_epoch * config.epochs;

  struct SampleOut {
    ad::GradTable grads;
    LossValue loss;
    std::size_t tape_bytes = 0;
  };

  FinetuneResult result{std::move(model), {}, {}};
  VisionTransformer& m = result.model;
  OptimizerState state;
  std::size_t step_index = 0;
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(config.seed * 1000003 + epoch);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < n; begin += config.batch) {
      const std::size_t bs = std::min(config.batch, n - begin);
      const double lr = learning_rate(config, step_index, total_steps);
      std::vector<SampleOut> outs(bs);
      parallel_for(bs, options.threads, [&](std::size_t j) {
        const std::size_t idx = order[begin + j];
        ad::Tape tape(m.params(), memory::kElementWidth);
        const ForwardResult fwd = vit_forward(m, data.train.images[idx], run, &tape);
        SampleOut& o = outs[j];
        o.loss = cross_entropy(fwd.logits.value, data.train.labels[idx]);
        if (!std::isfinite(o.loss.loss)) {
          throw NumericError("non-finite loss at step " + std::to_string(step_index) + " on training sample " +
                             std::to_string(idx));
        }
        o.tape_bytes = tape.retained_bytes();
        if (options.check_tape && begin == 0 && j == 0) {
          memory::require_audit(tape, per_sample);
        }
        o.grads = ad::backward(tape, o.loss.grad);
      });

      ad::GradTable mean;
      double loss = 0.0;
      std::size_t correct = 0;
      std::size_t bytes = 0;
      for (SampleOut& o : outs) {
        for (auto& [id, g] : o.grads.params) {
          auto it = mean.params.find(id);
          if (it == mean.params.end()) {
            mean.params.emplace(id, std::move(g));
          } else {
            it->second += g;
          }
        }
        loss += o.loss.loss;
        correct += o.loss.correct ? 1 : 0;
        bytes += o.tape_bytes;
      }
      for (auto& [id, g] : mean.params) {
        g *= 1.0 / static_cast<double>(bs);
      }
      if (options.check_tape && bytes != per_sample.grand_total * bs) {
        throw AuditFailure("step " + std::to_string(step_index) + ": tapes hold " + std::to_string(bytes) +
                           " bytes, prediction " + std::to_string(per_sample.grand_total * bs));
      }
      apply_update(m.params(), mean, state, config, lr);
      result.trace.push_back({step_index, "train", loss / static_cast<double>(bs),
                              static_cast<double>(correct) / static_cast<double>(bs), lr, bytes});
      ++step_index;
    }
    if (options.eval_each_epoch && data.test.size() > 0) {
      const Evaluation ev = evaluate(m, data.test, run, options.threads);
      result.trace.push_back(
          {step_index, "test", ev.mean_loss, ev.accuracy, learning_rate(config, step_index, total_steps), 0});
    }
  }
  if (data.test.size() > 0) {
    result.final_test = evaluate(m, data.test, run, options.threads);
  }
  return result;
}

FinetuneResult pretrain(const ViTConfig& config, const TaskData& data, const TrainConfig& train,
                        const InitOptions& init, const LoopOptions& options) {
  const policy::RunPlan full{policy::Strategy::Bsr, policy::full_plan(config.depth)};
  return finetune(VisionTransformer(config, init), data, full, train, options);
}

std::size_t threads_from_env(std::size_t fallback) {
  const char* raw = std::getenv("BSR_THREADS");
  if (raw == nullptr || *raw == '\0') {
    return std::max<std::size_t>(fallback, 1);
  }
  const std::size_t n = parse_count("BSR_THREADS", raw);
  if (n == 0) {
    throw ContractError("BSR_THREADS must be at least 1");
  }
  return n;
}

}  // namespace bsr::train
