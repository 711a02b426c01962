#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mopebaf/data.hpp"
#include "mopebaf/errors.hpp"
#include "mopebaf/eval.hpp"
#include "mopebaf/model.hpp"
#include "mopebaf/random.hpp"

namespace mopebaf {

struct TrainConfig {
  double peak_lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.998;
  double weight_decay = 0.01;
  std::size_t total_steps = 200;
  double warmup_frac = 0.10;
  std::size_t batch_size = 8;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  static TrainConfig desk() { return {}; }
  /// Learning rate suited to finetuning a pretrained backbone.
  static TrainConfig paper_scale() {
    TrainConfig t;
    t.peak_lr = 3e-5;
    return t;
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;

  std::size_t warmup_steps() const {
    return static_cast<std::size_t>(std::lround(warmup_frac * static_cast<double>(total_steps)));
  }

  void validate() const {
    auto fail = [](const std::string& f, const std::string& why) {
      throw ConfigError("train." + f + ": " + why);
    };
    if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) fail("peak_lr", "must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1", "must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2", "must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) fail("weight_decay", "must be non-negative");
    if (!(warmup_frac > 0.0 && warmup_frac < 1.0)) fail("warmup_frac", "must lie in (0, 1)");
    if (batch_size == 0) fail("batch_size", "must be positive");
    if (!(adam_eps > 0.0)) fail("adam_eps", "must be positive");
  }
};

/// Linear warmup to peak_lr over round(warmup_frac * total_steps) steps,
/// then linear decay to zero at total_steps.
inline double lr_at_step(const TrainConfig& cfg, std::size_t step) {
  if (step < 1 || step > cfg.total_steps) {
    throw InputError("lr_at_step: step " + std::to_string(step) + " outside [1, " +
                     std::to_string(cfg.total_steps) + "]");
  }
  const std::size_t warm = cfg.warmup_steps(), total = cfg.total_steps;
  if (step <= warm) return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warm);
  return cfg.peak_lr * static_cast<double>(total - step) / static_cast<double>(total - warm);
}

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

struct OptimizerState {
  std::vector<std::string> names;
  std::vector<AdamMoments> moments;
  std::size_t step = 0;

  static OptimizerState for_params(std::span<const NamedTensor> params) {
    OptimizerState s;
    for (const auto& p : params) {
      s.names.push_back(p.name);
      s.moments.push_back({std::vector<double>(p.tensor.numel(), 0.0),
                           std::vector<double>(p.tensor.numel(), 0.0)});
    }
    return s;
  }
};

/// One decoupled AdamW update of a single buffer at optimizer step `t` (>= 1):
///   m <- b1 m + (1-b1) g ;  v <- b2 v + (1-b2) g^2
///   p <- p - lr * ( m_hat / (sqrt(v_hat) + eps) + wd * p )
inline void adamw_update(std::span<double> p, std::span<const double> g, AdamMoments& mom,
                         const TrainConfig& cfg, double lr, std::size_t t, bool decay) {
  if (p.size() != g.size() || mom.m.size() != p.size() || mom.v.size() != p.size()) {
    throw DimensionError("adamw_update: buffer sizes disagree");
  }
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  const double wd = decay ? cfg.weight_decay : 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * g[i];
    mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * g[i] * g[i];
    const double mhat = mom.m[i] / c1, vhat = mom.v[i] / c2;
    p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + wd * p[i]);
  }
}

/// Applies one AdamW step to every parameter that holds a gradient.
/// Parameters without a gradient (off the execution path) are left alone.
inline void adamw_step(std::span<const NamedTensor> params, OptimizerState& state,
                       const TrainConfig& cfg, double lr) {
  if (state.moments.size() != params.size()) {
    throw InternalError("adamw_step: optimizer state tracks " + std::to_string(state.moments.size()) +
                        " tensors, got " + std::to_string(params.size()));
  }
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + p.name);
    }
  }
  ++state.step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const NamedTensor& p = params[i];
    if (!p.tensor.has_grad()) continue;
    Tensor t = p.tensor;
    adamw_update(t.data(), p.tensor.grad(), state.moments[i], cfg, lr, state.step, p.decay);
  }
}

// ---------------------------------------------------------------------------
// Evaluation helpers

inline std::vector<int> predict_labels(const ModelConfig& c, const Params& p,
                                       std::span<const Sample> samples,
                                       std::size_t chunk = 64) {
  std::vector<int> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); i += chunk) {
    const auto part = samples.subspan(i, std::min(chunk, samples.size() - i));
    for (const auto& probs : predict_batch(c, p, part)) out.push_back(argmax(probs));
  }
  return out;
}

inline MetricMap evaluate(const ModelConfig& c, const Params& p, std::span<const Sample> samples) {
  if (samples.empty()) throw InputError("evaluate: no samples");
  std::vector<int> golds;
  for (const Sample& s : samples) golds.push_back(s.label);
  const std::vector<int> preds = predict_labels(c, p, samples);
  return task_metrics(preds, golds, static_cast<int>(c.n_classes));
}

// ---------------------------------------------------------------------------
// Training loop

struct TraceRow {
  std::size_t step = 0;
  double lr = 0;
  double train_loss = 0;
  std::optional<double> dev_acc;  // set on dev-evaluation steps
  std::optional<double> dev_f1;
};

inline void write_trace_csv(std::ostream& os, std::span<const TraceRow> rows) {
  os << "step,lr,train_loss,dev_acc,dev_f1\n";
  char buf[160];
  for (const TraceRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,", r.step, r.lr, r.train_loss);
    os << buf;
    if (r.dev_acc) {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g", *r.dev_acc, *r.dev_f1);
      os << buf;
    } else {
      os << ',';
    }
    os << '\n';
  }
}

struct TrainResult {
  Params final_params;
  Params best_params;
  std::size_t best_step = 0;
  MetricMap best_dev;
  std::vector<TraceRow> trace;
  OptimizerState optimizer;
};

/// Full-parameter training with seeded per-epoch shuffling. Dev metrics are
/// computed at the end of every epoch and after the final step; the
/// returned best checkpoint maximizes dev F1 (earliest step on ties).
/// With zero steps the initial parameters are returned unchanged.
inline TrainResult train(const ModelConfig& mc, const TrainConfig& tc, const FewShotSplit& split,
                         const std::function<void(const TraceRow&)>& on_step = {}) {
  mc.validate();
  tc.validate();
  if (split.train.empty()) throw InputError("train: empty training set");
  const std::span<const Sample> dev =
      split.dev.empty() ? std::span<const Sample>(split.train) : std::span<const Sample>(split.dev);

  TrainResult r;
  r.final_params = init_params(mc);
  const std::vector<NamedTensor> params = named_parameters(r.final_params);
  r.optimizer = OptimizerState::for_params(params);

  std::optional<double> best_f1;
  auto consider = [&](std::size_t step, const MetricMap& m) {
    const double f1 = selection_f1(m);
    if (!best_f1 || f1 > *best_f1) {
      best_f1 = f1;
      r.best_step = step;
      r.best_dev = m;
      r.best_params = clone_params(r.final_params);
    }
  };
  if (tc.total_steps == 0) {
    consider(0, evaluate(mc, r.final_params, dev));
    return r;
  }

  const std::size_t n = split.train.size();
  std::vector<std::size_t> order(n);
  std::vector<Sample> batch;
  std::size_t step = 0;
  for (std::uint64_t epoch = 0; step < tc.total_steps; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(derive_seed(tc.seed, "shuffle"), epoch));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t at = 0; at < n && step < tc.total_steps; at += tc.batch_size) {
      ++step;
      batch.clear();
      for (std::size_t i = at; i < std::min(n, at + tc.batch_size); ++i)
        batch.push_back(split.train[order[i]]);

      for (const auto& p : params) p.tensor.clear_grad();
      TraceRow row;
      row.step = step;
      row.lr = lr_at_step(tc, step);
      {
        GradTape tape;
        const Tensor loss = batch_loss(mc, r.final_params, batch);
        row.train_loss = loss.item();
        if (!std::isfinite(row.train_loss)) {
          throw NumericError("training diverged: non-finite loss at step " + std::to_string(step));
        }
        tape.backward(loss);
      }
      adamw_step(params, r.optimizer, tc, row.lr);

      const bool epoch_end = at + tc.batch_size >= n;
      if (epoch_end || step == tc.total_steps) {
        const MetricMap m = evaluate(mc, r.final_params, dev);
        row.dev_acc = m.at("accuracy");
        row.dev_f1 = selection_f1(m);
        consider(step, m);
      }
      r.trace.push_back(row);
      if (on_step) on_step(row);
    }
  }
  for (const auto& p : params) p.tensor.clear_grad();
  return r;
}

}  // namespace mopebaf
