#include <cmath>
#include <limits>
#include <sstream>

#include <gtest/gtest.h>

#include "mopebaf/training.hpp"

namespace mopebaf {
namespace {

ModelConfig small_model(std::uint64_t seed = 1) {
  ModelConfig c;
  c.hidden_dim = 8;
  c.n_heads = 2;
  c.ffn_dim = 16;
  c.stage1_layers = 2;
  c.stage2_layers = 1;
  c.vp_len = c.lp_len = c.vlp_len = 2;
  c.block_count = 2;
  c.vocab_size = 24;
  c.patch_feature_dim = 4;
  c.n_patches = 4;
  c.max_text_len = 5;
  c.seed = seed;
  return c;
}

FewShotSplit small_split(const ModelConfig& c, std::size_t shots, std::uint64_t seed) {
  DataConfig d;
  d.n_patches = c.n_patches;
  d.patch_feature_dim = c.patch_feature_dim;
  d.text_len = c.max_text_len;
  d.vocab_size = c.vocab_size;
  return make_fewshot_split(Task::kSarcasm2, shots, 16, seed, d);
}

TEST(Schedule, WarmupPeakAndDecay) {
  const TrainConfig t = TrainConfig::paper_scale();
  EXPECT_EQ(t.warmup_steps(), 20u);
  EXPECT_NEAR(lr_at_step(t, 20), 3e-5, 1e-12);
  EXPECT_NEAR(lr_at_step(t, 10), 1.5e-5, 1e-12);
  EXPECT_NEAR(lr_at_step(t, 110), 1.5e-5, 1e-12);
  EXPECT_EQ(lr_at_step(t, 200), 0.0);
  EXPECT_NEAR(lr_at_step(t, 1), 1.5e-6, 1e-15);
}

TEST(Schedule, OutOfRangeStepIsInputError) {
  const TrainConfig t = TrainConfig::desk();
  EXPECT_THROW(lr_at_step(t, 0), InputError);
  EXPECT_THROW(lr_at_step(t, 201), InputError);
}

TEST(TrainConfig, Validation) {
  TrainConfig t;
  t.warmup_frac = 0.0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.batch_size = 0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = TrainConfig{};
  t.total_steps = 0;
  EXPECT_NO_THROW(t.validate());
}

TEST(AdamW, FirstStepClosedForm) {
  TrainConfig t;
  t.weight_decay = 0.0;
  std::vector<double> p{1.0};
  const std::vector<double> g{1.0};
  AdamMoments m{{0.0}, {0.0}};
  adamw_update(p, g, m, t, 0.1, 1, true);
  EXPECT_NEAR(p[0], 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)), 1e-15);
}

TEST(AdamW, ZeroGradientWithoutDecayKeepsParameter) {
  TrainConfig t;
  t.weight_decay = 0.0;
  std::vector<double> p{2.5};
  const std::vector<double> g{0.0};
  AdamMoments m{{0.4}, {0.09}};
  adamw_update(p, g, m, t, 0.1, 3, true);
  EXPECT_LT(m.m[0], 0.4);
  EXPECT_LT(m.v[0], 0.09);
  EXPECT_NE(p[0], 2.5);  // momentum still moves it
  AdamMoments fresh{{0.0}, {0.0}};
  std::vector<double> q{2.5};
  adamw_update(q, g, fresh, t, 0.1, 1, true);
  EXPECT_EQ(q[0], 2.5);
  EXPECT_EQ(fresh.m[0], 0.0);
}

TEST(AdamW, DecoupledDecayOnly) {
  TrainConfig t;
  t.weight_decay = 0.01;
  std::vector<double> p{3.0};
  const std::vector<double> g{0.0};
  AdamMoments m{{0.0}, {0.0}};
  adamw_update(p, g, m, t, 0.1, 1, true);
  EXPECT_NEAR(p[0], 3.0 * (1.0 - 0.001), 1e-15);
  std::vector<double> q{3.0};
  AdamMoments m2{{0.0}, {0.0}};
  adamw_update(q, g, m2, t, 0.1, 1, false);
  EXPECT_EQ(q[0], 3.0);
}

TEST(AdamW, NonFiniteGradientNamesParameter) {
  std::vector<NamedTensor> params{{"w.good", Tensor({1}, {1.0}, true)},
                                  {"w.bad", Tensor({2}, {1.0, 2.0}, true)}};
  params[0].tensor.ensure_grad()[0] = 1.0;
  params[1].tensor.ensure_grad()[1] = std::numeric_limits<double>::infinity();
  OptimizerState s = OptimizerState::for_params(params);
  try {
    adamw_step(params, s, TrainConfig{}, 0.1);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("w.bad"), std::string::npos);
  }
  EXPECT_EQ(params[0].tensor[0], 1.0);  // nothing applied
  EXPECT_EQ(s.step, 0u);
}

TEST(AdamW, ParametersWithoutGradientAreSkipped) {
  std::vector<NamedTensor> params{{"a", Tensor({1}, {1.0}, true)}, {"b", Tensor({1}, {1.0}, true)}};
  params[0].tensor.ensure_grad()[0] = 1.0;
  OptimizerState s = OptimizerState::for_params(params);
  adamw_step(params, s, TrainConfig{}, 0.1);
  EXPECT_NE(params[0].tensor[0], 1.0);
  EXPECT_EQ(params[1].tensor[0], 1.0);
}

TEST(Train, IdenticalSeedsGiveIdenticalTraces) {
  const ModelConfig c = small_model();
  TrainConfig t;
  t.total_steps = 6;
  t.seed = 4;
  const FewShotSplit split = small_split(c, 4, 2);
  std::ostringstream a, b;
  write_trace_csv(a, train(c, t, split).trace);
  write_trace_csv(b, train(c, t, split).trace);
  EXPECT_EQ(a.str(), b.str());
  t.seed = 5;
  std::ostringstream other;
  write_trace_csv(other, train(c, t, split).trace);
  EXPECT_NE(a.str(), other.str());
}

TEST(Train, ZeroStepsKeepsInitialParameters) {
  const ModelConfig c = small_model();
  TrainConfig t;
  t.total_steps = 0;
  const TrainResult r = train(c, t, small_split(c, 2, 1));
  EXPECT_TRUE(r.trace.empty());
  EXPECT_EQ(r.best_step, 0u);
  const auto init = named_parameters(init_params(c));
  const auto fin = named_parameters(r.final_params);
  const auto best = named_parameters(r.best_params);
  for (std::size_t i = 0; i < init.size(); ++i) {
    EXPECT_TRUE(bitwise_equal(init[i].tensor, fin[i].tensor)) << init[i].name;
    EXPECT_TRUE(bitwise_equal(init[i].tensor, best[i].tensor)) << init[i].name;
  }
}

TEST(Train, PartialBatchKeptAndDevEvaluatedPerEpoch) {
  const ModelConfig c = small_model();
  TrainConfig t;
  t.total_steps = 5;
  t.batch_size = 3;
  const FewShotSplit split = small_split(c, 2, 3);  // 4 samples: batches of 3 and 1
  std::vector<std::size_t> evaluated;
  const TrainResult r = train(c, t, split, [&](const TraceRow& row) {
    if (row.dev_acc) evaluated.push_back(row.step);
  });
  ASSERT_EQ(r.trace.size(), 5u);
  EXPECT_EQ(evaluated, (std::vector<std::size_t>{2, 4, 5}));
  EXPECT_TRUE(std::find(evaluated.begin(), evaluated.end(), r.best_step) != evaluated.end());
  EXPECT_EQ(r.optimizer.step, 5u);
}

TEST(Train, BestCheckpointIsEarliestMaximum) {
  const ModelConfig c = small_model(3);
  TrainConfig t;
  t.total_steps = 12;
  t.batch_size = 4;
  const FewShotSplit split = small_split(c, 2, 5);
  const TrainResult r = train(c, t, split);
  double best = -1;
  std::size_t first = 0;
  for (const TraceRow& row : r.trace) {
    if (row.dev_f1 && *row.dev_f1 > best) {
      best = *row.dev_f1;
      first = row.step;
    }
  }
  EXPECT_EQ(r.best_step, first);
  EXPECT_EQ(selection_f1(r.best_dev), best);
  EXPECT_EQ(selection_f1(evaluate(c, r.best_params, split.dev)), best);
}

TEST(Train, NonFiniteLossAbortsWithStep) {
  const ModelConfig c = small_model();
  FewShotSplit split = small_split(c, 2, 1);
  for (Sample& s : split.train) s.patches[0] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig t;
  t.total_steps = 3;
  try {
    train(c, t, split);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
  }
}

TEST(Train, LossFallsOnTinySplit) {
  const ModelConfig c = small_model(2);
  TrainConfig t;
  t.total_steps = 60;
  t.batch_size = 4;
  t.peak_lr = 3e-3;
  const FewShotSplit split = small_split(c, 2, 7);
  const TrainResult r = train(c, t, split);
  double first = 0, last = 0;
  for (std::size_t i = 0; i < 5; ++i) first += r.trace[i].train_loss;
  for (std::size_t i = r.trace.size() - 5; i < r.trace.size(); ++i) last += r.trace[i].train_loss;
  EXPECT_LT(last, first);
}

TEST(TraceCsv, Format) {
  std::vector<TraceRow> rows(2);
  rows[0] = {1, 0.5, 0.25, std::nullopt, std::nullopt};
  rows[1] = {2, 1.0, 0.125, 0.75, 0.5};
  std::ostringstream os;
  write_trace_csv(os, rows);
  EXPECT_EQ(os.str(), "step,lr,train_loss,dev_acc,dev_f1\n1,0.5,0.25,,\n2,1,0.125,0.75,0.5\n");
}

}  // namespace
}  // namespace mopebaf
