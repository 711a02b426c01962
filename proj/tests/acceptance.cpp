// Acceptance checks. Each criterion prints one PASS/FAIL line followed by
// the measured quantities; the process exits non-zero if any criterion fails.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mopebaf/mopebaf.hpp"
#include "oracles/metric_oracle.hpp"
#include "oracles/reference_forward.hpp"

namespace fs = std::filesystem;
using namespace mopebaf;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Shell {
  int code = -1;
  std::string out;
};

Shell run_cli(const std::string& args) {
  const std::string cmd = std::string(MOPEBAF_CLI) + " " + args + " 2>/dev/null";
  Shell r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch_dir(const std::string& tag) {
  const fs::path d = fs::temp_directory_path() / ("mopebaf_acceptance_" + std::to_string(getpid()) + "_" + tag);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string source_path(const std::string& rel) { return std::string(MOPEBAF_SOURCE_DIR) + "/" + rel; }

Sample sample_for(const ModelConfig& c, std::uint64_t seed) {
  DataConfig d;
  d.n_patches = c.n_patches;
  d.patch_feature_dim = c.patch_feature_dim;
  d.text_len = c.max_text_len;
  d.vocab_size = c.vocab_size;
  return gen_sample(Task::kSarcasm2, seed, d);
}

// ---------------------------------------------------------------------------

Verdict gradient_oracle() {
  const auto t0 = Clock::now();
  const Shell r = run_cli("gradcheck --config " + source_path("configs/gradcheck.ini"));
  const double secs = seconds_since(t0);
  double err = NAN;
  try {
    err = nlohmann::json::parse(r.out).at("max_rel_error").get<double>();
  } catch (const std::exception&) {
  }
  return {r.code == 0 && err <= 1e-4 && secs < 60.0,
          "exit " + std::to_string(r.code) + ", max_rel_error " + fmt("%.3e", err) + ", runtime " +
              fmt("%.2f", secs) + " s"};
}

Verdict degeneracy() {
  int base_ok = 0, mope_ok = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    ModelConfig c;
    c.hidden_dim = 16;
    c.n_heads = 2;
    c.ffn_dim = 24;
    c.stage1_layers = 3;
    c.stage2_layers = 2;
    c.vp_len = c.lp_len = c.vlp_len = 3;
    c.block_count = 1;
    c.vocab_size = 24;
    c.patch_feature_dim = 5;
    c.n_patches = 4;
    c.max_text_len = 6;
    c.seed = seed;
    const Sample s = sample_for(c, 1000 + seed);

    const Params p = init_params(c);
    move_to_probe_point(named_parameters(p), seed);
    if (bitwise_equal(reshape(forward(c, p, s).cls, {1, c.hidden_dim}), oracle::mope_without_fusion(c, p, s)))
      ++mope_ok;

    ModelConfig bare = c;
    bare.vp_len = bare.lp_len = bare.vlp_len = 0;
    const Params q = init_params(bare);
    move_to_probe_point(named_parameters(q), seed);
    if (bitwise_equal(reshape(forward(bare, q, s).cls, {1, c.hidden_dim}), oracle::base_two_stage(bare, q, s)))
      ++base_ok;
  }
  return {base_ok == 10 && mope_ok == 10,
          "(a) prompts 0 + block_count 1 vs base forward: " + std::to_string(base_ok) +
              "/10 bit-exact; (b) block_count 1 vs prompt experts without fusion: " + std::to_string(mope_ok) +
              "/10 bit-exact"};
}

Verdict mask_invariants() {
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<long> plen(0, 5), seg(1, 7);
  std::normal_distribution<double> score(0.0, 6.0);
  int rule_failures = 0;
  double worst_sum = 0;
  std::size_t leaked = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const SequenceLayout l = build_layout(plen(rng), plen(rng), seg(rng), seg(rng));
    const BoolMatrix m = build_stage1_mask(l);
    auto block_is = [&](const Span& rows, const Span& cols, bool v) {
      for (std::size_t r = rows.begin; r < rows.end; ++r)
        for (std::size_t c = cols.begin; c < cols.end; ++c)
          if (m(r, c) != v) return false;
      return true;
    };
    const bool rules[] = {
        block_is(l.img, l.txt, true),  block_is(l.txt, l.img, true), block_is(l.vp, l.txt, false),
        block_is(l.vp, l.lp, false),   block_is(l.lp, l.img, false), block_is(l.lp, l.vp, false),
        block_is(l.img, l.lp, false),  block_is(l.txt, l.vp, false), block_is(l.vp, l.vp, true),
        block_is(l.lp, l.lp, true),    block_is(l.img, l.img, true), block_is(l.txt, l.txt, true),
    };
    for (bool ok : rules) rule_failures += ok ? 0 : 1;

    const std::size_t n = l.total();
    Tensor s({n, n});
    for (double& v : s.data()) v = score(rng);
    const Tensor p = masked_softmax(s, m);
    for (std::size_t r = 0; r < n; ++r) {
      double sum = 0;
      for (std::size_t c = 0; c < n; ++c) {
        sum += p[r * n + c];
        if (!m(r, c) && p[r * n + c] != 0.0) ++leaked;
      }
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
    }
  }
  return {rule_failures == 0 && worst_sum <= 1e-12 && leaked == 0,
          "rule violations " + std::to_string(rule_failures) + " over 50 layouts, max |row sum - 1| " +
              fmt("%.2e", worst_sum) + ", nonzero masked entries " + std::to_string(leaked)};
}

Verdict locality() {
  std::mt19937_64 rng(47);
  std::normal_distribution<double> noise(0.0, 1.0);
  int vp_changed = 0, lp_changed = 0, trials_with_effect = 0;
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    ModelConfig c;
    c.hidden_dim = 8;
    c.n_heads = 2;
    c.ffn_dim = 16;
    c.stage1_layers = 1;
    c.stage2_layers = 1;
    c.vp_len = c.lp_len = c.vlp_len = 1 + trial % 4;
    c.block_count = 1;
    c.vocab_size = 24;
    c.patch_feature_dim = 4;
    c.n_patches = 2 + trial % 3;
    c.max_text_len = 3 + trial % 4;
    c.seed = 200 + trial;
    const Params p = init_params(c);
    move_to_probe_point(named_parameters(p), c.seed);
    const std::vector<Sample> one{sample_for(c, 500 + trial)};
    const Embedded e = embed_inputs(c, p, one);
    const SequenceLayout& l = e.layout;
    const BoolMatrix mask = build_stage1_mask(l);
    const std::size_t d = c.hidden_dim;
    const Tensor before = stage1_layer_forward(p.stage1[0], e.hidden, l, mask, c.n_heads);

    auto perturbed = [&](const Span& rows) {
      Tensor h = e.hidden.clone();
      for (std::size_t r = rows.begin; r < rows.end; ++r)
        for (std::size_t j = 0; j < d; ++j) h[r * d + j] += noise(rng);
      return stage1_layer_forward(p.stage1[0], h, l, mask, c.n_heads);
    };
    auto rows_differ = [&](const Tensor& a, const Tensor& b, const Span& rows) {
      for (std::size_t r = rows.begin; r < rows.end; ++r)
        for (std::size_t j = 0; j < d; ++j)
          if (a[r * d + j] != b[r * d + j]) return true;
      return false;
    };
    const Tensor text_moved = perturbed(l.txt);
    const Tensor image_moved = perturbed(l.img);
    vp_changed += rows_differ(before, text_moved, l.vp) ? 1 : 0;
    lp_changed += rows_differ(before, image_moved, l.lp) ? 1 : 0;
    // The perturbation must reach the rows that are allowed to see it.
    if (rows_differ(before, text_moved, l.lp) && rows_differ(before, image_moved, l.vp)) ++trials_with_effect;
  }
  return {vp_changed == 0 && lp_changed == 0 && trials_with_effect == 20,
          "VP rows changed by text in " + std::to_string(vp_changed) + "/20 trials, LP rows changed by image in " +
              std::to_string(lp_changed) + "/20, perturbation visible elsewhere in " +
              std::to_string(trials_with_effect) + "/20"};
}

// All compositions of n into k positive parts.
void compositions(std::size_t n, std::size_t k, std::vector<std::size_t>& cur,
                  std::vector<std::vector<std::size_t>>& out) {
  if (k == 1) {
    cur.push_back(n);
    out.push_back(cur);
    cur.pop_back();
    return;
  }
  for (std::size_t first = 1; first + (k - 1) <= n; ++first) {
    cur.push_back(first);
    compositions(n - first, k - 1, cur, out);
    cur.pop_back();
  }
}

Verdict block_partition() {
  int matched = 0;
  for (std::size_t k = 1; k <= 7; ++k) {
    std::vector<std::vector<std::size_t>> all, valid;
    std::vector<std::size_t> cur;
    compositions(21, k, cur, all);
    for (const auto& c : all) {
      const auto [lo, hi] = std::minmax_element(c.begin(), c.end());
      if (*hi - *lo > 1) continue;
      if (!std::is_sorted(c.begin(), c.end(), std::greater<>())) continue;  // excess goes to the bottom
      valid.push_back(c);
    }
    if (valid.size() == 1 && partition_blocks(21, k).block_sizes == valid[0]) ++matched;
  }
  const bool two = partition_blocks(21, 2).block_sizes == std::vector<std::size_t>{11, 10};
  const bool six = partition_blocks(21, 6).block_sizes == std::vector<std::size_t>{4, 4, 4, 3, 3, 3};
  return {matched == 7 && two && six,
          "k=1..7 matching the enumerator: " + std::to_string(matched) + "/7, (21,2)->[11,10] " +
              (two ? "yes" : "no") + ", (21,6)->[4,4,4,3,3,3] " + (six ? "yes" : "no")};
}

Verdict schedule() {
  TrainConfig t = TrainConfig::paper_scale();
  t.total_steps = 200;
  const double err = std::max({std::abs(lr_at_step(t, 20) - 3e-5), std::abs(lr_at_step(t, 10) - 1.5e-5),
                               std::abs(lr_at_step(t, 110) - 1.5e-5), std::abs(lr_at_step(t, 200))});
  bool peak = true;
  for (std::size_t s = 1; s <= 200; ++s)
    if (s != 20 && lr_at_step(t, s) >= lr_at_step(t, 20)) peak = false;
  return {err <= 1e-12 && peak, "max deviation " + fmt("%.2e", err) + ", unique maximum at step 20 " +
                                    (peak ? "yes" : "no")};
}

Verdict memorization() {
  const RunConfig rc;  // desk defaults: sarcasm2, 16 shots per class, 200 steps, batch 8
  FewShotSplit split = make_split(rc);
  // Point the per-epoch evaluation at the training set itself.
  split.dev = split.train;
  const auto t0 = Clock::now();
  const TrainResult r = train(rc.model, rc.train, split);
  const double secs = seconds_since(t0);

  double best_train_acc = 0;
  std::size_t first_full = 0;
  for (const TraceRow& row : r.trace) {
    if (!row.dev_acc) continue;
    best_train_acc = std::max(best_train_acc, *row.dev_acc);
    if (*row.dev_acc == 1.0 && first_full == 0) first_full = row.step;
  }
  const double final_acc = evaluate(rc.model, r.final_params, split.train).at("accuracy");

  // Trend check over consecutive 50-step windows.
  std::vector<double> window_means;
  for (std::size_t w = 0; w + 50 <= r.trace.size(); w += 50) {
    double s = 0;
    for (std::size_t i = w; i < w + 50; ++i) s += r.trace[i].train_loss;
    window_means.push_back(s / 50.0);
  }
  bool monotone = true;
  std::string means;
  for (std::size_t i = 0; i < window_means.size(); ++i) {
    if (i > 0 && window_means[i] > window_means[i - 1]) monotone = false;
    means += (i ? " " : "") + fmt("%.4f", window_means[i]);
  }
  return {split.train.size() == 32 && best_train_acc == 1.0 && secs < 300.0 && monotone,
          std::to_string(split.train.size()) + " samples, train accuracy " + fmt("%.4f", best_train_acc) +
              (first_full ? " first reached at step " + std::to_string(first_full) : std::string(" never 1.0")) +
              " (final " + fmt("%.4f", final_acc) + "), 50-step mean losses [" + means + "], " +
              fmt("%.1f", secs) + " s"};
}

Verdict fewshot_gain() {
  struct Arm {
    const char* name;
    const char* config;
    std::vector<MetricMap> test;
  };
  Arm arms[] = {{"MoPE-BAF", "configs/fewshot_mope.ini", {}}, {"soft prompt", "configs/fewshot_soft.ini", {}}};
  const std::size_t seeds = 5;
  for (Arm& arm : arms) {
    const RunConfig base = load_config(source_path(arm.config));
    for (std::size_t i = 0; i < seeds; ++i) {
      const RunConfig rc = seeded_run(base, 1, i);
      rc.validate();
      const FewShotSplit split = make_split(rc);
      const TrainResult r = train(rc.model, rc.train, split);
      arm.test.push_back(evaluate(rc.model, r.best_params, split.test));
      std::cout << "    " << arm.name << " seed " << rc.data.data_seed << ": test accuracy "
                << fmt("%.4f", arm.test.back().at("accuracy")) << " (shots " << split.train.size()
                << ", test " << split.test.size() << ", best step " << r.best_step << ")\n";
    }
  }
  std::cout << "    | Method      | Acc           | F1            |\n";
  std::cout << "    |-------------|---------------|---------------|\n";
  double mean[2];
  for (int a = 0; a < 2; ++a) {
    const auto agg = aggregate_runs(arms[a].test);
    mean[a] = agg.at("accuracy").mean;
    std::printf("    | %-11s | %-13s | %-13s |\n", arms[a].name, mean_sd_percent(agg.at("accuracy")).c_str(),
                mean_sd_percent(agg.at("f1")).c_str());
  }
  return {mean[0] >= mean[1] && mean[0] >= 0.60 && mean[1] >= 0.60,
          "mean test accuracy MoPE-BAF " + fmt("%.4f", mean[0]) + " vs soft prompt " + fmt("%.4f", mean[1]) +
              " over 5 data seeds (need MoPE-BAF >= soft, both >= 0.60)"};
}

Verdict gradient_flow() {
  ModelConfig full = ModelConfig::desk();
  const Params p = init_params(full);
  const RunConfig rc;
  const FewShotSplit split = make_split(rc);
  const std::vector<Sample> batch(split.train.begin(), split.train.begin() + 8);

  auto group_norms = [&](const ModelConfig& c) {
    const auto named = named_parameters(p);
    for (const auto& n : named) n.tensor.clear_grad();
    {
      GradTape tape;
      tape.backward(batch_loss(c, p, batch));
    }
    std::vector<std::pair<std::string, double>> norms;
    for (const auto& n : named) {
      double s = 0;
      if (n.tensor.has_grad())
        for (double g : n.tensor.grad()) s += g * g;
      norms.emplace_back(n.name, std::sqrt(s));
      n.tensor.clear_grad();
    }
    return norms;
  };

  int zero_on_path = 0, fusion_nonzero = 0, fusion_groups = 0, groups = 0;
  std::string offenders;
  for (const auto& [name, norm] : group_norms(full)) {
    ++groups;
    if (norm == 0.0) {
      ++zero_on_path;
      offenders += " " + name;
    }
  }
  ModelConfig single = full;
  single.block_count = 1;
  for (const auto& [name, norm] : group_norms(single)) {
    if (name.rfind("fusion.", 0) == 0) {
      ++fusion_groups;
      if (norm != 0.0) ++fusion_nonzero;
    } else if (norm == 0.0) {
      ++zero_on_path;
      offenders += " " + name + "(block_count 1)";
    }
  }
  return {zero_on_path == 0 && fusion_groups > 0 && fusion_nonzero == 0,
          std::to_string(groups) + " parameter tensors, zero-norm on-path tensors " + std::to_string(zero_on_path) +
              offenders + ", fusion tensors with nonzero norm at block_count 1: " + std::to_string(fusion_nonzero) +
              "/" + std::to_string(fusion_groups)};
}

Verdict metric_oracles() {
  std::mt19937_64 rng(2025);
  int mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int K = trial % 2 == 0 ? 2 : 3;
    std::uniform_int_distribution<int> label(0, K - 1);
    std::uniform_int_distribution<int> length(1, 60);
    std::vector<int> p(static_cast<std::size_t>(length(rng))), g(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = label(rng);
      g[i] = label(rng);
    }
    const auto want = oracle::brute_force_metrics(p, g, K);
    const MulticlassMetrics m = multiclass_metrics(p, g, K);
    if (m.accuracy != want.accuracy || m.macro_f1 != want.macro_f1 || m.weighted_f1 != want.weighted_f1)
      ++mismatches;
    if (K == 2) {
      const BinaryMetrics b = binary_metrics(p, g);
      if (b.accuracy != want.accuracy || b.precision != want.precision[1] || b.recall != want.recall[1] ||
          b.f1 != want.f1[1])
        ++mismatches;
    }
  }

  int examples = 0;
  {
    const std::vector<int> y{0, 1, 1, 0, 1};
    const BinaryMetrics m = binary_metrics(y, y);
    examples += m.accuracy == 1.0 && m.precision == 1.0 && m.recall == 1.0 && m.f1 == 1.0;
  }
  {
    const std::vector<int> golds{1, 1, 1, 0, 0, 0, 0, 0}, preds{1, 1, 0, 1, 0, 0, 0, 0};
    const BinaryMetrics m = binary_metrics(preds, golds);
    examples += m.precision == 2.0 / 3.0 && m.recall == 2.0 / 3.0 && m.f1 == 2.0 / 3.0 && m.accuracy == 0.75;
  }
  {
    const std::vector<int> y{0, 0, 0};
    const BinaryMetrics m = binary_metrics(y, y);
    examples += m.precision == 0.0 && m.recall == 0.0 && m.f1 == 0.0 && m.accuracy == 1.0;
  }
  {
    const std::vector<int> y{0, 1, 2, 2, 1};
    const MulticlassMetrics m = multiclass_metrics(y, y, 3);
    examples += m.accuracy == 1.0 && m.macro_f1 == 1.0 && m.weighted_f1 == 1.0;
  }
  {
    const std::vector<int> golds{0, 0, 1, 2}, preds{0, 1, 1, 2};
    const MulticlassMetrics m = multiclass_metrics(preds, golds, 3);
    const double macro = (2.0 / 3.0 + 2.0 / 3.0 + 1.0) / 3.0;
    const double weighted = (2.0 * (2.0 / 3.0) + 1.0 * (2.0 / 3.0) + 1.0 * 1.0) / 4.0;
    examples += m.accuracy == 0.75 && m.macro_f1 == macro && m.weighted_f1 == weighted;
  }
  return {mismatches == 0 && examples == 5, "mismatches against the confusion-matrix oracle on 100 vectors: " +
                                                std::to_string(mismatches) + ", worked examples bit-exact " +
                                                std::to_string(examples) + "/5"};
}

constexpr const char* kSmallRun = R"([model]
hidden_dim = 8
n_heads = 2
ffn_dim = 16
stage1_layers = 4
stage2_layers = 1
vp_len = 2
lp_len = 2
vlp_len = 2
block_count = 2
vocab_size = 24
patch_feature_dim = 4
n_patches = 4
max_text_len = 5
seed = 3

[train]
total_steps = 20
batch_size = 4

[data]
task = sarcasm2
shots_per_class = 4
test_size = 32
seed = 9
)";

Verdict reproducibility() {
  const fs::path dir = scratch_dir("repro");
  std::ofstream(dir / "run.ini") << kSmallRun;

  const RunConfig rc = load_config((dir / "run.ini").string());
  const FewShotSplit split = make_split(rc);
  const TrainResult r = train(rc.model, rc.train, split);
  Checkpoint ck{rc, r.final_params, rc.train.total_steps, r.optimizer};
  save_checkpoint((dir / "model.ckpt").string(), ck);
  const Checkpoint back = load_checkpoint((dir / "model.ckpt").string());
  const auto a = named_parameters(ck.params), b = named_parameters(back.params);
  bool params_equal = a.size() == b.size();
  for (std::size_t i = 0; params_equal && i < a.size(); ++i)
    params_equal = a[i].name == b[i].name && bitwise_equal(a[i].tensor, b[i].tensor);
  bool moments_equal = back.optimizer.has_value() && back.optimizer->step == ck.optimizer->step;
  for (std::size_t i = 0; moments_equal && i < ck.optimizer->moments.size(); ++i)
    moments_equal = std::memcmp(back.optimizer->moments[i].m.data(), ck.optimizer->moments[i].m.data(),
                                8 * ck.optimizer->moments[i].m.size()) == 0 &&
                    std::memcmp(back.optimizer->moments[i].v.data(), ck.optimizer->moments[i].v.data(),
                                8 * ck.optimizer->moments[i].v.size()) == 0;
  const bool bytes_equal = serialize_checkpoint(back) == serialize_checkpoint(ck);
  const bool config_equal = back.config == ck.config;

  const Shell first = run_cli("train --config " + (dir / "run.ini").string() + " --out " + (dir / "a").string());
  const Shell second = run_cli("train --config " + (dir / "run.ini").string() + " --out " + (dir / "b").string());
  const std::string ta = slurp(dir / "a" / "trace.csv"), tb = slurp(dir / "b" / "trace.csv");
  const bool traces_equal = first.code == 0 && second.code == 0 && !ta.empty() && ta == tb;
  fs::remove_all(dir);

  return {params_equal && moments_equal && bytes_equal && config_equal && traces_equal,
          std::string("checkpoint params ") + (params_equal ? "bit-exact" : "DIFFER") + ", optimizer moments " +
              (moments_equal ? "bit-exact" : "DIFFER") + ", re-serialized bytes " +
              (bytes_equal ? "identical" : "DIFFER") + ", config " + (config_equal ? "identical" : "DIFFER") +
              "; two train invocations: trace.csv " + (traces_equal ? "identical" : "DIFFER") + " (" +
              std::to_string(std::count(ta.begin(), ta.end(), '\n')) + " lines)"};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Verdict()> check;
  };
  const Criterion criteria[] = {
      {"gradient oracle", gradient_oracle},
      {"degeneracy equivalence", degeneracy},
      {"mask invariants", mask_invariants},
      {"single-layer locality", locality},
      {"block partition oracle", block_partition},
      {"schedule oracle", schedule},
      {"memorization", memorization},
      {"directional few-shot gain", fewshot_gain},
      {"gradient flow", gradient_flow},
      {"metric oracles", metric_oracles},
      {"reproducibility", reproducibility},
  };
  int failed = 0, index = 0;
  for (const Criterion& c : criteria) {
    ++index;
    Verdict v;
    const auto t0 = Clock::now();
    try {
      v = c.check();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    if (!v.pass) ++failed;
    std::cout << (v.pass ? "PASS" : "FAIL") << "  [" << index << "] " << c.name << ": " << v.detail << "  ("
              << fmt("%.1f", seconds_since(t0)) << " s)" << std::endl;
  }
  std::cout << (11 - failed) << "/11 acceptance criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
