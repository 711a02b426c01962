#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mopebaf/checkpoint.hpp"
#include "mopebaf/config.hpp"
#include "mopebaf/data.hpp"
#include "mopebaf/eval.hpp"
#include "mopebaf/gradcheck.hpp"
#include "mopebaf/layout.hpp"
#include "mopebaf/model.hpp"
#include "mopebaf/training.hpp"

namespace mopebaf {

namespace exit_code {
inline constexpr int kOk = 0;
inline constexpr int kCheckFailure = 1;
inline constexpr int kUsage = 2;
}  // namespace exit_code

/// Seeds for run `i` of a multi-run command: an explicit base seed sets all
/// three seeds to base + i; otherwise each configured seed is offset by i.
inline RunConfig seeded_run(RunConfig rc, std::optional<std::uint64_t> base, std::size_t i) {
  if (base) {
    rc.set_seed(*base + i);
  } else {
    rc.model.seed += i;
    rc.train.seed += i;
    rc.data.data_seed += i;
  }
  return rc;
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out << text;
}

inline nlohmann::json seeds_json(const RunConfig& rc) {
  return {{"model", rc.model.seed}, {"train", rc.train.seed}, {"data", rc.data.data_seed}};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  std::optional<std::uint64_t> seed;
  std::size_t runs = 1;
  std::optional<std::string> out_dir;
};

/// Trains `runs` models. Each run directory receives config.ini, trace.csv,
/// best.ckpt, final.ckpt and metrics.json; dev metrics go to `out` as JSON.
inline int cmd_train(const RunConfig& base, const TrainOptions& opt, std::ostream& out,
                     std::ostream& log) {
  base.validate();
  if (opt.runs < 1) throw ConfigError("--runs must be at least 1");
  const std::filesystem::path root = opt.out_dir.value_or(base.out_dir);
  nlohmann::json runs = nlohmann::json::array();
  std::vector<MetricMap> dev_runs, test_runs;
  for (std::size_t i = 0; i < opt.runs; ++i) {
    const RunConfig rc = seeded_run(base, opt.seed, i);
    const std::filesystem::path dir = opt.runs == 1 ? root : root / ("run_" + std::to_string(i));
    std::filesystem::create_directories(dir);
    detail::write_text(dir / "config.ini", config_to_string(rc));

    const FewShotSplit split = make_split(rc);
    {
      std::ofstream records(dir / "split.jsonl");
      export_split(split, records);
    }
    log << "run " << i << ": training " << rc.train.total_steps << " steps on "
        << split.train.size() << " samples\n";
    const TrainResult r = train(rc.model, rc.train, split);

    std::ofstream trace(dir / "trace.csv");
    write_trace_csv(trace, r.trace);
    save_checkpoint((dir / "best.ckpt").string(), {rc, r.best_params, r.best_step, std::nullopt});
    save_checkpoint((dir / "final.ckpt").string(),
                    {rc, r.final_params, rc.train.total_steps, r.optimizer});

    nlohmann::json j = {{"run", i},
                        {"seeds", detail::seeds_json(rc)},
                        {"best_step", r.best_step},
                        {"dev", metrics_json(r.best_dev)}};
    if (!split.test.empty()) {
      const MetricMap test = evaluate(rc.model, r.best_params, split.test);
      j["test"] = metrics_json(test);
      test_runs.push_back(test);
    }
    dev_runs.push_back(r.best_dev);
    detail::write_text(dir / "metrics.json", j.dump(2) + "\n");
    runs.push_back(std::move(j));
  }
  if (opt.runs == 1) {
    out << runs.front().dump(2) << '\n';
  } else {
    nlohmann::json agg = {{"runs", runs}, {"dev_aggregate", aggregate_json(aggregate_runs(dev_runs), dev_runs.size())}};
    if (!test_runs.empty()) agg["test_aggregate"] = aggregate_json(aggregate_runs(test_runs), test_runs.size());
    out << agg.dump(2) << '\n';
  }
  return exit_code::kOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::vector<std::string> checkpoints;
  std::string part = "test";          // test | dev | train
  std::vector<std::uint64_t> seeds;   // data seeds; empty = recorded seed
};

/// Evaluates checkpoints on regenerated splits. With several checkpoints or
/// data seeds the per-run metrics are aggregated to mean and population sd.
inline int cmd_eval(const EvalOptions& opt, std::ostream& out) {
  if (opt.checkpoints.empty()) throw ConfigError("eval: --checkpoint is required");
  if (opt.part != "test" && opt.part != "dev" && opt.part != "train") {
    throw ConfigError("eval: --split must be test, dev or train, got '" + opt.part + "'");
  }
  nlohmann::json runs = nlohmann::json::array();
  std::vector<MetricMap> metrics;
  for (const std::string& path : opt.checkpoints) {
    const Checkpoint ck = load_checkpoint(path);
    std::vector<std::uint64_t> seeds = opt.seeds;
    if (seeds.empty()) seeds.push_back(ck.config.data.data_seed);
    for (std::uint64_t s : seeds) {
      RunConfig rc = ck.config;
      rc.data.data_seed = s;
      const FewShotSplit split = make_split(rc);
      const std::vector<Sample>& samples =
          opt.part == "test" ? split.test : opt.part == "dev" ? split.dev : split.train;
      const MetricMap m = evaluate(rc.model, ck.params, samples);
      metrics.push_back(m);
      runs.push_back({{"checkpoint", path}, {"split", opt.part}, {"data_seed", s},
                      {"samples", samples.size()}, {"metrics", metrics_json(m)}});
    }
  }
  if (runs.size() == 1) {
    out << runs.front().dump(2) << '\n';
    return exit_code::kOk;
  }
  const auto agg = aggregate_runs(metrics);
  nlohmann::json table = nlohmann::json::object();
  for (const auto& [k, a] : agg) table[k] = mean_sd_percent(a);
  out << nlohmann::json{{"runs", runs}, {"aggregate", aggregate_json(agg, metrics.size())}, {"table", table}}.dump(2)
      << '\n';
  return exit_code::kOk;
}

// ---------------------------------------------------------------------------
// gradcheck

inline constexpr double kGradcheckTolerance = 1e-4;

/// Moves every parameter to a seeded random point where activations are of
/// unit scale: lookup tables (token, position, prompt rows) ~ N(0, 1),
/// projection matrices ~ N(0, 1/fan_in), norm gains ~ 1 + N(0, 0.1^2),
/// biases and shifts ~ N(0, 0.1^2). At the small-scale initialization the
/// layer norms are so curved, and many gradients so close to zero, that
/// central differences with h = 1e-4 are dominated by truncation and
/// rounding error rather than by the backward rules under test.
inline void move_to_probe_point(std::span<const NamedTensor> params, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "gradcheck-probe"));
  auto is_table = [](const std::string& n) {
    for (const char* prefix : {"embed.tok_emb", "embed.img_pos", "embed.txt_pos", "prompts."})
      if (n.rfind(prefix, 0) == 0) return true;
    return false;
  };
  for (const NamedTensor& p : params) {
    Tensor t = p.tensor;
    const bool gain = p.name.size() >= 6 && p.name.compare(p.name.size() - 6, 6, ".gamma") == 0;
    double sd = 0.1;
    if (p.decay) sd = is_table(p.name) ? 1.0 : 1.0 / std::sqrt(static_cast<double>(t.dim(0)));
    std::normal_distribution<double> normal(0.0, sd);
    for (double& v : t.data()) v = (gain ? 1.0 : 0.0) + normal(rng);
  }
}

/// Finite-difference check of the full training loss over every parameter
/// of a small model at a probe point. Refuses configs wider than 16 or
/// deeper than 4 layers.
inline int cmd_gradcheck(const RunConfig& rc, std::ostream& out) {
  rc.validate();
  if (rc.model.hidden_dim > 16 || rc.model.stage1_layers + rc.model.stage2_layers > 4) {
    throw ConfigError("gradcheck: config too large (hidden_dim " + std::to_string(rc.model.hidden_dim) +
                      ", " + std::to_string(rc.model.stage1_layers + rc.model.stage2_layers) +
                      " layers); limit is hidden_dim <= 16 and <= 4 layers");
  }
  const auto t0 = std::chrono::steady_clock::now();
  const FewShotSplit split = make_split(rc);
  const std::size_t n = std::min<std::size_t>(4, split.train.size());
  const std::vector<Sample> batch(split.train.begin(), split.train.begin() + static_cast<std::ptrdiff_t>(n));
  const Params params = init_params(rc.model);
  std::vector<NamedTensor> named = named_parameters(params);
  move_to_probe_point(named, rc.model.seed);
  const GradCheckReport rep =
      finite_diff_check([&] { return batch_loss(rc.model, params, batch); }, named);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool pass = rep.max_rel_error <= kGradcheckTolerance;
  out << nlohmann::json{{"max_rel_error", rep.max_rel_error},
                        {"tolerance", kGradcheckTolerance},
                        {"pass", pass},
                        {"worst_param", rep.worst_param},
                        {"worst_index", rep.worst_index},
                        {"worst_analytic", rep.worst_analytic},
                        {"worst_numeric", rep.worst_numeric},
                        {"coordinates", rep.coordinates},
                        {"seconds", secs}}
             .dump(2)
      << '\n';
  return pass ? exit_code::kOk : exit_code::kCheckFailure;
}

// ---------------------------------------------------------------------------
// ablate

enum class AblationAxis { kPromptLength, kBlockCount, kShots };

inline AblationAxis parse_axis(const std::string& s) {
  if (s == "prompt_length") return AblationAxis::kPromptLength;
  if (s == "block_count") return AblationAxis::kBlockCount;
  if (s == "shots") return AblationAxis::kShots;
  throw ConfigError("ablate: unknown axis '" + s + "' (expected prompt_length, block_count or shots)");
}

inline RunConfig ablation_point(RunConfig rc, AblationAxis axis, std::size_t value) {
  switch (axis) {
    case AblationAxis::kPromptLength:
      rc.model.lp_len = value;
      if (rc.model.prompt_style == PromptStyle::kMoPE) {
        rc.model.vp_len = value;
        rc.model.vlp_len = value;
      }
      break;
    case AblationAxis::kBlockCount: rc.model.block_count = value; break;
    case AblationAxis::kShots: rc.data.shots_per_class = value; break;
  }
  return rc;
}

struct AblateOptions {
  AblationAxis axis = AblationAxis::kPromptLength;
  std::vector<std::size_t> values;
  std::size_t runs = 1;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
};

/// One CSV row per value: value,mean_f1,sd,mean_acc,sd_acc,runs_ok,runs_failed.
/// F1 and accuracy are test metrics of the best-dev checkpoint. A failing
/// run is reported on `log` and the sweep moves on.
inline int cmd_ablate(const RunConfig& base, const AblateOptions& opt, std::ostream& out,
                      std::ostream& log) {
  if (opt.values.empty()) throw ConfigError("ablate: --values is empty");
  if (opt.runs < 1) throw ConfigError("--runs must be at least 1");
  std::ostringstream csv;
  csv << "value,mean_f1,sd,mean_acc,sd_acc,runs_ok,runs_failed\n";
  for (std::size_t value : opt.values) {
    std::vector<MetricMap> ok;
    std::size_t failed = 0;
    for (std::size_t i = 0; i < opt.runs; ++i) {
      try {
        const RunConfig rc = seeded_run(ablation_point(base, opt.axis, value), opt.seed, i);
        rc.validate();
        const FewShotSplit split = make_split(rc);
        const TrainResult r = train(rc.model, rc.train, split);
        MetricMap m = evaluate(rc.model, r.best_params, split.test);
        ok.push_back({{"f1", selection_f1(m)}, {"accuracy", m.at("accuracy")}});
        log << "value " << value << " run " << i << ": f1 " << ok.back()["f1"] << '\n';
      } catch (const Error& e) {
        ++failed;
        log << "value " << value << " run " << i << " failed: " << e.what() << '\n';
      }
    }
    char buf[200];
    if (ok.empty()) {
      std::snprintf(buf, sizeof buf, "%zu,nan,nan,nan,nan,0,%zu\n", value, failed);
    } else {
      const auto agg = aggregate_runs(ok);
      std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.6f,%zu,%zu\n", value, agg.at("f1").mean,
                    agg.at("f1").sd, agg.at("accuracy").mean, agg.at("accuracy").sd, ok.size(), failed);
    }
    csv << buf;
  }
  if (opt.out_dir) {
    std::filesystem::create_directories(*opt.out_dir);
    detail::write_text(std::filesystem::path(*opt.out_dir) / "ablation.csv", csv.str());
  }
  out << csv.str();
  return exit_code::kOk;
}

// ---------------------------------------------------------------------------
// dump-mask

struct MaskOptions {
  long vp = 1, lp = 1, patches = 1, text = 1;
  long vlp = -1;  // stage 2 prompt length; defaults to vp
  int stage = 1;
};

/// 0/1 attention grid with a header row and a label column naming the
/// segment of every position.
inline int cmd_dump_mask(const MaskOptions& opt, std::ostream& out) {
  if (opt.stage != 1 && opt.stage != 2) throw ConfigError("dump-mask: --stage must be 1 or 2");
  std::vector<std::string> labels;
  BoolMatrix mask;
  if (opt.stage == 1) {
    const SequenceLayout layout = build_layout(opt.vp, opt.lp, opt.patches, opt.text);
    mask = build_stage1_mask(layout);
    for (std::size_t i = 0; i < layout.total(); ++i) labels.emplace_back(segment_label(layout.segment_of(i)));
  } else {
    const long vlp = opt.vlp >= 0 ? opt.vlp : opt.vp;
    mask = build_stage2_mask(vlp, opt.patches, opt.text);
    for (long i = 0; i < vlp; ++i) labels.emplace_back("VLP");
    for (long i = 0; i < opt.patches; ++i) labels.emplace_back("IMG");
    for (long i = 0; i < opt.text; ++i) labels.emplace_back("TXT");
  }
  out << '.';
  for (const auto& l : labels) out << ' ' << l;
  out << '\n';
  for (std::size_t r = 0; r < mask.rows(); ++r) {
    out << labels[r];
    for (std::size_t c = 0; c < mask.cols(); ++c) out << ' ' << (mask(r, c) ? '1' : '0');
    out << '\n';
  }
  return exit_code::kOk;
}

}  // namespace mopebaf
