// Command-line front end: train, eval, gradcheck, ablate, dump-mask.
//
// Exit codes: 0 success, 1 failed check or runtime error, 2 usage or
// configuration error.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mopebaf/mopebaf.hpp"

namespace {

using namespace mopebaf;

int run(int argc, char** argv) {
  CLI::App app{"Mixture-of-prompt-experts transformer with block-aware prompt fusion"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::size_t runs = 1;
  std::optional<std::string> out_dir;

  auto* train = app.add_subcommand("train", "train on the configured few-shot split");
  train->add_option("--config", config_path, "INI configuration")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", seed, "base seed for model, training and data");
  train->add_option("--runs", runs, "number of runs (seeds base..base+runs-1)")->check(CLI::PositiveNumber);
  train->add_option("--out", out_dir, "output directory (overrides [run] out_dir)");

  EvalOptions eval_opt;
  std::vector<std::uint64_t> eval_seeds;
  auto* eval = app.add_subcommand("eval", "evaluate checkpoints on regenerated splits");
  eval->add_option("--checkpoint", eval_opt.checkpoints, "checkpoint file(s)")->required();
  eval->add_option("--split", eval_opt.part, "test, dev or train")->check(CLI::IsMember({"test", "dev", "train"}));
  eval->add_option("--seeds", eval_seeds, "data seeds, comma separated")->delimiter(',');
  eval->add_option("--seed", seed, "first data seed");
  eval->add_option("--runs", runs, "number of data seeds starting at --seed")->check(CLI::PositiveNumber);

  bool inject_fault = false;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the full loss");
  grad->add_option("--config", config_path, "INI configuration")->required()->check(CLI::ExistingFile);
  grad->add_flag("--inject-backward-fault", inject_fault)->group("");  // negative control only

  std::string axis;
  std::vector<std::size_t> values;
  auto* ablate = app.add_subcommand("ablate", "sweep one hyperparameter; CSV of mean F1 per value");
  ablate->add_option("--config", config_path, "INI configuration")->required()->check(CLI::ExistingFile);
  ablate->add_option("--axis", axis, "prompt_length, block_count or shots")
      ->required()
      ->check(CLI::IsMember({"prompt_length", "block_count", "shots"}));
  ablate->add_option("--values", values, "comma separated values")->required()->delimiter(',');
  ablate->add_option("--seed", seed, "base seed");
  ablate->add_option("--runs", runs, "seeds per value")->check(CLI::PositiveNumber);
  ablate->add_option("--out", out_dir, "directory for ablation.csv");

  MaskOptions mask_opt;
  std::optional<long> vp, lp, patches, text, vlp;
  auto* mask = app.add_subcommand("dump-mask", "print an attention mask as a 0/1 grid");
  mask->add_option("--config", config_path, "take segment lengths from a config")->check(CLI::ExistingFile);
  mask->add_option("--vp", vp, "V-Prompt length")->check(CLI::NonNegativeNumber);
  mask->add_option("--lp", lp, "L-Prompt length")->check(CLI::NonNegativeNumber);
  mask->add_option("--vlp", vlp, "VL-Prompt length (stage 2)")->check(CLI::NonNegativeNumber);
  mask->add_option("--patches", patches, "number of image patches")->check(CLI::NonNegativeNumber);
  mask->add_option("--text", text, "number of text tokens")->check(CLI::NonNegativeNumber);
  mask->add_option("--stage", mask_opt.stage, "1 or 2")->check(CLI::IsMember({1, 2}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? exit_code::kOk : exit_code::kUsage;
  }

  if (*train) {
    const RunConfig rc = load_config(config_path);
    return cmd_train(rc, {seed, runs, out_dir}, std::cout, std::cerr);
  }
  if (*eval) {
    eval_opt.seeds = eval_seeds;
    if (eval_opt.seeds.empty() && seed) {
      for (std::size_t i = 0; i < runs; ++i) eval_opt.seeds.push_back(*seed + i);
    }
    return cmd_eval(eval_opt, std::cout);
  }
  if (*grad) {
    const RunConfig rc = load_config(config_path);
    fault_injection::corrupt_gelu_backward() = inject_fault;
    return cmd_gradcheck(rc, std::cout);
  }
  if (*ablate) {
    const RunConfig rc = load_config(config_path);
    return cmd_ablate(rc, {parse_axis(axis), values, runs, seed, out_dir}, std::cout, std::cerr);
  }
  if (*mask) {
    if (!config_path.empty()) {
      const RunConfig rc = load_config(config_path);
      mask_opt.vp = static_cast<long>(rc.model.vp_len);
      mask_opt.lp = static_cast<long>(rc.model.lp_len);
      mask_opt.vlp = static_cast<long>(rc.model.vlp_len);
      mask_opt.patches = static_cast<long>(rc.model.n_patches);
      mask_opt.text = static_cast<long>(rc.model.max_text_len);
    }
    if (vp) mask_opt.vp = *vp;
    if (lp) mask_opt.lp = *lp;
    if (vlp) mask_opt.vlp = *vlp;
    if (patches) mask_opt.patches = *patches;
    if (text) mask_opt.text = *text;
    return cmd_dump_mask(mask_opt, std::cout);
  }
  return exit_code::kUsage;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const mopebaf::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return mopebaf::exit_code::kUsage;
  } catch (const mopebaf::ChecksumError& e) {
    std::cerr << "checksum error: " << e.what() << '\n';
    return mopebaf::exit_code::kCheckFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return mopebaf::exit_code::kCheckFailure;
  }
}
