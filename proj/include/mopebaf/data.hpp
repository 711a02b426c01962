#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "mopebaf/errors.hpp"
#include "mopebaf/random.hpp"
#include "mopebaf/sample.hpp"
#include "mopebaf/vocab.hpp"

namespace mopebaf {

/// Knobs of the synthetic cross-modal incongruity task.
struct DataConfig {
  std::size_t n_patches = 16;
  std::size_t patch_feature_dim = 32;
  std::size_t text_len = 12;  // tokens per raw text, [CLS] included
  std::size_t vocab_size = 64;
  double majority_fraction = 0.75;  // share of patches showing the polarity symbol
  double noise_sd = 0.1;
  std::size_t distractor_symbols = 8;
  std::uint64_t prototype_seed = 0;  // fixes the symbol prototypes

  friend bool operator==(const DataConfig&, const DataConfig&) = default;

  void validate() const {
    auto fail = [](const std::string& f, const std::string& why) {
      throw ConfigError("data." + f + ": " + why);
    };
    if (n_patches == 0) fail("n_patches", "must be positive");
    if (patch_feature_dim == 0) fail("patch_feature_dim", "must be positive");
    if (text_len < 2) fail("text_len", "must be at least 2");
    if (vocab_size < static_cast<std::size_t>(vocab::kMinVocabSize)) {
      fail("vocab_size", "must be at least " + std::to_string(vocab::kMinVocabSize));
    }
    if (!(majority_fraction > 0.0 && majority_fraction <= 1.0)) {
      fail("majority_fraction", "must lie in (0, 1]");
    }
    if (!(noise_sd >= 0.0)) fail("noise_sd", "must be non-negative");
    if (distractor_symbols == 0) fail("distractor_symbols", "must be positive");
  }
};

/// Label rule. sarcasm2: sarcastic iff the polarities disagree.
/// sentiment3: positive / negative when both agree, neutral when mixed.
inline int label_for(Task task, Polarity image, Polarity text) {
  if (task == Task::kSarcasm2) return image != text ? label::kSarcasm : label::kNonSarcasm;
  if (image != text) return label::kNeutral;
  return image == Polarity::kPos ? label::kPositive : label::kNegative;
}

/// Deterministic generator of synthetic image-text pairs. Symbol 0 and 1
/// are the POS / NEG image symbols; the rest are distractors. Every symbol
/// has a fixed unit-norm prototype drawn from `prototype_seed`.
class SyntheticGenerator {
 public:
  explicit SyntheticGenerator(DataConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(derive_seed(cfg_.prototype_seed, "prototypes"));
    std::normal_distribution<double> normal(0.0, 1.0);
    prototypes_.resize(2 + cfg_.distractor_symbols);
    for (auto& proto : prototypes_) {
      proto.resize(cfg_.patch_feature_dim);
      double norm = 0.0;
      for (double& v : proto) {
        v = normal(rng);
        norm += v * v;
      }
      norm = std::sqrt(norm);
      for (double& v : proto) v /= norm;
    }
  }

  const DataConfig& config() const { return cfg_; }
  const std::vector<double>& prototype(std::size_t symbol) const { return prototypes_.at(symbol); }

  Sample generate(Task task, std::uint64_t seed) const {
    Rng rng(seed);
    Sample s;
    s.task = task;
    s.meta.seed = seed;
    s.meta.image_polarity = (rng() & 1) ? Polarity::kNeg : Polarity::kPos;
    s.meta.text_polarity = (rng() & 1) ? Polarity::kNeg : Polarity::kPos;
    s.label = label_for(task, s.meta.image_polarity, s.meta.text_polarity);

    const std::size_t np = cfg_.n_patches, pf = cfg_.patch_feature_dim;
    const auto majority = static_cast<std::size_t>(
        std::lround(cfg_.majority_fraction * static_cast<double>(np)));
    std::vector<std::size_t> order(np);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::uniform_int_distribution<std::size_t> pick_distractor(2, 1 + cfg_.distractor_symbols);
    std::normal_distribution<double> noise(0.0, cfg_.noise_sd);
    const std::size_t polarity_symbol = s.meta.image_polarity == Polarity::kPos ? 0 : 1;
    s.patches = Tensor({np, pf});
    for (std::size_t k = 0; k < np; ++k) {
      const std::size_t patch = order[k];
      const std::size_t symbol = k < majority ? polarity_symbol : pick_distractor(rng);
      for (std::size_t j = 0; j < pf; ++j)
        s.patches[patch * pf + j] = prototypes_[symbol][j] + noise(rng);
    }

    std::uniform_int_distribution<int> pick_word(vocab::kFirstDistractor,
                                                 static_cast<int>(cfg_.vocab_size) - 1);
    std::vector<int> words(cfg_.text_len - 2);
    for (int& w : words) w = pick_word(rng);
    std::uniform_int_distribution<std::size_t> pick_slot(0, words.size());
    const int polarity_tok = s.meta.text_polarity == Polarity::kPos ? vocab::kPosTok : vocab::kNegTok;
    words.insert(words.begin() + static_cast<std::ptrdiff_t>(pick_slot(rng)), polarity_tok);
    s.tokens.reserve(cfg_.text_len);
    s.tokens.push_back(vocab::kCls);
    s.tokens.insert(s.tokens.end(), words.begin(), words.end());
    return s;
  }

 private:
  DataConfig cfg_;
  std::vector<std::vector<double>> prototypes_;
};

inline Sample gen_sample(Task task, std::uint64_t seed, const DataConfig& cfg = {}) {
  return SyntheticGenerator(cfg).generate(task, seed);
}

// ---------------------------------------------------------------------------
// Prompt templates

enum class TemplateMode { kNone, kManual, kSoft, kPTuning };

inline std::string to_string(TemplateMode m) {
  switch (m) {
    case TemplateMode::kNone: return "none";
    case TemplateMode::kManual: return "manual";
    case TemplateMode::kSoft: return "soft";
    case TemplateMode::kPTuning: return "ptuning";
  }
  return "?";
}

inline TemplateMode parse_template_mode(const std::string& s) {
  if (s == "none") return TemplateMode::kNone;
  if (s == "manual") return TemplateMode::kManual;
  if (s == "soft") return TemplateMode::kSoft;
  if (s == "ptuning") return TemplateMode::kPTuning;
  throw ConfigError("unknown template mode '" + s + "' (expected none, manual, soft or ptuning)");
}

/// Hard template "<words> [MASK]" inserted right after [CLS]. Soft and
/// none leave the text untouched: soft prompts live in the model.
struct PromptTemplate {
  TemplateMode mode = TemplateMode::kNone;
  std::vector<int> prefix;

  static PromptTemplate for_task(Task task, TemplateMode mode) {
    PromptTemplate t{mode, {}};
    if (t.has_mask()) {
      const auto words = vocab::template_words(task);
      t.prefix.assign(words.begin(), words.end());
    }
    return t;
  }

  bool has_mask() const { return mode == TemplateMode::kManual || mode == TemplateMode::kPTuning; }
  /// Token index of [MASK] after application.
  std::size_t mask_position() const { return 1 + prefix.size(); }
};

/// Inserts the template after [CLS]. When the result exceeds max_text_len,
/// filler tokens are dropped from the end; the polarity token is kept.
inline Sample apply_template(Sample sample, const PromptTemplate& tmpl, std::size_t max_text_len) {
  if (!tmpl.has_mask()) {
    if (sample.tokens.size() > max_text_len) {
      throw InputError("apply_template: " + std::to_string(sample.tokens.size()) +
                       " tokens exceed max_text_len " + std::to_string(max_text_len));
    }
    return sample;
  }
  if (sample.tokens.empty() || sample.tokens.front() != vocab::kCls) {
    throw InputError("apply_template: text must start with [CLS]");
  }
  std::vector<int> rest(sample.tokens.begin() + 1, sample.tokens.end());
  const std::size_t fixed = 1 + tmpl.prefix.size() + 1;
  auto is_filler = [](int t) { return t >= vocab::kFirstDistractor; };
  while (fixed + rest.size() > max_text_len) {
    auto it = std::find_if(rest.rbegin(), rest.rend(), is_filler);
    if (it == rest.rend()) {
      throw InputError("apply_template: template of " + std::to_string(fixed) +
                       " tokens leaves no room within max_text_len " +
                       std::to_string(max_text_len));
    }
    rest.erase(std::next(it).base());
  }
  std::vector<int> tokens{vocab::kCls};
  tokens.insert(tokens.end(), tmpl.prefix.begin(), tmpl.prefix.end());
  tokens.push_back(vocab::kMask);
  tokens.insert(tokens.end(), rest.begin(), rest.end());
  sample.tokens = std::move(tokens);
  return sample;
}

// ---------------------------------------------------------------------------
// Few-shot splits

struct FewShotSplit {
  Task task = Task::kSarcasm2;
  std::vector<Sample> train;
  std::vector<Sample> dev;
  std::vector<Sample> test;
  std::size_t shots_per_class = 0;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<Sample> balanced_draw(const SyntheticGenerator& gen, Task task,
                                         std::uint64_t stream_seed, std::size_t shots) {
  const int K = num_classes(task);
  std::vector<std::size_t> have(static_cast<std::size_t>(K), 0);
  std::vector<Sample> out;
  const std::size_t want = shots * static_cast<std::size_t>(K);
  for (std::uint64_t i = 0; out.size() < want; ++i) {
    if (i > 1000 * want + 1000) throw InternalError("balanced_draw: class quota unreachable");
    Sample s = gen.generate(task, derive_seed(stream_seed, i));
    auto& n = have[static_cast<std::size_t>(s.label)];
    if (n == shots) continue;
    ++n;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace detail

/// Class-balanced train and dev sets (shots_per_class each per class) and an
/// i.i.d. test set. The three parts draw from distinct seed streams.
inline FewShotSplit make_fewshot_split(Task task, std::size_t shots_per_class,
                                       std::size_t test_size, std::uint64_t seed,
                                       const DataConfig& cfg = {}) {
  if (shots_per_class < 1) throw InputError("make_fewshot_split: shots_per_class must be >= 1");
  const SyntheticGenerator gen(cfg);
  FewShotSplit split;
  split.task = task;
  split.seed = seed;
  split.shots_per_class = shots_per_class;
  split.train = detail::balanced_draw(gen, task, derive_seed(seed, "train"), shots_per_class);
  split.dev = detail::balanced_draw(gen, task, derive_seed(seed, "dev"), shots_per_class);
  const std::uint64_t test_stream = derive_seed(seed, "test");
  for (std::size_t i = 0; i < test_size; ++i) split.test.push_back(gen.generate(task, derive_seed(test_stream, i)));
  return split;
}

inline void apply_template(FewShotSplit& split, const PromptTemplate& tmpl,
                           std::size_t max_text_len) {
  for (auto* part : {&split.train, &split.dev, &split.test})
    for (Sample& s : *part) s = apply_template(std::move(s), tmpl, max_text_len);
}

// ---------------------------------------------------------------------------
// Line-delimited export for reproducibility audits.

namespace detail {

inline constexpr char kBase64Alphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  for (std::size_t i = 0; i < bytes.size(); i += 3) {
    std::uint32_t chunk = static_cast<std::uint32_t>(bytes[i]) << 16;
    if (i + 1 < bytes.size()) chunk |= static_cast<std::uint32_t>(bytes[i + 1]) << 8;
    if (i + 2 < bytes.size()) chunk |= bytes[i + 2];
    out += kBase64Alphabet[(chunk >> 18) & 63];
    out += kBase64Alphabet[(chunk >> 12) & 63];
    out += i + 1 < bytes.size() ? kBase64Alphabet[(chunk >> 6) & 63] : '=';
    out += i + 2 < bytes.size() ? kBase64Alphabet[chunk & 63] : '=';
  }
  return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& text) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (text.size() % 4 != 0) throw FormatError("base64: length not a multiple of 4");
  std::vector<std::uint8_t> out;
  for (std::size_t i = 0; i < text.size(); i += 4) {
    std::uint32_t chunk = 0;
    int pad = 0;
    for (int j = 0; j < 4; ++j) {
      const char c = text[i + static_cast<std::size_t>(j)];
      int v = 0;
      if (c == '=') {
        ++pad;
      } else if ((v = value(c)) < 0 || pad > 0) {
        throw FormatError("base64: invalid character");
      }
      chunk = (chunk << 6) | static_cast<std::uint32_t>(v);
    }
    out.push_back(static_cast<std::uint8_t>(chunk >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>(chunk >> 8));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(chunk));
  }
  return out;
}

inline const char* polarity_name(Polarity p) { return p == Polarity::kPos ? "POS" : "NEG"; }

inline Polarity parse_polarity(const std::string& s) {
  if (s == "POS") return Polarity::kPos;
  if (s == "NEG") return Polarity::kNeg;
  throw FormatError("unknown polarity '" + s + "'");
}

}  // namespace detail

inline nlohmann::json sample_to_json(const Sample& s, const std::string& part) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(s.patches.numel() * 8);
  for (double v : s.patches.data()) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
  }
  return {{"part", part},
          {"seed", s.meta.seed},
          {"task", to_string(s.task)},
          {"image_polarity", detail::polarity_name(s.meta.image_polarity)},
          {"text_polarity", detail::polarity_name(s.meta.text_polarity)},
          {"label", s.label},
          {"tokens", s.tokens},
          {"patch_shape", s.patches.shape()},
          {"patches", detail::base64_encode(bytes)}};
}

inline Sample sample_from_json(const nlohmann::json& j) {
  Sample s;
  s.task = parse_task(j.at("task").get<std::string>());
  s.meta.seed = j.at("seed").get<std::uint64_t>();
  s.meta.image_polarity = detail::parse_polarity(j.at("image_polarity").get<std::string>());
  s.meta.text_polarity = detail::parse_polarity(j.at("text_polarity").get<std::string>());
  s.label = j.at("label").get<int>();
  s.tokens = j.at("tokens").get<std::vector<int>>();
  const auto shape = j.at("patch_shape").get<Shape>();
  const auto bytes = detail::base64_decode(j.at("patches").get<std::string>());
  if (bytes.size() != shape_numel(shape) * 8) throw FormatError("patch payload size mismatch");
  std::vector<double> values(shape_numel(shape));
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[i * 8 + static_cast<std::size_t>(b)]) << (8 * b);
    values[i] = std::bit_cast<double>(bits);
  }
  s.patches = Tensor(shape, std::move(values));
  if (s.label != label_for(s.task, s.meta.image_polarity, s.meta.text_polarity)) {
    throw FormatError("record label contradicts its polarities");
  }
  return s;
}

/// One JSON record per line: {part, seed, task, polarities, label, tokens,
/// patch_shape, patches (base64 of little-endian doubles)}.
inline void export_split(const FewShotSplit& split, std::ostream& os) {
  const std::pair<const char*, const std::vector<Sample>*> parts[] = {
      {"train", &split.train}, {"dev", &split.dev}, {"test", &split.test}};
  for (const auto& [name, samples] : parts)
    for (const Sample& s : *samples) os << sample_to_json(s, name).dump() << '\n';
}

inline FewShotSplit import_split(std::istream& is) {
  FewShotSplit split;
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    Sample s = sample_from_json(j);
    if (first) split.task = s.task;
    first = false;
    const auto part = j.at("part").get<std::string>();
    if (part == "train") {
      split.train.push_back(std::move(s));
    } else if (part == "dev") {
      split.dev.push_back(std::move(s));
    } else if (part == "test") {
      split.test.push_back(std::move(s));
    } else {
      throw FormatError("unknown split part '" + part + "'");
    }
  }
  return split;
}

}  // namespace mopebaf
