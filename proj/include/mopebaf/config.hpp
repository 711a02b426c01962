#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "mopebaf/data.hpp"
#include "mopebaf/errors.hpp"
#include "mopebaf/model.hpp"
#include "mopebaf/training.hpp"

namespace mopebaf {

/// Which split is generated and how.
struct DataSettings {
  Task task = Task::kSarcasm2;
  std::size_t shots_per_class = 16;
  std::size_t test_size = 512;
  std::uint64_t data_seed = 0;
  double majority_fraction = 0.75;
  double noise_sd = 0.1;
  std::size_t distractor_symbols = 8;
  std::uint64_t prototype_seed = 0;

  friend bool operator==(const DataSettings&, const DataSettings&) = default;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataSettings data;
  TemplateMode template_mode = TemplateMode::kNone;
  std::string out_dir = "out";

  friend bool operator==(const RunConfig&, const RunConfig&) = default;

  DataConfig data_config() const {
    DataConfig d;
    d.n_patches = model.n_patches;
    d.patch_feature_dim = model.patch_feature_dim;
    d.text_len = model.max_text_len;
    d.vocab_size = model.vocab_size;
    d.majority_fraction = data.majority_fraction;
    d.noise_sd = data.noise_sd;
    d.distractor_symbols = data.distractor_symbols;
    d.prototype_seed = data.prototype_seed;
    return d;
  }

  PromptTemplate prompt_template() const { return PromptTemplate::for_task(data.task, template_mode); }

  /// Sets the model, training and data seeds to one value.
  void set_seed(std::uint64_t s) {
    model.seed = s;
    train.seed = s;
    data.data_seed = s;
  }

  void validate() const {
    model.validate();
    train.validate();
    data_config().validate();
    if (model.n_classes != static_cast<std::size_t>(num_classes(data.task))) {
      throw ConfigError("model.n_classes: " + std::to_string(model.n_classes) + " but task " +
                        to_string(data.task) + " has " + std::to_string(num_classes(data.task)));
    }
    if (data.shots_per_class < 1) throw ConfigError("data.shots_per_class: must be at least 1");
    const PromptTemplate t = prompt_template();
    if (model.head == HeadType::kLmVerbalizer && !t.has_mask()) {
      throw ConfigError("model.head: lm_verbalizer needs template = manual or ptuning, got " +
                        to_string(template_mode));
    }
    if (t.has_mask() && t.mask_position() + 2 > model.max_text_len) {
      throw ConfigError("data.template: " + to_string(template_mode) + " template needs max_text_len >= " +
                        std::to_string(t.mask_position() + 2));
    }
  }
};

/// Builds the templated few-shot split described by the config.
inline FewShotSplit make_split(const RunConfig& rc) {
  FewShotSplit s = make_fewshot_split(rc.data.task, rc.data.shots_per_class, rc.data.test_size,
                                      rc.data.data_seed, rc.data_config());
  apply_template(s, rc.prompt_template(), rc.model.max_text_len);
  return s;
}

inline std::string to_string(HeadType h) {
  return h == HeadType::kClassification ? "classification" : "lm_verbalizer";
}
inline std::string to_string(PromptStyle s) { return s == PromptStyle::kMoPE ? "mope" : "soft"; }

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Field table shared by the reader and the writer so both always agree.
struct Field {
  std::function<void(const std::string&, const std::string&)> read;  // (qualified key, text)
  std::function<std::string()> write;
};

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* b = text.data();
  const char* e = b + text.size();
  const auto [ptr, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || ptr != e) {
    throw ConfigError(key + ": cannot parse '" + text + "' as a number");
  }
  return v;
}

using FieldTable = std::map<std::string, std::map<std::string, Field>>;

inline FieldTable field_table(RunConfig& c) {
  FieldTable t;
  auto size = [](std::size_t& v) {
    return Field{[&v](const std::string& k, const std::string& s) { v = parse_number<std::size_t>(k, s); },
                 [&v] { return std::to_string(v); }};
  };
  auto u64 = [](std::uint64_t& v) {
    return Field{[&v](const std::string& k, const std::string& s) { v = parse_number<std::uint64_t>(k, s); },
                 [&v] { return std::to_string(v); }};
  };
  auto real = [](double& v) {
    return Field{[&v](const std::string& k, const std::string& s) { v = parse_number<double>(k, s); },
                 [&v] { return format_double(v); }};
  };
  auto& m = t["model"];
  m["hidden_dim"] = size(c.model.hidden_dim);
  m["n_heads"] = size(c.model.n_heads);
  m["ffn_dim"] = size(c.model.ffn_dim);
  m["stage1_layers"] = size(c.model.stage1_layers);
  m["stage2_layers"] = size(c.model.stage2_layers);
  m["vp_len"] = size(c.model.vp_len);
  m["lp_len"] = size(c.model.lp_len);
  m["vlp_len"] = size(c.model.vlp_len);
  m["block_count"] = size(c.model.block_count);
  m["vocab_size"] = size(c.model.vocab_size);
  m["patch_feature_dim"] = size(c.model.patch_feature_dim);
  m["n_patches"] = size(c.model.n_patches);
  m["max_text_len"] = size(c.model.max_text_len);
  m["seed"] = u64(c.model.seed);
  m["head"] = Field{[&c](const std::string& k, const std::string& s) {
                      if (s == "classification") c.model.head = HeadType::kClassification;
                      else if (s == "lm_verbalizer") c.model.head = HeadType::kLmVerbalizer;
                      else throw ConfigError(k + ": expected classification or lm_verbalizer, got '" + s + "'");
                    },
                    [&c] { return to_string(c.model.head); }};
  m["prompt_style"] = Field{[&c](const std::string& k, const std::string& s) {
                              if (s == "mope") c.model.prompt_style = PromptStyle::kMoPE;
                              else if (s == "soft") c.model.prompt_style = PromptStyle::kSoft;
                              else throw ConfigError(k + ": expected mope or soft, got '" + s + "'");
                            },
                            [&c] { return to_string(c.model.prompt_style); }};

  auto& tr = t["train"];
  tr["peak_lr"] = real(c.train.peak_lr);
  tr["beta1"] = real(c.train.beta1);
  tr["beta2"] = real(c.train.beta2);
  tr["weight_decay"] = real(c.train.weight_decay);
  tr["total_steps"] = size(c.train.total_steps);
  tr["warmup_frac"] = real(c.train.warmup_frac);
  tr["batch_size"] = size(c.train.batch_size);
  tr["adam_eps"] = real(c.train.adam_eps);
  tr["seed"] = u64(c.train.seed);

  auto& d = t["data"];
  d["task"] = Field{[&c](const std::string& k, const std::string& s) {
                      try {
                        c.data.task = parse_task(s);
                      } catch (const ConfigError& e) {
                        throw ConfigError(k + ": " + e.what());
                      }
                      c.model.n_classes = static_cast<std::size_t>(num_classes(c.data.task));
                    },
                    [&c] { return to_string(c.data.task); }};
  d["shots_per_class"] = size(c.data.shots_per_class);
  d["test_size"] = size(c.data.test_size);
  d["seed"] = u64(c.data.data_seed);
  d["majority_fraction"] = real(c.data.majority_fraction);
  d["noise_sd"] = real(c.data.noise_sd);
  d["distractor_symbols"] = size(c.data.distractor_symbols);
  d["prototype_seed"] = u64(c.data.prototype_seed);
  d["template"] = Field{[&c](const std::string& k, const std::string& s) {
                          try {
                            c.template_mode = parse_template_mode(s);
                          } catch (const ConfigError& e) {
                            throw ConfigError(k + ": " + e.what());
                          }
                        },
                        [&c] { return to_string(c.template_mode); }};

  auto& r = t["run"];
  r["out_dir"] = Field{[&c](const std::string&, const std::string& s) { c.out_dir = s; },
                       [&c] { return c.out_dir; }};
  return t;
}

}  // namespace detail

/// Parses an INI text with sections [model], [train], [data] and [run].
/// Missing keys keep their defaults; unknown sections or keys are errors.
inline RunConfig parse_config(std::istream& is) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::ini_parser::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  RunConfig c;
  auto table = detail::field_table(c);
  for (const auto& [section, keys] : tree) {
    if (!keys.data().empty()) throw ConfigError("config: key '" + section + "' outside any section");
    auto sec = table.find(section);
    if (sec == table.end()) throw ConfigError("config: unknown section [" + section + "]");
    for (const auto& [key, value] : keys) {
      auto f = sec->second.find(key);
      if (f == sec->second.end()) throw ConfigError("config: unknown key " + section + "." + key);
      f->second.read(section + "." + key, value.data());
    }
  }
  c.validate();
  return c;
}

inline RunConfig parse_config_string(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is);
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(in);
}

/// Writes every field; parse_config(write_config(c)) == c.
inline void write_config(std::ostream& os, const RunConfig& c) {
  RunConfig copy = c;
  auto table = detail::field_table(copy);
  bool first = true;
  for (const char* section : {"model", "train", "data", "run"}) {
    os << (first ? "" : "\n") << '[' << section << "]\n";
    first = false;
    for (const auto& [key, field] : table.at(section)) os << key << " = " << field.write() << '\n';
  }
}

inline std::string config_to_string(const RunConfig& c) {
  std::ostringstream os;
  write_config(os, c);
  return os.str();
}

}  // namespace mopebaf
