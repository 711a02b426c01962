#pragma once

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mopebaf/errors.hpp"

namespace mopebaf {

struct ClassCounts {
  long tp = 0;
  long fp = 0;
  long fn = 0;
  long tn = 0;
};

/// One-vs-rest counts for every class.
struct ConfusionCounts {
  std::vector<ClassCounts> per_class;
  long n_total = 0;

  long correct() const {
    long c = 0;
    for (const auto& k : per_class) c += k.tp;
    return c;
  }
  long support(std::size_t k) const { return per_class[k].tp + per_class[k].fn; }
};

namespace detail {

inline void check_lengths(std::span<const int> preds, std::span<const int> golds,
                          const char* op) {
  if (preds.size() != golds.size()) {
    throw InputError(std::string(op) + ": " + std::to_string(preds.size()) + " predictions vs " +
                     std::to_string(golds.size()) + " gold labels");
  }
  if (preds.empty()) throw InputError(std::string(op) + ": no predictions");
}

// x / y with 0/0 := 0.
inline double safe_div(double x, double y) { return y == 0.0 ? 0.0 : x / y; }

inline double f1_from(double p, double r) { return safe_div(2.0 * p * r, p + r); }

}  // namespace detail

inline ConfusionCounts confusion_counts(std::span<const int> preds, std::span<const int> golds,
                                        int n_classes) {
  detail::check_lengths(preds, golds, "confusion_counts");
  ConfusionCounts c;
  c.per_class.resize(static_cast<std::size_t>(n_classes));
  c.n_total = static_cast<long>(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int p = preds[i], g = golds[i];
    if (p < 0 || p >= n_classes || g < 0 || g >= n_classes) {
      throw InputError("confusion_counts: label out of range [0," + std::to_string(n_classes) +
                       ") at index " + std::to_string(i));
    }
    for (int k = 0; k < n_classes; ++k) {
      auto& cc = c.per_class[static_cast<std::size_t>(k)];
      const bool pk = p == k, gk = g == k;
      if (pk && gk) ++cc.tp;
      else if (pk) ++cc.fp;
      else if (gk) ++cc.fn;
      else ++cc.tn;
    }
  }
  return c;
}

struct BinaryMetrics {
  double accuracy = 0;
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

inline BinaryMetrics binary_metrics(std::span<const int> preds, std::span<const int> golds,
                                    int positive_class = 1) {
  detail::check_lengths(preds, golds, "binary_metrics");
  long tp = 0, fp = 0, fn = 0, correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const bool p = preds[i] == positive_class, g = golds[i] == positive_class;
    tp += p && g;
    fp += p && !g;
    fn += !p && g;
    correct += preds[i] == golds[i];
  }
  BinaryMetrics m;
  m.accuracy = static_cast<double>(correct) / static_cast<double>(preds.size());
  m.precision = detail::safe_div(static_cast<double>(tp), static_cast<double>(tp + fp));
  m.recall = detail::safe_div(static_cast<double>(tp), static_cast<double>(tp + fn));
  m.f1 = detail::f1_from(m.precision, m.recall);
  return m;
}

struct MulticlassMetrics {
  double accuracy = 0;
  double macro_f1 = 0;
  double weighted_f1 = 0;
  std::vector<double> per_class_f1;
};

inline MulticlassMetrics multiclass_metrics(std::span<const int> preds, std::span<const int> golds,
                                            int n_classes) {
  const ConfusionCounts c = confusion_counts(preds, golds, n_classes);
  MulticlassMetrics m;
  m.accuracy = static_cast<double>(c.correct()) / static_cast<double>(c.n_total);
  double weighted = 0.0;
  for (std::size_t k = 0; k < c.per_class.size(); ++k) {
    const auto& cc = c.per_class[k];
    const double p = detail::safe_div(static_cast<double>(cc.tp), static_cast<double>(cc.tp + cc.fp));
    const double r = detail::safe_div(static_cast<double>(cc.tp), static_cast<double>(cc.tp + cc.fn));
    const double f1 = detail::f1_from(p, r);
    m.per_class_f1.push_back(f1);
    m.macro_f1 += f1;
    weighted += static_cast<double>(c.support(k)) * f1;
  }
  m.macro_f1 /= static_cast<double>(n_classes);
  m.weighted_f1 = weighted / static_cast<double>(c.n_total);
  return m;
}

/// Flat metric map used for reporting and aggregation. Binary tasks report
/// accuracy/precision/recall/f1 (sarcasm positive) plus macro_f1; 3-way
/// tasks report accuracy/macro_f1/weighted_f1.
using MetricMap = std::map<std::string, double>;

inline MetricMap task_metrics(std::span<const int> preds, std::span<const int> golds,
                              int n_classes) {
  MetricMap out;
  const MulticlassMetrics mc = multiclass_metrics(preds, golds, n_classes);
  if (n_classes == 2) {
    const BinaryMetrics b = binary_metrics(preds, golds, 1);
    out["accuracy"] = b.accuracy;
    out["precision"] = b.precision;
    out["recall"] = b.recall;
    out["f1"] = b.f1;
    out["macro_f1"] = mc.macro_f1;
  } else {
    out["accuracy"] = mc.accuracy;
    out["macro_f1"] = mc.macro_f1;
    out["weighted_f1"] = mc.weighted_f1;
  }
  return out;
}

/// Dev-selection score: positive-class F1 for binary tasks, macro-F1 otherwise.
inline double selection_f1(const MetricMap& m) {
  auto it = m.find("f1");
  return it != m.end() ? it->second : m.at("macro_f1");
}

struct Aggregate {
  double mean = 0;
  double sd = 0;
};

/// Mean and population standard deviation per metric.
inline std::map<std::string, Aggregate> aggregate_runs(std::span<const MetricMap> runs) {
  if (runs.empty()) throw InputError("aggregate_runs: no runs");
  std::map<std::string, Aggregate> out;
  for (const MetricMap& run : runs) {
    if (run.size() != runs.front().size()) throw InputError("aggregate_runs: runs disagree on metric keys");
    for (const auto& [key, _] : run) {
      if (!runs.front().contains(key)) throw InputError("aggregate_runs: unexpected metric '" + key + "'");
    }
  }
  const double n = static_cast<double>(runs.size());
  for (const auto& [key, _] : runs.front()) {
    double sum = 0.0;
    for (const MetricMap& run : runs) sum += run.at(key);
    const double mean = sum / n;
    double ss = 0.0;
    for (const MetricMap& run : runs) ss += (run.at(key) - mean) * (run.at(key) - mean);
    out[key] = {mean, std::sqrt(ss / n)};
  }
  return out;
}

inline nlohmann::json metrics_json(const MetricMap& m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : m) j[k] = v;
  return j;
}

inline nlohmann::json aggregate_json(const std::map<std::string, Aggregate>& agg, std::size_t runs) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, a] : agg) j[k] = {{"mean", a.mean}, {"sd", a.sd}};
  j["runs"] = runs;
  return j;
}

/// "62.00 (2.00)": percentage mean with sd in parentheses.
inline std::string mean_sd_percent(const Aggregate& a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f (%.2f)", 100.0 * a.mean, 100.0 * a.sd);
  return buf;
}

}  // namespace mopebaf
