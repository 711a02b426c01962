#pragma once

#include <array>
#include <string>
#include <vector>

#include "mopebaf/errors.hpp"

namespace mopebaf {

enum class Task { kSarcasm2, kSentiment3 };

inline int num_classes(Task task) { return task == Task::kSarcasm2 ? 2 : 3; }

inline std::string to_string(Task task) {
  return task == Task::kSarcasm2 ? "sarcasm2" : "sentiment3";
}

inline Task parse_task(const std::string& s) {
  if (s == "sarcasm2") return Task::kSarcasm2;
  if (s == "sentiment3") return Task::kSentiment3;
  throw ConfigError("unknown task '" + s + "' (expected sarcasm2 or sentiment3)");
}

// Class ids.
namespace label {
inline constexpr int kNonSarcasm = 0;
inline constexpr int kSarcasm = 1;
inline constexpr int kNegative = 0;
inline constexpr int kNeutral = 1;
inline constexpr int kPositive = 2;
}  // namespace label

/// Toy vocabulary. Ids below kFirstDistractor are reserved for special,
/// polarity, template and label words; the rest are filler tokens.
namespace vocab {
inline constexpr int kPad = 0;
inline constexpr int kCls = 1;
inline constexpr int kMask = 2;
inline constexpr int kPosTok = 3;
inline constexpr int kNegTok = 4;
// "The image-text pair is [MASK]."
inline constexpr int kThe = 5;
inline constexpr int kImageText = 6;
inline constexpr int kPair = 7;
inline constexpr int kIs = 8;
// "Sentiment of the text: [MASK]."
inline constexpr int kSentiment = 9;
inline constexpr int kOf = 10;
inline constexpr int kText = 11;
inline constexpr int kColon = 12;
// label words
inline constexpr int kWordNonSarcastic = 13;
inline constexpr int kWordSarcastic = 14;
inline constexpr int kWordNegative = 15;
inline constexpr int kWordNeutral = 16;
inline constexpr int kWordPositive = 17;

inline constexpr int kFirstDistractor = 18;
inline constexpr int kMinVocabSize = kFirstDistractor + 2;

/// Label words indexed by class id.
inline std::vector<int> verbalizer(int n_classes) {
  if (n_classes == 2) return {kWordNonSarcastic, kWordSarcastic};
  if (n_classes == 3) return {kWordNegative, kWordNeutral, kWordPositive};
  throw ConfigError("no verbalizer for " + std::to_string(n_classes) + " classes");
}

/// Template words inserted between [CLS] and [MASK].
inline std::array<int, 4> template_words(Task task) {
  if (task == Task::kSarcasm2) return {kThe, kImageText, kPair, kIs};
  return {kSentiment, kOf, kThe, kText};
}
}  // namespace vocab

}  // namespace mopebaf
