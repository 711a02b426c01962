#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "mopebaf/tensor.hpp"
#include "mopebaf/vocab.hpp"

namespace mopebaf {

enum class Polarity { kPos = 0, kNeg = 1 };

struct SampleMeta {
  Polarity image_polarity = Polarity::kPos;
  Polarity text_polarity = Polarity::kPos;
  std::uint64_t seed = 0;
};

/// One image-text pair: patch features, token ids (starting with [CLS])
/// and the class label.
struct Sample {
  Task task = Task::kSarcasm2;
  Tensor patches;  // [n_patches, patch_feature_dim]
  std::vector<int> tokens;
  int label = 0;
  SampleMeta meta;

  /// Position of [MASK] within `tokens`, if the text carries one.
  std::optional<std::size_t> mask_position() const {
    for (std::size_t i = 0; i < tokens.size(); ++i)
      if (tokens[i] == vocab::kMask) return i;
    return std::nullopt;
  }
};

}  // namespace mopebaf
