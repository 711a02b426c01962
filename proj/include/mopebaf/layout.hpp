#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "mopebaf/bool_matrix.hpp"
#include "mopebaf/errors.hpp"

namespace mopebaf {

/// Half-open index range [begin, end).
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool empty() const { return begin == end; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
  friend bool operator==(const Span&, const Span&) = default;
};

enum class Segment { kVPrompt, kLPrompt, kImage, kText };

/// Positions of the four segments of one packed sequence, always in the
/// order [V-Prompt | L-Prompt | image patches | text tokens]. The text
/// segment starts with [CLS].
struct SequenceLayout {
  Span vp;
  Span lp;
  Span img;
  Span txt;
  std::optional<std::size_t> mask_index;

  std::size_t total() const { return txt.end; }

  Segment segment_of(std::size_t i) const {
    if (vp.contains(i)) return Segment::kVPrompt;
    if (lp.contains(i)) return Segment::kLPrompt;
    if (img.contains(i)) return Segment::kImage;
    return Segment::kText;
  }
  std::size_t cls_index() const { return txt.begin; }

  friend bool operator==(const SequenceLayout&, const SequenceLayout&) = default;
};

inline SequenceLayout build_layout(long vp_len, long lp_len, long n_patches, long n_text,
                                   long block_count = 1) {
  if (vp_len < 0 || lp_len < 0 || n_patches < 0 || n_text < 0) {
    throw InputError("build_layout: negative segment length");
  }
  if (n_text < 1) throw InputError("build_layout: text segment must hold at least [CLS]");
  if (block_count > 1 && vp_len != lp_len) {
    throw ConfigError("build_layout: V-Prompt length " + std::to_string(vp_len) +
                      " != L-Prompt length " + std::to_string(lp_len) +
                      " but block fusion needs equal lengths");
  }
  SequenceLayout l;
  std::size_t at = 0;
  auto next = [&at](long len) {
    Span s{at, at + static_cast<std::size_t>(len)};
    at = s.end;
    return s;
  };
  l.vp = next(vp_len);
  l.lp = next(lp_len);
  l.img = next(n_patches);
  l.txt = next(n_text);
  return l;
}

/// Records the [MASK] position (an index into the packed sequence).
inline SequenceLayout with_mask_index(SequenceLayout layout, std::size_t index) {
  if (!layout.txt.contains(index)) {
    throw InputError("mask index " + std::to_string(index) + " outside the text segment");
  }
  layout.mask_index = index;
  return layout;
}

/// Restricted receptive fields of the first (modality-expert) stage:
///   V-Prompt rows see V-Prompt and image;
///   L-Prompt rows see L-Prompt and text;
///   image rows see V-Prompt, image and text;
///   text rows see L-Prompt, image and text.
inline BoolMatrix build_stage1_mask(const SequenceLayout& layout) {
  const std::size_t n = layout.total();
  BoolMatrix mask(n, n);
  auto allowed = [](Segment row, Segment col) {
    switch (row) {
      case Segment::kVPrompt: return col == Segment::kVPrompt || col == Segment::kImage;
      case Segment::kLPrompt: return col == Segment::kLPrompt || col == Segment::kText;
      case Segment::kImage: return col != Segment::kLPrompt;
      case Segment::kText: return col != Segment::kVPrompt;
    }
    return false;
  };
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c)
      mask.set(r, c, allowed(layout.segment_of(r), layout.segment_of(c)));
  return mask;
}

/// Unrestricted attention over n positions.
inline BoolMatrix build_full_mask(std::size_t n) { return BoolMatrix(n, n, true); }

/// Second-stage mask over [VL-Prompt | image | text]: full fusion.
inline BoolMatrix build_stage2_mask(long vlp_len, long n_patches, long n_text) {
  if (vlp_len < 0 || n_patches < 0 || n_text < 0) {
    throw InputError("build_stage2_mask: negative segment length");
  }
  return build_full_mask(static_cast<std::size_t>(vlp_len + n_patches + n_text));
}

/// Stage-1 layers grouped into contiguous blocks; fusion happens at the
/// first layer of every block after the first.
struct BlockLayout {
  std::size_t stage1_layers = 0;
  std::vector<std::size_t> block_sizes;
  std::vector<std::size_t> fusion_boundaries;

  std::size_t block_count() const { return block_sizes.size(); }
  /// First layer index of block b.
  std::size_t block_begin(std::size_t b) const {
    std::size_t at = 0;
    for (std::size_t i = 0; i < b; ++i) at += block_sizes[i];
    return at;
  }
  friend bool operator==(const BlockLayout&, const BlockLayout&) = default;
};

/// Splits layers into blocks whose sizes differ by at most one, with the
/// surplus layers going to the bottom (earliest) blocks.
inline BlockLayout partition_blocks(long stage1_layers, long block_count) {
  if (block_count < 1 || block_count > stage1_layers) {
    throw ConfigError("partition_blocks: block count " + std::to_string(block_count) +
                      " outside [1, " + std::to_string(stage1_layers) + "]");
  }
  BlockLayout out;
  out.stage1_layers = static_cast<std::size_t>(stage1_layers);
  const std::size_t n = out.stage1_layers, k = static_cast<std::size_t>(block_count);
  const std::size_t base = n / k, extra = n % k;
  std::size_t at = 0;
  for (std::size_t b = 0; b < k; ++b) {
    const std::size_t size = base + (b < extra ? 1 : 0);
    if (b > 0) out.fusion_boundaries.push_back(at);
    out.block_sizes.push_back(size);
    at += size;
  }
  return out;
}

inline const char* segment_label(Segment s) {
  switch (s) {
    case Segment::kVPrompt: return "VP";
    case Segment::kLPrompt: return "LP";
    case Segment::kImage: return "IMG";
    case Segment::kText: return "TXT";
  }
  return "?";
}

}  // namespace mopebaf
