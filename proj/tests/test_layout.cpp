#include <gtest/gtest.h>

#include "mopebaf/layout.hpp"

namespace mopebaf {
namespace {

TEST(BuildLayout, LargeConfigurationSpans) {
  const SequenceLayout l = build_layout(10, 10, 196, 40);
  EXPECT_EQ(l.total(), 256u);
  EXPECT_EQ(l.txt, (Span{216, 256}));
  EXPECT_EQ(l.img, (Span{20, 216}));
}

TEST(BuildLayout, NoPrompts) {
  const SequenceLayout l = build_layout(0, 0, 4, 4);
  EXPECT_EQ(l.vp, (Span{0, 0}));
  EXPECT_EQ(l.lp, (Span{0, 0}));
  EXPECT_EQ(l.img, (Span{0, 4}));
  EXPECT_EQ(l.txt, (Span{4, 8}));
  EXPECT_EQ(l.cls_index(), 4u);
}

TEST(BuildLayout, UnequalPromptsRejectedWhenFusing) {
  EXPECT_THROW(build_layout(10, 12, 4, 4, 2), ConfigError);
  EXPECT_NO_THROW(build_layout(10, 12, 4, 4, 1));
}

TEST(BuildLayout, NegativeLengthIsInputError) {
  EXPECT_THROW(build_layout(-1, 0, 4, 4), InputError);
  EXPECT_THROW(build_layout(0, 0, 4, 0), InputError);
}

TEST(BuildLayout, MaskIndexMustLieInText) {
  const SequenceLayout l = build_layout(1, 1, 2, 3);
  EXPECT_EQ(with_mask_index(l, 5).mask_index, 5u);
  EXPECT_THROW(with_mask_index(l, 3), InputError);
}

TEST(Stage1Mask, SmallestFullLayout) {
  const BoolMatrix m = build_stage1_mask(build_layout(1, 1, 1, 1));
  const int expected[4][4] = {{1, 0, 1, 0}, {0, 1, 0, 1}, {1, 0, 1, 1}, {0, 1, 1, 1}};
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(m(r, c), expected[r][c] == 1) << r << "," << c;
}

TEST(Stage1Mask, NoPromptsIsAllTrue) {
  const BoolMatrix m = build_stage1_mask(build_layout(0, 0, 3, 5));
  EXPECT_EQ(m, build_full_mask(8));
}

TEST(Stage1Mask, SegmentPairRules) {
  const SequenceLayout l = build_layout(2, 3, 4, 5);
  const BoolMatrix m = build_stage1_mask(l);
  auto block_is = [&](const Span& rows, const Span& cols, bool v) {
    for (std::size_t r = rows.begin; r < rows.end; ++r)
      for (std::size_t c = cols.begin; c < cols.end; ++c)
        if (m(r, c) != v) return false;
    return true;
  };
  EXPECT_TRUE(block_is(l.img, l.txt, true));
  EXPECT_TRUE(block_is(l.txt, l.img, true));
  EXPECT_TRUE(block_is(l.vp, l.txt, false));
  EXPECT_TRUE(block_is(l.vp, l.lp, false));
  EXPECT_TRUE(block_is(l.lp, l.img, false));
  EXPECT_TRUE(block_is(l.lp, l.vp, false));
  EXPECT_TRUE(block_is(l.img, l.lp, false));
  EXPECT_TRUE(block_is(l.txt, l.vp, false));
  EXPECT_TRUE(block_is(l.vp, l.vp, true));
  EXPECT_TRUE(block_is(l.vp, l.img, true));
  EXPECT_TRUE(block_is(l.lp, l.txt, true));
  EXPECT_TRUE(block_is(l.img, l.vp, true));
  EXPECT_TRUE(block_is(l.txt, l.lp, true));
}

TEST(Stage2Mask, AllTrue) {
  EXPECT_EQ(build_stage2_mask(1, 1, 1), build_full_mask(3));
  EXPECT_EQ(build_stage2_mask(0, 2, 2), build_full_mask(4));
  EXPECT_THROW(build_stage2_mask(-1, 2, 2), InputError);
}

TEST(PartitionBlocks, TwoBlocksOverTwentyOneLayers) {
  const BlockLayout b = partition_blocks(21, 2);
  EXPECT_EQ(b.block_sizes, (std::vector<std::size_t>{11, 10}));
  EXPECT_EQ(b.fusion_boundaries, (std::vector<std::size_t>{11}));
}

TEST(PartitionBlocks, SixBlocks) {
  EXPECT_EQ(partition_blocks(21, 6).block_sizes, (std::vector<std::size_t>{4, 4, 4, 3, 3, 3}));
  EXPECT_EQ(partition_blocks(21, 6).block_begin(3), 12u);
}

TEST(PartitionBlocks, SingleBlockHasNoBoundary) {
  const BlockLayout b = partition_blocks(21, 1);
  EXPECT_EQ(b.block_sizes, (std::vector<std::size_t>{21}));
  EXPECT_TRUE(b.fusion_boundaries.empty());
}

TEST(PartitionBlocks, OutOfRangeIsConfigError) {
  EXPECT_THROW(partition_blocks(6, 0), ConfigError);
  EXPECT_THROW(partition_blocks(6, 7), ConfigError);
}

TEST(SegmentLabel, Names) {
  EXPECT_STREQ(segment_label(Segment::kVPrompt), "VP");
  EXPECT_STREQ(segment_label(Segment::kText), "TXT");
}

}  // namespace
}  // namespace mopebaf
