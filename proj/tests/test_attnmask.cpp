#include <random>

#include <gtest/gtest.h>

#include "mmgen/attnmask.hpp"
#include "oracles.hpp"

namespace {

using namespace mmgen;

void expect_matches_rules(const std::vector<Segment>& segments, const AttentionMask& mask) {
    const auto ref = oracle::rule_mask(segments);
    ASSERT_EQ(mask.size(), static_cast<int>(ref.size()));
    for (int i = 0; i < mask.size(); ++i)
        for (int j = 0; j < mask.size(); ++j)
            ASSERT_EQ(mask.allowed(i, j), ref[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)])
                << format_layout(segments) << " at (" << i << "," << j << ")";
}

TEST(BuildMask, PureTextIsLowerTriangular) {
    const auto m = build_mask(parse_layout("text:4"));
    EXPECT_EQ(m, AttentionMask::lower_triangular(4));
    EXPECT_EQ(m.to_text(), "1000\n1100\n1110\n1111\n");
}

TEST(BuildMask, GenImageLeavesAHole) {
    const auto m = build_mask(parse_layout("text:2,gen:3,text:1"));
    EXPECT_EQ(m.to_text(), "100000\n110000\n111110\n111110\n111110\n110001\n");
}

TEST(BuildMask, CondImageIsFullyVisibleInside) {
    const auto m = build_mask(parse_layout("text:1,vae:2,text:1"));
    EXPECT_EQ(m.to_text(), "1000\n1110\n1110\n1111\n");
}

TEST(BuildMask, LoneGenImageIsAllTrue) {
    EXPECT_EQ(build_mask(parse_layout("gen:2")).to_text(), "11\n11\n");
}

TEST(BuildMask, VaeAndVitHalvesAreSeparateBlocks) {
    // Full inside each half, causal across halves.
    const auto m = build_mask(parse_layout("vae:2,vit:2"));
    EXPECT_EQ(m.to_text(), "1100\n1100\n1111\n1111\n");
}

TEST(BuildMask, TextOnlyLayoutsAreLowerTriangularWhateverTheRunSplit) {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const auto layout = oracle::random_text_layout(rng, 70);
        EXPECT_EQ(build_mask(layout), AttentionMask::lower_triangular(total_tokens(layout)));
        EXPECT_EQ(oracle_mask(layout), AttentionMask::lower_triangular(total_tokens(layout)));
    }
}

TEST(BuildMask, TrainingAndInferenceShapesFromTheFigure) {
    // Training: text, gen, text, gen. Inference: the first image is now cond.
    const auto train = parse_layout("text:3,gen:2x2,text:2,gen:2x2,text:1");
    const auto infer = parse_layout("text:3,vae:2x2,vit:2x2,text:2,gen:2x2");
    expect_matches_rules(train, build_mask(train));
    expect_matches_rules(infer, build_mask(infer));
    EXPECT_EQ(build_mask(train), oracle_mask(train));
    EXPECT_EQ(build_mask(infer), oracle_mask(infer));
    EXPECT_FALSE(validate_inference_layout(infer).has_value());
    EXPECT_TRUE(validate_inference_layout(train).has_value());
}

TEST(BuildMask, EqualsOracleOnRandomLayouts) {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 200; ++trial) {
        const auto layout = oracle::random_layout(rng);
        const auto built = build_mask(layout);
        EXPECT_EQ(built, oracle_mask(layout)) << format_layout(layout);
        expect_matches_rules(layout, built);
    }
}

TEST(BuildMask, WordBoundaryLengths) {
    for (int n : {63, 64, 65, 127, 128, 129}) {
        const std::vector<Segment> layout{Segment::text(n / 3), Segment::image(SegmentKind::GenImage, Grid{1, n - n / 3 - 1}, 0),
                                          Segment::text(1)};
        EXPECT_EQ(build_mask(layout), oracle_mask(layout)) << n;
    }
}

class MaskProperties : public ::testing::TestWithParam<int> {};

TEST_P(MaskProperties, HoleCompletenessCausalityAndDiagonal) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(GetParam()));
    const auto layout = oracle::random_layout(rng);
    const auto m = build_mask(layout);
    const auto owner = oracle::owner_of(layout);
    for (int i = 0; i < m.size(); ++i) {
        EXPECT_TRUE(m.allowed(i, i));
        const auto& si = layout[static_cast<std::size_t>(owner[static_cast<std::size_t>(i)])];
        for (int j = 0; j < m.size(); ++j) {
            const bool same = owner[static_cast<std::size_t>(i)] == owner[static_cast<std::size_t>(j)];
            const auto& sj = layout[static_cast<std::size_t>(owner[static_cast<std::size_t>(j)])];
            if (sj.kind == SegmentKind::GenImage && !same) {
                EXPECT_FALSE(m.allowed(i, j));
            }
            if (same && is_image(si.kind)) {
                EXPECT_TRUE(m.allowed(i, j));
            }
            if (si.kind == SegmentKind::Text && m.allowed(i, j)) {
                EXPECT_LE(j, i);
            }
        }
    }
}

TEST_P(MaskProperties, DroppingTrailingSegmentsKeepsThePrefix) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(GetParam()) + 1000);
    auto layout = oracle::random_layout(rng);
    const auto full = build_mask(layout);
    while (layout.size() > 1) {
        layout.pop_back();
        const auto part = build_mask(layout);
        for (int i = 0; i < part.size(); ++i)
            for (int j = 0; j < part.size(); ++j) ASSERT_EQ(part.allowed(i, j), full.allowed(i, j));
    }
}

TEST_P(MaskProperties, IntervalFormMaterializesToTheSameMask) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(GetParam()) + 2000);
    const auto layout = oracle::random_layout(rng);
    const IntervalMask iv(layout);
    const auto m = build_mask(layout);
    EXPECT_EQ(iv.materialize(), m);
    for (int i = 0; i < m.size(); ++i)
        for (int j = 0; j < m.size(); ++j) ASSERT_EQ(iv.allowed(i, j), m.allowed(i, j));
}

TEST_P(MaskProperties, InferenceLayoutsHaveNoHoles) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(GetParam()) + 3000);
    auto layout = oracle::random_layout(rng, {64, 0, true});
    if (std::uniform_int_distribution<int>(0, 1)(rng))
        layout.push_back(Segment::image(SegmentKind::GenImage, Grid{2, 2}, 99));
    ASSERT_FALSE(validate_inference_layout(layout).has_value());
    const auto m = build_mask(layout);
    // Every key is visible to every later query.
    for (int i = 0; i < m.size(); ++i)
        for (int j = 0; j <= i; ++j) EXPECT_TRUE(m.allowed(i, j)) << format_layout(layout);
}

INSTANTIATE_TEST_SUITE_P(RandomLayouts, MaskProperties, ::testing::Range(0, 40));

TEST(IntervalMask, HandlesLongSequences) {
    const auto layout = parse_layout("text:1000,gen:64x64,text:500,vae:32x32,vit:8x8,text:10");
    const IntervalMask iv(layout);
    EXPECT_EQ(iv.size(), total_tokens(layout));
    EXPECT_FALSE(iv.allowed(5200, 1500));  // text after the gen image cannot see it
    EXPECT_TRUE(iv.allowed(1500, 5000));   // gen token sees its own segment
    EXPECT_TRUE(iv.allowed(5600, 5700));   // inside the cond image
    EXPECT_FALSE(iv.allowed(5600, 6700));  // vae half cannot see the vit half
    EXPECT_TRUE(iv.allowed(6700, 5600));
    EXPECT_FALSE(iv.allowed(10, 11));
}

TEST(InferenceValidation, Examples) {
    EXPECT_FALSE(validate_inference_layout(parse_layout("text:2,vae:2,vit:2,text:1,gen:2")).has_value());
    EXPECT_FALSE(validate_inference_layout(parse_layout("text:3")).has_value());

    const auto two = validate_inference_layout(parse_layout("text:1,gen:2,text:1,gen:2"));
    ASSERT_TRUE(two.has_value());
    EXPECT_EQ(two->segment_indices, (std::vector<int>{1, 3}));

    const auto not_last = validate_inference_layout(parse_layout("text:1,gen:2,text:1"));
    ASSERT_TRUE(not_last.has_value());
    EXPECT_EQ(not_last->segment_indices, (std::vector<int>{1}));
    EXPECT_NE(not_last->message.find("final"), std::string::npos);
}

TEST(AttentionMask, TextRoundTrip) {
    std::mt19937_64 rng(9);
    const auto m = build_mask(oracle::random_layout(rng));
    EXPECT_EQ(AttentionMask::from_text(m.to_text()), m);
    EXPECT_THROW(AttentionMask::from_text("10\n1\n"), std::invalid_argument);
}

}  // namespace
