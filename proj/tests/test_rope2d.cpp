#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "mmgen/rope2d.hpp"
#include "oracles.hpp"

namespace {

using namespace mmgen;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Each gen image replaced by its cond form; returns the new layout and, for
// every original token, its index in the new layout.
std::pair<std::vector<Segment>, std::vector<int>> conditioned(const std::vector<Segment>& layout, Grid vit) {
    std::vector<Segment> out;
    std::vector<int> map;
    int cursor = 0;
    for (const auto& s : layout) {
        for (int k = 0; k < s.token_count; ++k) map.push_back(cursor + k);
        if (s.kind == SegmentKind::GenImage) {
            out.push_back(Segment::image(SegmentKind::CondImageVae, *s.grid, s.image_id));
            out.push_back(Segment::image(SegmentKind::CondImageVit, vit, s.image_id));
            cursor += s.token_count + vit.tokens();
        } else {
            out.push_back(s);
            cursor += s.token_count;
        }
    }
    return {out, map};
}

TEST(AssignPositions, TextSitsOnTheDiagonal) {
    const auto p = assign_positions(parse_layout("text:3"), PositionMode::Training);
    EXPECT_EQ(p, (std::vector<Position>{{0, 0}, {1, 1}, {2, 2}}));
}

TEST(AssignPositions, ImageBetweenTextSections) {
    const auto p = assign_positions(parse_layout("text:3,vae:2x2,text:1"), PositionMode::Inference);
    EXPECT_EQ(p, (std::vector<Position>{{0, 0}, {1, 1}, {2, 2}, {3, 3}, {3, 4}, {4, 3}, {4, 4}, {5, 5}}));
}

TEST(AssignPositions, NonSquareGridAdvancesByTheLongerSide) {
    const auto p = assign_positions(parse_layout("text:1,vae:2x3,text:1"), PositionMode::Inference);
    EXPECT_EQ(p[1], (Position{1, 1}));
    EXPECT_EQ(p[6], (Position{2, 3}));
    EXPECT_EQ(p.back(), (Position{4, 4}));
}

TEST(AssignPositions, TrainingShiftMatchesTheCondLayout) {
    const Grid vit{2, 2};
    const auto train = parse_layout("text:1,gen:2x2,text:1");
    const auto infer = parse_layout("text:1,vae:2x2,vit:2x2,text:1");
    const auto pt = assign_positions(train, PositionMode::Training, vit);
    const auto pi = assign_positions(infer, PositionMode::Inference, vit);
    EXPECT_EQ(pt.back(), pi.back());
    // Without the shift the final text token would sit two steps earlier.
    EXPECT_NE(assign_positions(train, PositionMode::Inference, vit).back(), pi.back());
}

TEST(AssignPositions, TrainInferenceConsistencyOnRandomMultiGenLayouts) {
    std::mt19937_64 rng(77);
    int checked = 0;
    while (checked < 50) {
        auto layout = oracle::random_layout(rng, {64, 3, true});
        int gens = 0;
        for (const auto& s : layout) gens += s.kind == SegmentKind::GenImage;
        if (gens < 2) continue;
        layout.push_back(Segment::text(2));
        const Grid vit{std::uniform_int_distribution<int>(1, 4)(rng), std::uniform_int_distribution<int>(1, 4)(rng)};
        const auto [cond, map] = conditioned(layout, vit);
        const auto pt = assign_positions(layout, PositionMode::Training, vit);
        const auto pi = assign_positions(cond, PositionMode::Inference, vit);
        ASSERT_EQ(pt.size(), map.size());
        for (std::size_t t = 0; t < pt.size(); ++t)
            ASSERT_EQ(pt[t], pi[static_cast<std::size_t>(map[t])]) << format_layout(layout) << " token " << t;
        ++checked;
    }
}

TEST(AssignPositions, TextAfterAnImageExceedsEveryImageCoordinate) {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        auto layout = oracle::random_layout(rng);
        layout.push_back(Segment::text(1));
        const auto p = assign_positions(layout, PositionMode::Inference);
        for (std::size_t t = 0; t + 1 < p.size(); ++t) {
            EXPECT_LT(p[t].x, p.back().x);
            EXPECT_LT(p[t].y, p.back().y);
        }
        EXPECT_EQ(p.back().x, p.back().y);
    }
}

TEST(AssignPositions, CsvDump) {
    const auto layout = parse_layout("text:1,gen:1x2");
    std::ostringstream os;
    write_positions_csv(os, layout, assign_positions(layout, PositionMode::Inference));
    EXPECT_EQ(os.str(), "token,segment,kind,x,y\n0,0,TEXT,0,0\n1,1,GEN_IMAGE,1,1\n2,1,GEN_IMAGE,1,2\n");
}

TEST(RopeTables, OriginIsIdentity) {
    const std::vector<Position> origin{{0, 0}};
    const auto t = rope_tables(origin, 16);
    for (int c = 0; c < 16; ++c) {
        EXPECT_EQ(t.cos_at(0, c), 1.0);
        EXPECT_EQ(t.sin_at(0, c), 0.0);
    }
}

TEST(RopeTables, RejectsOddHeadDim) {
    const std::vector<Position> p{{0, 0}};
    EXPECT_THROW(rope_tables(p, 7), std::invalid_argument);
    EXPECT_THROW(rope_frequencies(0, 10000.0), std::invalid_argument);
}

TEST(RopeTables, TextOnlyEqualsReference1DBitwise) {
    std::mt19937_64 rng(100);
    for (int trial = 0; trial < 100; ++trial) {
        const auto layout = oracle::random_text_layout(rng, 128);
        const int hd = 2 * std::uniform_int_distribution<int>(1, 32)(rng);
        const auto pos = assign_positions(layout, PositionMode::Training);
        for (const auto& p : pos) ASSERT_EQ(p.x, p.y);
        const auto t = rope_tables(pos, hd);
        const auto ref = oracle::rope_1d(static_cast<int>(pos.size()), hd);
        ASSERT_EQ(t.cos, ref.cos);
        ASSERT_EQ(t.sin, ref.sin);
    }
}

TEST(RopeTables, OddPairsIgnoreTheXCoordinate) {
    const std::vector<Position> a{{3, 7}}, b{{11, 7}};
    const auto ta = rope_tables(a, 16);
    const auto tb = rope_tables(b, 16);
    for (int j = 1; j < 8; j += 2) {
        EXPECT_EQ(ta.cos_at(0, j), tb.cos_at(0, j));
        EXPECT_EQ(ta.sin_at(0, j), tb.sin_at(0, j));
    }
    EXPECT_NE(ta.cos_at(0, 0), tb.cos_at(0, 0));
}

TEST(RopeTables, UnitCircle) {
    std::mt19937_64 rng(4);
    auto layout = oracle::random_layout(rng);
    const auto t = rope_tables(assign_positions(layout, PositionMode::Training), 32);
    for (std::size_t i = 0; i < t.cos.size(); ++i) EXPECT_NEAR(t.cos[i] * t.cos[i] + t.sin[i] * t.sin[i], 1.0, 1e-12);
}

TEST(ApplyRope, ZeroAngleIsIdentity) {
    const std::vector<Position> origin(3, Position{0, 0});
    const auto t = rope_tables(origin, 8);
    std::mt19937_64 rng(1);
    std::normal_distribution<double> nd;
    Mat x(3, 16);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = nd(rng);
    Mat y = x;
    apply_rope(y, t);
    EXPECT_EQ(x, y);
}

TEST(ApplyRope, PreservesPairNormsAndInverts) {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> nd;
    const auto layout = parse_layout("text:5,gen:3x4,text:3,vae:2x2,vit:4x4");
    const auto t = rope_tables(assign_positions(layout, PositionMode::Training), 16, 500.0);
    Mat x(t.n, 32);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = nd(rng);
    Mat y = x;
    apply_rope(y, t);
    for (int r = 0; r < t.n; ++r)
        for (int h = 0; h < 2; ++h)
            for (int j = 0; j < 8; ++j) {
                const int a = h * 16 + j, b = a + 8;
                const double before = std::hypot(x(r, a), x(r, b));
                const double after = std::hypot(y(r, a), y(r, b));
                EXPECT_NEAR(after, before, 1e-6 * before);
            }
    apply_rope(y, t, 0, true);
    EXPECT_LT((y - x).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ApplyRope, DotProductDependsOnlyOnTextOffset) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd;
    const int hd = 16;
    const auto t = rope_tables(assign_positions(parse_layout("text:64"), PositionMode::Training), hd);
    Mat q(1, hd), k(1, hd);
    for (int c = 0; c < hd; ++c) {
        q(0, c) = nd(rng);
        k(0, c) = nd(rng);
    }
    auto rotated = [&](const Mat& v, int pos) {
        Mat out = v;
        apply_rope(out, t, pos);
        return out;
    };
    for (int offset : {0, 1, 5, 17}) {
        const double base = (rotated(q, offset) * rotated(k, 0).transpose())(0, 0);
        for (int shift : {3, 20, 40}) {
            const double moved = (rotated(q, offset + shift) * rotated(k, shift).transpose())(0, 0);
            EXPECT_NEAR(moved, base, 1e-9);
        }
    }
}

TEST(ApplyRope, ShapeErrors) {
    const std::vector<Position> p{{0, 0}, {1, 1}};
    const auto t = rope_tables(p, 8);
    Mat wrong_cols(2, 12);
    EXPECT_THROW(apply_rope(wrong_cols, t), std::invalid_argument);
    Mat too_many_rows(3, 8);
    EXPECT_THROW(apply_rope(too_many_rows, t), std::invalid_argument);
}

TEST(AssignPositions, OverflowIsReported) {
    const std::vector<Segment> huge{Segment::text(4), Segment::image(SegmentKind::GenImage, Grid{1, 1 << 24}, 0)};
    EXPECT_THROW(assign_positions(huge, PositionMode::Inference), std::out_of_range);
}

}  // namespace
