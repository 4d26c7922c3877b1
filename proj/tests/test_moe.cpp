#include <numeric>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "mmgen/moe.hpp"
#include "oracles.hpp"

namespace {

using namespace mmgen;
using Mat = Matrix<double>;

Mat random_matrix(int rows, int cols, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
    return m;
}

TEST(Route, FullTopKEqualsSoftmax) {
    std::mt19937_64 rng(1);
    const Mat x = random_matrix(5, 6, rng);
    const Mat w = random_matrix(6, 4, rng);
    const auto r = route(x, w, 4);
    const Mat logits = x * w;
    for (int t = 0; t < 5; ++t) {
        const Eigen::RowVectorXd p = (logits.row(t).array() - logits.row(t).maxCoeff()).exp().matrix();
        const Eigen::RowVectorXd sm = p / p.sum();
        for (int s = 0; s < 4; ++s) EXPECT_NEAR(r.weights(t, s), sm(r.indices(t, s)), 1e-14);
    }
}

TEST(Route, UniformLogitsBreakTiesTowardLowerIndices) {
    const Mat x = Mat::Ones(3, 4);
    const Mat w = Mat::Zero(4, 64);
    const auto r = route(x, w, 8);
    for (int t = 0; t < 3; ++t)
        for (int s = 0; s < 8; ++s) {
            EXPECT_EQ(r.indices(t, s), s);
            EXPECT_DOUBLE_EQ(r.weights(t, s), 1.0 / 8.0);
        }
}

TEST(Route, SelectsTheLargestLogitsAndNormalizes) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        const int E = std::uniform_int_distribution<int>(2, 64)(rng);
        const int k = std::uniform_int_distribution<int>(1, E)(rng);
        const Mat x = random_matrix(7, 5, rng);
        const Mat w = random_matrix(5, E, rng);
        const Mat logits = x * w;
        const auto r = route(x, w, k);
        for (int t = 0; t < 7; ++t) {
            std::vector<int> order(static_cast<std::size_t>(E));
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return logits(t, a) > logits(t, b); });
            double sum = 0;
            for (int s = 0; s < k; ++s) {
                EXPECT_EQ(r.indices(t, s), order[static_cast<std::size_t>(s)]);
                EXPECT_GE(r.weights(t, s), 0.0);
                sum += r.weights(t, s);
            }
            EXPECT_NEAR(sum, 1.0, 1e-12);
        }
    }
}

TEST(Route, RejectsNonFiniteLogitsAndBadK) {
    Mat x = Mat::Ones(1, 2);
    Mat w = Mat::Zero(2, 4);
    w(0, 1) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(route(x, w, 2), std::domain_error);
    const Mat zero = Mat::Zero(2, 4);
    const Mat empty(0, 2);
    EXPECT_THROW(route(x, zero, 5), std::invalid_argument);
    EXPECT_THROW(route(empty, zero, 1), std::invalid_argument);
}

class MoEForward : public ::testing::Test {
protected:
    MoELayer<double> make(const MoEConfig& cfg, int d = 8) {
        std::mt19937_64 rng(3);
        return MoELayer<double>(store, "moe", d, cfg, rng);
    }
    ParameterStore<double> store;
};

TEST_F(MoEForward, CountsKActivationsPerToken) {
    const MoEConfig cfg{8, 3, 1, 16, 0.01, true};
    const auto layer = make(cfg);
    std::mt19937_64 rng(4);
    ExpertStats stats(2, 8);
    std::vector<Modality> tags;
    for (int i = 0; i < 11; ++i) tags.push_back(i % 3 == 0 ? Modality::Image : Modality::Text);
    ag::Graph<double> g(false);
    layer.forward(g, g.constant(random_matrix(11, 8, rng)), tags, 1, &stats);
    EXPECT_EQ(stats.image_total(1), 3 * 4);
    EXPECT_EQ(stats.text_total(1), 3 * 7);
    EXPECT_EQ(stats.image_total(0) + stats.text_total(0), 0);
}

TEST_F(MoEForward, TenTextTokensTopEightGiveEighty) {
    const MoEConfig cfg{16, 8, 1, 8, 0.0, false};
    const auto layer = make(cfg);
    std::mt19937_64 rng(5);
    ExpertStats stats(1, 16);
    const std::vector<Modality> tags(10, Modality::Text);
    ag::Graph<double> g(false);
    layer.forward(g, g.constant(random_matrix(10, 8, rng)), tags, 0, &stats);
    EXPECT_EQ(stats.text_total(0), 80);
    EXPECT_EQ(stats.image_total(0), 0);
}

TEST_F(MoEForward, ZeroTokensLeaveStatsUnchanged) {
    const auto layer = make(MoEConfig{4, 2, 1, 8, 0.01, true});
    ExpertStats stats(1, 4);
    ag::Graph<double> g(false);
    const auto out = layer.forward(g, g.constant(Mat(0, 8)), {}, 0, &stats);
    EXPECT_EQ(g.value(out.out).rows(), 0);
    EXPECT_EQ(stats, ExpertStats(1, 4));
}

TEST_F(MoEForward, IdenticalExpertsWithFullRoutingSumToSharedPlusExpert) {
    const MoEConfig cfg{4, 4, 1, 6, 0.0, false};
    const auto layer = make(cfg);
    const auto& w1 = store.at("moe.expert0.w1").value;
    const auto& w2 = store.at("moe.expert0.w2").value;
    for (int e = 1; e < 4; ++e) {
        store.at("moe.expert" + std::to_string(e) + ".w1").value = w1;
        store.at("moe.expert" + std::to_string(e) + ".w2").value = w2;
    }
    std::mt19937_64 rng(6);
    const Mat x = random_matrix(5, 8, rng);
    auto silu_mlp = [&](const Mat& a, const Mat& b) {
        Mat h = x * a;
        h = h.array() / (1.0 + (-h.array()).exp());
        return Mat(h * b);
    };
    const Mat expected = silu_mlp(store.at("moe.shared0.w1").value, store.at("moe.shared0.w2").value) + silu_mlp(w1, w2);
    ag::Graph<double> g(false);
    const std::vector<Modality> tags(5, Modality::Text);
    const auto out = layer.forward(g, g.constant(x), tags, 0, nullptr);
    EXPECT_LT((g.value(out.out) - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST_F(MoEForward, RejectsMismatchedShapes) {
    const auto layer = make(MoEConfig{4, 2, 1, 8, 0.01, true});
    ag::Graph<double> g(false);
    const std::vector<Modality> two(2, Modality::Text);
    EXPECT_THROW(layer.forward(g, g.constant(Mat::Zero(3, 8)), two, 0, nullptr), std::invalid_argument);
    const std::vector<Modality> three(3, Modality::Text);
    EXPECT_THROW(layer.forward(g, g.constant(Mat::Zero(3, 5)), three, 0, nullptr), std::invalid_argument);
}

TEST(MoEConfig, Validation) {
    EXPECT_THROW((MoEConfig{4, 5, 1, 8, 0.01, true}.validate()), std::invalid_argument);
    EXPECT_THROW((MoEConfig{4, 0, 1, 8, 0.01, true}.validate()), std::invalid_argument);
    EXPECT_THROW((MoEConfig{4, 2, 1, 8, -1.0, true}.validate()), std::invalid_argument);
    EXPECT_NO_THROW((MoEConfig{64, 8, 1, 8, 0.01, true}.validate()));
}

ExpertStats two_expert_example() {
    ExpertStats s(1, 2);
    s.record(0, 0, Modality::Image, 2);
    s.record(0, 0, Modality::Text, 1);
    s.record(0, 1, Modality::Text, 1);
    return s;
}

TEST(Heatmap, WorkedExample) {
    const auto h = heatmap_stat(two_expert_example());
    ASSERT_EQ(h.size(), 1u);
    EXPECT_EQ(h[0][0], 2.0 / 3.0);
    EXPECT_EQ(h[0][1], 0.0);
}

TEST(Heatmap, EqualDistributionsAreNeutral) {
    ExpertStats s(2, 3);
    for (int l = 0; l < 2; ++l)
        for (int e = 0; e < 3; ++e) {
            s.record(l, e, Modality::Image, 5 * (e + 1));
            s.record(l, e, Modality::Text, e + 1);
        }
    for (const auto& row : heatmap_stat(s))
        for (double v : row) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Heatmap, InvariantUnderScalingAndBounded) {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> count(0, 50);
    for (int trial = 0; trial < 100; ++trial) {
        ExpertStats s(3, 6), scaled(3, 6);
        for (int l = 0; l < 3; ++l)
            for (int e = 0; e < 6; ++e) {
                const int v = count(rng) + (e == 0), t = count(rng) + (e == 1);
                s.record(l, e, Modality::Image, v);
                s.record(l, e, Modality::Text, t);
                scaled.record(l, e, Modality::Image, 10 * v);
                scaled.record(l, e, Modality::Text, 3 * t);
            }
        const auto a = heatmap_stat(s), b = heatmap_stat(scaled);
        for (int l = 0; l < 3; ++l)
            for (int e = 0; e < 6; ++e) {
                EXPECT_NEAR(a[l][e], b[l][e], 1e-12);
                EXPECT_GE(a[l][e], 0.0);
                EXPECT_LE(a[l][e], 1.0);
            }
    }
}

TEST(Heatmap, EmptyModalityNamesTheLayer) {
    ExpertStats s(2, 2);
    s.record(0, 0, Modality::Image);
    s.record(0, 1, Modality::Text);
    s.record(1, 0, Modality::Text);
    try {
        heatmap_stat(s);
        FAIL();
    } catch (const std::domain_error& e) {
        EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos);
    }
    EXPECT_THROW(kl_per_layer(s), std::domain_error);
}

TEST(KL, WorkedExample) {
    ExpertStats s(1, 2);
    s.record(0, 0, Modality::Image, 3);
    s.record(0, 1, Modality::Image, 1);
    s.record(0, 0, Modality::Text, 1);
    s.record(0, 1, Modality::Text, 1);
    const double expected = 0.75 * std::log(1.5) + 0.25 * std::log(0.5);
    const auto kl = kl_per_layer(s, 0.0);
    EXPECT_NEAR(kl[0], 0.1308, 1e-4);
    EXPECT_NEAR(kl[0], expected, 1e-15);
}

TEST(KL, ZeroForEqualDistributions) {
    ExpertStats s(1, 4);
    for (int e = 0; e < 4; ++e) {
        s.record(0, e, Modality::Image, 2 * (e + 1));
        s.record(0, e, Modality::Text, e + 1);
    }
    EXPECT_NEAR(kl_per_layer(s)[0], 0.0, 1e-15);
}

TEST(KL, MatchesReferenceAndIsNonNegativeOnRandomCounts) {
    std::mt19937_64 rng(8);
    std::uniform_int_distribution<int> count(0, 20);
    for (int trial = 0; trial < 1000; ++trial) {
        const int E = std::uniform_int_distribution<int>(2, 16)(rng);
        ExpertStats s(1, E);
        std::vector<double> v(static_cast<std::size_t>(E)), t(static_cast<std::size_t>(E));
        for (int e = 0; e < E; ++e) {
            v[static_cast<std::size_t>(e)] = count(rng) + (e == 0);
            t[static_cast<std::size_t>(e)] = count(rng) + (e == E - 1);
            s.record(0, e, Modality::Image, static_cast<std::int64_t>(v[static_cast<std::size_t>(e)]));
            s.record(0, e, Modality::Text, static_cast<std::int64_t>(t[static_cast<std::size_t>(e)]));
        }
        const double ref = oracle::kl_counts(v, t, 1e-8);
        const double got = kl_per_layer(s, 1e-8)[0];
        EXPECT_GE(got, 0.0);
        EXPECT_GE(ref, -1e-12);
        EXPECT_NEAR(got, std::max(0.0, ref), 1e-12);
    }
}

TEST(ExpertStats, CsvRoundTrip) {
    std::mt19937_64 rng(9);
    ExpertStats s(3, 5);
    std::uniform_int_distribution<int> count(0, 1000);
    for (int l = 0; l < 3; ++l)
        for (int e = 0; e < 5; ++e) {
            s.record(l, e, Modality::Image, count(rng));
            s.record(l, e, Modality::Text, count(rng));
        }
    std::stringstream ss;
    s.write_csv(ss);
    EXPECT_EQ(ExpertStats::read_csv(ss), s);
    std::stringstream bad("layer,expert,v,t\n0,0,-1,2\n");
    EXPECT_THROW(ExpertStats::read_csv(bad), std::invalid_argument);
    std::stringstream header("l,e,v,t\n");
    EXPECT_THROW(ExpertStats::read_csv(header), std::invalid_argument);
}

TEST(ExpertStats, MergeIsOrderIndependent) {
    std::mt19937_64 rng(10);
    std::vector<ExpertStats> parts;
    for (int p = 0; p < 6; ++p) {
        ExpertStats s(2, 4);
        for (int i = 0; i < 50; ++i)
            s.record(std::uniform_int_distribution<int>(0, 1)(rng), std::uniform_int_distribution<int>(0, 3)(rng),
                     i % 2 ? Modality::Image : Modality::Text);
        parts.push_back(s);
    }
    ExpertStats forward, backward;
    for (const auto& p : parts) forward.merge(p);
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) backward.merge(*it);
    EXPECT_EQ(forward, backward);
    EXPECT_THROW(forward.merge(ExpertStats(3, 4)), std::invalid_argument);
}

TEST(ExpertStats, CsvFormats) {
    std::ostringstream h, k;
    write_heatmap_csv(h, {{0.5, 0.25}});
    write_kl_csv(k, {0.125});
    EXPECT_EQ(h.str(), "layer,expert,value\n0,0,0.5\n0,1,0.25\n");
    EXPECT_EQ(k.str(), "layer,kl\n0,0.125\n");
}

}  // namespace
