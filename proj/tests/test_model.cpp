#include <cmath>
#include <map>
#include <random>

#include <gtest/gtest.h>

#include "micro.hpp"
#include "mmgen/model.hpp"
#include "oracles.hpp"

namespace {

using namespace mmgen;
using Mat = Matrix<double>;

// Plain pre-norm causal transformer with 1D RoPE and the same MoE FFN,
// reading weights by name. Returns logits for every position.
Mat reference_lm_logits(const Model<double>& model, const std::vector<int>& ids) {
    const auto& c = model.config();
    const auto& s = model.params();
    const int n = static_cast<int>(ids.size());
    const int d = c.d_model;
    auto W = [&](const std::string& name) -> const Mat& { return s.at(name).value; };
    auto rms = [&](const Mat& x, const Mat& w) {
        Mat out(x.rows(), x.cols());
        for (int r = 0; r < x.rows(); ++r) {
            const double inv = 1.0 / std::sqrt(x.row(r).squaredNorm() / x.cols() + 1e-6);
            for (int k = 0; k < x.cols(); ++k) out(r, k) = x(r, k) * inv * w(0, k);
        }
        return out;
    };
    auto silu = [](Mat x) {
        x = x.array() / (1.0 + (-x.array()).exp());
        return x;
    };
    const auto rope = oracle::rope_1d(n, c.head_dim, c.rope_base);
    auto rotate = [&](Mat x) {
        const int hd = c.head_dim, half = hd / 2;
        for (int r = 0; r < n; ++r)
            for (int h = 0; h < c.heads; ++h)
                for (int j = 0; j < half; ++j) {
                    const double cs = rope.cos[static_cast<std::size_t>(r * hd + j)];
                    const double sn = rope.sin[static_cast<std::size_t>(r * hd + j)];
                    const double a = x(r, h * hd + j), b = x(r, h * hd + j + half);
                    x(r, h * hd + j) = a * cs - b * sn;
                    x(r, h * hd + j + half) = b * cs + a * sn;
                }
        return x;
    };

    Mat x(n, d);
    for (int r = 0; r < n; ++r) x.row(r) = W("tok_emb").row(ids[static_cast<std::size_t>(r)]);
    for (int l = 0; l < c.layers; ++l) {
        const std::string p = "layer" + std::to_string(l);
        const Mat h = rms(x, W(p + ".attn_norm"));
        const Mat q = rotate(h * W(p + ".wq"));
        const Mat k = rotate(h * W(p + ".wk"));
        const Mat v = h * W(p + ".wv");
        Mat att = Mat::Zero(n, d);
        for (int hh = 0; hh < c.heads; ++hh) {
            const int o = hh * c.head_dim;
            for (int i = 0; i < n; ++i) {
                std::vector<double> score(static_cast<std::size_t>(i + 1));
                double mx = -1e300;
                for (int j = 0; j <= i; ++j) {
                    score[static_cast<std::size_t>(j)] =
                        q.row(i).segment(o, c.head_dim).dot(k.row(j).segment(o, c.head_dim)) / std::sqrt(c.head_dim);
                    mx = std::max(mx, score[static_cast<std::size_t>(j)]);
                }
                double z = 0;
                for (auto& sc : score) z += (sc = std::exp(sc - mx));
                for (int j = 0; j <= i; ++j)
                    att.row(i).segment(o, c.head_dim) += score[static_cast<std::size_t>(j)] / z * v.row(j).segment(o, c.head_dim);
            }
        }
        x += att * W(p + ".wo");

        const Mat h2 = rms(x, W(p + ".ffn_norm"));
        Mat ffn = Mat::Zero(n, d);
        for (int sh = 0; sh < c.moe.shared_experts; ++sh) {
            const std::string e = p + ".moe.shared" + std::to_string(sh);
            ffn += silu(h2 * W(e + ".w1")) * W(e + ".w2");
        }
        const Mat gate = h2 * W(p + ".moe.gate");
        for (int r = 0; r < n; ++r) {
            std::vector<int> order(static_cast<std::size_t>(c.moe.num_experts));
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return gate(r, a) > gate(r, b); });
            const double mx = gate.row(r).maxCoeff();
            double sel = 0;
            for (int t = 0; t < c.moe.top_k; ++t) sel += std::exp(gate(r, order[static_cast<std::size_t>(t)]) - mx);
            for (int t = 0; t < c.moe.top_k; ++t) {
                const int e = order[static_cast<std::size_t>(t)];
                const std::string name = p + ".moe.expert" + std::to_string(e);
                const double w = std::exp(gate(r, e) - mx) / sel;
                ffn.row(r) += w * (silu(h2.row(r) * W(name + ".w1")) * W(name + ".w2"));
            }
        }
        x += ffn;
    }
    return rms(x, W("final_norm")) * W("tok_emb").transpose();
}

TokenSequence text_sequence(const std::vector<int>& ids) {
    TokenSequence s;
    s.segments = {Segment::text(static_cast<int>(ids.size()))};
    s.tokens = ids;
    s.loss_mask.assign(ids.size(), 1);
    s.loss_mask[0] = 0;
    s.finalize();
    return s;
}

Mat logits_at_all_positions(const Model<double>& model, const TokenSequence& seq, PositionMode mode) {
    SequenceInput<double> in;
    in.seq = &seq;
    in.mode = mode;
    in.all_targets = false;
    for (int p = 0; p < seq.size(); ++p) in.logit_positions.push_back(p);
    ag::Graph<double> g(false);
    const auto out = model.forward(g, {in});
    return g.value(out.logits);
}

TEST(Model, LanguageModelingMatchesPlainCausalTransformer) {
    ModelConfig cfg = micro::config();
    cfg.moe = MoEConfig{6, 2, 1, 12, 0.01, true};
    const Model<double> model(cfg);
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> word(0, cfg.vocab_size - 1);
    for (int len : {1, 2, 7, 20}) {
        std::vector<int> ids(static_cast<std::size_t>(len));
        for (auto& id : ids) id = word(rng);
        const auto seq = text_sequence(ids);
        const Mat ref = reference_lm_logits(model, ids);
        for (auto mode : {PositionMode::Training, PositionMode::Inference}) {
            const Mat got = logits_at_all_positions(model, seq, mode);
            ASSERT_EQ(got.rows(), len);
            EXPECT_LT((got - ref).cwiseAbs().maxCoeff(), 1e-11) << "length " << len;
        }
    }
}

TEST(Model, GradientsMatchCentralDifferences) {
    Model<double> model(micro::config());
    const auto batch = micro::batch<double>(3);
    const auto probes = micro::gradient_check(model, batch, 3, 5);
    ASSERT_GE(probes.size(), 100u);
    std::map<std::string, int> covered;
    double worst = 0;
    for (const auto& p : probes) {
        EXPECT_LT(p.rel_error, 1e-4) << p.name << "[" << p.index << "] analytic " << p.analytic << " numeric "
                                     << p.numeric;
        worst = std::max(worst, p.rel_error);
        if (p.analytic != 0) ++covered[p.name.substr(0, p.name.find('.'))];
    }
    for (const char* part : {"tok_emb", "time", "vae", "vit", "layer0", "layer1", "vel"})
        EXPECT_GT(covered[part], 0) << part;
    RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(Model, GateAndAttentionWeightsReceiveGradients) {
    Model<double> model(micro::config());
    const auto batch = micro::batch<double>(4);
    model.params().zero_grad();
    ag::Graph<double> g(true);
    const auto out = model.forward(g, batch.inputs);
    g.backward(hybrid_loss(g, model, out, batch.velocity_targets).total);
    for (const char* name : {"layer0.moe.gate", "layer1.wq", "layer1.wk", "vae.mod_w", "vit.fc1_w", "time.w1"})
        EXPECT_GT(model.params().at(name).grad.cwiseAbs().maxCoeff(), 0.0) << name;
    EXPECT_EQ(model.params().at("latent_norm.mean").grad.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Model, PerturbingATokenOnlyReachesQueriesThatMaySeeIt) {
    const Model<double> model(micro::config());
    const auto batch = micro::batch<double>(6);
    const auto& seq = *batch.sequences[0];
    const auto mask = build_mask(seq.segments);
    const int n = seq.size();
    auto hidden = [&](const std::vector<std::pair<int, std::vector<double>>>* delta) {
        ag::Graph<double> g(false);
        ForwardOptions o;
        o.input_delta = delta;
        return Mat(g.value(model.forward(g, {batch.inputs[0]}, o).hidden));
    };
    const Mat base = hidden(nullptr);
    for (int j = 0; j < n; ++j) {
        const std::vector<std::pair<int, std::vector<double>>> delta{{j, std::vector<double>(16, 0.05)}};
        const Mat moved = hidden(&delta);
        for (int i = 0; i < n; ++i) {
            const double change = (moved.row(i) - base.row(i)).cwiseAbs().maxCoeff();
            if (mask.allowed(i, j))
                EXPECT_GT(change, 1e-9) << "query " << i << " key " << j;
            else
                EXPECT_LT(change, 1e-13) << "query " << i << " key " << j;
        }
    }
}

TEST(Model, PackedBatchEqualsSeparateSequences) {
    const Model<double> model(micro::config());
    const auto batch = micro::batch<double>(7);
    ag::Graph<double> g(false);
    const auto packed = model.forward(g, batch.inputs);
    const Mat& all = g.value(packed.hidden);
    int offset = 0;
    for (const auto& in : batch.inputs) {
        ag::Graph<double> g1(false);
        const Mat one = g1.value(model.forward(g1, {in}).hidden);
        EXPECT_LT((all.middleRows(offset, one.rows()) - one).cwiseAbs().maxCoeff(), 1e-12);
        offset += static_cast<int>(one.rows());
    }
}

TEST(Model, VelocityRowsPerGenToken) {
    const Model<double> model(micro::config());
    const auto batch = micro::batch<double>(8);
    ag::Graph<double> g(false);
    const auto out = model.forward(g, batch.inputs);
    ASSERT_EQ(out.gen_spans.size(), 1u);
    EXPECT_EQ(out.gen_spans[0].count, 4);
    EXPECT_EQ(out.gen_spans[0].sequence, 0);
    EXPECT_EQ(out.gen_spans[0].image_id, 1);
    EXPECT_EQ(g.value(out.velocity).rows(), 4);
    EXPECT_EQ(g.value(out.velocity).cols(), 8);
}

TEST(Model, UnderstandingBatchHasNoVelocityAndZeroFlowLoss) {
    const Model<double> model(micro::config());
    auto batch = micro::batch<double>(9);
    std::vector<SequenceInput<double>> lm_only{batch.inputs[1]};
    ag::Graph<double> g(false);
    const auto out = model.forward(g, lm_only);
    EXPECT_FALSE(out.velocity.valid());
    const auto terms = hybrid_loss(g, model, out, {});
    EXPECT_EQ(terms.fm, 0.0);
    EXPECT_EQ(terms.fm_tokens, 0);
    EXPECT_GT(terms.ce, 0.0);
}

TEST(Model, PerfectVelocityGivesZeroFlowLoss) {
    const Model<double> model(micro::config());
    const auto batch = micro::batch<double>(10);
    ag::Graph<double> g(false);
    const auto out = model.forward(g, batch.inputs);
    const auto terms = hybrid_loss(g, model, out, {g.value(out.velocity)});
    EXPECT_EQ(terms.fm, 0.0);
}

TEST(Model, NearUniformLogitsGiveLogVocabCrossEntropy) {
    const Model<double> model(micro::config());
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> word(0, 31);
    std::vector<int> ids(40);
    for (auto& id : ids) id = word(rng);
    const auto seq = text_sequence(ids);
    SequenceInput<double> in;
    in.seq = &seq;
    ag::Graph<double> g(false);
    const auto terms = hybrid_loss(g, model, model.forward(g, {in}), {});
    EXPECT_NEAR(terms.ce, std::log(32.0), 0.05 * std::log(32.0));

    ag::Graph<double> g2(false);
    const auto ce = g2.cross_entropy(g2.constant(Mat::Zero(5, 32)), {0, 3, 9, 31, 4});
    EXPECT_NEAR(g2.scalar(ce), std::log(32.0), 1e-14);
}

TEST(Model, NoTargetsAndNoGenTokensIsAnError) {
    const Model<double> model(micro::config());
    auto seq = text_sequence({1, 2, 3});
    std::fill(seq.loss_mask.begin(), seq.loss_mask.end(), 0);
    SequenceInput<double> in;
    in.seq = &seq;
    ag::Graph<double> g(false);
    const auto out = model.forward(g, {in});
    EXPECT_THROW(hybrid_loss(g, model, out, {}), std::invalid_argument);
}

TEST(Model, FlowLossFiniteAtTimestepEndpoints) {
    const Model<double> model(micro::config());
    for (double t : {0.0, 1.0}) {
        auto batch = micro::batch<double>(12);
        batch.inputs[0].images[1].t = t;
        ag::Graph<double> g(false);
        const auto terms = hybrid_loss(g, model, model.forward(g, batch.inputs), batch.velocity_targets);
        EXPECT_TRUE(std::isfinite(terms.fm));
        EXPECT_TRUE(std::isfinite(terms.total_value));
    }
    auto batch = micro::batch<double>(12);
    batch.inputs[0].images[1].t = 1.5;
    ag::Graph<double> g(false);
    EXPECT_THROW(model.forward(g, batch.inputs), std::invalid_argument);
}

TEST(Model, IdentityModulationIsAPlainResidualBlock) {
    const Model<double> model(micro::config());
    std::mt19937_64 rng(13);
    const Mat latents = micro::normal_matrix<double>(4, 8, rng);
    const auto& s = model.params();
    auto W = [&](const char* n) -> const Mat& { return s.at(n).value; };
    Mat x = latents * W("vae.in_w");
    x.rowwise() += W("vae.in_b").row(0);
    Mat h(x.rows(), x.cols());
    for (int r = 0; r < x.rows(); ++r)
        h.row(r) = x.row(r) / std::sqrt(x.row(r).squaredNorm() / x.cols() + 1e-6);
    h = h.array().rowwise() * W("vae.norm").row(0).array();
    Mat y = h * W("vae.fc1_w");
    y.rowwise() += W("vae.fc1_b").row(0);
    y = y.array() / (1.0 + (-y.array()).exp());
    Mat z = y * W("vae.fc2_w");
    z.rowwise() += W("vae.fc2_b").row(0);
    const Mat expected = x + z;

    ag::Graph<double> g(false);
    const auto temb = model.timestep_embedding(g, 0.3);
    const Mat got = g.value(model.project_vae(g, latents, temb, true));
    EXPECT_LT((got - expected).cwiseAbs().maxCoeff(), 1e-13);
    const Mat modulated = g.value(model.project_vae(g, latents, temb, false));
    EXPECT_GT((modulated - expected).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Model, ProjectorsPreserveTokenCountsAndDependOnTimestep) {
    const Model<double> model(micro::config());
    std::mt19937_64 rng(14);
    const Mat latents = micro::normal_matrix<double>(4, 8, rng);
    ag::Graph<double> g(false);
    const Mat a = g.value(model.project_vae(g, latents, model.timestep_embedding(g, 0.2)));
    const Mat b = g.value(model.project_vae(g, latents, model.timestep_embedding(g, 0.7)));
    EXPECT_EQ(a.rows(), 4);
    EXPECT_EQ(a.cols(), 16);
    EXPECT_GT((a - b).cwiseAbs().maxCoeff(), 1e-9);
    const Mat f = g.value(model.project_vit(g, micro::normal_matrix<double>(9, 12, rng)));
    EXPECT_EQ(f.rows(), 9);
    EXPECT_TRUE(f.allFinite());
    EXPECT_THROW(model.project_vae(g, Mat::Zero(4, 7), model.timestep_embedding(g, 0.2)), std::invalid_argument);
    EXPECT_THROW(model.project_vit(g, Mat::Zero(4, 7)), std::invalid_argument);
}

TEST(Model, IdenticalSeedsGiveBitwiseIdenticalLosses) {
    const Model<double> a(micro::config()), b(micro::config());
    const auto batch = micro::batch<double>(15);
    EXPECT_EQ(micro::total_loss(a, batch), micro::total_loss(b, batch));
    ModelConfig other = micro::config();
    other.init_seed = 99;
    const Model<double> c(other);
    EXPECT_NE(micro::total_loss(a, batch), micro::total_loss(c, batch));
}

TEST(Model, ForwardCountsEveryRoutedToken) {
    const Model<double> model(micro::config());
    const auto batch = micro::batch<double>(16);
    ExpertStats stats(2, 4);
    ForwardOptions o;
    o.stats = &stats;
    ag::Graph<double> g(false);
    const auto out = model.forward(g, batch.inputs, o);
    int image_tokens = 0;
    for (const auto& s : batch.sequences[0]->segments)
        if (is_image(s.kind)) image_tokens += s.token_count;
    for (int l = 0; l < 2; ++l) {
        EXPECT_EQ(stats.image_total(l), 2 * image_tokens);
        EXPECT_EQ(stats.image_total(l) + stats.text_total(l), 2 * out.packed_rows);
    }
}

TEST(Model, InferenceModeRejectsHoles) {
    const Model<double> model(micro::config());
    auto batch = micro::batch<double>(17);
    batch.inputs[0].mode = PositionMode::Inference;
    ag::Graph<double> g(false);
    EXPECT_THROW(model.forward(g, batch.inputs), std::invalid_argument);
}

TEST(ModelConfig, Validation) {
    ModelConfig c = micro::config();
    c.d_model = 15;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = micro::config();
    c.head_dim = 7;
    c.d_model = 14;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = micro::config();
    c.timestep_token = c.vocab_size;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    EXPECT_NO_THROW(micro::config().validate());
}

}  // namespace
