#include "mmgen/model.hpp"

#include <cmath>
#include <stdexcept>

namespace mmgen {

void ModelConfig::validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
    if (layers < 1 || d_model < 1 || heads < 1 || head_dim < 1) fail("layer and width counts must be >= 1");
    if (d_model != heads * head_dim) fail("d_model must equal heads * head_dim");
    if (head_dim % 2 != 0) fail("head_dim must be even");
    if (vocab_size < 1 || latent_channels < 1 || vit_dim < 1) fail("vocab/latent/vit sizes must be >= 1");
    if (vit_grid.h < 1 || vit_grid.w < 1) fail("vit grid must be positive");
    if (time_freq_dim < 2 || time_freq_dim % 2 != 0) fail("time_freq_dim must be even and >= 2");
    if (timestep_token >= vocab_size) fail("timestep_token outside the vocabulary");
    if (fm_weight < 0 || ce_weight < 0) fail("loss weights must be >= 0");
    moe.validate();
}

template <class T>
Model<T>::Model(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(config_.init_seed);
    const int d = config_.d_model;
    const double inv_d = 1.0 / std::sqrt(static_cast<double>(d));
    const auto TR = ag::ParamGroup::Transformer;
    const auto VIT = ag::ParamGroup::VitProjector;

    store_.add("tok_emb", config_.vocab_size, d, TR, Init::normal(0.02), rng);
    store_.add("time.w1", config_.time_freq_dim, d, TR, Init::normal(1.0 / std::sqrt(config_.time_freq_dim)), rng);
    store_.add("time.b1", 1, d, TR, Init::zeros(), rng);
    store_.add("time.w2", d, d, TR, Init::normal(inv_d), rng);
    store_.add("time.b2", 1, d, TR, Init::zeros(), rng);

    store_.add("vae.in_w", config_.latent_channels, d, TR, Init::normal(1.0 / std::sqrt(config_.latent_channels)), rng);
    store_.add("vae.in_b", 1, d, TR, Init::zeros(), rng);
    store_.add("vae.norm", 1, d, TR, Init::ones(), rng);
    store_.add("vae.mod_w", d, 2 * d, TR, Init::normal(0.02), rng);
    store_.add("vae.mod_b", 1, 2 * d, TR, Init::zeros(), rng);
    store_.add("vae.fc1_w", d, d, TR, Init::normal(inv_d), rng);
    store_.add("vae.fc1_b", 1, d, TR, Init::zeros(), rng);
    store_.add("vae.fc2_w", d, d, TR, Init::normal(inv_d * 0.5), rng);
    store_.add("vae.fc2_b", 1, d, TR, Init::zeros(), rng);

    store_.add("vit.fc1_w", config_.vit_dim, d, VIT, Init::normal(1.0 / std::sqrt(config_.vit_dim)), rng);
    store_.add("vit.fc1_b", 1, d, VIT, Init::zeros(), rng);
    store_.add("vit.fc2_w", d, d, VIT, Init::normal(inv_d), rng);
    store_.add("vit.fc2_b", 1, d, VIT, Init::zeros(), rng);

    const double out_std = inv_d / std::sqrt(2.0 * config_.layers);
    for (int l = 0; l < config_.layers; ++l) {
        const std::string p = "layer" + std::to_string(l);
        Layer layer{};
        layer.attn_norm = &store_.add(p + ".attn_norm", 1, d, TR, Init::ones(), rng);
        layer.wq = &store_.add(p + ".wq", d, d, TR, Init::normal(inv_d), rng);
        layer.wk = &store_.add(p + ".wk", d, d, TR, Init::normal(inv_d), rng);
        layer.wv = &store_.add(p + ".wv", d, d, TR, Init::normal(inv_d), rng);
        layer.wo = &store_.add(p + ".wo", d, d, TR, Init::normal(out_std), rng);
        layer.ffn_norm = &store_.add(p + ".ffn_norm", 1, d, TR, Init::ones(), rng);
        layer.moe = std::make_unique<MoELayer<T>>(store_, p + ".moe", d, config_.moe, rng);
        layers_.push_back(std::move(layer));
    }
    store_.add("final_norm", 1, d, TR, Init::ones(), rng);
    if (!config_.tie_embeddings) store_.add("head", d, config_.vocab_size, TR, Init::normal(inv_d), rng);
    store_.add("vel.w", d, config_.latent_channels, TR, Init::normal(inv_d * 0.5), rng);
    store_.add("vel.b", 1, config_.latent_channels, TR, Init::zeros(), rng);

    auto& mean = store_.add("latent_norm.mean", 1, config_.latent_channels, TR, Init::zeros(), rng);
    auto& stdv = store_.add("latent_norm.std", 1, config_.latent_channels, TR, Init::ones(), rng);
    mean.trainable = false;
    stdv.trainable = false;
}

template <class T>
ag::Var Model<T>::timestep_embedding(ag::Graph<T>& g, double t) const {
    const int half = config_.time_freq_dim / 2;
    Matrix<T> feats(1, config_.time_freq_dim);
    const double scaled = t * 1000.0;
    for (int k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * k / half);
        feats(0, k) = static_cast<T>(std::cos(scaled * freq));
        feats(0, k + half) = static_cast<T>(std::sin(scaled * freq));
    }
    auto& s = const_cast<ParameterStore<T>&>(store_);
    auto h = g.add_row(g.matmul(g.constant(std::move(feats)), g.param(s.at("time.w1"))), g.param(s.at("time.b1")));
    return g.add_row(g.matmul(g.silu(h), g.param(s.at("time.w2"))), g.param(s.at("time.b2")));
}

template <class T>
ag::Var Model<T>::project_vae(ag::Graph<T>& g, const Matrix<T>& latents, ag::Var temb, bool identity_modulation) const {
    if (latents.cols() != config_.latent_channels)
        throw std::invalid_argument("model: latent channels " + std::to_string(latents.cols()) + " != " +
                                    std::to_string(config_.latent_channels));
    auto& s = const_cast<ParameterStore<T>&>(store_);
    const int d = config_.d_model;
    auto x = g.add_row(g.matmul(g.constant(latents), g.param(s.at("vae.in_w"))), g.param(s.at("vae.in_b")));
    auto h = g.rms_norm(x, g.param(s.at("vae.norm")));
    if (!identity_modulation) {
        auto mod = g.add_row(g.matmul(g.silu(temb), g.param(s.at("vae.mod_w"))), g.param(s.at("vae.mod_b")));
        auto scale = g.add_constant(g.slice_cols(mod, 0, d), T(1));
        auto shift = g.slice_cols(mod, d, d);
        h = g.add_row(g.mul_row(h, scale), shift);
    }
    auto y = g.add_row(g.matmul(h, g.param(s.at("vae.fc1_w"))), g.param(s.at("vae.fc1_b")));
    y = g.add_row(g.matmul(g.silu(y), g.param(s.at("vae.fc2_w"))), g.param(s.at("vae.fc2_b")));
    return g.add(x, y);
}

template <class T>
ag::Var Model<T>::project_vit(ag::Graph<T>& g, const Matrix<T>& features) const {
    if (features.cols() != config_.vit_dim)
        throw std::invalid_argument("model: vision feature width " + std::to_string(features.cols()) + " != " +
                                    std::to_string(config_.vit_dim));
    auto& s = const_cast<ParameterStore<T>&>(store_);
    auto h = g.add_row(g.matmul(g.constant(features), g.param(s.at("vit.fc1_w"))), g.param(s.at("vit.fc1_b")));
    return g.add_row(g.matmul(g.gelu(h), g.param(s.at("vit.fc2_w"))), g.param(s.at("vit.fc2_b")));
}

template <class T>
ForwardOutput<T> Model<T>::forward(ag::Graph<T>& g, const std::vector<SequenceInput<T>>& batch,
                                   const ForwardOptions& options) const {
    if (batch.empty()) throw std::invalid_argument("model: empty batch");
    auto& s = const_cast<ParameterStore<T>&>(store_);
    const int d = config_.d_model;

    ForwardOutput<T> out;
    std::vector<Position> positions;
    ag::AttentionLayout attn{config_.heads, config_.head_dim, {}};
    std::vector<Modality> modality;
    std::vector<typename ag::Graph<T>::RowPart> parts;
    std::vector<int> text_rows, text_ids;
    std::vector<int> gen_rows;

    int offset = 0;
    for (int b = 0; b < static_cast<int>(batch.size()); ++b) {
        const auto& in = batch[static_cast<std::size_t>(b)];
        if (!in.seq) throw std::invalid_argument("model: sequence input without a sequence");
        const auto& seq = *in.seq;
        const int n = seq.size();
        if (static_cast<int>(seq.segment_of.size()) != n) throw std::invalid_argument("model: sequence not finalized");
        if (in.mode == PositionMode::Inference) {
            if (auto v = validate_inference_layout(seq.segments)) throw std::invalid_argument("model: " + v->message);
        }
        const auto pos = assign_positions(seq.segments, in.mode, config_.vit_grid);
        positions.insert(positions.end(), pos.begin(), pos.end());
        attn.blocks.push_back({offset, n, std::make_shared<const AttentionMask>(build_mask(seq.segments))});

        if (in.images.size() < seq.images.size()) throw std::invalid_argument("model: missing image payloads");
        std::vector<int> image_first_row(seq.images.size(), -1);
        int row = offset;
        for (const auto& segment : seq.segments) {
            const bool image = is_image(segment.kind);
            for (int k = 0; k < segment.token_count; ++k) modality.push_back(image ? Modality::Image : Modality::Text);
            if (!image) {
                for (int k = 0; k < segment.token_count; ++k) {
                    const int id = seq.tokens[static_cast<std::size_t>(row - offset + k)];
                    if (id < 0 || id >= config_.vocab_size) throw std::invalid_argument("model: token id out of range");
                    text_rows.push_back(row + k);
                    text_ids.push_back(id);
                }
                row += segment.token_count;
                continue;
            }
            const auto& payload = in.images[static_cast<std::size_t>(segment.image_id)];
            std::vector<int> rows(static_cast<std::size_t>(segment.token_count));
            std::iota(rows.begin(), rows.end(), row);
            if (segment.kind == SegmentKind::CondImageVit) {
                if (payload.vit_features.rows() != segment.token_count)
                    throw std::invalid_argument("model: vision feature count does not match segment");
                parts.push_back({project_vit(g, payload.vit_features), rows});
            } else {
                if (payload.latents.rows() != segment.token_count)
                    throw std::invalid_argument("model: latent token count does not match segment");
                if (!(payload.t >= 0.0 && payload.t <= 1.0)) throw std::invalid_argument("model: timestep outside [0, 1]");
                auto temb = timestep_embedding(g, payload.t);
                parts.push_back({project_vae(g, payload.latents, temb, options.force_identity_modulation), rows});
                const int local = row - offset;
                if (config_.timestep_token >= 0 && local > 0 &&
                    seq.tokens[static_cast<std::size_t>(local - 1)] == config_.timestep_token)
                    parts.push_back({temb, {row - 1}});
                if (segment.kind == SegmentKind::GenImage) {
                    out.gen_spans.push_back({b, segment.image_id, static_cast<int>(gen_rows.size()), segment.token_count});
                    gen_rows.insert(gen_rows.end(), rows.begin(), rows.end());
                }
            }
            image_first_row[static_cast<std::size_t>(segment.image_id)] = row;
            row += segment.token_count;
        }

        if (in.all_targets) {
            for (int p = 0; p + 1 < n; ++p) {
                if (seq.loss_mask[static_cast<std::size_t>(p + 1)]) {
                    out.logit_rows.push_back(offset + p);
                    out.logit_targets.push_back(seq.tokens[static_cast<std::size_t>(p + 1)]);
                }
            }
        } else {
            for (int p : in.logit_positions) {
                if (p < 0 || p >= n) throw std::invalid_argument("model: logit position out of range");
                out.logit_rows.push_back(offset + p);
                out.logit_targets.push_back(p + 1 < n ? seq.tokens[static_cast<std::size_t>(p + 1)] : -1);
            }
        }
        offset += n;
    }
    out.packed_rows = offset;

    if (!text_rows.empty()) parts.push_back({g.gather_rows(g.param(s.at("tok_emb")), text_ids), text_rows});
    auto x = g.scatter_rows(offset, d, std::move(parts));
    if (options.input_delta) {
        Matrix<T> delta = Matrix<T>::Zero(offset, d);
        for (const auto& [r, v] : *options.input_delta)
            for (int c = 0; c < d && c < static_cast<int>(v.size()); ++c) delta(r, c) = static_cast<T>(v[static_cast<std::size_t>(c)]);
        x = g.add(x, g.constant(std::move(delta)));
    }

    auto tables = std::make_shared<const RotaryTables>(rope_tables(positions, config_.head_dim, config_.rope_base));
    std::vector<std::pair<ag::Var, T>> aux_terms;
    for (int l = 0; l < config_.layers; ++l) {
        const auto& layer = layers_[static_cast<std::size_t>(l)];
        auto h = g.rms_norm(x, g.param(*layer.attn_norm));
        auto q = g.rope(g.matmul(h, g.param(*layer.wq)), tables);
        auto k = g.rope(g.matmul(h, g.param(*layer.wk)), tables);
        auto v = g.matmul(h, g.param(*layer.wv));
        auto a = g.attention(q, k, v, attn);
        x = g.add(x, g.matmul(a, g.param(*layer.wo)));
        auto h2 = g.rms_norm(x, g.param(*layer.ffn_norm));
        auto moe = layer.moe->forward(g, h2, modality, l, options.stats);
        x = g.add(x, moe.out);
        aux_terms.push_back({moe.aux, T(1) / static_cast<T>(config_.layers)});
    }
    out.hidden = g.rms_norm(x, g.param(s.at("final_norm")));
    out.aux = g.weighted_sum(std::move(aux_terms));

    if (!out.logit_rows.empty()) {
        auto rows = g.gather_rows(out.hidden, out.logit_rows);
        out.logits = config_.tie_embeddings ? g.matmul_bt(rows, g.param(s.at("tok_emb")))
                                            : g.matmul(rows, g.param(s.at("head")));
    }
    if (!gen_rows.empty()) {
        auto rows = g.gather_rows(out.hidden, gen_rows);
        out.velocity = g.add_row(g.matmul(rows, g.param(s.at("vel.w"))), g.param(s.at("vel.b")));
    }
    return out;
}

template <class T>
LossTerms<T> hybrid_loss(ag::Graph<T>& g, const Model<T>& model, const ForwardOutput<T>& out,
                         const std::vector<Matrix<T>>& velocity_targets) {
    const auto& cfg = model.config();
    LossTerms<T> terms;
    std::vector<std::pair<ag::Var, T>> total;

    std::vector<int> ce_rows;
    std::vector<int> ce_targets;
    for (std::size_t i = 0; i < out.logit_targets.size(); ++i) {
        if (out.logit_targets[i] < 0) continue;
        ce_rows.push_back(static_cast<int>(i));
        ce_targets.push_back(out.logit_targets[i]);
    }
    terms.ce_targets = static_cast<int>(ce_targets.size());
    terms.fm_tokens = out.velocity.valid() ? static_cast<int>(g.value(out.velocity).rows()) : 0;
    if (terms.ce_targets == 0 && terms.fm_tokens == 0)
        throw std::invalid_argument("loss: batch has no text targets and no gen-image tokens (no training signal)");

    if (terms.ce_targets > 0) {
        auto logits = ce_rows.size() == out.logit_targets.size() ? out.logits : g.gather_rows(out.logits, ce_rows);
        auto ce = g.cross_entropy(logits, std::move(ce_targets));
        terms.ce = static_cast<double>(g.scalar(ce));
        total.push_back({ce, static_cast<T>(cfg.ce_weight)});
    }
    if (terms.fm_tokens > 0) {
        if (velocity_targets.size() != out.gen_spans.size())
            throw std::invalid_argument("loss: one velocity target per gen image is required");
        Matrix<T> target(terms.fm_tokens, cfg.latent_channels);
        for (std::size_t i = 0; i < out.gen_spans.size(); ++i) {
            const auto& span = out.gen_spans[i];
            const auto& vt = velocity_targets[i];
            if (vt.rows() != span.count || vt.cols() != cfg.latent_channels)
                throw std::invalid_argument("loss: velocity target shape mismatch");
            target.middleRows(span.row, span.count) = vt;
        }
        auto fm = g.mse(out.velocity, std::move(target));
        terms.fm = static_cast<double>(g.scalar(fm));
        total.push_back({fm, static_cast<T>(cfg.fm_weight)});
    }
    terms.aux = static_cast<double>(g.scalar(out.aux));
    if (cfg.moe.aux_loss_enabled && cfg.moe.aux_loss_weight > 0)
        total.push_back({out.aux, static_cast<T>(cfg.moe.aux_loss_weight)});
    terms.total = g.weighted_sum(std::move(total));
    terms.total_value = static_cast<double>(g.scalar(terms.total));
    return terms;
}

template class Model<float>;
template class Model<double>;
template LossTerms<float> hybrid_loss(ag::Graph<float>&, const Model<float>&, const ForwardOutput<float>&,
                                      const std::vector<Matrix<float>>&);
template LossTerms<double> hybrid_loss(ag::Graph<double>&, const Model<double>&, const ForwardOutput<double>&,
                                       const std::vector<Matrix<double>>&);

}  // namespace mmgen
