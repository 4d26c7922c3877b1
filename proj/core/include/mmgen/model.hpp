#pragma once

// Decoder backbone over packed multimodal sequences: generalized causal
// attention with 2D RoPE, MoE feed-forward, a timestep-modulated residual
// projector for VAE latents, a two-layer MLP projector for vision features,
// a tied text head and a velocity head for flow matching.

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "mmgen/attnmask.hpp"
#include "mmgen/autograd.hpp"
#include "mmgen/moe.hpp"
#include "mmgen/params.hpp"
#include "mmgen/rope2d.hpp"
#include "mmgen/seqlayout.hpp"

namespace mmgen {

enum class Precision { F32, F64 };

struct ModelConfig {
    int layers = 2;
    int d_model = 16;
    int heads = 2;
    int head_dim = 8;
    MoEConfig moe{4, 2, 1, 32, 0.01, true};
    int vocab_size = 32;
    int latent_channels = 8;
    int vit_dim = 32;
    Grid vit_grid{4, 4};
    int time_freq_dim = 32;
    double rope_base = 10000.0;
    bool tie_embeddings = true;
    double fm_weight = 1.0;
    double ce_weight = 1.0;
    // Token id whose embedding receives the image timestep embedding; -1 disables.
    int timestep_token = -1;
    std::uint64_t init_seed = 0;
    Precision precision = Precision::F32;

    void validate() const;
};

// Inputs for one image of a sequence (indexed by Segment::image_id).
template <class T>
struct ImagePayload {
    Matrix<T> latents;       // tokens x latent_channels: x_t for gen images, clean for cond
    Matrix<T> vit_features;  // vit tokens x vit_dim, cond images only
    double t = 1.0;          // 1 = clean data
};

template <class T>
struct SequenceInput {
    const TokenSequence* seq = nullptr;
    std::vector<ImagePayload<T>> images;
    PositionMode mode = PositionMode::Training;
    // Positions whose next-token logits are needed; empty = loss-mask targets.
    std::vector<int> logit_positions;
    bool all_targets = true;
};

struct GenSpan {
    int sequence = 0;
    int image_id = 0;
    int row = 0;    // first row in ForwardOutput::velocity
    int count = 0;
};

template <class T>
struct ForwardOutput {
    ag::Var hidden;               // packed rows x d (final norm applied)
    ag::Var logits;               // one row per logit position
    std::vector<int> logit_rows;  // packed row of each logit
    std::vector<int> logit_targets;
    ag::Var velocity;             // one row per gen-image token
    std::vector<GenSpan> gen_spans;
    ag::Var aux;                  // mean switch loss over layers
    int packed_rows = 0;
};

struct ForwardOptions {
    ExpertStats* stats = nullptr;
    // Identity modulation in the VAE projector (scale 1, shift 0).
    bool force_identity_modulation = false;
    // Per-row input perturbation hook for causality tests: row -> delta.
    const std::vector<std::pair<int, std::vector<double>>>* input_delta = nullptr;
};

template <class T>
class Model {
public:
    explicit Model(ModelConfig config);
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ModelConfig& config() const { return config_; }
    ParameterStore<T>& params() { return store_; }
    const ParameterStore<T>& params() const { return store_; }

    ForwardOutput<T> forward(ag::Graph<T>& g, const std::vector<SequenceInput<T>>& batch,
                             const ForwardOptions& options = {}) const;

    // Sinusoidal features of t (scaled by 1000) -> MLP -> 1 x d.
    ag::Var timestep_embedding(ag::Graph<T>& g, double t) const;
    ag::Var project_vae(ag::Graph<T>& g, const Matrix<T>& latents, ag::Var temb, bool identity_modulation = false) const;
    ag::Var project_vit(ag::Graph<T>& g, const Matrix<T>& features) const;

    // Latent normalization constants (non-trainable): model-space latents are
    // (codec latents - mean) / std per channel.
    Matrix<T>& latent_mean() { return store_.at("latent_norm.mean").value; }
    Matrix<T>& latent_std() { return store_.at("latent_norm.std").value; }
    const Matrix<T>& latent_mean() const { return store_.at("latent_norm.mean").value; }
    const Matrix<T>& latent_std() const { return store_.at("latent_norm.std").value; }

private:
    struct Layer {
        ag::Parameter<T>* attn_norm;
        ag::Parameter<T>* wq;
        ag::Parameter<T>* wk;
        ag::Parameter<T>* wv;
        ag::Parameter<T>* wo;
        ag::Parameter<T>* ffn_norm;
        std::unique_ptr<MoELayer<T>> moe;
    };

    ModelConfig config_;
    ParameterStore<T> store_;
    std::vector<Layer> layers_;
};

// ---------------------------------------------------------------------------
// Hybrid loss.

template <class T>
struct LossTerms {
    ag::Var total;
    double ce = 0;
    double fm = 0;
    double aux = 0;
    double total_value = 0;
    int ce_targets = 0;
    int fm_tokens = 0;
};

// ce: mean next-token cross-entropy over loss-masked targets; fm: mean
// squared error of the velocity against `velocity_targets` (one matrix per
// gen image, in ForwardOutput::gen_spans order); total = ce_weight * ce +
// fm_weight * fm + aux_loss_weight * aux. Throws when there is neither a
// text target nor a gen token.
template <class T>
LossTerms<T> hybrid_loss(ag::Graph<T>& g, const Model<T>& model, const ForwardOutput<T>& out,
                         const std::vector<Matrix<T>>& velocity_targets);

}  // namespace mmgen
