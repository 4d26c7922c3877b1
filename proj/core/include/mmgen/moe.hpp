#pragma once

// Mixture-of-experts feed-forward with a shared expert, softmax top-k
// routing, per-modality activation counting, and the expert specialization
// analytics (heatmap and per-layer KL divergence).

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mmgen/autograd.hpp"
#include "mmgen/params.hpp"

namespace mmgen {

struct MoEConfig {
    int num_experts = 64;
    int top_k = 8;
    int shared_experts = 1;
    int expert_hidden = 64;
    double aux_loss_weight = 0.01;
    bool aux_loss_enabled = true;

    void validate() const;
};

enum class Modality : std::uint8_t { Text, Image };

// Per-layer, per-expert activation counts split by token modality.
class ExpertStats {
public:
    ExpertStats() = default;
    ExpertStats(int layers, int experts);

    int layers() const { return layers_; }
    int experts() const { return experts_; }

    std::int64_t image(int layer, int expert) const { return v_[index(layer, expert)]; }
    std::int64_t text(int layer, int expert) const { return t_[index(layer, expert)]; }
    void record(int layer, int expert, Modality m, std::int64_t count = 1);

    std::int64_t image_total(int layer) const;
    std::int64_t text_total(int layer) const;

    // Element-wise sum; worker-local accumulators merge into one result
    // independent of merge order.
    void merge(const ExpertStats& other);
    void clear();

    // "layer,expert,v,t"
    void write_csv(std::ostream& os) const;
    static ExpertStats read_csv(std::istream& is);

    friend bool operator==(const ExpertStats&, const ExpertStats&) = default;

private:
    std::size_t index(int layer, int expert) const;

    int layers_ = 0;
    int experts_ = 0;
    std::vector<std::int64_t> v_;
    std::vector<std::int64_t> t_;
};

// Layers x experts matrix of v_hat / (v_hat + t_hat) with v_hat, t_hat the
// per-layer normalized counts. An expert unused by both modalities reads 0.5.
// Throws std::domain_error naming the layer when a modality is empty.
std::vector<std::vector<double>> heatmap_stat(const ExpertStats& stats);

// KL(v_hat_i + eps || t_hat_i + eps) per layer, each smoothed distribution
// renormalized before the divergence.
std::vector<double> kl_per_layer(const ExpertStats& stats, double epsilon = 1e-8);

void write_heatmap_csv(std::ostream& os, const std::vector<std::vector<double>>& heatmap);
void write_kl_csv(std::ostream& os, const std::vector<double>& kl);

template <class T>
struct Routing {
    Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> indices;  // m x k
    Matrix<T> weights;                                                         // m x k
    Matrix<T> probs;                                                           // m x E
};

// Pure routing: softmax over token_states * gate_weights, top-k with ties to
// the lower index, selected weights renormalized.
template <class T>
Routing<T> route(const Matrix<T>& token_states, const Matrix<T>& gate_weights, int top_k) {
    if (token_states.rows() < 1) throw std::invalid_argument("moe: route needs at least one token");
    ag::Graph<T> g(false);
    auto x = g.constant(token_states);
    auto w = g.constant(gate_weights);
    Routing<T> r;
    auto weights = g.topk_softmax(g.matmul(x, w), top_k, r.indices, &r.probs);
    r.weights = g.value(weights);
    return r;
}

template <class T>
struct MoEOutput {
    ag::Var out;
    ag::Var aux;  // 1x1 switch load-balance term (unweighted)
};

template <class T>
class MoELayer {
public:
    MoELayer(ParameterStore<T>& store, const std::string& prefix, int d_model, const MoEConfig& config,
             std::mt19937_64& rng);

    const MoEConfig& config() const { return config_; }

    // Output = sum_shared g(x) + sum_selected weight * expert(x). When stats
    // is set, every selected (layer, expert) counter of the token's modality
    // is incremented.
    MoEOutput<T> forward(ag::Graph<T>& g, ag::Var x, std::span<const Modality> modality, int layer,
                         ExpertStats* stats) const;

    ag::Parameter<T>& gate() const { return *gate_; }

private:
    struct Mlp {
        ag::Parameter<T>* w1;
        ag::Parameter<T>* w2;
    };
    ag::Var mlp(ag::Graph<T>& g, const Mlp& m, ag::Var x) const;

    MoEConfig config_;
    ag::Parameter<T>* gate_ = nullptr;
    std::vector<Mlp> experts_;
    std::vector<Mlp> shared_;
};

}  // namespace mmgen
