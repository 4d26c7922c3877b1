#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "mmgen/moe.hpp"

namespace mmgen {

void MoEConfig::validate() const {
    if (num_experts < 1) throw std::invalid_argument("moe: num_experts must be >= 1");
    if (top_k < 1 || top_k > num_experts) throw std::invalid_argument("moe: top_k must be in [1, num_experts]");
    if (shared_experts < 0) throw std::invalid_argument("moe: shared_experts must be >= 0");
    if (expert_hidden < 1) throw std::invalid_argument("moe: expert_hidden must be >= 1");
    if (aux_loss_weight < 0) throw std::invalid_argument("moe: aux_loss_weight must be >= 0");
}

ExpertStats::ExpertStats(int layers, int experts)
    : layers_(layers),
      experts_(experts),
      v_(static_cast<std::size_t>(layers) * static_cast<std::size_t>(experts), 0),
      t_(v_.size(), 0) {
    if (layers < 0 || experts < 0) throw std::invalid_argument("moe: negative stats shape");
}

std::size_t ExpertStats::index(int layer, int expert) const {
    if (layer < 0 || layer >= layers_ || expert < 0 || expert >= experts_)
        throw std::out_of_range("moe: stats index out of range");
    return static_cast<std::size_t>(layer) * static_cast<std::size_t>(experts_) + static_cast<std::size_t>(expert);
}

void ExpertStats::record(int layer, int expert, Modality m, std::int64_t count) {
    auto& slot = (m == Modality::Image ? v_ : t_)[index(layer, expert)];
    slot += count;
}

std::int64_t ExpertStats::image_total(int layer) const {
    std::int64_t s = 0;
    for (int e = 0; e < experts_; ++e) s += image(layer, e);
    return s;
}

std::int64_t ExpertStats::text_total(int layer) const {
    std::int64_t s = 0;
    for (int e = 0; e < experts_; ++e) s += text(layer, e);
    return s;
}

void ExpertStats::merge(const ExpertStats& other) {
    if (layers_ == 0 && experts_ == 0) {
        *this = other;
        return;
    }
    if (other.layers_ != layers_ || other.experts_ != experts_) throw std::invalid_argument("moe: stats shape mismatch");
    for (std::size_t i = 0; i < v_.size(); ++i) {
        v_[i] += other.v_[i];
        t_[i] += other.t_[i];
    }
}

void ExpertStats::clear() {
    std::fill(v_.begin(), v_.end(), 0);
    std::fill(t_.begin(), t_.end(), 0);
}

void ExpertStats::write_csv(std::ostream& os) const {
    os << "layer,expert,v,t\n";
    for (int l = 0; l < layers_; ++l)
        for (int e = 0; e < experts_; ++e) os << l << ',' << e << ',' << image(l, e) << ',' << text(l, e) << '\n';
}

ExpertStats ExpertStats::read_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != "layer,expert,v,t") throw std::invalid_argument("moe: bad stats CSV header");
    struct Row {
        int l, e;
        std::int64_t v, t;
    };
    std::vector<Row> rows;
    int layers = 0, experts = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        Row r{};
        char c1 = 0, c2 = 0, c3 = 0;
        if (!(ls >> r.l >> c1 >> r.e >> c2 >> r.v >> c3 >> r.t) || c1 != ',' || c2 != ',' || c3 != ',')
            throw std::invalid_argument("moe: malformed stats CSV row: " + line);
        if (r.v < 0 || r.t < 0) throw std::invalid_argument("moe: negative count in stats CSV");
        layers = std::max(layers, r.l + 1);
        experts = std::max(experts, r.e + 1);
        rows.push_back(r);
    }
    ExpertStats s(layers, experts);
    for (const auto& r : rows) {
        s.record(r.l, r.e, Modality::Image, r.v);
        s.record(r.l, r.e, Modality::Text, r.t);
    }
    return s;
}

namespace {

void check_modalities(const ExpertStats& stats, int layer) {
    if (stats.image_total(layer) <= 0)
        throw std::domain_error("moe: layer " + std::to_string(layer) + " has no image-token activations");
    if (stats.text_total(layer) <= 0)
        throw std::domain_error("moe: layer " + std::to_string(layer) + " has no text-token activations");
}

}  // namespace

std::vector<std::vector<double>> heatmap_stat(const ExpertStats& stats) {
    std::vector<std::vector<double>> out(static_cast<std::size_t>(stats.layers()));
    for (int l = 0; l < stats.layers(); ++l) {
        check_modalities(stats, l);
        const double vs = static_cast<double>(stats.image_total(l));
        const double ts = static_cast<double>(stats.text_total(l));
        auto& row = out[static_cast<std::size_t>(l)];
        row.resize(static_cast<std::size_t>(stats.experts()));
        for (int e = 0; e < stats.experts(); ++e) {
            const double vh = static_cast<double>(stats.image(l, e)) / vs;
            const double th = static_cast<double>(stats.text(l, e)) / ts;
            row[static_cast<std::size_t>(e)] = (vh + th) > 0 ? vh / (vh + th) : 0.5;
        }
    }
    return out;
}

std::vector<double> kl_per_layer(const ExpertStats& stats, double epsilon) {
    if (epsilon < 0) throw std::invalid_argument("moe: epsilon must be >= 0");
    std::vector<double> out(static_cast<std::size_t>(stats.layers()));
    const auto experts = static_cast<std::size_t>(stats.experts());
    std::vector<double> p(experts), q(experts);
    for (int l = 0; l < stats.layers(); ++l) {
        check_modalities(stats, l);
        const double vs = static_cast<double>(stats.image_total(l));
        const double ts = static_cast<double>(stats.text_total(l));
        double ps = 0, qs = 0;
        for (int e = 0; e < stats.experts(); ++e) {
            p[static_cast<std::size_t>(e)] = static_cast<double>(stats.image(l, e)) / vs + epsilon;
            q[static_cast<std::size_t>(e)] = static_cast<double>(stats.text(l, e)) / ts + epsilon;
            ps += p[static_cast<std::size_t>(e)];
            qs += q[static_cast<std::size_t>(e)];
        }
        double kl = 0;
        for (std::size_t e = 0; e < experts; ++e) {
            const double pe = p[e] / ps;
            const double qe = q[e] / qs;
            if (pe <= 0) continue;
            kl += pe * std::log(pe / qe);
        }
        out[static_cast<std::size_t>(l)] = std::max(0.0, kl);
    }
    return out;
}

void write_heatmap_csv(std::ostream& os, const std::vector<std::vector<double>>& heatmap) {
    os << "layer,expert,value\n";
    os.precision(17);
    for (std::size_t l = 0; l < heatmap.size(); ++l)
        for (std::size_t e = 0; e < heatmap[l].size(); ++e) os << l << ',' << e << ',' << heatmap[l][e] << '\n';
}

void write_kl_csv(std::ostream& os, const std::vector<double>& kl) {
    os << "layer,kl\n";
    os.precision(17);
    for (std::size_t l = 0; l < kl.size(); ++l) os << l << ',' << kl[l] << '\n';
}

// ---------------------------------------------------------------------------

template <class T>
MoELayer<T>::MoELayer(ParameterStore<T>& store, const std::string& prefix, int d_model, const MoEConfig& config,
                      std::mt19937_64& rng)
    : config_(config) {
    config_.validate();
    const double in_std = 1.0 / std::sqrt(static_cast<double>(d_model));
    const double out_std = 1.0 / std::sqrt(static_cast<double>(config.expert_hidden));
    gate_ = &store.add(prefix + ".gate", d_model, config.num_experts, ag::ParamGroup::Transformer, Init::normal(in_std),
                       rng);
    auto make = [&](const std::string& name) {
        Mlp m{};
        m.w1 = &store.add(name + ".w1", d_model, config.expert_hidden, ag::ParamGroup::Transformer,
                          Init::normal(in_std), rng);
        m.w2 = &store.add(name + ".w2", config.expert_hidden, d_model, ag::ParamGroup::Transformer,
                          Init::normal(out_std * 0.5), rng);
        return m;
    };
    for (int s = 0; s < config.shared_experts; ++s) shared_.push_back(make(prefix + ".shared" + std::to_string(s)));
    for (int e = 0; e < config.num_experts; ++e) experts_.push_back(make(prefix + ".expert" + std::to_string(e)));
}

template <class T>
ag::Var MoELayer<T>::mlp(ag::Graph<T>& g, const Mlp& m, ag::Var x) const {
    return g.matmul(g.silu(g.matmul(x, g.param(*m.w1))), g.param(*m.w2));
}

template <class T>
MoEOutput<T> MoELayer<T>::forward(ag::Graph<T>& g, ag::Var x, std::span<const Modality> modality, int layer,
                                  ExpertStats* stats) const {
    const auto& xv = g.value(x);
    const int n = static_cast<int>(xv.rows());
    const int d = static_cast<int>(xv.cols());
    if (static_cast<int>(modality.size()) != n) throw std::invalid_argument("moe: modality tags do not match tokens");
    if (d != gate_->value.rows()) throw std::invalid_argument("moe: token width does not match gate");
    MoEOutput<T> result;
    if (n == 0) {
        result.out = g.constant(Matrix<T>::Zero(0, d));
        result.aux = g.constant(Matrix<T>::Zero(1, 1));
        return result;
    }
    const int k = config_.top_k;
    const int E = config_.num_experts;
    auto logits = g.matmul(x, g.param(*gate_));
    Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> idx;
    auto weights = g.topk_softmax(logits, k, idx);

    std::vector<std::vector<int>> rows(static_cast<std::size_t>(E));
    std::vector<std::vector<std::pair<int, int>>> slots(static_cast<std::size_t>(E));
    for (int r = 0; r < n; ++r) {
        for (int s = 0; s < k; ++s) {
            const int e = idx(r, s);
            rows[static_cast<std::size_t>(e)].push_back(r);
            slots[static_cast<std::size_t>(e)].push_back({r, s});
            if (stats) stats->record(layer, e, modality[static_cast<std::size_t>(r)]);
        }
    }

    std::vector<typename ag::Graph<T>::RowPart> parts;
    std::vector<int> all_rows(static_cast<std::size_t>(n));
    std::iota(all_rows.begin(), all_rows.end(), 0);
    for (const auto& m : shared_) parts.push_back({mlp(g, m, x), all_rows});
    for (int e = 0; e < E; ++e) {
        auto& er = rows[static_cast<std::size_t>(e)];
        if (er.empty()) continue;
        auto xe = g.gather_rows(x, er);
        auto ye = mlp(g, experts_[static_cast<std::size_t>(e)], xe);
        auto we = g.gather_elements(weights, slots[static_cast<std::size_t>(e)]);
        parts.push_back({g.scale_rows(ye, we), er});
    }
    result.out = g.scatter_rows(n, d, std::move(parts));

    std::vector<T> fraction(static_cast<std::size_t>(E), T(0));
    for (int e = 0; e < E; ++e)
        fraction[static_cast<std::size_t>(e)] =
            static_cast<T>(rows[static_cast<std::size_t>(e)].size()) / static_cast<T>(n * k);
    result.aux = g.switch_aux(logits, std::move(fraction));
    return result;
}

template class MoELayer<float>;
template class MoELayer<double>;

}  // namespace mmgen
