#pragma once

// Decoupled-weight-decay Adam with global-norm clipping and a linear-warmup
// cosine schedule.

#include <cmath>
#include <map>
#include <numbers>
#include <string>

#include "mmgen/config.hpp"
#include "mmgen/params.hpp"

namespace mmgen {

// Learning rate at a 0-based step of a stage with `total` steps.
inline double scheduled_lr(const OptimizerConfig& cfg, double peak, int step, int total) {
    if (cfg.warmup > 0 && step < cfg.warmup) return peak * static_cast<double>(step + 1) / cfg.warmup;
    const int span = std::max(1, total - cfg.warmup);
    const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup) / span);
    const double floor = peak * cfg.min_lr_ratio;
    return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <class T>
struct Moments {
    Matrix<T> m;
    Matrix<T> v;
    long long steps = 0;
};

template <class T>
class AdamW {
public:
    explicit AdamW(OptimizerConfig config = {}) : config_(config) {}

    const OptimizerConfig& config() const { return config_; }
    std::map<std::string, Moments<T>>& state() { return state_; }
    const std::map<std::string, Moments<T>>& state() const { return state_; }

    // Global gradient norm over trainable parameters (before clipping).
    static double grad_norm(const ParameterStore<T>& store) {
        double sq = 0;
        for (std::size_t i = 0; i < store.size(); ++i) {
            const auto& p = store[i];
            if (p.trainable && p.grad.size() == p.value.size()) sq += p.grad.template cast<double>().squaredNorm();
        }
        return std::sqrt(sq);
    }

    // Clips, then updates every trainable parameter. Returns the pre-clip norm.
    double step(ParameterStore<T>& store, double lr) {
        const double norm = grad_norm(store);
        if (!std::isfinite(norm)) throw std::domain_error("optimizer: non-finite gradient norm");
        const double clip = config_.grad_clip > 0 && norm > config_.grad_clip ? config_.grad_clip / norm : 1.0;
        for (std::size_t i = 0; i < store.size(); ++i) {
            auto& p = store[i];
            if (!p.trainable) continue;
            auto& s = state_[p.name];
            if (s.m.size() == 0) {
                s.m.setZero(p.value.rows(), p.value.cols());
                s.v.setZero(p.value.rows(), p.value.cols());
            }
            ++s.steps;
            const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
            const Matrix<T> g = p.grad * static_cast<T>(clip);
            s.m = b1 * s.m + (T(1) - b1) * g;
            s.v = b2 * s.v + (T(1) - b2) * g.cwiseProduct(g);
            const T c1 = static_cast<T>(1.0 - std::pow(config_.beta1, static_cast<double>(s.steps)));
            const T c2 = static_cast<T>(1.0 - std::pow(config_.beta2, static_cast<double>(s.steps)));
            const bool decay = p.value.rows() > 1 && p.value.cols() > 1;
            if (decay) p.value *= static_cast<T>(1.0 - lr * config_.weight_decay);
            p.value.array() -= static_cast<T>(lr) * (s.m.array() / c1) /
                               ((s.v.array() / c2).sqrt() + static_cast<T>(config_.eps));
        }
        return norm;
    }

private:
    OptimizerConfig config_;
    std::map<std::string, Moments<T>> state_;
};

}  // namespace mmgen
