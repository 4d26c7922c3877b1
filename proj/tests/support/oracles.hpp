#pragma once

// Independent reference implementations and random generators shared by the
// unit tests and the acceptance suite. Nothing here calls into the code it
// checks except for plain data types.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "mmgen/seqlayout.hpp"

namespace mmgen::oracle {

inline std::vector<int> owner_of(const std::vector<Segment>& segments) {
    std::vector<int> owner;
    for (std::size_t s = 0; s < segments.size(); ++s)
        for (int k = 0; k < segments[s].token_count; ++k) owner.push_back(static_cast<int>(s));
    return owner;
}

// allowed[i][j] straight from the three rules.
inline std::vector<std::vector<bool>> rule_mask(const std::vector<Segment>& segments) {
    const auto owner = owner_of(segments);
    const int n = static_cast<int>(owner.size());
    std::vector<std::vector<bool>> m(static_cast<std::size_t>(n), std::vector<bool>(static_cast<std::size_t>(n)));
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const auto& sj = segments[static_cast<std::size_t>(owner[static_cast<std::size_t>(j)])];
            const bool same = owner[static_cast<std::size_t>(i)] == owner[static_cast<std::size_t>(j)];
            bool v;
            if (sj.kind == SegmentKind::GenImage && !same)
                v = false;
            else if (same && sj.kind != SegmentKind::Text)
                v = true;
            else
                v = j <= i;
            m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = v;
        }
    }
    return m;
}

inline Grid random_grid(std::mt19937_64& rng, int budget) {
    std::uniform_int_distribution<int> side(1, 4);
    Grid g{side(rng), side(rng)};
    while (g.tokens() > budget) {
        if (g.h >= g.w)
            --g.h;
        else
            --g.w;
    }
    return g;
}

struct LayoutLimits {
    int max_tokens = 64;
    int max_gen = 3;
    bool allow_cond = true;
};

// Text runs, cond images (vae + vit halves sharing an id) and gen images in
// random order, never longer than max_tokens.
inline std::vector<Segment> random_layout(std::mt19937_64& rng, LayoutLimits limits = {}) {
    std::vector<Segment> out;
    std::uniform_int_distribution<int> pick(0, 9);
    std::uniform_int_distribution<int> text_len(1, 6);
    int used = 0;
    int gens = 0;
    int image_id = 0;
    const int target = std::uniform_int_distribution<int>(1, limits.max_tokens)(rng);
    while (used < target) {
        const int budget = limits.max_tokens - used;
        const int r = pick(rng);
        if (r < 5 || budget < 2) {
            const int len = std::min(text_len(rng), budget);
            out.push_back(Segment::text(len));
            used += len;
        } else if (r < 8 && gens < limits.max_gen) {
            const Grid g = random_grid(rng, budget);
            out.push_back(Segment::image(SegmentKind::GenImage, g, image_id++));
            used += g.tokens();
            ++gens;
        } else if (limits.allow_cond && budget >= 2) {
            const Grid a = random_grid(rng, budget - 1);
            const Grid b = random_grid(rng, budget - a.tokens());
            out.push_back(Segment::image(SegmentKind::CondImageVae, a, image_id));
            out.push_back(Segment::image(SegmentKind::CondImageVit, b, image_id++));
            used += a.tokens() + b.tokens();
        }
    }
    return out;
}

inline std::vector<Segment> random_text_layout(std::mt19937_64& rng, int max_tokens) {
    std::vector<Segment> out;
    int left = std::uniform_int_distribution<int>(1, max_tokens)(rng);
    while (left > 0) {
        const int len = std::min(left, std::uniform_int_distribution<int>(1, 8)(rng));
        out.push_back(Segment::text(len));
        left -= len;
    }
    return out;
}

// Aspect of ratio grid point i: 4^((2i - (R-1)) / (R-1)).
inline double grid_aspect(int i, int R) {
    return std::pow(4.0, static_cast<double>(2 * i - (R - 1)) / static_cast<double>(R - 1));
}

// Nearest grid point in log space by scanning every index; ties go up.
inline int nearest_ratio_index(double aspect, int R) {
    const double a = std::clamp(aspect, 0.25, 4.0);
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int i = 0; i < R; ++i) {
        const double d = std::abs(std::log(a) - std::log(grid_aspect(i, R)));
        if (d <= best_d + 1e-12) {
            best = i;
            best_d = std::min(d, best_d);
        }
    }
    return best;
}

// Integer nearest to `target` by scanning 1..limit; exact halves go up.
inline int nearest_integer_scan(double target, int limit) {
    int best = 1;
    double best_d = std::abs(target - 1.0);
    for (int v = 2; v <= limit; ++v) {
        const double d = std::abs(target - v);
        if (d < best_d || d == best_d) {
            best = v;
            best_d = d;
        }
    }
    return best;
}

// Latent grid whose sides are the integers nearest the exact side lengths
// A / sqrt(aspect) and A * sqrt(aspect), A = anchor / f.
inline Grid exhaustive_grid(int anchor, double aspect, int f) {
    const double side = static_cast<double>(anchor) / f;
    const int limit = 4 * anchor / f + 2;
    return Grid{nearest_integer_scan(side / std::sqrt(aspect), limit),
                nearest_integer_scan(side * std::sqrt(aspect), limit)};
}

// Standard 1D rotary table in the half-and-half layout: row n, column j and
// j + d/2 both hold angle n * base^(-2j/d).
struct Rope1D {
    std::vector<double> cos;
    std::vector<double> sin;
};

inline Rope1D rope_1d(int n, int head_dim, double base = 10000.0) {
    Rope1D r;
    r.cos.assign(static_cast<std::size_t>(n * head_dim), 0.0);
    r.sin.assign(r.cos.size(), 0.0);
    const int half = head_dim / 2;
    for (int p = 0; p < n; ++p) {
        for (int j = 0; j < half; ++j) {
            const double theta = std::pow(base, -2.0 * j / static_cast<double>(head_dim));
            const double angle = static_cast<double>(p) * theta;
            for (int col : {j, j + half}) {
                r.cos[static_cast<std::size_t>(p * head_dim + col)] = std::cos(angle);
                r.sin[static_cast<std::size_t>(p * head_dim + col)] = std::sin(angle);
            }
        }
    }
    return r;
}

// Smoothed, renormalized KL(p || q) from raw count vectors.
inline double kl_counts(const std::vector<double>& v, const std::vector<double>& t, double eps) {
    double sv = 0, st = 0;
    for (double x : v) sv += x;
    for (double x : t) st += x;
    std::vector<double> p(v.size()), q(t.size());
    double zp = 0, zq = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        p[i] = v[i] / sv + eps;
        q[i] = t[i] / st + eps;
        zp += p[i];
        zq += q[i];
    }
    double kl = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double pi = p[i] / zp;
        const double qi = q[i] / zq;
        if (pi > 0) kl += pi * std::log(pi / qi);
    }
    return kl;
}

}  // namespace mmgen::oracle
