#include "mmgen/rope2d.hpp"

#include <algorithm>
#include <ostream>

namespace mmgen {

std::vector<Position> assign_positions(std::span<const Segment> segments, PositionMode mode, Grid vit_grid) {
    std::vector<Position> out;
    out.reserve(static_cast<std::size_t>(total_tokens(segments)));
    long cursor = 0;
    auto check = [](long v) {
        if (v >= kMaxPosition) throw std::out_of_range("rope2d: position coordinate overflow");
        return static_cast<int>(v);
    };
    for (const auto& s : segments) {
        validate_segment(s);
        if (s.kind == SegmentKind::Text) {
            for (int k = 0; k < s.token_count; ++k, ++cursor) {
                const int p = check(cursor);
                out.push_back({p, p});
            }
            continue;
        }
        // Image kinds without a grid are laid out as one row.
        const Grid g = s.grid.value_or(Grid{1, s.token_count});
        check(cursor + std::max(g.h, g.w));
        for (int r = 0; r < g.h; ++r)
            for (int c = 0; c < g.w; ++c) out.push_back({static_cast<int>(cursor + r), static_cast<int>(cursor + c)});
        cursor += std::max(g.h, g.w);
        if (mode == PositionMode::Training && s.kind == SegmentKind::GenImage) cursor += std::max(vit_grid.h, vit_grid.w);
    }
    return out;
}

void write_positions_csv(std::ostream& os, std::span<const Segment> segments, std::span<const Position> positions) {
    os << "token,segment,kind,x,y\n";
    std::size_t t = 0;
    for (std::size_t s = 0; s < segments.size(); ++s) {
        for (int k = 0; k < segments[s].token_count && t < positions.size(); ++k, ++t) {
            os << t << ',' << s << ',' << to_string(segments[s].kind) << ',' << positions[t].x << ',' << positions[t].y
               << '\n';
        }
    }
}

std::vector<double> rope_frequencies(int head_dim, double base) {
    if (head_dim <= 0 || head_dim % 2 != 0) throw std::invalid_argument("rope2d: head_dim must be even and positive");
    std::vector<double> theta(static_cast<std::size_t>(head_dim / 2));
    for (int j = 0; j < head_dim / 2; ++j)
        theta[static_cast<std::size_t>(j)] = std::pow(base, -2.0 * j / static_cast<double>(head_dim));
    return theta;
}

RotaryTables rope_tables(std::span<const Position> positions, int head_dim, double base) {
    const auto theta = rope_frequencies(head_dim, base);
    const int half = head_dim / 2;
    RotaryTables t;
    t.n = static_cast<int>(positions.size());
    t.head_dim = head_dim;
    t.cos.resize(static_cast<std::size_t>(t.n) * static_cast<std::size_t>(head_dim));
    t.sin.resize(t.cos.size());
    for (int i = 0; i < t.n; ++i) {
        const auto& p = positions[static_cast<std::size_t>(i)];
        for (int j = 0; j < half; ++j) {
            const double coord = (j % 2 == 0) ? static_cast<double>(p.x) : static_cast<double>(p.y);
            const double angle = coord * theta[static_cast<std::size_t>(j)];
            const double c = std::cos(angle);
            const double s = std::sin(angle);
            const auto row = static_cast<std::size_t>(i * head_dim);
            t.cos[row + static_cast<std::size_t>(j)] = c;
            t.cos[row + static_cast<std::size_t>(j + half)] = c;
            t.sin[row + static_cast<std::size_t>(j)] = s;
            t.sin[row + static_cast<std::size_t>(j + half)] = s;
        }
    }
    return t;
}

}  // namespace mmgen
