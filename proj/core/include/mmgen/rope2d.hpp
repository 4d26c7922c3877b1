#pragma once

// Generalized 2D rotary position embedding.
//
// Text tokens sit on the diagonal (p, p); image token (r, c) of a grid (h, w)
// sits at (x, y) = (p + r, p + c) and advances the cursor by max(h, w). Rotation
// pair j uses x * theta_j for even j and y * theta_j for odd j, so a
// text-only sequence reduces to ordinary 1D RoPE.

#include <cmath>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "mmgen/seqlayout.hpp"

namespace mmgen {

struct Position {
    int x = 0;
    int y = 0;
    friend bool operator==(const Position&, const Position&) = default;
};

enum class PositionMode { Training, Inference };

// Coordinates beyond this are not exactly representable as float angles.
constexpr long kMaxPosition = 1L << 24;

// In Training mode every GEN_IMAGE additionally advances the cursor by
// max(vit_grid.h, vit_grid.w): the advance of the vision half it gains once
// it re-enters the context as a cond image. Tokens after it then carry the
// positions they will have at inference.
std::vector<Position> assign_positions(std::span<const Segment> segments, PositionMode mode,
                                       Grid vit_grid = Grid{4, 4});

void write_positions_csv(std::ostream& os, std::span<const Segment> segments, std::span<const Position> positions);

// Frequencies theta_j = base^(-2j / head_dim), j in [0, head_dim / 2).
std::vector<double> rope_frequencies(int head_dim, double base);

// cos/sin tables, n x head_dim row-major, half-and-half: column j and
// column j + head_dim/2 hold the same angle.
struct RotaryTables {
    int n = 0;
    int head_dim = 0;
    std::vector<double> cos;
    std::vector<double> sin;

    double cos_at(int row, int col) const { return cos[static_cast<std::size_t>(row * head_dim + col)]; }
    double sin_at(int row, int col) const { return sin[static_cast<std::size_t>(row * head_dim + col)]; }
};

RotaryTables rope_tables(std::span<const Position> positions, int head_dim, double base = 10000.0);

// Rotates each head block of `x` (rows = tokens, cols = heads * head_dim) in
// place. Pair (j, j + head_dim/2) turns by the table angle; inverse turns by
// the negated angle, which is also the backward map.
template <class Derived>
void apply_rope(Eigen::MatrixBase<Derived>& x, const RotaryTables& tables, int row_offset = 0, bool inverse = false) {
    const int hd = tables.head_dim;
    const int half = hd / 2;
    if (hd <= 0 || x.cols() % hd != 0) throw std::invalid_argument("rope2d: columns are not a multiple of head_dim");
    if (row_offset < 0 || row_offset + x.rows() > tables.n) throw std::invalid_argument("rope2d: rows exceed tables");
    using Scalar = typename Derived::Scalar;
    const int heads = static_cast<int>(x.cols()) / hd;
    for (int r = 0; r < x.rows(); ++r) {
        const double* c = tables.cos.data() + static_cast<std::size_t>((r + row_offset) * hd);
        const double* s = tables.sin.data() + static_cast<std::size_t>((r + row_offset) * hd);
        for (int h = 0; h < heads; ++h) {
            const int base_col = h * hd;
            for (int j = 0; j < half; ++j) {
                const Scalar cj = static_cast<Scalar>(c[j]);
                const Scalar sj = inverse ? static_cast<Scalar>(-s[j]) : static_cast<Scalar>(s[j]);
                const Scalar a = x(r, base_col + j);
                const Scalar b = x(r, base_col + j + half);
                x(r, base_col + j) = a * cj - b * sj;
                x(r, base_col + j + half) = b * cj + a * sj;
            }
        }
    }
}

}  // namespace mmgen
