#pragma once

// Generalized causal attention masks.
//
// For query i and key j with s(.) the owning segment:
//   (a) s(j) is GEN_IMAGE and s(j) != s(i)  -> masked (the "hole")
//   (b) s(i) == s(j) and the kind is an image kind -> visible
//   (c) otherwise visible iff j <= i

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmgen/seqlayout.hpp"

namespace mmgen {

class AttentionMask {
public:
    AttentionMask() = default;
    explicit AttentionMask(int n);

    static AttentionMask lower_triangular(int n);

    int size() const { return n_; }
    bool allowed(int query, int key) const {
        return (bits_[row_offset(query) + static_cast<std::size_t>(key >> 6)] >> (key & 63)) & 1U;
    }
    void set(int query, int key, bool value);
    // Sets keys [begin, end) of one query row.
    void set_range(int query, int begin, int end);

    // '0'/'1' grid, one row per line.
    std::string to_text() const;
    static AttentionMask from_text(const std::string& text);

    friend bool operator==(const AttentionMask&, const AttentionMask&) = default;

private:
    std::size_t row_offset(int row) const { return static_cast<std::size_t>(row) * words_; }

    int n_ = 0;
    std::size_t words_ = 0;
    std::vector<std::uint64_t> bits_;
};

// Segment-level construction; whole blocks are filled at once.
AttentionMask build_mask(std::span<const Segment> segments);

// Literal per-pair evaluation of rules (a)-(c). Test oracle.
AttentionMask oracle_mask(std::span<const Segment> segments);

// Interval form for long sequences: the keys visible to every query of a
// segment are a union of half-open ranges plus, for text, a causal tail.
struct KeyInterval {
    int begin = 0;
    int end = 0;
};

struct SegmentKeys {
    int query_begin = 0;
    int query_end = 0;
    std::vector<KeyInterval> full;  // visible to every query of the segment
    bool causal_tail = false;       // text: keys [query_begin, i] additionally visible
};

class IntervalMask {
public:
    explicit IntervalMask(std::span<const Segment> segments);

    int size() const { return n_; }
    bool allowed(int query, int key) const;
    const std::vector<SegmentKeys>& rows() const { return rows_; }
    const SegmentKeys& keys_for(int query) const;
    AttentionMask materialize() const;

private:
    int n_ = 0;
    std::vector<SegmentKeys> rows_;
    std::vector<int> segment_of_;
};

struct LayoutViolation {
    std::vector<int> segment_indices;
    std::string message;
};

// ok (nullopt) iff at most one GEN_IMAGE exists and it is the final segment.
std::optional<LayoutViolation> validate_inference_layout(std::span<const Segment> segments);

}  // namespace mmgen
