#include "mmgen/attnmask.hpp"

#include <sstream>
#include <stdexcept>

namespace mmgen {

AttentionMask::AttentionMask(int n)
    : n_(n), words_(static_cast<std::size_t>((n + 63) / 64)), bits_(static_cast<std::size_t>(n) * words_, 0) {
    if (n < 0) throw std::invalid_argument("attnmask: negative size");
}

AttentionMask AttentionMask::lower_triangular(int n) {
    AttentionMask m(n);
    for (int i = 0; i < n; ++i) m.set_range(i, 0, i + 1);
    return m;
}

void AttentionMask::set(int query, int key, bool value) {
    auto& word = bits_[row_offset(query) + static_cast<std::size_t>(key >> 6)];
    const std::uint64_t bit = std::uint64_t{1} << (key & 63);
    word = value ? (word | bit) : (word & ~bit);
}

void AttentionMask::set_range(int query, int begin, int end) {
    if (begin >= end) return;
    std::uint64_t* row = bits_.data() + row_offset(query);
    int k = begin;
    for (; k < end && (k & 63) != 0; ++k) row[k >> 6] |= std::uint64_t{1} << (k & 63);
    while (k + 64 <= end) {
        row[k >> 6] = ~std::uint64_t{0};
        k += 64;
    }
    for (; k < end; ++k) row[k >> 6] |= std::uint64_t{1} << (k & 63);
}

std::string AttentionMask::to_text() const {
    std::string out;
    out.reserve(static_cast<std::size_t>(n_) * static_cast<std::size_t>(n_ + 1));
    for (int i = 0; i < n_; ++i) {
        for (int j = 0; j < n_; ++j) out.push_back(allowed(i, j) ? '1' : '0');
        out.push_back('\n');
    }
    return out;
}

AttentionMask AttentionMask::from_text(const std::string& text) {
    std::vector<std::string> lines;
    std::istringstream is(text);
    for (std::string line; std::getline(is, line);)
        if (!line.empty()) lines.push_back(line);
    AttentionMask m(static_cast<int>(lines.size()));
    for (int i = 0; i < m.n_; ++i) {
        const auto& line = lines[static_cast<std::size_t>(i)];
        if (static_cast<int>(line.size()) != m.n_) throw std::invalid_argument("attnmask: ragged mask text");
        for (int j = 0; j < m.n_; ++j) {
            const char c = line[static_cast<std::size_t>(j)];
            if (c != '0' && c != '1') throw std::invalid_argument("attnmask: mask text must be 0/1");
            m.set(i, j, c == '1');
        }
    }
    return m;
}

namespace {

std::vector<int> segment_starts(std::span<const Segment> segments) {
    std::vector<int> starts;
    starts.reserve(segments.size() + 1);
    int pos = 0;
    for (const auto& s : segments) {
        if (s.token_count < 1) throw std::invalid_argument("attnmask: segment token counts must be positive");
        starts.push_back(pos);
        pos += s.token_count;
    }
    starts.push_back(pos);
    return starts;
}

}  // namespace

AttentionMask build_mask(std::span<const Segment> segments) {
    const auto starts = segment_starts(segments);
    const int n = starts.back();
    AttentionMask mask(n);
    for (std::size_t qs = 0; qs < segments.size(); ++qs) {
        const auto& query_seg = segments[qs];
        for (int i = starts[qs]; i < starts[qs + 1]; ++i) {
            // Earlier segments are visible unless they are gen images.
            for (std::size_t ks = 0; ks < qs; ++ks) {
                if (segments[ks].kind == SegmentKind::GenImage) continue;
                mask.set_range(i, starts[ks], starts[ks + 1]);
            }
            if (is_image(query_seg.kind)) {
                mask.set_range(i, starts[qs], starts[qs + 1]);
            } else {
                mask.set_range(i, starts[qs], i + 1);
            }
        }
    }
    return mask;
}

AttentionMask oracle_mask(std::span<const Segment> segments) {
    std::vector<int> seg_of;
    for (int s = 0; s < static_cast<int>(segments.size()); ++s)
        for (int k = 0; k < segments[static_cast<std::size_t>(s)].token_count; ++k) seg_of.push_back(s);
    const int n = static_cast<int>(seg_of.size());
    AttentionMask mask(n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const int si = seg_of[static_cast<std::size_t>(i)];
            const int sj = seg_of[static_cast<std::size_t>(j)];
            const auto kind_j = segments[static_cast<std::size_t>(sj)].kind;
            bool allow;
            if (kind_j == SegmentKind::GenImage && sj != si) {
                allow = false;
            } else if (si == sj && is_image(kind_j)) {
                allow = true;
            } else {
                allow = j <= i;
            }
            mask.set(i, j, allow);
        }
    }
    return mask;
}

IntervalMask::IntervalMask(std::span<const Segment> segments) {
    const auto starts = segment_starts(segments);
    n_ = starts.back();
    segment_of_.reserve(static_cast<std::size_t>(n_));
    for (std::size_t qs = 0; qs < segments.size(); ++qs) {
        SegmentKeys keys;
        keys.query_begin = starts[qs];
        keys.query_end = starts[qs + 1];
        for (std::size_t ks = 0; ks < qs; ++ks) {
            if (segments[ks].kind == SegmentKind::GenImage) continue;
            if (!keys.full.empty() && keys.full.back().end == starts[ks]) {
                keys.full.back().end = starts[ks + 1];
            } else {
                keys.full.push_back({starts[ks], starts[ks + 1]});
            }
        }
        if (is_image(segments[qs].kind)) {
            if (!keys.full.empty() && keys.full.back().end == starts[qs]) {
                keys.full.back().end = starts[qs + 1];
            } else {
                keys.full.push_back({starts[qs], starts[qs + 1]});
            }
        } else {
            keys.causal_tail = true;
        }
        for (int i = starts[qs]; i < starts[qs + 1]; ++i) segment_of_.push_back(static_cast<int>(rows_.size()));
        rows_.push_back(std::move(keys));
    }
}

const SegmentKeys& IntervalMask::keys_for(int query) const {
    return rows_[static_cast<std::size_t>(segment_of_[static_cast<std::size_t>(query)])];
}

bool IntervalMask::allowed(int query, int key) const {
    const auto& keys = keys_for(query);
    if (keys.causal_tail && key >= keys.query_begin && key <= query) return true;
    for (const auto& iv : keys.full)
        if (key >= iv.begin && key < iv.end) return true;
    return false;
}

AttentionMask IntervalMask::materialize() const {
    AttentionMask m(n_);
    for (const auto& keys : rows_) {
        for (int i = keys.query_begin; i < keys.query_end; ++i) {
            for (const auto& iv : keys.full) m.set_range(i, iv.begin, iv.end);
            if (keys.causal_tail) m.set_range(i, keys.query_begin, i + 1);
        }
    }
    return m;
}

std::optional<LayoutViolation> validate_inference_layout(std::span<const Segment> segments) {
    std::vector<int> gens;
    for (int s = 0; s < static_cast<int>(segments.size()); ++s)
        if (segments[static_cast<std::size_t>(s)].kind == SegmentKind::GenImage) gens.push_back(s);
    if (gens.size() > 1) {
        std::string msg = "inference layout has " + std::to_string(gens.size()) + " GEN_IMAGE segments (at";
        for (int g : gens) msg += " " + std::to_string(g);
        msg += "); at most one is allowed";
        return LayoutViolation{gens, msg};
    }
    if (gens.size() == 1 && gens.front() != static_cast<int>(segments.size()) - 1) {
        return LayoutViolation{gens, "GEN_IMAGE segment " + std::to_string(gens.front()) +
                                         " is not the final segment"};
    }
    return std::nullopt;
}

}  // namespace mmgen
