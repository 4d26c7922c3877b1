#include "mmgen/tokenizer.hpp"

#include <stdexcept>

namespace mmgen {

const std::vector<std::string>& caption_words() {
    static const std::vector<std::string> words = {
        "a",        "an",        "the",      "and",       "of",        "is",
        "red",      "green",     "blue",     "yellow",    "square",    "circle",
        "triangle", "squares",   "circles",  "triangles", "two",       "one",
        "left",     "right",     "above",    "below",     "vertical",  "horizontal",
        "image",    "shape",     "shapes",   "color",     "what",      "which",
        "make",     "it",        "move",     "to",        "recolor",   "picture",
        "draw",     "show",      "showing",  "with",      "on",        "gray",
        "background", "first",   "then",     "so",        "use",       "wide",
        "tall",     "layout",    "canvas",   "user",      "assistant", "plan",
        "there",    "in",        "center",   "this",      "that",      "has",
        "want",     "we",        "need",     "portrait",  "landscape", "side",
        "by",       "ratio",     "place",    "objects",   "object",    "many",
        "how",      "are",       "single",   "answer",    "edit",      "instead",
        "aspect",   "wants",
    };
    return words;
}

Tokenizer::Tokenizer(std::vector<std::string> pieces) : pieces_(std::move(pieces)) {
    for (int i = 0; i < size(); ++i) {
        const auto& p = pieces_[static_cast<std::size_t>(i)];
        if (p.empty()) throw std::invalid_argument("tokenizer: empty piece");
        if (!index_.emplace(p, i).second) throw std::invalid_argument("tokenizer: duplicate piece '" + p + "'");
        max_piece_ = std::max(max_piece_, p.size());
    }
}

Tokenizer Tokenizer::standard() {
    std::vector<std::string> pieces;
    for (char c = 32; c < 127; ++c) pieces.emplace_back(1, c);
    for (const auto& w : caption_words()) {
        if (w.size() > 1) pieces.push_back(w);
        pieces.push_back(" " + w);
    }
    return Tokenizer(std::move(pieces));
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
    std::vector<int> ids;
    std::size_t pos = 0;
    std::string key;
    while (pos < text.size()) {
        const std::size_t longest = std::min(max_piece_, text.size() - pos);
        int found = -1;
        std::size_t found_len = 0;
        for (std::size_t len = longest; len >= 1; --len) {
            key.assign(text.substr(pos, len));
            auto it = index_.find(key);
            if (it == index_.end()) continue;
            // A word piece must end on a word boundary so "reds" is not " red"+"s".
            if (len > 1 && pos + len < text.size()) {
                const char next = text[pos + len];
                if ((next >= 'a' && next <= 'z') || (next >= 'A' && next <= 'Z')) continue;
            }
            found = it->second;
            found_len = len;
            break;
        }
        if (found < 0) {
            throw std::invalid_argument("tokenizer: unsupported character code " +
                                        std::to_string(static_cast<unsigned char>(text[pos])));
        }
        ids.push_back(found);
        pos += found_len;
    }
    return ids;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) out += piece(id);
    return out;
}

}  // namespace mmgen
