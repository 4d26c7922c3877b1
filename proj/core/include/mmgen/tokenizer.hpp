#pragma once

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mmgen {

// Toy greedy longest-match tokenizer over a fixed piece list. Every printable
// ASCII character is a piece, so any printable string encodes; whole words
// (with and without a leading space) shorten the common captions.
class Tokenizer {
public:
    explicit Tokenizer(std::vector<std::string> pieces);

    // Printable ASCII plus the synthetic-caption word list.
    static Tokenizer standard();

    int size() const { return static_cast<int>(pieces_.size()); }
    const std::vector<std::string>& pieces() const { return pieces_; }

    // Throws std::invalid_argument on characters outside the piece set.
    std::vector<int> encode(std::string_view text) const;
    std::string decode(std::span<const int> ids) const;
    const std::string& piece(int id) const { return pieces_.at(static_cast<std::size_t>(id)); }

private:
    std::vector<std::string> pieces_;
    std::unordered_map<std::string, int> index_;
    std::size_t max_piece_ = 1;
};

// Words emitted by the synthetic generator's caption templates.
const std::vector<std::string>& caption_words();

}  // namespace mmgen
