#include "mmgen/seqlayout.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace mmgen {

namespace {

constexpr double kMaxAspect = 4.0;

std::invalid_argument layout_error(const std::string& what) { return std::invalid_argument("seqlayout: " + what); }

void check_ratio_count(int ratio_count) {
    if (ratio_count < 3 || ratio_count % 2 == 0)
        throw layout_error("ratio_count must be odd and >= 3, got " + std::to_string(ratio_count));
}

}  // namespace

std::string_view to_string(SegmentKind kind) {
    switch (kind) {
        case SegmentKind::Text: return "TEXT";
        case SegmentKind::CondImageVae: return "COND_IMAGE_VAE";
        case SegmentKind::CondImageVit: return "COND_IMAGE_VIT";
        case SegmentKind::GenImage: return "GEN_IMAGE";
    }
    return "?";
}

SegmentKind segment_kind_from_string(std::string_view name) {
    for (auto k : {SegmentKind::Text, SegmentKind::CondImageVae, SegmentKind::CondImageVit, SegmentKind::GenImage})
        if (to_string(k) == name) return k;
    throw layout_error("unknown segment kind '" + std::string(name) + "'");
}

Segment Segment::text(int count) { return Segment{SegmentKind::Text, count, std::nullopt, -1}; }

Segment Segment::image(SegmentKind kind, Grid grid, int image_id) {
    return Segment{kind, grid.tokens(), grid, image_id};
}

void validate_segment(const Segment& s) {
    if (s.token_count < 1) throw layout_error("segment token_count must be >= 1");
    if (s.kind == SegmentKind::Text) {
        if (s.grid) throw layout_error("TEXT segment cannot carry a grid");
        return;
    }
    if (!s.grid) {
        if (s.kind == SegmentKind::GenImage) throw layout_error("GEN_IMAGE segment requires a grid");
        return;
    }
    if (s.grid->h < 1 || s.grid->w < 1) throw layout_error("image grid dims must be >= 1");
    if (s.grid->tokens() != s.token_count)
        throw layout_error("image grid " + std::to_string(s.grid->h) + "x" + std::to_string(s.grid->w) +
                           " does not match token_count " + std::to_string(s.token_count));
}

int total_tokens(std::span<const Segment> segments) {
    return std::accumulate(segments.begin(), segments.end(), 0,
                           [](int acc, const Segment& s) { return acc + s.token_count; });
}

// ---------------------------------------------------------------------------

Vocab::Vocab(const Tokenizer& tokenizer, VocabConfig config)
    : config_(std::move(config)), base_size_(tokenizer.size()), base_names_(tokenizer.pieces()) {
    build_specials();
}

Vocab::Vocab(int base_size, VocabConfig config) : config_(std::move(config)), base_size_(base_size) {
    if (base_size < 0) throw layout_error("negative base vocabulary size");
    build_specials();
}

void Vocab::build_specials() {
    check_ratio_count(config_.ratio_count);
    if (config_.size_anchors.empty()) throw layout_error("at least one size anchor is required");
    bos_ = base_size_;
    special_names_ = {"<bos>", "<eos>", "<img_start>", "<img_end>", "<timestep>"};
    for (int a : config_.size_anchors) {
        if (a < 1) throw layout_error("size anchors must be positive");
        special_names_.push_back("<img_size_" + std::to_string(a) + ">");
    }
    for (int i = 0; i < config_.ratio_count; ++i) special_names_.push_back("<img_ratio_" + std::to_string(i) + ">");
    for (std::size_t i = 0; i < special_names_.size(); ++i) {
        if (!special_ids_.emplace(special_names_[i], base_size_ + static_cast<int>(i)).second)
            throw layout_error("duplicate special token " + special_names_[i]);
    }
}

int Vocab::size_token(int anchor) const {
    auto it = std::find(config_.size_anchors.begin(), config_.size_anchors.end(), anchor);
    if (it == config_.size_anchors.end()) throw layout_error("no size token for anchor " + std::to_string(anchor));
    return bos_ + 5 + static_cast<int>(it - config_.size_anchors.begin());
}

int Vocab::ratio_token(int ratio_index) const {
    if (ratio_index < 0 || ratio_index >= config_.ratio_count)
        throw layout_error("ratio index " + std::to_string(ratio_index) + " out of range");
    return bos_ + 5 + static_cast<int>(config_.size_anchors.size()) + ratio_index;
}

std::optional<int> Vocab::anchor_of(int id) const {
    const int off = id - (bos_ + 5);
    if (off < 0 || off >= static_cast<int>(config_.size_anchors.size())) return std::nullopt;
    return config_.size_anchors[static_cast<std::size_t>(off)];
}

std::optional<int> Vocab::ratio_of(int id) const {
    const int off = id - (bos_ + 5 + static_cast<int>(config_.size_anchors.size()));
    if (off < 0 || off >= config_.ratio_count) return std::nullopt;
    return off;
}

std::string Vocab::name_of(int id) const {
    if (id < 0 || id >= size()) throw layout_error("token id " + std::to_string(id) + " out of range");
    if (is_special(id)) return special_names_[static_cast<std::size_t>(id - base_size_)];
    if (!base_names_.empty()) return base_names_[static_cast<std::size_t>(id)];
    return "<base_" + std::to_string(id) + ">";
}

std::optional<int> Vocab::id_of(std::string_view name) const {
    if (auto it = special_ids_.find(name); it != special_ids_.end()) return it->second;
    return std::nullopt;
}

void Vocab::write_manifest(std::ostream& os) const {
    for (int id = 0; id < size(); ++id) {
        if (is_special(id)) {
            os << name_of(id);
        } else {
            os << nlohmann::json(name_of(id)).dump();
        }
        os << '\t' << id << '\n';
    }
}

std::map<std::string, int> Vocab::read_manifest(std::istream& is) {
    std::map<std::string, int> table;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto tab = line.rfind('\t');
        if (tab == std::string::npos) throw layout_error("malformed manifest line: " + line);
        std::string key = line.substr(0, tab);
        if (!key.empty() && key.front() == '"') key = nlohmann::json::parse(key).get<std::string>();
        table[key] = std::stoi(line.substr(tab + 1));
    }
    return table;
}

// ---------------------------------------------------------------------------

RatioQuantization ratio_token_of(double aspect, int ratio_count) {
    check_ratio_count(ratio_count);
    if (!(aspect > 0.0) || !std::isfinite(aspect)) throw layout_error("aspect must be positive and finite");
    RatioQuantization q;
    if (aspect < 1.0 / kMaxAspect) {
        aspect = 1.0 / kMaxAspect;
        q.clamped = true;
    } else if (aspect > kMaxAspect) {
        aspect = kMaxAspect;
        q.clamped = true;
    }
    const double half = (ratio_count - 1) / 2.0;
    const long idx = std::lround(half * (1.0 + std::log(aspect) / std::log(kMaxAspect)));
    q.index = static_cast<int>(std::clamp<long>(idx, 0, ratio_count - 1));
    return q;
}

double aspect_of_ratio_token(int index, int ratio_count) {
    check_ratio_count(ratio_count);
    if (index < 0 || index >= ratio_count)
        throw layout_error("ratio index " + std::to_string(index) + " outside [0, " + std::to_string(ratio_count - 1) +
                           "]");
    const double e = static_cast<double>(2 * index - (ratio_count - 1)) / static_cast<double>(ratio_count - 1);
    return std::pow(kMaxAspect, e);
}

Grid grid_shape(int size_anchor, double aspect, int downsample) {
    if (downsample < 1) throw layout_error("downsample must be >= 1");
    if (size_anchor < downsample || size_anchor % downsample != 0)
        throw layout_error("size anchor " + std::to_string(size_anchor) + " is not a multiple of downsample " +
                           std::to_string(downsample));
    if (!(aspect > 0.0)) throw layout_error("aspect must be positive");
    const double root = std::sqrt(aspect);
    const double a = static_cast<double>(size_anchor);
    const double f = static_cast<double>(downsample);
    Grid g;
    g.h = std::max(1, static_cast<int>(std::lround(a / (f * root))));
    g.w = std::max(1, static_cast<int>(std::lround(a * root / f)));
    return g;
}

ShapeSpec make_shape(int size_anchor, int ratio_index, int ratio_count, int downsample) {
    return ShapeSpec{size_anchor, ratio_index,
                     grid_shape(size_anchor, aspect_of_ratio_token(ratio_index, ratio_count), downsample)};
}

// ---------------------------------------------------------------------------

std::vector<Segment> parse_layout(std::string_view spec) {
    std::vector<Segment> out;
    int next_image = 0;
    std::size_t pos = 0;
    while (pos <= spec.size()) {
        auto comma = spec.find(',', pos);
        if (comma == std::string_view::npos) comma = spec.size();
        const std::string item(spec.substr(pos, comma - pos));
        pos = comma + 1;
        if (item.empty()) throw layout_error("empty item in layout '" + std::string(spec) + "'");
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw layout_error("layout item '" + item + "' needs kind:size");
        const std::string kind = item.substr(0, colon);
        const std::string size = item.substr(colon + 1);
        auto number = [&](const std::string& s) {
            std::size_t used = 0;
            int v = 0;
            try {
                v = std::stoi(s, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != s.size() || v < 1) throw layout_error("bad size '" + s + "' in layout item '" + item + "'");
            return v;
        };
        if (kind == "text") {
            out.push_back(Segment::text(number(size)));
            continue;
        }
        // A bare count N is a 1 x N grid.
        const auto x = size.find('x');
        const Grid g = x == std::string::npos ? Grid{1, number(size)}
                                              : Grid{number(size.substr(0, x)), number(size.substr(x + 1))};
        if (kind == "gen") {
            out.push_back(Segment::image(SegmentKind::GenImage, g, next_image++));
        } else if (kind == "vae") {
            out.push_back(Segment::image(SegmentKind::CondImageVae, g, next_image++));
        } else if (kind == "vit") {
            const bool paired = !out.empty() && out.back().kind == SegmentKind::CondImageVae;
            out.push_back(Segment::image(SegmentKind::CondImageVit, g, paired ? out.back().image_id : next_image++));
        } else {
            throw layout_error("unknown segment kind '" + kind + "' (text, gen, vae, vit)");
        }
    }
    return out;
}

std::string format_layout(std::span<const Segment> segments) {
    std::string out;
    for (const auto& s : segments) {
        if (!out.empty()) out += ',';
        switch (s.kind) {
            case SegmentKind::Text: out += "text:" + std::to_string(s.token_count); continue;
            case SegmentKind::GenImage: out += "gen:"; break;
            case SegmentKind::CondImageVae: out += "vae:"; break;
            case SegmentKind::CondImageVit: out += "vit:"; break;
        }
        out += std::to_string(s.grid->h) + "x" + std::to_string(s.grid->w);
    }
    return out;
}

std::string_view to_string(Task task) {
    switch (task) {
        case Task::T2I: return "T2I";
        case Task::LM: return "LM";
        case Task::MMU: return "MMU";
        case Task::INTL: return "INTL";
        case Task::COT_T2TI: return "COT";
    }
    return "?";
}

Task task_from_string(std::string_view name) {
    for (auto t : {Task::T2I, Task::LM, Task::MMU, Task::INTL, Task::COT_T2TI})
        if (to_string(t) == name) return t;
    if (name == "COT_T2TI" || name == "CoT") return Task::COT_T2TI;
    throw layout_error("unknown task '" + std::string(name) + "'");
}

int TokenSequence::gen_image_count() const {
    return static_cast<int>(std::count_if(segments.begin(), segments.end(),
                                          [](const Segment& s) { return s.kind == SegmentKind::GenImage; }));
}

void TokenSequence::finalize() {
    for (const auto& s : segments) validate_segment(s);
    const int n = total_tokens(segments);
    if (static_cast<int>(tokens.size()) != n || static_cast<int>(loss_mask.size()) != n)
        throw layout_error("token/loss arrays do not match segment lengths");
    segment_of.assign(static_cast<std::size_t>(n), 0);
    int pos = 0;
    for (int si = 0; si < static_cast<int>(segments.size()); ++si) {
        const auto& s = segments[static_cast<std::size_t>(si)];
        if (is_image(s.kind)) {
            if (s.image_id < 0 || s.image_id >= static_cast<int>(images.size()))
                throw layout_error("image segment without a valid image slot");
            if (images[static_cast<std::size_t>(s.image_id)].generated != (s.kind == SegmentKind::GenImage))
                throw layout_error("image slot role does not match segment kind");
        }
        for (int k = 0; k < s.token_count; ++k, ++pos) {
            segment_of[static_cast<std::size_t>(pos)] = si;
            const auto p = static_cast<std::size_t>(pos);
            if (is_image(s.kind)) {
                if (tokens[p] != kImageToken || loss_mask[p]) throw layout_error("image positions carry no token or loss");
            } else if (tokens[p] < 0) {
                throw layout_error("text position without a token id");
            }
        }
    }
}

SequenceBuilder::SequenceBuilder(const Vocab& vocab, LayoutOptions options) : vocab_(vocab), options_(options) {}

void SequenceBuilder::push_text_token(int id, bool target) {
    if (id < 0 || id >= vocab_.size()) throw layout_error("token id out of vocabulary");
    if (seq_.segments.empty() || seq_.segments.back().kind != SegmentKind::Text)
        seq_.segments.push_back(Segment::text(0));
    seq_.segments.back().token_count += 1;
    seq_.tokens.push_back(id);
    seq_.loss_mask.push_back(target ? 1 : 0);
}

SequenceBuilder& SequenceBuilder::special(int id, bool target) {
    push_text_token(id, target);
    return *this;
}

SequenceBuilder& SequenceBuilder::text(std::span<const int> ids, bool target) {
    for (int id : ids) push_text_token(id, target);
    return *this;
}

SequenceBuilder& SequenceBuilder::image_block(const ImageSlot& slot, bool shape_targets, bool close) {
    push_text_token(vocab_.size_token(slot.shape.size_anchor), shape_targets);
    push_text_token(vocab_.ratio_token(slot.shape.ratio_index), shape_targets);
    push_text_token(vocab_.img_start(), options_.loss_on_image_markers);
    push_text_token(vocab_.timestep_slot(), false);
    const int image_id = static_cast<int>(seq_.images.size());
    seq_.images.push_back(slot);
    auto push_image = [&](SegmentKind kind, Grid g) {
        seq_.segments.push_back(Segment::image(kind, g, image_id));
        seq_.tokens.insert(seq_.tokens.end(), static_cast<std::size_t>(g.tokens()), kImageToken);
        seq_.loss_mask.insert(seq_.loss_mask.end(), static_cast<std::size_t>(g.tokens()), 0);
    };
    if (slot.generated) {
        push_image(SegmentKind::GenImage, slot.shape.grid);
    } else {
        push_image(SegmentKind::CondImageVae, slot.shape.grid);
        push_image(SegmentKind::CondImageVit, options_.vit_grid);
    }
    if (close) push_text_token(vocab_.img_end(), options_.loss_on_image_markers);
    return *this;
}

TokenSequence SequenceBuilder::finish() {
    seq_.finalize();
    return std::move(seq_);
}

namespace {

const std::string& require(const std::optional<std::string>& field, Task task, const char* name) {
    if (!field) throw layout_error("task " + std::string(to_string(task)) + " requires field '" + name + "'");
    return *field;
}

const ShapeSpec& require_image(const TaskSample& s, std::size_t i, Task task) {
    if (s.images.size() <= i)
        throw layout_error("task " + std::string(to_string(task)) + " requires field 'image" +
                           (i == 0 ? std::string() : std::to_string(i)) + "'");
    return s.images[i];
}

std::vector<int> encode_spaced(const Tokenizer& tok, const std::string& text) { return tok.encode(" " + text); }

void push_prompt(SequenceBuilder& b, const Tokenizer& tok, const std::string& prompt, bool instruction) {
    if (instruction) {
        b.text(tok.encode("user: " + prompt + " assistant:"), false);
    } else {
        b.text(tok.encode(prompt), true);
    }
}

}  // namespace

TokenSequence build_sequence(const TaskSample& sample, Task task, const Vocab& vocab, const Tokenizer& tokenizer,
                             const LayoutOptions& options) {
    if (tokenizer.size() != vocab.base_size()) throw layout_error("tokenizer does not match vocabulary base");
    SequenceBuilder b(vocab, options);
    b.special(vocab.bos());
    switch (task) {
        case Task::LM: {
            b.text(tokenizer.encode(require(sample.text, task, "text")), true);
            b.special(vocab.eos(), true);
            break;
        }
        case Task::T2I: {
            const auto& caption = require(sample.caption, task, "caption");
            const auto& shape = require_image(sample, 0, task);
            push_prompt(b, tokenizer, caption, options.instruction_template);
            b.image_block(ImageSlot{0, true, shape}, true);
            break;
        }
        case Task::MMU: {
            const auto& shape = require_image(sample, 0, task);
            const auto& question = require(sample.question, task, "question");
            const auto& answer = require(sample.answer, task, "answer");
            b.image_block(ImageSlot{0, false, shape}, false);
            b.text(encode_spaced(tokenizer, question), false);
            b.text(encode_spaced(tokenizer, answer), true);
            b.special(vocab.eos(), true);
            break;
        }
        case Task::INTL: {
            const auto& caption = require(sample.caption, task, "caption");
            const auto& instruction = require(sample.instruction, task, "instruction");
            const auto& source = require_image(sample, 0, task);
            const auto& target = require_image(sample, 1, task);
            b.text(tokenizer.encode(caption), true);
            b.image_block(ImageSlot{0, true, source}, true);
            b.text(encode_spaced(tokenizer, instruction), true);
            b.image_block(ImageSlot{1, true, target}, true);
            break;
        }
        case Task::COT_T2TI: {
            const auto& caption = require(sample.caption, task, "caption");
            const auto& reasoning = require(sample.reasoning, task, "reasoning");
            const auto& shape = require_image(sample, 0, task);
            push_prompt(b, tokenizer, caption, options.instruction_template);
            b.text(encode_spaced(tokenizer, reasoning), true);
            b.image_block(ImageSlot{0, true, shape}, true);
            break;
        }
    }
    return b.finish();
}

TokenSequence build_prompt(std::string_view prompt, const Vocab& vocab, const Tokenizer& tokenizer,
                           const LayoutOptions& options) {
    SequenceBuilder b(vocab, options);
    b.special(vocab.bos());
    if (!prompt.empty()) push_prompt(b, tokenizer, std::string(prompt), options.instruction_template);
    return b.finish();
}

TokenSequence as_conditioned(const TokenSequence& seq, const LayoutOptions& options) {
    TokenSequence out;
    out.images = seq.images;
    for (auto& slot : out.images) slot.generated = false;
    std::size_t pos = 0;
    for (const auto& s : seq.segments) {
        const auto begin = seq.tokens.begin() + static_cast<std::ptrdiff_t>(pos);
        const auto mbegin = seq.loss_mask.begin() + static_cast<std::ptrdiff_t>(pos);
        if (s.kind == SegmentKind::GenImage) {
            for (auto [kind, g] : {std::pair{SegmentKind::CondImageVae, *s.grid},
                                   std::pair{SegmentKind::CondImageVit, options.vit_grid}}) {
                out.segments.push_back(Segment::image(kind, g, s.image_id));
                out.tokens.insert(out.tokens.end(), static_cast<std::size_t>(g.tokens()), kImageToken);
                out.loss_mask.insert(out.loss_mask.end(), static_cast<std::size_t>(g.tokens()), 0);
            }
        } else {
            out.segments.push_back(s);
            out.tokens.insert(out.tokens.end(), begin, begin + s.token_count);
            out.loss_mask.insert(out.loss_mask.end(), mbegin, mbegin + s.token_count);
        }
        pos += static_cast<std::size_t>(s.token_count);
    }
    out.finalize();
    return out;
}

std::string to_debug_string(const TokenSequence& seq, const Vocab& vocab) {
    std::ostringstream os;
    os << "sequence n=" << seq.size() << " segments=" << seq.segments.size() << " images=" << seq.images.size()
       << '\n';
    std::size_t pos = 0;
    for (const auto& s : seq.segments) {
        os << to_string(s.kind) << " n=" << s.token_count;
        if (s.kind == SegmentKind::Text) {
            os << " tokens=";
            for (int k = 0; k < s.token_count; ++k) {
                const int id = seq.tokens[pos + static_cast<std::size_t>(k)];
                if (k) os << ' ';
                os << (vocab.is_special(id) ? vocab.name_of(id) : nlohmann::json(vocab.name_of(id)).dump());
            }
            os << " loss=";
            for (int k = 0; k < s.token_count; ++k) os << static_cast<int>(seq.loss_mask[pos + static_cast<std::size_t>(k)]);
        } else {
            os << " grid=" << s.grid->h << 'x' << s.grid->w << " image=" << s.image_id;
            const auto& slot = seq.images[static_cast<std::size_t>(s.image_id)];
            os << " anchor=" << slot.shape.size_anchor << " ratio=" << slot.shape.ratio_index;
        }
        os << '\n';
        pos += static_cast<std::size_t>(s.token_count);
    }
    return os.str();
}

}  // namespace mmgen
