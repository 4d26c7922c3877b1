#pragma once

// Token/segment data model, the extended vocabulary, task templates and the
// automatic-resolution codec (aspect ratio <-> ratio token <-> latent grid).

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmgen/tokenizer.hpp"

namespace mmgen {

enum class SegmentKind : std::uint8_t { Text, CondImageVae, CondImageVit, GenImage };

std::string_view to_string(SegmentKind kind);
SegmentKind segment_kind_from_string(std::string_view name);

constexpr bool is_image(SegmentKind kind) { return kind != SegmentKind::Text; }

struct Grid {
    int h = 0;
    int w = 0;

    int tokens() const { return h * w; }
    friend bool operator==(const Grid&, const Grid&) = default;
};

struct Segment {
    SegmentKind kind = SegmentKind::Text;
    int token_count = 0;
    std::optional<Grid> grid;
    // Links the VAE and vision halves of one conditioned image; indexes
    // TokenSequence::images for image kinds.
    int image_id = -1;

    static Segment text(int count);
    static Segment image(SegmentKind kind, Grid grid, int image_id = -1);

    friend bool operator==(const Segment&, const Segment&) = default;
};

// Throws std::invalid_argument when a segment breaks its kind's invariants.
void validate_segment(const Segment& segment);

int total_tokens(std::span<const Segment> segments);

// Compact layout notation, e.g. "text:3,vae:2x2,vit:4x4,text:1,gen:2x3".
// An image size without 'x' is a 1 x N grid. A vit segment shares the image
// id of the vae segment right before it.
std::vector<Segment> parse_layout(std::string_view spec);
std::string format_layout(std::span<const Segment> segments);

// ---------------------------------------------------------------------------
// Vocabulary: base text pieces followed by contiguous special tokens.

struct VocabConfig {
    std::vector<int> size_anchors{16, 32, 64};
    int ratio_count = 33;
};

class Vocab {
public:
    // Base ids are named by the tokenizer pieces.
    Vocab(const Tokenizer& tokenizer, VocabConfig config);
    // Anonymous base range [0, base_size); used by micro configurations.
    Vocab(int base_size, VocabConfig config);

    int base_size() const { return base_size_; }
    int size() const { return base_size_ + static_cast<int>(special_names_.size()); }
    const VocabConfig& config() const { return config_; }
    int ratio_count() const { return config_.ratio_count; }

    int bos() const { return bos_; }
    int eos() const { return bos_ + 1; }
    int img_start() const { return bos_ + 2; }
    int img_end() const { return bos_ + 3; }
    int timestep_slot() const { return bos_ + 4; }

    int size_token(int anchor) const;
    int ratio_token(int ratio_index) const;
    std::optional<int> anchor_of(int id) const;
    std::optional<int> ratio_of(int id) const;

    bool is_special(int id) const { return id >= base_size_ && id < size(); }
    std::string name_of(int id) const;
    std::optional<int> id_of(std::string_view name) const;

    // One "key<TAB>id" line per token. Base keys are JSON string literals,
    // special keys are their bare names (e.g. <img_ratio_16>).
    void write_manifest(std::ostream& os) const;
    // Returns the name→id table parsed from a manifest.
    static std::map<std::string, int> read_manifest(std::istream& is);

private:
    void build_specials();

    VocabConfig config_;
    int base_size_ = 0;
    int bos_ = 0;
    std::vector<std::string> base_names_;
    std::vector<std::string> special_names_;
    std::map<std::string, int, std::less<>> special_ids_;
};

// ---------------------------------------------------------------------------
// Automatic resolution codec.

struct RatioQuantization {
    int index = 0;
    bool clamped = false;  // input aspect was outside [1/4, 4]
};

// aspect = width / height. Ratio tokens sit on a log-uniform grid over
// [1/4, 4] with the center token at 1:1. ratio_count must be odd and >= 3.
RatioQuantization ratio_token_of(double aspect, int ratio_count);
double aspect_of_ratio_token(int index, int ratio_count);

// Latent grid for an anchor and aspect; pixel dims are grid * downsample.
Grid grid_shape(int size_anchor, double aspect, int downsample);

struct ShapeSpec {
    int size_anchor = 0;
    int ratio_index = 0;
    Grid grid;
};

ShapeSpec make_shape(int size_anchor, int ratio_index, int ratio_count, int downsample);

// ---------------------------------------------------------------------------
// Task templates.

enum class Task : std::uint8_t { T2I, LM, MMU, INTL, COT_T2TI };

std::string_view to_string(Task task);
Task task_from_string(std::string_view name);

// Text fields of one training sample plus the shapes of its images.
// images[0] is the primary image; images[1] is the edit target for INTL.
struct TaskSample {
    std::optional<std::string> caption;
    std::optional<std::string> text;
    std::optional<std::string> question;
    std::optional<std::string> answer;
    std::optional<std::string> reasoning;
    std::optional<std::string> instruction;
    std::vector<ShapeSpec> images;
};

// How one image of the sample appears in a sequence.
struct ImageSlot {
    int source = 0;         // index into TaskSample::images
    bool generated = false; // GEN_IMAGE (noised) vs. cond (clean, dual-encoded)
    ShapeSpec shape;
};

constexpr int kImageToken = -1;

struct TokenSequence {
    std::vector<Segment> segments;
    std::vector<int> tokens;             // vocab ids; kImageToken at image positions
    std::vector<std::uint8_t> loss_mask; // 1 where the token is a next-token target
    std::vector<ImageSlot> images;       // indexed by Segment::image_id
    // Per-token segment index, filled by finalize().
    std::vector<int> segment_of;

    int size() const { return static_cast<int>(tokens.size()); }
    int gen_image_count() const;
    // Checks total length, mask/payload invariants and fills segment_of.
    void finalize();
};

struct LayoutOptions {
    // Grid of the vision-encoder half of every cond image.
    Grid vit_grid{4, 4};
    bool loss_on_image_markers = false;
    // Wrap prompts as "user: <prompt> assistant:" with no loss on the prompt.
    bool instruction_template = false;
};

// Incremental builder; keeps segments, tokens and loss mask in sync.
class SequenceBuilder {
public:
    SequenceBuilder(const Vocab& vocab, LayoutOptions options);

    SequenceBuilder& special(int id, bool target = false);
    SequenceBuilder& text(std::span<const int> ids, bool target);
    // [size, ratio, IMG_START, TIMESTEP_SLOT, image segment(s), IMG_END?]
    SequenceBuilder& image_block(const ImageSlot& slot, bool shape_targets, bool close = true);

    TokenSequence finish();

private:
    void push_text_token(int id, bool target);

    const Vocab& vocab_;
    LayoutOptions options_;
    TokenSequence seq_;
};

TokenSequence build_sequence(const TaskSample& sample, Task task, const Vocab& vocab,
                             const Tokenizer& tokenizer, const LayoutOptions& options = {});

// [BOS, prompt] for sampling; the model continues with optional reasoning and
// the size/ratio tokens.
TokenSequence build_prompt(std::string_view prompt, const Vocab& vocab, const Tokenizer& tokenizer,
                           const LayoutOptions& options = {});

// Replaces every GEN_IMAGE segment (and its image slot) with the clean
// VAE + vision cond representation, the form the image takes once generated.
TokenSequence as_conditioned(const TokenSequence& seq, const LayoutOptions& options);

// Line-oriented debug rendering used by golden tests.
std::string to_debug_string(const TokenSequence& seq, const Vocab& vocab);

}  // namespace mmgen
