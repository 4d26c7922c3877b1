#pragma once

// Run configuration: one JSON document covering model, vocabulary, codec,
// data, optimizer, training stages and sampling defaults. CLI overrides are
// "a.b.c=value" assignments applied to the JSON before parsing.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmgen/codec.hpp"
#include "mmgen/model.hpp"
#include "mmgen/seqlayout.hpp"
#include "mmgen/synthetic.hpp"
#include "mmgen/tokenizer.hpp"

namespace mmgen {

enum class StageId { I, II, III, IV, IT };

std::string_view to_string(StageId id);
StageId stage_id_from_string(std::string_view name);

// Tasks a stage may draw from: I = T2I/LM/MMU, II = MMU, III = I + INTL,
// IV = III + COT, IT (instruction tuning) = T2I/LM/COT.
std::vector<Task> allowed_tasks(StageId id);

struct StageConfig {
    StageId id = StageId::I;
    int anchor = 32;       // VAE-path size anchor
    int vit_anchor = 32;   // vision-encoder input anchor
    int steps = 100;
    std::array<double, 5> task_mix{1, 0, 0, 0, 0};  // T2I, LM, MMU, INTL, COT
    std::optional<int> batch_size;
    std::optional<double> lr;
    bool instruction_template = false;
    // Stage II trains only the vision projector; every other stage trains
    // the whole model except the frozen encoders.
    bool vit_only() const { return id == StageId::II; }
};

struct OptimizerConfig {
    double lr = 3e-4;
    int warmup = 100;
    double min_lr_ratio = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
};

struct TrainConfig {
    int batch_size = 8;
    double caption_dropout = 0.1;
    int checkpoint_every = 0;  // 0 = only at the end of each stage
    int latent_stat_samples = 64;
    OptimizerConfig optimizer;
};

struct SampleDefaults {
    int steps = 32;
    double guidance = 3.0;
    int max_reasoning_tokens = 96;
};

struct RunConfig {
    std::uint64_t seed = 0;
    Precision precision = Precision::F32;
    ModelConfig model;  // vocab/latent/vision sizes are derived, see model_config()
    VocabConfig vocab;
    LatentCodecConfig codec;
    VisionConfig vision;
    bool loss_on_image_markers = false;
    SyntheticSpec data;  // task_mix and size_anchors are set per stage
    std::string dataset; // optional dataset directory; synthesized on the fly when empty
    TrainConfig train;
    std::vector<StageConfig> stages;
    SampleDefaults sample;

    void validate() const;
};

nlohmann::json to_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j);

// Applies "a.b.0.c=value" overrides; the value is parsed as JSON when
// possible and taken as a string otherwise. Unknown keys are errors.
void apply_overrides(nlohmann::json& j, const std::vector<std::string>& overrides);

RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

// 16 hex digits of FNV-1a over the canonical JSON dump.
std::string config_hash(const RunConfig& config);

// Everything derived from a config that is not a trainable parameter.
struct Components {
    Tokenizer tokenizer;
    Vocab vocab;
    LatentCodec codec;
    VisionEncoder vision;
    LayoutOptions layout;

    explicit Components(const RunConfig& config);
};

ModelConfig model_config(const RunConfig& config, const Vocab& vocab);

}  // namespace mmgen
