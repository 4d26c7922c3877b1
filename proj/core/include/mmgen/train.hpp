#pragma once

// Staged training driver and the helpers that turn synthetic samples into
// model inputs (latent encoding, noising, velocity targets).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mmgen/checkpoint.hpp"
#include "mmgen/config.hpp"
#include "mmgen/model.hpp"
#include "mmgen/synthetic.hpp"

namespace mmgen {

// Model-space latents: (codec latents - mean) / std, tokens x channels.
template <class T>
Matrix<T> encode_latents(const Model<T>& model, const LatentCodec& codec, const Image& image);

// Inverse of encode_latents followed by the codec decoder, clamped to [0, 1].
template <class T>
Image decode_latents(const Model<T>& model, const LatentCodec& codec, const Matrix<T>& latents, Grid grid);

template <class T>
Matrix<T> vision_features(const VisionEncoder& vision, const Image& image);

// Per-channel mean and one shared standard deviation of codec latents over
// the given images; written into the model's latent_norm parameters.
template <class T>
void fit_latent_norm(Model<T>& model, const LatentCodec& codec, const std::vector<Image>& images);

// A packed batch. Sequences are heap-allocated so SequenceInput pointers
// stay valid; targets[b][image_id] is the velocity target of a gen image.
template <class T>
struct TrainingBatch {
    std::vector<std::unique_ptr<TokenSequence>> sequences;
    std::vector<SequenceInput<T>> inputs;
    std::vector<std::vector<Matrix<T>>> targets;

    // Targets in ForwardOutput::gen_spans order.
    std::vector<Matrix<T>> ordered_targets(const std::vector<GenSpan>& spans) const;
};

struct ExampleOptions {
    double caption_dropout = 0.0;
    bool instruction_template = false;
};

// Appends one sample. Gen images get t ~ U[0, 1], x_t = (1 - t) z0 + t z1 and
// target z1 - z0; cond images are clean with vision features attached.
template <class T>
void add_example(TrainingBatch<T>& batch, const SyntheticSample& sample, const Model<T>& model,
                 const Components& components, const ExampleOptions& options, std::mt19937_64& rng);

struct StepMetrics {
    std::string stage;
    long long step = 0;
    int stage_step = 0;
    double lr = 0;
    double loss = 0;
    double ce = 0;
    double fm = 0;
    double aux = 0;
    double grad_norm = 0;
    int ce_targets = 0;
    int fm_tokens = 0;
    double seconds = 0;
};

std::string to_jsonl(const StepMetrics& m);

struct TrainOptions {
    std::filesystem::path out_dir;
    bool resume = false;
    // Stop (with a checkpoint) once this many optimizer steps are done overall.
    std::optional<long long> stop_after;
    std::function<void(const StepMetrics&)> on_step;
};

// Runs the configured stages and returns the metrics of the steps taken by
// this call. Writes out_dir/metrics.jsonl, out_dir/checkpoint (latest) and
// out_dir/stage-<id> at the end of each stage. With resume, continues from
// out_dir/checkpoint and requires an identical config hash.
template <class T>
std::vector<StepMetrics> train(const RunConfig& config, Model<T>& model, const Components& components,
                               const TrainOptions& options);

}  // namespace mmgen
