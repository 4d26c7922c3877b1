#pragma once

// Expert activation analysis: runs generation over a prompt list, counts
// expert activations by token modality and writes counts, heatmap and
// per-layer KL as CSV plus a two-panel heatmap image.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mmgen/config.hpp"
#include "mmgen/image.hpp"
#include "mmgen/model.hpp"
#include "mmgen/moe.hpp"

namespace mmgen {

// One prompt per non-blank line; throws on an empty list.
std::vector<std::string> read_prompts(const std::filesystem::path& path);

struct AnalysisOptions {
    int steps = 16;
    double guidance = 3.0;
    std::uint64_t seed = 0;
    // false: only the prompt tokens are routed (no image tokens).
    bool generate = true;
    // Fixed shape for every prompt; predicted by the model when unset.
    std::optional<int> size_anchor;
    std::optional<int> ratio_index;
    double epsilon = 1e-8;
};

struct AnalysisResult {
    ExpertStats stats;
    std::vector<std::vector<double>> heatmap;
    std::vector<double> kl;
    int prompts = 0;
    int failed_prompts = 0;  // prompts whose shape tokens were not decodable
};

// Per-prompt sampling seed: depends on the prompt text and the base seed
// only, so repeated prompts route identically.
std::uint64_t prompt_seed(const std::string& prompt, std::uint64_t base);

// Writes expert_counts.csv first, then heatmap.csv, kl.csv and heatmap.ppm.
// Throws std::domain_error after writing the counts when a layer lacks one
// of the modalities.
template <class T>
AnalysisResult analyze_experts(const Model<T>& model, const Components& components,
                               const std::vector<std::string>& prompts, const std::filesystem::path& out_dir,
                               const AnalysisOptions& options = {});

// Left panel: layers x experts heatmap (blue = text, red = image, white =
// neutral). Right panel: per-layer KL bars.
Image render_heatmap(const std::vector<std::vector<double>>& heatmap, const std::vector<double>& kl, int cell = 8);

}  // namespace mmgen
