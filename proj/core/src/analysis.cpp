#include "mmgen/analysis.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#include "mmgen/sampler.hpp"

namespace mmgen {

std::vector<std::string> read_prompts(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("analyze: cannot open prompt file " + path.string());
    std::vector<std::string> prompts;
    for (std::string line; std::getline(in, line);) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        prompts.push_back(line);
    }
    if (prompts.empty()) throw std::invalid_argument("analyze: prompt file " + path.string() + " is empty");
    return prompts;
}

std::uint64_t prompt_seed(const std::string& prompt, std::uint64_t base) {
    std::uint64_t h = 1469598103934665603ULL ^ base;
    for (unsigned char c : prompt) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

Image render_heatmap(const std::vector<std::vector<double>>& heatmap, const std::vector<double>& kl, int cell) {
    if (heatmap.empty() || heatmap.front().empty()) throw std::invalid_argument("heatmap: empty matrix");
    const int layers = static_cast<int>(heatmap.size());
    const int experts = static_cast<int>(heatmap.front().size());
    const int gap = cell;
    const int bar_width = 12 * cell;
    const int height = layers * cell;
    const int width = experts * cell + gap + bar_width;
    Image img(height, width);
    std::fill(img.data.begin(), img.data.end(), 1.0f);
    for (int l = 0; l < layers; ++l) {
        for (int e = 0; e < experts; ++e) {
            const double v = std::clamp(heatmap[static_cast<std::size_t>(l)][static_cast<std::size_t>(e)], 0.0, 1.0);
            // 0 -> blue, 0.5 -> white, 1 -> red
            const float r = v >= 0.5 ? 1.0f : static_cast<float>(2 * v);
            const float b = v <= 0.5 ? 1.0f : static_cast<float>(2 * (1 - v));
            const float g = std::min(r, b);
            for (int y = 0; y < cell; ++y)
                for (int x = 0; x < cell; ++x) {
                    img.at(l * cell + y, e * cell + x, 0) = r;
                    img.at(l * cell + y, e * cell + x, 1) = g;
                    img.at(l * cell + y, e * cell + x, 2) = b;
                }
        }
    }
    const double max_kl = kl.empty() ? 0.0 : *std::max_element(kl.begin(), kl.end());
    for (int l = 0; l < layers && l < static_cast<int>(kl.size()); ++l) {
        const int len = max_kl > 0 ? static_cast<int>(bar_width * kl[static_cast<std::size_t>(l)] / max_kl) : 0;
        for (int y = 1; y + 1 < cell; ++y)
            for (int x = 0; x < len; ++x) {
                img.at(l * cell + y, experts * cell + gap + x, 0) = 0.2f;
                img.at(l * cell + y, experts * cell + gap + x, 1) = 0.2f;
                img.at(l * cell + y, experts * cell + gap + x, 2) = 0.2f;
            }
    }
    return img;
}

template <class T>
AnalysisResult analyze_experts(const Model<T>& model, const Components& components,
                               const std::vector<std::string>& prompts, const std::filesystem::path& out_dir,
                               const AnalysisOptions& options) {
    if (prompts.empty()) throw std::invalid_argument("analyze: no prompts");
    std::filesystem::create_directories(out_dir);
    const auto& cfg = model.config();
    AnalysisResult result{ExpertStats(cfg.layers, cfg.moe.num_experts), {}, {}, 0, 0};

    for (const auto& prompt : prompts) {
        ExpertStats local(cfg.layers, cfg.moe.num_experts);
        if (options.generate) {
            SampleRequest req;
            req.prompt = prompt;
            req.steps = options.steps;
            req.guidance = options.guidance;
            req.seed = prompt_seed(prompt, options.seed);
            req.size_anchor = options.size_anchor;
            req.ratio_index = options.ratio_index;
            try {
                sample(model, components, req, &local);
            } catch (const ShapeTokenError&) {
                ++result.failed_prompts;
                continue;
            }
        } else {
            Context<T> ctx;
            ctx.sequence = build_prompt(prompt, components.vocab, components.tokenizer, components.layout);
            next_token_logits(model, ctx, &local);
        }
        result.stats.merge(local);
        ++result.prompts;
    }

    {
        std::ofstream os(out_dir / "expert_counts.csv");
        result.stats.write_csv(os);
    }
    result.heatmap = heatmap_stat(result.stats);
    result.kl = kl_per_layer(result.stats, options.epsilon);
    {
        std::ofstream os(out_dir / "heatmap.csv");
        write_heatmap_csv(os, result.heatmap);
    }
    {
        std::ofstream os(out_dir / "kl.csv");
        write_kl_csv(os, result.kl);
    }
    write_ppm(out_dir / "heatmap.ppm", render_heatmap(result.heatmap, result.kl));
    return result;
}

template AnalysisResult analyze_experts(const Model<float>&, const Components&, const std::vector<std::string>&,
                                        const std::filesystem::path&, const AnalysisOptions&);
template AnalysisResult analyze_experts(const Model<double>&, const Components&, const std::vector<std::string>&,
                                        const std::filesystem::path&, const AnalysisOptions&);

}  // namespace mmgen
