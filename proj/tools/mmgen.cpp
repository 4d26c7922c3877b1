#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mmgen/analysis.hpp"
#include "mmgen/attnmask.hpp"
#include "mmgen/checkpoint.hpp"
#include "mmgen/config.hpp"
#include "mmgen/rope2d.hpp"
#include "mmgen/sampler.hpp"
#include "mmgen/synthetic.hpp"
#include "mmgen/train.hpp"

namespace {

using namespace mmgen;

struct GenDataArgs {
    std::string config;
    std::vector<std::string> overrides;
    std::string out;
    int count = 1000;
    std::uint64_t seed = 0;
    int stage = 0;
};

struct TrainArgs {
    std::string config;
    std::vector<std::string> overrides;
    std::string out;
    bool resume = false;
    long long stop_after = -1;
    int log_every = 10;
};

struct SampleArgs {
    std::string checkpoint;
    std::string prompt;
    std::string out = "sample.ppm";
    std::string transcript;
    std::optional<int> size;
    std::optional<int> ratio;
    std::optional<int> steps;
    std::optional<double> guidance;
    std::uint64_t seed = 0;
    bool cot = false;
    double temperature = 0.0;
};

struct AnalyzeArgs {
    std::string checkpoint;
    std::string prompts;
    std::string out;
    int steps = 16;
    std::optional<double> guidance;
    std::uint64_t seed = 0;
    bool no_generate = false;
    std::optional<int> size;
    std::optional<int> ratio;
};

struct InspectArgs {
    std::string layout;
    std::string mode = "training";
    std::string vit_grid = "4x4";
    bool check = false;
};

PositionMode parse_mode(const std::string& m) {
    if (m == "training") return PositionMode::Training;
    if (m == "inference") return PositionMode::Inference;
    throw std::invalid_argument("mode must be training or inference");
}

Grid parse_grid(const std::string& g) {
    const auto segs = parse_layout("gen:" + g);
    return *segs.front().grid;
}

int run_gen_data(const GenDataArgs& a) {
    const RunConfig cfg = load_config(a.config, a.overrides);
    if (cfg.stages.empty()) throw std::invalid_argument("gen-data: config has no stages to take a task mix from");
    const auto& stage = cfg.stages.at(static_cast<std::size_t>(a.stage));
    SyntheticSpec spec = cfg.data;
    spec.task_mix = stage.task_mix;
    spec.size_anchors = {stage.anchor};
    std::vector<SyntheticSample> samples;
    samples.reserve(static_cast<std::size_t>(a.count));
    for (int i = 0; i < a.count; ++i) samples.push_back(gen_indexed(spec, a.seed, static_cast<std::uint64_t>(i)));
    write_dataset(a.out, samples);
    std::cout << "wrote " << samples.size() << " samples to " << a.out << "\n";
    return 0;
}

template <class T>
int train_with(const RunConfig& cfg, const TrainArgs& a) {
    const Components comps(cfg);
    Model<T> model(model_config(cfg, comps.vocab));
    std::cout << "model parameters: " << model.params().element_count() << " (config " << config_hash(cfg) << ")\n";
    TrainOptions opts;
    opts.out_dir = a.out;
    opts.resume = a.resume;
    if (a.stop_after >= 0) opts.stop_after = a.stop_after;
    opts.on_step = [&](const StepMetrics& m) {
        if (a.log_every > 0 && m.step % a.log_every == 0) std::cout << to_jsonl(m) << std::endl;
    };
    const auto metrics = train(cfg, model, comps, opts);
    std::cout << "trained " << metrics.size() << " steps; checkpoint at " << (std::filesystem::path(a.out) / "checkpoint")
              << "\n";
    return 0;
}

int run_train(const TrainArgs& a) {
    const RunConfig cfg = load_config(a.config, a.overrides);
    return cfg.precision == Precision::F64 ? train_with<double>(cfg, a) : train_with<float>(cfg, a);
}

template <class T>
int sample_with(const CheckpointInfo& info, const SampleArgs& a) {
    const Components comps(info.config);
    Model<T> model(model_config(info.config, comps.vocab));
    load_checkpoint<T>(a.checkpoint, model);
    SampleRequest req;
    req.prompt = a.prompt;
    req.size_anchor = a.size;
    req.ratio_index = a.ratio;
    req.steps = a.steps.value_or(info.config.sample.steps);
    req.guidance = a.guidance.value_or(info.config.sample.guidance);
    req.seed = a.seed;
    req.enable_cot = a.cot;
    req.max_reasoning_tokens = info.config.sample.max_reasoning_tokens;
    req.temperature = a.temperature;
    const auto result = sample(model, comps, req);
    write_ppm(a.out, result.image);
    nlohmann::json t = {{"prompt", a.prompt},
                        {"tokens", result.transcript},
                        {"reasoning", result.reasoning},
                        {"size_anchor", result.shape.size_anchor},
                        {"ratio_index", result.shape.ratio_index},
                        {"grid", {result.shape.grid.h, result.shape.grid.w}},
                        {"seed", a.seed}};
    if (!a.transcript.empty()) std::ofstream(a.transcript) << t.dump(2) << "\n";
    std::cout << t.dump() << "\n";
    return 0;
}

int run_sample(const SampleArgs& a) {
    const auto info = read_checkpoint_info(a.checkpoint);
    return info.dtype == "f64" ? sample_with<double>(info, a) : sample_with<float>(info, a);
}

template <class T>
int analyze_with(const CheckpointInfo& info, const AnalyzeArgs& a) {
    const auto prompts = read_prompts(a.prompts);
    const Components comps(info.config);
    Model<T> model(model_config(info.config, comps.vocab));
    load_checkpoint<T>(a.checkpoint, model);
    AnalysisOptions opts;
    opts.steps = a.steps;
    opts.guidance = a.guidance.value_or(info.config.sample.guidance);
    opts.seed = a.seed;
    opts.generate = !a.no_generate;
    opts.size_anchor = a.size;
    opts.ratio_index = a.ratio;
    const auto result = analyze_experts(model, comps, prompts, a.out, opts);
    std::cout << "prompts: " << result.prompts << " (shape-token failures: " << result.failed_prompts << ")\n";
    for (std::size_t l = 0; l < result.kl.size(); ++l) std::cout << "layer " << l << " KL " << result.kl[l] << "\n";
    bool increasing = true;
    for (std::size_t l = 1; l < result.kl.size(); ++l) increasing = increasing && result.kl[l] >= result.kl[l - 1];
    std::cout << "KL non-decreasing with depth: " << (increasing ? "yes" : "no") << "\n";
    return 0;
}

int run_analyze(const AnalyzeArgs& a) {
    const auto info = read_checkpoint_info(a.checkpoint);
    return info.dtype == "f64" ? analyze_with<double>(info, a) : analyze_with<float>(info, a);
}

int run_inspect_mask(const InspectArgs& a) {
    const auto segments = parse_layout(a.layout);
    if (a.check || parse_mode(a.mode) == PositionMode::Inference) {
        if (auto v = validate_inference_layout(segments)) {
            std::cerr << "inference layout violation: " << v->message << "\n";
            return 2;
        }
    }
    std::cout << build_mask(segments).to_text();
    return 0;
}

int run_inspect_positions(const InspectArgs& a) {
    const auto segments = parse_layout(a.layout);
    const auto mode = parse_mode(a.mode);
    if (mode == PositionMode::Inference) {
        if (auto v = validate_inference_layout(segments)) {
            std::cerr << "inference layout violation: " << v->message << "\n";
            return 2;
        }
    }
    const auto positions = assign_positions(segments, mode, parse_grid(a.vit_grid));
    write_positions_csv(std::cout, segments, positions);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mmgen: native multimodal generation at desk scale"};
    app.require_subcommand(1);

    GenDataArgs gd;
    auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset directory");
    gen->add_option("-c,--config", gd.config, "Run config (data and stage task mix)")->required();
    gen->add_option("--set", gd.overrides, "Config override key.path=value");
    gen->add_option("-o,--out", gd.out, "Output directory")->required();
    gen->add_option("-n,--count", gd.count, "Number of samples")->check(CLI::PositiveNumber);
    gen->add_option("--seed", gd.seed, "Generator seed");
    gen->add_option("--stage", gd.stage, "Stage whose task mix and anchor to use");

    TrainArgs tr;
    auto* trn = app.add_subcommand("train", "Run the configured training stages");
    trn->add_option("-c,--config", tr.config, "Run config")->required();
    trn->add_option("--set", tr.overrides, "Config override key.path=value");
    trn->add_option("-o,--out", tr.out, "Run directory")->required();
    trn->add_flag("--resume", tr.resume, "Continue from <out>/checkpoint");
    trn->add_option("--stop-after", tr.stop_after, "Stop after this many total steps");
    trn->add_option("--log-every", tr.log_every, "Print every N steps");

    SampleArgs sa;
    auto* smp = app.add_subcommand("sample", "Generate one image");
    smp->add_option("--checkpoint", sa.checkpoint, "Checkpoint directory")->required();
    smp->add_option("-p,--prompt", sa.prompt, "Prompt text")->required();
    smp->add_option("-o,--out", sa.out, "Output PPM");
    smp->add_option("--transcript", sa.transcript, "Write the transcript JSON here");
    smp->add_option("--size", sa.size, "Force the size anchor");
    smp->add_option("--ratio", sa.ratio, "Force the ratio token index");
    smp->add_option("--steps", sa.steps, "ODE steps")->check(CLI::PositiveNumber);
    smp->add_option("--guidance", sa.guidance, "Classifier-free guidance scale");
    smp->add_option("--seed", sa.seed, "Sampling seed");
    smp->add_flag("--cot", sa.cot, "Decode a reasoning trace first");
    smp->add_option("--temperature", sa.temperature, "Text sampling temperature (0 = greedy)");

    AnalyzeArgs an;
    auto* ana = app.add_subcommand("analyze", "Expert activation analysis over a prompt file");
    ana->add_option("--checkpoint", an.checkpoint, "Checkpoint directory")->required();
    ana->add_option("--prompts", an.prompts, "Prompt file, one per line")->required();
    ana->add_option("-o,--out", an.out, "Output directory")->required();
    ana->add_option("--steps", an.steps, "ODE steps per prompt")->check(CLI::PositiveNumber);
    ana->add_option("--guidance", an.guidance, "Classifier-free guidance scale");
    ana->add_option("--seed", an.seed, "Base seed");
    ana->add_flag("--no-generate", an.no_generate, "Route prompt tokens only");
    ana->add_option("--size", an.size, "Force the size anchor");
    ana->add_option("--ratio", an.ratio, "Force the ratio token index");

    InspectArgs im;
    auto* msk = app.add_subcommand("inspect-mask", "Print the attention mask of a layout as 0/1 rows");
    msk->add_option("layout", im.layout, "Layout, e.g. text:2,gen:2x2,text:1")->required();
    msk->add_option("--mode", im.mode, "training | inference");
    msk->add_flag("--check", im.check, "Fail on layouts invalid at inference");

    InspectArgs ip;
    auto* pos = app.add_subcommand("inspect-positions", "Print per-token 2D positions as CSV");
    pos->add_option("layout", ip.layout, "Layout, e.g. text:3,gen:2x2,text:1")->required();
    pos->add_option("--mode", ip.mode, "training | inference");
    pos->add_option("--vit-grid", ip.vit_grid, "Vision half grid used by the training shift");

    CLI11_PARSE(app, argc, argv);
    try {
        if (gen->parsed()) return run_gen_data(gd);
        if (trn->parsed()) return run_train(tr);
        if (smp->parsed()) return run_sample(sa);
        if (ana->parsed()) return run_analyze(an);
        if (msk->parsed()) return run_inspect_mask(im);
        if (pos->parsed()) return run_inspect_positions(ip);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
