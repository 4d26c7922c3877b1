#include "mmgen/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace mmgen {

template <class T>
Matrix<T> encode_latents(const Model<T>& model, const LatentCodec& codec, const Image& image) {
    const LatentBlock block = codec.encode(image);
    const int c = block.channels;
    const auto& mean = model.latent_mean();
    const auto& stdv = model.latent_std();
    Matrix<T> z(block.tokens(), c);
    for (int r = 0; r < block.tokens(); ++r)
        for (int k = 0; k < c; ++k)
            z(r, k) = (static_cast<T>(block.values[static_cast<std::size_t>(r * c + k)]) - mean(0, k)) / stdv(0, k);
    return z;
}

template <class T>
Image decode_latents(const Model<T>& model, const LatentCodec& codec, const Matrix<T>& latents, Grid grid) {
    if (latents.rows() != grid.tokens()) throw std::invalid_argument("decode: latent rows do not match the grid");
    LatentBlock block;
    block.grid = grid;
    block.channels = static_cast<int>(latents.cols());
    block.values.resize(static_cast<std::size_t>(latents.size()));
    const auto& mean = model.latent_mean();
    const auto& stdv = model.latent_std();
    for (Eigen::Index r = 0; r < latents.rows(); ++r)
        for (Eigen::Index k = 0; k < latents.cols(); ++k)
            block.values[static_cast<std::size_t>(r * latents.cols() + k)] =
                static_cast<float>(latents(r, k) * stdv(0, k) + mean(0, k));
    Image img = codec.decode(block);
    for (auto& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
    return img;
}

template <class T>
Matrix<T> vision_features(const VisionEncoder& vision, const Image& image) {
    return vision.features(image).cast<T>();
}

template <class T>
void fit_latent_norm(Model<T>& model, const LatentCodec& codec, const std::vector<Image>& images) {
    if (images.empty()) throw std::invalid_argument("latent norm: no images");
    const int c = codec.config().channels;
    std::vector<double> sum(static_cast<std::size_t>(c), 0.0);
    std::vector<std::vector<float>> all;
    long long count = 0;
    for (const auto& img : images) {
        auto block = codec.encode(img);
        for (int r = 0; r < block.tokens(); ++r)
            for (int k = 0; k < c; ++k) sum[static_cast<std::size_t>(k)] += block.values[static_cast<std::size_t>(r * c + k)];
        count += block.tokens();
        all.push_back(std::move(block.values));
    }
    auto& mean = model.latent_mean();
    for (int k = 0; k < c; ++k) mean(0, k) = static_cast<T>(sum[static_cast<std::size_t>(k)] / static_cast<double>(count));
    double sq = 0;
    for (const auto& values : all)
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double d = values[i] - static_cast<double>(mean(0, static_cast<Eigen::Index>(i % static_cast<std::size_t>(c))));
            sq += d * d;
        }
    const double shared = std::max(1e-3, std::sqrt(sq / static_cast<double>(count * c)));
    model.latent_std().setConstant(static_cast<T>(shared));
}

template <class T>
std::vector<Matrix<T>> TrainingBatch<T>::ordered_targets(const std::vector<GenSpan>& spans) const {
    std::vector<Matrix<T>> out;
    out.reserve(spans.size());
    for (const auto& s : spans)
        out.push_back(targets.at(static_cast<std::size_t>(s.sequence)).at(static_cast<std::size_t>(s.image_id)));
    return out;
}

template <class T>
void add_example(TrainingBatch<T>& batch, const SyntheticSample& sample, const Model<T>& model,
                 const Components& components, const ExampleOptions& options, std::mt19937_64& rng) {
    TaskSample ts = sample.task_sample();
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    if ((sample.task == Task::T2I || sample.task == Task::COT_T2TI) && options.caption_dropout > 0 &&
        unit(rng) < options.caption_dropout)
        ts.caption = std::string();
    LayoutOptions layout = components.layout;
    layout.instruction_template = options.instruction_template;
    auto seq = std::make_unique<TokenSequence>(build_sequence(ts, sample.task, components.vocab, components.tokenizer, layout));

    SequenceInput<T> input;
    input.seq = seq.get();
    input.mode = PositionMode::Training;
    std::vector<Matrix<T>> targets(seq->images.size());
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t id = 0; id < seq->images.size(); ++id) {
        const auto& slot = seq->images[id];
        const Image& img = slot.source == 0 ? sample.image : sample.edit.value().target;
        ImagePayload<T> payload;
        const Matrix<T> z1 = encode_latents(model, components.codec, img);
        if (z1.rows() != slot.shape.grid.tokens()) throw std::invalid_argument("sample image does not match its shape spec");
        if (slot.generated) {
            const double t = unit(rng);
            Matrix<T> z0(z1.rows(), z1.cols());
            for (Eigen::Index i = 0; i < z0.size(); ++i) z0.data()[i] = static_cast<T>(normal(rng));
            payload.latents = static_cast<T>(1.0 - t) * z0 + static_cast<T>(t) * z1;
            payload.t = t;
            targets[id] = z1 - z0;
        } else {
            payload.latents = z1;
            payload.vit_features = vision_features<T>(components.vision, img);
            payload.t = 1.0;
        }
        input.images.push_back(std::move(payload));
    }
    batch.inputs.push_back(std::move(input));
    batch.targets.push_back(std::move(targets));
    batch.sequences.push_back(std::move(seq));
}

std::string to_jsonl(const StepMetrics& m) {
    nlohmann::json j = {{"stage", m.stage}, {"step", m.step},         {"stage_step", m.stage_step},
                        {"lr", m.lr},       {"loss", m.loss},         {"aux", m.aux},
                        {"grad_norm", m.grad_norm}, {"ce_targets", m.ce_targets}, {"fm_tokens", m.fm_tokens},
                        {"seconds", m.seconds}};
    j["ce"] = m.ce_targets > 0 ? nlohmann::json(m.ce) : nlohmann::json(nullptr);
    j["fm"] = m.fm_tokens > 0 ? nlohmann::json(m.fm) : nlohmann::json(nullptr);
    return j.dump();
}

namespace {

// Draws training samples for one stage, from a dataset directory or the
// generator.
class SampleSource {
public:
    SampleSource(const RunConfig& config, const StageConfig& stage, const std::vector<SyntheticSample>* dataset)
        : stage_(stage), dataset_(dataset) {
        spec_ = config.data;
        spec_.task_mix = stage.task_mix;
        spec_.size_anchors = {stage.anchor};
        if (dataset_) {
            for (std::size_t i = 0; i < dataset_->size(); ++i)
                if ((*dataset_)[i].shape.size_anchor == stage.anchor) eligible_.push_back(i);
            if (eligible_.empty())
                throw std::invalid_argument("dataset has no samples at anchor " + std::to_string(stage.anchor));
        }
    }

    SyntheticSample next(std::mt19937_64& rng) const {
        if (!dataset_) return gen_synthetic(spec_, rng);
        const auto pick = std::uniform_int_distribution<std::size_t>(0, eligible_.size() - 1)(rng);
        SyntheticSample s = (*dataset_)[eligible_[pick]];
        std::array<double, 5> mix = stage_.task_mix;
        if (!s.edit) mix[static_cast<std::size_t>(Task::INTL)] = 0;
        double total = 0;
        for (double w : mix) total += w;
        if (total <= 0) throw std::invalid_argument("dataset sample supports none of the stage tasks");
        double u = std::uniform_real_distribution<double>(0.0, total)(rng);
        for (std::size_t t = 0; t < mix.size(); ++t) {
            if (u < mix[t] || t + 1 == mix.size()) {
                s.task = static_cast<Task>(t);
                break;
            }
            u -= mix[t];
        }
        return s;
    }

private:
    StageConfig stage_;
    SyntheticSpec spec_;
    const std::vector<SyntheticSample>* dataset_;
    std::vector<std::size_t> eligible_;
};

std::string rng_to_string(const std::mt19937_64& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

void rng_from_string(std::mt19937_64& rng, const std::string& text) {
    std::istringstream is(text);
    is >> rng;
    if (!is) throw std::runtime_error("checkpoint: corrupt RNG state");
}

template <class T>
void set_trainable(Model<T>& model, const StageConfig& stage) {
    auto& store = model.params();
    for (std::size_t i = 0; i < store.size(); ++i) {
        auto& p = store[i];
        const bool frozen_constant = p.name.rfind("latent_norm.", 0) == 0;
        p.trainable = !frozen_constant && (!stage.vit_only() || p.group == ag::ParamGroup::VitProjector);
    }
}

void rewrite_metrics(const std::filesystem::path& path, long long keep_below) {
    std::ifstream in(path);
    if (!in) return;
    std::vector<std::string> kept;
    for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line, nullptr, false);
        if (!j.is_discarded() && j.value("step", 0LL) < keep_below) kept.push_back(line);
    }
    in.close();
    std::ofstream out(path, std::ios::trunc);
    for (const auto& l : kept) out << l << '\n';
}

}  // namespace

template <class T>
std::vector<StepMetrics> train(const RunConfig& config, Model<T>& model, const Components& components,
                               const TrainOptions& options) {
    config.validate();
    if (config.stages.empty()) throw std::invalid_argument("train: no stages configured");
    if (options.out_dir.empty()) throw std::invalid_argument("train: output directory required");
    std::filesystem::create_directories(options.out_dir);
    const auto latest = options.out_dir / "checkpoint";
    const auto metrics_path = options.out_dir / "metrics.jsonl";

    AdamW<T> optimizer(config.train.optimizer);
    std::mt19937_64 rng(config.seed);
    TrainProgress progress;
    if (options.resume) {
        const auto info = read_checkpoint_info(latest);
        if (info.config_hash != config_hash(config))
            throw std::runtime_error("train: config hash mismatch on resume (checkpoint " + info.config_hash +
                                     ", current " + config_hash(config) + ")");
        load_checkpoint(latest, model, &optimizer);
        progress = info.progress;
        rng_from_string(rng, progress.rng_state);
        rewrite_metrics(metrics_path, progress.global_step);
    } else {
        std::vector<Image> images;
        SyntheticSpec spec = config.data;
        spec.task_mix = {1, 0, 0, 0, 0};
        spec.size_anchors = {config.stages.front().anchor};
        for (int i = 0; i < std::max(1, config.train.latent_stat_samples); ++i)
            images.push_back(gen_indexed(spec, config.seed ^ 0x5eed5eedULL, static_cast<std::uint64_t>(i)).image);
        fit_latent_norm(model, components.codec, images);
        std::ofstream(metrics_path, std::ios::trunc);
    }

    std::unique_ptr<std::vector<SyntheticSample>> dataset;
    if (!config.dataset.empty()) dataset = std::make_unique<std::vector<SyntheticSample>>(read_dataset(config.dataset));

    std::ofstream metrics_out(metrics_path, std::ios::app);
    std::vector<StepMetrics> history;
    auto checkpoint = [&](const std::filesystem::path& dir) {
        progress.rng_state = rng_to_string(rng);
        save_checkpoint(dir, config, model, &optimizer, progress);
    };

    for (int si = progress.stage_index; si < static_cast<int>(config.stages.size()); ++si) {
        const auto& stage = config.stages[static_cast<std::size_t>(si)];
        set_trainable(model, stage);
        const SampleSource source(config, stage, dataset.get());
        const int batch_size = stage.batch_size.value_or(config.train.batch_size);
        const double peak = stage.lr.value_or(config.train.optimizer.lr);
        const ExampleOptions example{config.train.caption_dropout, stage.instruction_template};

        while (progress.stage_step < stage.steps) {
            if (options.stop_after && progress.global_step >= *options.stop_after) {
                checkpoint(latest);
                return history;
            }
            const auto start = std::chrono::steady_clock::now();
            TrainingBatch<T> batch;
            for (int b = 0; b < batch_size; ++b) add_example(batch, source.next(rng), model, components, example, rng);

            model.params().zero_grad();
            ag::Graph<T> g(true);
            const auto out = model.forward(g, batch.inputs);
            const auto loss = hybrid_loss(g, model, out, batch.ordered_targets(out.gen_spans));
            if (!std::isfinite(loss.total_value))
                throw std::domain_error("train: non-finite loss at step " + std::to_string(progress.global_step));
            g.backward(loss.total);
            const double lr = scheduled_lr(config.train.optimizer, peak, progress.stage_step, stage.steps);
            const double norm = optimizer.step(model.params(), lr);

            StepMetrics m;
            m.stage = std::string(to_string(stage.id));
            m.step = progress.global_step;
            m.stage_step = progress.stage_step;
            m.lr = lr;
            m.loss = loss.total_value;
            m.ce = loss.ce;
            m.fm = loss.fm;
            m.aux = loss.aux;
            m.grad_norm = norm;
            m.ce_targets = loss.ce_targets;
            m.fm_tokens = loss.fm_tokens;
            m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            metrics_out << to_jsonl(m) << '\n';
            metrics_out.flush();
            if (options.on_step) options.on_step(m);
            history.push_back(m);

            ++progress.global_step;
            ++progress.stage_step;
            if (config.train.checkpoint_every > 0 && progress.global_step % config.train.checkpoint_every == 0 &&
                progress.stage_step < stage.steps)
                checkpoint(latest);
        }
        progress.stage_index = si + 1;
        progress.stage_step = 0;
        checkpoint(options.out_dir / ("stage-" + std::string(to_string(stage.id))));
        checkpoint(latest);
    }
    model.params().zero_grad();
    return history;
}

#define MMGEN_INSTANTIATE(T)                                                                                        \
    template Matrix<T> encode_latents(const Model<T>&, const LatentCodec&, const Image&);                          \
    template Image decode_latents(const Model<T>&, const LatentCodec&, const Matrix<T>&, Grid);                    \
    template Matrix<T> vision_features<T>(const VisionEncoder&, const Image&);                                     \
    template void fit_latent_norm(Model<T>&, const LatentCodec&, const std::vector<Image>&);                       \
    template struct TrainingBatch<T>;                                                                              \
    template void add_example(TrainingBatch<T>&, const SyntheticSample&, const Model<T>&, const Components&,       \
                              const ExampleOptions&, std::mt19937_64&);                                            \
    template std::vector<StepMetrics> train(const RunConfig&, Model<T>&, const Components&, const TrainOptions&);

MMGEN_INSTANTIATE(float)
MMGEN_INSTANTIATE(double)

}  // namespace mmgen
