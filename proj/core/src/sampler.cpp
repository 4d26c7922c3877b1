#include "mmgen/sampler.hpp"

#include <cmath>

#include "mmgen/train.hpp"

namespace mmgen {

void SampleRequest::validate(const Vocab& vocab) const {
    if (steps < 1) throw std::invalid_argument("sample: steps must be >= 1");
    if (!std::isfinite(guidance)) throw std::invalid_argument("sample: guidance must be finite");
    if (temperature < 0) throw std::invalid_argument("sample: temperature must be >= 0");
    if (size_anchor) {
        const auto& anchors = vocab.config().size_anchors;
        if (std::find(anchors.begin(), anchors.end(), *size_anchor) == anchors.end())
            throw std::invalid_argument("sample: no size token for anchor " + std::to_string(*size_anchor));
    }
    if (ratio_index && (*ratio_index < 0 || *ratio_index >= vocab.ratio_count()))
        throw std::invalid_argument("sample: ratio index " + std::to_string(*ratio_index) + " out of range");
}

ShapeTokenError::ShapeTokenError(const std::string& what, std::vector<std::string> transcript)
    : std::runtime_error([&] {
          std::string msg = "sample: " + what + "; transcript:";
          for (const auto& t : transcript) msg += " " + t;
          return msg;
      }()),
      transcript_(std::move(transcript)) {}

namespace {

void push_token(TokenSequence& s, int id) {
    if (s.segments.empty() || s.segments.back().kind != SegmentKind::Text) {
        s.segments.push_back(Segment::text(1));
    } else {
        ++s.segments.back().token_count;
    }
    s.tokens.push_back(id);
    s.loss_mask.push_back(0);
}

int push_gen(TokenSequence& s, const ShapeSpec& shape) {
    const int id = static_cast<int>(s.images.size());
    s.images.push_back(ImageSlot{id, true, shape});
    s.segments.push_back(Segment::image(SegmentKind::GenImage, shape.grid, id));
    s.tokens.insert(s.tokens.end(), static_cast<std::size_t>(shape.grid.tokens()), kImageToken);
    s.loss_mask.insert(s.loss_mask.end(), static_cast<std::size_t>(shape.grid.tokens()), 0);
    return id;
}

template <class T>
int choose(const Matrix<T>& logits, double temperature, std::mt19937_64& rng) {
    const auto row = logits.row(logits.rows() - 1);
    if (!row.allFinite()) throw std::domain_error("sample: non-finite logits");
    int best = 0;
    for (int i = 1; i < row.cols(); ++i)
        if (row(i) > row(best)) best = i;
    if (temperature <= 0) return best;
    std::vector<double> w(static_cast<std::size_t>(row.cols()));
    for (int i = 0; i < row.cols(); ++i) w[static_cast<std::size_t>(i)] = std::exp((row(i) - row(best)) / temperature);
    std::discrete_distribution<int> dist(w.begin(), w.end());
    return dist(rng);
}

template <class T>
int gen_image_id(const TokenSequence& seq) {
    if (seq.segments.empty() || seq.segments.back().kind != SegmentKind::GenImage)
        throw std::invalid_argument("flow_sample: context must end with a gen image");
    return seq.segments.back().image_id;
}

template <class T>
Matrix<T> velocity_of(const Model<T>& model, const Context<T>& ctx, const Matrix<T>& x, double t, ExpertStats* stats) {
    const int id = gen_image_id<T>(ctx.sequence);
    SequenceInput<T> in;
    in.seq = &ctx.sequence;
    in.images = ctx.images;
    in.images.resize(ctx.sequence.images.size());
    in.images[static_cast<std::size_t>(id)].latents = x;
    in.images[static_cast<std::size_t>(id)].t = t;
    in.mode = PositionMode::Inference;
    in.all_targets = false;
    ag::Graph<T> g(false);
    ForwardOptions options;
    options.stats = stats;
    const auto out = model.forward(g, {in}, options);
    return g.value(out.velocity);
}

}  // namespace

template <class T>
Matrix<T> euler_integrate(const std::function<Matrix<T>(const Matrix<T>&, double)>& velocity, Matrix<T> x, int steps) {
    if (steps < 1) throw std::invalid_argument("euler: steps must be >= 1");
    const double dt = 1.0 / steps;
    for (int i = 0; i < steps; ++i) {
        const Matrix<T> v = velocity(x, i * dt);
        x += static_cast<T>(dt) * v;
        if (!x.allFinite()) throw std::domain_error("flow_sample: non-finite state at step " + std::to_string(i));
    }
    return x;
}

template <class T>
Matrix<T> flow_sample(const Model<T>& model, const Context<T>& cond, const Context<T>* uncond, Matrix<T> x0, int steps,
                      double guidance, ExpertStats* stats) {
    const bool mix = guidance != 1.0;
    if (mix && !uncond) throw std::invalid_argument("flow_sample: guidance needs an unconditional context");
    std::function<Matrix<T>(const Matrix<T>&, double)> v = [&](const Matrix<T>& x, double t) -> Matrix<T> {
        if (guidance == 0.0) return velocity_of(model, *uncond, x, t, nullptr);
        Matrix<T> vc = velocity_of(model, cond, x, t, stats);
        if (!mix) return vc;
        Matrix<T> vu = velocity_of(model, *uncond, x, t, nullptr);
        return vu + static_cast<T>(guidance) * (vc - vu);
    };
    return euler_integrate(v, std::move(x0), steps);
}

template <class T>
Matrix<T> next_token_logits(const Model<T>& model, const Context<T>& context, ExpertStats* stats) {
    SequenceInput<T> in;
    in.seq = &context.sequence;
    in.images = context.images;
    in.mode = PositionMode::Inference;
    in.all_targets = false;
    in.logit_positions = {context.sequence.size() - 1};
    ag::Graph<T> g(false);
    ForwardOptions options;
    options.stats = stats;
    const auto out = model.forward(g, {in}, options);
    return g.value(out.logits);
}

template <class T>
SampleResult<T> sample(const Model<T>& model, const Components& components, const SampleRequest& request,
                       ExpertStats* stats, const Context<T>* history) {
    const auto& vocab = components.vocab;
    request.validate(vocab);
    std::mt19937_64 rng(request.seed);
    SampleResult<T> result;

    Context<T> ctx;
    if (history) ctx = *history;
    if (ctx.sequence.tokens.empty()) push_token(ctx.sequence, vocab.bos());
    for (int id : components.tokenizer.encode(request.prompt)) push_token(ctx.sequence, id);
    ctx.sequence.finalize();

    auto next = [&] {
        ctx.sequence.finalize();
        return choose(next_token_logits(model, ctx), request.temperature, rng);
    };
    auto emit = [&](int id) {
        push_token(ctx.sequence, id);
        result.transcript.push_back(vocab.name_of(id));
    };

    std::optional<int> predicted_size;
    if (request.enable_cot) {
        std::vector<int> reasoning;
        for (int i = 0;; ++i) {
            if (i >= request.max_reasoning_tokens)
                throw ShapeTokenError("reasoning did not reach a size token within " +
                                          std::to_string(request.max_reasoning_tokens) + " tokens",
                                      result.transcript);
            const int id = next();
            if (vocab.anchor_of(id)) {
                predicted_size = id;
                break;
            }
            if (vocab.is_special(id))
                throw ShapeTokenError("expected reasoning text or a size token, got " + vocab.name_of(id), result.transcript);
            emit(id);
            reasoning.push_back(id);
        }
        result.reasoning = components.tokenizer.decode(reasoning);
    }

    int size_id = 0;
    if (request.size_anchor) {
        size_id = vocab.size_token(*request.size_anchor);
    } else {
        size_id = predicted_size ? *predicted_size : next();
        if (!vocab.anchor_of(size_id))
            throw ShapeTokenError("expected a size token, got " + vocab.name_of(size_id), result.transcript);
    }
    emit(size_id);

    int ratio_id = 0;
    if (request.ratio_index) {
        ratio_id = vocab.ratio_token(*request.ratio_index);
    } else {
        ratio_id = next();
        if (!vocab.ratio_of(ratio_id))
            throw ShapeTokenError("expected a ratio token, got " + vocab.name_of(ratio_id), result.transcript);
    }
    emit(ratio_id);
    emit(vocab.img_start());
    emit(vocab.timestep_slot());

    const int downsample = components.codec.config().downsample;
    result.shape = make_shape(*vocab.anchor_of(size_id), *vocab.ratio_of(ratio_id), vocab.ratio_count(), downsample);
    const int gen_id = push_gen(ctx.sequence, result.shape);
    ctx.sequence.finalize();
    if (auto violation = validate_inference_layout(ctx.sequence.segments))
        throw std::logic_error("sample: invalid inference layout: " + violation->message);
    ctx.images.resize(ctx.sequence.images.size());

    Context<T> uncond;
    const bool need_uncond = request.guidance != 1.0;
    if (need_uncond) {
        for (int id : {vocab.bos(), size_id, ratio_id, vocab.img_start(), vocab.timestep_slot()}) push_token(uncond.sequence, id);
        push_gen(uncond.sequence, result.shape);
        uncond.sequence.finalize();
        uncond.images.resize(1);
    }

    const int channels = model.config().latent_channels;
    Matrix<T> x0(result.shape.grid.tokens(), channels);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Eigen::Index i = 0; i < x0.size(); ++i) x0.data()[i] = static_cast<T>(normal(rng));
    result.latents = flow_sample(model, ctx, need_uncond ? &uncond : nullptr, std::move(x0), request.steps,
                                 request.guidance, stats);
    result.image = decode_latents(model, components.codec, result.latents, result.shape.grid);
    result.sequence = ctx.sequence;

    result.context.sequence = as_conditioned(ctx.sequence, components.layout);
    push_token(result.context.sequence, vocab.img_end());
    result.context.sequence.finalize();
    result.context.images = ctx.images;
    auto& payload = result.context.images[static_cast<std::size_t>(gen_id)];
    payload.latents = encode_latents(model, components.codec, result.image);
    payload.vit_features = vision_features<T>(components.vision, result.image);
    payload.t = 1.0;
    return result;
}

#define MMGEN_INSTANTIATE(T)                                                                                      \
    template Matrix<T> euler_integrate(const std::function<Matrix<T>(const Matrix<T>&, double)>&, Matrix<T>, int); \
    template Matrix<T> flow_sample(const Model<T>&, const Context<T>&, const Context<T>*, Matrix<T>, int, double,   \
                                   ExpertStats*);                                                                  \
    template Matrix<T> next_token_logits(const Model<T>&, const Context<T>&, ExpertStats*);                       \
    template SampleResult<T> sample(const Model<T>&, const Components&, const SampleRequest&, ExpertStats*,        \
                                    const Context<T>*);

MMGEN_INSTANTIATE(float)
MMGEN_INSTANTIATE(double)

}  // namespace mmgen
