#pragma once

// Inference: optional reasoning decode, size/ratio token prediction, flow
// ODE sampling of the image latents and decoding to pixels.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmgen/config.hpp"
#include "mmgen/image.hpp"
#include "mmgen/model.hpp"

namespace mmgen {

struct SampleRequest {
    std::string prompt;
    std::optional<int> size_anchor;  // forces the size token
    std::optional<int> ratio_index;  // forces the ratio token
    int steps = 32;
    double guidance = 3.0;
    std::uint64_t seed = 0;
    bool enable_cot = false;
    int max_reasoning_tokens = 96;
    double temperature = 0.0;  // 0 = greedy

    void validate(const Vocab& vocab) const;
};

// A sequence plus its image payloads; a generated image re-enters later
// turns through this as a cond image.
template <class T>
struct Context {
    TokenSequence sequence;
    std::vector<ImagePayload<T>> images;
};

template <class T>
struct SampleResult {
    Image image;
    Matrix<T> latents;  // model-space x_1
    ShapeSpec shape;
    std::string reasoning;
    std::vector<std::string> transcript;  // decoded token names in order
    TokenSequence sequence;               // inference layout ending in the gen image
    Context<T> context;                   // the conversation with the image as a cond image
};

class ShapeTokenError : public std::runtime_error {
public:
    ShapeTokenError(const std::string& what, std::vector<std::string> transcript);
    const std::vector<std::string>& transcript() const { return transcript_; }

private:
    std::vector<std::string> transcript_;
};

// x_{t+dt} = x_t + dt * v(x_t, t) with dt = 1 / steps from t = 0 to 1.
template <class T>
Matrix<T> euler_integrate(const std::function<Matrix<T>(const Matrix<T>&, double)>& velocity, Matrix<T> x, int steps);

// Integrates the model's velocity for the trailing gen image of `cond`.
// guidance != 1 mixes in the unconditional prediction from `uncond`:
// v = v_u + g (v_c - v_u). Expert statistics are taken from the conditional
// pass only.
template <class T>
Matrix<T> flow_sample(const Model<T>& model, const Context<T>& cond, const Context<T>* uncond, Matrix<T> x0, int steps,
                      double guidance, ExpertStats* stats = nullptr);

template <class T>
SampleResult<T> sample(const Model<T>& model, const Components& components, const SampleRequest& request,
                       ExpertStats* stats = nullptr, const Context<T>* history = nullptr);

// Next-token logits at the last position of a text-only or cond-only context.
template <class T>
Matrix<T> next_token_logits(const Model<T>& model, const Context<T>& context, ExpertStats* stats = nullptr);

}  // namespace mmgen
