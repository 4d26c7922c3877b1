#pragma once

// Fixed linear stand-ins for the image encoders.
//
// LatentCodec maps non-overlapping f x f x 3 patches to c channels with a
// fixed orthonormal basis; decode applies the transpose. The first three basis
// vectors are the per-channel patch means, so flat color regions survive any
// channel budget; the rest is a seeded random orthonormal completion.
//
// VisionEncoder is a frozen random patch encoder on a fixed square input.

#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "mmgen/image.hpp"
#include "mmgen/seqlayout.hpp"

namespace mmgen {

struct LatentCodecConfig {
    int downsample = 4;
    int channels = 8;
    std::uint64_t seed = 1234;
};

// Continuous latents of one image: grid.h * grid.w tokens of `channels`
// values each, in row-major patch order.
struct LatentBlock {
    Grid grid;
    int channels = 0;
    std::vector<float> values;
    double t = 1.0;

    int tokens() const { return grid.tokens(); }
};

class LatentCodec {
public:
    explicit LatentCodec(LatentCodecConfig config);

    const LatentCodecConfig& config() const { return config_; }
    int patch_dim() const { return 3 * config_.downsample * config_.downsample; }

    // Throws std::invalid_argument unless H and W are multiples of f.
    LatentBlock encode(const Image& image) const;
    Image decode(const LatentBlock& latents) const;

    // c x patch_dim; rows beyond patch_dim are zero.
    const Eigen::MatrixXd& basis() const { return basis_; }

private:
    LatentCodecConfig config_;
    Eigen::MatrixXd basis_;
};

struct VisionConfig {
    int anchor = 32;
    int patch = 8;
    int dim = 32;
    std::uint64_t seed = 4321;

    int grid_side() const { return anchor / patch; }
    int tokens() const { return grid_side() * grid_side(); }
};

class VisionEncoder {
public:
    explicit VisionEncoder(VisionConfig config);

    const VisionConfig& config() const { return config_; }

    // Resizes to anchor x anchor, then tanh(W * patch + b) per patch.
    // Returns tokens() x dim features.
    Eigen::MatrixXf features(const Image& image) const;

private:
    VisionConfig config_;
    Eigen::MatrixXf weight_;  // dim x (3 * patch^2)
    Eigen::VectorXf bias_;
};

}  // namespace mmgen
