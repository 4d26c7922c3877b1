#include "mmgen/codec.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include <Eigen/QR>

namespace mmgen {

LatentCodec::LatentCodec(LatentCodecConfig config) : config_(config) {
    if (config_.downsample < 1) throw std::invalid_argument("codec: downsample must be >= 1");
    if (config_.channels < 1) throw std::invalid_argument("codec: channels must be >= 1");
    const int f = config_.downsample;
    const int p = patch_dim();
    // Columns: per-channel mean directions first, then Gaussian columns.
    Eigen::MatrixXd seedmat(p, p);
    std::mt19937_64 rng(config_.seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (int col = 0; col < p; ++col)
        for (int row = 0; row < p; ++row) seedmat(row, col) = dist(rng);
    for (int ch = 0; ch < 3 && ch < p; ++ch) {
        seedmat.col(ch).setZero();
        for (int pix = 0; pix < f * f; ++pix) seedmat(pix * 3 + ch, ch) = 1.0;
    }
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(seedmat);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(p, p);
    // Householder QR may flip signs; keep the mean directions positive.
    for (int col = 0; col < p; ++col) {
        double dot = q.col(col).dot(seedmat.col(col));
        if (dot < 0) q.col(col) = -q.col(col);
    }
    basis_ = Eigen::MatrixXd::Zero(config_.channels, p);
    const int used = std::min(config_.channels, p);
    basis_.topRows(used) = q.leftCols(used).transpose();
}

LatentBlock LatentCodec::encode(const Image& image) const {
    const int f = config_.downsample;
    if (image.height % f != 0 || image.width % f != 0 || image.height == 0 || image.width == 0)
        throw std::invalid_argument("codec: image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                                    " is not a multiple of downsample " + std::to_string(f));
    LatentBlock out;
    out.grid = Grid{image.height / f, image.width / f};
    out.channels = config_.channels;
    out.values.resize(static_cast<std::size_t>(out.tokens()) * static_cast<std::size_t>(config_.channels));
    Eigen::VectorXd patch(patch_dim());
    for (int gy = 0; gy < out.grid.h; ++gy) {
        for (int gx = 0; gx < out.grid.w; ++gx) {
            int k = 0;
            for (int py = 0; py < f; ++py)
                for (int px = 0; px < f; ++px)
                    for (int c = 0; c < 3; ++c) patch(k++) = image.at(gy * f + py, gx * f + px, c);
            const Eigen::VectorXd z = basis_ * patch;
            const auto base = static_cast<std::size_t>(gy * out.grid.w + gx) * static_cast<std::size_t>(config_.channels);
            for (int c = 0; c < config_.channels; ++c) out.values[base + static_cast<std::size_t>(c)] = static_cast<float>(z(c));
        }
    }
    return out;
}

Image LatentCodec::decode(const LatentBlock& latents) const {
    if (latents.channels != config_.channels) throw std::invalid_argument("codec: latent channel mismatch");
    if (latents.values.size() != static_cast<std::size_t>(latents.tokens()) * static_cast<std::size_t>(latents.channels))
        throw std::invalid_argument("codec: latent payload size mismatch");
    const int f = config_.downsample;
    Image img(latents.grid.h * f, latents.grid.w * f);
    Eigen::VectorXd z(config_.channels);
    for (int gy = 0; gy < latents.grid.h; ++gy) {
        for (int gx = 0; gx < latents.grid.w; ++gx) {
            const auto base = static_cast<std::size_t>(gy * latents.grid.w + gx) * static_cast<std::size_t>(config_.channels);
            for (int c = 0; c < config_.channels; ++c) z(c) = latents.values[base + static_cast<std::size_t>(c)];
            const Eigen::VectorXd patch = basis_.transpose() * z;
            int k = 0;
            for (int py = 0; py < f; ++py)
                for (int px = 0; px < f; ++px)
                    for (int c = 0; c < 3; ++c) img.at(gy * f + py, gx * f + px, c) = static_cast<float>(patch(k++));
        }
    }
    return img;
}

VisionEncoder::VisionEncoder(VisionConfig config) : config_(config) {
    if (config_.patch < 1 || config_.anchor < config_.patch || config_.anchor % config_.patch != 0)
        throw std::invalid_argument("vision: anchor must be a positive multiple of patch");
    if (config_.dim < 1) throw std::invalid_argument("vision: dim must be >= 1");
    const int in = 3 * config_.patch * config_.patch;
    std::mt19937_64 rng(config_.seed);
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
    weight_.resize(config_.dim, in);
    for (int r = 0; r < config_.dim; ++r)
        for (int c = 0; c < in; ++c) weight_(r, c) = static_cast<float>(dist(rng) * 2.0);
    bias_.resize(config_.dim);
    for (int r = 0; r < config_.dim; ++r) bias_(r) = static_cast<float>(dist(rng));
}

Eigen::MatrixXf VisionEncoder::features(const Image& image) const {
    const Image sized = resize_bilinear(image, config_.anchor, config_.anchor);
    const int side = config_.grid_side();
    const int p = config_.patch;
    Eigen::MatrixXf out(config_.tokens(), config_.dim);
    Eigen::VectorXf patch(3 * p * p);
    for (int gy = 0; gy < side; ++gy) {
        for (int gx = 0; gx < side; ++gx) {
            int k = 0;
            for (int py = 0; py < p; ++py)
                for (int px = 0; px < p; ++px)
                    for (int c = 0; c < 3; ++c) patch(k++) = sized.at(gy * p + py, gx * p + px, c) - 0.5f;
            out.row(gy * side + gx) = (weight_ * patch + bias_).array().tanh().matrix().transpose();
        }
    }
    return out;
}

}  // namespace mmgen
