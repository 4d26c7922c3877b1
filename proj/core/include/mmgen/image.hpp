#pragma once

#include <filesystem>
#include <vector>

namespace mmgen {

// H x W x 3, row-major, channel-interleaved, values nominally in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> data;

    Image() = default;
    Image(int h, int w, float fill = 0.0f)
        : height(h), width(w), data(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * 3, fill) {}

    float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

    friend bool operator==(const Image&, const Image&) = default;
};

// Binary PPM (P6, 8-bit). Values are clamped to [0, 1] and rounded.
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

// Quantizes to the 8-bit grid a PPM round trip would produce.
Image quantize8(const Image& image);

// Bilinear resize (align-corners off).
Image resize_bilinear(const Image& image, int height, int width);

}  // namespace mmgen
