#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

#include "mmgen/image.hpp"

namespace mmgen {

namespace {

unsigned char to_byte(float v) {
    return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Image& image) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("image: cannot write " + path.string());
    os << "P6\n" << image.width << ' ' << image.height << "\n255\n";
    std::vector<unsigned char> bytes(image.data.size());
    std::transform(image.data.begin(), image.data.end(), bytes.begin(), to_byte);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("image: short write to " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("image: cannot read " + path.string());
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    is >> magic >> w >> h >> maxval;
    if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255)
        throw std::runtime_error("image: unsupported PPM header in " + path.string());
    is.get();
    Image img(h, w);
    std::vector<unsigned char> bytes(img.data.size());
    is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (is.gcount() != static_cast<std::streamsize>(bytes.size()))
        throw std::runtime_error("image: truncated PPM " + path.string());
    std::transform(bytes.begin(), bytes.end(), img.data.begin(), [](unsigned char b) { return b / 255.0f; });
    return img;
}

Image quantize8(const Image& image) {
    Image out = image;
    for (auto& v : out.data) v = to_byte(v) / 255.0f;
    return out;
}

Image resize_bilinear(const Image& image, int height, int width) {
    if (height <= 0 || width <= 0) throw std::invalid_argument("image: resize target must be positive");
    if (image.height == height && image.width == width) return image;
    Image out(height, width);
    const float sy = static_cast<float>(image.height) / static_cast<float>(height);
    const float sx = static_cast<float>(image.width) / static_cast<float>(width);
    for (int y = 0; y < height; ++y) {
        const float fy = std::clamp((static_cast<float>(y) + 0.5f) * sy - 0.5f, 0.0f, static_cast<float>(image.height - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, image.height - 1);
        const float wy = fy - static_cast<float>(y0);
        for (int x = 0; x < width; ++x) {
            const float fx =
                std::clamp((static_cast<float>(x) + 0.5f) * sx - 0.5f, 0.0f, static_cast<float>(image.width - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, image.width - 1);
            const float wx = fx - static_cast<float>(x0);
            for (int c = 0; c < 3; ++c) {
                const float top = image.at(y0, x0, c) * (1 - wx) + image.at(y0, x1, c) * wx;
                const float bot = image.at(y1, x0, c) * (1 - wx) + image.at(y1, x1, c) * wx;
                out.at(y, x, c) = top * (1 - wy) + bot * wy;
            }
        }
    }
    return out;
}

}  // namespace mmgen
