#pragma once

// Synthetic shapes data for all training tasks: 1-2 flat shapes on a light
// gray canvas, templated captions, MMU question/answer pairs, LM sentences,
// templated reasoning traces and recolor edit pairs.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mmgen/image.hpp"
#include "mmgen/seqlayout.hpp"

namespace mmgen {

struct Color {
    std::string name;
    std::array<float, 3> rgb;
};

const std::vector<Color>& palette();              // red, green, blue, yellow
const std::vector<std::string>& shape_names();    // square, circle, triangle
constexpr std::array<float, 3> kBackground{0.85f, 0.85f, 0.85f};

enum class Orientation : std::uint8_t { Square, Vertical, Horizontal };
std::string_view to_string(Orientation o);

struct BoundingBox {
    int y0 = 0, x0 = 0, y1 = 0, x1 = 0;  // half-open
    bool contains(int y, int x) const { return y >= y0 && y < y1 && x >= x0 && x < x1; }
};

struct ShapeObject {
    int color = 0;  // palette index
    int shape = 0;  // shape_names index
    BoundingBox box;
};

struct EditPair {
    std::string instruction;
    Image target;
    ShapeSpec target_shape;
};

struct SyntheticSample {
    Task task = Task::T2I;
    Image image;
    ShapeSpec shape;
    Orientation orientation = Orientation::Square;
    std::vector<ShapeObject> objects;
    std::string caption;
    std::optional<std::string> question;
    std::optional<std::string> answer;
    std::optional<std::string> lm_text;
    std::optional<std::string> reasoning;
    std::optional<EditPair> edit;

    TaskSample task_sample() const;
};

struct SyntheticSpec {
    // Relative weights over T2I, LM, MMU, INTL, COT.
    std::array<double, 5> task_mix{1, 0, 0, 0, 0};
    std::vector<int> colors{0, 1, 2, 3};
    std::vector<int> shapes{0, 1, 2};
    int max_shapes = 2;
    std::vector<int> size_anchors{32};
    int ratio_count = 33;
    int downsample = 4;
    // Relative weights over square / vertical / horizontal canvases.
    std::array<double, 3> orientation_mix{1, 1, 1};
    // Forces a single object with these attributes when set.
    std::optional<int> force_color;
    std::optional<int> force_shape;
    std::optional<Orientation> force_orientation;
};

// Ratio indices a canvas orientation samples from.
std::vector<int> ratio_choices(Orientation o, int ratio_count);

Image render(int height, int width, const std::vector<ShapeObject>& objects);

SyntheticSample gen_synthetic(const SyntheticSpec& spec, std::mt19937_64& rng);

// Sample i of a dataset depends only on (seed, i).
SyntheticSample gen_indexed(const SyntheticSpec& spec, std::uint64_t seed, std::uint64_t index);

// Majority palette color over non-background pixels (nearest palette entry),
// or nullopt when no pixel departs from the background.
std::optional<int> dominant_color(const Image& image, double background_tolerance = 0.12);

// Dataset on disk: images/<id>.ppm (+ <id>_edit.ppm) and metadata.jsonl with
// one JSON record per sample.
void write_dataset(const std::filesystem::path& dir, const std::vector<SyntheticSample>& samples);
std::vector<SyntheticSample> read_dataset(const std::filesystem::path& dir);

}  // namespace mmgen
