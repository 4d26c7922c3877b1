#include "mmgen/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace mmgen {

const std::vector<Color>& palette() {
    static const std::vector<Color> colors = {
        {"red", {0.90f, 0.12f, 0.10f}},
        {"green", {0.10f, 0.70f, 0.20f}},
        {"blue", {0.15f, 0.25f, 0.90f}},
        {"yellow", {0.95f, 0.85f, 0.10f}},
    };
    return colors;
}

const std::vector<std::string>& shape_names() {
    static const std::vector<std::string> names = {"square", "circle", "triangle"};
    return names;
}

std::string_view to_string(Orientation o) {
    switch (o) {
        case Orientation::Square: return "square";
        case Orientation::Vertical: return "vertical";
        case Orientation::Horizontal: return "horizontal";
    }
    return "?";
}

std::vector<int> ratio_choices(Orientation o, int ratio_count) {
    const int center = (ratio_count - 1) / 2;
    if (o == Orientation::Square) return {center};
    const double unit = (ratio_count - 1) / 32.0;
    std::vector<int> out;
    for (int step : {4, 6, 8}) {
        int off = std::max(1, static_cast<int>(std::lround(unit * step)));
        off = std::min(off, center);
        const int idx = o == Orientation::Vertical ? center - off : center + off;
        if (std::find(out.begin(), out.end(), idx) == out.end()) out.push_back(idx);
    }
    return out;
}

Image render(int height, int width, const std::vector<ShapeObject>& objects) {
    Image img(height, width);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = kBackground[static_cast<std::size_t>(c)];
    for (const auto& obj : objects) {
        const auto& rgb = palette().at(static_cast<std::size_t>(obj.color)).rgb;
        const auto& b = obj.box;
        const double bh = b.y1 - b.y0;
        const double bw = b.x1 - b.x0;
        const double cy = b.y0 + bh / 2.0;
        const double cx = b.x0 + bw / 2.0;
        for (int y = std::max(0, b.y0); y < std::min(height, b.y1); ++y) {
            for (int x = std::max(0, b.x0); x < std::min(width, b.x1); ++x) {
                const double py = y + 0.5;
                const double px = x + 0.5;
                bool inside = false;
                switch (obj.shape) {
                    case 0: inside = true; break;
                    case 1: {
                        const double dy = (py - cy) / (bh / 2.0);
                        const double dx = (px - cx) / (bw / 2.0);
                        inside = dx * dx + dy * dy <= 1.0;
                        break;
                    }
                    case 2: {
                        const double frac = (py - b.y0) / bh;  // 0 at apex, 1 at base
                        inside = std::abs(px - cx) <= frac * bw / 2.0 + 0.25;
                        break;
                    }
                    default: throw std::invalid_argument("synthetic: unknown shape index");
                }
                if (!inside) continue;
                for (int c = 0; c < 3; ++c) img.at(y, x, c) = rgb[static_cast<std::size_t>(c)];
            }
        }
    }
    return img;
}

namespace {

template <std::size_t N>
int pick_weighted(const std::array<double, N>& weights, std::mt19937_64& rng) {
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (!(total > 0)) throw std::invalid_argument("synthetic: mixture weights must have a positive sum");
    std::uniform_real_distribution<double> u(0.0, total);
    double r = u(rng);
    for (std::size_t i = 0; i < N; ++i) {
        if (r < weights[i]) return static_cast<int>(i);
        r -= weights[i];
    }
    for (std::size_t i = N; i-- > 0;)
        if (weights[i] > 0) return static_cast<int>(i);
    return 0;
}

template <class V>
const typename V::value_type& pick(const V& values, std::mt19937_64& rng) {
    if (values.empty()) throw std::invalid_argument("synthetic: empty choice set");
    std::uniform_int_distribution<std::size_t> d(0, values.size() - 1);
    return values[d(rng)];
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
    if (hi < lo) return lo;
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

std::string object_phrase(const ShapeObject& o) {
    return palette()[static_cast<std::size_t>(o.color)].name + " " + shape_names()[static_cast<std::size_t>(o.shape)];
}

const char* relation_words(int relation) {
    switch (relation) {
        case 0: return "left of";
        case 1: return "right of";
        case 2: return "above";
        default: return "below";
    }
}

std::string canvas_phrase(Orientation o) {
    switch (o) {
        case Orientation::Vertical: return "a tall portrait canvas, so we use a vertical aspect ratio";
        case Orientation::Horizontal: return "a wide landscape canvas, so we use a horizontal aspect ratio";
        case Orientation::Square: return "a square canvas, so we use a square aspect ratio";
    }
    return "";
}

}  // namespace

TaskSample SyntheticSample::task_sample() const {
    TaskSample t;
    t.caption = caption;
    t.text = lm_text;
    t.question = question;
    t.answer = answer;
    t.reasoning = reasoning;
    t.images.push_back(shape);
    if (edit) {
        t.instruction = edit->instruction;
        t.images.push_back(edit->target_shape);
    }
    return t;
}

SyntheticSample gen_synthetic(const SyntheticSpec& spec, std::mt19937_64& rng) {
    if (spec.max_shapes < 1 || spec.max_shapes > 2) throw std::invalid_argument("synthetic: max_shapes must be 1 or 2");
    SyntheticSample s;
    s.task = static_cast<Task>(pick_weighted(spec.task_mix, rng));
    s.orientation = spec.force_orientation ? *spec.force_orientation
                                           : static_cast<Orientation>(pick_weighted(spec.orientation_mix, rng));
    const int anchor = pick(spec.size_anchors, rng);
    const int ratio = pick(ratio_choices(s.orientation, spec.ratio_count), rng);
    s.shape = make_shape(anchor, ratio, spec.ratio_count, spec.downsample);
    const int H = s.shape.grid.h * spec.downsample;
    const int W = s.shape.grid.w * spec.downsample;

    const bool forced = spec.force_color || spec.force_shape;
    const int count = forced ? 1 : uniform_int(rng, 1, spec.max_shapes);
    if (count == 1) {
        ShapeObject o;
        o.color = spec.force_color ? *spec.force_color : pick(spec.colors, rng);
        o.shape = spec.force_shape ? *spec.force_shape : pick(spec.shapes, rng);
        const int side = std::max(3, static_cast<int>(std::lround(std::min(H, W) * std::uniform_real_distribution<double>(0.45, 0.7)(rng))));
        const int y0 = uniform_int(rng, (H - side) / 4, H - side - (H - side) / 4);
        const int x0 = uniform_int(rng, (W - side) / 4, W - side - (W - side) / 4);
        o.box = {y0, x0, y0 + side, x0 + side};
        s.objects.push_back(o);
        s.caption = "a " + object_phrase(o);
    } else {
        ShapeObject a, b;
        a.color = pick(spec.colors, rng);
        a.shape = pick(spec.shapes, rng);
        do {
            b.color = pick(spec.colors, rng);
            b.shape = pick(spec.shapes, rng);
        } while (spec.colors.size() * spec.shapes.size() > 1 && b.color == a.color && b.shape == a.shape);
        // Horizontal relations on wide/square canvases, vertical ones on tall canvases.
        const int relation = s.orientation == Orientation::Vertical ? uniform_int(rng, 2, 3) : uniform_int(rng, 0, 1);
        const bool side_by_side = relation < 2;
        const int cell_h = side_by_side ? H : H / 2;
        const int cell_w = side_by_side ? W / 2 : W;
        const int side = std::max(3, static_cast<int>(std::lround(std::min(cell_h, cell_w) * 0.75)));
        auto place = [&](int cell) {
            const int oy = side_by_side ? 0 : cell * cell_h;
            const int ox = side_by_side ? cell * cell_w : 0;
            const int y0 = oy + (cell_h - side) / 2;
            const int x0 = ox + (cell_w - side) / 2;
            return BoundingBox{y0, x0, y0 + side, x0 + side};
        };
        // relation describes a relative to b: "a left of b" puts a in cell 0.
        const bool a_first = relation == 0 || relation == 2;
        a.box = place(a_first ? 0 : 1);
        b.box = place(a_first ? 1 : 0);
        s.objects = {a, b};
        s.caption = "a " + object_phrase(a) + " " + relation_words(relation) + " a " + object_phrase(b);
    }
    s.caption += ", " + std::string(to_string(s.orientation));
    s.image = render(H, W, s.objects);

    const auto& first = s.objects.front();
    if (s.objects.size() == 1) {
        s.lm_text = "there is a " + object_phrase(first) + " in the center.";
    } else {
        s.lm_text = "the " + object_phrase(s.objects[0]) + " is " + s.caption.substr(2 + object_phrase(s.objects[0]).size() + 1);
        const auto comma = s.lm_text->find(',');
        if (comma != std::string::npos) s.lm_text->resize(comma);
        *s.lm_text += ".";
    }
    if (std::uniform_int_distribution<int>(0, 1)(rng) == 0 || s.objects.size() > 1) {
        s.question = "what is in the image?";
        std::string phrase = s.caption;
        const auto comma = phrase.find(',');
        if (comma != std::string::npos) phrase.resize(comma);
        s.answer = phrase;
    } else {
        s.question = "what color is the " + shape_names()[static_cast<std::size_t>(first.shape)] + "?";
        s.answer = palette()[static_cast<std::size_t>(first.color)].name;
    }
    std::string objects_text = "a " + object_phrase(first);
    if (s.objects.size() > 1) objects_text += " and a " + object_phrase(s.objects[1]);
    s.reasoning = "plan: the user wants " + objects_text + ". we draw it on " + canvas_phrase(s.orientation) + ".";

    if (s.task == Task::INTL) {
        std::vector<int> others;
        for (int c : spec.colors)
            if (c != first.color) others.push_back(c);
        if (others.empty()) others.push_back((first.color + 1) % static_cast<int>(palette().size()));
        const int new_color = pick(others, rng);
        auto edited = s.objects;
        edited.front().color = new_color;
        EditPair e;
        e.instruction = "recolor the " + object_phrase(first) + " to " + palette()[static_cast<std::size_t>(new_color)].name;
        e.target = render(H, W, edited);
        e.target_shape = s.shape;
        s.edit = std::move(e);
    }
    return s;
}

SyntheticSample gen_indexed(const SyntheticSpec& spec, std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    std::mt19937_64 rng(seq);
    return gen_synthetic(spec, rng);
}

std::optional<int> dominant_color(const Image& image, double background_tolerance) {
    std::vector<long> hist(palette().size(), 0);
    long total = 0;
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            double dev = 0;
            for (int c = 0; c < 3; ++c)
                dev = std::max(dev, std::abs(static_cast<double>(image.at(y, x, c)) - kBackground[static_cast<std::size_t>(c)]));
            if (dev <= background_tolerance) continue;
            std::size_t best = 0;
            double best_d = 1e300;
            for (std::size_t k = 0; k < palette().size(); ++k) {
                double d = 0;
                for (int c = 0; c < 3; ++c) {
                    const double diff = image.at(y, x, c) - palette()[k].rgb[static_cast<std::size_t>(c)];
                    d += diff * diff;
                }
                if (d < best_d) {
                    best_d = d;
                    best = k;
                }
            }
            ++hist[best];
            ++total;
        }
    }
    if (total == 0) return std::nullopt;
    return static_cast<int>(std::max_element(hist.begin(), hist.end()) - hist.begin());
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json box_json(const BoundingBox& b) { return {b.y0, b.x0, b.y1, b.x1}; }

BoundingBox box_from(const nlohmann::json& j) {
    return BoundingBox{j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>(), j.at(3).get<int>()};
}

nlohmann::json shape_json(const ShapeSpec& s) {
    return {{"size_anchor", s.size_anchor}, {"ratio_index", s.ratio_index}, {"grid", {s.grid.h, s.grid.w}}};
}

ShapeSpec shape_from(const nlohmann::json& j) {
    ShapeSpec s;
    s.size_anchor = j.at("size_anchor").get<int>();
    s.ratio_index = j.at("ratio_index").get<int>();
    s.grid = Grid{j.at("grid").at(0).get<int>(), j.at("grid").at(1).get<int>()};
    return s;
}

Orientation orientation_from(const std::string& s) {
    for (auto o : {Orientation::Square, Orientation::Vertical, Orientation::Horizontal})
        if (to_string(o) == s) return o;
    throw std::invalid_argument("synthetic: unknown orientation " + s);
}

std::string image_name(std::size_t i, const char* suffix) {
    std::ostringstream os;
    os << "images/" << std::setw(6) << std::setfill('0') << i << suffix << ".ppm";
    return os.str();
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const std::vector<SyntheticSample>& samples) {
    std::filesystem::create_directories(dir / "images");
    std::ofstream meta(dir / "metadata.jsonl");
    if (!meta) throw std::runtime_error("synthetic: cannot write metadata in " + dir.string());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        nlohmann::json j;
        j["id"] = i;
        j["task"] = std::string(to_string(s.task));
        j["image"] = image_name(i, "");
        j["shape"] = shape_json(s.shape);
        j["orientation"] = std::string(to_string(s.orientation));
        j["caption"] = s.caption;
        nlohmann::json objs = nlohmann::json::array();
        for (const auto& o : s.objects)
            objs.push_back({{"color", palette()[static_cast<std::size_t>(o.color)].name},
                            {"shape", shape_names()[static_cast<std::size_t>(o.shape)]},
                            {"box", box_json(o.box)}});
        j["objects"] = objs;
        if (s.question) j["question"] = *s.question;
        if (s.answer) j["answer"] = *s.answer;
        if (s.lm_text) j["text"] = *s.lm_text;
        if (s.reasoning) j["reasoning"] = *s.reasoning;
        write_ppm(dir / image_name(i, ""), s.image);
        if (s.edit) {
            j["edit"] = {{"instruction", s.edit->instruction},
                         {"image", image_name(i, "_edit")},
                         {"shape", shape_json(s.edit->target_shape)}};
            write_ppm(dir / image_name(i, "_edit"), s.edit->target);
        }
        meta << j.dump() << '\n';
    }
}

std::vector<SyntheticSample> read_dataset(const std::filesystem::path& dir) {
    std::ifstream meta(dir / "metadata.jsonl");
    if (!meta) throw std::runtime_error("synthetic: no metadata.jsonl in " + dir.string());
    auto index_of = [](const auto& names, const std::string& name, const auto& key) {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (key(names[i]) == name) return static_cast<int>(i);
        throw std::invalid_argument("synthetic: unknown attribute " + name);
    };
    std::vector<SyntheticSample> out;
    std::string line;
    while (std::getline(meta, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        SyntheticSample s;
        s.task = task_from_string(j.at("task").get<std::string>());
        s.image = read_ppm(dir / j.at("image").get<std::string>());
        s.shape = shape_from(j.at("shape"));
        s.orientation = orientation_from(j.at("orientation").get<std::string>());
        s.caption = j.at("caption").get<std::string>();
        for (const auto& o : j.at("objects")) {
            ShapeObject obj;
            obj.color = index_of(palette(), o.at("color").get<std::string>(), [](const Color& c) { return c.name; });
            obj.shape = index_of(shape_names(), o.at("shape").get<std::string>(), [](const std::string& n) { return n; });
            obj.box = box_from(o.at("box"));
            s.objects.push_back(obj);
        }
        if (j.contains("question")) s.question = j["question"].get<std::string>();
        if (j.contains("answer")) s.answer = j["answer"].get<std::string>();
        if (j.contains("text")) s.lm_text = j["text"].get<std::string>();
        if (j.contains("reasoning")) s.reasoning = j["reasoning"].get<std::string>();
        if (j.contains("edit")) {
            EditPair e;
            e.instruction = j["edit"].at("instruction").get<std::string>();
            e.target = read_ppm(dir / j["edit"].at("image").get<std::string>());
            e.target_shape = shape_from(j["edit"].at("shape"));
            s.edit = std::move(e);
        }
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace mmgen
