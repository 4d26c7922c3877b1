#include "mmgen/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mmgen {

using nlohmann::json;

namespace {

constexpr std::array<Task, 5> kTaskOrder{Task::T2I, Task::LM, Task::MMU, Task::INTL, Task::COT_T2TI};

[[noreturn]] void config_error(const std::string& what) { throw std::invalid_argument("config: " + what); }

int index_of(const std::vector<std::string>& names, const std::string& name, const char* what) {
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return static_cast<int>(i);
    config_error(std::string("unknown ") + what + " '" + name + "'");
}

std::vector<std::string> color_names() {
    std::vector<std::string> out;
    for (const auto& c : palette()) out.push_back(c.name);
    return out;
}

json task_mix_json(const std::array<double, 5>& mix) {
    json j = json::object();
    for (std::size_t i = 0; i < kTaskOrder.size(); ++i) j[std::string(to_string(kTaskOrder[i]))] = mix[i];
    return j;
}

std::array<double, 5> task_mix_from(const json& j) {
    std::array<double, 5> mix{0, 0, 0, 0, 0};
    for (const auto& [key, value] : j.items()) {
        const Task t = task_from_string(key);
        const auto pos = std::find(kTaskOrder.begin(), kTaskOrder.end(), t) - kTaskOrder.begin();
        mix[static_cast<std::size_t>(pos)] = value.get<double>();
    }
    return mix;
}

}  // namespace

std::string_view to_string(StageId id) {
    switch (id) {
        case StageId::I: return "I";
        case StageId::II: return "II";
        case StageId::III: return "III";
        case StageId::IV: return "IV";
        case StageId::IT: return "IT";
    }
    return "?";
}

StageId stage_id_from_string(std::string_view name) {
    for (auto id : {StageId::I, StageId::II, StageId::III, StageId::IV, StageId::IT})
        if (to_string(id) == name) return id;
    config_error("unknown stage id '" + std::string(name) + "'");
}

std::vector<Task> allowed_tasks(StageId id) {
    switch (id) {
        case StageId::I: return {Task::T2I, Task::LM, Task::MMU};
        case StageId::II: return {Task::MMU};
        case StageId::III: return {Task::T2I, Task::LM, Task::MMU, Task::INTL};
        case StageId::IV: return {Task::T2I, Task::LM, Task::MMU, Task::INTL, Task::COT_T2TI};
        case StageId::IT: return {Task::T2I, Task::LM, Task::COT_T2TI};
    }
    return {};
}

void RunConfig::validate() const {
    model.validate();
    if (codec.downsample < 1 || codec.channels < 1) config_error("codec downsample and channels must be >= 1");
    if (vocab.ratio_count < 3 || vocab.ratio_count % 2 == 0) config_error("ratio_count must be odd and >= 3");
    if (vocab.size_anchors.empty()) config_error("at least one size anchor is required");
    for (int a : vocab.size_anchors)
        if (a < codec.downsample || a % codec.downsample != 0)
            config_error("size anchor " + std::to_string(a) + " is not a multiple of downsample");
    if (data.colors.empty() || data.shapes.empty()) config_error("data needs at least one color and shape");
    if (train.batch_size < 1) config_error("batch_size must be >= 1");
    if (train.caption_dropout < 0 || train.caption_dropout > 1) config_error("caption_dropout must be in [0, 1]");
    if (train.optimizer.lr <= 0 || train.optimizer.warmup < 0) config_error("invalid learning rate schedule");
    if (sample.steps < 1) config_error("sample.steps must be >= 1");

    int prev_anchor = 0;
    int prev_order = -1;
    for (std::size_t i = 0; i < stages.size(); ++i) {
        const auto& s = stages[i];
        const std::string name = "stage " + std::to_string(i) + " (" + std::string(to_string(s.id)) + ")";
        const int order = static_cast<int>(s.id);
        if (order < prev_order) config_error(name + " is out of order; stages run I, II, III, IV, IT");
        prev_order = order;
        if (s.steps < 0) config_error(name + " has negative steps");
        if (s.batch_size && *s.batch_size < 1) config_error(name + " batch_size must be >= 1");
        if (s.lr && *s.lr <= 0) config_error(name + " lr must be > 0");
        if (std::find(vocab.size_anchors.begin(), vocab.size_anchors.end(), s.anchor) == vocab.size_anchors.end())
            config_error(name + " anchor " + std::to_string(s.anchor) + " has no size token");
        if (s.vit_anchor != vision.anchor)
            config_error(name + " vit_anchor must equal the vision encoder anchor " + std::to_string(vision.anchor));
        if (s.id != StageId::II) {
            if (s.anchor < prev_anchor) config_error(name + " anchor decreases along the VAE path");
            prev_anchor = s.anchor;
        }
        const auto allowed = allowed_tasks(s.id);
        double total = 0;
        for (std::size_t t = 0; t < kTaskOrder.size(); ++t) {
            if (s.task_mix[t] < 0) config_error(name + " has a negative task weight");
            if (s.task_mix[t] > 0 && std::find(allowed.begin(), allowed.end(), kTaskOrder[t]) == allowed.end())
                config_error(name + " does not admit task " + std::string(to_string(kTaskOrder[t])));
            total += s.task_mix[t];
        }
        if (total <= 0) config_error(name + " has an empty task mix");
        if (s.instruction_template && s.id != StageId::IT) config_error(name + ": instruction templates belong to stage IT");
    }
}

json to_json(const RunConfig& c) {
    const auto& m = c.model;
    json j;
    j["seed"] = c.seed;
    j["precision"] = c.precision == Precision::F64 ? "f64" : "f32";
    j["model"] = {{"layers", m.layers},
                  {"d_model", m.d_model},
                  {"heads", m.heads},
                  {"head_dim", m.head_dim},
                  {"time_freq_dim", m.time_freq_dim},
                  {"rope_base", m.rope_base},
                  {"tie_embeddings", m.tie_embeddings},
                  {"fm_weight", m.fm_weight},
                  {"ce_weight", m.ce_weight},
                  {"init_seed", m.init_seed},
                  {"moe",
                   {{"num_experts", m.moe.num_experts},
                    {"top_k", m.moe.top_k},
                    {"shared_experts", m.moe.shared_experts},
                    {"expert_hidden", m.moe.expert_hidden},
                    {"aux_loss_weight", m.moe.aux_loss_weight},
                    {"aux_loss_enabled", m.moe.aux_loss_enabled}}}};
    j["vocab"] = {{"size_anchors", c.vocab.size_anchors}, {"ratio_count", c.vocab.ratio_count}};
    j["codec"] = {{"downsample", c.codec.downsample}, {"channels", c.codec.channels}, {"seed", c.codec.seed}};
    j["vision"] = {{"anchor", c.vision.anchor}, {"patch", c.vision.patch}, {"dim", c.vision.dim}, {"seed", c.vision.seed}};
    j["layout"] = {{"loss_on_image_markers", c.loss_on_image_markers}};
    json colors = json::array(), shapes = json::array();
    for (int i : c.data.colors) colors.push_back(palette().at(static_cast<std::size_t>(i)).name);
    for (int i : c.data.shapes) shapes.push_back(shape_names().at(static_cast<std::size_t>(i)));
    j["data"] = {{"colors", colors},
                 {"shapes", shapes},
                 {"max_shapes", c.data.max_shapes},
                 {"orientation_mix", c.data.orientation_mix},
                 {"dataset", c.dataset}};
    const auto& o = c.train.optimizer;
    j["train"] = {{"batch_size", c.train.batch_size},
                  {"caption_dropout", c.train.caption_dropout},
                  {"checkpoint_every", c.train.checkpoint_every},
                  {"latent_stat_samples", c.train.latent_stat_samples},
                  {"optimizer",
                   {{"lr", o.lr},
                    {"warmup", o.warmup},
                    {"min_lr_ratio", o.min_lr_ratio},
                    {"beta1", o.beta1},
                    {"beta2", o.beta2},
                    {"eps", o.eps},
                    {"weight_decay", o.weight_decay},
                    {"grad_clip", o.grad_clip}}}};
    json stages = json::array();
    for (const auto& s : c.stages) {
        json sj = {{"id", std::string(to_string(s.id))},
                   {"anchor", s.anchor},
                   {"vit_anchor", s.vit_anchor},
                   {"steps", s.steps},
                   {"task_mix", task_mix_json(s.task_mix)},
                   {"instruction_template", s.instruction_template}};
        if (s.batch_size) sj["batch_size"] = *s.batch_size;
        if (s.lr) sj["lr"] = *s.lr;
        stages.push_back(std::move(sj));
    }
    j["stages"] = std::move(stages);
    j["sample"] = {{"steps", c.sample.steps},
                   {"guidance", c.sample.guidance},
                   {"max_reasoning_tokens", c.sample.max_reasoning_tokens}};
    return j;
}

RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    try {
        c.seed = j.value("seed", c.seed);
        const std::string precision = j.value("precision", std::string("f32"));
        if (precision == "f32") c.precision = Precision::F32;
        else if (precision == "f64") c.precision = Precision::F64;
        else config_error("precision must be f32 or f64");

        if (j.contains("model")) {
            const auto& m = j["model"];
            auto& mc = c.model;
            mc.layers = m.value("layers", mc.layers);
            mc.d_model = m.value("d_model", mc.d_model);
            mc.heads = m.value("heads", mc.heads);
            mc.head_dim = m.value("head_dim", mc.head_dim);
            mc.time_freq_dim = m.value("time_freq_dim", mc.time_freq_dim);
            mc.rope_base = m.value("rope_base", mc.rope_base);
            mc.tie_embeddings = m.value("tie_embeddings", mc.tie_embeddings);
            mc.fm_weight = m.value("fm_weight", mc.fm_weight);
            mc.ce_weight = m.value("ce_weight", mc.ce_weight);
            mc.init_seed = m.value("init_seed", mc.init_seed);
            if (m.contains("moe")) {
                const auto& e = m["moe"];
                mc.moe.num_experts = e.value("num_experts", mc.moe.num_experts);
                mc.moe.top_k = e.value("top_k", mc.moe.top_k);
                mc.moe.shared_experts = e.value("shared_experts", mc.moe.shared_experts);
                mc.moe.expert_hidden = e.value("expert_hidden", mc.moe.expert_hidden);
                mc.moe.aux_loss_weight = e.value("aux_loss_weight", mc.moe.aux_loss_weight);
                mc.moe.aux_loss_enabled = e.value("aux_loss_enabled", mc.moe.aux_loss_enabled);
            }
        }
        if (j.contains("vocab")) {
            c.vocab.size_anchors = j["vocab"].value("size_anchors", c.vocab.size_anchors);
            c.vocab.ratio_count = j["vocab"].value("ratio_count", c.vocab.ratio_count);
        }
        if (j.contains("codec")) {
            c.codec.downsample = j["codec"].value("downsample", c.codec.downsample);
            c.codec.channels = j["codec"].value("channels", c.codec.channels);
            c.codec.seed = j["codec"].value("seed", c.codec.seed);
        }
        if (j.contains("vision")) {
            c.vision.anchor = j["vision"].value("anchor", c.vision.anchor);
            c.vision.patch = j["vision"].value("patch", c.vision.patch);
            c.vision.dim = j["vision"].value("dim", c.vision.dim);
            c.vision.seed = j["vision"].value("seed", c.vision.seed);
        }
        if (j.contains("layout")) c.loss_on_image_markers = j["layout"].value("loss_on_image_markers", false);
        if (j.contains("data")) {
            const auto& d = j["data"];
            if (d.contains("colors")) {
                c.data.colors.clear();
                const auto names = color_names();
                for (const auto& n : d["colors"]) c.data.colors.push_back(index_of(names, n.get<std::string>(), "color"));
            }
            if (d.contains("shapes")) {
                c.data.shapes.clear();
                for (const auto& n : d["shapes"]) c.data.shapes.push_back(index_of(shape_names(), n.get<std::string>(), "shape"));
            }
            c.data.max_shapes = d.value("max_shapes", c.data.max_shapes);
            c.data.orientation_mix = d.value("orientation_mix", c.data.orientation_mix);
            c.dataset = d.value("dataset", c.dataset);
        }
        if (j.contains("train")) {
            const auto& t = j["train"];
            c.train.batch_size = t.value("batch_size", c.train.batch_size);
            c.train.caption_dropout = t.value("caption_dropout", c.train.caption_dropout);
            c.train.checkpoint_every = t.value("checkpoint_every", c.train.checkpoint_every);
            c.train.latent_stat_samples = t.value("latent_stat_samples", c.train.latent_stat_samples);
            if (t.contains("optimizer")) {
                const auto& o = t["optimizer"];
                auto& oc = c.train.optimizer;
                oc.lr = o.value("lr", oc.lr);
                oc.warmup = o.value("warmup", oc.warmup);
                oc.min_lr_ratio = o.value("min_lr_ratio", oc.min_lr_ratio);
                oc.beta1 = o.value("beta1", oc.beta1);
                oc.beta2 = o.value("beta2", oc.beta2);
                oc.eps = o.value("eps", oc.eps);
                oc.weight_decay = o.value("weight_decay", oc.weight_decay);
                oc.grad_clip = o.value("grad_clip", oc.grad_clip);
            }
        }
        if (j.contains("stages")) {
            for (const auto& sj : j["stages"]) {
                StageConfig s;
                s.id = stage_id_from_string(sj.at("id").get<std::string>());
                s.anchor = sj.value("anchor", s.anchor);
                s.vit_anchor = sj.value("vit_anchor", c.vision.anchor);
                s.steps = sj.value("steps", s.steps);
                if (sj.contains("task_mix")) s.task_mix = task_mix_from(sj["task_mix"]);
                if (sj.contains("batch_size")) s.batch_size = sj["batch_size"].get<int>();
                if (sj.contains("lr")) s.lr = sj["lr"].get<double>();
                s.instruction_template = sj.value("instruction_template", s.instruction_template);
                c.stages.push_back(s);
            }
        }
        if (j.contains("sample")) {
            c.sample.steps = j["sample"].value("steps", c.sample.steps);
            c.sample.guidance = j["sample"].value("guidance", c.sample.guidance);
            c.sample.max_reasoning_tokens = j["sample"].value("max_reasoning_tokens", c.sample.max_reasoning_tokens);
        }
    } catch (const json::exception& e) {
        config_error(e.what());
    }
    c.model.precision = c.precision;
    c.data.size_anchors = c.vocab.size_anchors;
    c.data.ratio_count = c.vocab.ratio_count;
    c.data.downsample = c.codec.downsample;
    return c;
}

void apply_overrides(json& j, const std::vector<std::string>& overrides) {
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos || eq == 0) config_error("override '" + o + "' must look like key.path=value");
        std::string pointer;
        std::stringstream keys(o.substr(0, eq));
        for (std::string part; std::getline(keys, part, '.');) pointer += "/" + part;
        const json::json_pointer ptr(pointer);
        if (!j.contains(ptr)) config_error("override key '" + o.substr(0, eq) + "' does not exist");
        const std::string text = o.substr(eq + 1);
        json value = json::parse(text, nullptr, false);
        if (value.is_discarded()) value = text;
        j[ptr] = std::move(value);
    }
}

RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) config_error("cannot open " + path.string());
    json raw = json::parse(in, nullptr, false);
    if (raw.is_discarded()) config_error(path.string() + " is not valid JSON");
    json full = to_json(run_config_from_json(raw));
    apply_overrides(full, overrides);
    RunConfig c = run_config_from_json(full);
    c.validate();
    return c;
}

std::string config_hash(const RunConfig& config) {
    const std::string text = to_json(config).dump();
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

Components::Components(const RunConfig& config)
    : tokenizer(Tokenizer::standard()),
      vocab(tokenizer, config.vocab),
      codec(config.codec),
      vision(config.vision),
      layout{Grid{config.vision.grid_side(), config.vision.grid_side()}, config.loss_on_image_markers, false} {}

ModelConfig model_config(const RunConfig& config, const Vocab& vocab) {
    ModelConfig m = config.model;
    m.vocab_size = vocab.size();
    m.timestep_token = vocab.timestep_slot();
    m.latent_channels = config.codec.channels;
    m.vit_dim = config.vision.dim;
    m.vit_grid = Grid{config.vision.grid_side(), config.vision.grid_side()};
    m.precision = config.precision;
    return m;
}

}  // namespace mmgen
