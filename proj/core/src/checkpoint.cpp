#include "mmgen/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace mmgen {

using nlohmann::json;

namespace {

[[noreturn]] void ckpt_error(const std::string& what) { throw std::runtime_error("checkpoint: " + what); }

template <class T>
constexpr const char* dtype_name() {
    return sizeof(T) == 4 ? "f32" : "f64";
}

template <class T>
void append_le(std::string& out, const Matrix<T>& m) {
    const std::size_t bytes = static_cast<std::size_t>(m.size()) * sizeof(T);
    const std::size_t base = out.size();
    out.resize(base + bytes);
    std::memcpy(out.data() + base, m.data(), bytes);
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = base; i < base + bytes; i += sizeof(T))
            std::reverse(out.begin() + static_cast<std::ptrdiff_t>(i), out.begin() + static_cast<std::ptrdiff_t>(i + sizeof(T)));
    }
}

template <class T>
void read_le(const std::string& blob, std::size_t offset, Matrix<T>& m) {
    const std::size_t bytes = static_cast<std::size_t>(m.size()) * sizeof(T);
    if (offset + bytes > blob.size()) ckpt_error("tensors.bin is truncated");
    std::string tmp = blob.substr(offset, bytes);
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i < bytes; i += sizeof(T))
            std::reverse(tmp.begin() + static_cast<std::ptrdiff_t>(i), tmp.begin() + static_cast<std::ptrdiff_t>(i + sizeof(T)));
    }
    std::memcpy(m.data(), tmp.data(), bytes);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) ckpt_error("cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, const std::string& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) ckpt_error("cannot write " + path.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) ckpt_error("write failed for " + path.string());
}

}  // namespace

template <class T>
void save_checkpoint(const std::filesystem::path& dir, const RunConfig& config, const Model<T>& model,
                     const AdamW<T>* optimizer, const TrainProgress& progress) {
    std::filesystem::create_directories(dir);
    std::string blob;
    json tensors = json::array();
    auto add = [&](const std::string& name, const Matrix<T>& m, json extra) {
        extra["name"] = name;
        extra["shape"] = {m.rows(), m.cols()};
        extra["offset"] = blob.size();
        tensors.push_back(std::move(extra));
        append_le(blob, m);
    };
    const auto& store = model.params();
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto& p = store[i];
        add(p.name, p.value,
            {{"group", p.group == ag::ParamGroup::VitProjector ? "vit_projector" : "transformer"}});
    }
    json moments = json::object();
    if (optimizer) {
        for (const auto& [name, s] : optimizer->state()) {
            add("adam.m:" + name, s.m, json::object());
            add("adam.v:" + name, s.v, json::object());
            moments[name] = s.steps;
        }
    }
    json manifest;
    manifest["format"] = "mmgen-checkpoint-1";
    manifest["dtype"] = dtype_name<T>();
    manifest["config"] = to_json(config);
    manifest["config_hash"] = config_hash(config);
    manifest["progress"] = {{"global_step", progress.global_step},
                            {"stage_index", progress.stage_index},
                            {"stage_step", progress.stage_step},
                            {"rng_state", progress.rng_state}};
    manifest["optimizer_steps"] = moments;
    manifest["has_optimizer"] = optimizer != nullptr;
    manifest["tensors"] = std::move(tensors);
    manifest["payload_bytes"] = blob.size();
    write_file(dir / "tensors.bin", blob);
    write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir) {
    const json manifest = json::parse(read_file(dir / "manifest.json"), nullptr, false);
    if (manifest.is_discarded() || !manifest.contains("format") || manifest["format"] != "mmgen-checkpoint-1")
        ckpt_error(dir.string() + " has no valid manifest");
    CheckpointInfo info;
    info.config = run_config_from_json(manifest["config"]);
    info.config_hash = manifest["config_hash"].get<std::string>();
    if (config_hash(info.config) != info.config_hash) ckpt_error("manifest config does not match its hash");
    const auto& p = manifest["progress"];
    info.progress.global_step = p["global_step"].get<long long>();
    info.progress.stage_index = p["stage_index"].get<int>();
    info.progress.stage_step = p["stage_step"].get<int>();
    info.progress.rng_state = p["rng_state"].get<std::string>();
    info.dtype = manifest["dtype"].get<std::string>();
    info.manifest = manifest;
    return info;
}

template <class T>
void load_checkpoint(const std::filesystem::path& dir, Model<T>& model, AdamW<T>* optimizer) {
    const auto info = read_checkpoint_info(dir);
    if (info.dtype != dtype_name<T>())
        ckpt_error("dtype " + info.dtype + " does not match the model precision " + dtype_name<T>());
    const std::string blob = read_file(dir / "tensors.bin");
    if (blob.size() != info.manifest["payload_bytes"].get<std::size_t>()) ckpt_error("tensors.bin size mismatch");

    std::map<std::string, const json*> table;
    for (const auto& t : info.manifest["tensors"]) table[t["name"].get<std::string>()] = &t;
    auto fetch = [&](const std::string& name, Matrix<T>& m, Eigen::Index rows, Eigen::Index cols) {
        auto it = table.find(name);
        if (it == table.end()) ckpt_error("missing tensor " + name);
        const auto& t = *it->second;
        if (t["shape"][0].get<Eigen::Index>() != rows || t["shape"][1].get<Eigen::Index>() != cols)
            ckpt_error("shape mismatch for " + name);
        m.resize(rows, cols);
        read_le(blob, t["offset"].get<std::size_t>(), m);
    };
    auto& store = model.params();
    std::size_t expected = store.size();
    for (std::size_t i = 0; i < store.size(); ++i) {
        auto& p = store[i];
        fetch(p.name, p.value, p.value.rows(), p.value.cols());
    }
    if (optimizer) {
        optimizer->state().clear();
        for (const auto& [name, steps] : info.manifest["optimizer_steps"].items()) {
            const auto& p = store.at(name);
            auto& s = optimizer->state()[name];
            fetch("adam.m:" + name, s.m, p.value.rows(), p.value.cols());
            fetch("adam.v:" + name, s.v, p.value.rows(), p.value.cols());
            s.steps = steps.template get<long long>();
            expected += 2;
        }
    } else {
        expected += 2 * info.manifest["optimizer_steps"].size();
    }
    if (table.size() != expected) ckpt_error("tensor table has entries the model does not define");
}

template void save_checkpoint(const std::filesystem::path&, const RunConfig&, const Model<float>&, const AdamW<float>*,
                              const TrainProgress&);
template void save_checkpoint(const std::filesystem::path&, const RunConfig&, const Model<double>&, const AdamW<double>*,
                              const TrainProgress&);
template void load_checkpoint(const std::filesystem::path&, Model<float>&, AdamW<float>*);
template void load_checkpoint(const std::filesystem::path&, Model<double>&, AdamW<double>*);

}  // namespace mmgen
