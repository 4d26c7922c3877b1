#pragma once

// Checkpoint directory:
//   manifest.json  config, config hash, progress, RNG state, tensor table
//   tensors.bin    raw little-endian payloads (f32 or f64, the model's dtype)
// Tensors are parameters in registration order followed by the optimizer
// moments ("adam.m:<name>", "adam.v:<name>") in name order.

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "mmgen/config.hpp"
#include "mmgen/model.hpp"
#include "mmgen/optimizer.hpp"

namespace mmgen {

struct TrainProgress {
    long long global_step = 0;  // optimizer steps taken so far
    int stage_index = 0;        // stage the next step belongs to
    int stage_step = 0;         // steps already taken in that stage
    std::string rng_state;      // textual std::mt19937_64 state
};

struct CheckpointInfo {
    RunConfig config;
    std::string config_hash;
    TrainProgress progress;
    std::string dtype;  // "f32" | "f64"
    nlohmann::json manifest;
};

template <class T>
void save_checkpoint(const std::filesystem::path& dir, const RunConfig& config, const Model<T>& model,
                     const AdamW<T>* optimizer, const TrainProgress& progress);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir);

// Loads parameters (and optimizer moments when `optimizer` is given) after
// checking dtype, names and shapes.
template <class T>
void load_checkpoint(const std::filesystem::path& dir, Model<T>& model, AdamW<T>* optimizer = nullptr);

}  // namespace mmgen
