#pragma once

// Binary checkpoint IO and the model-config JSON round trip.
//
// File layout: "RDIF" magic, u32 version, u64 header length, a JSON header
// {config, freeze, meta, tensors: [{name, shape}, ...]}, then each tensor's
// elements as little-endian doubles, in header order (name-sorted).

#include <filesystem>
#include <map>
#include <string>

#include "refgen/model.hpp"

namespace refgen {

struct Checkpoint {
    ModelConfig config;
    FreezeMode freeze = FreezeMode::train_both;
    WeightMap weights;
    std::map<std::string, std::string> meta;  // free-form: step, seeds, task
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

// Validates structure (magic, version, payload length); shape-vs-config
// validation happens in bundle_from_weights.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Convenience: load + validate + build.
ModelBundle load_bundle(const std::filesystem::path& path);

// Alphabetically-keyed JSON, byte-stable for a given config. Parsing
// rejects unknown keys and fills absent ones with defaults.
std::string config_to_json_string(const ModelConfig& cfg);
ModelConfig config_from_json_string(const std::string& text);

}  // namespace refgen
