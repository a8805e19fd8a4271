#pragma once

// The unified command line: one config schema spanning every stage, run
// manifests for provenance, and the subcommand dispatcher behind the
// refgen binary. dispatch() is a plain function so tests drive the full
// CLI in-process.
//
// Exit codes: 0 success, 1 stage failure, 2 usage error.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "refgen/model.hpp"
#include "refgen/synthesis.hpp"
#include "refgen/training.hpp"

namespace refgen {

// The whole experiment in one file: task selection plus the per-stage
// sections. Every loader fills defaults and rejects unknown keys, so a
// saved effective config is always loadable and complete.
struct RunConfig {
    std::string task = "recon";  // recon | compose
    ModelConfig model;
    TrainConfig train;
    SynthesisConfig synthesis;

    bool operator==(const RunConfig&) const = default;
};

RunConfig run_config_from_json_string(const std::string& text);
std::string run_config_to_json_string(const RunConfig& cfg);
RunConfig load_run_config(const std::filesystem::path& path);

// Provenance stamp written as run_manifest.json into every artifact
// directory. input_hashes chain stages together: a stage's inputs are the
// previous stage's artifacts, hashed.
struct RunManifest {
    std::string command;     // reconstructed invocation
    std::string config_hash; // sha256 of the effective settings JSON
    uint64_t root_seed = 0;
    std::map<std::string, std::string> input_hashes;  // given path -> sha256
    std::vector<std::string> artifacts;               // relative to the manifest dir
    std::string created_at;  // UTC; SOURCE_DATE_EPOCH pins it for reproducible runs
    std::string revision;    // enclosing git commit, or "unknown"
};

void write_run_manifest(const std::filesystem::path& dir, const RunManifest& manifest);
RunManifest load_run_manifest(const std::filesystem::path& dir);

std::string iso_utc_timestamp();
std::string source_revision();

// Relative output paths land under $REFGEN_OUT_ROOT when it is set.
std::filesystem::path resolve_out_path(const std::string& out);

// Full CLI entry, args without the binary name.
int dispatch(const std::vector<std::string>& args);

}  // namespace refgen
