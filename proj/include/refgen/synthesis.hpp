#pragma once

// Training-sample construction for the two tasks:
//   reconstruction: 4 whole-figure references from the target's identity
//   cluster, light augmentation on references and target;
//   composition: 2 body crops + 2 face crops sampled independently from
//   cluster members, faces expanded to the full square, bodies cut at the
//   face box lower border (with an infill variant when that border sits in
//   the top third of the image).
//
// Every stochastic choice flows through the provided Rng, so a sample is a
// pure function of (dataset, config, target, seed). Each emitted part
// records its placement and fill color so geometry can be audited from the
// index alone.

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "refgen/dataset.hpp"
#include "refgen/image.hpp"
#include "refgen/rng.hpp"

namespace refgen {

struct SynthesisConfig {
    int final_size = 256;       // square side after padding
    double bg_removal_p = 0.5;  // per part, skipped when the record has no mask
    double crop_frac = 0.10;    // reconstruction augmentation bounds
    double flip_p = 0.5;
    double jitter = 0.10;

    bool operator==(const SynthesisConfig&) const = default;
};

struct PadSpec {
    Rgb fill;
    int dx = 0, dy = 0;
    int final_size = 0;
};

// Where the original content landed inside the padded square.
struct PadPlacement {
    Rgb fill;
    int dx = 0, dy = 0, w = 0, h = 0;
};

struct ConceptPart {
    std::string kind;  // figure | face | body
    Image image;
    std::string source_id;
    bool bg_removed = false;
    bool infill = false;  // body delivered as whole figure with the face box filled
    PadPlacement placement;
};

struct TrainingSample {
    std::string target_id;
    std::string task;  // recon | compose
    Image target;
    Mask m_tgt;   // 1 on original-content pixels
    Mask m_face;  // 1 on the displaced face box, all-zero when the target has none
    std::vector<ConceptPart> refs;
    std::vector<std::string> prompt_tags;
    std::string character;
    std::string artist;
    int clothing_label = 0;
    bool with_replacement = false;  // reference pool was smaller than needed
    PadPlacement placement;
};

// Raised when a target cannot produce a sample (empty reference pool,
// face box touching the bottom edge); callers record the reason and move on.
struct SampleSkip : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Original pixels land verbatim at (dx, dy); everything else is fill.
// The mask marks the content rectangle. Throws when the image does not fit
// or the displacement pushes it out of the square.
std::pair<Image, Mask> pad_to_square(const Image& img, const PadSpec& spec);

// Resolves record ids and loads images/masks relative to a root directory,
// with a small cache since synthesis revisits cluster members constantly.
class DatasetStore {
public:
    DatasetStore(std::filesystem::path root, std::vector<ImageRecord> records);

    const std::vector<ImageRecord>& records() const { return records_; }
    const std::vector<IdentityCluster>& clusters() const { return clusters_; }
    const ImageRecord& record(const std::string& id) const;
    const IdentityCluster& cluster_of(const ImageRecord& r) const;
    Image image(const ImageRecord& r) const;
    std::optional<Mask> mask(const ImageRecord& r) const;

private:
    std::filesystem::path root_;
    std::vector<ImageRecord> records_;
    std::vector<IdentityCluster> clusters_;
    std::unordered_map<std::string, size_t> by_id_;
    std::unordered_map<std::string, size_t> cluster_by_key_;
    mutable std::unordered_map<std::string, Image> image_cache_;
    mutable std::unordered_map<std::string, Mask> mask_cache_;
};

class SampleSynthesizer {
public:
    SampleSynthesizer(const DatasetStore& store, SynthesisConfig cfg)
        : store_(store), cfg_(cfg) {}

    TrainingSample reconstruction(const IdentityCluster& cluster,
                                  const std::string& target_id, Rng& rng) const;
    TrainingSample composition(const IdentityCluster& cluster,
                               const std::string& target_id, Rng& rng) const;

private:
    const DatasetStore& store_;
    SynthesisConfig cfg_;
};

// Batch driver: cycles deterministically through eligible targets until
// `count` samples are written (0 = one pass over all eligible records).
// Emits sample_NNNNNN/ directories, an index.jsonl, and skipped.jsonl.
struct SynthesisRun {
    size_t written = 0;
    size_t skipped = 0;
};
SynthesisRun synthesize_set(const DatasetStore& store, const SynthesisConfig& cfg,
                            const std::string& task, size_t count,
                            const std::filesystem::path& out_dir, uint64_t seed);

// Index round-trip for the training stage.
struct SavedSample {
    TrainingSample sample;
    std::string dir;
};
std::vector<SavedSample> load_sample_set(const std::filesystem::path& dir);

}  // namespace refgen
