#pragma once

// CLIP-style similarity scores, the VQA answer-diversity metric, and the
// grid protocol that scores a checkpoint character by character. Backends
// are interfaces: tests and offline runs use the seeded mocks, real scoring
// plugs in table-backed embeddings exported from an actual model.

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "refgen/image.hpp"
#include "refgen/model.hpp"
#include "refgen/rng.hpp"

namespace refgen {

class EmbeddingBackend {
public:
    virtual ~EmbeddingBackend() = default;
    virtual std::vector<double> image_embed(const Image& img) const = 0;
    virtual std::vector<double> text_embed(const std::string& text) const = 0;
    virtual int dim() const = 0;
};

class VqaBackend {
public:
    virtual ~VqaBackend() = default;
    virtual std::string describe(const Image& img, const std::string& question) const = 0;
};

// Content hash used to key mock embeddings and table lookups.
uint64_t image_fingerprint(const Image& img);

// Seeded hash-to-gaussian embeddings, L2-normalized. Image and text inputs
// live in separate substreams so they never collide.
class MockEmbeddingBackend : public EmbeddingBackend {
public:
    explicit MockEmbeddingBackend(int dim = 32, uint64_t seed = 0);
    std::vector<double> image_embed(const Image& img) const override;
    std::vector<double> text_embed(const std::string& text) const override;
    int dim() const override { return dim_; }

private:
    std::vector<double> from_stream(Rng rng) const;
    int dim_;
    uint64_t seed_;
};

// Deterministic caption generator: picks phrase fragments by content hash
// and folds in the image's mean intensity, so distinct images yield
// distinct answers and identical images always agree.
class MockVqaBackend : public VqaBackend {
public:
    explicit MockVqaBackend(uint64_t seed = 0) : seed_(seed) {}
    std::string describe(const Image& img, const std::string& question) const override;

private:
    uint64_t seed_;
};

// Embeddings precomputed by a real model and exported to JSON:
//   {"dim": N, "images": {"<fingerprint hex>": [...]}, "texts": {"<text>": [...]}}
// Lookups miss with a clear error instead of silently degrading.
class TableEmbeddingBackend : public EmbeddingBackend {
public:
    explicit TableEmbeddingBackend(const std::filesystem::path& table);
    std::vector<double> image_embed(const Image& img) const override;
    std::vector<double> text_embed(const std::string& text) const override;
    int dim() const override { return dim_; }

private:
    int dim_ = 0;
    std::map<std::string, std::vector<double>> images_, texts_;
};

// Same idea for VQA answers: {"answers": {"<fingerprint hex>|<question>": "..."}}
class TableVqaBackend : public VqaBackend {
public:
    explicit TableVqaBackend(const std::filesystem::path& table);
    std::string describe(const Image& img, const std::string& question) const override;

private:
    std::map<std::string, std::string> answers_;
};

struct ConditioningId {
    std::string character;
    int prompt_id = 0;
    uint64_t seed = 0;
};

struct GenerationBatch {
    std::vector<Image> images;  // all generated under one conditioning
    ConditioningId conditioning;
    std::optional<std::vector<std::string>> answers;  // filled when VQA already ran
};

// Mean cosine similarity between the generated image and each reference.
double clip_i(const Image& gen, const std::vector<Image>& refs,
              const EmbeddingBackend& backend);

// Cosine similarity between the image and its prompt.
double clip_t(const Image& gen, const std::string& prompt, const EmbeddingBackend& backend);

// Mean cosine distance (1 - similarity) over all unordered answer pairs,
// range [0,2]. Uses batch.answers when present, otherwise asks the VQA
// backend; any describe failure aborts the batch listing every bad image.
double vqa_diversity(const GenerationBatch& batch, const VqaBackend& vqa,
                     const EmbeddingBackend& embed, const std::string& question);

struct EvalGrid {
    std::vector<std::string> characters;
    std::vector<std::string> prompts;
    int runs_per_prompt = 5;
    int samples_per_run = 4;

    long long total_images() const {
        return (long long)characters.size() * (long long)prompts.size() * runs_per_prompt *
               samples_per_run;
    }
};

void validate_grid(const EvalGrid& grid);
EvalGrid grid_from_json_string(const std::string& text);
EvalGrid load_grid(const std::filesystem::path& path);

struct EvalOptions {
    std::string question = "Describe the image in detail.";
    int sample_steps = 8;
    std::string sampler = "ddim";
    uint64_t seed = 0;
    bool dry_run = false;            // count scheduled work, generate nothing
    bool reweight_diversity = false; // extra diversity * clip_i column; a high
                                     // value can still mean messy outputs
    bool diversity_across_runs = false;  // pool a character's runs per prompt
};

// One (character, prompt, run) of the grid. A non-empty error marks the
// cell as missing; its metrics are meaningless then.
struct EvalCell {
    std::string character;
    int prompt = 0;
    int run = 0;
    uint64_t seed = 0;
    double clip_i = 0, clip_t = 0, diversity = 0;
    std::string error;
    bool ok() const { return error.empty(); }
};

struct EvalReport {
    EvalGrid grid;
    std::string question;
    std::string diversity_scope;  // per_run | across_runs
    bool dry_run = false;
    long long scheduled_images = 0;
    bool complete = true;  // false when any cell is missing
    std::vector<EvalCell> cells;
    // per-prompt columns in grid order, then the global average
    std::vector<double> clip_i_by_prompt, clip_t_by_prompt, diversity_by_prompt;
    std::vector<double> reweighted_by_prompt;  // filled only when enabled
    double clip_i_avg = 0, clip_t_avg = 0, diversity_avg = 0, reweighted_avg = 0;
};

// Maps a character to its 4 reference images; throwing marks the cells.
using RefSource = std::function<std::vector<Image>(const std::string& character)>;

EvalReport run_eval_grid(const EvalGrid& grid, const ModelBundle& bundle,
                         const RefSource& refs, const EmbeddingBackend& embed,
                         const VqaBackend& vqa, const EvalOptions& opt);

std::string report_to_json_string(const EvalReport& report);
void write_report(const std::filesystem::path& path, const EvalReport& report);

// Console table: one column per prompt plus the average, scores as
// percentages, diversity printed beside the CLIP rows rather than ranked.
std::string render_report_table(const EvalReport& report);

}  // namespace refgen
