#pragma once

// The denoising model: a toy latent U-Net (base denoiser), a retrieval
// encoder sharing the base encoder layout, and a conjunction network of
// per-decoder-level cross-attention + zero-convolution pairs that inject
// reference features into the decoder.
//
// Every parameter lives in a flat name -> leaf registry; name prefixes
// (vae., text., time., base.enc., base.mid., base.dec., retr., conj.)
// decide which component it belongs to and what the freeze policies touch.

#include <map>
#include <string>
#include <vector>

#include "refgen/autograd.hpp"
#include "refgen/image.hpp"
#include "refgen/rng.hpp"
#include "refgen/tensor.hpp"

namespace refgen {

struct ModelConfig {
    int latent_channels = 4;
    int spatial = 32;  // latent side; input images are 8x this per side
    std::vector<int> block_widths = {32, 64, 128};
    int attention_heads = 4;
    int text_embed_dim = 64;
    int time_embed_dim = 64;
    double control_weight = 1.5;
    int schedule_steps = 1000;

    int levels() const { return (int)block_widths.size(); }
    int image_size() const { return spatial * 8; }

    bool operator==(const ModelConfig&) const = default;
};

// Throws std::invalid_argument naming the offending field.
void validate_config(const ModelConfig& cfg);

enum class FreezeMode { train_both, lock_decoder, lock_both };
FreezeMode freeze_mode_from_string(const std::string& s);
std::string to_string(FreezeMode mode);

enum class ParamGroup {
    vae,
    text_encoder,
    time_embedder,
    base_encoder,
    base_middle,
    base_decoder,
    retrieval,
    conjunction,
};
ParamGroup param_group(const std::string& name);

// The vae, text encoder, time embedder, base encoder and middle are frozen
// under every mode; the conjunction always trains.
bool trainable_under(FreezeMode mode, ParamGroup group);

using WeightMap = std::map<std::string, Tensor>;

// Named parameter leaves. Map order fixes every deterministic iteration
// (optimizer updates, checkpoint payload layout).
class ParamStore {
public:
    ag::Var add(const std::string& name, Tensor init, bool trainable);
    const ag::Var& at(const std::string& name) const;  // throws on unknown name
    bool has(const std::string& name) const { return params_.count(name) > 0; }
    const std::map<std::string, ag::Var>& all() const { return params_; }
    size_t size() const { return params_.size(); }

private:
    std::map<std::string, ag::Var> params_;
};

struct ModelBundle {
    ModelConfig config;
    FreezeMode freeze = FreezeMode::train_both;
    ParamStore params;

    const ag::Var& p(const std::string& name) const { return params.at(name); }
};

// Single source of truth for the registry: every parameter name with its
// shape, in checkpoint order.
std::vector<std::pair<std::string, std::vector<int64_t>>> expected_parameters(
    const ModelConfig& cfg);

// Deterministic stand-in for a pretrained base: seeded random weights for
// the vae, text projection, time embedder, and base denoiser. Regenerating
// with the same (config, seed) reproduces it bitwise.
WeightMap make_base_weights(const ModelConfig& cfg, uint64_t seed);

// Full bundle from base weights: the retrieval encoder starts as a bitwise
// copy of the base encoder, conjunction attention gets a fixed-seed init,
// and every zero convolution starts at exactly zero, which makes the full
// forward equal the base-only forward until training moves them.
ModelBundle init_from_base(const WeightMap& base_weights, const ModelConfig& cfg);

// Checkpoint-load path: validates that `weights` carries exactly the
// expected names and shapes, naming the offending block on mismatch.
ModelBundle bundle_from_weights(const ModelConfig& cfg, const WeightMap& weights,
                                FreezeMode freeze);

WeightMap weights_of(const ModelBundle& bundle);

// Deterministic hash-based text embedder behind a frozen projection; any
// string maps to a fixed [1, text_embed_dim] row.
ag::Var embed_text(const ModelBundle& bundle, const std::string& text);

// Sinusoidal features of the timestep through the frozen two-layer MLP.
ag::Var time_embedding(const ModelBundle& bundle, int t);

// Frozen conv stem, image [3, 8s, 8s] in [-1,1] -> latent [C, s, s].
ag::Var vae_encode(const ModelBundle& bundle, const Tensor& image_chw);
// Toy decoder back to [3, 8s, 8s]; forward only.
Tensor vae_decode(const ModelBundle& bundle, const Tensor& latent);

struct ReferenceFeatures {
    std::vector<ag::Var> levels;      // level i: [num_refs * tokens_i, width_i]
    std::vector<int> tokens_per_ref;  // tokens_i, one entry per level
    int num_refs = 0;
};

// Each reference passes the vae stem and the retrieval encoder conditioned
// on (its concept text embedding, the shared time embedding); per-level
// outputs are tokenized and concatenated across references.
ReferenceFeatures encode_references(const ModelBundle& bundle,
                                    const std::vector<Tensor>& ref_images,
                                    const std::vector<std::string>& concept_texts, int t);

// query = decoder hidden tokens at this level, key/value = reference tokens;
// the attention output passes the level's zero convolution, is scaled by
// control_weight, and is added residually.
ag::Var conjunction_inject(const ModelBundle& bundle, int level, const ag::Var& h,
                           const ReferenceFeatures& refs, double control_weight);

// Noise prediction. refs == nullptr runs the plain base path (no
// conjunction); with zero-init conjunction weights both paths agree.
ag::Var denoise_step(const ModelBundle& bundle, const ag::Var& noisy_latent, int t,
                     const ag::Var& prompt_embedding, const ReferenceFeatures* refs,
                     double control_weight);

// Convenience wrapper over the base path for plain tensors.
Tensor denoise_base(const ModelBundle& bundle, const Tensor& noisy_latent, int t,
                    const std::string& prompt);

}  // namespace refgen
