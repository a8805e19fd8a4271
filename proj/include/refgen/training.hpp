#pragma once

// The masked denoising objective, prompt dropping, freeze policies, the
// optimizer, and the training loop over synthesized samples.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "refgen/checkpoint.hpp"
#include "refgen/diffusion.hpp"
#include "refgen/model.hpp"
#include "refgen/synthesis.hpp"

namespace refgen {

struct TrainConfig {
    double p_drop = 0.5;       // probability of training on the empty prompt
    double lambda_face = 1.0;  // weight of the face-masked loss term
    double lr = 1e-4;
    int batch_size = 1;
    int steps = 200;
    uint64_t seed = 0;
    FreezeMode freeze = FreezeMode::train_both;
    int checkpoint_every = 0;  // 0: final checkpoint only

    bool operator==(const TrainConfig&) const = default;
};

// mse(eps * m_tgt, pred * m_tgt) + lambda * mse(eps * m_face, pred * m_face)
// where mse averages over all elements and each mask is either [1,h,w]
// (broadcast across channels) or the full prediction shape.
ag::Var masked_loss(const ag::Var& eps, const ag::Var& eps_pred, const Tensor& m_tgt,
                    const Tensor& m_face, double lambda_face);

// With probability p_drop the prompt collapses to the empty tag list.
std::vector<std::string> drop_prompt(const std::vector<std::string>& tags, double p_drop,
                                     Rng& rng);

// Flips every parameter's trainability to what the mode mandates.
void apply_freeze_policy(ModelBundle& bundle, FreezeMode mode);

class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    // One update over the bundle's trainable parameters from their
    // accumulated gradients (a missing gradient counts as zero).
    void step(ModelBundle& bundle);

private:
    double lr_, b1_, b2_, eps_;
    int64_t t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

void clear_grads(ModelBundle& bundle);

// One optimizer step on a single sample: samples t, noises the target
// latent, maybe drops the prompt, encodes references, predicts, applies the
// masked objective. Throws on non-finite loss with the step inputs named.
double train_step(ModelBundle& bundle, Adam& adam, const TrainingSample& sample,
                  const TrainConfig& cfg, Rng& rng);

struct TrainResult {
    std::vector<double> losses;  // one entry per step
    std::filesystem::path final_checkpoint;
};

// Full loop: per step draws batch_size samples (with replacement), averages
// their losses into one update. Writes ckpt_<step>.rdif every
// checkpoint_every steps and ckpt_final.rdif at the end.
TrainResult train_loop(ModelBundle& bundle, const std::vector<TrainingSample>& samples,
                       const TrainConfig& cfg, const std::filesystem::path& out_dir,
                       std::map<std::string, std::string> meta = {});

}  // namespace refgen
