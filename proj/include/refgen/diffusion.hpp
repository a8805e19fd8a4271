#pragma once

// Linear-beta noise schedule and the two sampling loops (deterministic and
// ancestral) used by generation.

#include <optional>
#include <string>
#include <vector>

#include "refgen/image.hpp"
#include "refgen/model.hpp"
#include "refgen/rng.hpp"

namespace refgen {

struct NoiseSchedule {
    std::vector<double> beta, alpha, alpha_bar;

    explicit NoiseSchedule(int steps, double beta_start = 1e-4, double beta_end = 0.02);
    int steps() const { return (int)beta.size(); }
};

// x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps
Tensor add_noise(const Tensor& z0, const Tensor& eps, const NoiseSchedule& sched, int t);

// Descending timesteps, evenly spread over the schedule, ending at 0.
std::vector<int> sampler_timesteps(int schedule_steps, int sample_steps);

struct SamplerConfig {
    std::string kind = "ddim";  // ddim (deterministic) | ancestral
    int num_samples = 4;
    std::optional<double> control_weight;  // defaults to the bundle's config
};

// Full sampling loop: encode the 4 references per timestep (their features
// are time-conditioned), denoise from pure noise, decode latents to images.
// Fixed seed -> fixed outputs.
std::vector<Image> generate(const ModelBundle& bundle, const std::vector<Image>& refs,
                            const std::vector<std::string>& concept_texts,
                            const std::string& prompt, uint64_t seed, int steps,
                            const SamplerConfig& sampler = {});

}  // namespace refgen
