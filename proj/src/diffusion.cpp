#include "refgen/diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace refgen {

NoiseSchedule::NoiseSchedule(int steps, double beta_start, double beta_end) {
    if (steps < 1)
        throw std::invalid_argument("noise schedule needs at least 1 step");
    beta.resize((size_t)steps);
    alpha.resize((size_t)steps);
    alpha_bar.resize((size_t)steps);
    double prod = 1.0;
    for (int t = 0; t < steps; t++) {
        double frac = steps == 1 ? 0.0 : (double)t / (steps - 1);
        beta[(size_t)t] = beta_start + (beta_end - beta_start) * frac;
        alpha[(size_t)t] = 1.0 - beta[(size_t)t];
        prod *= alpha[(size_t)t];
        alpha_bar[(size_t)t] = prod;
    }
}

Tensor add_noise(const Tensor& z0, const Tensor& eps, const NoiseSchedule& sched, int t) {
    if (!z0.same_shape(eps))
        throw std::invalid_argument("add_noise: latent " + z0.shape_str() + " vs noise " +
                                    eps.shape_str());
    if (t < 0 || t >= sched.steps())
        throw std::invalid_argument("add_noise: timestep " + std::to_string(t) +
                                    " outside schedule");
    double sa = std::sqrt(sched.alpha_bar[(size_t)t]);
    double sb = std::sqrt(1.0 - sched.alpha_bar[(size_t)t]);
    Tensor out(z0.shape());
    for (int64_t i = 0; i < z0.numel(); i++)
        out[i] = sa * z0[i] + sb * eps[i];
    return out;
}

std::vector<int> sampler_timesteps(int schedule_steps, int sample_steps) {
    if (sample_steps < 1)
        throw std::invalid_argument("sampler needs at least 1 step");
    sample_steps = std::min(sample_steps, schedule_steps);
    std::vector<int> ts;
    if (sample_steps == 1) {
        ts.push_back(schedule_steps - 1);
        return ts;
    }
    for (int i = 0; i < sample_steps; i++)
        ts.push_back((int)std::llround((double)(schedule_steps - 1) * (sample_steps - 1 - i) /
                                       (sample_steps - 1)));
    return ts;
}

std::vector<Image> generate(const ModelBundle& bundle, const std::vector<Image>& refs,
                            const std::vector<std::string>& concept_texts,
                            const std::string& prompt, uint64_t seed, int steps,
                            const SamplerConfig& sampler) {
    const ModelConfig& cfg = bundle.config;
    if (steps < 1)
        throw std::invalid_argument("generate: steps must be positive");
    if (refs.size() != 4)
        throw std::invalid_argument("generate: exactly 4 reference images required, got " +
                                    std::to_string(refs.size()));
    if (sampler.kind != "ddim" && sampler.kind != "ancestral")
        throw std::invalid_argument("generate: unknown sampler \"" + sampler.kind + "\"");
    if (sampler.num_samples < 1)
        throw std::invalid_argument("generate: num_samples must be positive");

    std::vector<Tensor> ref_tensors;
    for (const auto& img : refs)
        ref_tensors.push_back(image_to_tensor(img));

    double cw = sampler.control_weight.value_or(cfg.control_weight);
    double eta = sampler.kind == "ancestral" ? 1.0 : 0.0;
    NoiseSchedule sched(cfg.schedule_steps);
    std::vector<int> ts = sampler_timesteps(cfg.schedule_steps, steps);
    ag::Var prompt_emb = embed_text(bundle, prompt);

    std::vector<int64_t> zshape = {cfg.latent_channels, cfg.spatial, cfg.spatial};
    Rng root = Rng(seed).child("generate");
    std::vector<Rng> rngs;
    std::vector<Tensor> zs;
    for (int s = 0; s < sampler.num_samples; s++) {
        rngs.push_back(root.child((uint64_t)s));
        zs.push_back(Tensor::randn(zshape, rngs.back()));
    }

    for (size_t i = 0; i < ts.size(); i++) {
        int t = ts[i];
        // reference features are time-conditioned, but shared across samples
        ReferenceFeatures feats = encode_references(bundle, ref_tensors, concept_texts, t);
        double ab_t = sched.alpha_bar[(size_t)t];
        double ab_prev = i + 1 < ts.size() ? sched.alpha_bar[(size_t)ts[i + 1]] : 1.0;
        double sigma = eta * std::sqrt(std::max(0.0, (1.0 - ab_prev) / (1.0 - ab_t) *
                                                         (1.0 - ab_t / ab_prev)));
        double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
        double inv_sa = 1.0 / std::sqrt(ab_t), sb = std::sqrt(1.0 - ab_t);

        for (int s = 0; s < sampler.num_samples; s++) {
            Tensor eps =
                denoise_step(bundle, ag::constant(zs[(size_t)s]), t, prompt_emb, &feats, cw)->val;
            Tensor next(zshape);
            if (sigma > 0.0) {
                Tensor noise = Tensor::randn(zshape, rngs[(size_t)s]);
                for (int64_t e = 0; e < next.numel(); e++) {
                    double x0 = (zs[(size_t)s][e] - sb * eps[e]) * inv_sa;
                    next[e] = std::sqrt(ab_prev) * x0 + dir * eps[e] + sigma * noise[e];
                }
            } else {
                for (int64_t e = 0; e < next.numel(); e++) {
                    double x0 = (zs[(size_t)s][e] - sb * eps[e]) * inv_sa;
                    next[e] = std::sqrt(ab_prev) * x0 + dir * eps[e];
                }
            }
            zs[(size_t)s] = std::move(next);
        }
    }

    std::vector<Image> out;
    for (const auto& z : zs)
        out.push_back(tensor_to_image(vae_decode(bundle, z)));
    return out;
}

}  // namespace refgen
