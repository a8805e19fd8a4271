#include "refgen/training.hpp"

#include <cmath>
#include <cstdio>

namespace refgen {

namespace {

using ag::Var;

Tensor broadcast_mask(const Tensor& m, const Tensor& like, const char* which) {
    if (m.same_shape(like))
        return m;
    if (like.rank() == 3 && m.rank() == 3 && m.dim(0) == 1 && m.dim(1) == like.dim(1) &&
        m.dim(2) == like.dim(2)) {
        Tensor out(like.shape());
        int64_t hw = m.dim(1) * m.dim(2);
        for (int64_t c = 0; c < like.dim(0); c++)
            for (int64_t i = 0; i < hw; i++)
                out[c * hw + i] = m[i];
        return out;
    }
    throw std::invalid_argument(std::string(which) + " mask " + m.shape_str() +
                                " does not broadcast to prediction " + like.shape_str());
}

std::string join_tags(const std::vector<std::string>& tags) {
    std::string out;
    for (size_t i = 0; i < tags.size(); i++)
        out += (i ? ", " : "") + tags[i];
    return out;
}

void check_sample(const ModelConfig& mc, const TrainingSample& s) {
    int side = mc.image_size();
    if (s.target.w != side || s.target.h != side)
        throw std::invalid_argument("sample \"" + s.target_id + "\" target is " +
                                    std::to_string(s.target.w) + "x" +
                                    std::to_string(s.target.h) + ", model expects " +
                                    std::to_string(side) + " square");
    if (s.m_tgt.w != side || s.m_tgt.h != side || s.m_face.w != side || s.m_face.h != side)
        throw std::invalid_argument("sample \"" + s.target_id + "\" masks do not match target");
    if (s.refs.size() != 4)
        throw std::invalid_argument("sample \"" + s.target_id + "\" has " +
                                    std::to_string(s.refs.size()) + " references, expected 4");
}

// Builds the per-sample loss graph: noise the target latent at a sampled t,
// predict with reference conditioning, apply the masked objective.
Var sample_loss(ModelBundle& bundle, const TrainingSample& sample, const TrainConfig& cfg,
                Rng& rng, int* t_out) {
    const ModelConfig& mc = bundle.config;
    check_sample(mc, sample);
    NoiseSchedule sched(mc.schedule_steps);

    int t = (int)rng.uniform_int((uint64_t)mc.schedule_steps);
    if (t_out)
        *t_out = t;
    Tensor z0 = vae_encode(bundle, image_to_tensor(sample.target))->val;
    Tensor eps = Tensor::randn(z0.shape(), rng);
    Tensor zt = add_noise(z0, eps, sched, t);

    Var pemb = embed_text(bundle, join_tags(drop_prompt(sample.prompt_tags, cfg.p_drop, rng)));
    std::vector<Tensor> ref_imgs;
    std::vector<std::string> kinds;
    for (const auto& part : sample.refs) {
        ref_imgs.push_back(image_to_tensor(part.image));
        kinds.push_back(part.kind);
    }
    ReferenceFeatures feats = encode_references(bundle, ref_imgs, kinds, t);
    Var pred = denoise_step(bundle, ag::constant(zt), t, pemb, &feats, mc.control_weight);

    Tensor mt = pool_mask(sample.m_tgt, 8);
    Tensor mf = pool_mask(sample.m_face, 8);
    return masked_loss(ag::constant(eps), pred, mt, mf, cfg.lambda_face);
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ckpt_%06d.rdif", step);
    return dir / buf;
}

void emit_checkpoint(const ModelBundle& bundle, const TrainConfig& cfg, int step,
                     std::map<std::string, std::string> meta,
                     const std::filesystem::path& path) {
    meta["step"] = std::to_string(step);
    meta["seed"] = std::to_string(cfg.seed);
    save_checkpoint(path, Checkpoint{bundle.config, bundle.freeze, weights_of(bundle),
                                     std::move(meta)});
}

}  // namespace

ag::Var masked_loss(const ag::Var& eps, const ag::Var& eps_pred, const Tensor& m_tgt,
                    const Tensor& m_face, double lambda_face) {
    if (lambda_face < 0)
        throw std::invalid_argument("lambda_face must be non-negative");
    if (!eps->val.same_shape(eps_pred->val))
        throw std::invalid_argument("masked_loss: noise " + eps->val.shape_str() +
                                    " vs prediction " + eps_pred->val.shape_str());
    Var mt = ag::constant(broadcast_mask(m_tgt, eps->val, "target"));
    Var d = ag::sub(ag::mul(eps, mt), ag::mul(eps_pred, mt));
    Var loss = ag::mean_all(ag::mul(d, d));

    Var mf = ag::constant(broadcast_mask(m_face, eps->val, "face"));
    Var df = ag::sub(ag::mul(eps, mf), ag::mul(eps_pred, mf));
    return ag::add(loss, ag::scale(ag::mean_all(ag::mul(df, df)), lambda_face));
}

std::vector<std::string> drop_prompt(const std::vector<std::string>& tags, double p_drop,
                                     Rng& rng) {
    if (p_drop < 0.0 || p_drop > 1.0)
        throw std::invalid_argument("p_drop must lie in [0,1]");
    if (rng.coin(p_drop))
        return {};
    return tags;
}

void apply_freeze_policy(ModelBundle& bundle, FreezeMode mode) {
    bundle.freeze = mode;
    for (const auto& [name, var] : bundle.params.all())
        var->requires_grad = trainable_under(mode, param_group(name));
}

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    if (lr <= 0)
        throw std::invalid_argument("learning rate must be positive");
}

void Adam::step(ModelBundle& bundle) {
    t_++;
    double bc1 = 1.0 - std::pow(b1_, (double)t_);
    double bc2 = 1.0 - std::pow(b2_, (double)t_);
    for (const auto& [name, var] : bundle.params.all()) {
        if (!var->requires_grad)
            continue;
        Tensor g = var->has_grad() ? var->grad : Tensor::zeros(var->val.shape());
        Tensor& m = m_.try_emplace(name, Tensor::zeros(var->val.shape())).first->second;
        Tensor& v = v_.try_emplace(name, Tensor::zeros(var->val.shape())).first->second;
        for (int64_t i = 0; i < g.numel(); i++) {
            m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
            v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
            double mh = m[i] / bc1, vh = v[i] / bc2;
            var->val[i] -= lr_ * mh / (std::sqrt(vh) + eps_);
        }
    }
}

void clear_grads(ModelBundle& bundle) {
    for (const auto& [name, var] : bundle.params.all())
        var->grad = Tensor();
}

double train_step(ModelBundle& bundle, Adam& adam, const TrainingSample& sample,
                  const TrainConfig& cfg, Rng& rng) {
    int t = 0;
    ag::Var loss = sample_loss(bundle, sample, cfg, rng, &t);
    double val = loss->val[0];
    if (!std::isfinite(val))
        throw std::runtime_error("non-finite loss on sample \"" + sample.target_id +
                                 "\" at t=" + std::to_string(t));
    ag::backward(loss);
    adam.step(bundle);
    clear_grads(bundle);
    return val;
}

TrainResult train_loop(ModelBundle& bundle, const std::vector<TrainingSample>& samples,
                       const TrainConfig& cfg, const std::filesystem::path& out_dir,
                       std::map<std::string, std::string> meta) {
    if (samples.empty())
        throw std::invalid_argument("training needs at least one sample");
    if (cfg.steps < 1 || cfg.batch_size < 1)
        throw std::invalid_argument("steps and batch_size must be positive");

    std::filesystem::create_directories(out_dir);
    apply_freeze_policy(bundle, cfg.freeze);
    Adam adam(cfg.lr);
    Rng root = Rng(cfg.seed).child("train");

    TrainResult res;
    for (int step = 0; step < cfg.steps; step++) {
        Rng srng = root.child((uint64_t)step);
        std::vector<ag::Var> parts;
        int t_first = 0;
        for (int b = 0; b < cfg.batch_size; b++) {
            size_t idx = srng.uniform_int(samples.size());
            parts.push_back(sample_loss(bundle, samples[idx], cfg, srng,
                                        b == 0 ? &t_first : nullptr));
        }
        ag::Var loss = parts[0];
        for (size_t b = 1; b < parts.size(); b++)
            loss = ag::add(loss, parts[b]);
        if (parts.size() > 1)
            loss = ag::scale(loss, 1.0 / (double)parts.size());

        double val = loss->val[0];
        if (!std::isfinite(val))
            throw std::runtime_error("non-finite loss at step " + std::to_string(step + 1) +
                                     " (first t=" + std::to_string(t_first) + ")");
        ag::backward(loss);
        adam.step(bundle);
        clear_grads(bundle);
        res.losses.push_back(val);

        int done = step + 1;
        if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps)
            emit_checkpoint(bundle, cfg, done, meta, checkpoint_path(out_dir, done));
    }
    res.final_checkpoint = out_dir / "ckpt_final.rdif";
    emit_checkpoint(bundle, cfg, cfg.steps, std::move(meta), res.final_checkpoint);
    return res;
}

}  // namespace refgen
