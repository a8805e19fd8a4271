#include "refgen/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace refgen {

namespace {

using ag::Var;

constexpr int kGnGroups = 4;
constexpr int kStemW0 = 16, kStemW1 = 32;       // vae encoder interior widths
constexpr int kDecW0 = 32, kDecW1 = 16, kDecW2 = 8;  // vae decoder widths
constexpr uint64_t kTextSeed = 0x9d2c5680u;
constexpr uint64_t kConjSeed = 0x6a09e667u;
constexpr int kTextTokens = 4;

enum class InitKind { scaled_normal, zero, one };

struct ParamSpec {
    std::string name;
    std::vector<int64_t> shape;
    InitKind init;
};

void add_conv(std::vector<ParamSpec>& out, const std::string& p, int co, int ci, int k) {
    out.push_back({p + ".w", {co, ci, k, k}, InitKind::scaled_normal});
    out.push_back({p + ".b", {co}, InitKind::zero});
}

void add_linear(std::vector<ParamSpec>& out, const std::string& p, int rows, int cols) {
    out.push_back({p + ".w", {rows, cols}, InitKind::scaled_normal});
    out.push_back({p + ".b", {rows}, InitKind::zero});
}

void add_gn(std::vector<ParamSpec>& out, const std::string& p, int c) {
    out.push_back({p + ".g", {c}, InitKind::one});
    out.push_back({p + ".b", {c}, InitKind::zero});
}

// gn -> conv3x3 -> +time bias -> gn -> conv3x3, with a 1x1 skip conv when
// the channel count changes.
void add_res(std::vector<ParamSpec>& out, const std::string& p, int cin, int cout, int tdim) {
    add_gn(out, p + ".gn0", cin);
    add_conv(out, p + ".c0", cout, cin, 3);
    add_linear(out, p + ".temb", cout, tdim);
    add_gn(out, p + ".gn1", cout);
    add_conv(out, p + ".c1", cout, cout, 3);
    if (cin != cout)
        add_conv(out, p + ".skip", cout, cin, 1);
}

void add_attn(std::vector<ParamSpec>& out, const std::string& p, int c, int ctx_dim) {
    add_gn(out, p + ".gn", c);
    out.push_back({p + ".q.w", {c, c}, InitKind::scaled_normal});
    out.push_back({p + ".k.w", {c, ctx_dim}, InitKind::scaled_normal});
    out.push_back({p + ".v.w", {c, ctx_dim}, InitKind::scaled_normal});
    out.push_back({p + ".o.w", {c, c}, InitKind::scaled_normal});
    out.push_back({p + ".o.b", {c}, InitKind::zero});
}

// Encoder layout shared verbatim by base.enc and retr.
void add_encoder(std::vector<ParamSpec>& out, const std::string& pre, const ModelConfig& cfg) {
    add_conv(out, pre + ".conv_in", cfg.block_widths[0], cfg.latent_channels, 3);
    for (int i = 0; i < cfg.levels(); i++) {
        std::string lp = pre + ".l" + std::to_string(i);
        int w = cfg.block_widths[(size_t)i];
        add_res(out, lp + ".res", w, w, cfg.time_embed_dim);
        add_attn(out, lp + ".attn", w, cfg.text_embed_dim);
        if (i + 1 < cfg.levels())
            add_conv(out, pre + ".down" + std::to_string(i), cfg.block_widths[(size_t)i + 1], w,
                     3);
    }
}

std::vector<ParamSpec> param_specs(const ModelConfig& cfg) {
    std::vector<ParamSpec> out;
    int lat = cfg.latent_channels;

    add_conv(out, "vae.enc.c0", kStemW0, 3, 3);
    add_conv(out, "vae.enc.c1", kStemW1, kStemW0, 3);
    add_conv(out, "vae.enc.c2", lat, kStemW1, 3);
    add_conv(out, "vae.dec.c_in", kDecW0, lat, 3);
    add_conv(out, "vae.dec.u0", kDecW1, kDecW0, 3);
    add_conv(out, "vae.dec.u1", kDecW1, kDecW1, 3);
    add_conv(out, "vae.dec.u2", kDecW2, kDecW1, 3);
    add_conv(out, "vae.dec.c_out", 3, kDecW2, 3);

    add_linear(out, "text.proj", cfg.text_embed_dim, cfg.text_embed_dim);
    add_linear(out, "time.fc0", cfg.time_embed_dim, cfg.time_embed_dim);
    add_linear(out, "time.fc1", cfg.time_embed_dim, cfg.time_embed_dim);

    add_encoder(out, "base.enc", cfg);
    int wl = cfg.block_widths.back();
    add_res(out, "base.mid.res0", wl, wl, cfg.time_embed_dim);
    add_attn(out, "base.mid.attn", wl, wl);  // self-attention: context is itself
    add_res(out, "base.mid.res1", wl, wl, cfg.time_embed_dim);

    for (int i = 0; i < cfg.levels(); i++) {
        std::string lp = "base.dec.l" + std::to_string(i);
        int w = cfg.block_widths[(size_t)i];
        add_res(out, lp + ".res", 2 * w, w, cfg.time_embed_dim);
        add_attn(out, lp + ".attn", w, cfg.text_embed_dim);
        if (i > 0)
            add_conv(out, "base.dec.up" + std::to_string(i), cfg.block_widths[(size_t)i - 1], w,
                     3);
    }
    add_gn(out, "base.dec.out.gn", cfg.block_widths[0]);
    add_conv(out, "base.dec.out.c", lat, cfg.block_widths[0], 3);

    add_encoder(out, "retr", cfg);

    for (int i = 0; i < cfg.levels(); i++) {
        std::string lp = "conj.l" + std::to_string(i);
        int w = cfg.block_widths[(size_t)i];
        add_attn(out, lp, 2 * w, w);  // query from decoder hidden, kv from references
        out.push_back({lp + ".zero.w", {2 * w, 2 * w, 1, 1}, InitKind::zero});
        out.push_back({lp + ".zero.b", {2 * w}, InitKind::zero});
    }
    return out;
}

Tensor init_tensor(const ParamSpec& spec, Rng& root) {
    switch (spec.init) {
        case InitKind::zero:
            return Tensor::zeros(spec.shape);
        case InitKind::one:
            return Tensor::full(spec.shape, 1.0);
        case InitKind::scaled_normal: {
            int64_t fan_in = 1;
            for (size_t d = 1; d < spec.shape.size(); d++)
                fan_in *= spec.shape[d];
            Rng rng = root.child(spec.name);
            return Tensor::randn(spec.shape, rng, 1.0 / std::sqrt((double)fan_in));
        }
    }
    throw std::logic_error("unreachable init kind");
}

bool is_base_component(ParamGroup g) {
    return g == ParamGroup::vae || g == ParamGroup::text_encoder ||
           g == ParamGroup::time_embedder || g == ParamGroup::base_encoder ||
           g == ParamGroup::base_middle || g == ParamGroup::base_decoder;
}

std::string shape_text(const std::vector<int64_t>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); i++)
        s += (i ? "," : "") + std::to_string(shape[i]);
    return s + "]";
}

Var conv(const ModelBundle& b, const std::string& p, const Var& x, int stride, int pad) {
    return ag::conv2d(x, b.p(p + ".w"), b.p(p + ".b"), stride, pad);
}

Var res_block(const ModelBundle& b, const std::string& p, const Var& x, const Var& temb) {
    Var h = ag::silu(ag::group_norm(x, b.p(p + ".gn0.g"), b.p(p + ".gn0.b"), kGnGroups));
    h = conv(b, p + ".c0", h, 1, 1);
    Var tb = ag::linear(ag::silu(temb), b.p(p + ".temb.w"), b.p(p + ".temb.b"));
    h = ag::add_channel_bias(h, ag::reshape(tb, {tb->val.dim(1)}));
    h = ag::silu(ag::group_norm(h, b.p(p + ".gn1.g"), b.p(p + ".gn1.b"), kGnGroups));
    h = conv(b, p + ".c1", h, 1, 1);
    Var sk = b.params.has(p + ".skip.w") ? conv(b, p + ".skip", x, 1, 0) : x;
    return ag::add(h, sk);
}

Var mha(const ModelBundle& b, const std::string& p, const Var& x, const Var& ctx) {
    Var q = ag::matmul_nt(x, b.p(p + ".q.w"));
    Var k = ag::matmul_nt(ctx, b.p(p + ".k.w"));
    Var v = ag::matmul_nt(ctx, b.p(p + ".v.w"));
    int heads = b.config.attention_heads;
    int64_t hd = q->val.dim(1) / heads;
    std::vector<Var> outs;
    for (int h = 0; h < heads; h++) {
        Var qh = ag::slice(q, 1, h * hd, hd);
        Var kh = ag::slice(k, 1, h * hd, hd);
        Var vh = ag::slice(v, 1, h * hd, hd);
        Var att = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), 1.0 / std::sqrt((double)hd)));
        outs.push_back(ag::matmul(att, vh));
    }
    return ag::linear(ag::concat(outs, 1), b.p(p + ".o.w"), b.p(p + ".o.b"));
}

// Residual attention over normalized spatial tokens; ctx == nullptr means
// self-attention on the tokens themselves.
Var attn_block(const ModelBundle& b, const std::string& p, const Var& x, const Var* ctx) {
    Var n = ag::group_norm(x, b.p(p + ".gn.g"), b.p(p + ".gn.b"), kGnGroups);
    Var t = ag::to_tokens(n);
    Var a = mha(b, p, t, ctx ? *ctx : t);
    return ag::add(x, ag::from_tokens(a, x->val.dim(1), x->val.dim(2)));
}

// Shared by the base and retrieval encoders: returns the bottom feature and
// the per-level outputs taken before downsampling.
std::pair<Var, std::vector<Var>> encoder_forward(const ModelBundle& b, const std::string& pre,
                                                 const Var& z, const Var& temb, const Var& ctx) {
    Var h = conv(b, pre + ".conv_in", z, 1, 1);
    std::vector<Var> levels;
    for (int i = 0; i < b.config.levels(); i++) {
        std::string lp = pre + ".l" + std::to_string(i);
        h = res_block(b, lp + ".res", h, temb);
        h = attn_block(b, lp + ".attn", h, &ctx);
        levels.push_back(h);
        if (i + 1 < b.config.levels())
            h = conv(b, pre + ".down" + std::to_string(i), h, 2, 1);
    }
    return {h, levels};
}

void check_timestep(const ModelConfig& cfg, int t) {
    if (t < 0 || t >= cfg.schedule_steps)
        throw std::invalid_argument("timestep " + std::to_string(t) + " outside schedule [0, " +
                                    std::to_string(cfg.schedule_steps) + ")");
}

}  // namespace

void validate_config(const ModelConfig& cfg) {
    auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
    if (cfg.latent_channels < 1)
        fail("latent_channels must be positive");
    if (cfg.block_widths.empty())
        fail("block_widths must be non-empty");
    if (cfg.attention_heads < 1)
        fail("attention_heads must be positive");
    for (int w : cfg.block_widths) {
        if (w < 1 || w % kGnGroups != 0)
            fail("block_widths entries must be positive multiples of " +
                 std::to_string(kGnGroups));
        if (w % cfg.attention_heads != 0)
            fail("block_widths entries must be divisible by attention_heads");
    }
    int down_factor = 1 << (cfg.levels() - 1);
    if (cfg.spatial < 2 || cfg.spatial % down_factor != 0)
        fail("spatial must be a positive multiple of " + std::to_string(down_factor));
    if (cfg.text_embed_dim < 2)
        fail("text_embed_dim must be at least 2");
    if (cfg.time_embed_dim < 2 || cfg.time_embed_dim % 2 != 0)
        fail("time_embed_dim must be even and at least 2");
    if (cfg.control_weight < 0)
        fail("control_weight must be non-negative");
    if (cfg.schedule_steps < 1)
        fail("schedule_steps must be positive");
}

FreezeMode freeze_mode_from_string(const std::string& s) {
    if (s == "train_both")
        return FreezeMode::train_both;
    if (s == "lock_decoder")
        return FreezeMode::lock_decoder;
    if (s == "lock_both")
        return FreezeMode::lock_both;
    throw std::invalid_argument("unknown freeze mode \"" + s + "\"");
}

std::string to_string(FreezeMode mode) {
    switch (mode) {
        case FreezeMode::train_both: return "train_both";
        case FreezeMode::lock_decoder: return "lock_decoder";
        case FreezeMode::lock_both: return "lock_both";
    }
    throw std::logic_error("unreachable freeze mode");
}

ParamGroup param_group(const std::string& name) {
    if (name.rfind("vae.", 0) == 0)
        return ParamGroup::vae;
    if (name.rfind("text.", 0) == 0)
        return ParamGroup::text_encoder;
    if (name.rfind("time.", 0) == 0)
        return ParamGroup::time_embedder;
    if (name.rfind("base.enc.", 0) == 0)
        return ParamGroup::base_encoder;
    if (name.rfind("base.mid.", 0) == 0)
        return ParamGroup::base_middle;
    if (name.rfind("base.dec.", 0) == 0)
        return ParamGroup::base_decoder;
    if (name.rfind("retr.", 0) == 0)
        return ParamGroup::retrieval;
    if (name.rfind("conj.", 0) == 0)
        return ParamGroup::conjunction;
    throw std::invalid_argument("parameter \"" + name + "\" belongs to no known component");
}

bool trainable_under(FreezeMode mode, ParamGroup group) {
    switch (group) {
        case ParamGroup::conjunction: return true;
        case ParamGroup::retrieval: return mode != FreezeMode::lock_both;
        case ParamGroup::base_decoder: return mode == FreezeMode::train_both;
        default: return false;
    }
}

ag::Var ParamStore::add(const std::string& name, Tensor init, bool trainable) {
    auto [it, fresh] = params_.emplace(name, ag::leaf(std::move(init), trainable, name));
    if (!fresh)
        throw std::logic_error("duplicate parameter \"" + name + "\"");
    return it->second;
}

const ag::Var& ParamStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end())
        throw std::runtime_error("unknown parameter \"" + name + "\"");
    return it->second;
}

std::vector<std::pair<std::string, std::vector<int64_t>>> expected_parameters(
    const ModelConfig& cfg) {
    validate_config(cfg);
    std::vector<std::pair<std::string, std::vector<int64_t>>> out;
    for (auto& spec : param_specs(cfg))
        out.emplace_back(spec.name, spec.shape);
    return out;
}

WeightMap make_base_weights(const ModelConfig& cfg, uint64_t seed) {
    validate_config(cfg);
    Rng root(seed);
    WeightMap out;
    for (const auto& spec : param_specs(cfg))
        if (is_base_component(param_group(spec.name)))
            out.emplace(spec.name, init_tensor(spec, root));
    return out;
}

ModelBundle init_from_base(const WeightMap& base_weights, const ModelConfig& cfg) {
    validate_config(cfg);
    ModelBundle bundle;
    bundle.config = cfg;
    Rng conj_rng(kConjSeed);

    size_t base_count = 0;
    for (const auto& spec : param_specs(cfg)) {
        ParamGroup group = param_group(spec.name);
        Tensor value;
        if (is_base_component(group)) {
            auto it = base_weights.find(spec.name);
            if (it == base_weights.end())
                throw std::runtime_error("base weights missing block \"" + spec.name + "\"");
            if (it->second.shape() != spec.shape)
                throw std::runtime_error("base weight \"" + spec.name + "\" has shape " +
                                         shape_text(it->second.shape()) + ", expected " +
                                         shape_text(spec.shape));
            value = it->second;
            base_count++;
        } else if (group == ParamGroup::retrieval) {
            // bitwise copy of the matching base encoder block
            std::string src = "base.enc." + spec.name.substr(5);
            auto it = base_weights.find(src);
            if (it == base_weights.end())
                throw std::runtime_error("base weights missing block \"" + src + "\"");
            value = it->second;
        } else {
            value = init_tensor(spec, conj_rng);
        }
        bundle.params.add(spec.name, std::move(value),
                          trainable_under(bundle.freeze, group));
    }
    if (base_count != base_weights.size())
        throw std::runtime_error("base weights carry " +
                                 std::to_string(base_weights.size() - base_count) +
                                 " blocks unknown to this config");
    return bundle;
}

ModelBundle bundle_from_weights(const ModelConfig& cfg, const WeightMap& weights,
                                FreezeMode freeze) {
    validate_config(cfg);
    ModelBundle bundle;
    bundle.config = cfg;
    bundle.freeze = freeze;
    size_t used = 0;
    for (const auto& spec : param_specs(cfg)) {
        auto it = weights.find(spec.name);
        if (it == weights.end())
            throw std::runtime_error("weights missing block \"" + spec.name + "\"");
        if (it->second.shape() != spec.shape)
            throw std::runtime_error("weight \"" + spec.name + "\" has shape " +
                                     shape_text(it->second.shape()) + ", expected " +
                                     shape_text(spec.shape));
        bundle.params.add(spec.name, it->second,
                          trainable_under(freeze, param_group(spec.name)));
        used++;
    }
    if (used != weights.size())
        throw std::runtime_error("weight map carries " + std::to_string(weights.size() - used) +
                                 " blocks unknown to this config");
    return bundle;
}

WeightMap weights_of(const ModelBundle& bundle) {
    WeightMap out;
    for (const auto& [name, var] : bundle.params.all())
        out.emplace(name, var->val);
    return out;
}

ag::Var embed_text(const ModelBundle& bundle, const std::string& text) {
    // A short token sequence rather than one pooled vector, so attention
    // over the text context stays a real softmax.
    int dim = bundle.config.text_embed_dim;
    Rng base(kTextSeed ^ fnv1a64(text));
    Tensor feats({kTextTokens, dim});
    for (int row = 0; row < kTextTokens; row++) {
        Rng rng = base.child((uint64_t)row);
        double norm2 = 0;
        for (int i = 0; i < dim; i++) {
            double v = rng.normal();
            feats[row * dim + i] = v;
            norm2 += v * v;
        }
        double inv = 1.0 / std::max(std::sqrt(norm2), 1e-12);
        for (int i = 0; i < dim; i++)
            feats[row * dim + i] *= inv;
    }
    return ag::linear(ag::constant(std::move(feats)), bundle.p("text.proj.w"),
                      bundle.p("text.proj.b"));
}

ag::Var time_embedding(const ModelBundle& bundle, int t) {
    check_timestep(bundle.config, t);
    int dim = bundle.config.time_embed_dim, half = dim / 2;
    Tensor feats({1, dim});
    for (int k = 0; k < half; k++) {
        double freq = std::exp(-std::log(10000.0) * k / std::max(1, half - 1));
        feats[k] = std::sin(t * freq);
        feats[half + k] = std::cos(t * freq);
    }
    Var h = ag::linear(ag::constant(std::move(feats)), bundle.p("time.fc0.w"),
                       bundle.p("time.fc0.b"));
    return ag::linear(ag::silu(h), bundle.p("time.fc1.w"), bundle.p("time.fc1.b"));
}

ag::Var vae_encode(const ModelBundle& bundle, const Tensor& image_chw) {
    int side = bundle.config.image_size();
    if (image_chw.rank() != 3 || image_chw.dim(0) != 3 || image_chw.dim(1) != side ||
        image_chw.dim(2) != side)
        throw std::invalid_argument("vae_encode expects a [3," + std::to_string(side) + "," +
                                    std::to_string(side) + "] image tensor, got " +
                                    image_chw.shape_str());
    Var h = ag::constant(image_chw);
    h = ag::silu(conv(bundle, "vae.enc.c0", h, 2, 1));
    h = ag::silu(conv(bundle, "vae.enc.c1", h, 2, 1));
    return conv(bundle, "vae.enc.c2", h, 2, 1);
}

Tensor vae_decode(const ModelBundle& bundle, const Tensor& latent) {
    const ModelConfig& cfg = bundle.config;
    if (latent.rank() != 3 || latent.dim(0) != cfg.latent_channels ||
        latent.dim(1) != cfg.spatial || latent.dim(2) != cfg.spatial)
        throw std::invalid_argument("vae_decode expects a latent of shape [" +
                                    std::to_string(cfg.latent_channels) + "," +
                                    std::to_string(cfg.spatial) + "," +
                                    std::to_string(cfg.spatial) + "], got " + latent.shape_str());
    Var h = ag::silu(conv(bundle, "vae.dec.c_in", ag::constant(latent), 1, 1));
    h = ag::silu(conv(bundle, "vae.dec.u0", ag::upsample2(h), 1, 1));
    h = ag::silu(conv(bundle, "vae.dec.u1", ag::upsample2(h), 1, 1));
    h = ag::silu(conv(bundle, "vae.dec.u2", ag::upsample2(h), 1, 1));
    return conv(bundle, "vae.dec.c_out", h, 1, 1)->val;
}

ReferenceFeatures encode_references(const ModelBundle& bundle,
                                    const std::vector<Tensor>& ref_images,
                                    const std::vector<std::string>& concept_texts, int t) {
    if (ref_images.size() != 4 || concept_texts.size() != 4)
        throw std::invalid_argument("encode_references expects exactly 4 references with texts");
    for (const auto& img : ref_images)
        if (img.rank() != 3 || img.dim(1) != img.dim(2))
            throw std::invalid_argument("reference images must be square, got " +
                                        img.shape_str());
    check_timestep(bundle.config, t);

    Var temb = time_embedding(bundle, t);
    std::vector<std::vector<Var>> per_ref_levels;
    for (size_t r = 0; r < ref_images.size(); r++) {
        Var ctx = embed_text(bundle, concept_texts[r]);
        Var z = vae_encode(bundle, ref_images[r]);
        auto [bottom, levels] = encoder_forward(bundle, "retr", z, temb, ctx);
        (void)bottom;
        std::vector<Var> tokens;
        for (auto& lvl : levels)
            tokens.push_back(ag::to_tokens(lvl));
        per_ref_levels.push_back(std::move(tokens));
    }

    ReferenceFeatures out;
    out.num_refs = (int)ref_images.size();
    for (int i = 0; i < bundle.config.levels(); i++) {
        std::vector<Var> blocks;
        for (auto& ref : per_ref_levels)
            blocks.push_back(ref[(size_t)i]);
        out.levels.push_back(ag::concat(blocks, 0));
        out.tokens_per_ref.push_back((int)per_ref_levels[0][(size_t)i]->val.dim(0));
    }
    return out;
}

ag::Var conjunction_inject(const ModelBundle& bundle, int level, const ag::Var& h,
                           const ReferenceFeatures& refs, double control_weight) {
    const ModelConfig& cfg = bundle.config;
    if (level < 0 || level >= cfg.levels())
        throw std::invalid_argument("conjunction level " + std::to_string(level) +
                                    " out of range");
    int w = cfg.block_widths[(size_t)level];
    if (h->val.rank() != 3 || h->val.dim(0) != 2 * w)
        throw std::runtime_error("conjunction at level " + std::to_string(level) + " expects [" +
                                 std::to_string(2 * w) + ",s,s] hidden, got " +
                                 h->val.shape_str());
    const Var& ref = refs.levels.at((size_t)level);
    if (ref->val.dim(1) != w)
        throw std::runtime_error("reference tokens at level " + std::to_string(level) +
                                 " have dim " + std::to_string(ref->val.dim(1)) + ", expected " +
                                 std::to_string(w));

    std::string p = "conj.l" + std::to_string(level);
    Var n = ag::group_norm(h, bundle.p(p + ".gn.g"), bundle.p(p + ".gn.b"), kGnGroups);
    Var att = mha(bundle, p, ag::to_tokens(n), ref);
    Var z = ag::conv2d(ag::from_tokens(att, h->val.dim(1), h->val.dim(2)),
                       bundle.p(p + ".zero.w"), bundle.p(p + ".zero.b"), 1, 0);
    return ag::add(h, ag::scale(z, control_weight));
}

ag::Var denoise_step(const ModelBundle& bundle, const ag::Var& noisy_latent, int t,
                     const ag::Var& prompt_embedding, const ReferenceFeatures* refs,
                     double control_weight) {
    const ModelConfig& cfg = bundle.config;
    check_timestep(cfg, t);
    const Tensor& z = noisy_latent->val;
    if (z.rank() != 3 || z.dim(0) != cfg.latent_channels || z.dim(1) != cfg.spatial ||
        z.dim(2) != cfg.spatial)
        throw std::invalid_argument("noisy latent has shape " + z.shape_str() + ", expected [" +
                                    std::to_string(cfg.latent_channels) + "," +
                                    std::to_string(cfg.spatial) + "," +
                                    std::to_string(cfg.spatial) + "]");
    if (refs && (int)refs->levels.size() != cfg.levels())
        throw std::runtime_error("reference features cover " +
                                 std::to_string(refs->levels.size()) + " levels, expected " +
                                 std::to_string(cfg.levels()));

    Var temb = time_embedding(bundle, t);
    auto [h, skips] = encoder_forward(bundle, "base.enc", noisy_latent, temb, prompt_embedding);

    h = res_block(bundle, "base.mid.res0", h, temb);
    h = attn_block(bundle, "base.mid.attn", h, nullptr);
    h = res_block(bundle, "base.mid.res1", h, temb);

    for (int i = cfg.levels() - 1; i >= 0; i--) {
        std::string lp = "base.dec.l" + std::to_string(i);
        h = ag::concat({h, skips[(size_t)i]}, 0);
        if (refs)
            h = conjunction_inject(bundle, i, h, *refs, control_weight);
        h = res_block(bundle, lp + ".res", h, temb);
        h = attn_block(bundle, lp + ".attn", h, &prompt_embedding);
        if (i > 0)
            h = conv(bundle, "base.dec.up" + std::to_string(i), ag::upsample2(h), 1, 1);
    }
    h = ag::silu(ag::group_norm(h, bundle.p("base.dec.out.gn.g"), bundle.p("base.dec.out.gn.b"),
                                kGnGroups));
    return conv(bundle, "base.dec.out.c", h, 1, 1);
}

Tensor denoise_base(const ModelBundle& bundle, const Tensor& noisy_latent, int t,
                    const std::string& prompt) {
    Var prompt_emb = embed_text(bundle, prompt);
    return denoise_step(bundle, ag::constant(noisy_latent), t, prompt_emb, nullptr, 0.0)->val;
}

}  // namespace refgen
