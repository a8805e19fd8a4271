#include "refgen/synthesis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace refgen {

using nlohmann::json;

namespace {

Rgb random_fill(Rng& rng) {
    return Rgb{(uint8_t)rng.uniform_int(256), (uint8_t)rng.uniform_int(256),
               (uint8_t)rng.uniform_int(256)};
}

FaceBox clip_box(FaceBox b, int w, int h) {
    b.x0 = std::clamp(b.x0, 0, w);
    b.y0 = std::clamp(b.y0, 0, h);
    b.x1 = std::clamp(b.x1, 0, w);
    b.y1 = std::clamp(b.y1, 0, h);
    return b;
}

bool box_empty(const FaceBox& b) { return b.x0 >= b.x1 || b.y0 >= b.y1; }

// Shrink so the longer side fits max_side, scaling mask and box alike.
void fit_to(Image& img, std::optional<Mask>& mask, std::optional<FaceBox>& box, int max_side) {
    int longer = std::max(img.w, img.h);
    if (longer <= max_side)
        return;
    int nw = std::max(1, (int)((int64_t)img.w * max_side / longer));
    int nh = std::max(1, (int)((int64_t)img.h * max_side / longer));
    if (box) {
        FaceBox b = *box;
        box = FaceBox{(int)((int64_t)b.x0 * nw / img.w), (int)((int64_t)b.y0 * nh / img.h),
                      (int)(((int64_t)b.x1 * nw + img.w - 1) / img.w),
                      (int)(((int64_t)b.y1 * nh + img.h - 1) / img.h)};
    }
    img = resize_nearest(img, nw, nh);
    if (mask)
        mask = resize_nearest(*mask, nw, nh);
}

uint8_t jitter_channel(uint8_t v, double factor) {
    return (uint8_t)std::clamp(std::round(v * factor), 0.0, 255.0);
}

struct Augmented {
    Image image;
    std::optional<Mask> mask;
    std::optional<FaceBox> box;
};

// Reconstruction-task augmentation: fixed-size random crop (cutting at most
// crop_frac per axis), horizontal flip, per-channel color jitter. Mask and
// face box follow the same geometry; jitter touches pixels only.
Augmented augment(const Image& img, std::optional<Mask> mask, std::optional<FaceBox> box,
                  const SynthesisConfig& cfg, Rng& rng) {
    int cut_x = (int)(cfg.crop_frac * img.w);
    int cut_y = (int)(cfg.crop_frac * img.h);
    int cx = (int)rng.uniform_int((uint64_t)cut_x + 1);
    int cy = (int)rng.uniform_int((uint64_t)cut_y + 1);
    int cw = img.w - cut_x, ch = img.h - cut_y;

    Augmented out;
    out.image = crop(img, cx, cy, cw, ch);
    if (mask)
        out.mask = crop(*mask, cx, cy, cw, ch);
    if (box) {
        FaceBox b = clip_box({box->x0 - cx, box->y0 - cy, box->x1 - cx, box->y1 - cy}, cw, ch);
        if (!box_empty(b))
            out.box = b;
    }
    if (rng.coin(cfg.flip_p)) {
        out.image = hflip(out.image);
        if (out.mask)
            out.mask = hflip(*out.mask);
        if (out.box)
            out.box = FaceBox{cw - out.box->x1, out.box->y0, cw - out.box->x0, out.box->y1};
    }
    double fr = 1.0 + cfg.jitter * (2.0 * rng.uniform() - 1.0);
    double fg = 1.0 + cfg.jitter * (2.0 * rng.uniform() - 1.0);
    double fb = 1.0 + cfg.jitter * (2.0 * rng.uniform() - 1.0);
    for (size_t i = 0; i < out.image.px.size(); i += 3) {
        out.image.px[i] = jitter_channel(out.image.px[i], fr);
        out.image.px[i + 1] = jitter_channel(out.image.px[i + 1], fg);
        out.image.px[i + 2] = jitter_channel(out.image.px[i + 2], fb);
    }
    return out;
}

PadSpec draw_pad(const Image& img, Rgb fill, int final_size, Rng& rng) {
    PadSpec spec;
    spec.fill = fill;
    spec.final_size = final_size;
    spec.dx = (int)rng.uniform_int((uint64_t)(final_size - img.w) + 1);
    spec.dy = (int)rng.uniform_int((uint64_t)(final_size - img.h) + 1);
    return spec;
}

PadPlacement placement_of(const PadSpec& spec, const Image& img) {
    return PadPlacement{spec.fill, spec.dx, spec.dy, img.w, img.h};
}

Mask face_mask(int size, const std::optional<FaceBox>& displaced) {
    Mask m(size, size);
    if (displaced)
        fill_rect(m, displaced->x0, displaced->y0, displaced->x1 - displaced->x0,
                  displaced->y1 - displaced->y0, 1);
    return m;
}

json placement_to_json(const PadPlacement& p) {
    json j;
    j["dx"] = p.dx;
    j["dy"] = p.dy;
    j["w"] = p.w;
    j["h"] = p.h;
    j["fill"] = {p.fill.r, p.fill.g, p.fill.b};
    return j;
}

PadPlacement placement_from_json(const json& j) {
    PadPlacement p;
    p.dx = j.at("dx").get<int>();
    p.dy = j.at("dy").get<int>();
    p.w = j.at("w").get<int>();
    p.h = j.at("h").get<int>();
    p.fill = Rgb{j.at("fill")[0].get<uint8_t>(), j.at("fill")[1].get<uint8_t>(),
                 j.at("fill")[2].get<uint8_t>()};
    return p;
}

std::string sample_dir_name(size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "sample_%06zu", index);
    return buf;
}

}  // namespace

std::pair<Image, Mask> pad_to_square(const Image& img, const PadSpec& spec) {
    if (img.w < 1 || img.h < 1)
        throw std::invalid_argument("pad_to_square: empty image");
    if (std::max(img.w, img.h) > spec.final_size)
        throw std::invalid_argument("pad_to_square: image larger than final size");
    if (spec.dx < 0 || spec.dy < 0 || spec.dx + img.w > spec.final_size ||
        spec.dy + img.h > spec.final_size)
        throw std::invalid_argument("pad_to_square: displacement pushes image out of square");
    Image out(spec.final_size, spec.final_size, spec.fill.r, spec.fill.g, spec.fill.b);
    paste(out, img, spec.dx, spec.dy);
    Mask content(spec.final_size, spec.final_size);
    fill_rect(content, spec.dx, spec.dy, img.w, img.h, 1);
    return {std::move(out), std::move(content)};
}

DatasetStore::DatasetStore(std::filesystem::path root, std::vector<ImageRecord> records)
    : root_(std::move(root)), records_(std::move(records)) {
    for (size_t i = 0; i < records_.size(); i++)
        by_id_.emplace(records_[i].id, i);
    clusters_ = clusters_from_records(records_);
    for (size_t i = 0; i < clusters_.size(); i++) {
        const auto& c = clusters_[i];
        cluster_by_key_.emplace(
            c.character + "\x1f" + c.artist + "\x1f" + std::to_string(c.clothing_label), i);
    }
}

const ImageRecord& DatasetStore::record(const std::string& id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end())
        throw std::runtime_error("unknown record id \"" + id + "\"");
    return records_[it->second];
}

const IdentityCluster& DatasetStore::cluster_of(const ImageRecord& r) const {
    if (!r.clothing_label)
        throw std::runtime_error("record \"" + r.id + "\" has no clothing_label");
    auto it = cluster_by_key_.find(r.character + "\x1f" + r.artist + "\x1f" +
                                   std::to_string(*r.clothing_label));
    if (it == cluster_by_key_.end())
        throw std::runtime_error("record \"" + r.id + "\" references an unknown cluster");
    return clusters_[it->second];
}

Image DatasetStore::image(const ImageRecord& r) const {
    auto it = image_cache_.find(r.id);
    if (it != image_cache_.end())
        return it->second;
    if (r.image_path.empty())
        throw std::runtime_error("record \"" + r.id + "\" has no image_path");
    Image img = load_ppm(root_ / r.image_path);
    image_cache_.emplace(r.id, img);
    return img;
}

std::optional<Mask> DatasetStore::mask(const ImageRecord& r) const {
    if (!r.mask_path)
        return std::nullopt;
    auto it = mask_cache_.find(r.id);
    if (it != mask_cache_.end())
        return it->second;
    Mask m = load_pgm(root_ / *r.mask_path);
    mask_cache_.emplace(r.id, m);
    return m;
}

TrainingSample SampleSynthesizer::reconstruction(const IdentityCluster& cluster,
                                                 const std::string& target_id, Rng& rng) const {
    if (std::find(cluster.member_ids.begin(), cluster.member_ids.end(), target_id) ==
        cluster.member_ids.end())
        throw std::invalid_argument("target \"" + target_id + "\" is not a cluster member");

    std::vector<std::string> pool;
    for (const auto& id : cluster.member_ids)
        if (id != target_id)
            pool.push_back(id);

    TrainingSample sample;
    sample.target_id = target_id;
    sample.task = "recon";
    sample.character = cluster.character;
    sample.artist = cluster.artist;
    sample.clothing_label = cluster.clothing_label;

    std::vector<std::string> chosen;
    if (pool.size() >= 4) {
        for (int i = 0; i < 4; i++) {
            size_t j = (size_t)i + rng.uniform_int(pool.size() - i);
            std::swap(pool[(size_t)i], pool[j]);
            chosen.push_back(pool[(size_t)i]);
        }
    } else {
        sample.with_replacement = true;
        if (pool.empty())
            pool.push_back(target_id);
        for (int i = 0; i < 4; i++)
            chosen.push_back(pool[rng.uniform_int(pool.size())]);
    }

    // target: augment, then pad with a random displacement and fill
    const ImageRecord& trec = store_.record(target_id);
    Augmented t = augment(store_.image(trec), store_.mask(trec), trec.face_bbox, cfg_, rng);
    std::optional<Mask> tmask = t.mask;
    fit_to(t.image, tmask, t.box, cfg_.final_size);
    Rgb tfill = random_fill(rng);
    PadSpec tpad = draw_pad(t.image, tfill, cfg_.final_size, rng);
    auto [timg, tcontent] = pad_to_square(t.image, tpad);
    sample.target = std::move(timg);
    sample.m_tgt = std::move(tcontent);
    std::optional<FaceBox> tbox = t.box;
    if (tbox)
        tbox = FaceBox{tbox->x0 + tpad.dx, tbox->y0 + tpad.dy, tbox->x1 + tpad.dx,
                       tbox->y1 + tpad.dy};
    sample.m_face = face_mask(cfg_.final_size, tbox);
    sample.placement = placement_of(tpad, t.image);
    sample.prompt_tags = trec.tags;

    for (const auto& id : chosen) {
        const ImageRecord& rec = store_.record(id);
        Augmented a = augment(store_.image(rec), store_.mask(rec), std::nullopt, cfg_, rng);
        std::optional<Mask> amask = a.mask;
        std::optional<FaceBox> nobox;
        fit_to(a.image, amask, nobox, cfg_.final_size);
        Rgb fill = random_fill(rng);
        ConceptPart part;
        part.kind = "figure";
        part.source_id = id;
        if (amask && rng.coin(cfg_.bg_removal_p)) {
            a.image = apply_background_fill(a.image, *amask, fill);
            part.bg_removed = true;
        }
        PadSpec pad = draw_pad(a.image, fill, cfg_.final_size, rng);
        part.image = pad_to_square(a.image, pad).first;
        part.placement = placement_of(pad, a.image);
        sample.refs.push_back(std::move(part));
    }
    return sample;
}

TrainingSample SampleSynthesizer::composition(const IdentityCluster& cluster,
                                              const std::string& target_id, Rng& rng) const {
    if (std::find(cluster.member_ids.begin(), cluster.member_ids.end(), target_id) ==
        cluster.member_ids.end())
        throw std::invalid_argument("target \"" + target_id + "\" is not a cluster member");

    // parts come only from members with a face box; prefer non-target members
    std::vector<std::string> pool;
    for (const auto& id : cluster.member_ids)
        if (id != target_id && store_.record(id).face_bbox)
            pool.push_back(id);
    bool used_target = false;
    if (pool.empty()) {
        if (store_.record(target_id).face_bbox) {
            pool.push_back(target_id);
            used_target = true;
        } else {
            throw SampleSkip("no face-annotated members in cluster of \"" + target_id + "\"");
        }
    }

    TrainingSample sample;
    sample.target_id = target_id;
    sample.task = "compose";
    sample.character = cluster.character;
    sample.artist = cluster.artist;
    sample.clothing_label = cluster.clothing_label;
    sample.with_replacement = used_target;

    for (int i = 0; i < 4; i++) {
        const std::string kind = i < 2 ? "body" : "face";
        const ImageRecord& rec = store_.record(pool[rng.uniform_int(pool.size())]);
        Image src = store_.image(rec);
        std::optional<Mask> mask = store_.mask(rec);
        FaceBox box = clip_box(*rec.face_bbox, src.w, src.h);
        if (box_empty(box))
            throw SampleSkip("face box of \"" + rec.id + "\" is outside the image");
        Rgb fill = random_fill(rng);

        ConceptPart part;
        part.kind = kind;
        part.source_id = rec.id;
        if (kind == "body") {
            if (3 * box.y1 < src.h) {
                // figure mostly below the face: keep it whole, blank the face box
                part.infill = true;
                if (mask && rng.coin(cfg_.bg_removal_p)) {
                    src = apply_background_fill(src, *mask, fill);
                    part.bg_removed = true;
                }
                fill_rect(src, box.x0, box.y0, box.x1 - box.x0, box.y1 - box.y0, fill);
            } else {
                if (box.y1 >= src.h)
                    throw SampleSkip("face box of \"" + rec.id + "\" leaves no body region");
                src = crop(src, 0, box.y1, src.w, src.h - box.y1);
                if (mask) {
                    Mask cropped = crop(*mask, 0, box.y1, mask->w, mask->h - box.y1);
                    if (rng.coin(cfg_.bg_removal_p)) {
                        src = apply_background_fill(src, cropped, fill);
                        part.bg_removed = true;
                    }
                }
            }
            std::optional<Mask> nomask;
            std::optional<FaceBox> nobox;
            fit_to(src, nomask, nobox, cfg_.final_size);
            PadSpec pad = draw_pad(src, fill, cfg_.final_size, rng);
            part.image = pad_to_square(src, pad).first;
            part.placement = placement_of(pad, src);
        } else {
            src = crop(src, box.x0, box.y0, box.x1 - box.x0, box.y1 - box.y0);
            if (mask) {
                Mask cropped = crop(*mask, box.x0, box.y0, box.x1 - box.x0, box.y1 - box.y0);
                if (rng.coin(cfg_.bg_removal_p)) {
                    src = apply_background_fill(src, cropped, fill);
                    part.bg_removed = true;
                }
            }
            // faces are stretched to cover the whole square, aspect be damned
            src = resize_nearest(src, cfg_.final_size, cfg_.final_size);
            PadSpec pad = draw_pad(src, fill, cfg_.final_size, rng);  // forced (0,0)
            part.image = pad_to_square(src, pad).first;
            part.placement = placement_of(pad, src);
        }
        sample.refs.push_back(std::move(part));
    }

    // target: plain pad, no augmentation on the composition task
    const ImageRecord& trec = store_.record(target_id);
    Image timg = store_.image(trec);
    std::optional<Mask> tmask;
    std::optional<FaceBox> tbox =
        trec.face_bbox ? std::optional(clip_box(*trec.face_bbox, timg.w, timg.h)) : std::nullopt;
    if (tbox && box_empty(*tbox))
        tbox.reset();
    fit_to(timg, tmask, tbox, cfg_.final_size);
    Rgb tfill = random_fill(rng);
    PadSpec tpad = draw_pad(timg, tfill, cfg_.final_size, rng);
    auto [padded, content] = pad_to_square(timg, tpad);
    sample.target = std::move(padded);
    sample.m_tgt = std::move(content);
    if (tbox)
        tbox = FaceBox{tbox->x0 + tpad.dx, tbox->y0 + tpad.dy, tbox->x1 + tpad.dx,
                       tbox->y1 + tpad.dy};
    sample.m_face = face_mask(cfg_.final_size, tbox);
    sample.placement = placement_of(tpad, timg);
    sample.prompt_tags = trec.tags;
    return sample;
}

SynthesisRun synthesize_set(const DatasetStore& store, const SynthesisConfig& cfg,
                            const std::string& task, size_t count,
                            const std::filesystem::path& out_dir, uint64_t seed) {
    if (task != "recon" && task != "compose")
        throw std::invalid_argument("unknown synthesis task \"" + task + "\"");
    std::vector<std::string> eligible;
    for (const auto& r : store.records())
        if (r.clothing_label)
            eligible.push_back(r.id);
    if (eligible.empty())
        throw std::runtime_error("no clustered records to synthesize from");

    std::filesystem::create_directories(out_dir);
    SampleSynthesizer synth(store, cfg);
    Rng root = Rng(seed).child("synthesize");

    std::vector<json> index_lines;
    std::vector<json> skip_lines;
    bool one_pass = count == 0;
    size_t total = one_pass ? eligible.size() : count;
    size_t consecutive_skips = 0;
    SynthesisRun run;
    for (size_t i = 0; one_pass ? i < total : run.written < total; i++) {
        const std::string& target_id = eligible[i % eligible.size()];
        Rng sample_rng = root.child(i);
        TrainingSample sample;
        try {
            const IdentityCluster& cluster = store.cluster_of(store.record(target_id));
            sample = task == "recon" ? synth.reconstruction(cluster, target_id, sample_rng)
                                     : synth.composition(cluster, target_id, sample_rng);
        } catch (const SampleSkip& skip) {
            json j;
            j["target_id"] = target_id;
            j["reason"] = skip.what();
            skip_lines.push_back(std::move(j));
            run.skipped++;
            if (!one_pass && ++consecutive_skips >= eligible.size())
                throw std::runtime_error("no eligible target can produce a sample");
            continue;
        }
        consecutive_skips = 0;

        std::string dir = sample_dir_name(run.written);
        std::filesystem::create_directories(out_dir / dir);
        save_ppm(out_dir / dir / "target.ppm", sample.target);
        save_pgm(out_dir / dir / "m_tgt.pgm", sample.m_tgt);
        save_pgm(out_dir / dir / "m_face.pgm", sample.m_face);
        json refs = json::array();
        for (size_t ri = 0; ri < sample.refs.size(); ri++) {
            const ConceptPart& part = sample.refs[ri];
            save_ppm(out_dir / dir / ("ref_" + std::to_string(ri) + ".ppm"), part.image);
            json rj;
            rj["kind"] = part.kind;
            rj["source_id"] = part.source_id;
            rj["bg_removed"] = part.bg_removed;
            rj["infill"] = part.infill;
            rj["placement"] = placement_to_json(part.placement);
            refs.push_back(std::move(rj));
        }
        json line;
        line["dir"] = dir;
        line["target_id"] = sample.target_id;
        line["task"] = sample.task;
        line["character"] = sample.character;
        line["artist"] = sample.artist;
        line["clothing_label"] = sample.clothing_label;
        line["prompt_tags"] = sample.prompt_tags;
        line["with_replacement"] = sample.with_replacement;
        line["placement"] = placement_to_json(sample.placement);
        line["refs"] = std::move(refs);
        index_lines.push_back(std::move(line));
        run.written++;
    }

    auto write_jsonl = [](const std::filesystem::path& p, const std::string& type,
                          const std::vector<json>& lines) {
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        if (!out)
            throw std::runtime_error(p.string() + ": cannot write");
        json header;
        header["type"] = type;
        header["version"] = 1;
        header["records"] = lines.size();
        out << header.dump() << "\n";
        for (const auto& l : lines)
            out << l.dump() << "\n";
    };
    write_jsonl(out_dir / "index.jsonl", "sample_index", index_lines);
    write_jsonl(out_dir / "skipped.jsonl", "skip_list", skip_lines);
    return run;
}

std::vector<SavedSample> load_sample_set(const std::filesystem::path& dir) {
    std::ifstream in(dir / "index.jsonl", std::ios::binary);
    if (!in)
        throw std::runtime_error((dir / "index.jsonl").string() + ": cannot open");
    std::string text;
    if (!std::getline(in, text))
        throw std::runtime_error((dir / "index.jsonl").string() + ": empty index");
    json header = json::parse(text);
    if (header.value("type", "") != "sample_index" || header.value("version", 0) != 1)
        throw std::runtime_error((dir / "index.jsonl").string() + ": not a sample_index header");

    std::vector<SavedSample> out;
    while (std::getline(in, text)) {
        if (text.empty())
            continue;
        json j = json::parse(text);
        SavedSample s;
        s.dir = j.at("dir").get<std::string>();
        TrainingSample& ts = s.sample;
        ts.target_id = j.at("target_id").get<std::string>();
        ts.task = j.at("task").get<std::string>();
        ts.character = j.at("character").get<std::string>();
        ts.artist = j.at("artist").get<std::string>();
        ts.clothing_label = j.at("clothing_label").get<int>();
        for (const auto& t : j.at("prompt_tags"))
            ts.prompt_tags.push_back(t.get<std::string>());
        ts.with_replacement = j.at("with_replacement").get<bool>();
        ts.placement = placement_from_json(j.at("placement"));
        ts.target = load_ppm(dir / s.dir / "target.ppm");
        ts.m_tgt = load_pgm(dir / s.dir / "m_tgt.pgm");
        ts.m_face = load_pgm(dir / s.dir / "m_face.pgm");
        size_t ri = 0;
        for (const auto& rj : j.at("refs")) {
            ConceptPart part;
            part.kind = rj.at("kind").get<std::string>();
            part.source_id = rj.at("source_id").get<std::string>();
            part.bg_removed = rj.at("bg_removed").get<bool>();
            part.infill = rj.at("infill").get<bool>();
            part.placement = placement_from_json(rj.at("placement"));
            part.image = load_ppm(dir / s.dir / ("ref_" + std::to_string(ri) + ".ppm"));
            ts.refs.push_back(std::move(part));
            ri++;
        }
        if (ts.refs.size() != 4)
            throw std::runtime_error(s.dir + ": expected 4 references, found " +
                                     std::to_string(ts.refs.size()));
        out.push_back(std::move(s));
    }
    size_t expected = header.value("records", (size_t)0);
    if (out.size() != expected)
        throw std::runtime_error((dir / "index.jsonl").string() + ": header promises " +
                                 std::to_string(expected) + " records, found " +
                                 std::to_string(out.size()));
    return out;
}

}  // namespace refgen
