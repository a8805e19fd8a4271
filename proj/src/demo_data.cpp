#include "refgen/demo_data.hpp"

#include <fstream>
#include <stdexcept>
#include <string>

#include "refgen/image.hpp"
#include "refgen/rng.hpp"

namespace refgen {

namespace {

struct NamedColor {
    const char* name;
    Rgb rgb;
};

const NamedColor kPalette[] = {
    {"red", {200, 50, 50}},    {"blue", {60, 80, 200}},  {"green", {60, 170, 80}},
    {"black", {25, 25, 25}},   {"pink", {235, 130, 180}}, {"white", {235, 235, 235}},
    {"gold", {210, 170, 60}},  {"purple", {130, 60, 180}},
};
constexpr size_t kPaletteSize = sizeof(kPalette) / sizeof(kPalette[0]);

const char* kGarments[] = {"dress", "skirt", "kimono", "school_uniform", "shirt"};

// Case/whitespace noise the answer normalizer must see through.
std::string roughen(std::string s, Rng& rng) {
    if (rng.coin(0.3))
        for (auto& ch : s)
            if (rng.coin(0.25))
                ch = (char)std::toupper((unsigned char)ch);
    if (rng.coin(0.2))
        s = " " + s;
    if (rng.coin(0.2)) {
        size_t sp = s.find(' ', 1);
        if (sp != std::string::npos)
            s.insert(sp, " ");
    }
    return s;
}

struct Member {
    Image image;
    Mask mask;
    FaceBox face;
};

// One figure: flat artist-colored background, a face disc whose box lower
// border is steered by `mode`, and a torso split into the two outfit colors.
Member render_member(int h, Rgb bg, Rgb skin, Rgb outfit_a, Rgb outfit_b, int mode, Rng& rng) {
    int w = h * 3 / 4;
    Member m;
    m.image = Image(w, h, bg.r, bg.g, bg.b);
    m.mask = Mask(w, h);

    int r = h / 10;
    int y1;  // face box lower border; the body-crop branch keys off 3*y1 vs h
    switch (mode) {
        case 1: y1 = h / 3; break;                                    // boundary, no infill
        case 2: y1 = h / 3 - 1; break;                                // boundary, infill
        case 3: y1 = h / 5 + 1 + (int)rng.uniform_int(h / 12); break; // clearly infill
        default: y1 = h / 3 + r + (int)rng.uniform_int(h / 6); break; // ordinary figure
    }
    int cy = y1 - r;
    int cx = w / 2 + (int)rng.uniform_int(w / 8) - w / 16;

    for (int y = cy - r; y < y1; y++)
        for (int x = cx - r; x < cx + r; x++) {
            if (x < 0 || x >= w || y < 0 || y >= h)
                continue;
            int dx = x - cx, dy = y - cy;
            if (dx * dx + dy * dy <= r * r) {
                uint8_t* p = m.image.at(x, y);
                p[0] = skin.r;
                p[1] = skin.g;
                p[2] = skin.b;
                m.mask.at(x, y) = 1;
            }
        }
    m.face = FaceBox{cx - r, cy - r, cx + r, y1};

    int body_w = w / 3;
    int bx = cx - body_w / 2;
    int waist = y1 + (h - y1) / 2;
    fill_rect(m.image, bx, y1, body_w, waist - y1, outfit_a);
    fill_rect(m.image, bx, waist, body_w, h - waist, outfit_b);
    fill_rect(m.mask, bx, y1, body_w, h - y1, 1);
    return m;
}

}  // namespace

DemoDataOut generate_demo_data(const DemoDataConfig& cfg, const std::filesystem::path& out_dir) {
    if (cfg.image_size < 48 || cfg.image_size % 24 != 0)
        throw std::invalid_argument("demo image_size must be a multiple of 24, at least 48");
    std::filesystem::create_directories(out_dir / "images");
    std::filesystem::create_directories(out_dir / "masks");
    Rng root(cfg.seed);

    std::vector<ImageRecord> records;
    for (int ci = 0; ci < cfg.characters; ci++) {
        Rng crng = root.child("character").child((uint64_t)ci);
        std::string character = "char" + std::to_string(ci);
        std::string artist = "artist" + std::to_string(ci % 2);
        Rgb skin{(uint8_t)(200 + crng.uniform_int(40)), (uint8_t)(160 + crng.uniform_int(40)),
                 (uint8_t)(130 + crng.uniform_int(40))};
        Rgb bg{(uint8_t)(40 + crng.uniform_int(60)), (uint8_t)(90 + crng.uniform_int(60)),
               (uint8_t)(40 + crng.uniform_int(60))};

        for (int ki = 0; ki < cfg.clusters_per_identity; ki++) {
            size_t pa, pb;
            if (ci == 0 && ki < 2) {
                // same colors, opposite order: distinct outfits under the
                // order-sensitive answer heuristic
                pa = ki == 0 ? 3 : 4;  // black/pink vs pink/black
                pb = ki == 0 ? 4 : 3;
            } else {
                pa = crng.uniform_int(kPaletteSize);
                pb = (pa + 1 + crng.uniform_int(kPaletteSize - 1)) % kPaletteSize;
            }
            std::string answer =
                std::string(kPalette[pa].name) + " and " + kPalette[pb].name;
            const char* garment = kGarments[(ci + ki) % (sizeof(kGarments) / sizeof(char*))];

            for (int mi = 0; mi < cfg.members_per_cluster; mi++) {
                Rng mrng = crng.child("member").child((uint64_t)(ki * 1000 + mi));
                // first members of each cluster pin the body-crop boundary
                // cases; the rest are ordinary figures with occasional
                // high-face (infill) layouts
                int mode = mi == 0 ? 1 : mi == 1 ? 2 : mrng.coin(0.2) ? 3 : 0;
                Member member = render_member(cfg.image_size, bg, skin, kPalette[pa].rgb,
                                              kPalette[pb].rgb, mode, mrng);
                std::string id = "c" + std::to_string(ci) + "_k" + std::to_string(ki) + "_m" +
                                 std::to_string(mi);
                save_ppm(out_dir / "images" / (id + ".ppm"), member.image);
                save_pgm(out_dir / "masks" / (id + ".pgm"), member.mask);

                ImageRecord rec;
                rec.id = id;
                rec.character = character;
                rec.artist = artist;
                rec.tags = {"1girl", garment, std::string(kPalette[pa].name) + "_" + garment};
                rec.image_path = "images/" + id + ".ppm";
                rec.mask_path = "masks/" + id + ".pgm";
                rec.face_bbox = member.face;
                rec.vqa_answer = roughen(answer, mrng);
                records.push_back(std::move(rec));
            }
        }
    }

    Rng nrng = root.child("noise");
    for (int i = 0; i < cfg.noise_records; i++) {
        Member member = render_member(cfg.image_size, Rgb{90, 90, 90}, Rgb{220, 190, 160},
                                      kPalette[i % kPaletteSize].rgb,
                                      kPalette[(i + 2) % kPaletteSize].rgb, 0, nrng);
        std::string id = "noise_" + std::to_string(i);
        save_ppm(out_dir / "images" / (id + ".ppm"), member.image);
        ImageRecord rec;
        rec.id = id;
        rec.image_path = "images/" + id + ".ppm";
        switch (i % 3) {
            case 0:
                rec.character = "charN";
                rec.tags = {"monochrome", "dress"};
                break;
            case 1:
                rec.character = "charA,charB";
                rec.tags = {"2girls", "dress"};
                break;
            default:
                rec.character = "charN";
                rec.tags = {"1girl", "outdoors"};
                break;
        }
        rec.artist = "artist0";
        records.push_back(std::move(rec));
    }

    DemoDataOut out;
    out.records = records.size();
    out.manifest = out_dir / "manifest.jsonl";
    save_manifest(out.manifest, records);

    out.policy = out_dir / "policy.json";
    std::ofstream pol(out.policy, std::ios::binary | std::ios::trunc);
    pol << R"({"banned_tags":["monochrome","sketch"],"clothes_vocab":["dress","skirt",)"
        << R"("kimono","school_uniform","shirt"],"require_single_character":true})" << "\n";
    if (!pol)
        throw std::runtime_error(out.policy.string() + ": cannot write");
    return out;
}

}  // namespace refgen
