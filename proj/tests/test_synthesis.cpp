#include <doctest.h>

#include <fstream>
#include <map>
#include <set>

#include "refgen/dataset.hpp"
#include "refgen/demo_data.hpp"
#include "refgen/synthesis.hpp"
#include "testutil.hpp"

using namespace refgen;

namespace {

// Deterministic per-id pixel pattern so content comparisons mean something.
Image pattern_image(const std::string& id, int w, int h) {
    uint64_t hash = fnv1a64(id);
    Image img(w, h);
    for (int y = 0; y < h; y++)
        for (int x = 0; x < w; x++) {
            uint8_t* p = img.at(x, y);
            p[0] = (uint8_t)(x * 7 + y * 13 + hash);
            p[1] = (uint8_t)(x * 3 + y * 31 + (hash >> 8));
            p[2] = (uint8_t)(x * 17 + y * 5 + (hash >> 16));
        }
    return img;
}

Mask left_half_mask(int w, int h) {
    Mask m(w, h);
    fill_rect(m, 0, 0, w / 2, h, 1);
    return m;
}

struct Fixture {
    testutil::TempDir tmp{"synth"};
    std::vector<ImageRecord> records;

    // y1 = face box lower border; box spans [w/4, 3w/4) x [y1 - h/5, y1)
    void add(const std::string& id, const std::string& character, int label, int w, int h,
             int y1, bool with_mask = true) {
        Image img = pattern_image(id, w, h);
        save_ppm(tmp.path / "images" / (id + ".ppm"), img);
        ImageRecord rec;
        rec.id = id;
        rec.character = character;
        rec.artist = "artist";
        rec.tags = {"1girl", "dress"};
        rec.image_path = "images/" + id + ".ppm";
        rec.clothing_label = label;
        if (y1 > 0)
            rec.face_bbox = FaceBox{w / 4, y1 - h / 5, 3 * w / 4, y1};
        if (with_mask) {
            save_pgm(tmp.path / "masks" / (id + ".pgm"), left_half_mask(w, h));
            rec.mask_path = "masks/" + id + ".pgm";
        }
        records.push_back(std::move(rec));
    }

    DatasetStore store() { return DatasetStore(tmp.path, records); }
};

SynthesisConfig plain_config(int final_size = 64) {
    SynthesisConfig cfg;
    cfg.final_size = final_size;
    cfg.bg_removal_p = 0.0;  // geometry tests want untouched pixels
    return cfg;
}

Image content_region(const Image& square, const PadPlacement& p) {
    return crop(square, p.dx, p.dy, p.w, p.h);
}

bool mask_subset(const Mask& inner, const Mask& outer) {
    for (size_t i = 0; i < inner.px.size(); i++)
        if (inner.px[i] && !outer.px[i])
            return false;
    return true;
}

size_t mask_sum(const Mask& m) {
    size_t s = 0;
    for (uint8_t v : m.px)
        s += v;
    return s;
}

}  // namespace

TEST_CASE("pad_to_square contract") {
    Image sq = pattern_image("sq", 32, 32);
    auto [same, ones] = pad_to_square(sq, PadSpec{Rgb{9, 9, 9}, 0, 0, 32});
    CHECK(same.px == sq.px);
    CHECK(mask_sum(ones) == 32 * 32);

    Image tall = pattern_image("t", 32, 64);
    auto [padded, mask] = pad_to_square(tall, PadSpec{Rgb{255, 0, 0}, 10, 0, 64});
    CHECK(mask_sum(mask) == 2048);
    CHECK(padded.at(0, 0)[0] == 255);   // fill probe left of content
    CHECK(padded.at(0, 0)[1] == 0);
    CHECK(padded.at(50, 7)[0] == 255);  // and right of it
    CHECK(content_region(padded, PadPlacement{{}, 10, 0, 32, 64}).px == tall.px);

    CHECK_THROWS(pad_to_square(tall, PadSpec{{}, 33, 0, 64}));
    CHECK_THROWS(pad_to_square(tall, PadSpec{{}, 0, 1, 64}));
    CHECK_THROWS(pad_to_square(pattern_image("big", 80, 80), PadSpec{{}, 0, 0, 64}));
}

TEST_CASE("reconstruction picks the four other members of a 5-cluster") {
    Fixture fx;
    for (int i = 0; i < 5; i++)
        fx.add("m" + std::to_string(i), "c", 0, 48, 60, 30);
    DatasetStore store = fx.store();
    SampleSynthesizer synth(store, plain_config());

    Rng rng(7);
    TrainingSample s = synth.reconstruction(store.clusters()[0], "m2", rng);
    CHECK(s.task == "recon");
    CHECK(!s.with_replacement);
    REQUIRE(s.refs.size() == 4);
    std::set<std::string> sources;
    for (const auto& part : s.refs) {
        CHECK(part.kind == "figure");
        sources.insert(part.source_id);
    }
    CHECK(sources == std::set<std::string>{"m0", "m1", "m3", "m4"});
    CHECK(s.prompt_tags == std::vector<std::string>{"1girl", "dress"});
    CHECK(mask_subset(s.m_face, s.m_tgt));

    Rng again(7);
    TrainingSample s2 = synth.reconstruction(store.clusters()[0], "m2", again);
    CHECK(s2.target.px == s.target.px);
    CHECK(s2.refs[3].image.px == s.refs[3].image.px);
    CHECK(s2.m_face.px == s.m_face.px);

    Rng other(8);
    TrainingSample s3 = synth.reconstruction(store.clusters()[0], "m2", other);
    CHECK(s3.target.px != s.target.px);  // padding and augmentation moved

    Rng stray(1);
    CHECK_THROWS_AS(synth.reconstruction(store.clusters()[0], "stranger", stray),
                    std::invalid_argument);
}

TEST_CASE("small clusters fall back to replacement sampling") {
    Fixture fx;
    fx.add("a", "c", 0, 48, 60, 30);
    fx.add("b", "c", 0, 48, 60, 30);
    DatasetStore store = fx.store();
    SampleSynthesizer synth(store, plain_config());

    Rng rng(3);
    TrainingSample s = synth.reconstruction(store.clusters()[0], "a", rng);
    CHECK(s.with_replacement);
    for (const auto& part : s.refs)
        CHECK(part.source_id == "b");

    Fixture solo;
    solo.add("only", "c", 0, 48, 60, 30);
    DatasetStore sstore = solo.store();
    Rng rng2(3);
    TrainingSample lone = SampleSynthesizer(sstore, plain_config())
                              .reconstruction(sstore.clusters()[0], "only", rng2);
    CHECK(lone.with_replacement);
    for (const auto& part : lone.refs)
        CHECK(part.source_id == "only");
}

TEST_CASE("reconstruction reference frequencies are uniform") {
    Fixture fx;
    for (int i = 0; i < 10; i++)
        fx.add("m" + std::to_string(i), "c", 0, 24, 24, 12);
    DatasetStore store = fx.store();
    SampleSynthesizer synth(store, plain_config(32));

    const int draws = 10000;
    std::map<std::string, int> counts;
    Rng root(99);
    for (int i = 0; i < draws; i++) {
        Rng rng = root.child((uint64_t)i);
        TrainingSample s = synth.reconstruction(store.clusters()[0], "m0", rng);
        for (const auto& part : s.refs)
            counts[part.source_id]++;
    }
    // each of the 9 candidates appears in a sample with p = 4/9
    double p = 4.0 / 9.0;
    double sigma = std::sqrt(draws * p * (1 - p));
    for (int i = 1; i < 10; i++) {
        double c = counts["m" + std::to_string(i)];
        CHECK(std::fabs(c - draws * p) < 3 * sigma);
    }
    CHECK(counts.count("m0") == 0);
}

TEST_CASE("composition crops bodies at the face box lower border") {
    const int W = 48, H = 60, y1 = 30;
    Fixture fx;
    fx.add("tgt", "c", 0, W, H, y1);
    fx.add("src", "c", 0, W, H, y1);
    DatasetStore store = fx.store();
    SampleSynthesizer synth(store, plain_config());

    Rng rng(11);
    TrainingSample s = synth.composition(store.clusters()[0], "tgt", rng);
    REQUIRE(s.refs.size() == 4);
    CHECK(s.refs[0].kind == "body");
    CHECK(s.refs[1].kind == "body");
    CHECK(s.refs[2].kind == "face");
    CHECK(s.refs[3].kind == "face");

    Image src = pattern_image("src", W, H);
    for (int i = 0; i < 2; i++) {
        const ConceptPart& body = s.refs[(size_t)i];
        CHECK(body.source_id == "src");
        CHECK(!body.infill);
        CHECK(body.placement.h == H - y1);  // crop boundary = box lower border
        CHECK(body.placement.w == W);
        CHECK(content_region(body.image, body.placement).px ==
              crop(src, 0, y1, W, H - y1).px);
    }
    for (int i = 2; i < 4; i++) {
        const ConceptPart& face = s.refs[(size_t)i];
        CHECK(face.placement.dx == 0);
        CHECK(face.placement.dy == 0);
        CHECK(face.placement.w == 64);
        CHECK(face.placement.h == 64);
        Image expected = resize_nearest(crop(src, W / 4, y1 - H / 5, W / 2, H / 5), 64, 64);
        CHECK(face.image.px == expected.px);
    }

    // target is padded verbatim; masks follow the placement arithmetic
    CHECK(content_region(s.target, s.placement).px == pattern_image("tgt", W, H).px);
    CHECK(mask_sum(s.m_tgt) == (size_t)W * H);
    CHECK(mask_sum(s.m_face) == (size_t)(W / 2) * (H / 5));
    Mask expected_face(64, 64);
    fill_rect(expected_face, W / 4 + s.placement.dx, y1 - H / 5 + s.placement.dy, W / 2, H / 5, 1);
    CHECK(s.m_face.px == expected_face.px);
    CHECK(mask_subset(s.m_face, s.m_tgt));
}

TEST_CASE("infill triggers strictly below one third") {
    const int W = 48, H = 60;  // H/3 = 20
    auto run = [&](int y1) {
        Fixture fx;
        fx.add("tgt", "c", 0, W, H, 0);  // target itself has no face box
        fx.add("src", "c", 0, W, H, y1);
        DatasetStore store = fx.store();
        Rng rng(21);
        return SampleSynthesizer(store, plain_config())
            .composition(store.clusters()[0], "tgt", rng);
    };

    TrainingSample at_boundary = run(20);  // 3*20 == H: not infill
    for (int i = 0; i < 2; i++) {
        CHECK(!at_boundary.refs[(size_t)i].infill);
        CHECK(at_boundary.refs[(size_t)i].placement.h == H - 20);
    }
    CHECK(mask_sum(at_boundary.m_face) == 0);  // boxless target degrades to a zero mask

    TrainingSample below = run(19);  // 3*19 < H: infill
    Image src = pattern_image("src", W, H);
    for (int i = 0; i < 2; i++) {
        const ConceptPart& body = below.refs[(size_t)i];
        CHECK(body.infill);
        CHECK(body.placement.h == H);  // whole figure kept
        Image content = content_region(body.image, body.placement);
        // face box region fills with the pad color, the rest is untouched
        Rgb fill = body.placement.fill;
        for (int y = 19 - H / 5; y < 19; y++)
            for (int x = W / 4; x < 3 * W / 4; x++) {
                CHECK(content.at(x, y)[0] == fill.r);
                CHECK(content.at(x, y)[1] == fill.g);
            }
        CHECK(content.at(0, 0)[0] == src.at(0, 0)[0]);
        CHECK(content.at(W - 1, H - 1)[1] == src.at(W - 1, H - 1)[1]);
    }
}

TEST_CASE("composition skips clusters without face annotations") {
    Fixture fx;
    fx.add("tgt", "c", 0, 48, 60, 0);
    fx.add("other", "c", 0, 48, 60, 0);
    DatasetStore store = fx.store();
    Rng rng(5);
    CHECK_THROWS_AS(SampleSynthesizer(store, plain_config())
                        .composition(store.clusters()[0], "tgt", rng),
                    SampleSkip);

    // a face box flush with the bottom edge leaves no body rows
    Fixture fx2;
    fx2.add("tgt", "c", 0, 48, 60, 0);
    fx2.add("lowface", "c", 0, 48, 60, 60);
    DatasetStore store2 = fx2.store();
    Rng rng2(5);
    CHECK_THROWS_AS(SampleSynthesizer(store2, plain_config())
                        .composition(store2.clusters()[0], "tgt", rng2),
                    SampleSkip);
}

TEST_CASE("lone annotated target composes against itself, flagged") {
    Fixture fx;
    fx.add("tgt", "c", 0, 48, 60, 30);
    DatasetStore store = fx.store();
    Rng rng(9);
    TrainingSample s =
        SampleSynthesizer(store, plain_config()).composition(store.clusters()[0], "tgt", rng);
    CHECK(s.with_replacement);
    for (const auto& part : s.refs)
        CHECK(part.source_id == "tgt");
}

TEST_CASE("full-image face box makes m_face equal m_tgt") {
    const int side = 64;
    Fixture fx;
    fx.add("tgt", "c", 0, side, side, 0);
    fx.records[0].face_bbox = FaceBox{0, 0, side, side};
    fx.add("src", "c", 0, side, side, 32);
    DatasetStore store = fx.store();
    Rng rng(13);
    TrainingSample s =
        SampleSynthesizer(store, plain_config(side)).composition(store.clusters()[0], "tgt", rng);
    CHECK(s.placement.dx == 0);  // image fills the square, displacement forced to zero
    CHECK(s.placement.dy == 0);
    CHECK(mask_sum(s.m_tgt) == (size_t)side * side);
    CHECK(s.m_face.px == s.m_tgt.px);
}

TEST_CASE("background removal rate sits inside binomial bounds") {
    Fixture fx;
    for (int i = 0; i < 4; i++)
        fx.add("m" + std::to_string(i), "c", 0, 24, 24, 12);
    DatasetStore store = fx.store();
    SynthesisConfig cfg = plain_config(32);
    cfg.bg_removal_p = 0.5;
    SampleSynthesizer synth(store, cfg);

    size_t removed = 0, parts = 0;
    Rng root(31);
    const int samples = 2500;  // 10000 parts
    for (int i = 0; i < samples; i++) {
        Rng rng = root.child((uint64_t)i);
        TrainingSample s = synth.composition(store.clusters()[0], "m0", rng);
        for (const auto& part : s.refs) {
            removed += part.bg_removed;
            parts++;
        }
    }
    double rate = (double)removed / (double)parts;
    double sigma = std::sqrt(0.25 / (double)parts);
    CHECK(rate > 0.5 - 3 * sigma);
    CHECK(rate < 0.5 + 3 * sigma);

    // no mask, no coin: the part never counts as background-removed
    Fixture nomask;
    nomask.add("a", "c", 0, 24, 24, 12, false);
    nomask.add("b", "c", 0, 24, 24, 12, false);
    DatasetStore nstore = nomask.store();
    Rng rng(1);
    TrainingSample s = SampleSynthesizer(nstore, cfg).composition(nstore.clusters()[0], "a", rng);
    for (const auto& part : s.refs)
        CHECK(!part.bg_removed);
}

TEST_CASE("synthesize_set writes a reloadable, reproducible sample set") {
    DemoDataConfig dcfg;
    dcfg.image_size = 48;
    dcfg.characters = 2;
    dcfg.clusters_per_identity = 2;
    dcfg.members_per_cluster = 5;
    dcfg.noise_records = 3;
    dcfg.seed = 4242;

    testutil::TempDir tmp("set");
    DemoDataOut demo = generate_demo_data(dcfg, tmp.path / "data");
    std::vector<ImageRecord> raw = load_manifest(demo.manifest);
    FilterPolicy policy = load_policy(demo.policy);
    FilterResult filtered = filter_records(raw, policy);
    CHECK(filtered.rejected.size() == 3);
    ClusterResult grouped = group_identities(filtered.kept);
    emit_manifest(grouped.clusters, filtered.kept, tmp.path / "data" / "grouped.jsonl");

    DatasetStore store(tmp.path / "data", load_manifest(tmp.path / "data" / "grouped.jsonl"));
    CHECK(store.clusters().size() == 4);

    SynthesisConfig cfg;
    cfg.final_size = 64;
    SynthesisRun run = synthesize_set(store, cfg, "compose", 25, tmp.path / "out_a", 777);
    CHECK(run.written == 25);

    std::vector<SavedSample> loaded = load_sample_set(tmp.path / "out_a");
    REQUIRE(loaded.size() == 25);
    for (const auto& [sample, dirname] : loaded) {
        CHECK(sample.task == "compose");
        REQUIRE(sample.refs.size() == 4);
        int bodies = 0, faces = 0;
        for (const auto& part : sample.refs) {
            bodies += part.kind == "body";
            faces += part.kind == "face";
        }
        CHECK(bodies == 2);
        CHECK(faces == 2);
        CHECK(mask_subset(sample.m_face, sample.m_tgt));
    }

    synthesize_set(store, cfg, "compose", 25, tmp.path / "out_b", 777);
    auto bytes = [](const std::filesystem::path& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)), {});
    };
    CHECK(bytes(tmp.path / "out_a" / "index.jsonl") == bytes(tmp.path / "out_b" / "index.jsonl"));
    CHECK(bytes(tmp.path / "out_a" / "sample_000007" / "target.ppm") ==
          bytes(tmp.path / "out_b" / "sample_000007" / "target.ppm"));
    CHECK(bytes(tmp.path / "out_a" / "sample_000013" / "ref_2.ppm") ==
          bytes(tmp.path / "out_b" / "sample_000013" / "ref_2.ppm"));

    synthesize_set(store, cfg, "recon", 0, tmp.path / "out_recon", 777);
    std::vector<SavedSample> recon = load_sample_set(tmp.path / "out_recon");
    CHECK(recon.size() == store.records().size());
    for (const auto& [sample, dirname] : recon)
        for (const auto& part : sample.refs)
            CHECK(part.kind == "figure");

    CHECK_THROWS(synthesize_set(store, cfg, "paint", 1, tmp.path / "bad", 1));
}

TEST_CASE("demo corpus exercises both boundary modes and the order-sensitive pair") {
    DemoDataConfig dcfg;
    dcfg.image_size = 48;
    dcfg.characters = 1;
    dcfg.clusters_per_identity = 2;
    dcfg.members_per_cluster = 4;
    dcfg.noise_records = 0;
    dcfg.seed = 5;

    testutil::TempDir tmp("demo");
    DemoDataOut demo = generate_demo_data(dcfg, tmp.path);
    std::vector<ImageRecord> records = load_manifest(demo.manifest);
    CHECK(records.size() == 8);

    // the pinned identity: outfits "black and pink" vs "pink and black"
    ClusterResult grouped = group_identities(records);
    CHECK(grouped.clusters.size() == 2);
    std::set<std::string> answers;
    for (const auto& r : records)
        answers.insert(normalize_answer(*r.vqa_answer));
    CHECK(answers == std::set<std::string>{"black and pink", "pink and black"});

    int at_boundary = 0, below_boundary = 0;
    for (const auto& r : records) {
        REQUIRE(r.face_bbox.has_value());
        Image img = load_ppm(tmp.path / r.image_path);
        CHECK(r.face_bbox->y1 <= img.h);
        if (3 * r.face_bbox->y1 == img.h)
            at_boundary++;
        if (3 * r.face_bbox->y1 == img.h - 3)
            below_boundary++;
    }
    CHECK(at_boundary >= 2);
    CHECK(below_boundary >= 2);
}
