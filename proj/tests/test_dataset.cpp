#include <doctest.h>

#include <fstream>

#include "oracles.hpp"
#include "refgen/dataset.hpp"
#include "refgen/rng.hpp"
#include "testutil.hpp"

using namespace refgen;

namespace {

ImageRecord rec(std::string id, std::string character, std::string artist,
                std::vector<std::string> tags, std::optional<std::string> answer = {}) {
    ImageRecord r;
    r.id = std::move(id);
    r.character = std::move(character);
    r.artist = std::move(artist);
    r.tags = std::move(tags);
    r.image_path = "img/" + r.id + ".ppm";
    r.vqa_answer = std::move(answer);
    return r;
}

FilterPolicy test_policy() {
    FilterPolicy p;
    p.banned_tags = {"monochrome", "sketch", "comic"};
    p.clothes_vocab = {"dress", "skirt", "shirt", "kimono", "school_uniform"};
    p.require_single_character = true;
    return p;
}

// Random instances for the clustering oracle: small pools of identities
// and answers, with case and whitespace perturbations that normalization
// must erase.
std::vector<ImageRecord> random_instance(Rng& rng, size_t max_records) {
    const std::vector<std::string> answers = {
        "black and pink", "pink and black", "white and blue", "red and gold", "green"};
    size_t n = 1 + rng.uniform_int(max_records);
    std::vector<ImageRecord> records;
    for (size_t i = 0; i < n; i++) {
        ImageRecord r = rec("r" + std::to_string(i),
                            "char" + std::to_string(rng.uniform_int(3)),
                            "artist" + std::to_string(rng.uniform_int(2)), {"dress"});
        if (rng.coin(0.9)) {
            std::string a = answers[rng.uniform_int(answers.size())];
            if (rng.coin(0.5))
                for (auto& ch : a)
                    if (rng.coin(0.3))
                        ch = (char)std::toupper((unsigned char)ch);
            if (rng.coin(0.3))
                a = "  " + a;
            if (rng.coin(0.3)) {
                size_t sp = a.find(' ');
                if (sp != std::string::npos)
                    a.insert(sp, "\t ");
            }
            r.vqa_answer = a;
        }
        records.push_back(std::move(r));
    }
    return records;
}

}  // namespace

TEST_CASE("filter rejects each rule with its reason") {
    FilterPolicy policy = test_policy();
    std::vector<ImageRecord> records = {
        rec("a", "miku", "art1", {"dress", "smile"}),
        rec("b", "miku", "art1", {"monochrome", "dress"}),
        rec("c", "miku,rin", "art1", {"dress"}),
        rec("d", "miku", "art1", {"smile", "outdoors"}),
        rec("e", "", "art1", {"dress"}),
        rec("f", "miku", "art1", {}),
    };
    records.push_back(ImageRecord{});  // no id at all

    FilterResult res = filter_records(records, policy);
    REQUIRE(res.kept.size() == 1);
    CHECK(res.kept[0].id == "a");
    REQUIRE(res.rejected.size() == 6);
    CHECK(res.rejected[0].reason == "banned_tag");
    CHECK(res.rejected[1].reason == "multiple_characters");
    CHECK(res.rejected[2].reason == "no_clothes_tag");
    CHECK(res.rejected[3].reason == "multiple_characters");  // empty character name
    CHECK(res.rejected[4].reason == "malformed");            // empty tags
    CHECK(res.rejected[5].reason == "malformed");
}

TEST_CASE("filter with empty policy is the identity") {
    FilterPolicy open_policy;
    open_policy.require_single_character = false;
    std::vector<ImageRecord> records = {
        rec("a", "miku,rin", "art1", {"monochrome"}),
        rec("b", "", "x", {"anything"}),
    };
    FilterResult res = filter_records(records, open_policy);
    CHECK(res.kept.size() == 2);
    CHECK(res.rejected.empty());
    CHECK(res.kept == records);
}

TEST_CASE("filter matches per-record predicate and is idempotent") {
    FilterPolicy policy = test_policy();
    Rng rng(101);
    std::vector<ImageRecord> records;
    const std::vector<std::string> tag_pool = {"dress", "skirt", "smile", "monochrome",
                                               "outdoors", "sketch", "shirt"};
    for (int i = 0; i < 200; i++) {
        std::vector<std::string> tags;
        size_t k = rng.uniform_int(4);
        for (size_t t = 0; t < k; t++)
            tags.push_back(tag_pool[rng.uniform_int(tag_pool.size())]);
        std::string character = rng.coin(0.1) ? "a,b" : (rng.coin(0.1) ? "" : "solo_char");
        records.push_back(rec("r" + std::to_string(i), character, "artist", tags));
    }

    FilterResult res = filter_records(records, policy);
    CHECK(res.kept.size() + res.rejected.size() == records.size());

    // independent predicate per record
    size_t expect_kept = 0;
    for (const auto& r : records) {
        bool malformed = r.id.empty() || r.tags.empty();
        bool banned = false, clothed = false;
        for (const auto& t : r.tags) {
            for (const auto& b : policy.banned_tags)
                banned |= t == b;
            for (const auto& c : policy.clothes_vocab)
                clothed |= t == c;
        }
        bool single = !r.character.empty() && r.character.find(',') == std::string::npos;
        if (!malformed && !banned && single && clothed)
            expect_kept++;
    }
    CHECK(res.kept.size() == expect_kept);

    FilterResult again = filter_records(res.kept, policy);
    CHECK(again.kept == res.kept);
    CHECK(again.rejected.empty());
}

TEST_CASE("answer normalization is lowercase + whitespace collapse only") {
    CHECK(normalize_answer("  Black   AND\tpink ") == "black and pink");
    CHECK(normalize_answer("black\nand\npink") == "black and pink");
    CHECK(normalize_answer("") == "");
    CHECK(normalize_answer("   ") == "");
    // nothing smarter than that: punctuation and word order survive
    CHECK(normalize_answer("black & pink") == "black & pink");
    CHECK(normalize_answer("pink and black") != normalize_answer("black and pink"));
}

TEST_CASE("clustering keeps answer order significant") {
    std::vector<ImageRecord> group = {
        rec("a", "miku", "art1", {"dress"}, "black and pink"),
        rec("b", "miku", "art1", {"dress"}, "Pink and Black"),
        rec("c", "miku", "art1", {"dress"}, "  black   and pink"),
    };
    ClusterResult res = cluster_clothes(group);
    REQUIRE(res.clusters.size() == 2);
    CHECK(res.clusters[0].member_ids == std::vector<std::string>{"a", "c"});
    CHECK(res.clusters[1].member_ids == std::vector<std::string>{"b"});
    CHECK(res.clusters[0].clothing_label == 0);
    CHECK(res.clusters[1].clothing_label == 1);
}

TEST_CASE("clustering handles identical, mixed, and missing answers") {
    std::vector<ImageRecord> all_same;
    for (int i = 0; i < 6; i++)
        all_same.push_back(rec("s" + std::to_string(i), "c", "a", {"dress"}, "red"));
    ClusterResult res = cluster_clothes(all_same);
    REQUIRE(res.clusters.size() == 1);
    CHECK(res.clusters[0].member_ids.size() == 6);

    std::vector<ImageRecord> mixed = {
        rec("1", "c", "a", {"dress"}, "a"), rec("2", "c", "a", {"dress"}, "a"),
        rec("3", "c", "a", {"dress"}, "b"), rec("4", "c", "a", {"dress"}, "a"),
        rec("5", "c", "a", {"dress"}, "c"), rec("6", "c", "a", {"dress"}, "b"),
    };
    res = cluster_clothes(mixed);
    REQUIRE(res.clusters.size() == 3);
    CHECK(res.clusters[0].member_ids == std::vector<std::string>{"1", "2", "4"});
    CHECK(res.clusters[1].member_ids == std::vector<std::string>{"3", "6"});
    CHECK(res.clusters[2].member_ids == std::vector<std::string>{"5"});
    CHECK(oracles::cluster_id_sets(res.clusters) == oracles::unionfind_clusters(mixed));

    mixed[2].vqa_answer.reset();
    res = cluster_clothes(mixed);
    REQUIRE(res.rejected.size() == 1);
    CHECK(res.rejected[0].record.id == "3");
    CHECK(res.rejected[0].reason == "missing_vqa_answer");
    REQUIRE(res.clusters.size() == 3);  // "6" is now alone in the "b" cluster

    std::vector<ImageRecord> bad = {rec("x", "c1", "a", {"t"}, "a"),
                                    rec("y", "c2", "a", {"t"}, "a")};
    CHECK_THROWS(cluster_clothes(bad));
}

TEST_CASE("grouping never crosses identity keys") {
    std::vector<ImageRecord> records = {
        rec("1", "miku", "art1", {"dress"}, "red"),
        rec("2", "rin", "art1", {"dress"}, "red"),
        rec("3", "miku", "art2", {"dress"}, "red"),
        rec("4", "miku", "art1", {"dress"}, "red"),
    };
    ClusterResult res = group_identities(records);
    REQUIRE(res.clusters.size() == 3);  // same answer, three identity keys
    for (const auto& c : res.clusters)
        for (const auto& id : c.member_ids) {
            auto it = std::find_if(records.begin(), records.end(),
                                   [&](const ImageRecord& r) { return r.id == id; });
            CHECK(it->character == c.character);
            CHECK(it->artist == c.artist);
        }
    CHECK(res.clusters[0].member_ids == std::vector<std::string>{"1", "4"});

    ClusterResult single = group_identities({rec("only", "c", "a", {"t"}, "z")});
    REQUIRE(single.clusters.size() == 1);
    CHECK(single.clusters[0].member_ids == std::vector<std::string>{"only"});
}

TEST_CASE("grouping matches the union-find oracle on random instances") {
    Rng rng(2024);
    for (int trial = 0; trial < 60; trial++) {
        std::vector<ImageRecord> records = random_instance(rng, 50);
        ClusterResult res = group_identities(records);
        CHECK(oracles::cluster_id_sets(res.clusters) == oracles::unionfind_clusters(records));

        size_t with_answer = 0;
        for (const auto& r : records)
            with_answer += r.vqa_answer.has_value();
        size_t members = 0;
        for (const auto& c : res.clusters)
            members += c.member_ids.size();
        CHECK(members == with_answer);
        CHECK(res.rejected.size() == records.size() - with_answer);
    }
}

TEST_CASE("cluster labels are first-occurrence ordered and permutation-stable") {
    Rng rng(77);
    std::vector<ImageRecord> records = random_instance(rng, 30);
    ClusterResult base = group_identities(records);
    for (const auto& c : base.clusters)
        CHECK(c.clothing_label >= 0);

    // shuffle; the partition (as id sets) must not change
    std::vector<ImageRecord> shuffled = records;
    for (size_t i = shuffled.size(); i > 1; i--)
        std::swap(shuffled[i - 1], shuffled[rng.uniform_int(i)]);
    ClusterResult perm = group_identities(shuffled);
    CHECK(oracles::cluster_id_sets(base.clusters) == oracles::cluster_id_sets(perm.clusters));
}

TEST_CASE("manifest round-trip preserves every field shape") {
    testutil::TempDir tmp("manifest");
    std::vector<ImageRecord> records;
    ImageRecord full = rec("full", "miku", "art1", {"dress", "smile"}, "black and pink");
    full.face_bbox = FaceBox{8, 4, 24, 20};
    full.mask_path = "masks/full.pgm";
    full.clothing_label = 3;
    records.push_back(full);
    records.push_back(rec("bare", "rin", "art2", {"skirt"}));  // all optionals absent

    auto path = tmp.path / "m.jsonl";
    save_manifest(path, records);
    std::vector<ImageRecord> loaded = load_manifest(path);
    CHECK(loaded == records);

    save_manifest(tmp.path / "empty.jsonl", {});
    CHECK(load_manifest(tmp.path / "empty.jsonl").empty());
}

TEST_CASE("manifest loader rejects schema violations") {
    testutil::TempDir tmp("schema");
    auto write = [&](const std::string& name, const std::string& body) {
        std::ofstream out(tmp.path / name, std::ios::binary);
        out << body;
        return tmp.path / name;
    };
    CHECK_THROWS(load_manifest(write("nohdr.jsonl", "{\"id\":\"a\"}\n")));
    CHECK_THROWS(load_manifest(write("unknown.jsonl",
        "{\"type\":\"identity_manifest\",\"version\":1,\"records\":1}\n"
        "{\"id\":\"a\",\"tags\":[],\"foo\":1}\n")));
    CHECK_THROWS(load_manifest(write("dup.jsonl",
        "{\"type\":\"identity_manifest\",\"version\":1,\"records\":2}\n"
        "{\"id\":\"a\"}\n{\"id\":\"a\"}\n")));
    CHECK_THROWS(load_manifest(write("count.jsonl",
        "{\"type\":\"identity_manifest\",\"version\":1,\"records\":5}\n"
        "{\"id\":\"a\"}\n")));
    CHECK_THROWS(load_manifest(write("bbox.jsonl",
        "{\"type\":\"identity_manifest\",\"version\":1,\"records\":1}\n"
        "{\"id\":\"a\",\"face_bbox\":[10,0,5,5]}\n")));
    CHECK_THROWS(load_manifest(write("badjson.jsonl",
        "{\"type\":\"identity_manifest\",\"version\":1,\"records\":1}\n"
        "{id:a}\n")));
    CHECK_THROWS(load_manifest(tmp.path / "missing.jsonl"));
}

TEST_CASE("emit_manifest stamps labels and fails on dangling ids") {
    testutil::TempDir tmp("emit");
    std::vector<ImageRecord> records = {
        rec("1", "miku", "art1", {"dress"}, "red"),
        rec("2", "miku", "art1", {"dress"}, "blue"),
        rec("3", "miku", "art1", {"dress"}, "red"),
        rec("unclustered", "miku", "art1", {"dress"}),
    };
    ClusterResult res = group_identities(records);
    auto path = tmp.path / "grouped.jsonl";
    emit_manifest(res.clusters, records, path);

    std::vector<ImageRecord> loaded = load_manifest(path);
    REQUIRE(loaded.size() == 3);
    CHECK(loaded[0].id == "1");
    CHECK(loaded[0].clothing_label == 0);
    CHECK(loaded[1].clothing_label == 1);
    CHECK(loaded[2].clothing_label == 0);

    std::vector<IdentityCluster> back = clusters_from_records(loaded);
    CHECK(oracles::cluster_id_sets(back) == oracles::cluster_id_sets(res.clusters));

    emit_manifest({}, records, tmp.path / "empty.jsonl");
    CHECK(load_manifest(tmp.path / "empty.jsonl").empty());

    std::vector<IdentityCluster> dangling = {{"miku", "art1", 0, {"1", "ghost"}}};
    CHECK_THROWS_WITH_AS(emit_manifest(dangling, records, tmp.path / "bad.jsonl"),
                         doctest::Contains("ghost"), std::runtime_error);
}

TEST_CASE("manifest scales to the full corpus size") {
    testutil::TempDir tmp("large");
    std::vector<ImageRecord> records;
    records.reserve(116729);
    for (size_t i = 0; i < 116729; i++) {
        ImageRecord r;
        r.id = std::to_string(i);
        r.character = "c" + std::to_string(i % 500);
        r.artist = "a" + std::to_string(i % 50);
        r.tags = {"dress"};
        r.image_path = "img.ppm";
        records.push_back(std::move(r));
    }
    auto path = tmp.path / "large.jsonl";
    save_manifest(path, records);
    CHECK(load_manifest(path).size() == 116729);
}

TEST_CASE("policy loader reads vocab files and rejects unknown keys") {
    testutil::TempDir tmp("policy");
    {
        std::ofstream vocab(tmp.path / "vocab.txt");
        vocab << "dress\nskirt\n\nshirt\n";
        std::ofstream pol(tmp.path / "policy.json");
        pol << R"({"banned_tags":["monochrome"],"clothes_vocab_file":"vocab.txt",)"
            << R"("require_single_character":false})";
    }
    FilterPolicy p = load_policy(tmp.path / "policy.json");
    CHECK(p.banned_tags == std::vector<std::string>{"monochrome"});
    CHECK(p.clothes_vocab == std::vector<std::string>{"dress", "skirt", "shirt"});
    CHECK(!p.require_single_character);

    {
        std::ofstream pol(tmp.path / "inline.json");
        pol << R"({"clothes_vocab":["kimono"]})";
    }
    CHECK(load_policy(tmp.path / "inline.json").clothes_vocab ==
          std::vector<std::string>{"kimono"});

    {
        std::ofstream pol(tmp.path / "bad.json");
        pol << R"({"banned":["x"]})";
    }
    CHECK_THROWS(load_policy(tmp.path / "bad.json"));
    {
        std::ofstream pol(tmp.path / "both.json");
        pol << R"({"clothes_vocab":["a"],"clothes_vocab_file":"vocab.txt"})";
    }
    CHECK_THROWS(load_policy(tmp.path / "both.json"));
}
