#include "refgen/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

namespace refgen {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::filesystem::path& p, const std::string& what) {
    throw std::runtime_error(p.string() + ": " + what);
}

[[noreturn]] void fail_line(const std::filesystem::path& p, size_t line, const std::string& what) {
    fail(p, "line " + std::to_string(line) + ": " + what);
}

const std::unordered_set<std::string> kRecordKeys = {
    "id",        "character", "artist",     "tags",          "image_path",
    "face_bbox", "mask_path", "vqa_answer", "clothing_label"};

json record_to_json(const ImageRecord& r) {
    json j;
    j["id"] = r.id;
    j["character"] = r.character;
    j["artist"] = r.artist;
    j["tags"] = r.tags;
    j["image_path"] = r.image_path;
    if (r.face_bbox)
        j["face_bbox"] = {r.face_bbox->x0, r.face_bbox->y0, r.face_bbox->x1, r.face_bbox->y1};
    if (r.mask_path)
        j["mask_path"] = *r.mask_path;
    if (r.vqa_answer)
        j["vqa_answer"] = *r.vqa_answer;
    if (r.clothing_label)
        j["clothing_label"] = *r.clothing_label;
    return j;
}

ImageRecord record_from_json(const json& j, const std::filesystem::path& p, size_t line,
                             bool allow_reason) {
    if (!j.is_object())
        fail_line(p, line, "record is not an object");
    for (const auto& [key, _] : j.items())
        if (!kRecordKeys.count(key) && !(allow_reason && key == "reject_reason"))
            fail_line(p, line, "unknown field \"" + key + "\"");
    ImageRecord r;
    r.id = j.value("id", "");
    r.character = j.value("character", "");
    r.artist = j.value("artist", "");
    if (j.contains("tags")) {
        if (!j["tags"].is_array())
            fail_line(p, line, "tags must be an array of strings");
        for (const auto& t : j["tags"]) {
            if (!t.is_string())
                fail_line(p, line, "tags must be an array of strings");
            r.tags.push_back(t.get<std::string>());
        }
    }
    r.image_path = j.value("image_path", "");
    if (j.contains("face_bbox")) {
        const auto& b = j["face_bbox"];
        if (!b.is_array() || b.size() != 4 || !b[0].is_number_integer())
            fail_line(p, line, "face_bbox must be [x0,y0,x1,y1] integers");
        FaceBox fb{b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()};
        if (fb.x0 < 0 || fb.y0 < 0 || fb.x0 >= fb.x1 || fb.y0 >= fb.y1)
            fail_line(p, line, "face_bbox must satisfy 0 <= x0 < x1, 0 <= y0 < y1");
        r.face_bbox = fb;
    }
    if (j.contains("mask_path"))
        r.mask_path = j["mask_path"].get<std::string>();
    if (j.contains("vqa_answer"))
        r.vqa_answer = j["vqa_answer"].get<std::string>();
    if (j.contains("clothing_label"))
        r.clothing_label = j["clothing_label"].get<int>();
    return r;
}

json parse_line(const std::string& text, const std::filesystem::path& p, size_t line) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded())
        fail_line(p, line, "invalid JSON");
    return j;
}

std::ofstream open_out(const std::filesystem::path& p) {
    if (p.has_parent_path())
        std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out)
        fail(p, "cannot write");
    return out;
}

void write_jsonl(const std::filesystem::path& p, const std::vector<json>& lines,
                 size_t record_count) {
    auto out = open_out(p);
    json header;
    header["type"] = "identity_manifest";
    header["version"] = 1;
    header["records"] = record_count;
    out << header.dump() << "\n";
    for (const auto& l : lines)
        out << l.dump() << "\n";
    if (!out)
        fail(p, "write failed");
}

bool single_character(const std::string& c) {
    return !c.empty() && c.find(',') == std::string::npos;
}

}  // namespace

FilterResult filter_records(const std::vector<ImageRecord>& records,
                            const FilterPolicy& policy) {
    std::unordered_set<std::string> banned(policy.banned_tags.begin(), policy.banned_tags.end());
    std::unordered_set<std::string> clothes(policy.clothes_vocab.begin(),
                                            policy.clothes_vocab.end());
    FilterResult res;
    for (const auto& r : records) {
        if (r.id.empty() || r.tags.empty()) {
            res.rejected.push_back({r, "malformed"});
            continue;
        }
        auto has_banned = std::find_if(r.tags.begin(), r.tags.end(),
                                       [&](const std::string& t) { return banned.count(t); });
        if (has_banned != r.tags.end()) {
            res.rejected.push_back({r, "banned_tag"});
            continue;
        }
        if (policy.require_single_character && !single_character(r.character)) {
            res.rejected.push_back({r, "multiple_characters"});
            continue;
        }
        if (!clothes.empty()) {
            auto has_clothes = std::find_if(r.tags.begin(), r.tags.end(),
                                            [&](const std::string& t) { return clothes.count(t); });
            if (has_clothes == r.tags.end()) {
                res.rejected.push_back({r, "no_clothes_tag"});
                continue;
            }
        }
        res.kept.push_back(r);
    }
    return res;
}

std::string normalize_answer(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    bool pending_space = false;
    for (char ch : s) {
        if (std::isspace((unsigned char)ch)) {
            pending_space = !out.empty();
        } else {
            if (pending_space) {
                out.push_back(' ');
                pending_space = false;
            }
            out.push_back((char)std::tolower((unsigned char)ch));
        }
    }
    return out;
}

ClusterResult cluster_clothes(const std::vector<ImageRecord>& group) {
    for (size_t i = 1; i < group.size(); i++)
        if (group[i].character != group[0].character || group[i].artist != group[0].artist)
            throw std::invalid_argument(
                "cluster_clothes requires one (character, artist) group; got \"" +
                group[i].character + "\"/\"" + group[i].artist + "\" next to \"" +
                group[0].character + "\"/\"" + group[0].artist + "\"");

    ClusterResult res;
    std::vector<std::string> cluster_answers;  // representative per cluster, in id order
    for (const auto& r : group) {
        if (!r.vqa_answer) {
            res.rejected.push_back({r, "missing_vqa_answer"});
            continue;
        }
        std::string norm = normalize_answer(*r.vqa_answer);
        size_t k = 0;
        while (k < cluster_answers.size() && cluster_answers[k] != norm)
            k++;
        if (k == cluster_answers.size()) {
            cluster_answers.push_back(norm);
            res.clusters.push_back({r.character, r.artist, (int)k, {}});
        }
        res.clusters[k].member_ids.push_back(r.id);
    }
    return res;
}

ClusterResult group_identities(const std::vector<ImageRecord>& records) {
    std::vector<std::pair<std::string, std::string>> order;
    std::unordered_map<std::string, std::vector<ImageRecord>> parts;
    for (const auto& r : records) {
        std::string key = r.character + "\x1f" + r.artist;
        auto [it, fresh] = parts.try_emplace(key);
        if (fresh)
            order.emplace_back(r.character, r.artist);
        it->second.push_back(r);
    }
    ClusterResult res;
    for (const auto& [character, artist] : order) {
        ClusterResult part = cluster_clothes(parts[character + "\x1f" + artist]);
        std::move(part.clusters.begin(), part.clusters.end(), std::back_inserter(res.clusters));
        std::move(part.rejected.begin(), part.rejected.end(), std::back_inserter(res.rejected));
    }
    return res;
}

void emit_manifest(const std::vector<IdentityCluster>& clusters,
                   const std::vector<ImageRecord>& records,
                   const std::filesystem::path& out_path) {
    std::unordered_map<std::string, size_t> index;
    for (size_t i = 0; i < records.size(); i++)
        index.emplace(records[i].id, i);

    std::vector<std::optional<int>> label(records.size());
    std::vector<std::string> dangling;
    for (const auto& c : clusters)
        for (const auto& id : c.member_ids) {
            auto it = index.find(id);
            if (it == index.end())
                dangling.push_back(id);
            else
                label[it->second] = c.clothing_label;
        }
    if (!dangling.empty()) {
        std::string msg = "dangling member ids:";
        for (const auto& id : dangling)
            msg += " " + id;
        fail(out_path, msg);
    }

    std::vector<json> lines;
    size_t count = 0;
    for (size_t i = 0; i < records.size(); i++) {
        if (!label[i])
            continue;
        ImageRecord r = records[i];
        r.clothing_label = label[i];
        lines.push_back(record_to_json(r));
        count++;
    }
    write_jsonl(out_path, lines, count);
}

std::vector<ImageRecord> load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        fail(path, "cannot open");
    std::string text;
    size_t line_no = 0;
    if (!std::getline(in, text))
        fail(path, "empty file, expected manifest header");
    line_no++;
    json header = parse_line(text, path, line_no);
    if (header.value("type", "") != "identity_manifest" || header.value("version", 0) != 1)
        fail_line(path, line_no, "not an identity_manifest version 1 header");
    if (!header.contains("records") || !header["records"].is_number_unsigned())
        fail_line(path, line_no, "header missing record count");
    size_t expected = header["records"].get<size_t>();

    std::vector<ImageRecord> records;
    std::unordered_set<std::string> ids;
    while (std::getline(in, text)) {
        line_no++;
        if (text.empty())
            continue;
        ImageRecord r = record_from_json(parse_line(text, path, line_no), path, line_no, true);
        if (!r.id.empty() && !ids.insert(r.id).second)
            fail_line(path, line_no, "duplicate id \"" + r.id + "\"");
        records.push_back(std::move(r));
    }
    if (records.size() != expected)
        fail(path, "header promises " + std::to_string(expected) + " records, found " +
                       std::to_string(records.size()));
    return records;
}

void save_manifest(const std::filesystem::path& path, const std::vector<ImageRecord>& records) {
    std::vector<json> lines;
    for (const auto& r : records)
        lines.push_back(record_to_json(r));
    write_jsonl(path, lines, records.size());
}

void save_rejected(const std::filesystem::path& path,
                   const std::vector<RejectedRecord>& rejected) {
    std::vector<json> lines;
    for (const auto& r : rejected) {
        json j = record_to_json(r.record);
        j["reject_reason"] = r.reason;
        lines.push_back(j);
    }
    write_jsonl(path, lines, rejected.size());
}

FilterPolicy load_policy(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        fail(path, "cannot open");
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        fail(path, "invalid JSON policy");
    for (const auto& [key, _] : j.items())
        if (key != "banned_tags" && key != "clothes_vocab" && key != "clothes_vocab_file" &&
            key != "require_single_character")
            fail(path, "unknown policy key \"" + key + "\"");
    if (j.contains("clothes_vocab") && j.contains("clothes_vocab_file"))
        fail(path, "clothes_vocab and clothes_vocab_file are mutually exclusive");

    FilterPolicy p;
    for (const auto& t : j.value("banned_tags", json::array()))
        p.banned_tags.push_back(t.get<std::string>());
    p.require_single_character = j.value("require_single_character", true);
    if (j.contains("clothes_vocab")) {
        for (const auto& t : j["clothes_vocab"])
            p.clothes_vocab.push_back(t.get<std::string>());
    } else if (j.contains("clothes_vocab_file")) {
        std::filesystem::path vocab =
            path.parent_path() / j["clothes_vocab_file"].get<std::string>();
        std::ifstream vin(vocab, std::ios::binary);
        if (!vin)
            fail(vocab, "cannot open clothes vocabulary");
        std::string tag;
        while (std::getline(vin, tag)) {
            while (!tag.empty() && (tag.back() == '\r' || tag.back() == '\n'))
                tag.pop_back();
            if (!tag.empty())
                p.clothes_vocab.push_back(tag);
        }
    }
    return p;
}

std::vector<IdentityCluster> clusters_from_records(const std::vector<ImageRecord>& records) {
    std::vector<IdentityCluster> clusters;
    std::unordered_map<std::string, size_t> index;
    for (const auto& r : records) {
        if (!r.clothing_label)
            throw std::runtime_error("record \"" + r.id +
                                     "\" has no clothing_label; run the group stage first");
        std::string key =
            r.character + "\x1f" + r.artist + "\x1f" + std::to_string(*r.clothing_label);
        auto [it, fresh] = index.try_emplace(key, clusters.size());
        if (fresh)
            clusters.push_back({r.character, r.artist, *r.clothing_label, {}});
        clusters[it->second].member_ids.push_back(r.id);
    }
    return clusters;
}

}  // namespace refgen
