#pragma once

// Dataset curation: manifest IO, tag filtering, and clothing-identity
// clustering from sidecar VQA answers.
//
// Manifests are JSON-lines: a header line {"type":"identity_manifest",
// "version":1,"records":N} followed by one record object per line. Field
// names match ImageRecord. Unknown keys are rejected so schema drift fails
// loudly instead of silently dropping data.

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace refgen {

struct FaceBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open pixel box

    bool operator==(const FaceBox&) const = default;
};

struct ImageRecord {
    std::string id;
    std::string character;  // comma-separated names when more than one
    std::string artist;
    std::vector<std::string> tags;
    std::string image_path;
    std::optional<FaceBox> face_bbox;
    std::optional<std::string> mask_path;
    std::optional<std::string> vqa_answer;
    std::optional<int> clothing_label;  // set by the cluster/group stages

    bool operator==(const ImageRecord&) const = default;
};

struct FilterPolicy {
    std::vector<std::string> banned_tags;
    std::vector<std::string> clothes_vocab;  // empty disables the clothes-tag check
    bool require_single_character = true;
};

struct IdentityCluster {
    std::string character;
    std::string artist;
    int clothing_label = 0;  // first-occurrence order within the (character, artist) group
    std::vector<std::string> member_ids;
};

struct RejectedRecord {
    ImageRecord record;
    std::string reason;  // banned_tag | multiple_characters | no_clothes_tag |
                         // malformed | missing_vqa_answer
};

struct FilterResult {
    std::vector<ImageRecord> kept;
    std::vector<RejectedRecord> rejected;
};

struct ClusterResult {
    std::vector<IdentityCluster> clusters;
    std::vector<RejectedRecord> rejected;
};

// Keeps records with no banned tag, exactly one character name (when
// required), and at least one clothes-vocabulary tag; order preserved.
// Records missing id or tags are rejected as malformed, not fatal.
FilterResult filter_records(const std::vector<ImageRecord>& records,
                            const FilterPolicy& policy);

// Lowercase + collapse runs of whitespace; deliberately nothing else, so
// token order stays significant ("black and pink" != "pink and black").
std::string normalize_answer(std::string_view s);

// Clusters records sharing one (character, artist) by exact normalized
// answer equality. Records without an answer land in the rejected set.
ClusterResult cluster_clothes(const std::vector<ImageRecord>& group);

// Partition by (character, artist) in first-occurrence order, then cluster
// each partition.
ClusterResult group_identities(const std::vector<ImageRecord>& records);

// Writes the records referenced by `clusters`, each stamped with its
// clothing_label, in input record order. Dangling member ids are fatal.
void emit_manifest(const std::vector<IdentityCluster>& clusters,
                   const std::vector<ImageRecord>& records,
                   const std::filesystem::path& out_path);

std::vector<ImageRecord> load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path,
                   const std::vector<ImageRecord>& records);
// Rejected sets carry an extra reject_reason field per line.
void save_rejected(const std::filesystem::path& path,
                   const std::vector<RejectedRecord>& rejected);

// Policy file: JSON object with banned_tags, require_single_character, and
// either an inline clothes_vocab array or a clothes_vocab_file path (one
// tag per line, resolved relative to the policy file).
FilterPolicy load_policy(const std::filesystem::path& path);

// Rebuilds clusters from the clothing_label fields of a clustered manifest.
std::vector<IdentityCluster> clusters_from_records(const std::vector<ImageRecord>& records);

}  // namespace refgen
