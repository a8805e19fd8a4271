#pragma once

// Self-contained procedural corpus for tests and demos: simple rendered
// figures (face disc + two-band outfit on a flat background) with masks,
// face boxes, tags, and clothing-color answers that play the role of
// offline VQA output. Includes records every filter rule should reject,
// plus one identity whose two outfits are the same color pair in opposite
// orders, so order-sensitive clustering is observable end to end.

#include <filesystem>
#include <vector>

#include "refgen/dataset.hpp"

namespace refgen {

struct DemoDataConfig {
    int image_size = 240;         // source height; must divide by 24
    int characters = 4;
    int clusters_per_identity = 2;
    int members_per_cluster = 6;
    int noise_records = 6;
    uint64_t seed = 0;
};

struct DemoDataOut {
    std::filesystem::path manifest;  // unclustered manifest with answer sidecars
    std::filesystem::path policy;
    size_t records = 0;
};

DemoDataOut generate_demo_data(const DemoDataConfig& cfg,
                               const std::filesystem::path& out_dir);

}  // namespace refgen
