#include "refgen/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace refgen {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'R', 'D', 'I', 'F'};
constexpr uint32_t kVersion = 1;
constexpr uint64_t kMaxHeader = 64ull << 20;

void write_u32(std::ostream& out, uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; i++)
        b[i] = (char)((v >> (8 * i)) & 0xff);
    out.write(b, 4);
}

void write_u64(std::ostream& out, uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; i++)
        b[i] = (char)((v >> (8 * i)) & 0xff);
    out.write(b, 8);
}

uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read((char*)b, 4);
    uint32_t v = 0;
    for (int i = 0; i < 4; i++)
        v |= (uint32_t)b[i] << (8 * i);
    return v;
}

uint64_t read_u64(std::istream& in) {
    unsigned char b[8];
    in.read((char*)b, 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; i++)
        v |= (uint64_t)b[i] << (8 * i);
    return v;
}

json config_to_json(const ModelConfig& cfg) {
    json j;
    j["latent_channels"] = cfg.latent_channels;
    j["spatial"] = cfg.spatial;
    j["block_widths"] = cfg.block_widths;
    j["attention_heads"] = cfg.attention_heads;
    j["text_embed_dim"] = cfg.text_embed_dim;
    j["time_embed_dim"] = cfg.time_embed_dim;
    j["control_weight"] = cfg.control_weight;
    j["schedule_steps"] = cfg.schedule_steps;
    return j;
}

ModelConfig config_from_json(const json& j) {
    if (!j.is_object())
        throw std::runtime_error("model config must be a JSON object");
    ModelConfig cfg;
    for (const auto& [key, value] : j.items()) {
        if (key == "latent_channels")
            cfg.latent_channels = value.get<int>();
        else if (key == "spatial")
            cfg.spatial = value.get<int>();
        else if (key == "block_widths")
            cfg.block_widths = value.get<std::vector<int>>();
        else if (key == "attention_heads")
            cfg.attention_heads = value.get<int>();
        else if (key == "text_embed_dim")
            cfg.text_embed_dim = value.get<int>();
        else if (key == "time_embed_dim")
            cfg.time_embed_dim = value.get<int>();
        else if (key == "control_weight")
            cfg.control_weight = value.get<double>();
        else if (key == "schedule_steps")
            cfg.schedule_steps = value.get<int>();
        else
            throw std::runtime_error("unknown model config key \"" + key + "\"");
    }
    validate_config(cfg);
    return cfg;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    json tensors = json::array();
    for (const auto& [name, t] : ckpt.weights) {
        json e;
        e["name"] = name;
        e["shape"] = t.shape();
        tensors.push_back(std::move(e));
    }
    json header;
    header["config"] = config_to_json(ckpt.config);
    header["freeze"] = to_string(ckpt.freeze);
    header["meta"] = ckpt.meta;
    header["tensors"] = std::move(tensors);
    std::string htext = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw std::runtime_error(path.string() + ": cannot write");
    out.write(kMagic, 4);
    write_u32(out, kVersion);
    write_u64(out, htext.size());
    out.write(htext.data(), (std::streamsize)htext.size());
    for (const auto& [name, t] : ckpt.weights)
        out.write((const char*)t.data(), (std::streamsize)(t.numel() * sizeof(double)));
    if (!out)
        throw std::runtime_error(path.string() + ": write failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error(path.string() + ": cannot open");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error(path.string() + ": not a checkpoint file");
    uint32_t version = read_u32(in);
    if (version != kVersion)
        throw std::runtime_error(path.string() + ": unsupported checkpoint version " +
                                 std::to_string(version));
    uint64_t hlen = read_u64(in);
    if (!in || hlen == 0 || hlen > kMaxHeader)
        throw std::runtime_error(path.string() + ": implausible header length");
    std::string htext(hlen, '\0');
    in.read(htext.data(), (std::streamsize)hlen);
    if (!in)
        throw std::runtime_error(path.string() + ": truncated header");

    json header = json::parse(htext, nullptr, false);
    if (header.is_discarded() || !header.is_object())
        throw std::runtime_error(path.string() + ": corrupt checkpoint header");

    Checkpoint ckpt;
    ckpt.config = config_from_json(header.at("config"));
    ckpt.freeze = freeze_mode_from_string(header.at("freeze").get<std::string>());
    if (header.contains("meta"))
        ckpt.meta = header.at("meta").get<std::map<std::string, std::string>>();
    for (const auto& e : header.at("tensors")) {
        std::string name = e.at("name").get<std::string>();
        std::vector<int64_t> shape = e.at("shape").get<std::vector<int64_t>>();
        Tensor t(shape);
        in.read((char*)t.data(), (std::streamsize)(t.numel() * sizeof(double)));
        if (!in)
            throw std::runtime_error(path.string() + ": truncated payload at \"" + name + "\"");
        if (!ckpt.weights.emplace(name, std::move(t)).second)
            throw std::runtime_error(path.string() + ": duplicate tensor \"" + name + "\"");
    }
    if (in.peek() != std::char_traits<char>::eof())
        throw std::runtime_error(path.string() + ": trailing bytes after payload");
    return ckpt;
}

ModelBundle load_bundle(const std::filesystem::path& path) {
    Checkpoint ckpt = load_checkpoint(path);
    return bundle_from_weights(ckpt.config, ckpt.weights, ckpt.freeze);
}

std::string config_to_json_string(const ModelConfig& cfg) { return config_to_json(cfg).dump(); }

ModelConfig config_from_json_string(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded())
        throw std::runtime_error("model config: invalid JSON");
    return config_from_json(j);
}

}  // namespace refgen
