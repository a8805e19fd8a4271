#include "refgen/cli.hpp"

#include <cstdlib>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "refgen/checkpoint.hpp"
#include "refgen/dataset.hpp"
#include "refgen/demo_data.hpp"
#include "refgen/diffusion.hpp"
#include "refgen/eval.hpp"
#include "refgen/sha256.hpp"

namespace refgen {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// Typed field extraction with errors that name the key, the expected type,
// and what actually arrived.
[[noreturn]] void type_fail(const std::string& key, const char* expected, const json& v) {
    throw std::runtime_error("config key \"" + key + "\": expected " + expected + ", got " +
                             v.dump());
}

double as_number(const json& v, const std::string& key) {
    if (!v.is_number())
        type_fail(key, "number", v);
    return v.get<double>();
}

int as_int(const json& v, const std::string& key) {
    if (!v.is_number_integer())
        type_fail(key, "integer", v);
    return v.get<int>();
}

uint64_t as_seed(const json& v, const std::string& key) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() &&
                                   v.get<int64_t>() < 0))
        type_fail(key, "non-negative integer", v);
    return v.get<uint64_t>();
}

std::string as_string(const json& v, const std::string& key) {
    if (!v.is_string())
        type_fail(key, "string", v);
    return v.get<std::string>();
}

void check_task(const std::string& task) {
    if (task != "recon" && task != "compose")
        throw std::runtime_error("config key \"task\": expected \"recon\" or \"compose\", got \"" +
                                 task + "\"");
}

ModelConfig model_section(const json& sec) {
    // type-check with full key paths first, then reuse the strict parser
    for (const auto& [key, val] : sec.items()) {
        std::string path = "model." + key;
        if (key == "control_weight")
            as_number(val, path);
        else if (key == "block_widths") {
            if (!val.is_array())
                type_fail(path, "integer array", val);
            for (const auto& e : val)
                as_int(e, path);
        } else if (key == "latent_channels" || key == "spatial" || key == "attention_heads" ||
                   key == "text_embed_dim" || key == "time_embed_dim" ||
                   key == "schedule_steps")
            as_int(val, path);
        else
            throw std::runtime_error("unknown config key \"" + path + "\"");
    }
    return config_from_json_string(sec.dump());
}

TrainConfig train_section(const json& sec) {
    TrainConfig tc;
    for (const auto& [key, val] : sec.items()) {
        std::string path = "train." + key;
        if (key == "p_drop")
            tc.p_drop = as_number(val, path);
        else if (key == "lambda_face")
            tc.lambda_face = as_number(val, path);
        else if (key == "lr")
            tc.lr = as_number(val, path);
        else if (key == "batch_size")
            tc.batch_size = as_int(val, path);
        else if (key == "steps")
            tc.steps = as_int(val, path);
        else if (key == "seed")
            tc.seed = as_seed(val, path);
        else if (key == "checkpoint_every")
            tc.checkpoint_every = as_int(val, path);
        else if (key == "freeze")
            tc.freeze = freeze_mode_from_string(as_string(val, path));
        else
            throw std::runtime_error("unknown config key \"" + path + "\"");
    }
    if (tc.p_drop < 0.0 || tc.p_drop > 1.0)
        throw std::runtime_error("config key \"train.p_drop\": must lie in [0,1], got " +
                                 std::to_string(tc.p_drop));
    if (tc.lambda_face < 0.0)
        throw std::runtime_error("config key \"train.lambda_face\": must be non-negative");
    if (tc.lr <= 0.0)
        throw std::runtime_error("config key \"train.lr\": must be positive");
    if (tc.steps < 1 || tc.batch_size < 1)
        throw std::runtime_error("config keys \"train.steps\"/\"train.batch_size\": must be positive");
    if (tc.checkpoint_every < 0)
        throw std::runtime_error("config key \"train.checkpoint_every\": must be non-negative");
    return tc;
}

SynthesisConfig synthesis_section(const json& sec) {
    SynthesisConfig sc;
    for (const auto& [key, val] : sec.items()) {
        std::string path = "synthesis." + key;
        if (key == "final_size")
            sc.final_size = as_int(val, path);
        else if (key == "bg_removal_p")
            sc.bg_removal_p = as_number(val, path);
        else if (key == "crop_frac")
            sc.crop_frac = as_number(val, path);
        else if (key == "flip_p")
            sc.flip_p = as_number(val, path);
        else if (key == "jitter")
            sc.jitter = as_number(val, path);
        else
            throw std::runtime_error("unknown config key \"" + path + "\"");
    }
    if (sc.final_size < 16)
        throw std::runtime_error("config key \"synthesis.final_size\": must be at least 16");
    for (auto [p, name] : {std::pair{sc.bg_removal_p, "bg_removal_p"},
                           {sc.flip_p, "flip_p"}})
        if (p < 0.0 || p > 1.0)
            throw std::runtime_error(std::string("config key \"synthesis.") + name +
                                     "\": must lie in [0,1]");
    return sc;
}

std::string quote_arg(const std::string& a) {
    if (a.find_first_of(" \t\"'") == std::string::npos && !a.empty())
        return a;
    std::string out = "'";
    for (char c : a)
        out += c == '\'' ? std::string("'\\''") : std::string(1, c);
    return out + "'";
}

}  // namespace

RunConfig run_config_from_json_string(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw std::runtime_error("config is not a JSON object");
    RunConfig cfg;
    for (const auto& [key, val] : j.items()) {
        if (key == "task") {
            cfg.task = as_string(val, "task");
            check_task(cfg.task);
        } else if (key == "model") {
            if (!val.is_object())
                type_fail("model", "object", val);
            cfg.model = model_section(val);
        } else if (key == "train") {
            if (!val.is_object())
                type_fail("train", "object", val);
            cfg.train = train_section(val);
        } else if (key == "synthesis") {
            if (!val.is_object())
                type_fail("synthesis", "object", val);
            cfg.synthesis = synthesis_section(val);
        } else {
            throw std::runtime_error("unknown config key \"" + key + "\"");
        }
    }
    return cfg;
}

std::string run_config_to_json_string(const RunConfig& cfg) {
    json j;
    j["task"] = cfg.task;
    j["model"] = json::parse(config_to_json_string(cfg.model));
    j["train"] = {{"p_drop", cfg.train.p_drop},
                  {"lambda_face", cfg.train.lambda_face},
                  {"lr", cfg.train.lr},
                  {"batch_size", cfg.train.batch_size},
                  {"steps", cfg.train.steps},
                  {"seed", cfg.train.seed},
                  {"freeze", to_string(cfg.train.freeze)},
                  {"checkpoint_every", cfg.train.checkpoint_every}};
    j["synthesis"] = {{"final_size", cfg.synthesis.final_size},
                      {"bg_removal_p", cfg.synthesis.bg_removal_p},
                      {"crop_frac", cfg.synthesis.crop_frac},
                      {"flip_p", cfg.synthesis.flip_p},
                      {"jitter", cfg.synthesis.jitter}};
    return j.dump(2) + "\n";
}

RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return run_config_from_json_string(ss.str());
    } catch (const std::exception& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

std::string iso_utc_timestamp() {
    std::time_t now = std::time(nullptr);
    if (const char* pinned = std::getenv("SOURCE_DATE_EPOCH")) {
        char* end = nullptr;
        long long v = std::strtoll(pinned, &end, 10);
        if (end && *end == '\0')
            now = (std::time_t)v;
    }
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string source_revision() {
    fs::path dir = fs::current_path();
    for (int depth = 0; depth < 10; depth++) {
        fs::path head = dir / ".git" / "HEAD";
        std::ifstream in(head);
        if (in) {
            std::string line;
            std::getline(in, line);
            if (line.rfind("ref: ", 0) == 0) {
                std::string ref = line.substr(5);
                std::ifstream ref_in(dir / ".git" / ref);
                std::string hash;
                if (ref_in && std::getline(ref_in, hash) && !hash.empty())
                    return hash;
                std::ifstream packed(dir / ".git" / "packed-refs");
                std::string packed_line;
                while (std::getline(packed, packed_line))
                    if (packed_line.size() > 41 && packed_line.substr(41) == ref)
                        return packed_line.substr(0, 40);
                return "unknown";
            }
            if (!line.empty())
                return line;  // detached head
            return "unknown";
        }
        if (!dir.has_parent_path() || dir.parent_path() == dir)
            break;
        dir = dir.parent_path();
    }
    return "unknown";
}

fs::path resolve_out_path(const std::string& out) {
    fs::path p(out);
    const char* root = std::getenv("REFGEN_OUT_ROOT");
    if (root && *root && p.is_relative())
        return fs::path(root) / p;
    return p;
}

void write_run_manifest(const fs::path& dir, const RunManifest& manifest) {
    fs::create_directories(dir);
    json j;
    j["command"] = manifest.command;
    j["config_hash"] = manifest.config_hash;
    j["root_seed"] = manifest.root_seed;
    j["input_hashes"] = manifest.input_hashes;
    j["artifacts"] = manifest.artifacts;
    j["created_at"] = manifest.created_at;
    j["revision"] = manifest.revision;
    std::ofstream out(dir / "run_manifest.json", std::ios::binary);
    if (!out)
        throw std::runtime_error("cannot write run manifest in " + dir.string());
    out << j.dump(2) << "\n";
}

RunManifest load_run_manifest(const fs::path& dir) {
    fs::path file = dir.extension() == ".json" ? dir : dir / "run_manifest.json";
    std::ifstream in(file);
    if (!in)
        throw std::runtime_error("no run manifest at " + file.string());
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw std::runtime_error("run manifest " + file.string() + " is not valid JSON");
    RunManifest m;
    try {
        m.command = j.at("command").get<std::string>();
        m.config_hash = j.at("config_hash").get<std::string>();
        m.root_seed = j.at("root_seed").get<uint64_t>();
        m.input_hashes = j.at("input_hashes").get<std::map<std::string, std::string>>();
        m.artifacts = j.at("artifacts").get<std::vector<std::string>>();
        m.created_at = j.at("created_at").get<std::string>();
        m.revision = j.at("revision").get<std::string>();
    } catch (const json::exception& e) {
        throw std::runtime_error("run manifest " + file.string() + ": " + e.what());
    }
    return m;
}

namespace {

// Shared scaffolding for every stage: effective settings -> config hash,
// inputs hashed as given, manifest written next to the outputs.
struct StageRun {
    std::string command;
    uint64_t seed = 0;
    json settings = json::object();
    RunManifest manifest;

    void input(const std::string& path) {
        manifest.input_hashes[path] = sha256_file_hex(path);
    }
    void finish(const fs::path& dir, std::vector<std::string> artifacts) {
        manifest.command = command;
        manifest.config_hash = sha256_hex(settings.dump());
        manifest.root_seed = seed;
        manifest.artifacts = std::move(artifacts);
        manifest.created_at = iso_utc_timestamp();
        manifest.revision = source_revision();
        write_run_manifest(dir, manifest);
    }
};

std::string join_command(const std::vector<std::string>& args) {
    std::string out = "refgen";
    for (const auto& a : args)
        out += " " + quote_arg(a);
    return out;
}

struct DemoDataArgs {
    std::string out;
    uint64_t seed = 0;
    DemoDataConfig cfg;
};

int cmd_demo_data(const DemoDataArgs& a, StageRun run) {
    DemoDataConfig cfg = a.cfg;
    cfg.seed = a.seed;
    fs::path out = resolve_out_path(a.out);
    run.seed = a.seed;
    run.settings = {{"stage", "demo-data"},         {"image_size", cfg.image_size},
                    {"characters", cfg.characters}, {"clusters", cfg.clusters_per_identity},
                    {"members", cfg.members_per_cluster}, {"noise", cfg.noise_records},
                    {"seed", cfg.seed}};
    DemoDataOut result = generate_demo_data(cfg, out);
    run.finish(out, {fs::relative(result.manifest, out).string(),
                     fs::relative(result.policy, out).string()});
    std::cout << "demo corpus: " << result.records << " records at " << out.string() << "\n";
    return 0;
}

struct PipelineArgs {
    std::string in, policy, out;
};

int cmd_pipeline_filter(const PipelineArgs& a, StageRun run) {
    fs::path out = resolve_out_path(a.out);
    std::vector<ImageRecord> records = load_manifest(a.in);
    FilterPolicy policy = load_policy(a.policy);
    FilterResult result = filter_records(records, policy);
    fs::create_directories(out);
    save_manifest(out / "filtered.jsonl", result.kept);
    save_rejected(out / "rejected.jsonl", result.rejected);
    run.settings = {{"stage", "pipeline filter"}};
    run.input(a.in);
    run.input(a.policy);
    run.finish(out, {"filtered.jsonl", "rejected.jsonl"});
    std::cout << "filter: kept " << result.kept.size() << ", rejected "
              << result.rejected.size() << "\n";
    return 0;
}

int cmd_pipeline_cluster(const PipelineArgs& a, StageRun run) {
    fs::path out = resolve_out_path(a.out);
    std::vector<ImageRecord> records = load_manifest(a.in);
    ClusterResult result = group_identities(records);
    fs::create_directories(out);
    emit_manifest(result.clusters, records, out / "clustered.jsonl");
    save_rejected(out / "cluster_rejected.jsonl", result.rejected);
    run.settings = {{"stage", "pipeline cluster"}};
    run.input(a.in);
    run.finish(out, {"clustered.jsonl", "cluster_rejected.jsonl"});
    std::cout << "cluster: " << result.clusters.size() << " clusters, rejected "
              << result.rejected.size() << "\n";
    return 0;
}

int cmd_pipeline_group(const PipelineArgs& a, StageRun run) {
    fs::path out = resolve_out_path(a.out);
    std::vector<ImageRecord> records = load_manifest(a.in);
    std::vector<IdentityCluster> clusters = clusters_from_records(records);
    json groups = json::array();
    for (const IdentityCluster& c : clusters)
        groups.push_back({{"character", c.character},
                          {"artist", c.artist},
                          {"clothing_label", c.clothing_label},
                          {"members", c.member_ids}});
    fs::create_directories(out);
    std::ofstream g(out / "groups.json", std::ios::binary);
    if (!g)
        throw std::runtime_error("cannot write " + (out / "groups.json").string());
    g << groups.dump(2) << "\n";
    run.settings = {{"stage", "pipeline group"}};
    run.input(a.in);
    run.finish(out, {"groups.json"});
    std::cout << "group: " << clusters.size() << " identity clusters\n";
    return 0;
}

struct SynthesizeArgs {
    std::string task, manifest, out, config, root;
    uint64_t seed = 0;
    size_t count = 0;
};

int cmd_synthesize(const SynthesizeArgs& a, StageRun run) {
    RunConfig cfg;
    if (!a.config.empty())
        cfg = load_run_config(a.config);
    std::string task = a.task.empty() ? cfg.task : a.task;
    check_task(task);

    fs::path out = resolve_out_path(a.out);
    fs::path manifest_path(a.manifest);
    fs::path root = a.root.empty() ? manifest_path.parent_path() : fs::path(a.root);
    DatasetStore store(root, load_manifest(manifest_path));
    SynthesisRun result = synthesize_set(store, cfg.synthesis, task, a.count, out, a.seed);

    run.seed = a.seed;
    run.settings = {{"stage", "synthesize"},
                    {"task", task},
                    {"count", a.count},
                    {"seed", a.seed},
                    {"synthesis", json::parse(run_config_to_json_string(cfg))["synthesis"]}};
    run.input(a.manifest);
    if (!a.config.empty())
        run.input(a.config);
    run.finish(out, {"index.jsonl", "skipped.jsonl"});
    std::cout << "synthesize: wrote " << result.written << " samples, skipped "
              << result.skipped << "\n";
    return 0;
}

struct TrainArgs {
    std::string task, config, manifest, out, init;
    uint64_t seed = 0;
    bool seed_given = false;
};

int cmd_train(const TrainArgs& a, StageRun run) {
    RunConfig cfg;
    if (!a.config.empty())
        cfg = load_run_config(a.config);
    std::string task = a.task.empty() ? cfg.task : a.task;
    check_task(task);
    TrainConfig tc = cfg.train;
    if (a.seed_given)
        tc.seed = a.seed;

    fs::path index(a.manifest);
    std::vector<SavedSample> saved = load_sample_set(index.parent_path());
    std::vector<TrainingSample> samples;
    for (auto& s : saved) {
        if (s.sample.task != task)
            throw std::runtime_error("sample " + s.dir + " is task \"" + s.sample.task +
                                     "\", training " + "\"" + task + "\"");
        samples.push_back(std::move(s.sample));
    }

    ModelBundle bundle;
    if (!a.init.empty()) {
        bundle = load_bundle(a.init);
        if (!(bundle.config == cfg.model))
            throw std::runtime_error("checkpoint " + a.init +
                                     " was built for a different model config");
    } else {
        uint64_t base_seed = Rng(tc.seed).child("base-init").seed();
        bundle = init_from_base(make_base_weights(cfg.model, base_seed), cfg.model);
    }

    fs::path out = resolve_out_path(a.out);
    cfg.task = task;
    cfg.train = tc;
    TrainResult result =
        train_loop(bundle, samples, tc, out, {{"task", task}});
    std::ofstream echo(out / "effective_config.json", std::ios::binary);
    echo << run_config_to_json_string(cfg);

    run.seed = tc.seed;
    run.settings = json::parse(run_config_to_json_string(cfg));
    run.settings["stage"] = "train";
    run.input(a.manifest);
    if (!a.config.empty())
        run.input(a.config);
    if (!a.init.empty())
        run.input(a.init);
    run.finish(out, {"ckpt_final.rdif", "effective_config.json"});
    std::cout << "train: " << result.losses.size() << " steps, first loss "
              << result.losses.front() << ", last loss " << result.losses.back()
              << ", checkpoint " << result.final_checkpoint.string() << "\n";
    return 0;
}

struct GenerateArgs {
    std::string ckpt, prompt, out = "generated", sampler = "ddim";
    std::vector<std::string> refs;
    uint64_t seed = 0;
    int steps = 10;
    int num_samples = 4;
    double control_weight = -1;  // <0: use the checkpoint's config
};

int cmd_generate(const GenerateArgs& a, StageRun run) {
    ModelBundle bundle = load_bundle(a.ckpt);
    std::vector<Image> refs;
    for (const std::string& p : a.refs)
        refs.push_back(load_ppm(p));
    SamplerConfig sc;
    sc.kind = a.sampler;
    sc.num_samples = a.num_samples;
    if (a.control_weight >= 0)
        sc.control_weight = a.control_weight;
    const std::vector<std::string> concepts = {"figure", "figure", "figure", "figure"};

    std::vector<Image> images =
        generate(bundle, refs, concepts, a.prompt, a.seed, a.steps, sc);
    fs::path out = resolve_out_path(a.out);
    fs::create_directories(out);
    std::vector<std::string> artifacts;
    for (size_t i = 0; i < images.size(); i++) {
        std::string name = "sample_" + std::to_string(i) + ".ppm";
        save_ppm(out / name, images[i]);
        artifacts.push_back(name);
    }

    run.seed = a.seed;
    run.settings = {{"stage", "generate"},   {"prompt", a.prompt},
                    {"seed", a.seed},        {"steps", a.steps},
                    {"sampler", a.sampler},  {"num_samples", a.num_samples},
                    {"control_weight", sc.control_weight ? json(*sc.control_weight)
                                                         : json(bundle.config.control_weight)}};
    run.input(a.ckpt);
    for (const std::string& p : a.refs)
        run.input(p);
    run.finish(out, std::move(artifacts));
    std::cout << "generate: " << images.size() << " samples at " << out.string() << "\n";
    return 0;
}

struct EvaluateArgs {
    std::string ckpt, grid, backend = "mock", out, refs_dir, table;
    std::string question;
    uint64_t seed = 0;
    int steps = 8;
    bool dry_run = false, reweight = false, across_runs = false;
};

int cmd_evaluate(const EvaluateArgs& a, StageRun run) {
    ModelBundle bundle = load_bundle(a.ckpt);
    EvalGrid grid = load_grid(a.grid);

    std::unique_ptr<EmbeddingBackend> embed;
    std::unique_ptr<VqaBackend> vqa;
    if (a.backend == "mock") {
        embed = std::make_unique<MockEmbeddingBackend>(32, 0);
        vqa = std::make_unique<MockVqaBackend>(0);
    } else {
        embed = std::make_unique<TableEmbeddingBackend>(a.table);
        vqa = std::make_unique<TableVqaBackend>(a.table);
    }

    fs::path refs_root(a.refs_dir);
    RefSource refs = [refs_root](const std::string& character) {
        fs::path dir = refs_root / character;
        if (!fs::is_directory(dir))
            throw std::runtime_error("no reference directory " + dir.string());
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(dir))
            if (entry.path().extension() == ".ppm")
                files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        if (files.size() != 4)
            throw std::runtime_error(dir.string() + " holds " +
                                     std::to_string(files.size()) + " ppm files, need 4");
        std::vector<Image> out;
        for (const fs::path& f : files)
            out.push_back(load_ppm(f));
        return out;
    };

    EvalOptions opt;
    if (!a.question.empty())
        opt.question = a.question;
    opt.sample_steps = a.steps;
    opt.seed = a.seed;
    opt.dry_run = a.dry_run;
    opt.reweight_diversity = a.reweight;
    opt.diversity_across_runs = a.across_runs;

    EvalReport report = run_eval_grid(grid, bundle, refs, *embed, *vqa, opt);
    fs::path out = resolve_out_path(a.out);
    write_report(out, report);
    if (!report.dry_run)
        std::cout << render_report_table(report);
    else
        std::cout << "evaluate: dry run, " << report.scheduled_images
                  << " images scheduled\n";

    run.seed = a.seed;
    run.settings = {{"stage", "evaluate"},      {"backend", a.backend},
                    {"question", opt.question}, {"steps", a.steps},
                    {"seed", a.seed},           {"dry_run", a.dry_run},
                    {"reweight", a.reweight},   {"across_runs", a.across_runs}};
    run.input(a.ckpt);
    run.input(a.grid);
    if (!a.table.empty())
        run.input(a.table);
    run.finish(out.parent_path().empty() ? fs::path(".") : out.parent_path(),
               {out.filename().string()});
    if (!report.complete) {
        std::cerr << "error: evaluation grid has missing cells, see " << out.string()
                  << "\n";
        return 1;
    }
    return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"retrieval-conditioned diffusion toolkit"};
    app.require_subcommand(1);

    DemoDataArgs demo;
    CLI::App* demo_cmd = app.add_subcommand("demo-data", "render a synthetic corpus");
    demo_cmd->add_option("--out", demo.out, "output directory")->required();
    demo_cmd->add_option("--seed", demo.seed, "root seed");
    demo_cmd->add_option("--characters", demo.cfg.characters, "identity count");
    demo_cmd->add_option("--clusters", demo.cfg.clusters_per_identity, "outfits per identity");
    demo_cmd->add_option("--members", demo.cfg.members_per_cluster, "images per outfit");
    demo_cmd->add_option("--noise", demo.cfg.noise_records, "records violating filters");
    demo_cmd->add_option("--size", demo.cfg.image_size, "source image height");

    PipelineArgs pf, pc, pg;
    CLI::App* pipeline = app.add_subcommand("pipeline", "dataset curation stages");
    pipeline->require_subcommand(1);
    CLI::App* filter_cmd = pipeline->add_subcommand("filter", "apply the tag filter policy");
    filter_cmd->add_option("--in", pf.in, "input manifest")->required();
    filter_cmd->add_option("--policy", pf.policy, "filter policy file")->required();
    filter_cmd->add_option("--out", pf.out, "output directory")->required();
    CLI::App* cluster_cmd =
        pipeline->add_subcommand("cluster", "cluster clothing identities");
    cluster_cmd->add_option("--in", pc.in, "filtered manifest")->required();
    cluster_cmd->add_option("--out", pc.out, "output directory")->required();
    CLI::App* group_cmd = pipeline->add_subcommand("group", "summarize identity clusters");
    group_cmd->add_option("--in", pg.in, "clustered manifest")->required();
    group_cmd->add_option("--out", pg.out, "output directory")->required();

    SynthesizeArgs sy;
    CLI::App* synth_cmd = app.add_subcommand("synthesize", "build training samples");
    synth_cmd->add_option("--task", sy.task, "recon or compose");
    synth_cmd->add_option("--manifest", sy.manifest, "clustered manifest")->required();
    synth_cmd->add_option("--out", sy.out, "output directory")->required();
    synth_cmd->add_option("--seed", sy.seed, "root seed");
    synth_cmd->add_option("--count", sy.count, "samples to write (0: one pass)");
    synth_cmd->add_option("--config", sy.config, "run config file");
    synth_cmd->add_option("--root", sy.root, "image root (default: manifest directory)");

    TrainArgs tr;
    CLI::App* train_cmd = app.add_subcommand("train", "train on a synthesized sample set");
    train_cmd->add_option("--task", tr.task, "recon or compose");
    train_cmd->add_option("--config", tr.config, "run config file");
    train_cmd->add_option("--manifest", tr.manifest, "sample index.jsonl")->required();
    train_cmd->add_option("--out", tr.out, "checkpoint directory")->required();
    CLI::Option* train_seed = train_cmd->add_option("--seed", tr.seed, "override train.seed");
    train_cmd->add_option("--init", tr.init, "checkpoint to continue from");

    GenerateArgs ge;
    CLI::App* gen_cmd = app.add_subcommand("generate", "sample images from a checkpoint");
    gen_cmd->add_option("--ckpt", ge.ckpt, "checkpoint file")->required();
    gen_cmd->add_option("--refs", ge.refs, "4 reference images")
        ->required()
        ->expected(4);
    gen_cmd->add_option("--prompt", ge.prompt, "prompt tags")->required();
    gen_cmd->add_option("--seed", ge.seed, "sampling seed");
    gen_cmd->add_option("--steps", ge.steps, "sampler steps");
    gen_cmd->add_option("--control-weight", ge.control_weight, "injection strength");
    gen_cmd->add_option("--sampler", ge.sampler, "ddim or ancestral");
    gen_cmd->add_option("--num-samples", ge.num_samples, "images to generate");
    gen_cmd->add_option("--out", ge.out, "output directory");

    EvaluateArgs ev;
    CLI::App* eval_cmd = app.add_subcommand("evaluate", "score a checkpoint over a grid");
    eval_cmd->add_option("--ckpt", ev.ckpt, "checkpoint file")->required();
    eval_cmd->add_option("--grid", ev.grid, "grid file")->required();
    eval_cmd->add_option("--backend", ev.backend, "mock or pretrained")
        ->check(CLI::IsMember({"mock", "pretrained"}));
    eval_cmd->add_option("--out", ev.out, "report path")->required();
    eval_cmd->add_option("--refs-dir", ev.refs_dir, "per-character reference directories");
    eval_cmd->add_option("--table", ev.table, "embedding/answer table (pretrained)");
    eval_cmd->add_option("--question", ev.question, "diversity question");
    eval_cmd->add_option("--seed", ev.seed, "root seed");
    eval_cmd->add_option("--steps", ev.steps, "sampler steps per generation");
    eval_cmd->add_flag("--dry-run", ev.dry_run, "count scheduled work only");
    eval_cmd->add_flag("--reweight", ev.reweight, "add the diversity*clip_i column");
    eval_cmd->add_flag("--across-runs", ev.across_runs, "pool diversity across runs");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        std::cerr << app.help();
        return 2;
    }

    // inter-flag requirements that CLI11 cannot express
    if (eval_cmd->parsed()) {
        if (ev.backend == "pretrained" && ev.table.empty()) {
            std::cerr << "usage error: --backend pretrained needs --table\n";
            return 2;
        }
        if (!ev.dry_run && ev.refs_dir.empty()) {
            std::cerr << "usage error: evaluation needs --refs-dir unless --dry-run\n";
            return 2;
        }
    }
    tr.seed_given = train_seed->count() > 0;

    StageRun run;
    run.command = join_command(args);
    try {
        if (demo_cmd->parsed())
            return cmd_demo_data(demo, std::move(run));
        if (filter_cmd->parsed())
            return cmd_pipeline_filter(pf, std::move(run));
        if (cluster_cmd->parsed())
            return cmd_pipeline_cluster(pc, std::move(run));
        if (group_cmd->parsed())
            return cmd_pipeline_group(pg, std::move(run));
        if (synth_cmd->parsed())
            return cmd_synthesize(sy, std::move(run));
        if (train_cmd->parsed())
            return cmd_train(tr, std::move(run));
        if (gen_cmd->parsed())
            return cmd_generate(ge, std::move(run));
        if (eval_cmd->parsed())
            return cmd_evaluate(ev, std::move(run));
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "usage error: no subcommand\n";
    return 2;
}

}  // namespace refgen
