#include "refgen/eval.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "refgen/diffusion.hpp"

namespace refgen {

namespace {

using nlohmann::json;

std::string fingerprint_hex(uint64_t fp) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)fp);
    return buf;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); i++) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    double denom = std::sqrt(na) * std::sqrt(nb);
    return denom > 0 ? dot / denom : 0.0;
}

void normalize(std::vector<double>& v) {
    double n = 0;
    for (double x : v)
        n += x * x;
    n = std::sqrt(n);
    if (n < 1e-12) {
        v.assign(v.size(), 0.0);
        v[0] = 1.0;
        return;
    }
    for (double& x : v)
        x /= n;
}

double mean_or_nan(const std::vector<double>& xs) {
    if (xs.empty())
        return std::nan("");
    double s = 0;
    for (double x : xs)
        s += x;
    return s / (double)xs.size();
}

json finite_or_null(double v) {
    if (std::isfinite(v))
        return v;
    return nullptr;
}

}  // namespace

uint64_t image_fingerprint(const Image& img) {
    uint64_t h = fnv1a64(std::string_view((const char*)img.px.data(), img.px.size()));
    uint64_t mixed = h ^ ((uint64_t)(uint32_t)img.w << 32) ^ (uint64_t)(uint32_t)img.h;
    return splitmix64(mixed);
}

MockEmbeddingBackend::MockEmbeddingBackend(int dim, uint64_t seed) : dim_(dim), seed_(seed) {
    if (dim < 1)
        throw std::invalid_argument("embedding dim must be positive");
}

std::vector<double> MockEmbeddingBackend::from_stream(Rng rng) const {
    std::vector<double> v((size_t)dim_);
    for (auto& x : v)
        x = rng.normal();
    normalize(v);
    return v;
}

std::vector<double> MockEmbeddingBackend::image_embed(const Image& img) const {
    return from_stream(Rng(seed_).child("img").child(image_fingerprint(img)));
}

std::vector<double> MockEmbeddingBackend::text_embed(const std::string& text) const {
    return from_stream(Rng(seed_).child("txt").child(fnv1a64(text)));
}

std::string MockVqaBackend::describe(const Image& img, const std::string& question) const {
    static const char* kSubjects[] = {"a girl", "a boy", "a knight", "a dancer", "a pilot"};
    static const char* kColors[] = {"red", "blue", "green", "violet", "golden", "white",
                                    "black"};
    static const char* kDetails[] = {"long hair",   "a hat",     "a scarf", "armor",
                                     "short hair",  "a ribbon",  "glasses"};
    long long tone = 0;
    for (uint8_t b : img.px)
        tone += b;
    if (!img.px.empty())
        tone /= (long long)img.px.size();

    uint64_t salt = seed_;
    uint64_t k = image_fingerprint(img) ^ fnv1a64(question) ^ splitmix64(salt);
    uint64_t a = splitmix64(k), b = splitmix64(k), c = splitmix64(k);
    std::ostringstream out;
    out << kSubjects[a % 5] << " in " << kColors[b % 7] << " clothes with "
        << kDetails[c % 7] << ", tone " << tone / 16;
    return out.str();
}

TableEmbeddingBackend::TableEmbeddingBackend(const std::filesystem::path& table) {
    std::ifstream in(table);
    if (!in)
        throw std::runtime_error("cannot open embedding table " + table.string());
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw std::runtime_error("embedding table " + table.string() + " is not valid JSON");
    if (!j.contains("dim"))
        throw std::runtime_error("embedding table " + table.string() + " lacks \"dim\"");
    dim_ = j.at("dim").get<int>();
    if (dim_ < 1)
        throw std::runtime_error("embedding table dim must be positive");

    auto load_section = [&](const char* key, std::map<std::string, std::vector<double>>& out) {
        if (!j.contains(key))
            return;
        for (const auto& [name, val] : j.at(key).items()) {
            auto v = val.get<std::vector<double>>();
            if ((int)v.size() != dim_)
                throw std::runtime_error("embedding table entry \"" + name + "\" has " +
                                         std::to_string(v.size()) + " values, expected " +
                                         std::to_string(dim_));
            normalize(v);
            out.emplace(name, std::move(v));
        }
    };
    load_section("images", images_);
    load_section("texts", texts_);
}

std::vector<double> TableEmbeddingBackend::image_embed(const Image& img) const {
    std::string key = fingerprint_hex(image_fingerprint(img));
    auto it = images_.find(key);
    if (it == images_.end())
        throw std::runtime_error("embedding table has no image entry " + key +
                                 "; export it first or use the mock backend");
    return it->second;
}

std::vector<double> TableEmbeddingBackend::text_embed(const std::string& text) const {
    auto it = texts_.find(text);
    if (it == texts_.end())
        throw std::runtime_error("embedding table has no text entry \"" + text +
                                 "\"; export it first or use the mock backend");
    return it->second;
}

TableVqaBackend::TableVqaBackend(const std::filesystem::path& table) {
    std::ifstream in(table);
    if (!in)
        throw std::runtime_error("cannot open answer table " + table.string());
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw std::runtime_error("answer table " + table.string() + " is not valid JSON");
    if (j.contains("answers"))
        for (const auto& [key, val] : j.at("answers").items())
            answers_.emplace(key, val.get<std::string>());
}

std::string TableVqaBackend::describe(const Image& img, const std::string& question) const {
    std::string key = fingerprint_hex(image_fingerprint(img)) + "|" + question;
    auto it = answers_.find(key);
    if (it == answers_.end())
        throw std::runtime_error("answer table has no entry " + key);
    return it->second;
}

double clip_i(const Image& gen, const std::vector<Image>& refs,
              const EmbeddingBackend& backend) {
    if (refs.empty())
        throw std::invalid_argument("clip_i needs at least one reference image");
    std::vector<double> g = backend.image_embed(gen);
    double sum = 0;
    for (const Image& r : refs)
        sum += cosine(g, backend.image_embed(r));
    return sum / (double)refs.size();
}

double clip_t(const Image& gen, const std::string& prompt, const EmbeddingBackend& backend) {
    if (prompt.empty())
        throw std::invalid_argument("clip_t needs a non-empty prompt");
    return cosine(backend.image_embed(gen), backend.text_embed(prompt));
}

double vqa_diversity(const GenerationBatch& batch, const VqaBackend& vqa,
                     const EmbeddingBackend& embed, const std::string& question) {
    size_t n = batch.images.size();
    if (n < 2)
        throw std::invalid_argument("diversity needs at least 2 images, got " +
                                    std::to_string(n));

    std::vector<std::string> answers;
    if (batch.answers) {
        if (batch.answers->size() != n)
            throw std::invalid_argument("batch carries " +
                                        std::to_string(batch.answers->size()) +
                                        " answers for " + std::to_string(n) + " images");
        answers = *batch.answers;
    } else {
        std::string failures;
        int failed = 0;
        for (size_t i = 0; i < n; i++) {
            try {
                answers.push_back(vqa.describe(batch.images[i], question));
            } catch (const std::exception& e) {
                failed++;
                failures += (failures.empty() ? "" : "; ") + ("image " + std::to_string(i) +
                                                              ": " + e.what());
                answers.emplace_back();
            }
        }
        if (failed)
            throw std::runtime_error("vqa backend failed on " + std::to_string(failed) +
                                     " of " + std::to_string(n) + " images: " + failures);
    }

    std::vector<std::vector<double>> embs;
    for (const std::string& a : answers)
        embs.push_back(embed.text_embed(a));
    double total = 0;
    size_t pairs = 0;
    for (size_t a = 0; a < n; a++)
        for (size_t b = a + 1; b < n; b++) {
            total += 1.0 - cosine(embs[a], embs[b]);
            pairs++;
        }
    return total / (double)pairs;
}

void validate_grid(const EvalGrid& grid) {
    if (grid.characters.empty())
        throw std::invalid_argument("grid needs at least one character");
    if (grid.prompts.empty())
        throw std::invalid_argument("grid needs at least one prompt");
    if (grid.runs_per_prompt < 1)
        throw std::invalid_argument("runs_per_prompt must be positive");
    if (grid.samples_per_run < 2)
        throw std::invalid_argument("samples_per_run must be at least 2 for diversity");
}

EvalGrid grid_from_json_string(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw std::runtime_error("grid is not a JSON object");
    EvalGrid grid;
    for (const auto& [key, val] : j.items()) {
        if (key == "characters")
            grid.characters = val.get<std::vector<std::string>>();
        else if (key == "prompts")
            grid.prompts = val.get<std::vector<std::string>>();
        else if (key == "runs_per_prompt")
            grid.runs_per_prompt = val.get<int>();
        else if (key == "samples_per_run")
            grid.samples_per_run = val.get<int>();
        else
            throw std::runtime_error("unknown grid key \"" + key + "\"");
    }
    validate_grid(grid);
    return grid;
}

EvalGrid load_grid(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("cannot open grid file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return grid_from_json_string(ss.str());
}

EvalReport run_eval_grid(const EvalGrid& grid, const ModelBundle& bundle,
                         const RefSource& refs, const EmbeddingBackend& embed,
                         const VqaBackend& vqa, const EvalOptions& opt) {
    validate_grid(grid);
    EvalReport report;
    report.grid = grid;
    report.question = opt.question;
    report.diversity_scope = opt.diversity_across_runs ? "across_runs" : "per_run";
    report.dry_run = opt.dry_run;
    report.scheduled_images = grid.total_images();
    if (opt.dry_run)
        return report;

    Rng root = Rng(opt.seed).child("eval");
    const std::vector<std::string> kConcepts = {"figure", "figure", "figure", "figure"};

    // (character index, prompt index) -> pooled images for across-run scope
    std::map<std::pair<size_t, size_t>, std::vector<Image>> pooled;

    for (size_t ci = 0; ci < grid.characters.size(); ci++) {
        const std::string& character = grid.characters[ci];
        std::vector<Image> ref_imgs;
        std::string ref_error;
        try {
            ref_imgs = refs(character);
        } catch (const std::exception& e) {
            ref_error = "references for \"" + character + "\": " + e.what();
        }

        for (size_t pi = 0; pi < grid.prompts.size(); pi++) {
            for (int run = 0; run < grid.runs_per_prompt; run++) {
                EvalCell cell;
                cell.character = character;
                cell.prompt = (int)pi;
                cell.run = run;
                cell.seed =
                    root.child(character).child((uint64_t)pi).child((uint64_t)run).seed();
                if (!ref_error.empty()) {
                    cell.error = ref_error;
                } else {
                    try {
                        SamplerConfig sc;
                        sc.kind = opt.sampler;
                        sc.num_samples = grid.samples_per_run;
                        std::vector<Image> images =
                            generate(bundle, ref_imgs, kConcepts, grid.prompts[pi],
                                     cell.seed, opt.sample_steps, sc);
                        double ci_sum = 0, ct_sum = 0;
                        for (const Image& img : images) {
                            ci_sum += clip_i(img, ref_imgs, embed);
                            ct_sum += clip_t(img, grid.prompts[pi], embed);
                        }
                        cell.clip_i = ci_sum / (double)images.size();
                        cell.clip_t = ct_sum / (double)images.size();
                        GenerationBatch batch;
                        batch.images = images;
                        batch.conditioning = {character, (int)pi, cell.seed};
                        cell.diversity = vqa_diversity(batch, vqa, embed, opt.question);
                        if (opt.diversity_across_runs) {
                            auto& pool = pooled[{ci, pi}];
                            pool.insert(pool.end(), images.begin(), images.end());
                        }
                    } catch (const std::exception& e) {
                        cell.error = e.what();
                    }
                }
                if (!cell.ok())
                    report.complete = false;
                report.cells.push_back(std::move(cell));
            }
        }
    }

    for (size_t pi = 0; pi < grid.prompts.size(); pi++) {
        std::vector<double> cis, cts, divs;
        for (const EvalCell& cell : report.cells) {
            if (cell.prompt != (int)pi || !cell.ok())
                continue;
            cis.push_back(cell.clip_i);
            cts.push_back(cell.clip_t);
            if (!opt.diversity_across_runs)
                divs.push_back(cell.diversity);
        }
        if (opt.diversity_across_runs) {
            for (size_t ci = 0; ci < grid.characters.size(); ci++) {
                auto it = pooled.find({ci, pi});
                if (it == pooled.end() || it->second.size() < 2)
                    continue;
                GenerationBatch batch;
                batch.images = it->second;
                batch.conditioning = {grid.characters[ci], (int)pi, opt.seed};
                divs.push_back(vqa_diversity(batch, vqa, embed, opt.question));
            }
        }
        report.clip_i_by_prompt.push_back(mean_or_nan(cis));
        report.clip_t_by_prompt.push_back(mean_or_nan(cts));
        report.diversity_by_prompt.push_back(mean_or_nan(divs));
        if (opt.reweight_diversity)
            report.reweighted_by_prompt.push_back(report.diversity_by_prompt.back() *
                                                  report.clip_i_by_prompt.back());
    }

    auto finite_mean = [](const std::vector<double>& xs) {
        std::vector<double> good;
        for (double x : xs)
            if (std::isfinite(x))
                good.push_back(x);
        return mean_or_nan(good);
    };
    report.clip_i_avg = finite_mean(report.clip_i_by_prompt);
    report.clip_t_avg = finite_mean(report.clip_t_by_prompt);
    report.diversity_avg = finite_mean(report.diversity_by_prompt);
    if (opt.reweight_diversity)
        report.reweighted_avg = finite_mean(report.reweighted_by_prompt);
    return report;
}

std::string report_to_json_string(const EvalReport& report) {
    json j;
    j["grid"] = {{"characters", report.grid.characters},
                 {"prompts", report.grid.prompts},
                 {"runs_per_prompt", report.grid.runs_per_prompt},
                 {"samples_per_run", report.grid.samples_per_run}};
    j["question"] = report.question;
    j["diversity_scope"] = report.diversity_scope;
    j["dry_run"] = report.dry_run;
    j["scheduled_images"] = report.scheduled_images;
    j["complete"] = report.complete;

    j["cells"] = json::array();
    for (const EvalCell& cell : report.cells) {
        json c = {{"character", cell.character},
                  {"prompt", cell.prompt},
                  {"run", cell.run},
                  {"seed", cell.seed}};
        if (cell.ok()) {
            c["clip_i"] = cell.clip_i;
            c["clip_t"] = cell.clip_t;
            c["diversity"] = cell.diversity;
        } else {
            c["error"] = cell.error;
        }
        j["cells"].push_back(std::move(c));
    }

    auto column = [](const std::vector<double>& v) {
        json arr = json::array();
        for (double x : v)
            arr.push_back(finite_or_null(x));
        return arr;
    };
    if (!report.dry_run) {
        j["aggregates"] = {{"clip_i", {{"by_prompt", column(report.clip_i_by_prompt)},
                                       {"avg", finite_or_null(report.clip_i_avg)}}},
                           {"clip_t", {{"by_prompt", column(report.clip_t_by_prompt)},
                                       {"avg", finite_or_null(report.clip_t_avg)}}},
                           {"diversity", {{"by_prompt", column(report.diversity_by_prompt)},
                                          {"avg", finite_or_null(report.diversity_avg)}}}};
        if (!report.reweighted_by_prompt.empty())
            j["aggregates"]["diversity_reweighted"] = {
                {"by_prompt", column(report.reweighted_by_prompt)},
                {"avg", finite_or_null(report.reweighted_avg)},
                {"note", "diversity times clip_i; a high value can still mean "
                         "messy generations, never rank by it alone"}};
    }
    return j.dump(2) + "\n";
}

void write_report(const std::filesystem::path& path, const EvalReport& report) {
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("cannot write report " + path.string());
    out << report_to_json_string(report);
}

std::string render_report_table(const EvalReport& report) {
    size_t np = report.grid.prompts.size();
    std::ostringstream out;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%-14s", "metric");
    out << buf;
    for (size_t p = 0; p < np; p++) {
        std::snprintf(buf, sizeof buf, "%9s", ("P" + std::to_string(p + 1)).c_str());
        out << buf;
    }
    std::snprintf(buf, sizeof buf, "%9s", "Avg");
    out << buf << "\n";

    auto row = [&](const char* name, const std::vector<double>& vals, double avg) {
        std::snprintf(buf, sizeof buf, "%-14s", name);
        out << buf;
        for (size_t p = 0; p < np; p++) {
            double v = p < vals.size() ? vals[p] : std::nan("");
            if (std::isfinite(v))
                std::snprintf(buf, sizeof buf, "%9.2f", 100.0 * v);
            else
                std::snprintf(buf, sizeof buf, "%9s", "--");
            out << buf;
        }
        if (std::isfinite(avg))
            std::snprintf(buf, sizeof buf, "%9.2f", 100.0 * avg);
        else
            std::snprintf(buf, sizeof buf, "%9s", "--");
        out << buf << "\n";
    };
    row("CLIP-I", report.clip_i_by_prompt, report.clip_i_avg);
    row("CLIP-T", report.clip_t_by_prompt, report.clip_t_avg);
    row("VQA-div", report.diversity_by_prompt, report.diversity_avg);
    if (!report.reweighted_by_prompt.empty())
        row("VQA-div*I", report.reweighted_by_prompt, report.reweighted_avg);
    return out.str();
}

}  // namespace refgen
