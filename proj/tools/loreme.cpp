// loreme: checkpoint merging CLI.
//
// Subcommands:
//   merge      combine checkpoints (lore_direct, lore_ties, average, dare, ties)
//   decompose  recover an approximate base and per-model task vectors
//   analyze    singular-value spectra of a task vector (CSV + JSON)
//   bench      synthetic recovery benchmark from TOML spec + recipes
//
// Exit codes: 0 success, 1 user/validation error, 2 numerical failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include "lore/bench.hpp"
#include "lore/errors.hpp"
#include "lore/merge.hpp"
#include "lore/safetensors.hpp"
#include "lore/solver.hpp"
#include "lore/spectrum.hpp"
#include "lore/tensor.hpp"
#include "lore/toml.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

bool g_verbose = false;

void log_step(const std::string& event, std::initializer_list<std::pair<std::string, std::string>> fields) {
    if (g_verbose) {
        ordered_json line{{"event", event}};
        for (const auto& [k, v] : fields) line[k] = v;
        std::cerr << line.dump() << "\n";
    } else {
        std::cerr << event;
        for (const auto& [k, v] : fields) std::cerr << " " << k << "=" << v;
        std::cerr << "\n";
    }
}

std::string sha256_file(const fs::path& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) throw lore::IoError("cannot open for digest: " + path.string());
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    char buf[1 << 16];
    while (file.read(buf, sizeof buf) || file.gcount() > 0)
        EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(file.gcount()));
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

/// Writes through a temp file and renames into place; removes the temp
/// file if anything throws, so failed runs leave no partial outputs.
class AtomicFileWriter {
  public:
    explicit AtomicFileWriter(fs::path target)
        : target_(std::move(target)), temp_(target_.string() + ".tmp") {}
    ~AtomicFileWriter() {
        if (!committed_) {
            std::error_code ec;
            fs::remove(temp_, ec);
        }
    }
    const fs::path& temp_path() const { return temp_; }
    void commit() {
        fs::rename(temp_, target_);
        committed_ = true;
    }

  private:
    fs::path target_;
    fs::path temp_;
    bool committed_ = false;
};

lore::toml::Document parse_toml_file(const fs::path& path) {
    std::ifstream file(path);
    if (!file) throw lore::IoError("cannot open: " + path.string());
    std::stringstream buffer;
    buffer << file.rdbuf();
    return lore::toml::parse(buffer.str());
}

std::vector<lore::ParameterSet> load_models(const std::vector<std::string>& paths) {
    std::vector<lore::ParameterSet> models;
    models.reserve(paths.size());
    for (const auto& path : paths) {
        models.push_back(lore::load_checkpoint(path));
        log_step("loaded", {{"path", path},
                            {"tensors", std::to_string(models.back().tensors.size())}});
    }
    return models;
}

ordered_json solver_config_json(const lore::SolverConfig& s) {
    return {{"mu", s.mu},
            {"max_iters", s.max_iters},
            {"rel_tol", s.rel_tol},
            {"rank_fraction", s.rank_fraction},
            {"apply_rank_cap", s.apply_rank_cap}};
}

ordered_json traces_json(const std::map<std::string, lore::SolverTrace>& traces) {
    ordered_json out = ordered_json::object();
    for (const auto& [name, trace] : traces)
        out[name] = {{"iterations", trace.iterations_run},
                     {"converged", trace.converged},
                     {"objective", trace.objective_per_iteration}};
    return out;
}

void write_manifest(const fs::path& path, ordered_json manifest) {
    AtomicFileWriter writer(path);
    {
        std::ofstream out(writer.temp_path());
        out << manifest.dump(2) << "\n";
        if (!out) throw lore::IoError("write failed: " + path.string());
    }
    writer.commit();
    log_step("manifest", {{"path", path.string()}});
}

// ---------------------------------------------------------------- merge

struct MergeFlags {
    std::string recipe_path;
    std::string method, base, output;
    std::vector<std::string> models;
    double lambda = 1.0, mu = 0.01, rel_tol = 1e-8, rank_fraction = 0.2;
    double dare_drop_prob = 0.5, ties_top_fraction = 0.2;
    int max_iters = 100;
    std::uint64_t seed = 0;
    bool apply_rank_cap = true;
};

lore::MergeRecipe recipe_from_flags(const MergeFlags& flags, const CLI::App* cmd) {
    lore::MergeRecipe recipe;
    if (!flags.recipe_path.empty()) {
        const auto doc = parse_toml_file(flags.recipe_path);
        recipe = lore::merge_recipe_from_toml(doc.root);
    }
    // inline flags override recipe-file values
    auto given = [&](const std::string& name) { return cmd->count(name) > 0; };
    if (given("--method")) recipe.method = lore::parse_merge_method(flags.method);
    if (given("--lambda")) recipe.lambda = flags.lambda;
    if (given("--mu")) recipe.solver.mu = flags.mu;
    if (given("--max-iters")) recipe.solver.max_iters = flags.max_iters;
    if (given("--rel-tol")) recipe.solver.rel_tol = flags.rel_tol;
    if (given("--rank-fraction")) recipe.solver.rank_fraction = flags.rank_fraction;
    if (given("--apply-rank-cap")) recipe.solver.apply_rank_cap = flags.apply_rank_cap;
    if (given("--dare-drop-prob")) recipe.dare_drop_prob = flags.dare_drop_prob;
    if (given("--ties-top-fraction")) recipe.ties_top_fraction = flags.ties_top_fraction;
    if (given("--seed")) recipe.seed = flags.seed;
    if (given("--base")) recipe.base_path = flags.base;
    if (!flags.models.empty()) recipe.model_paths = flags.models;
    if (given("--output")) recipe.output_path = flags.output;
    return recipe;
}

int run_merge(const lore::MergeRecipe& recipe) {
    recipe.validate(/*require_paths=*/true);
    const auto t0 = std::chrono::steady_clock::now();

    const auto models = load_models(recipe.model_paths);
    std::optional<lore::ParameterSet> base;
    if (recipe.base_path) {
        base = lore::load_checkpoint(*recipe.base_path);
        log_step("loaded", {{"path", *recipe.base_path}, {"role", "base"}});
    }

    lore::ParameterSet merged;
    std::map<std::string, lore::SolverTrace> traces;
    switch (recipe.method) {
        case lore::MergeMethod::lore_direct:
        case lore::MergeMethod::lore_ties: {
            auto result = lore::lore_merge(models, recipe);
            merged = std::move(result.merged);
            traces = std::move(result.traces);
            break;
        }
        case lore::MergeMethod::average:
            merged = lore::average_merge(models);
            break;
        case lore::MergeMethod::dare:
            merged = lore::dare_merge(*base, models, recipe.dare_drop_prob, recipe.lambda,
                                      recipe.seed);
            break;
        case lore::MergeMethod::ties:
            merged = lore::ties_merge(*base, models, recipe.ties_top_fraction, recipe.lambda);
            break;
    }

    AtomicFileWriter writer(recipe.output_path);
    lore::save_checkpoint(merged, writer.temp_path());
    writer.commit();
    log_step("wrote", {{"path", recipe.output_path}});

    const double duration =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    ordered_json manifest{{"subcommand", "merge"},
                          {"method", lore::merge_method_name(recipe.method)},
                          {"lambda", recipe.lambda},
                          {"solver", solver_config_json(recipe.solver)},
                          {"dare_drop_prob", recipe.dare_drop_prob},
                          {"ties_top_fraction", recipe.ties_top_fraction},
                          {"seed", recipe.seed}};
    ordered_json inputs = ordered_json::array();
    for (const auto& path : recipe.model_paths)
        inputs.push_back({{"path", path}, {"sha256", sha256_file(path)}});
    if (recipe.base_path)
        manifest["base"] = {{"path", *recipe.base_path},
                            {"sha256", sha256_file(*recipe.base_path)}};
    manifest["inputs"] = inputs;
    manifest["output"] = {{"path", recipe.output_path},
                          {"sha256", sha256_file(recipe.output_path)}};
    manifest["solver_traces"] = traces_json(traces);
    manifest["duration_seconds"] = duration;

    write_manifest(recipe.output_path + ".manifest.json", std::move(manifest));
    return 0;
}

// ------------------------------------------------------------ decompose

int run_decompose(const std::vector<std::string>& model_paths,
                  const lore::SolverConfig& config, const std::string& out_dir) {
    if (model_paths.empty())
        throw lore::ValidationError("decompose: provide at least one model path");
    const auto models = load_models(model_paths);
    const auto result = lore::decompose_parameter_sets(models, config);

    fs::create_directories(out_dir);
    const fs::path base_path = fs::path(out_dir) / "base.safetensors";
    {
        AtomicFileWriter writer(base_path);
        lore::save_checkpoint(result.base, writer.temp_path());
        writer.commit();
    }
    log_step("wrote", {{"path", base_path.string()}});

    for (std::size_t i = 0; i < result.task_vector_sets.size(); ++i) {
        lore::ParameterSet tv;
        for (const auto& [name, tensor] : result.base.tensors) {
            lore::NamedTensor out = tensor;
            out.assign_from_matrix(result.task_vector_sets[i].vectors.at(name));
            tv.tensors.emplace(name, std::move(out));
        }
        char buf[32];
        std::snprintf(buf, sizeof buf, "task_vector_%03zu.safetensors", i);
        const fs::path tv_path = fs::path(out_dir) / buf;
        AtomicFileWriter writer(tv_path);
        lore::save_checkpoint(tv, writer.temp_path());
        writer.commit();
        log_step("wrote", {{"path", tv_path.string()}});
    }

    ordered_json inputs = ordered_json::array();
    for (const auto& path : model_paths)
        inputs.push_back({{"path", path}, {"sha256", sha256_file(path)}});
    ordered_json trace{{"subcommand", "decompose"},
                       {"solver", solver_config_json(config)},
                       {"inputs", inputs},
                       {"traces", traces_json(result.traces)}};
    const fs::path trace_path = fs::path(out_dir) / "decompose_trace.json";
    AtomicFileWriter writer(trace_path);
    {
        std::ofstream out(writer.temp_path());
        out << trace.dump(2) << "\n";
        if (!out) throw lore::IoError("write failed: " + trace_path.string());
    }
    writer.commit();
    log_step("wrote", {{"path", trace_path.string()}});
    return 0;
}

// -------------------------------------------------------------- analyze

int run_analyze(const std::string& model_a, const std::string& model_b,
                std::int64_t top_count, double rank_fraction, const std::string& out) {
    const auto a = lore::load_checkpoint(model_a);
    const auto b = lore::load_checkpoint(model_b);
    const auto report = lore::analyze_task_vectors(a, b, top_count, rank_fraction);
    lore::emit_report(report, out);
    write_manifest(out + ".manifest.json",
                   {{"subcommand", "analyze"},
                    {"top_count", top_count},
                    {"rank_fraction", rank_fraction},
                    {"inputs",
                     {{{"path", model_a}, {"sha256", sha256_file(model_a)}},
                      {{"path", model_b}, {"sha256", sha256_file(model_b)}}}}});
    log_step("wrote", {{"path", out}, {"parameters", std::to_string(report.entries.size())}});
    return 0;
}

// ---------------------------------------------------------------- bench

int run_bench_cmd(const std::string& spec_path, const std::string& recipes_path,
                  const std::string& out) {
    const auto spec = lore::bench_spec_from_toml(parse_toml_file(spec_path).root);
    const auto recipes_doc = parse_toml_file(recipes_path);
    std::vector<lore::MergeRecipe> recipes;
    auto it = recipes_doc.lists.find("recipe");
    if (it == recipes_doc.lists.end() || it->second.empty())
        throw lore::ValidationError(recipes_path + ": no [[recipe]] entries found");
    for (const auto& table : it->second)
        recipes.push_back(lore::merge_recipe_from_toml(table));

    const auto report = lore::run_bench(spec, recipes);

    {
        AtomicFileWriter writer(out);
        std::ofstream file(writer.temp_path());
        file << lore::bench_report_to_json(report).dump(2) << "\n";
        if (!file) throw lore::IoError("write failed: " + out);
        file.close();
        writer.commit();
    }
    write_manifest(out + ".manifest.json",
                   {{"subcommand", "bench"},
                    {"inputs",
                     {{{"path", spec_path}, {"sha256", sha256_file(spec_path)}},
                      {{"path", recipes_path}, {"sha256", sha256_file(recipes_path)}}}}});

    std::printf("%-12s %-4s %-12s %-12s %s\n", "method", "ok", "merged_dist", "duration_s",
                "notes");
    int succeeded = 0;
    for (const auto& r : report.results) {
        std::string notes = r.oracle_base_used ? "oracle base" : "";
        if (!r.ok) notes = r.error;
        std::printf("%-12s %-4s %-12.4e %-12.3f %s\n", r.method.c_str(),
                    r.ok ? "yes" : "no", r.merged_distance_to_truth_base,
                    r.duration_seconds, notes.c_str());
        succeeded += r.ok ? 1 : 0;
    }
    return succeeded > 0 ? 0 : 1;
}

std::string error_category(const std::exception& e) {
    if (dynamic_cast<const lore::NumericalError*>(&e)) return "numeric";
    if (dynamic_cast<const lore::ValidationError*>(&e)) return "validation";
    if (dynamic_cast<const lore::IoError*>(&e)) return "io";
    return "internal";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"checkpoint merging toolkit"};
    app.require_subcommand(1);
    app.add_flag("-v,--verbose", g_verbose, "JSON line logs");

    // merge
    MergeFlags mf;
    auto* merge = app.add_subcommand("merge", "merge checkpoints");
    merge->add_option("--recipe", mf.recipe_path, "TOML recipe file");
    merge->add_option("--method", mf.method, "lore_direct|lore_ties|average|dare|ties");
    merge->add_option("--lambda", mf.lambda, "task-vector scaling");
    merge->add_option("--mu", mf.mu, "singular value threshold");
    merge->add_option("--max-iters", mf.max_iters, "solver iteration limit");
    merge->add_option("--rel-tol", mf.rel_tol, "relative objective decrease tolerance");
    merge->add_option("--rank-fraction", mf.rank_fraction, "rank cap fraction of min dim");
    merge->add_option("--apply-rank-cap", mf.apply_rank_cap, "enable the hard rank cap");
    merge->add_option("--dare-drop-prob", mf.dare_drop_prob, "DARE drop probability");
    merge->add_option("--ties-top-fraction", mf.ties_top_fraction, "TIES trim fraction");
    merge->add_option("--seed", mf.seed, "seed for stochastic methods");
    merge->add_option("--base", mf.base, "base checkpoint (dare/ties only)");
    merge->add_option("--output,-o", mf.output, "merged checkpoint path");
    merge->add_option("models", mf.models, "model checkpoint paths");

    // decompose
    std::vector<std::string> dec_models;
    std::string dec_out_dir = ".";
    lore::SolverConfig dec_config;
    auto* decompose = app.add_subcommand("decompose", "recover base + task vectors");
    decompose->add_option("models", dec_models, "model checkpoint paths")->required();
    decompose->add_option("--mu", dec_config.mu, "singular value threshold");
    decompose->add_option("--max-iters", dec_config.max_iters, "iteration limit");
    decompose->add_option("--rel-tol", dec_config.rel_tol, "stopping tolerance");
    decompose->add_option("--rank-fraction", dec_config.rank_fraction, "rank cap fraction");
    decompose->add_option("--apply-rank-cap", dec_config.apply_rank_cap,
                          "enable the hard rank cap");
    decompose->add_option("--out-dir", dec_out_dir, "output directory");

    // analyze
    std::string an_a, an_b, an_out = "spectrum.csv";
    std::int64_t an_top = 100;
    double an_fraction = 0.2;
    auto* analyze = app.add_subcommand("analyze", "task-vector spectrum report");
    analyze->add_option("model_a", an_a, "first checkpoint")->required();
    analyze->add_option("model_b", an_b, "second checkpoint")->required();
    analyze->add_option("--top-count", an_top, "singular values per parameter");
    analyze->add_option("--rank-fraction", an_fraction, "r = ceil(fraction * min dim)");
    analyze->add_option("--out", an_out, "CSV output path (JSON sidecar alongside)");

    // bench
    std::string bench_spec, bench_recipes, bench_out = "bench_report.json";
    auto* bench = app.add_subcommand("bench", "synthetic recovery benchmark");
    bench->add_option("--spec", bench_spec, "bench spec TOML")->required();
    bench->add_option("--recipes", bench_recipes, "TOML with [[recipe]] entries")->required();
    bench->add_option("--out", bench_out, "report JSON path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << R"({"error":"argument parsing: )" << e.what() << R"(","category":"validation"})"
                  << "\n";
        return 1;
    }

    try {
        if (merge->parsed()) return run_merge(recipe_from_flags(mf, merge));
        if (decompose->parsed()) return run_decompose(dec_models, dec_config, dec_out_dir);
        if (analyze->parsed()) return run_analyze(an_a, an_b, an_top, an_fraction, an_out);
        if (bench->parsed()) return run_bench_cmd(bench_spec, bench_recipes, bench_out);
        return 1;
    } catch (const std::exception& e) {
        const std::string category = error_category(e);
        nlohmann::json line{{"error", e.what()}, {"category", category}};
        std::cerr << line.dump() << "\n";
        return category == "numeric" || category == "internal" ? 2 : 1;
    }
}
