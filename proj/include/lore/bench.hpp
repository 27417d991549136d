#pragma once

// Synthetic benchmark: plant a known base model and low-rank task
// vectors, run each merging method, and score recovery against the
// ground truth. This is the controlled, desk-scale counterpart of
// merging real fine-tuned checkpoints.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lore/errors.hpp"
#include "lore/merge.hpp"
#include "lore/rng.hpp"
#include "lore/solver.hpp"
#include "lore/tensor.hpp"
#include "lore/toml.hpp"

namespace lore {

struct BenchSpec {
    std::vector<std::pair<std::int64_t, std::int64_t>> matrix_shapes;
    int n_models = 2;
    int planted_rank = 1;
    double perturbation_scale = 0.1;
    double noise_scale = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (matrix_shapes.empty())
            throw ValidationError("bench: matrix_shapes must not be empty");
        if (n_models < 2)
            throw ValidationError("bench: n_models must be >= 2, got " +
                                  std::to_string(n_models));
        if (planted_rank < 1)
            throw ValidationError("bench: planted_rank must be >= 1");
        for (const auto& [rows, cols] : matrix_shapes) {
            if (rows < 2 || cols < 2)
                throw ValidationError("bench: matrix shapes need both dimensions >= 2");
            if (planted_rank > std::min(rows, cols))
                throw ValidationError("bench: planted_rank " + std::to_string(planted_rank) +
                                      " exceeds min dimension of " + std::to_string(rows) +
                                      "x" + std::to_string(cols));
        }
        if (!(perturbation_scale > 0.0) && perturbation_scale != 0.0)
            throw ValidationError("bench: perturbation_scale must be >= 0");
        if (noise_scale < 0.0)
            throw ValidationError("bench: noise_scale must be >= 0");
    }
};

inline BenchSpec bench_spec_from_toml(const toml::Table& t) {
    BenchSpec spec;
    if (t.has("matrix_shapes")) {
        for (const auto& item : t.at("matrix_shapes").as_array()) {
            const auto& pair = item.as_array();
            if (pair.size() != 2)
                throw ValidationError("bench: each matrix shape must be [rows, cols]");
            spec.matrix_shapes.emplace_back(pair[0].as_integer(), pair[1].as_integer());
        }
    }
    spec.n_models = t.get_or("n_models", spec.n_models);
    spec.planted_rank = t.get_or("planted_rank", spec.planted_rank);
    spec.perturbation_scale = t.get_or("perturbation_scale", spec.perturbation_scale);
    spec.noise_scale = t.get_or("noise_scale", spec.noise_scale);
    spec.seed = static_cast<std::uint64_t>(t.get_or<std::int64_t>("seed", 0));
    return spec;
}

struct BenchFamily {
    ParameterSet truth_base;
    std::vector<ParameterSet> models;
    std::vector<TaskVectorSet> truth_task_vectors;  // theta_i - truth_base
};

namespace detail {

inline Matrix random_gaussian(RandomStream& stream, std::int64_t rows, std::int64_t cols) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stream.normal();
    return m;
}

inline std::string bench_param_name(std::size_t index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "w%03zu", index);
    return buf;
}

}  // namespace detail

/// theta_i = base + perturbation_scale * (U_i V_i^T normalized to unit
/// Frobenius norm) + noise_scale * G_i, with the base itself unit-norm
/// per matrix. Fully determined by the seed.
inline BenchFamily generate_family(const BenchSpec& spec) {
    spec.validate();
    const RandomStream root(spec.seed);
    BenchFamily family;
    family.models.resize(spec.n_models);
    family.truth_task_vectors.resize(spec.n_models);

    for (std::size_t s = 0; s < spec.matrix_shapes.size(); ++s) {
        const auto [rows, cols] = spec.matrix_shapes[s];
        const std::string name = detail::bench_param_name(s);

        RandomStream base_stream = root.fork("base", std::uint64_t{s});
        Matrix base = detail::random_gaussian(base_stream, rows, cols);
        base /= base.norm();

        NamedTensor base_tensor;
        base_tensor.name = name;
        base_tensor.shape = {rows, cols};
        base_tensor.element_type = ElementType::F32;
        base_tensor.data.assign(base.data(), base.data() + base.size());
        family.truth_base.tensors.emplace(name, std::move(base_tensor));

        for (int i = 0; i < spec.n_models; ++i) {
            RandomStream pert_stream = root.fork("pert", std::uint64_t{s}, std::uint64_t(i));
            const Matrix left = detail::random_gaussian(pert_stream, rows, spec.planted_rank);
            const Matrix right = detail::random_gaussian(pert_stream, spec.planted_rank, cols);
            Matrix pert = left * right;
            pert /= pert.norm();

            Matrix theta = base + spec.perturbation_scale * pert;
            if (spec.noise_scale > 0.0) {
                RandomStream noise_stream =
                    root.fork("noise", std::uint64_t{s}, std::uint64_t(i));
                theta += spec.noise_scale * detail::random_gaussian(noise_stream, rows, cols);
            }

            NamedTensor tensor;
            tensor.name = name;
            tensor.shape = {rows, cols};
            tensor.element_type = ElementType::F32;
            tensor.data.assign(theta.data(), theta.data() + theta.size());
            family.models[i].tensors.emplace(name, std::move(tensor));
            family.truth_task_vectors[i].vectors.emplace(name, theta - base);
        }
    }
    return family;
}

/// Per-recipe outcome. Decomposition metrics are only defined for the
/// lore methods; baselines report the merged-model distance alone.
struct BenchRecipeResult {
    std::string method;
    bool ok = false;
    std::string error;
    double duration_seconds = 0.0;
    bool oracle_base_used = false;  // dare/ties receive the true base
    std::optional<double> base_recovery_error;
    std::vector<double> task_vector_recovery_errors;        // per model
    std::map<std::string, std::vector<double>> reconstruction_residuals;  // name -> per model
    double merged_distance_to_truth_base = 0.0;
};

struct BenchReport {
    BenchSpec spec;
    std::vector<BenchRecipeResult> results;
};

namespace detail {

inline double set_distance(const ParameterSet& a, const ParameterSet& b) {
    double sq = 0.0;
    for (const auto& [name, tensor] : a.tensors) {
        const auto& other = b.at(name).data;
        for (std::size_t e = 0; e < tensor.data.size(); ++e) {
            const double d = tensor.data[e] - other[e];
            sq += d * d;
        }
    }
    return std::sqrt(sq);
}

}  // namespace detail

/// Run every recipe on the generated family; one recipe failing does not
/// abort the others. Recipes run sequentially by default for timing
/// fidelity; concurrent_recipes opts into running them in parallel with
/// per-recipe isolated state (durations change, results do not).
inline BenchReport run_bench(const BenchSpec& spec, std::span<const MergeRecipe> recipes,
                             unsigned threads = default_thread_count(),
                             bool concurrent_recipes = false) {
    spec.validate();
    const BenchFamily family = generate_family(spec);
    BenchReport report;
    report.spec = spec;
    report.results.resize(recipes.size());

    const unsigned recipe_workers = concurrent_recipes ? threads : 1;
    const unsigned merge_workers = concurrent_recipes ? 1 : threads;
    detail::parallel_for(recipes.size(), recipe_workers, [&](std::size_t index) {
        const auto& recipe = recipes[index];
        BenchRecipeResult r;
        r.method = merge_method_name(recipe.method);
        const auto t0 = std::chrono::steady_clock::now();
        try {
            ParameterSet merged;
            if (is_lore_method(recipe.method)) {
                LoreMergeResult lm = lore_merge(family.models, recipe, merge_workers);
                merged = std::move(lm.merged);
                r.base_recovery_error =
                    detail::set_distance(lm.base, family.truth_base);
                for (int i = 0; i < spec.n_models; ++i) {
                    double sq = 0.0;
                    for (const auto& [name, truth] : family.truth_task_vectors[i].vectors)
                        sq += (lm.task_vector_sets[i].vectors.at(name) - truth).squaredNorm();
                    r.task_vector_recovery_errors.push_back(std::sqrt(sq));
                }
                for (const auto& [name, base_tensor] : lm.base.tensors) {
                    std::vector<double> residuals;
                    const Matrix base_m = base_tensor.to_matrix();
                    for (int i = 0; i < spec.n_models; ++i) {
                        const Matrix target = family.models[i].at(name).to_matrix();
                        residuals.push_back(
                            (base_m + lm.task_vector_sets[i].vectors.at(name) - target)
                                .norm());
                    }
                    r.reconstruction_residuals.emplace(name, std::move(residuals));
                }
            } else if (recipe.method == MergeMethod::average) {
                merged = average_merge(family.models);
            } else if (recipe.method == MergeMethod::dare) {
                r.oracle_base_used = true;
                merged = dare_merge(family.truth_base, family.models,
                                    recipe.dare_drop_prob, recipe.lambda, recipe.seed);
            } else {
                r.oracle_base_used = true;
                merged = ties_merge(family.truth_base, family.models,
                                    recipe.ties_top_fraction, recipe.lambda);
            }
            r.merged_distance_to_truth_base =
                detail::set_distance(merged, family.truth_base);
            r.ok = true;
        } catch (const std::exception& e) {
            r.ok = false;
            r.error = e.what();
        }
        r.duration_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        report.results[index] = std::move(r);
    });
    return report;
}

inline nlohmann::ordered_json bench_report_to_json(const BenchReport& report) {
    nlohmann::ordered_json spec = {
        {"matrix_shapes", report.spec.matrix_shapes},
        {"n_models", report.spec.n_models},
        {"planted_rank", report.spec.planted_rank},
        {"perturbation_scale", report.spec.perturbation_scale},
        {"noise_scale", report.spec.noise_scale},
        {"seed", report.spec.seed},
    };
    nlohmann::ordered_json results = nlohmann::ordered_json::array();
    for (const auto& r : report.results) {
        nlohmann::ordered_json item = {
            {"method", r.method},
            {"ok", r.ok},
            {"oracle_base_used", r.oracle_base_used},
            {"merged_distance_to_truth_base", r.merged_distance_to_truth_base},
            {"duration_seconds", r.duration_seconds},
        };
        if (!r.error.empty()) item["error"] = r.error;
        if (r.base_recovery_error)
            item["base_recovery_error"] = *r.base_recovery_error;
        else
            item["base_recovery_error"] = nullptr;
        item["task_vector_recovery_errors"] = r.task_vector_recovery_errors;
        item["reconstruction_residuals"] = r.reconstruction_residuals;
        results.push_back(std::move(item));
    }
    return nlohmann::ordered_json{{"spec", spec}, {"results", results}};
}

}  // namespace lore
