#pragma once

// Merge strategies: the low-rank decomposition route (direct sum or TIES
// sign election over recovered task vectors, then theta* = theta0 +
// lambda * tau) and the standalone Average / DARE / TIES baselines.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "lore/errors.hpp"
#include "lore/linalg.hpp"
#include "lore/rng.hpp"
#include "lore/solver.hpp"
#include "lore/tensor.hpp"
#include "lore/toml.hpp"

namespace lore {

enum class MergeMethod { lore_direct, lore_ties, average, dare, ties };

inline const char* merge_method_name(MergeMethod m) {
    switch (m) {
        case MergeMethod::lore_direct: return "lore_direct";
        case MergeMethod::lore_ties: return "lore_ties";
        case MergeMethod::average: return "average";
        case MergeMethod::dare: return "dare";
        case MergeMethod::ties: return "ties";
    }
    return "?";
}

inline MergeMethod parse_merge_method(const std::string& name) {
    for (MergeMethod m : {MergeMethod::lore_direct, MergeMethod::lore_ties,
                          MergeMethod::average, MergeMethod::dare, MergeMethod::ties})
        if (name == merge_method_name(m)) return m;
    throw ValidationError(
        "unknown merge method '" + name +
        "' (expected lore_direct, lore_ties, average, dare, or ties)");
}

inline bool is_lore_method(MergeMethod m) {
    return m == MergeMethod::lore_direct || m == MergeMethod::lore_ties;
}

/// Declarative description of one merge run.
struct MergeRecipe {
    MergeMethod method = MergeMethod::lore_direct;
    double lambda = 1.0;
    double dare_drop_prob = 0.5;
    double ties_top_fraction = 0.2;
    SolverConfig solver;
    std::uint64_t seed = 0;
    std::optional<std::string> base_path;
    std::vector<std::string> model_paths;
    std::string output_path;

    void validate(bool require_paths = false) const {
        solver.validate();
        if (!std::isfinite(lambda))
            throw ValidationError("recipe: lambda must be finite");
        if (!(dare_drop_prob >= 0.0 && dare_drop_prob < 1.0))
            throw ValidationError("recipe: dare_drop_prob must be in [0,1), got " +
                                  std::to_string(dare_drop_prob));
        if (!(ties_top_fraction > 0.0 && ties_top_fraction <= 1.0))
            throw ValidationError("recipe: ties_top_fraction must be in (0,1], got " +
                                  std::to_string(ties_top_fraction));
        const bool needs_base = method == MergeMethod::dare || method == MergeMethod::ties;
        if (needs_base && !base_path)
            throw ValidationError(std::string("recipe: method '") + merge_method_name(method) +
                                  "' requires base_path");
        if (!needs_base && base_path)
            throw ValidationError(std::string("recipe: method '") + merge_method_name(method) +
                                  "' does not take base_path");
        if (require_paths) {
            if (model_paths.empty())
                throw ValidationError("recipe: model_paths must list at least one checkpoint");
            if (output_path.empty())
                throw ValidationError("recipe: output_path is required");
        }
    }
};

inline MergeRecipe merge_recipe_from_toml(const toml::Table& t) {
    MergeRecipe r;
    if (t.has("method")) r.method = parse_merge_method(t.at("method").as_string());
    r.lambda = t.get_or("lambda", r.lambda);
    r.dare_drop_prob = t.get_or("dare_drop_prob", r.dare_drop_prob);
    r.ties_top_fraction = t.get_or("ties_top_fraction", r.ties_top_fraction);
    r.solver.mu = t.get_or("mu", r.solver.mu);
    r.solver.max_iters = t.get_or("max_iters", r.solver.max_iters);
    r.solver.rel_tol = t.get_or("rel_tol", r.solver.rel_tol);
    r.solver.rank_fraction = t.get_or("rank_fraction", r.solver.rank_fraction);
    r.solver.apply_rank_cap = t.get_or("apply_rank_cap", r.solver.apply_rank_cap);
    r.seed = static_cast<std::uint64_t>(t.get_or<std::int64_t>("seed", 0));
    if (t.has("base_path")) r.base_path = t.at("base_path").as_string();
    if (t.has("model_paths"))
        for (const auto& v : t.at("model_paths").as_array())
            r.model_paths.push_back(v.as_string());
    r.output_path = t.get_or<std::string>("output_path", "");
    return r;
}

inline MergeRecipe parse_merge_recipe(std::string_view toml_text) {
    return merge_recipe_from_toml(toml::parse(toml_text).root);
}

inline std::string merge_recipe_to_toml(const MergeRecipe& r) {
    std::ostringstream os;
    os.precision(17);
    os << "method = \"" << merge_method_name(r.method) << "\"\n";
    os << "lambda = " << r.lambda << "\n";
    os << "mu = " << r.solver.mu << "\n";
    os << "max_iters = " << r.solver.max_iters << "\n";
    os << "rel_tol = " << r.solver.rel_tol << "\n";
    os << "rank_fraction = " << r.solver.rank_fraction << "\n";
    os << "apply_rank_cap = " << (r.solver.apply_rank_cap ? "true" : "false") << "\n";
    os << "dare_drop_prob = " << r.dare_drop_prob << "\n";
    os << "ties_top_fraction = " << r.ties_top_fraction << "\n";
    os << "seed = " << r.seed << "\n";
    if (r.base_path) os << "base_path = \"" << *r.base_path << "\"\n";
    os << "model_paths = [";
    for (std::size_t i = 0; i < r.model_paths.size(); ++i)
        os << (i ? ", " : "") << "\"" << r.model_paths[i] << "\"";
    os << "]\n";
    if (!r.output_path.empty()) os << "output_path = \"" << r.output_path << "\"\n";
    return os.str();
}

namespace detail {

inline void require_same_names(std::span<const TaskVectorSet> sets, const char* op) {
    if (sets.empty())
        throw ValidationError(std::string(op) + ": need at least one task-vector set");
    for (std::size_t i = 1; i < sets.size(); ++i) {
        if (sets[i].vectors.size() != sets[0].vectors.size())
            throw ValidationError(std::string(op) + ": set " + std::to_string(i) +
                                  " has a different name set");
        for (const auto& [name, m] : sets[0].vectors) {
            auto it = sets[i].vectors.find(name);
            if (it == sets[i].vectors.end())
                throw ValidationError(std::string(op) + ": set " + std::to_string(i) +
                                      " is missing '" + name + "'");
            if (it->second.rows() != m.rows() || it->second.cols() != m.cols())
                throw ValidationError(std::string(op) + ": shape mismatch for '" + name + "'");
        }
    }
}

}  // namespace detail

/// tau = sum_i delta_i, element-wise per parameter.
inline TaskVectorSet combine_direct_sum(std::span<const TaskVectorSet> sets) {
    detail::require_same_names(sets, "combine_direct_sum");
    TaskVectorSet tau;
    for (const auto& [name, first] : sets[0].vectors) {
        Matrix sum = first;
        for (std::size_t i = 1; i < sets.size(); ++i) sum += sets[i].vectors.at(name);
        tau.vectors.emplace(name, std::move(sum));
    }
    return tau;
}

/// Per-coordinate sign election: the elected sign is sgn(sum_i delta_i);
/// tau is the mean of the entries whose sign matches. A zero sum elects
/// nobody and yields zero.
inline TaskVectorSet combine_ties_select(std::span<const TaskVectorSet> sets) {
    detail::require_same_names(sets, "combine_ties_select");
    TaskVectorSet tau;
    for (const auto& [name, first] : sets[0].vectors) {
        Matrix out(first.rows(), first.cols());
        const Eigen::Index count = first.size();
        std::vector<const double*> entries;
        entries.reserve(sets.size());
        for (const auto& set : sets) entries.push_back(set.vectors.at(name).data());
        double* po = out.data();
        for (Eigen::Index e = 0; e < count; ++e) {
            double sum = 0.0;
            for (const double* p : entries) sum += p[e];
            if (sum == 0.0) {
                po[e] = 0.0;
                continue;
            }
            const double sign = sum > 0.0 ? 1.0 : -1.0;
            double agree_sum = 0.0;
            int agree_count = 0;
            for (const double* p : entries) {
                if ((sign > 0.0 && p[e] > 0.0) || (sign < 0.0 && p[e] < 0.0)) {
                    agree_sum += p[e];
                    ++agree_count;
                }
            }
            po[e] = agree_count > 0 ? agree_sum / agree_count : 0.0;
        }
        tau.vectors.emplace(name, std::move(out));
    }
    return tau;
}

/// theta* = theta0 + lambda * tau, reshaped back to the original tensor
/// shapes. Passthrough parameters carry zero tau by construction.
inline ParameterSet assemble(const ParameterSet& base, const TaskVectorSet& tau,
                             double lambda) {
    if (base.tensors.size() != tau.vectors.size())
        throw ValidationError("assemble: base has " + std::to_string(base.tensors.size()) +
                              " tensors but tau has " + std::to_string(tau.vectors.size()));
    ParameterSet merged;
    for (const auto& [name, tensor] : base.tensors) {
        auto it = tau.vectors.find(name);
        if (it == tau.vectors.end())
            throw ValidationError("assemble: tau is missing '" + name + "'");
        NamedTensor out = tensor;
        out.assign_from_matrix(tensor.to_matrix() + lambda * it->second);
        merged.tensors.emplace(name, std::move(out));
    }
    return merged;
}

namespace detail {

inline void require_compatible(std::span<const ParameterSet> sets, const char* op) {
    const auto report = check_compatibility(sets);
    if (!report.compatible)
        throw ValidationError(std::string(op) + ": " + describe(report));
}

}  // namespace detail

/// Element-wise mean of all models.
inline ParameterSet average_merge(std::span<const ParameterSet> sets) {
    if (sets.size() < 2)
        throw ValidationError("average_merge: need at least two models, got " +
                              std::to_string(sets.size()));
    detail::require_compatible(sets, "average_merge");
    ParameterSet merged;
    for (const auto& [name, first] : sets[0].tensors) {
        NamedTensor out = first;
        for (std::size_t i = 1; i < sets.size(); ++i) {
            const auto& other = sets[i].at(name).data;
            for (std::size_t e = 0; e < out.data.size(); ++e) out.data[e] += other[e];
        }
        const double inv = 1.0 / static_cast<double>(sets.size());
        for (double& v : out.data) v *= inv;
        merged.tensors.emplace(name, std::move(out));
    }
    return merged;
}

/// How DARE aggregates the per-model rescaled task vectors.
enum class DareCombine { average, sum };

/// Drop-and-rescale: each task-vector entry is zeroed with probability p
/// and survivors are scaled by 1/(1-p); the rescaled task vectors are
/// combined across models (averaged by default) and added to the base.
/// The coin stream is keyed by (seed, model index, parameter name), so
/// results are independent of evaluation order.
inline ParameterSet dare_merge(const ParameterSet& base, std::span<const ParameterSet> sets,
                               double p, double lambda, std::uint64_t seed,
                               DareCombine combine = DareCombine::average) {
    if (sets.empty()) throw ValidationError("dare_merge: need at least one model");
    if (!(p >= 0.0 && p < 1.0))
        throw ValidationError("dare_merge: drop probability must be in [0,1), got " +
                              std::to_string(p));
    std::vector<ParameterSet> all;
    all.reserve(sets.size() + 1);
    all.push_back(base);
    all.insert(all.end(), sets.begin(), sets.end());
    detail::require_compatible(all, "dare_merge");

    const double rescale = 1.0 / (1.0 - p);
    const double model_weight =
        combine == DareCombine::average ? 1.0 / static_cast<double>(sets.size()) : 1.0;
    const RandomStream root(seed);

    ParameterSet merged;
    for (const auto& [name, base_tensor] : base.tensors) {
        NamedTensor out = base_tensor;
        std::vector<double> combined(out.data.size(), 0.0);
        for (std::size_t i = 0; i < sets.size(); ++i) {
            const auto& model = sets[i].at(name).data;
            RandomStream stream = root.fork(std::uint64_t{i}, name);
            for (std::size_t e = 0; e < combined.size(); ++e) {
                const double delta = model[e] - base_tensor.data[e];
                const bool keep = stream.uniform() >= p;
                if (keep) combined[e] += delta * rescale;
            }
        }
        for (std::size_t e = 0; e < out.data.size(); ++e)
            out.data[e] += lambda * combined[e] * model_weight;
        merged.tensors.emplace(name, std::move(out));
    }
    return merged;
}

namespace detail {

/// Keep the top ceil(fraction * count) entries by |value| (ties broken
/// toward lower flat index), zero the rest.
inline std::vector<double> trim_to_top_fraction(std::vector<double> values, double fraction) {
    const std::size_t count = values.size();
    const std::size_t keep = static_cast<std::size_t>(
        std::ceil(fraction * static_cast<double>(count)));
    if (keep >= count) return values;
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), 0);
    std::nth_element(order.begin(), order.begin() + keep, order.end(),
                     [&](std::size_t a, std::size_t b) {
                         const double ma = std::abs(values[a]), mb = std::abs(values[b]);
                         if (ma != mb) return ma > mb;
                         return a < b;
                     });
    std::vector<double> trimmed(count, 0.0);
    for (std::size_t k = 0; k < keep; ++k) trimmed[order[k]] = values[order[k]];
    return trimmed;
}

}  // namespace detail

/// Trim per tensor to the top fraction by magnitude, then elect signs and
/// average agreeing entries (as combine_ties_select), then add to base.
inline ParameterSet ties_merge(const ParameterSet& base, std::span<const ParameterSet> sets,
                               double top_fraction, double lambda) {
    if (sets.empty()) throw ValidationError("ties_merge: need at least one model");
    if (!(top_fraction > 0.0 && top_fraction <= 1.0))
        throw ValidationError("ties_merge: top_fraction must be in (0,1], got " +
                              std::to_string(top_fraction));
    std::vector<ParameterSet> all;
    all.reserve(sets.size() + 1);
    all.push_back(base);
    all.insert(all.end(), sets.begin(), sets.end());
    detail::require_compatible(all, "ties_merge");

    std::vector<TaskVectorSet> trimmed(sets.size());
    for (std::size_t i = 0; i < sets.size(); ++i) {
        for (const auto& [name, base_tensor] : base.tensors) {
            const auto& model = sets[i].at(name).data;
            std::vector<double> delta(model.size());
            for (std::size_t e = 0; e < delta.size(); ++e)
                delta[e] = model[e] - base_tensor.data[e];
            delta = detail::trim_to_top_fraction(std::move(delta), top_fraction);
            Matrix m(base_tensor.matrix_rows(), base_tensor.matrix_cols());
            std::copy(delta.begin(), delta.end(), m.data());
            trimmed[i].vectors.emplace(name, std::move(m));
        }
    }
    const TaskVectorSet tau = combine_ties_select(trimmed);
    return assemble(base, tau, lambda);
}

/// Full decomposition-based merge. Returns the merged model along with
/// the recovered base, task vectors, and solver traces.
struct LoreMergeResult {
    ParameterSet merged;
    ParameterSet base;
    std::vector<TaskVectorSet> task_vector_sets;
    std::map<std::string, SolverTrace> traces;
};

inline LoreMergeResult lore_merge(std::span<const ParameterSet> sets,
                                  const MergeRecipe& recipe,
                                  unsigned threads = default_thread_count()) {
    if (!is_lore_method(recipe.method))
        throw ValidationError(std::string("lore_merge: recipe method is '") +
                              merge_method_name(recipe.method) + "'");
    recipe.validate();
    ModelDecomposition dec = decompose_parameter_sets(sets, recipe.solver, threads);
    const TaskVectorSet tau = recipe.method == MergeMethod::lore_direct
                                  ? combine_direct_sum(dec.task_vector_sets)
                                  : combine_ties_select(dec.task_vector_sets);
    LoreMergeResult out;
    out.merged = assemble(dec.base, tau, recipe.lambda);
    out.base = std::move(dec.base);
    out.task_vector_sets = std::move(dec.task_vector_sets);
    out.traces = std::move(dec.traces);
    return out;
}

}  // namespace lore
