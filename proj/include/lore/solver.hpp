#pragma once

// Joint recovery of an approximate base model and low-rank task vectors:
//
//   minimize over (theta0, delta_1..n):
//       sum_i ||theta0 + delta_i - theta_i||_F^2 + 2 mu ||delta_i||_*
//
// solved by coordinate descent. The base update is the exact mean of
// (theta_i - delta_i); each task-vector update is the exact proximal
// step SVT(theta_i - theta0; mu). Both are exact coordinate minimizers,
// so the objective never increases.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lore/errors.hpp"
#include "lore/linalg.hpp"
#include "lore/parallel.hpp"
#include "lore/tensor.hpp"

namespace lore {

struct SolverConfig {
    double mu = 0.01;
    int max_iters = 100;
    double rel_tol = 1e-8;
    double rank_fraction = 0.2;
    bool apply_rank_cap = true;

    void validate() const {
        if (!(mu >= 0.0))
            throw ValidationError("solver: mu must be non-negative, got " + std::to_string(mu));
        if (max_iters < 1)
            throw ValidationError("solver: max_iters must be positive, got " +
                                  std::to_string(max_iters));
        if (!(rel_tol >= 0.0))
            throw ValidationError("solver: rel_tol must be non-negative, got " +
                                  std::to_string(rel_tol));
        if (!(rank_fraction > 0.0 && rank_fraction <= 1.0))
            throw ValidationError("solver: rank_fraction must be in (0,1], got " +
                                  std::to_string(rank_fraction));
    }

    Eigen::Index rank_cap_for(Eigen::Index rows, Eigen::Index cols) const {
        const auto k = std::min(rows, cols);
        return static_cast<Eigen::Index>(
            std::ceil(rank_fraction * static_cast<double>(k)));
    }
};

struct SolverTrace {
    std::vector<double> objective_per_iteration;
    int iterations_run = 0;
    bool converged = false;
};

struct DecompositionResult {
    Matrix base;
    std::vector<Matrix> task_vectors;
    SolverTrace trace;
};

/// Map from parameter name to its task-vector matrix (flattened layout;
/// zero for passthrough parameters).
struct TaskVectorSet {
    std::map<std::string, Matrix> vectors;
};

namespace detail {

inline double kahan_add(double& sum, double& comp, double term) {
    const double y = term - comp;
    const double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
    return sum;
}

/// ||a + b - c||_F^2 with compensated summation (the monotone-descent
/// bookkeeping is asserted to 1e-12, tighter than a naive sum delivers).
inline double residual_sq(const Matrix& base, const Matrix& delta, const Matrix& target) {
    double sum = 0.0, comp = 0.0;
    const double* pb = base.data();
    const double* pd = delta.data();
    const double* pt = target.data();
    const Eigen::Index n = base.size();
    for (Eigen::Index i = 0; i < n; ++i) {
        const double r = pb[i] + pd[i] - pt[i];
        kahan_add(sum, comp, r * r);
    }
    return sum;
}

inline void require_same_shape(std::span<const Matrix> ms, const char* op) {
    for (std::size_t i = 1; i < ms.size(); ++i)
        if (ms[i].rows() != ms[0].rows() || ms[i].cols() != ms[0].cols())
            throw ValidationError(std::string(op) + ": matrix " + std::to_string(i) +
                                  " is " + shape_str(ms[i]) + " but matrix 0 is " +
                                  shape_str(ms[0]));
}

}  // namespace detail

/// The objective actually minimized: sum_i ||theta0 + delta_i - theta_i||_F^2
/// + 2 mu ||delta_i||_*. Zero iff every model is fit exactly with zero
/// task vectors.
inline double implemented_objective(const Matrix& base,
                                    std::span<const Matrix> task_vectors,
                                    std::span<const Matrix> targets, double mu) {
    if (task_vectors.size() != targets.size() || targets.empty())
        throw ValidationError("objective: need equally many task vectors and targets (n >= 1)");
    for (const auto& ms : {task_vectors, targets})
        for (const auto& m : ms)
            if (m.rows() != base.rows() || m.cols() != base.cols())
                throw ValidationError("objective: shape mismatch with base " +
                                      detail::shape_str(base));
    double value = 0.0, comp = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        detail::kahan_add(value, comp, detail::residual_sq(base, task_vectors[i], targets[i]));
        detail::kahan_add(value, comp, 2.0 * mu * nuclear_norm(task_vectors[i]));
    }
    return value;
}

/// Exact argmin of the objective in theta0: the mean of (theta_i - delta_i).
inline Matrix update_base(std::span<const Matrix> targets,
                          std::span<const Matrix> task_vectors) {
    if (targets.empty() || targets.size() != task_vectors.size())
        throw ValidationError("update_base: need equally many targets and task vectors (n >= 1)");
    detail::require_same_shape(targets, "update_base");
    Matrix sum = targets[0] - task_vectors[0];
    for (std::size_t i = 1; i < targets.size(); ++i) {
        if (task_vectors[i].rows() != targets[i].rows() ||
            task_vectors[i].cols() != targets[i].cols())
            throw ValidationError("update_base: task vector " + std::to_string(i) +
                                  " shape mismatch");
        sum += targets[i] - task_vectors[i];
    }
    return sum / static_cast<double>(targets.size());
}

namespace detail {

struct TaskVectorUpdate {
    Matrix delta;
    double nuclear = 0.0;  // ||delta||_* from the same decomposition
};

// SVT(target - base; mu), then the hard rank cap, from one SVD: the cap
// zeroes trailing values of the already-thresholded spectrum, which is
// exactly truncate_rank applied to the SVT output.
inline TaskVectorUpdate threshold_and_cap(const Matrix& difference, const SolverConfig& config) {
    const SvdResult dec = svd(difference);
    Vector shrunk = (dec.singular_values.array() - config.mu).max(0.0);
    Eigen::Index keep = 0;
    while (keep < shrunk.size() && shrunk[keep] > 0.0) ++keep;
    if (config.apply_rank_cap)
        keep = std::min(keep, config.rank_cap_for(difference.rows(), difference.cols()));
    TaskVectorUpdate out;
    out.delta = reconstruct_truncated(dec, shrunk, keep);
    out.nuclear = shrunk.head(keep).sum();
    return out;
}

}  // namespace detail

/// Proximal update for one task vector; rank-capped when configured.
inline Matrix update_task_vector(const Matrix& target, const Matrix& base,
                                 const SolverConfig& config) {
    if (target.rows() != base.rows() || target.cols() != base.cols())
        throw ValidationError("update_task_vector: target is " + detail::shape_str(target) +
                              " but base is " + detail::shape_str(base));
    config.validate();
    return detail::threshold_and_cap(target - base, config).delta;
}

/// Observer hook: called after every coordinate update inside decompose.
/// variable_index is -1 for the base update, i for task vector i.
struct UpdateEvent {
    int round = 0;
    int variable_index = -1;
    const Matrix& base;
    const std::vector<Matrix>& task_vectors;
};
using UpdateObserver = std::function<void(const UpdateEvent&)>;

inline DecompositionResult decompose(std::span<const Matrix> targets,
                                     const SolverConfig& config,
                                     const UpdateObserver& observer = {}) {
    config.validate();
    if (targets.empty())
        throw ValidationError("decompose: need at least one target model");
    detail::require_same_shape(targets, "decompose");
    for (std::size_t i = 0; i < targets.size(); ++i)
        if (!targets[i].allFinite())
            throw NumericalError("decompose: target " + std::to_string(i) +
                                 " has non-finite entries");

    const std::size_t n = targets.size();
    DecompositionResult result;
    result.task_vectors.assign(n, Matrix::Zero(targets[0].rows(), targets[0].cols()));
    std::vector<double> nuclear(n, 0.0);

    // Cache of each model's last SVT input/output. The proximal map is
    // 1-Lipschitz, so when the input has moved by only a few ulps the
    // cached output is within the SVD's own error of the true update;
    // reusing it avoids a full decomposition in confirmation rounds.
    struct ProxCache {
        Matrix input, delta;
        double nuclear = 0.0;
        bool valid = false;
    };
    std::vector<ProxCache> cache(n);
    constexpr double reuse_ulps = 4.0 * std::numeric_limits<double>::epsilon();

    double previous = 0.0;
    for (int round = 1; round <= config.max_iters; ++round) {
        result.base = update_base(targets, result.task_vectors);
        if (observer) observer({round, -1, result.base, result.task_vectors});

        for (std::size_t i = 0; i < n; ++i) {
            Matrix difference = targets[i] - result.base;
            if (!difference.allFinite())
                throw NumericalError("decompose: non-finite intermediate for model " +
                                     std::to_string(i) + " at iteration " +
                                     std::to_string(round));
            auto& slot = cache[i];
            if (slot.valid &&
                (difference - slot.input).norm() <= reuse_ulps * slot.input.norm()) {
                result.task_vectors[i] = slot.delta;
                nuclear[i] = slot.nuclear;
            } else {
                auto update = detail::threshold_and_cap(difference, config);
                result.task_vectors[i] = update.delta;
                nuclear[i] = update.nuclear;
                slot.input = std::move(difference);
                slot.delta = std::move(update.delta);
                slot.nuclear = update.nuclear;
                slot.valid = true;
            }
            if (observer)
                observer({round, static_cast<int>(i), result.base, result.task_vectors});
        }

        // Objective for the trace. Nuclear norms come from the update's own
        // decomposition (identical by construction), so no extra SVDs.
        double objective = 0.0, comp = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            detail::kahan_add(objective, comp,
                              detail::residual_sq(result.base, result.task_vectors[i],
                                                  targets[i]));
            detail::kahan_add(objective, comp, 2.0 * config.mu * nuclear[i]);
        }
        if (!std::isfinite(objective))
            throw NumericalError("decompose: objective became non-finite at iteration " +
                                 std::to_string(round));
        result.trace.objective_per_iteration.push_back(objective);
        result.trace.iterations_run = round;

        if (objective == 0.0) {  // exact global minimum, nothing left to do
            result.trace.converged = true;
            break;
        }
        if (round > 1) {
            const double decrease = (previous - objective) / std::max(previous, 1e-30);
            if (decrease < config.rel_tol) {
                result.trace.converged = true;
                break;
            }
        }
        previous = objective;
    }
    return result;
}

/// Whole-model decomposition. Mergeable parameters get the coordinate
/// descent solve; passthrough parameters get the element-wise mean with
/// zero task vectors. Parameters are solved independently (possibly in
/// parallel) and assembled by name, so results do not depend on
/// scheduling.
struct ModelDecomposition {
    ParameterSet base;
    std::vector<TaskVectorSet> task_vector_sets;
    std::map<std::string, SolverTrace> traces;  // mergeable parameters only
};

inline ModelDecomposition decompose_parameter_sets(std::span<const ParameterSet> sets,
                                                   const SolverConfig& config,
                                                   unsigned threads = default_thread_count()) {
    config.validate();
    if (sets.empty())
        throw ValidationError("decompose_parameter_sets: need at least one model");
    if (sets.size() >= 2) {
        const auto report = check_compatibility(sets);
        if (!report.compatible)
            throw ValidationError("models are not compatible: " + describe(report));
    }

    const std::size_t n = sets.size();
    ModelDecomposition out;
    out.base.tensors.clear();
    out.task_vector_sets.resize(n);

    const auto names = sets[0].names();
    std::vector<DecompositionResult> results(names.size());

    detail::parallel_for(names.size(), threads, [&](std::size_t idx) {
        const std::string& name = names[idx];
        const NamedTensor& reference = sets[0].at(name);
        std::vector<Matrix> targets;
        targets.reserve(n);
        for (const auto& set : sets) targets.push_back(set.at(name).to_matrix());

        if (reference.mergeable()) {
            try {
                results[idx] = decompose(targets, config);
            } catch (const NumericalError& e) {
                throw NumericalError("parameter '" + name + "': " + e.what());
            }
        } else {
            DecompositionResult r;
            r.base = update_base(targets, std::vector<Matrix>(
                                              n, Matrix::Zero(targets[0].rows(),
                                                              targets[0].cols())));
            r.task_vectors.assign(n, Matrix::Zero(targets[0].rows(), targets[0].cols()));
            results[idx] = std::move(r);
        }
    });

    for (std::size_t idx = 0; idx < names.size(); ++idx) {
        const std::string& name = names[idx];
        const NamedTensor& reference = sets[0].at(name);
        NamedTensor base_tensor = reference;
        base_tensor.assign_from_matrix(results[idx].base);
        out.base.tensors.emplace(name, std::move(base_tensor));
        for (std::size_t i = 0; i < n; ++i)
            out.task_vector_sets[i].vectors.emplace(name,
                                                    std::move(results[idx].task_vectors[i]));
        if (reference.mergeable()) out.traces.emplace(name, std::move(results[idx].trace));
    }
    return out;
}

}  // namespace lore
