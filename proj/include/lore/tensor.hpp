#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "lore/errors.hpp"
#include "lore/linalg.hpp"

namespace lore {

enum class ElementType { F32, F64 };

inline const char* element_type_name(ElementType t) {
    return t == ElementType::F32 ? "F32" : "F64";
}

inline std::size_t element_type_size(ElementType t) {
    return t == ElementType::F32 ? 4 : 8;
}

inline std::string shape_to_string(std::span<const std::int64_t> shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

/// One dense tensor. Data is always held as 64-bit floats internally;
/// element_type records the on-disk representation.
struct NamedTensor {
    std::string name;
    std::vector<std::int64_t> shape;
    ElementType element_type = ElementType::F32;
    std::vector<double> data;

    std::int64_t element_count() const {
        return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                               std::multiplies<>());
    }

    // Matrix view: leading dimensions collapse into rows, the last
    // dimension becomes columns; 1-D tensors become a single row.
    std::int64_t matrix_rows() const {
        if (shape.size() < 2) return 1;
        return std::accumulate(shape.begin(), shape.end() - 1, std::int64_t{1},
                               std::multiplies<>());
    }
    std::int64_t matrix_cols() const { return shape.empty() ? 0 : shape.back(); }

    bool mergeable() const {
        return shape.size() >= 2 && std::min(matrix_rows(), matrix_cols()) >= 2;
    }

    Matrix to_matrix() const {
        return Eigen::Map<const Matrix>(data.data(), matrix_rows(), matrix_cols());
    }

    void assign_from_matrix(const Matrix& m) {
        if (m.rows() != matrix_rows() || m.cols() != matrix_cols())
            throw ValidationError("tensor '" + name + "': matrix shape " +
                                  std::to_string(m.rows()) + "x" +
                                  std::to_string(m.cols()) +
                                  " does not match tensor shape " +
                                  shape_to_string(shape));
        Eigen::Map<Matrix>(data.data(), m.rows(), m.cols()) = m;
    }

    /// Enforce the type invariants; throws ValidationError with the
    /// offending detail (including the flat index of the first
    /// non-finite element).
    void validate() const {
        if (shape.empty())
            throw ValidationError("tensor '" + name + "': shape must have at least one dimension");
        for (std::int64_t d : shape)
            if (d <= 0)
                throw ValidationError("tensor '" + name + "': invalid dimension in " +
                                      shape_to_string(shape));
        if (element_count() != static_cast<std::int64_t>(data.size()))
            throw ValidationError("tensor '" + name + "': shape " + shape_to_string(shape) +
                                  " implies " + std::to_string(element_count()) +
                                  " elements, found " + std::to_string(data.size()));
        for (std::size_t i = 0; i < data.size(); ++i)
            if (!std::isfinite(data[i]))
                throw ValidationError("tensor '" + name + "': non-finite element at index " +
                                      std::to_string(i));
    }
};

/// A full checkpoint: tensors keyed by name (lexicographic iteration
/// order) plus free-form metadata. Immutable by convention after load.
struct ParameterSet {
    std::map<std::string, NamedTensor> tensors;
    std::map<std::string, std::string> metadata;

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(tensors.size());
        for (const auto& [name, _] : tensors) out.push_back(name);
        return out;
    }

    const NamedTensor& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end())
            throw ValidationError("no tensor named '" + name + "'");
        return it->second;
    }

    void add(NamedTensor tensor) {
        tensor.validate();
        const std::string name = tensor.name;
        if (!tensors.emplace(name, std::move(tensor)).second)
            throw ValidationError("duplicate tensor name '" + name + "'");
    }

    void validate() const {
        for (const auto& [name, tensor] : tensors) {
            if (name != tensor.name)
                throw ValidationError("tensor keyed as '" + name + "' is named '" +
                                      tensor.name + "'");
            tensor.validate();
        }
    }
};

struct ShapeMismatch {
    std::string name;
    std::vector<std::int64_t> expected_shape;
    std::vector<std::int64_t> found_shape;  // empty when missing
    int model_index = -1;                   // which input disagrees
    std::string detail;                     // "missing", "shape", "dtype"
};

struct CompatibilityReport {
    bool compatible = true;
    std::vector<ShapeMismatch> mismatches;
};

/// Models are compatible iff every name appears in every set with
/// identical shape and element type.
inline CompatibilityReport check_compatibility(std::span<const ParameterSet> sets) {
    if (sets.size() < 2)
        throw ValidationError("check_compatibility needs at least two models, got " +
                              std::to_string(sets.size()));
    CompatibilityReport report;
    // union of names, with the first occurrence as the reference
    std::map<std::string, const NamedTensor*> reference;
    for (const auto& set : sets)
        for (const auto& [name, tensor] : set.tensors)
            reference.emplace(name, &tensor);

    for (const auto& [name, ref] : reference) {
        for (std::size_t i = 0; i < sets.size(); ++i) {
            auto it = sets[i].tensors.find(name);
            if (it == sets[i].tensors.end()) {
                report.mismatches.push_back({name, ref->shape, {},
                                             static_cast<int>(i), "missing"});
            } else if (it->second.shape != ref->shape) {
                report.mismatches.push_back({name, ref->shape, it->second.shape,
                                             static_cast<int>(i), "shape"});
            } else if (it->second.element_type != ref->element_type) {
                report.mismatches.push_back({name, ref->shape, it->second.shape,
                                             static_cast<int>(i), "dtype"});
            }
        }
    }
    report.compatible = report.mismatches.empty();
    return report;
}

inline std::string describe(const CompatibilityReport& report, std::size_t limit = 5) {
    if (report.compatible) return "compatible";
    std::ostringstream os;
    os << report.mismatches.size() << " mismatch(es):";
    for (std::size_t i = 0; i < report.mismatches.size() && i < limit; ++i) {
        const auto& m = report.mismatches[i];
        os << " ['" << m.name << "' " << m.detail << " in model " << m.model_index;
        if (m.detail == "shape")
            os << ", expected " << shape_to_string(m.expected_shape) << " found "
               << shape_to_string(m.found_shape);
        os << "]";
    }
    return os.str();
}

struct Partition {
    std::vector<std::string> mergeable;
    std::vector<std::string> passthrough;
};

/// Mergeable: >= 2 dimensions and min dimension >= 2 after collapsing
/// higher-rank tensors to matrices. Everything else (vectors, embeddings
/// with a unit dimension, ...) passes through and is merged element-wise.
inline Partition partition_parameters(const ParameterSet& set) {
    Partition p;
    for (const auto& [name, tensor] : set.tensors)
        (tensor.mergeable() ? p.mergeable : p.passthrough).push_back(name);
    return p;
}

}  // namespace lore
