#pragma once

// Singular-value spectra of task vectors, for validating the low-rank
// assumption: small sigma_r / sigma_1 means the mass sits in a few
// leading directions.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lore/errors.hpp"
#include "lore/linalg.hpp"
#include "lore/tensor.hpp"

namespace lore {

struct SpectrumEntry {
    std::string name;
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::vector<double> top_values;  // descending
    double sigma1 = 0.0;
    double sigma_r = 0.0;
    std::int64_t rank_index = 0;  // r = ceil(rank_fraction * min(rows, cols))
    double decay_ratio = 0.0;     // sigma_r / sigma1, 0 when sigma1 == 0
};

struct SpectrumReport {
    std::vector<SpectrumEntry> entries;  // sorted by name
};

/// Spectra of (theta_a - theta_b) for every mergeable parameter.
inline SpectrumReport analyze_task_vectors(const ParameterSet& model_a,
                                           const ParameterSet& model_b,
                                           std::int64_t top_count = 100,
                                           double rank_fraction = 0.2) {
    if (top_count < 1)
        throw ValidationError("analyze_task_vectors: top_count must be >= 1");
    if (!(rank_fraction > 0.0 && rank_fraction <= 1.0))
        throw ValidationError("analyze_task_vectors: rank_fraction must be in (0,1]");
    const ParameterSet pair[] = {model_a, model_b};
    const auto report = check_compatibility(pair);
    if (!report.compatible)
        throw ValidationError("analyze_task_vectors: " + describe(report));

    SpectrumReport out;
    for (const auto& [name, tensor] : model_a.tensors) {
        if (!tensor.mergeable()) continue;
        const Matrix difference = tensor.to_matrix() - model_b.at(name).to_matrix();
        Vector values;
        try {
            values = singular_values(difference);
        } catch (const NumericalError& e) {
            throw NumericalError("parameter '" + name + "': " + e.what());
        }
        SpectrumEntry entry;
        entry.name = name;
        entry.rows = difference.rows();
        entry.cols = difference.cols();
        const Eigen::Index k = values.size();
        const Eigen::Index keep = std::min<Eigen::Index>(top_count, k);
        entry.top_values.assign(values.data(), values.data() + keep);
        entry.sigma1 = values[0];
        entry.rank_index = static_cast<std::int64_t>(
            std::ceil(rank_fraction * static_cast<double>(k)));
        entry.sigma_r = values[entry.rank_index - 1];
        entry.decay_ratio = entry.sigma1 > 0.0 ? entry.sigma_r / entry.sigma1 : 0.0;
        out.entries.push_back(std::move(entry));
    }
    return out;
}

/// CSV of all reported values plus a JSON sidecar with the per-parameter
/// summary. The sidecar path is the CSV path with a .json extension.
inline void emit_report(const SpectrumReport& report, const std::filesystem::path& path) {
    std::ofstream csv(path);
    if (!csv) throw IoError("cannot open for writing: " + path.string());
    csv << "parameter,rows,cols,index,singular_value\n";
    char buf[64];
    for (const auto& entry : report.entries) {
        for (std::size_t i = 0; i < entry.top_values.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%.17g", entry.top_values[i]);
            csv << entry.name << ',' << entry.rows << ',' << entry.cols << ',' << i << ','
                << buf << '\n';
        }
    }
    csv.flush();
    if (!csv) throw IoError("write failed: " + path.string());

    nlohmann::ordered_json sidecar = nlohmann::ordered_json::object();
    for (const auto& entry : report.entries) {
        sidecar[entry.name] = {{"rows", entry.rows},
                               {"cols", entry.cols},
                               {"rank_index", entry.rank_index},
                               {"sigma1", entry.sigma1},
                               {"sigma_r", entry.sigma_r},
                               {"decay_ratio", entry.decay_ratio}};
    }
    std::filesystem::path json_path = path;
    json_path.replace_extension(".json");
    std::ofstream js(json_path);
    if (!js) throw IoError("cannot open for writing: " + json_path.string());
    js << sidecar.dump(2) << '\n';
    js.flush();
    if (!js) throw IoError("write failed: " + json_path.string());
}

/// Parse back what emit_report wrote (used by tests and downstream tools).
inline SpectrumReport parse_report_csv(const std::filesystem::path& path) {
    std::ifstream csv(path);
    if (!csv) throw IoError("cannot open: " + path.string());
    std::string line;
    if (!std::getline(csv, line) || line != "parameter,rows,cols,index,singular_value")
        throw IoError(path.string() + ": unexpected CSV header");
    SpectrumReport report;
    SpectrumEntry* current = nullptr;
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        for (std::size_t i = 0; i <= line.size(); ++i) {
            if (i == line.size() || line[i] == ',') {
                fields.push_back(line.substr(start, i - start));
                start = i + 1;
            }
        }
        if (fields.size() != 5) throw IoError(path.string() + ": malformed CSV row");
        if (!current || current->name != fields[0]) {
            report.entries.push_back({});
            current = &report.entries.back();
            current->name = fields[0];
            current->rows = std::stoll(fields[1]);
            current->cols = std::stoll(fields[2]);
        }
        current->top_values.push_back(std::stod(fields[4]));
    }
    for (auto& entry : report.entries)
        entry.sigma1 = entry.top_values.empty() ? 0.0 : entry.top_values.front();
    return report;
}

}  // namespace lore
