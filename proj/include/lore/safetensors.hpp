#pragma once

// safetensors container: 8-byte little-endian header length, UTF-8 JSON
// header mapping tensor names to {dtype, shape, data_offsets}, then the
// raw row-major tensor bytes. Only F32 and F64 tensors are accepted.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "lore/errors.hpp"
#include "lore/tensor.hpp"

namespace lore {

namespace detail {

inline ElementType parse_dtype(const std::string& dtype, const std::string& name,
                               const std::string& path) {
    if (dtype == "F32") return ElementType::F32;
    if (dtype == "F64") return ElementType::F64;
    throw IoError(path + ": tensor '" + name + "' has unsupported dtype '" + dtype +
                  "' (supported: F32, F64)");
}

static_assert(std::endian::native == std::endian::little,
              "safetensors I/O assumes a little-endian host");

}  // namespace detail

inline ParameterSet load_checkpoint(const std::filesystem::path& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file)
        throw IoError("cannot open checkpoint file: " + path.string());

    std::uint64_t header_len = 0;
    if (!file.read(reinterpret_cast<char*>(&header_len), 8))
        throw IoError(path.string() + ": truncated file (missing header length)");

    const auto file_size = std::filesystem::file_size(path);
    if (header_len > file_size - 8)
        throw IoError(path.string() + ": header length " + std::to_string(header_len) +
                      " exceeds file size");

    std::string header_text(header_len, '\0');
    if (!file.read(header_text.data(), static_cast<std::streamsize>(header_len)))
        throw IoError(path.string() + ": truncated header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + ": malformed JSON header: " + e.what());
    }
    if (!header.is_object())
        throw IoError(path.string() + ": header is not a JSON object");

    const std::uint64_t data_size = file_size - 8 - header_len;
    std::vector<char> data(data_size);
    if (!file.read(data.data(), static_cast<std::streamsize>(data_size)))
        throw IoError(path.string() + ": truncated data section");

    ParameterSet set;
    // (start, end) spans must tile the data section without gaps or overlap
    std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;

    for (const auto& [name, info] : header.items()) {
        if (name == "__metadata__") {
            for (const auto& [k, v] : info.items())
                set.metadata[k] = v.is_string() ? v.get<std::string>() : v.dump();
            continue;
        }
        if (!info.is_object() || !info.contains("dtype") || !info.contains("shape") ||
            !info.contains("data_offsets"))
            throw IoError(path.string() + ": tensor '" + name +
                          "' entry is missing dtype/shape/data_offsets");

        NamedTensor tensor;
        tensor.name = name;
        tensor.element_type =
            detail::parse_dtype(info["dtype"].get<std::string>(), name, path.string());
        tensor.shape = info["shape"].get<std::vector<std::int64_t>>();
        if (tensor.shape.empty())
            throw IoError(path.string() + ": tensor '" + name +
                          "' has scalar shape [] (unsupported)");
        for (std::int64_t d : tensor.shape)
            if (d <= 0)
                throw IoError(path.string() + ": tensor '" + name +
                              "' has invalid shape " + shape_to_string(tensor.shape));

        const auto offsets = info["data_offsets"].get<std::vector<std::uint64_t>>();
        if (offsets.size() != 2 || offsets[1] < offsets[0] || offsets[1] > data_size)
            throw IoError(path.string() + ": tensor '" + name + "' has invalid data_offsets");
        const std::uint64_t byte_len = offsets[1] - offsets[0];
        const std::uint64_t expected =
            static_cast<std::uint64_t>(tensor.element_count()) *
            element_type_size(tensor.element_type);
        if (byte_len != expected)
            throw IoError(path.string() + ": tensor '" + name + "' spans " +
                          std::to_string(byte_len) + " bytes but shape " +
                          shape_to_string(tensor.shape) + " requires " +
                          std::to_string(expected));
        spans.emplace_back(offsets[0], offsets[1]);

        const char* src = data.data() + offsets[0];
        const std::size_t count = static_cast<std::size_t>(tensor.element_count());
        tensor.data.resize(count);
        if (tensor.element_type == ElementType::F32) {
            for (std::size_t i = 0; i < count; ++i) {
                float v;
                std::memcpy(&v, src + 4 * i, 4);
                tensor.data[i] = static_cast<double>(v);
            }
        } else {
            std::memcpy(tensor.data.data(), src, 8 * count);
        }
        for (std::size_t i = 0; i < count; ++i)
            if (!std::isfinite(tensor.data[i]))
                throw IoError(path.string() + ": non-finite element in tensor '" + name +
                              "' at index " + std::to_string(i));

        if (!set.tensors.emplace(name, std::move(tensor)).second)
            throw IoError(path.string() + ": duplicate tensor name '" + name + "'");
    }

    std::sort(spans.begin(), spans.end());
    std::uint64_t cursor = 0;
    for (const auto& [start, end] : spans) {
        if (start != cursor)
            throw IoError(path.string() + ": tensor data offsets leave a gap or overlap at byte " +
                          std::to_string(start));
        cursor = end;
    }
    if (cursor != data_size)
        throw IoError(path.string() + ": data section has " + std::to_string(data_size) +
                      " bytes but offsets cover " + std::to_string(cursor));

    return set;
}

inline void save_checkpoint(const ParameterSet& set, const std::filesystem::path& path) {
    set.validate();

    nlohmann::ordered_json header = nlohmann::ordered_json::object();
    if (!set.metadata.empty()) {
        nlohmann::ordered_json meta = nlohmann::ordered_json::object();
        for (const auto& [k, v] : set.metadata) meta[k] = v;
        header["__metadata__"] = meta;
    }

    std::uint64_t offset = 0;
    for (const auto& [name, tensor] : set.tensors) {
        const std::uint64_t byte_len =
            static_cast<std::uint64_t>(tensor.element_count()) *
            element_type_size(tensor.element_type);
        header[name] = {{"dtype", element_type_name(tensor.element_type)},
                        {"shape", tensor.shape},
                        {"data_offsets", {offset, offset + byte_len}}};
        offset += byte_len;
    }

    std::string header_text = header.dump();
    while (header_text.size() % 8 != 0) header_text.push_back(' ');
    const std::uint64_t header_len = header_text.size();

    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file)
        throw IoError("cannot open for writing: " + path.string());
    file.write(reinterpret_cast<const char*>(&header_len), 8);
    file.write(header_text.data(), static_cast<std::streamsize>(header_len));

    std::vector<char> buffer;
    for (const auto& [name, tensor] : set.tensors) {
        const std::size_t count = tensor.data.size();
        if (tensor.element_type == ElementType::F32) {
            buffer.resize(4 * count);
            for (std::size_t i = 0; i < count; ++i) {
                const double d = tensor.data[i];
                if (std::abs(d) > static_cast<double>(std::numeric_limits<float>::max()))
                    throw ValidationError("tensor '" + name + "' element " +
                                          std::to_string(i) +
                                          " overflows the F32 range on save");
                const float v = static_cast<float>(d);
                std::memcpy(buffer.data() + 4 * i, &v, 4);
            }
            file.write(buffer.data(), static_cast<std::streamsize>(buffer.size()));
        } else {
            file.write(reinterpret_cast<const char*>(tensor.data.data()),
                       static_cast<std::streamsize>(8 * count));
        }
    }
    file.flush();
    if (!file)
        throw IoError("write failed: " + path.string());
}

}  // namespace lore
