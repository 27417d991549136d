#include <catch_amalgamated.hpp>

#include <atomic>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <unistd.h>

#include "lore/rng.hpp"
#include "lore/safetensors.hpp"

namespace fs = std::filesystem;
using lore::ElementType;
using lore::NamedTensor;
using lore::ParameterSet;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static std::atomic<int> counter{0};
        path = fs::temp_directory_path() /
               ("lore_st_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter.fetch_add(1)));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

void write_raw(const fs::path& path, const std::string& header,
               const std::vector<char>& data) {
    std::string padded = header;
    while (padded.size() % 8 != 0) padded.push_back(' ');
    const std::uint64_t len = padded.size();
    std::ofstream f(path, std::ios::binary);
    f.write(reinterpret_cast<const char*>(&len), 8);
    f.write(padded.data(), static_cast<std::streamsize>(padded.size()));
    f.write(data.data(), static_cast<std::streamsize>(data.size()));
}

std::vector<char> f32_bytes(const std::vector<float>& values) {
    std::vector<char> out(4 * values.size());
    std::memcpy(out.data(), values.data(), out.size());
    return out;
}

std::string file_bytes(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return s;
}

ParameterSet random_set(std::uint64_t seed, int tensors) {
    lore::RandomStream stream(seed);
    ParameterSet set;
    for (int t = 0; t < tensors; ++t) {
        NamedTensor tensor;
        tensor.name = "t" + std::to_string(t);
        const auto rows = 1 + stream.next_u64() % 6;
        const auto cols = 1 + stream.next_u64() % 6;
        tensor.shape = {static_cast<std::int64_t>(rows), static_cast<std::int64_t>(cols)};
        tensor.element_type = stream.uniform() < 0.5 ? ElementType::F32 : ElementType::F64;
        tensor.data.resize(rows * cols);
        for (auto& v : tensor.data) {
            v = stream.normal();
            if (tensor.element_type == ElementType::F32)
                v = static_cast<double>(static_cast<float>(v));
        }
        set.tensors.emplace(tensor.name, std::move(tensor));
    }
    return set;
}

}  // namespace

TEST_CASE("loads a hand-crafted identity tensor") {
    TempDir dir;
    const auto path = dir.path / "id.safetensors";
    write_raw(path, R"({"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}})",
              f32_bytes({1.f, 0.f, 0.f, 1.f}));
    const auto set = lore::load_checkpoint(path);
    REQUIRE(set.tensors.size() == 1);
    const auto& w = set.at("w");
    CHECK(w.shape == std::vector<std::int64_t>{2, 2});
    CHECK(w.data == std::vector<double>{1, 0, 0, 1});
}

TEST_CASE("rejects a NaN element naming the tensor and index") {
    TempDir dir;
    const auto path = dir.path / "nan.safetensors";
    write_raw(path, R"({"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}})",
              f32_bytes({1.f, 0.f, 0.f, std::numeric_limits<float>::quiet_NaN()}));
    try {
        (void)lore::load_checkpoint(path);
        FAIL("expected an error");
    } catch (const lore::IoError& e) {
        const std::string what = e.what();
        CHECK(what.find("'w'") != std::string::npos);
        CHECK(what.find("index 3") != std::string::npos);
    }
}

TEST_CASE("save then load round-trips bit-exactly") {
    TempDir dir;
    const auto set = random_set(2024, 3);
    const auto path_a = dir.path / "a.safetensors";
    const auto path_b = dir.path / "b.safetensors";
    lore::save_checkpoint(set, path_a);
    const auto reloaded = lore::load_checkpoint(path_a);

    REQUIRE(reloaded.tensors.size() == set.tensors.size());
    for (const auto& [name, tensor] : set.tensors) {
        const auto& other = reloaded.at(name);
        CHECK(other.shape == tensor.shape);
        CHECK(other.element_type == tensor.element_type);
        CHECK(other.data == tensor.data);  // bit-equal
    }

    // re-serialization is byte-identical
    lore::save_checkpoint(reloaded, path_b);
    CHECK(file_bytes(path_a) == file_bytes(path_b));
}

TEST_CASE("round-trip across many random sets") {
    TempDir dir;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto set = random_set(seed, 5);
        const auto path = dir.path / "x.safetensors";
        lore::save_checkpoint(set, path);
        const auto reloaded = lore::load_checkpoint(path);
        for (const auto& [name, tensor] : set.tensors)
            REQUIRE(reloaded.at(name).data == tensor.data);
    }
}

TEST_CASE("degenerate checkpoints") {
    TempDir dir;
    SECTION("empty set") {
        const auto path = dir.path / "empty.safetensors";
        lore::save_checkpoint(ParameterSet{}, path);
        const auto set = lore::load_checkpoint(path);
        CHECK(set.tensors.empty());
    }
    SECTION("zero vector") {
        ParameterSet set;
        set.add(NamedTensor{"z", {4}, ElementType::F32, {0, 0, 0, 0}});
        const auto path = dir.path / "zero.safetensors";
        lore::save_checkpoint(set, path);
        CHECK(lore::load_checkpoint(path).at("z").data == std::vector<double>(4, 0.0));
    }
    SECTION("metadata round-trips") {
        ParameterSet set;
        set.metadata["architecture"] = "toy";
        set.add(NamedTensor{"z", {1, 2}, ElementType::F64, {1, 2}});
        const auto path = dir.path / "meta.safetensors";
        lore::save_checkpoint(set, path);
        CHECK(lore::load_checkpoint(path).metadata.at("architecture") == "toy");
    }
}

TEST_CASE("two loads of the same file are identical") {
    TempDir dir;
    const auto path = dir.path / "det.safetensors";
    lore::save_checkpoint(random_set(77, 4), path);
    const auto first = lore::load_checkpoint(path);
    const auto second = lore::load_checkpoint(path);
    CHECK(first.names() == second.names());
    for (const auto& [name, tensor] : first.tensors)
        CHECK(second.at(name).data == tensor.data);
}

TEST_CASE("malformed containers are rejected with clear errors") {
    TempDir dir;
    const auto path = dir.path / "bad.safetensors";

    SECTION("missing file") {
        CHECK_THROWS_AS(lore::load_checkpoint(dir.path / "nope.safetensors"), lore::IoError);
    }
    SECTION("bad JSON") {
        write_raw(path, R"({"w": oops)", {});
        CHECK_THROWS_AS(lore::load_checkpoint(path), lore::IoError);
    }
    SECTION("unsupported dtype") {
        write_raw(path, R"({"w":{"dtype":"BF16","shape":[2],"data_offsets":[0,4]}})",
                  std::vector<char>(4, 0));
        try {
            (void)lore::load_checkpoint(path);
            FAIL("expected an error");
        } catch (const lore::IoError& e) {
            CHECK(std::string(e.what()).find("BF16") != std::string::npos);
        }
    }
    SECTION("offsets not matching the shape") {
        write_raw(path, R"({"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,12]}})",
                  std::vector<char>(12, 0));
        CHECK_THROWS_AS(lore::load_checkpoint(path), lore::IoError);
    }
    SECTION("gap in the data section") {
        write_raw(path,
                  R"({"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},)"
                  R"("b":{"dtype":"F32","shape":[1],"data_offsets":[8,12]}})",
                  std::vector<char>(12, 0));
        CHECK_THROWS_AS(lore::load_checkpoint(path), lore::IoError);
    }
    SECTION("scalar shape") {
        write_raw(path, R"({"w":{"dtype":"F32","shape":[],"data_offsets":[0,4]}})",
                  std::vector<char>(4, 0));
        CHECK_THROWS_AS(lore::load_checkpoint(path), lore::IoError);
    }
    SECTION("truncated data") {
        write_raw(path, R"({"w":{"dtype":"F64","shape":[4],"data_offsets":[0,32]}})",
                  std::vector<char>(16, 0));
        CHECK_THROWS_AS(lore::load_checkpoint(path), lore::IoError);
    }
}

TEST_CASE("saving rejects values that overflow F32") {
    TempDir dir;
    ParameterSet set;
    set.add(NamedTensor{"w", {1, 2}, ElementType::F32, {1.0, 1e39}});
    CHECK_THROWS_AS(lore::save_checkpoint(set, dir.path / "o.safetensors"),
                    lore::ValidationError);
}
