#include <catch_amalgamated.hpp>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "lore/spectrum.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using lore::Matrix;
using lore::NamedTensor;
using lore::ParameterSet;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static std::atomic<int> counter{0};
        path = fs::temp_directory_path() /
               ("lore_spec_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter.fetch_add(1)));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

ParameterSet set_with_matrix(const std::string& name, const Matrix& m) {
    ParameterSet set;
    NamedTensor t;
    t.name = name;
    t.shape = {m.rows(), m.cols()};
    t.element_type = lore::ElementType::F64;
    t.data.assign(m.data(), m.data() + m.size());
    set.tensors.emplace(name, std::move(t));
    return set;
}

}  // namespace

TEST_CASE("identical models give zero spectra with decay ratio zero") {
    lore::RandomStream stream(3);
    const Matrix w = oracle::random_matrix(stream, 6, 6);
    const auto report =
        lore::analyze_task_vectors(set_with_matrix("w", w), set_with_matrix("w", w), 10, 0.2);
    REQUIRE(report.entries.size() == 1);
    CHECK(report.entries[0].sigma1 == 0.0);
    CHECK(report.entries[0].decay_ratio == 0.0);
    for (double v : report.entries[0].top_values) CHECK(v == 0.0);
}

TEST_CASE("rank index arithmetic on a 2x2 diagonal difference") {
    Matrix a = Matrix::Zero(2, 2), b = Matrix::Zero(2, 2);
    a(0, 0) = 10.0;
    a(1, 1) = 0.1;
    const auto report =
        lore::analyze_task_vectors(set_with_matrix("w", a), set_with_matrix("w", b), 10, 0.5);
    REQUIRE(report.entries.size() == 1);
    const auto& e = report.entries[0];
    CHECK(e.rank_index == 1);  // ceil(0.5 * 2)
    CHECK(e.sigma1 == Catch::Approx(10.0).margin(1e-12));
    CHECK(e.sigma_r == Catch::Approx(10.0).margin(1e-12));
    CHECK(e.decay_ratio == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("planted low-rank difference is detected") {
    lore::RandomStream stream(9);
    const Matrix base = oracle::random_matrix(stream, 20, 20);
    const Matrix bump = oracle::random_low_rank(stream, 20, 20, 2, 1.0);
    const auto report = lore::analyze_task_vectors(set_with_matrix("w", base + bump),
                                                   set_with_matrix("w", base), 100, 0.2);
    REQUIRE(report.entries.size() == 1);
    const auto& e = report.entries[0];
    REQUIRE(e.top_values.size() == 20);  // clamped to min dimension
    CHECK(e.top_values[0] > 1e-6);
    CHECK(e.top_values[1] > 1e-6);
    for (std::size_t i = 2; i < e.top_values.size(); ++i) CHECK(e.top_values[i] < 1e-9);
    CHECK(e.rank_index == 4);
    CHECK(e.decay_ratio < 1e-9);
}

TEST_CASE("passthrough parameters are skipped") {
    ParameterSet a, b;
    a.add(NamedTensor{"w", {3, 3}, lore::ElementType::F64, std::vector<double>(9, 1.0)});
    a.add(NamedTensor{"bias", {3}, lore::ElementType::F64, {1, 2, 3}});
    b = a;
    const auto report = lore::analyze_task_vectors(a, b, 5, 0.2);
    REQUIRE(report.entries.size() == 1);
    CHECK(report.entries[0].name == "w");
}

TEST_CASE("scale equivariance") {
    lore::RandomStream stream(21);
    const Matrix wa = oracle::random_matrix(stream, 8, 5);
    const Matrix wb = oracle::random_matrix(stream, 8, 5);
    const double c = -2.5;
    const auto plain =
        lore::analyze_task_vectors(set_with_matrix("w", wa), set_with_matrix("w", wb), 10, 0.4);
    const auto scaled = lore::analyze_task_vectors(set_with_matrix("w", c * wa),
                                                   set_with_matrix("w", c * wb), 10, 0.4);
    REQUIRE(plain.entries[0].top_values.size() == scaled.entries[0].top_values.size());
    for (std::size_t i = 0; i < plain.entries[0].top_values.size(); ++i)
        CHECK(scaled.entries[0].top_values[i] ==
              Catch::Approx(std::abs(c) * plain.entries[0].top_values[i]).margin(1e-10));
    CHECK(scaled.entries[0].decay_ratio ==
          Catch::Approx(plain.entries[0].decay_ratio).margin(1e-10));
}

TEST_CASE("spectrum values match the production svd and the Jacobi oracle") {
    lore::RandomStream stream(33);
    const Matrix wa = oracle::random_matrix(stream, 9, 7);
    const Matrix wb = oracle::random_matrix(stream, 9, 7);
    const auto report =
        lore::analyze_task_vectors(set_with_matrix("w", wa), set_with_matrix("w", wb), 100, 0.2);
    const lore::Vector production = lore::singular_values(wa - wb);
    const lore::Vector reference = oracle::jacobi_singular_values(wa - wb);
    REQUIRE(report.entries[0].top_values.size() == 7);
    for (Eigen::Index i = 0; i < 7; ++i) {
        CHECK(report.entries[0].top_values[static_cast<std::size_t>(i)] == production[i]);
        CHECK(report.entries[0].top_values[static_cast<std::size_t>(i)] ==
              Catch::Approx(reference[i]).margin(1e-8));
    }
}

TEST_CASE("emit_report") {
    TempDir dir;
    SECTION("empty report writes only the header") {
        const auto path = dir.path / "empty.csv";
        lore::emit_report({}, path);
        std::ifstream f(path);
        std::string line;
        REQUIRE(std::getline(f, line));
        CHECK(line == "parameter,rows,cols,index,singular_value");
        CHECK_FALSE(std::getline(f, line));
    }
    SECTION("rows appear in index order") {
        lore::SpectrumReport report;
        report.entries.push_back({"w", 4, 3, {2.5, 0.5}, 2.5, 0.5, 1, 0.2});
        const auto path = dir.path / "two.csv";
        lore::emit_report(report, path);
        std::ifstream f(path);
        std::string line;
        std::getline(f, line);
        std::getline(f, line);
        CHECK(line == "w,4,3,0,2.5");
        std::getline(f, line);
        CHECK(line == "w,4,3,1,0.5");
        CHECK_FALSE(std::getline(f, line));
        CHECK(fs::exists(dir.path / "two.json"));
    }
    SECTION("random report round-trips through the CSV exactly") {
        lore::RandomStream stream(44);
        const Matrix wa = oracle::random_matrix(stream, 12, 8);
        const Matrix wb = oracle::random_matrix(stream, 12, 8);
        const auto report = lore::analyze_task_vectors(set_with_matrix("w", wa),
                                                       set_with_matrix("w", wb), 100, 0.2);
        const auto path = dir.path / "rt.csv";
        lore::emit_report(report, path);
        const auto back = lore::parse_report_csv(path);
        REQUIRE(back.entries.size() == 1);
        REQUIRE(back.entries[0].top_values.size() == report.entries[0].top_values.size());
        for (std::size_t i = 0; i < report.entries[0].top_values.size(); ++i)
            CHECK(back.entries[0].top_values[i] == report.entries[0].top_values[i]);
        // JSON sidecar carries the summary numbers
        std::ifstream js(dir.path / "rt.json");
        nlohmann::json sidecar;
        js >> sidecar;
        CHECK(sidecar.at("w").at("sigma1").get<double>() == report.entries[0].sigma1);
        CHECK(sidecar.at("w").at("decay_ratio").get<double>() ==
              report.entries[0].decay_ratio);
    }
}

TEST_CASE("analyze rejects incompatible or invalid input") {
    lore::RandomStream stream(55);
    const Matrix w = oracle::random_matrix(stream, 4, 4);
    const auto a = set_with_matrix("w", w);
    const auto b = set_with_matrix("x", w);
    CHECK_THROWS_AS(lore::analyze_task_vectors(a, b, 10, 0.2), lore::ValidationError);
    CHECK_THROWS_AS(lore::analyze_task_vectors(a, a, 0, 0.2), lore::ValidationError);
    CHECK_THROWS_AS(lore::analyze_task_vectors(a, a, 10, 1.5), lore::ValidationError);
}
