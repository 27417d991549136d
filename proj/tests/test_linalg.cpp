#include <catch_amalgamated.hpp>

#include <cmath>

#include "lore/linalg.hpp"
#include "lore/rng.hpp"
#include "oracles.hpp"

using lore::Matrix;
using lore::Vector;

namespace {

Matrix diag2(double a, double b) {
    Matrix m = Matrix::Zero(2, 2);
    m(0, 0) = a;
    m(1, 1) = b;
    return m;
}

}  // namespace

TEST_CASE("svd of simple matrices") {
    SECTION("diagonal") {
        const auto dec = lore::svd(diag2(3, 1));
        REQUIRE(dec.singular_values.size() == 2);
        CHECK(dec.singular_values[0] == Catch::Approx(3.0).margin(1e-12));
        CHECK(dec.singular_values[1] == Catch::Approx(1.0).margin(1e-12));
    }
    SECTION("zero matrix") {
        const auto dec = lore::svd(Matrix::Zero(4, 3));
        REQUIRE(dec.singular_values.size() == 3);
        for (int i = 0; i < 3; ++i) CHECK(dec.singular_values[i] == 0.0);
    }
}

TEST_CASE("svd satisfies its contract on random matrices") {
    lore::RandomStream stream(101);
    for (int trial = 0; trial < 8; ++trial) {
        const auto rows = 2 + static_cast<Eigen::Index>(stream.next_u64() % 15);
        const auto cols = 2 + static_cast<Eigen::Index>(stream.next_u64() % 15);
        const Matrix m = oracle::random_matrix(stream, rows, cols);
        const auto dec = lore::svd(m);
        const auto k = std::min(rows, cols);

        REQUIRE(dec.u.rows() == rows);
        REQUIRE(dec.u.cols() == k);
        REQUIRE(dec.vt.rows() == k);
        REQUIRE(dec.vt.cols() == cols);

        // descending, non-negative
        for (Eigen::Index i = 0; i + 1 < k; ++i)
            CHECK(dec.singular_values[i] >= dec.singular_values[i + 1]);
        CHECK(dec.singular_values[k - 1] >= 0.0);

        // orthonormality within 1e-10
        CHECK((dec.u.transpose() * dec.u - Matrix::Identity(k, k)).norm() < 1e-10);
        CHECK((dec.vt * dec.vt.transpose() - Matrix::Identity(k, k)).norm() < 1e-10);

        // reconstruction within 1e-8 relative
        CHECK((dec.reconstruct() - m).norm() <= 1e-8 * m.norm());

        // spectrum matches the independent Jacobi oracle
        const Vector ref = oracle::jacobi_singular_values(m);
        for (Eigen::Index i = 0; i < k; ++i)
            CHECK(dec.singular_values[i] == Catch::Approx(ref[i]).margin(1e-8));
    }
}

TEST_CASE("svd random 6x4 against the Jacobi oracle") {
    lore::RandomStream stream(42);
    const Matrix m = oracle::random_matrix(stream, 6, 4);
    const auto dec = lore::svd(m);
    CHECK((dec.reconstruct() - m).norm() <= 1e-8 * m.norm());
    const Vector ref = oracle::jacobi_singular_values(m);
    for (Eigen::Index i = 0; i < 4; ++i)
        CHECK(dec.singular_values[i] == Catch::Approx(ref[i]).margin(1e-8));
}

TEST_CASE("svt soft-thresholds the spectrum") {
    SECTION("diagonal example") {
        const Matrix out = lore::svt(diag2(3, 1), 1.0);
        CHECK((out - diag2(2, 0)).norm() < 1e-12);
    }
    SECTION("zero threshold is the identity") {
        lore::RandomStream stream(7);
        const Matrix m = oracle::random_matrix(stream, 5, 7);
        CHECK((lore::svt(m, 0.0) - m).norm() <= 1e-8 * m.norm());
    }
    SECTION("rejects negative threshold") {
        CHECK_THROWS_AS(lore::svt(diag2(1, 1), -0.5), lore::ValidationError);
    }
    SECTION("rejects non-finite input") {
        Matrix bad = Matrix::Zero(2, 2);
        bad(0, 1) = std::numeric_limits<double>::quiet_NaN();
        CHECK_THROWS_AS(lore::svt(bad, 0.1), lore::ValidationError);
    }
}

TEST_CASE("svt output rank equals the count of singular values above the threshold") {
    lore::RandomStream stream(55);
    for (double mu : {0.0, 0.05, 0.5, 2.0}) {
        const Matrix m = oracle::random_matrix(stream, 9, 6);
        const Matrix out = lore::svt(m, mu);
        const Vector s = oracle::jacobi_singular_values(m);
        Eigen::Index expected = 0;
        for (Eigen::Index i = 0; i < s.size(); ++i)
            if (s[i] > mu) ++expected;
        CHECK(oracle::jacobi_rank(out) == expected);
    }
}

TEST_CASE("svt is the proximal map of the scaled nuclear norm") {
    // g(X) = ||X - A||_F^2 + 2 mu ||X||_* is minimized at svt(A; mu)
    lore::RandomStream stream(99);
    const double mu = 0.3;
    const Matrix a = oracle::random_matrix(stream, 5, 4);
    const Matrix x = lore::svt(a, mu);
    auto g = [&](const Matrix& cand) {
        return (cand - a).squaredNorm() + 2.0 * mu * lore::nuclear_norm(cand);
    };
    const double best = g(x);
    for (int trial = 0; trial < 50; ++trial) {
        Matrix pert = oracle::random_matrix(stream, 5, 4);
        pert *= (0.1 * stream.uniform()) / pert.norm();
        CHECK(best <= g(x + pert) + 1e-9);
    }
}

TEST_CASE("svt displacement and composition properties") {
    lore::RandomStream stream(123);
    for (int trial = 0; trial < 6; ++trial) {
        const auto rows = 3 + static_cast<Eigen::Index>(stream.next_u64() % 10);
        const auto cols = 3 + static_cast<Eigen::Index>(stream.next_u64() % 10);
        const Matrix m = oracle::random_matrix(stream, rows, cols);
        const double mu1 = 0.2 * stream.uniform();
        const double mu2 = 0.2 * stream.uniform();

        // each singular value moves by at most mu
        CHECK((lore::svt(m, mu1) - m).norm() <=
              mu1 * std::sqrt(static_cast<double>(std::min(rows, cols))) + 1e-12);

        // thresholding composes additively
        const Matrix once = lore::svt(m, mu1 + mu2);
        const Matrix twice = lore::svt(lore::svt(m, mu1), mu2);
        CHECK((once - twice).norm() < 1e-8);
    }
}

TEST_CASE("truncate_rank") {
    SECTION("low-rank input is returned unchanged") {
        lore::RandomStream stream(5);
        const Matrix m = oracle::random_matrix(stream, 6, 1) * oracle::random_matrix(stream, 1, 5);
        CHECK((lore::truncate_rank(m, 3) - m).norm() <= 1e-8 * m.norm());
    }
    SECTION("diagonal Eckart-Young") {
        Matrix m = Matrix::Zero(3, 3);
        m(0, 0) = 3;
        m(1, 1) = 2;
        m(2, 2) = 1;
        Matrix expected = m;
        expected(2, 2) = 0;
        CHECK((lore::truncate_rank(m, 2) - expected).norm() < 1e-12);
    }
    SECTION("approximation error equals the residual spectrum") {
        lore::RandomStream stream(17);
        const Matrix m = oracle::random_matrix(stream, 10, 10);
        const Matrix t = lore::truncate_rank(m, 4);
        const Vector s = oracle::jacobi_singular_values(m);
        double expected_sq = 0.0;
        for (Eigen::Index i = 4; i < 10; ++i) expected_sq += s[i] * s[i];
        CHECK((t - m).norm() == Catch::Approx(std::sqrt(expected_sq)).margin(1e-8));
    }
    SECTION("idempotent at fixed rank") {
        lore::RandomStream stream(29);
        const Matrix m = oracle::random_matrix(stream, 7, 9);
        const Matrix once = lore::truncate_rank(m, 3);
        CHECK((lore::truncate_rank(once, 3) - once).norm() < 1e-10);
    }
    SECTION("rejects non-positive rank") {
        CHECK_THROWS_AS(lore::truncate_rank(diag2(1, 1), 0), lore::ValidationError);
    }
}

TEST_CASE("norms") {
    SECTION("identity") {
        const Matrix eye = Matrix::Identity(3, 3);
        CHECK(lore::frobenius_norm(eye) == Catch::Approx(std::sqrt(3.0)).margin(1e-14));
        CHECK(lore::nuclear_norm(eye) == Catch::Approx(3.0).margin(1e-12));
    }
    SECTION("zero matrix") {
        CHECK(lore::frobenius_norm(Matrix::Zero(4, 2)) == 0.0);
        CHECK(lore::nuclear_norm(Matrix::Zero(4, 2)) == 0.0);
    }
    SECTION("norm inequalities against the oracle") {
        lore::RandomStream stream(31);
        const Matrix m = oracle::random_matrix(stream, 4, 4);
        const Vector s = oracle::jacobi_singular_values(m);
        const double nuc = lore::nuclear_norm(m);
        const double frob = lore::frobenius_norm(m);
        CHECK(nuc == Catch::Approx(s.sum()).margin(1e-10));
        CHECK(frob == Catch::Approx(s.norm()).margin(1e-10));
        CHECK(nuc >= frob - 1e-10);
        CHECK(frob >= s[0] - 1e-10);
    }
}
