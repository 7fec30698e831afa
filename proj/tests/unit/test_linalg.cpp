#include "moeq/errors.hpp"
#include "moeq/linalg.hpp"
#include "test_support.hpp"

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace moeq {
namespace {

using test::max_abs_diff;
using test::random_matrix;

Matrix random_spd(std::mt19937_64 &rng, std::size_t n) {
    const Matrix a = random_matrix(rng, 2 * n, n);
    Matrix h = gram(a);
    for (std::size_t i = 0; i < n; ++i) {
        h(i, i) += 0.1;
    }
    return h;
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    std::mt19937_64 rng(1);
    const Matrix a = random_matrix(rng, 3, 5);
    EXPECT_EQ(matmul(Matrix::identity(3), a), a);
}

TEST(Matmul, HandExpandedProduct) {
    const Matrix a{{1, 2}, {3, 4}};
    const Matrix b{{1}, {1}};
    EXPECT_EQ(matmul(a, b), (Matrix{{3}, {7}}));
}

TEST(Matmul, ZeroMatrixAnnihilates) {
    std::mt19937_64 rng(2);
    const Matrix a = random_matrix(rng, 4, 3);
    EXPECT_EQ(matmul(a, Matrix(3, 2)), Matrix(4, 2));
}

TEST(Matmul, ShapeMismatchThrows) {
    EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), InvalidInput);
}

TEST(Matmul, TransposedVariantMatchesExplicitTranspose) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix a = random_matrix(rng, 5, 7);
        const Matrix b = random_matrix(rng, 4, 7);
        EXPECT_LE(max_abs_diff(matmul_transposed(a, b), matmul(a, b.transposed())), 1e-12);
    }
}

TEST(Gram, ExactlySymmetricAndMatchesProduct) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix a = random_matrix(rng, 9, 6);
        const Matrix g = gram(a);
        EXPECT_LE(max_abs_diff(g, matmul(a.transposed(), a)), 1e-12);
        EXPECT_EQ(g, g.transposed());
    }
}

TEST(Cholesky, IdentityFactorsToIdentity) { EXPECT_EQ(cholesky(Matrix::identity(4)), Matrix::identity(4)); }

TEST(Cholesky, TwoByTwoHandFactor) {
    const Matrix l = cholesky(Matrix{{4, 2}, {2, 3}});
    EXPECT_DOUBLE_EQ(l(0, 0), 2.0);
    EXPECT_DOUBLE_EQ(l(0, 1), 0.0);
    EXPECT_DOUBLE_EQ(l(1, 0), 1.0);
    EXPECT_NEAR(l(1, 1), std::sqrt(2.0), 1e-15);
    EXPECT_LE(max_abs_diff(matmul_transposed(l, l), Matrix{{4, 2}, {2, 3}}), 1e-14);
}

TEST(Cholesky, IndefiniteMatrixReportsPivot) {
    try {
        cholesky(Matrix{{1, 2}, {2, 1}});
        FAIL() << "expected FactorizationError";
    } catch (const FactorizationError &e) {
        EXPECT_EQ(e.pivot(), 1u);
    }
}

TEST(Cholesky, RejectsAsymmetricInput) { EXPECT_THROW(cholesky(Matrix{{2, 1}, {0, 2}}), InvalidInput); }

TEST(Cholesky, RandomSpdRecomposes) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const Matrix h = random_spd(rng, 8);
        const Matrix l = cholesky(h);
        for (std::size_t i = 0; i < 8; ++i) {
            for (std::size_t j = i + 1; j < 8; ++j) {
                EXPECT_EQ(l(i, j), 0.0);
            }
        }
        EXPECT_LE(max_abs_diff(matmul_transposed(l, l), h), 1e-10);
    }
}

TEST(InvertSpd, IdentityAndDiagonal) {
    EXPECT_EQ(invert_spd(Matrix::identity(2)), Matrix::identity(2));
    const Matrix inv = invert_spd(Matrix{{2, 0}, {0, 4}});
    EXPECT_DOUBLE_EQ(inv(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(inv(1, 1), 0.25);
    EXPECT_EQ(inv(0, 1), 0.0);
}

TEST(InvertSpd, ResidualOnRandomSpd) {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        const Matrix h = random_spd(rng, 8);
        const Matrix inv = invert_spd(h);
        EXPECT_LE(frobenius_norm(subtract(matmul(h, inv), Matrix::identity(8))), 1e-6);
        EXPECT_EQ(inv, inv.transposed());
    }
}

TEST(InverseCholeskyUpper, RecomposesInverse) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix h = random_spd(rng, 6);
        const Matrix u = inverse_cholesky_upper(h);
        for (std::size_t i = 0; i < 6; ++i) {
            EXPECT_GT(u(i, i), 0.0);
            for (std::size_t j = 0; j < i; ++j) {
                EXPECT_EQ(u(i, j), 0.0);
            }
        }
        EXPECT_LE(max_abs_diff(matmul(u.transposed(), u), invert_spd(h)), 1e-10);
    }
}

TEST(InvertSpd, AgreesWithEigen) {
    std::mt19937_64 rng(8);
    const Matrix h = random_spd(rng, 7);
    Eigen::MatrixXd e(7, 7);
    for (std::size_t i = 0; i < 7; ++i) {
        for (std::size_t j = 0; j < 7; ++j) {
            e(i, j) = h(i, j);
        }
    }
    const Eigen::MatrixXd ref = e.inverse();
    const Matrix inv = invert_spd(h);
    for (std::size_t i = 0; i < 7; ++i) {
        for (std::size_t j = 0; j < 7; ++j) {
            EXPECT_NEAR(inv(i, j), ref(i, j), 1e-9 * std::max(1.0, std::abs(ref(i, j))));
        }
    }
}

TEST(Matrix, ConstructorRejectsSizeMismatch) { EXPECT_THROW(Matrix(2, 2, std::vector<double>(3)), InvalidInput); }

TEST(Matrix, ScaleRowsAndColumns) {
    const Matrix m{{1, 2}, {3, 4}};
    const std::vector<double> f{2, 3};
    EXPECT_EQ(scale_rows(m, f), (Matrix{{2, 4}, {9, 12}}));
    EXPECT_EQ(scale_cols(m, f), (Matrix{{2, 6}, {6, 12}}));
}

} // namespace
} // namespace moeq
