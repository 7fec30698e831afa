#include "moeq/errors.hpp"
#include "moeq/quant.hpp"
#include "test_support.hpp"

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace moeq {
namespace {

using test::max_abs_diff;
using test::random_matrix;

const QuantSpec kInt4 = QuantSpec::symmetric(4);

// Per-row power-of-two steps with codes drawn from the full range, so w, max|w| / q_max
// and every code * step are exact.
Matrix on_grid(std::mt19937_64 &rng, std::size_t rows, std::size_t cols, const QuantSpec &spec) {
    std::uniform_int_distribution<int> code(spec.q_min, spec.q_max);
    std::uniform_int_distribution<int> exponent(-8, 0);
    Matrix w(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const double s = std::ldexp(1.0, exponent(rng));
        for (std::size_t c = 0; c < cols; ++c) {
            w(r, c) = code(rng) * s;
        }
        w(r, 0) = spec.q_max * s; // pins max|w| to q_max * s
    }
    return w;
}

double loss_oracle(const Matrix &w, const Matrix &w_hat, const Matrix &x) {
    double total = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t r = 0; r < w.rows(); ++r) {
            double e = 0.0;
            for (std::size_t c = 0; c < w.cols(); ++c) {
                e += (w(r, c) - w_hat(r, c)) * x(i, c);
            }
            total += e * e;
        }
    }
    return total;
}

TEST(QuantSpec, SymmetricRange) {
    EXPECT_EQ(kInt4.q_max, 7);
    EXPECT_EQ(kInt4.q_min, -7);
    EXPECT_EQ(QuantSpec::symmetric(8).q_max, 127);
    EXPECT_THROW(QuantSpec::symmetric(1), ConfigError);
    EXPECT_THROW(QuantSpec::symmetric(9), ConfigError);
}

TEST(ComputeSteps, HandEvaluatedRow) {
    const auto s = compute_steps(Matrix{{0.5, -1.0, 0.25}}, kInt4);
    EXPECT_DOUBLE_EQ(s[0], 1.0 / 7.0);
}

TEST(ComputeSteps, ZeroRowGetsUnitStep) { EXPECT_EQ(compute_steps(Matrix(1, 4), kInt4)[0], 1.0); }

TEST(ComputeSteps, HomogeneousInRowScale) {
    const auto a = compute_steps(Matrix{{0.3, -0.9}}, kInt4);
    const auto b = compute_steps(Matrix{{0.6, -1.8}}, kInt4);
    EXPECT_DOUBLE_EQ(b[0], 2.0 * a[0]);
}

TEST(Quantize, HalfToEvenCodes) {
    const Matrix w{{0.5, -1.0, 0.25}};
    const auto q = quantize(w, compute_steps(w, kInt4), kInt4);
    EXPECT_EQ(q.codes, (std::vector<std::int8_t>{4, -7, 2}));
}

TEST(Quantize, SaturatesAtRangeEnds) {
    const std::vector<double> s{0.1};
    const auto q = quantize(Matrix{{1.0, -1.0}}, s, kInt4);
    EXPECT_EQ(q.codes, (std::vector<std::int8_t>{7, -7}));
}

TEST(Quantize, RejectsNonPositiveStep) {
    const std::vector<double> s{0.0};
    EXPECT_THROW(quantize(Matrix{{1.0}}, s, kInt4), InvalidInput);
}

TEST(Quantize, OnGridRoundTripIsExact) {
    std::mt19937_64 rng(1);
    for (std::uint32_t bits : {2u, 3u, 4u, 8u}) {
        const QuantSpec spec = QuantSpec::symmetric(bits);
        const Matrix w = on_grid(rng, 6, 9, spec);
        EXPECT_EQ(dequantize(rtn_quantize(w, spec)), w);
    }
}

TEST(Dequantize, ZeroCodesGiveZeroMatrix) {
    QuantizedTensor q{.rows = 2, .cols = 3, .codes = std::vector<std::int8_t>(6, 0), .steps = {0.5, 2.0}};
    EXPECT_EQ(dequantize(q), Matrix(2, 3));
}

TEST(Quantize, ErrorWithinHalfStep) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 100; ++trial) {
        const Matrix w = random_matrix(rng, 8, 12);
        const auto steps = compute_steps(w, kInt4);
        const Matrix w_hat = dequantize(quantize(w, steps, kInt4));
        for (std::size_t r = 0; r < w.rows(); ++r) {
            for (std::size_t c = 0; c < w.cols(); ++c) {
                EXPECT_LE(std::abs(w(r, c) - w_hat(r, c)), steps[r] / 2 + 1e-12);
            }
        }
    }
}

TEST(Rtn, IdenticalRowsGiveIdenticalCodes) {
    const Matrix w{{0.1, -0.4, 0.33}, {0.1, -0.4, 0.33}};
    const auto q = rtn_quantize(w, kInt4);
    for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_EQ(q.code(0, c), q.code(1, c));
    }
}

TEST(QuantLoss, ZeroForExactReconstruction) {
    std::mt19937_64 rng(3);
    const Matrix w = random_matrix(rng, 4, 5);
    EXPECT_EQ(quant_loss(w, w, random_matrix(rng, 7, 5)), 0.0);
}

TEST(QuantLoss, IdentityActivationsGiveFrobeniusError) {
    std::mt19937_64 rng(4);
    const Matrix w = random_matrix(rng, 4, 5);
    const Matrix w_hat = random_matrix(rng, 4, 5);
    EXPECT_NEAR(quant_loss(w, w_hat, Matrix::identity(5)), frobenius_norm_sq(subtract(w, w_hat)), 1e-12);
}

TEST(QuantLoss, MatchesTokenLoopOracle) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const Matrix w = random_matrix(rng, 6, 8);
        const Matrix w_hat = dequantize(rtn_quantize(w, kInt4));
        const Matrix x = random_matrix(rng, 20, 8);
        const double oracle = loss_oracle(w, w_hat, x);
        EXPECT_NEAR(quant_loss(w, w_hat, x) / oracle, 1.0, 1e-9);
    }
}

TEST(Hessian, SingleTokenOuterProduct) { EXPECT_EQ(hessian(Matrix{{1, 2}}), (Matrix{{1, 2}, {2, 4}})); }

TEST(Hessian, OrthonormalTokensGiveIdentity) {
    const double r = 1.0 / std::sqrt(2.0);
    const Matrix h = hessian(Matrix{{r, r}, {r, -r}});
    EXPECT_LE(max_abs_diff(h, Matrix::identity(2)), 1e-15);
}

TEST(Hessian, SymmetricPositiveSemidefinite) {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 30; ++trial) {
        const Matrix h = hessian(random_matrix(rng, 5, 9));
        EXPECT_EQ(h, h.transposed());
        Eigen::MatrixXd e(9, 9);
        for (std::size_t i = 0; i < 9; ++i) {
            for (std::size_t j = 0; j < 9; ++j) {
                e(i, j) = h(i, j);
            }
        }
        EXPECT_GE(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(e).eigenvalues().minCoeff(), -1e-9);
    }
}

TEST(Gptq, IdentityHessianEqualsRtn) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix w = random_matrix(rng, 8, 8);
        EXPECT_EQ(gptq_quantize(w, Matrix::identity(8), kInt4), rtn_quantize(w, kInt4));
    }
}

TEST(Gptq, OnGridWeightsRecoverExactly) {
    std::mt19937_64 rng(8);
    const Matrix w = on_grid(rng, 6, 10, kInt4);
    const Matrix x = random_matrix(rng, 40, 10);
    const auto q = gptq_quantize(w, hessian(x), kInt4);
    EXPECT_EQ(dequantize(q), w);
    EXPECT_EQ(quant_loss(w, dequantize(q), x), 0.0);
}

TEST(Gptq, BeatsRtnOnCorrelatedActivations) {
    std::mt19937_64 rng(9);
    const Matrix mix = random_matrix(rng, 16, 16);
    int wins = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix x = matmul(random_matrix(rng, 64, 16), mix);
        const Matrix w = random_matrix(rng, 16, 16);
        const double g = quant_loss(w, dequantize(gptq_quantize(w, hessian(x), kInt4)), x);
        const double r = quant_loss(w, dequantize(rtn_quantize(w, kInt4)), x);
        wins += g <= r;
    }
    EXPECT_GE(wins, 18);
}

TEST(Gptq, RankDeficientHessianIsDamped) {
    std::mt19937_64 rng(10);
    const Matrix w = random_matrix(rng, 4, 6);
    const Matrix x = random_matrix(rng, 2, 6); // rank 2 < 6
    EXPECT_NO_THROW(gptq_quantize(w, hessian(x), kInt4));
    EXPECT_THROW(gptq_quantize(w, hessian(x), kInt4, 0.0), FactorizationError);
}

TEST(Gptq, DeadInputChannelsAreTolerated) {
    std::mt19937_64 rng(11);
    const Matrix w = random_matrix(rng, 4, 5);
    Matrix x = random_matrix(rng, 30, 5);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        x(i, 2) = 0.0;
    }
    const auto q = gptq_quantize(w, hessian(x), kInt4, 0.0);
    EXPECT_EQ(q.rows, 4u);
}

TEST(Awq, ConstantActivationsReduceToRtn) {
    std::mt19937_64 rng(12);
    const Matrix w = random_matrix(rng, 6, 8);
    const Matrix x(10, 8, 1.0);
    const auto r = awq_scale_search(w, x, kInt4);
    for (double s : r.scales) {
        EXPECT_EQ(s, 1.0);
    }
    EXPECT_EQ(r.quantized, rtn_quantize(w, kInt4));
    EXPECT_EQ(r.alpha, 0.0);
}

TEST(Awq, NeverWorseThanRtn) {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 30; ++trial) {
        const Matrix w = random_matrix(rng, 6, 8);
        Matrix x = random_matrix(rng, 24, 8);
        x = scale_cols(x, std::vector<double>{0.1, 5, 1, 1, 0.3, 2, 1, 8});
        const auto r = awq_scale_search(w, x, kInt4);
        EXPECT_LE(r.loss, quant_loss(w, dequantize(rtn_quantize(w, kInt4)), x) * (1 + 1e-12));
    }
}

TEST(Awq, ReturnsExhaustiveGridMinimum) {
    std::mt19937_64 rng(14);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix w = random_matrix(rng, 5, 6);
        const Matrix x = scale_cols(random_matrix(rng, 16, 6), std::vector<double>{0.2, 3, 1, 0.5, 6, 1});
        const auto r = awq_scale_search(w, x, kInt4, 20);
        double best = std::numeric_limits<double>::infinity();
        for (double a : awq_alpha_grid(20)) {
            best = std::min(best, awq_candidate_loss(w, x, {}, kInt4, a));
        }
        EXPECT_EQ(r.loss, best);
        EXPECT_EQ(awq_candidate_loss(w, x, {}, kInt4, r.alpha), r.loss);
    }
}

TEST(Awq, GridSpansUnitInterval) {
    const auto g = awq_alpha_grid(5);
    EXPECT_EQ(g, (std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0}));
    EXPECT_EQ(awq_alpha_grid(1), std::vector<double>{0.0});
}

TEST(Hadamard, TwiceRestoresWeight) {
    std::mt19937_64 rng(15);
    const Matrix w = random_matrix(rng, 5, 16);
    EXPECT_LE(max_abs_diff(hadamard_preprocess(hadamard_preprocess(w)), w), 1e-10);
}

TEST(Hadamard, PreservesNormAndOutputs) {
    std::mt19937_64 rng(16);
    for (std::size_t n : {1u, 2u, 8u, 32u}) {
        const Matrix w = random_matrix(rng, 4, n);
        const Matrix x = random_matrix(rng, 7, n);
        const Matrix t = hadamard_matrix(n);
        const Matrix wt = hadamard_preprocess(w);
        EXPECT_NEAR(frobenius_norm(wt), frobenius_norm(w), 1e-12);
        EXPECT_LE(max_abs_diff(matmul_transposed(wt, matmul(x, t)), matmul_transposed(w, x)), 1e-9);
    }
}

TEST(Hadamard, RejectsNonPowerOfTwo) {
    EXPECT_THROW(hadamard_matrix(12), UnsupportedShape);
    EXPECT_THROW(hadamard_preprocess(Matrix(2, 6)), UnsupportedShape);
    EXPECT_TRUE(is_power_of_two(64));
    EXPECT_FALSE(is_power_of_two(0));
}

} // namespace
} // namespace moeq
