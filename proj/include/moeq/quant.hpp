#pragma once

#include "moeq/linalg.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace moeq {

/// Symmetric signed code range: q_max = 2^(bits-1) - 1, q_min = -q_max.
struct QuantSpec {
    std::uint32_t bits = 4;
    std::int32_t q_min = -7;
    std::int32_t q_max = 7;

    static QuantSpec symmetric(std::uint32_t bits);

    bool operator==(const QuantSpec &) const = default;
};

/// Integer codes for an o x c weight with one step per output row.
struct QuantizedTensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::int8_t> codes; // row-major
    std::vector<double> steps;

    std::int8_t code(std::size_t r, std::size_t c) const { return codes[r * cols + c]; }

    bool operator==(const QuantizedTensor &) const = default;
};

/// Per-row step max|w(r,·)| / q_max; an all-zero row gets step 1.
std::vector<double> compute_steps(const Matrix &w, const QuantSpec &spec);

/// clamp(round_half_even(w / s), q_min, q_max) row by row.
QuantizedTensor quantize(const Matrix &w, std::span<const double> steps, const QuantSpec &spec);

Matrix dequantize(const QuantizedTensor &q);

/// ‖(w - ŵ)·Xᵀ‖²_F with X holding one token per row.
double quant_loss(const Matrix &w, const Matrix &w_hat, const Matrix &x);

/// XᵀX over the token rows of x.
Matrix hessian(const Matrix &x);

QuantizedTensor rtn_quantize(const Matrix &w, const QuantSpec &spec);

constexpr double kDefaultDamping = 0.01;

/// Column sweep with inverse-Hessian error compensation. Steps are frozen from the
/// input w; columns are visited in natural order. Damping adds
/// damping * mean(diag h) to the diagonal. Throws FactorizationError when the damped
/// matrix is not positive definite.
QuantizedTensor gptq_quantize(const Matrix &w, const Matrix &h, const QuantSpec &spec, double damping = kDefaultDamping);

constexpr std::size_t kDefaultAwqGrid = 20;

struct AwqResult {
    std::vector<double> scales; // per input channel; effective weight is dequantize(q)·diag(1/scales)
    double alpha = 0.0;
    double loss = 0.0;
    QuantizedTensor quantized;
};

/// Loss of the candidate at a given alpha; exposed so callers can re-evaluate a grid.
double awq_candidate_loss(const Matrix &w, const Matrix &x, std::span<const double> token_weights,
                          const QuantSpec &spec, double alpha, QuantizedTensor *quantized = nullptr,
                          std::vector<double> *scales = nullptr);

/// Grid search over alpha in [0, 1]; per-channel scales are mean|x(·,j)|^alpha clamped
/// to [1e-4, 1e4]. token_weights, when non-empty, weight each token's loss term.
AwqResult awq_scale_search(const Matrix &w, const Matrix &x, const QuantSpec &spec,
                           std::size_t grid_size = kDefaultAwqGrid, std::span<const double> token_weights = {});

/// The alpha grid used by awq_scale_search.
std::vector<double> awq_alpha_grid(std::size_t grid_size);

/// Orthonormal Walsh–Hadamard matrix H_n / sqrt(n); n must be a power of two.
Matrix hadamard_matrix(std::size_t n);

/// w·T with T = H_c / sqrt(c). Inputs transform as x·T, so (wT)(xT)ᵀ = w xᵀ.
Matrix hadamard_preprocess(const Matrix &w);

bool is_power_of_two(std::size_t n) noexcept;

} // namespace moeq
