#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace moeq {

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix identity(std::size_t n);
    static Matrix diagonal(std::span<const double> d);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double &operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    Matrix transposed() const;

    bool operator==(const Matrix &other) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix matmul(const Matrix &a, const Matrix &b);

/// a * bᵀ without materializing the transpose.
Matrix matmul_transposed(const Matrix &a, const Matrix &b);

/// Gram matrix aᵀa (cols x cols), exactly symmetric.
Matrix gram(const Matrix &a);

Matrix add(const Matrix &a, const Matrix &b);
Matrix subtract(const Matrix &a, const Matrix &b);

/// Multiplies row r by factors[r].
Matrix scale_rows(const Matrix &m, std::span<const double> factors);

/// Multiplies column c by factors[c].
Matrix scale_cols(const Matrix &m, std::span<const double> factors);

double frobenius_norm(const Matrix &m);
double frobenius_norm_sq(const Matrix &m);

/// Lower-triangular L with L·Lᵀ = h. Throws FactorizationError naming the first
/// pivot whose diagonal is not strictly positive.
Matrix cholesky(const Matrix &h);

/// Inverse of a symmetric positive definite matrix via its Cholesky factor.
Matrix invert_spd(const Matrix &h);

/// Upper-triangular U with Uᵀ·U = h⁻¹ (the factor consumed by the GPTQ sweep).
Matrix inverse_cholesky_upper(const Matrix &h);

} // namespace moeq
