#include "moeq/linalg.hpp"

#include "moeq/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace moeq {

namespace {

void require(bool ok, const char *what) {
    if (!ok) {
        throw InvalidInput(what);
    }
}

void require_square_symmetric(const Matrix &h) {
    require(h.rows() == h.cols(), "matrix must be square");
    double scale = 1.0;
    for (double v : h.data()) {
        scale = std::max(scale, std::abs(v));
    }
    for (std::size_t i = 0; i < h.rows(); ++i) {
        for (std::size_t j = i + 1; j < h.cols(); ++j) {
            if (std::abs(h(i, j) - h(j, i)) > 1e-10 * scale) {
                throw InvalidInput("matrix is not symmetric at (" + std::to_string(i) + ", " + std::to_string(j) + ")");
            }
        }
    }
}

} // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, "matrix data length does not match rows x cols");
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto &r : rows) {
        require(r.size() == cols_, "ragged matrix literal");
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0;
    }
    return m;
}

Matrix Matrix::diagonal(std::span<const double> d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        m(i, i) = d[i];
    }
    return m;
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r) {
        for (std::size_t c = 0; c < cols_; ++c) {
            t(c, r) = (*this)(r, c);
        }
    }
    return t;
}

Matrix matmul(const Matrix &a, const Matrix &b) {
    require(a.cols() == b.rows(), "matmul: inner dimensions differ");
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto dst = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            const auto src = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) {
                dst[j] += aik * src[j];
            }
        }
    }
    return out;
}

Matrix matmul_transposed(const Matrix &a, const Matrix &b) {
    require(a.cols() == b.cols(), "matmul_transposed: inner dimensions differ");
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const auto ai = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const auto bj = b.row(j);
            double acc = 0.0;
            for (std::size_t k = 0; k < ai.size(); ++k) {
                acc += ai[k] * bj[k];
            }
            out(i, j) = acc;
        }
    }
    return out;
}

Matrix gram(const Matrix &a) {
    const std::size_t c = a.cols();
    Matrix g(c, c);
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const auto x = a.row(r);
        for (std::size_t i = 0; i < c; ++i) {
            const double xi = x[i];
            if (xi == 0.0) {
                continue;
            }
            auto gi = g.row(i);
            for (std::size_t j = i; j < c; ++j) {
                gi[j] += xi * x[j];
            }
        }
    }
    for (std::size_t i = 0; i < c; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            g(i, j) = g(j, i);
        }
    }
    return g;
}

Matrix add(const Matrix &a, const Matrix &b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
    Matrix out = a;
    auto d = out.data();
    auto s = b.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] += s[i];
    }
    return out;
}

Matrix subtract(const Matrix &a, const Matrix &b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "subtract: shape mismatch");
    Matrix out = a;
    auto d = out.data();
    auto s = b.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] -= s[i];
    }
    return out;
}

Matrix scale_rows(const Matrix &m, std::span<const double> factors) {
    require(factors.size() == m.rows(), "scale_rows: factor count differs from row count");
    Matrix out = m;
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (double &v : out.row(r)) {
            v *= factors[r];
        }
    }
    return out;
}

Matrix scale_cols(const Matrix &m, std::span<const double> factors) {
    require(factors.size() == m.cols(), "scale_cols: factor count differs from column count");
    Matrix out = m;
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = out.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) {
            row[c] *= factors[c];
        }
    }
    return out;
}

double frobenius_norm_sq(const Matrix &m) {
    double acc = 0.0;
    for (double v : m.data()) {
        acc += v * v;
    }
    return acc;
}

double frobenius_norm(const Matrix &m) { return std::sqrt(frobenius_norm_sq(m)); }

Matrix cholesky(const Matrix &h) {
    require_square_symmetric(h);
    const std::size_t n = h.rows();
    Matrix l(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double d = h(j, j);
        for (std::size_t k = 0; k < j; ++k) {
            d -= l(j, k) * l(j, k);
        }
        if (!(d > 0.0) || !std::isfinite(d)) {
            throw FactorizationError(j);
        }
        const double ljj = std::sqrt(d);
        l(j, j) = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = h(i, j);
            for (std::size_t k = 0; k < j; ++k) {
                s -= l(i, k) * l(j, k);
            }
            l(i, j) = s / ljj;
        }
    }
    return l;
}

Matrix invert_spd(const Matrix &h) {
    const Matrix l = cholesky(h);
    const std::size_t n = l.rows();

    // Solve L·Y = I column by column; Y = L⁻¹ is lower triangular.
    Matrix linv(n, n);
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t i = c; i < n; ++i) {
            double s = i == c ? 1.0 : 0.0;
            for (std::size_t k = c; k < i; ++k) {
                s -= l(i, k) * linv(k, c);
            }
            linv(i, c) = s / l(i, i);
        }
    }

    // h⁻¹ = L⁻ᵀ·L⁻¹, filled symmetrically from the upper triangle.
    Matrix inv(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = j; k < n; ++k) {
                s += linv(k, i) * linv(k, j);
            }
            inv(i, j) = s;
            inv(j, i) = s;
        }
    }
    return inv;
}

Matrix inverse_cholesky_upper(const Matrix &h) { return cholesky(invert_spd(h)).transposed(); }

} // namespace moeq
