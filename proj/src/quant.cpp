#include "moeq/quant.hpp"

#include "moeq/errors.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <string>

namespace moeq {

namespace {

constexpr double kMinScale = 1e-4;
constexpr double kMaxScale = 1e4;

std::int8_t quantize_value(double v, double step, const QuantSpec &spec) {
    // nearbyint honours the default round-to-nearest-even mode.
    const double q = std::nearbyint(v / step);
    return static_cast<std::int8_t>(std::clamp(q, static_cast<double>(spec.q_min), static_cast<double>(spec.q_max)));
}

} // namespace

QuantSpec QuantSpec::symmetric(std::uint32_t bits) {
    if (bits < 2 || bits > 8) {
        throw ConfigError("quantization bits must be in [2, 8], got " + std::to_string(bits));
    }
    const auto q_max = static_cast<std::int32_t>((1u << (bits - 1)) - 1);
    return QuantSpec{bits, -q_max, q_max};
}

std::vector<double> compute_steps(const Matrix &w, const QuantSpec &spec) {
    std::vector<double> steps(w.rows(), 1.0);
    for (std::size_t r = 0; r < w.rows(); ++r) {
        double mx = 0.0;
        for (double v : w.row(r)) {
            mx = std::max(mx, std::abs(v));
        }
        if (mx > 0.0) {
            steps[r] = mx / spec.q_max;
        }
    }
    return steps;
}

QuantizedTensor quantize(const Matrix &w, std::span<const double> steps, const QuantSpec &spec) {
    if (steps.size() != w.rows()) {
        throw InvalidInput("quantize: step count differs from row count");
    }
    QuantizedTensor q;
    q.rows = w.rows();
    q.cols = w.cols();
    q.steps.assign(steps.begin(), steps.end());
    q.codes.resize(w.size());
    for (std::size_t r = 0; r < w.rows(); ++r) {
        const double s = steps[r];
        if (!(s > 0.0) || !std::isfinite(s)) {
            throw InvalidInput("quantize: step for row " + std::to_string(r) + " is not a positive finite value");
        }
        const auto row = w.row(r);
        for (std::size_t c = 0; c < w.cols(); ++c) {
            q.codes[r * q.cols + c] = quantize_value(row[c], s, spec);
        }
    }
    return q;
}

Matrix dequantize(const QuantizedTensor &q) {
    Matrix w(q.rows, q.cols);
    for (std::size_t r = 0; r < q.rows; ++r) {
        auto row = w.row(r);
        for (std::size_t c = 0; c < q.cols; ++c) {
            row[c] = static_cast<double>(q.code(r, c)) * q.steps[r];
        }
    }
    return w;
}

double quant_loss(const Matrix &w, const Matrix &w_hat, const Matrix &x) {
    const Matrix diff = subtract(w, w_hat);
    return frobenius_norm_sq(matmul_transposed(diff, x));
}

Matrix hessian(const Matrix &x) { return gram(x); }

QuantizedTensor rtn_quantize(const Matrix &w, const QuantSpec &spec) { return quantize(w, compute_steps(w, spec), spec); }

QuantizedTensor gptq_quantize(const Matrix &w, const Matrix &h, const QuantSpec &spec, double damping) {
    const std::size_t c = w.cols();
    if (h.rows() != c || h.cols() != c) {
        throw InvalidInput("gptq_quantize: hessian must be " + std::to_string(c) + "x" + std::to_string(c));
    }
    if (!(damping >= 0.0)) {
        throw InvalidInput("gptq_quantize: damping must be >= 0");
    }

    Matrix damped = h;
    double mean_diag = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
        // Channels never activated carry no signal; give them unit curvature.
        if (damped(j, j) == 0.0) {
            damped(j, j) = 1.0;
        }
        mean_diag += damped(j, j);
    }
    mean_diag /= static_cast<double>(c);
    for (std::size_t j = 0; j < c; ++j) {
        damped(j, j) += damping * mean_diag;
    }

    // Rows of U hold the inverse of the not-yet-quantized block, already normalized:
    // U(j, j') / U(j, j) = [H_j⁻¹](j, j') / [H_j⁻¹](j, j).
    const Matrix u = inverse_cholesky_upper(damped);

    const auto steps = compute_steps(w, spec);
    Matrix work = w;
    QuantizedTensor q;
    q.rows = w.rows();
    q.cols = c;
    q.steps = steps;
    q.codes.resize(w.size());
    for (std::size_t j = 0; j < c; ++j) {
        const double ujj = u(j, j);
        for (std::size_t r = 0; r < w.rows(); ++r) {
            const double v = work(r, j);
            const auto code = quantize_value(v, steps[r], spec);
            q.codes[r * c + j] = code;
            const double err = (v - code * steps[r]) / ujj;
            auto row = work.row(r);
            const auto urow = u.row(j);
            for (std::size_t k = j + 1; k < c; ++k) {
                row[k] -= err * urow[k];
            }
        }
    }
    return q;
}

std::vector<double> awq_alpha_grid(std::size_t grid_size) {
    if (grid_size == 0) {
        throw InvalidInput("awq grid must contain at least one point");
    }
    std::vector<double> grid(grid_size, 0.0);
    for (std::size_t i = 1; i < grid_size; ++i) {
        grid[i] = static_cast<double>(i) / static_cast<double>(grid_size - 1);
    }
    return grid;
}

double awq_candidate_loss(const Matrix &w, const Matrix &x, std::span<const double> token_weights, const QuantSpec &spec,
                          double alpha, QuantizedTensor *quantized, std::vector<double> *scales) {
    const std::size_t c = w.cols();
    if (x.cols() != c) {
        throw InvalidInput("awq: activation width differs from weight input channels");
    }
    if (x.rows() == 0) {
        throw InvalidInput("awq: empty activation batch");
    }
    if (!token_weights.empty() && token_weights.size() != x.rows()) {
        throw InvalidInput("awq: token weight count differs from token count");
    }

    std::vector<double> s(c, 1.0);
    for (std::size_t j = 0; j < c; ++j) {
        double a = 0.0;
        for (std::size_t t = 0; t < x.rows(); ++t) {
            a += std::abs(x(t, j));
        }
        a /= static_cast<double>(x.rows());
        if (a > 0.0) {
            s[j] = std::clamp(std::pow(a, alpha), kMinScale, kMaxScale);
        }
    }
    std::vector<double> inv(c);
    for (std::size_t j = 0; j < c; ++j) {
        inv[j] = 1.0 / s[j];
    }

    const Matrix ws = scale_cols(w, s);
    auto q = rtn_quantize(ws, spec);
    const Matrix diff = subtract(ws, dequantize(q));
    const Matrix out = matmul_transposed(diff, scale_cols(x, inv)); // o x b
    double loss = 0.0;
    for (std::size_t t = 0; t < x.rows(); ++t) {
        double tok = 0.0;
        for (std::size_t r = 0; r < out.rows(); ++r) {
            tok += out(r, t) * out(r, t);
        }
        loss += token_weights.empty() ? tok : token_weights[t] * tok;
    }
    if (quantized != nullptr) {
        *quantized = std::move(q);
    }
    if (scales != nullptr) {
        *scales = std::move(s);
    }
    return loss;
}

AwqResult awq_scale_search(const Matrix &w, const Matrix &x, const QuantSpec &spec, std::size_t grid_size,
                           std::span<const double> token_weights) {
    AwqResult best;
    bool have = false;
    for (double alpha : awq_alpha_grid(grid_size)) {
        QuantizedTensor q;
        std::vector<double> s;
        const double loss = awq_candidate_loss(w, x, token_weights, spec, alpha, &q, &s);
        if (!have || loss < best.loss) {
            best = AwqResult{std::move(s), alpha, loss, std::move(q)};
            have = true;
        }
    }
    return best;
}

bool is_power_of_two(std::size_t n) noexcept { return n != 0 && (n & (n - 1)) == 0; }

Matrix hadamard_matrix(std::size_t n) {
    if (!is_power_of_two(n)) {
        throw UnsupportedShape("hadamard transform needs a power-of-two dimension, got " + std::to_string(n));
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(n));
    Matrix h(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            // Sylvester construction: sign is the parity of popcount(i & j).
            h(i, j) = (std::popcount(i & j) % 2 == 0 ? 1.0 : -1.0) * scale;
        }
    }
    return h;
}

Matrix hadamard_preprocess(const Matrix &w) { return matmul(w, hadamard_matrix(w.cols())); }

} // namespace moeq
