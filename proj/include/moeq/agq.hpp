#pragma once

#include "moeq/linalg.hpp"
#include "moeq/model.hpp"
#include "moeq/quant.hpp"

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <vector>

namespace moeq {

enum class LinearPosition : std::uint8_t { up = 0, gate = 1, down = 2 };

const char *to_string(LinearPosition p) noexcept;

struct TraceKey {
    std::uint32_t layer = 0;
    std::uint32_t expert = 0; // gate column: shared experts first, then routed
    LinearPosition position = LinearPosition::up;

    auto operator<=>(const TraceKey &) const = default;
};

/// Inputs seen by one expert linear together with the gate probability of each token.
struct AffinityTrace {
    std::uint32_t layer = 0;
    std::uint32_t expert = 0;
    LinearPosition position = LinearPosition::up;
    Matrix x;              // tokens x input dim
    std::vector<double> c; // one affinity per row of x

    TraceKey key() const { return {layer, expert, position}; }
    std::size_t tokens() const { return x.rows(); }
};

using TraceMap = std::map<TraceKey, AffinityTrace>;

/// One forward pass per sequence. Every (layer, expert) the token reaches receives its
/// expert input at the up/gate positions and the down-projection input at the down
/// position, each paired with the token's gate probability for that expert.
TraceMap capture_calibration(const ModelWeights &model, std::span<const std::vector<std::uint32_t>> sequences);

/// Σ_i c_i x_i x_iᵀ, formed as the Gram matrix of the √c-scaled rows.
Matrix affinity_hessian(const AffinityTrace &trace);

/// Streaming form of affinity_hessian: rank-one updates per token.
class AffinityHessianAccumulator {
public:
    explicit AffinityHessianAccumulator(std::size_t dim) : h_(dim, dim) {}

    void add(std::span<const double> x, double c);
    Matrix result() const;
    std::size_t tokens() const noexcept { return tokens_; }

private:
    Matrix h_;
    std::size_t tokens_ = 0;
};

/// Σ_i c_i ‖(w − ŵ)·x_i‖².
double affinity_loss(const Matrix &w, const Matrix &w_hat, const AffinityTrace &trace);

QuantizedTensor agq_gptq(const Matrix &w, const AffinityTrace &trace, const QuantSpec &spec,
                         double damping = kDefaultDamping);

AwqResult agq_awq(const Matrix &w, const AffinityTrace &trace, const QuantSpec &spec,
                  std::size_t grid_size = kDefaultAwqGrid);

// Debug dump ("MOEQT"): per trace layer u32, expert u32, position u8, rows u32, dim u32,
// rows as f32, then c as f32.
void write_trace_dump(const TraceMap &traces, const std::filesystem::path &path);
TraceMap read_trace_dump(const std::filesystem::path &path);

} // namespace moeq
