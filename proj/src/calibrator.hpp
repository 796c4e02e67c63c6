#pragma once

#include "model.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace snnconv {

struct CalibrationOptions {
    double p_lo = 0.01;
    double p_hi = 99.99;
    /// Calibration samples evaluated per forward pass.
    std::size_t chunk_size = 16;
    /// Per-channel value pool cap; beyond it the pool is a uniform reservoir sample.
    std::size_t max_values_per_channel = std::size_t{1} << 24;
    std::uint64_t reservoir_seed = 0x9e3779b97f4a7c15ULL;
};

/// Channels whose lambda - epsilon falls below this are reset to (0, 1).
inline constexpr float kDegenerateSpan = 1e-6f;

/// Float rounding allowance when counting normalized values inside [0, 1]:
/// an activation equal to lambda may come out as 1 + 1 ulp.
inline constexpr float kRangeSlack = 1e-6f;

/// p-th percentile (0..100) of ascending `sorted`, interpolating linearly
/// between order statistics at zero-based rank p/100 * (n - 1).
double percentile(std::span<const float> sorted, double p);

/// Percentile ranges of every node's post-activation values over `calib`
/// (N, input_shape...). Input nodes get (0, 1); pooling, upsampling and
/// flattening nodes inherit their input's ranges. Relu nodes get epsilon 0.
ChannelStats collect_stats(const ModelGraph& parsed, const Tensor& calib,
                           const CalibrationOptions& options = {});

/// Rewrites weights and biases so every node emits (a - eps) / (lambda - eps)
/// per channel, and replaces each Add with an equivalent NormAdd. The stats
/// are attached to the result, which is named `<name>-normalized`.
ModelGraph normalize_model(const ModelGraph& parsed, const ChannelStats& stats);

/// NormAdd equivalent of `add_node` acting on normalized branch inputs.
LayerNode synthesize_normadd(const LayerNode& add_node, const ChannelStats& stats);

/// (a - eps) / (lambda - eps), channel = index modulo the innermost extent.
Tensor normalize_activation(const Tensor& values, const ChannelRange& range);
/// a * (lambda - eps) + eps.
Tensor denormalize_activation(const Tensor& values, const ChannelRange& range);

struct LayerCheck {
    std::string id;
    std::size_t count = 0;
    double in_range_fraction = 1.0;
    double max_abs_deviation = 0.0;
    double max_relative_deviation = 0.0;
};

struct NormalizationReport {
    std::vector<LayerCheck> layers;
    std::size_t repaired_channels = 0;

    double min_in_range_fraction() const;
    double max_relative_deviation() const;
};

/// Per node: share of normalized activations inside [0, 1] and deviation of
/// the denormalized activations from the parsed model's.
NormalizationReport verify_normalization(const ModelGraph& parsed, const ModelGraph& normalized,
                                         const Tensor& probe);

} // namespace snnconv
