#pragma once

#include "model.hpp"

#include <span>

// Single-sample layer kernels over channels-last buffers. Shared by the
// analog evaluator and the spiking simulator.
namespace snnconv::kernels {

/// out[oy, ox, co] += sum over (ky, kx, ci), in that row-major order, of
/// in[iy, ix, ci] * kernel[ky, kx, ci, co]. Zero padding; zero inputs skipped.
void conv2d_accumulate(std::span<const float> in, const Shape& in_shape, const Tensor& kernel,
                       const LayerAttrs& attrs, std::span<float> out);

/// out[j] += sum over i of in[i] * kernel[i, j].
void dense_accumulate(std::span<const float> in, const Tensor& kernel, std::span<float> out);

/// Non-overlapping pool windows; edge windows under 'same' average only the
/// elements that exist.
void avgpool(std::span<const float> in, const Shape& in_shape, std::size_t pool, std::span<float> out);

void upsample_nearest(std::span<const float> in, const Shape& in_shape, std::size_t factor,
                      std::span<float> out);

void add_bias(std::span<float> values, std::span<const float> bias);
void relu(std::span<float> values);

} // namespace snnconv::kernels
