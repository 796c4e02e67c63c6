#include "kernels.hpp"

#include <algorithm>

namespace snnconv::kernels {

void conv2d_accumulate(std::span<const float> in, const Shape& in_shape, const Tensor& kernel,
                       const LayerAttrs& attrs, std::span<float> out) {
    const std::size_t H = in_shape[0], W = in_shape[1], C = in_shape[2];
    const std::size_t KH = attrs.kernel_h, KW = attrs.kernel_w, F = attrs.filters;
    const std::size_t S = attrs.stride;
    const auto gy = conv_axis(H, KH, S, attrs.padding);
    const auto gx = conv_axis(W, KW, S, attrs.padding);
    const float* w = kernel.data();
    for (std::size_t oy = 0; oy < gy.out; ++oy) {
        for (std::size_t ox = 0; ox < gx.out; ++ox) {
            float* acc = out.data() + (oy * gx.out + ox) * F;
            for (std::size_t ky = 0; ky < KH; ++ky) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * S + ky) -
                                          static_cast<std::ptrdiff_t>(gy.pad_before);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::size_t kx = 0; kx < KW; ++kx) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * S + kx) -
                                              static_cast<std::ptrdiff_t>(gx.pad_before);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                    const float* px = in.data() + (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * C;
                    const float* wk = w + (ky * KW + kx) * C * F;
                    for (std::size_t ci = 0; ci < C; ++ci) {
                        const float x = px[ci];
                        if (x == 0.0f) continue;
                        const float* wr = wk + ci * F;
                        for (std::size_t co = 0; co < F; ++co) acc[co] += x * wr[co];
                    }
                }
            }
        }
    }
}

void dense_accumulate(std::span<const float> in, const Tensor& kernel, std::span<float> out) {
    const std::size_t units = out.size();
    const float* w = kernel.data();
    for (std::size_t i = 0; i < in.size(); ++i) {
        const float x = in[i];
        if (x == 0.0f) continue;
        const float* wr = w + i * units;
        for (std::size_t j = 0; j < units; ++j) out[j] += x * wr[j];
    }
}

void avgpool(std::span<const float> in, const Shape& in_shape, std::size_t pool, std::span<float> out) {
    const std::size_t H = in_shape[0], W = in_shape[1], C = in_shape[2];
    const std::size_t OH = (H + pool - 1) / pool, OW = (W + pool - 1) / pool;
    for (std::size_t oy = 0; oy < OH; ++oy) {
        const std::size_t y1 = std::min(H, (oy + 1) * pool);
        for (std::size_t ox = 0; ox < OW; ++ox) {
            const std::size_t x1 = std::min(W, (ox + 1) * pool);
            float* o = out.data() + (oy * OW + ox) * C;
            std::fill(o, o + C, 0.0f);
            for (std::size_t y = oy * pool; y < y1; ++y) {
                for (std::size_t x = ox * pool; x < x1; ++x) {
                    const float* p = in.data() + (y * W + x) * C;
                    for (std::size_t c = 0; c < C; ++c) o[c] += p[c];
                }
            }
            const float inv = 1.0f / static_cast<float>((y1 - oy * pool) * (x1 - ox * pool));
            for (std::size_t c = 0; c < C; ++c) o[c] *= inv;
        }
    }
}

void upsample_nearest(std::span<const float> in, const Shape& in_shape, std::size_t factor,
                      std::span<float> out) {
    const std::size_t H = in_shape[0], W = in_shape[1], C = in_shape[2];
    const std::size_t OW = W * factor;
    for (std::size_t oy = 0; oy < H * factor; ++oy) {
        for (std::size_t ox = 0; ox < OW; ++ox) {
            const float* p = in.data() + ((oy / factor) * W + ox / factor) * C;
            std::copy(p, p + C, out.data() + (oy * OW + ox) * C);
        }
    }
}

void add_bias(std::span<float> values, std::span<const float> bias) {
    const std::size_t C = bias.size();
    for (std::size_t i = 0; i < values.size(); ++i) values[i] += bias[i % C];
}

void relu(std::span<float> values) {
    for (float& v : values) v = v > 0.0f ? v : 0.0f;
}

} // namespace snnconv::kernels
