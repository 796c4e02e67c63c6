#include "analog.hpp"
#include "builders.hpp"
#include "error.hpp"

#include <doctest.h>

#include <cmath>

using namespace snnconv;
using namespace snnconv::test;

namespace {

// Direct six-loop convolution, 'same' padding split floor-before.
std::vector<double> reference_conv(const Tensor& x, const Shape& in, const Tensor& w, const Tensor& b,
                                   std::size_t k, Padding pad, std::size_t stride, Shape& out_shape) {
    const std::size_t H = in[0], W = in[1], C = in[2], F = b.size();
    std::size_t OH, OW, pt, pl;
    if (pad == Padding::Same) {
        OH = (H + stride - 1) / stride;
        OW = (W + stride - 1) / stride;
        const std::size_t ph = std::max<long>(0, long((OH - 1) * stride + k) - long(H));
        const std::size_t pw = std::max<long>(0, long((OW - 1) * stride + k) - long(W));
        pt = ph / 2;
        pl = pw / 2;
    } else {
        OH = (H - k) / stride + 1;
        OW = (W - k) / stride + 1;
        pt = pl = 0;
    }
    out_shape = {OH, OW, F};
    std::vector<double> out(OH * OW * F);
    for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox)
            for (std::size_t f = 0; f < F; ++f) {
                double s = b[f];
                for (std::size_t ky = 0; ky < k; ++ky)
                    for (std::size_t kx = 0; kx < k; ++kx)
                        for (std::size_t c = 0; c < C; ++c) {
                            const long iy = long(oy * stride + ky) - long(pt);
                            const long ix = long(ox * stride + kx) - long(pl);
                            if (iy < 0 || ix < 0 || iy >= long(H) || ix >= long(W)) continue;
                            s += double(x[(iy * W + ix) * C + c]) * w[((ky * k + kx) * C + c) * F + f];
                        }
                out[(oy * OW + ox) * F + f] = s;
            }
    return out;
}

} // namespace

TEST_CASE("1x1 identity conv returns its input") {
    ModelGraph g = graph("id", {4, 4, 1}, {conv("c", "input", 1, 1, 1)}, {"c"});
    (*g.node("c").weights)[0] = 1.f;
    std::mt19937_64 rng(1);
    Tensor x = random_batch({4, 4, 1}, 2, rng, -1.f, 1.f);
    CHECK(forward(g, x).at("c").bitwise_equal(x));
}

TEST_CASE("valid 3x3 conv of ones sums its input") {
    ModelGraph g = graph("sum", {3, 3, 1}, {conv("c", "input", 3, 1, 1, Activation::None, Padding::Valid)}, {"c"});
    for (float& w : g.node("c").weights->values()) w = 1.f;
    Tensor x({1, 3, 3, 1}, std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor y = forward(g, x).at("c");
    REQUIRE(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y[0] == 45.f);
}

TEST_CASE("relu clamps negatives") {
    ModelGraph g = graph("r", {3}, {dense("d", "input", 3, 3, Activation::Relu)}, {"d"});
    Tensor& w = *g.node("d").weights;
    for (std::size_t i = 0; i < 3; ++i) w[i * 3 + i] = 1.f;
    Tensor y = forward(g, Tensor({1, 3}, std::vector<float>{-1, 0, 2})).at("d");
    CHECK(y.values()[0] == 0.f);
    CHECK(y.values()[1] == 0.f);
    CHECK(y.values()[2] == 2.f);
}

TEST_CASE("conv matches the direct reference") {
    std::mt19937_64 rng(11);
    for (std::size_t k : {1u, 2u, 3u, 4u, 5u}) {
        for (Padding pad : {Padding::Same, Padding::Valid}) {
            for (std::size_t stride : {1u, 2u}) {
                ModelGraph g = graph("c", {8, 8, 3}, {conv("c", "input", k, 3, 4, Activation::None, pad, stride)}, {"c"});
                randomize(g, rng);
                Tensor x = random_batch({8, 8, 3}, 1, rng, -1.f, 1.f);
                Tensor y = forward(g, x).at("c");
                Shape ref_shape;
                auto ref = reference_conv(x, {8, 8, 3}, *g.node("c").weights, *g.node("c").bias, k, pad, stride,
                                          ref_shape);
                REQUIRE(g.node("c").output_shape == ref_shape);
                double scale = 0, err = 0;
                for (std::size_t i = 0; i < ref.size(); ++i) {
                    scale = std::max(scale, std::abs(ref[i]));
                    err = std::max(err, std::abs(ref[i] - y[i]));
                }
                CHECK(err <= 1e-5 * scale);
            }
        }
    }
}

TEST_CASE("dense, pool, upsample and flatten") {
    ModelGraph g = graph("m", {4, 4, 1},
                         {unary("pool", LayerKind::AvgPool2D, "input"), unary("up", LayerKind::UpsampleNearest, "pool"),
                          unary("flat", LayerKind::Flatten, "up"), dense("fc", "flat", 16, 1)},
                         {"fc"});
    for (float& w : g.node("fc").weights->values()) w = 1.f;
    Tensor x({1, 4, 4, 1});
    for (std::size_t i = 0; i < 16; ++i) x[i] = float(i);
    auto rec = forward(g, x);
    CHECK(rec.at("pool").values()[0] == doctest::Approx((0 + 1 + 4 + 5) / 4.0));
    CHECK(rec.at("up").shape() == Shape{1, 4, 4, 1});
    CHECK(rec.at("up").values()[1] == rec.at("pool").values()[0]);
    CHECK(rec.at("fc").values()[0] == doctest::Approx(120.0));
}

TEST_CASE("forward is linear without activations") {
    std::mt19937_64 rng(5);
    ModelGraph g = graph("lin", {6, 6, 2}, {conv("a", "input", 3, 2, 3), conv("b", "a", 3, 3, 2)}, {"b"});
    randomize(g, rng);
    for (auto& n : g.nodes)
        if (n.bias) std::fill(n.bias->values().begin(), n.bias->values().end(), 0.f);
    Tensor x = random_batch({6, 6, 2}, 1, rng, -1, 1), y = random_batch({6, 6, 2}, 1, rng, -1, 1);
    Tensor xy = x;
    for (std::size_t i = 0; i < xy.size(); ++i) xy[i] = 2.f * x[i] + y[i];
    Tensor fx = forward(g, x).at("b"), fy = forward(g, y).at("b"), fxy = forward(g, xy).at("b");
    Tensor combo = fx;
    for (std::size_t i = 0; i < combo.size(); ++i) combo[i] = 2.f * fx[i] + fy[i];
    CHECK(relative_deviation(fxy, combo) < 1e-5);
}

TEST_CASE("forward_outputs agrees with forward and handles empty batches") {
    std::mt19937_64 rng(2);
    ModelGraph g = graph("two", {4, 4, 1}, {conv("h1", "input", 3, 1, 2), conv("h2", "input", 1, 1, 3)}, {"h2", "h1"});
    randomize(g, rng);
    Tensor x = random_batch({4, 4, 1}, 3, rng);
    auto outs = forward_outputs(g, x);
    auto rec = forward(g, x);
    REQUIRE(outs.size() == 2);
    CHECK(outs[0].bitwise_equal(rec.at("h2")));
    CHECK(outs[1].bitwise_equal(rec.at("h1")));

    auto empty = forward_outputs(g, Tensor({0, 4, 4, 1}));
    REQUIRE(empty.size() == 2);
    CHECK(empty[0].shape() == Shape{0, 4, 4, 3});
    CHECK(empty[1].size() == 0);
}

TEST_CASE("NormAdd with unit alpha and zero beta is a plain Add") {
    std::mt19937_64 rng(8);
    ModelGraph g = graph("na", {4, 4, 2},
                         {conv("a", "input", 3, 2, 2), conv("b", "input", 1, 2, 2), add("s", {"a", "b"})}, {"s"});
    randomize(g, rng);
    ModelGraph n = g;
    LayerNode& s = n.node("s");
    s.kind = LayerKind::NormAdd;
    s.attrs.alpha = {{1.f, 1.f}, {1.f, 1.f}};
    s.attrs.beta = {0.f, 0.f};
    Tensor x = random_batch({4, 4, 2}, 2, rng);
    CHECK(forward(n, x).at("s").bitwise_equal(forward(g, x).at("s")));
}

TEST_CASE("input shape mismatch is rejected") {
    ModelGraph g = graph("m", {4, 4, 1}, {}, {"input"});
    CHECK_THROWS_AS(forward(g, Tensor({1, 5, 4, 1})), Error);
}
