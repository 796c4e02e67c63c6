#include "analog.hpp"
#include "builders.hpp"
#include "calibrator.hpp"
#include "error.hpp"
#include "fixtures.hpp"
#include "parser.hpp"

#include <doctest.h>

using namespace snnconv;
using namespace snnconv::test;

namespace {

ChannelRange range(std::vector<float> eps, std::vector<float> lam) {
    return {std::move(eps), std::move(lam)};
}

ChannelStats unit_stats(const ModelGraph& g) {
    ChannelStats s;
    for (const auto& n : g.nodes) {
        const std::size_t c = n.out_channels();
        s.nodes[n.id] = range(std::vector<float>(c, 0.f), std::vector<float>(c, 1.f));
    }
    return s;
}

} // namespace

TEST_CASE("percentile interpolates between order statistics") {
    std::vector<float> v(101);
    for (int i = 0; i <= 100; ++i) v[i] = float(i);
    CHECK(percentile(v, 0) == 0.0);
    CHECK(percentile(v, 100) == 100.0);
    const std::vector<float> four{1, 2, 3, 4};
    CHECK(percentile(four, 50) == doctest::Approx(2.5));
}

TEST_CASE("relu nodes get a zero lower bound") {
    std::mt19937_64 rng(1);
    ModelGraph g = graph("r", {6, 6, 2}, {conv("a", "input", 3, 2, 4, Activation::Relu), conv("b", "a", 1, 4, 3)},
                         {"b"});
    randomize(g, rng);
    ChannelStats s = collect_stats(g, random_batch({6, 6, 2}, 8, rng));
    for (float e : s.at("a").epsilon) CHECK(e == 0.f);
    CHECK(s.at("input") == range({0, 0}, {1, 1}));
    // The linear head can go negative.
    bool any_negative = false;
    for (float e : s.at("b").epsilon) any_negative |= e < 0.f;
    CHECK(any_negative);
}

TEST_CASE("unit statistics leave weights unchanged") {
    std::mt19937_64 rng(2);
    ModelGraph g = graph("u", {4, 4, 2},
                         {conv("a", "input", 3, 2, 2), conv("b", "input", 1, 2, 2), add("s", {"a", "b"})}, {"s"});
    randomize(g, rng);
    ModelGraph n = normalize_model(g, unit_stats(g));
    CHECK(n.name == "u-normalized");
    for (const char* id : {"a", "b"}) {
        CHECK(n.node(id).weights->bitwise_equal(*g.node(id).weights));
        CHECK(n.node(id).bias->bitwise_equal(*g.node(id).bias));
    }
    const LayerNode& s = n.node("s");
    CHECK(s.kind == LayerKind::NormAdd);
    CHECK(s.attrs.alpha == std::vector<std::vector<float>>{{1.f, 1.f}, {1.f, 1.f}});
    CHECK(s.attrs.beta == std::vector<float>{0.f, 0.f});
}

TEST_CASE("input layer weights are divided by lambda") {
    ModelGraph g = graph("in", {2, 2, 1}, {conv("c", "input", 1, 1, 1)}, {"c"});
    (*g.node("c").weights)[0] = 2.f;
    ChannelStats s = unit_stats(g);
    s.nodes["c"] = range({0.f}, {4.f});
    CHECK((*normalize_model(g, s).node("c").weights)[0] == 0.5f);
}

TEST_CASE("hidden layer weights and bias follow the change of variables") {
    ModelGraph g = graph("h", {2, 2, 1}, {conv("a", "input", 1, 1, 1), conv("b", "a", 1, 1, 1)}, {"b"});
    (*g.node("b").weights)[0] = 1.f;
    ChannelStats s = unit_stats(g);
    s.nodes["a"] = range({-1.f}, {2.f});
    s.nodes["b"] = range({0.f}, {3.f});
    ModelGraph n = normalize_model(g, s);
    CHECK((*n.node("b").weights)[0] == doctest::Approx(1.0));
    CHECK((*n.node("b").bias)[0] == doctest::Approx(-1.0 / 3.0));
}

TEST_CASE("NormAdd synthesis") {
    LayerNode a = add("s", {"x", "y"});
    a.output_shape = {1, 1, 1};
    ChannelStats s;
    s.nodes["x"] = range({0.f}, {1.f});
    s.nodes["y"] = range({0.f}, {1.f});
    s.nodes["s"] = range({0.f}, {1.f});
    LayerNode id = synthesize_normadd(a, s);
    CHECK(id.attrs.alpha == std::vector<std::vector<float>>{{1.f}, {1.f}});
    CHECK(id.attrs.beta == std::vector<float>{0.f});

    s.nodes["x"] = range({-1.f}, {1.f});
    s.nodes["y"] = range({0.f}, {2.f});
    s.nodes["s"] = range({-1.f}, {3.f});
    LayerNode n = synthesize_normadd(a, s);
    CHECK(n.attrs.alpha[0][0] == doctest::Approx(0.5));
    CHECK(n.attrs.alpha[1][0] == doctest::Approx(0.5));
    CHECK(n.attrs.beta[0] == doctest::Approx(0.0));

    // Random ranges and branch values: NormAdd of normalized branches is the
    // normalized sum.
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> u(-2.f, 2.f);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        float e1 = u(rng), e2 = u(rng), es = u(rng);
        float l1 = e1 + 0.1f + std::abs(u(rng)), l2 = e2 + 0.1f + std::abs(u(rng)), ls = es + 0.1f + std::abs(u(rng));
        s.nodes["x"] = range({e1}, {l1});
        s.nodes["y"] = range({e2}, {l2});
        s.nodes["s"] = range({es}, {ls});
        LayerNode m = synthesize_normadd(a, s);
        const double x = u(rng), y = u(rng);
        const double nx = (x - e1) / (l1 - e1), ny = (y - e2) / (l2 - e2);
        const double got = m.attrs.alpha[0][0] * nx + m.attrs.alpha[1][0] * ny + m.attrs.beta[0];
        const double want = (x + y - es) / (ls - es);
        worst = std::max(worst, std::abs(got - want) / std::max(1.0, std::abs(want)));
    }
    CHECK(worst <= 1e-6);
}

TEST_CASE("lambda is monotone in the high percentile") {
    std::mt19937_64 rng(4);
    ModelGraph g = graph("m", {6, 6, 2}, {conv("a", "input", 3, 2, 3, Activation::Relu)}, {"a"});
    // Positive weights keep every channel active, so no range is repaired.
    fill_uniform(*g.node("a").weights, rng, 0.1f, 0.5f);
    Tensor calib = random_batch({6, 6, 2}, 8, rng);
    std::vector<float> prev(3, -1e9f);
    for (double p : {50.0, 90.0, 99.0, 99.9, 100.0}) {
        CalibrationOptions o;
        o.p_hi = p;
        ChannelStats s = collect_stats(g, calib, o);
        REQUIRE(s.repaired_channels == 0);
        auto lam = s.at("a").lambda;
        for (std::size_t c = 0; c < 3; ++c) {
            CHECK(lam[c] >= prev[c]);
            prev[c] = lam[c];
        }
    }
}

TEST_CASE("degenerate channels are repaired and counted") {
    ModelGraph g = graph("d", {4, 4, 1}, {conv("c", "input", 1, 1, 2, Activation::Relu)}, {"c"});
    (*g.node("c").weights)[0] = 1.f;  // channel 1 stays at its bias, 0
    std::mt19937_64 rng(5);
    ChannelStats s = collect_stats(g, random_batch({4, 4, 1}, 4, rng));
    CHECK(s.repaired_channels == 1);
    CHECK(s.at("c").epsilon[1] == 0.f);
    CHECK(s.at("c").lambda[1] == 1.f);
}

TEST_CASE("normalize and denormalize are inverse") {
    std::mt19937_64 rng(6);
    Tensor a = random_batch({5, 3}, 4, rng, -3.f, 3.f);
    ChannelRange r = range({-1.f, 0.f, 0.5f}, {1.f, 4.f, 2.f});
    Tensor back = denormalize_activation(normalize_activation(a, r), r);
    CHECK(max_abs_difference(back, a) <= 1e-6 * 3);
}

TEST_CASE("normalized model reproduces the parsed model") {
    std::mt19937_64 rng(7);
    SUBCASE("unit statistics give zero deviation") {
        ModelGraph g = graph("u", {6, 6, 2}, {conv("a", "input", 3, 2, 3, Activation::Relu)}, {"a"});
        randomize(g, rng);
        auto rep = verify_normalization(g, normalize_model(g, unit_stats(g)), random_batch({6, 6, 2}, 4, rng));
        CHECK(rep.max_relative_deviation() == 0.0);
    }
    SUBCASE("random four-layer relu network") {
        ModelGraph g = graph("r4", {8, 8, 3},
                             {conv("c1", "input", 3, 3, 6, Activation::Relu), conv("c2", "c1", 3, 6, 8, Activation::Relu),
                              conv("c3", "c2", 3, 8, 8, Activation::Relu), conv("c4", "c3", 1, 8, 4, Activation::Relu)},
                             {"c4"});
        randomize(g, rng);
        Tensor calib = random_batch({8, 8, 3}, 16, rng);
        ModelGraph n = normalize_model(g, collect_stats(g, calib));
        auto rep = verify_normalization(g, n, random_batch({8, 8, 3}, 16, rng));
        CHECK(rep.max_relative_deviation() < 1e-4);
    }
    SUBCASE("linear chains") {
        ModelGraph g = graph("lin", {6, 6, 2},
                  {conv("a", "input", 3, 2, 3, Activation::None, Padding::Valid),
                   unary("f", LayerKind::Flatten, "a"), dense("d", "f", 48, 2)},
                  {"d"});
        randomize(g, rng);
        ModelGraph n = normalize_model(g, collect_stats(g, random_batch({6, 6, 2}, 16, rng)));
        auto rep = verify_normalization(g, n, random_batch({6, 6, 2}, 16, rng));
        CHECK(rep.max_relative_deviation() < 1e-5);
    }
}

TEST_CASE("toy classifier activations fit the unit interval") {
    Fixture f = make_fixture({FixtureKind::ToyClassifier, 1, 1});
    ModelGraph p = parse(f.model);
    ModelGraph n = normalize_model(p, collect_stats(p, f.calibration));
    auto rep = verify_normalization(p, n, f.calibration);
    CHECK(rep.min_in_range_fraction() >= 0.9998);
}

TEST_CASE("normalizing requires statistics for every node") {
    ModelGraph g = graph("m", {2, 2, 1}, {conv("c", "input", 1, 1, 1)}, {"c"});
    ChannelStats s = unit_stats(g);
    s.nodes.erase("c");
    CHECK_THROWS_AS(normalize_model(g, s), Error);
}
