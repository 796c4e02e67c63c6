#include "builders.hpp"
#include "calibrator.hpp"
#include "error.hpp"
#include "fixtures.hpp"
#include "parser.hpp"
#include "spiking.hpp"

#include <doctest.h>

#include <sstream>

using namespace snnconv;
using namespace snnconv::test;

namespace {

ChannelStats unit_stats(const ModelGraph& g) {
    ChannelStats s;
    for (const auto& n : g.nodes) {
        const std::size_t c = n.out_channels();
        s.nodes[n.id] = {std::vector<float>(c, 0.f), std::vector<float>(c, 1.f)};
    }
    return s;
}

// Input(1) -> Dense(1): the neuron's drive is the input value itself.
ModelGraph single_neuron(float bias = 0.f) {
    ModelGraph g = graph("one", {1}, {dense("n", "input", 1, 1)}, {"n"});
    (*g.node("n").weights)[0] = 1.f;
    (*g.node("n").bias)[0] = bias;
    return normalize_model(g, unit_stats(g));
}

// Literal unrolling of V += z - v_th * s_prev, spike when V >= v_th.
std::vector<int> unrolled_spikes(double z, double v_th, std::size_t steps) {
    std::vector<int> s(steps);
    double v = 0.0;
    int prev = 0;
    for (std::size_t t = 0; t < steps; ++t) {
        v += z - v_th * prev;
        prev = v >= v_th;
        s[t] = prev;
    }
    return s;
}

ModelGraph small_network(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ModelGraph g = graph("net", {8, 8, 2},
                         {conv("c1", "input", 3, 2, 4, Activation::Relu), conv("c2", "c1", 3, 4, 4),
                          unary("pool", LayerKind::AvgPool2D, "c2"), unary("up", LayerKind::UpsampleNearest, "pool"),
                          unary("flat", LayerKind::Flatten, "up"), dense("fc", "flat", 256, 3, Activation::Relu)},
                         {"fc"});
    randomize(g, rng, 0.4f);
    return normalize_model(g, collect_stats(g, random_batch({8, 8, 2}, 8, rng)));
}

} // namespace

TEST_CASE("one IF layer per neuron node") {
    ModelGraph g = graph("two", {4, 4, 1}, {conv("c", "input", 3, 1, 2)}, {"c"});
    SpikingNetwork snn(normalize_model(g, unit_stats(g)), SimConfig{});
    CHECK(snn.neuron_layer_count() == 1);
    REQUIRE(snn.state("c") != nullptr);
    CHECK(snn.state("c")->v.size() == 32);
    CHECK(snn.state("input") == nullptr);
}

TEST_CASE("bias current scales with dt") {
    SimConfig c;
    SpikingNetwork snn(single_neuron(0.2f), c);
    CHECK(snn.scaled_bias("n")[0] == doctest::Approx(0.2));
    c.dt = 0.5;
    snn.set_config(c);
    CHECK(snn.scaled_bias("n")[0] == doctest::Approx(0.1));
}

TEST_CASE("unsupported networks are refused") {
    ModelGraph g = graph("raw", {4, 4, 1}, {conv("c", "input", 1, 1, 1)}, {"c"});
    try {
        SpikingNetwork snn(g, SimConfig{});
        FAIL("expected refusal");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::State);
    }
    ModelGraph with_add = graph("a", {2, 2, 1}, {conv("x", "input", 1, 1, 1), add("s", {"x", "input"})}, {"s"});
    with_add.normalization = unit_stats(with_add);
    CHECK_THROWS_AS(SpikingNetwork(with_add, SimConfig{}), Error);
}

TEST_CASE("configuration is validated") {
    SimConfig c;
    c.transient = 2000;
    CHECK_THROWS_AS(c.validate(), Error);
    c = {};
    c.dt = 0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = {};
    c.v_th = -1;
    CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("single neuron spike trains") {
    auto train = [](float a, std::size_t steps) {
        SpikingNetwork snn(single_neuron(), SimConfig{});
        std::vector<int> s;
        Tensor in({1}, a);
        for (std::size_t t = 0; t < steps; ++t) {
            snn.step(in);
            s.push_back(snn.signal("n")[0] > 0.f);
        }
        return s;
    };
    CHECK(train(1.f, 6) == std::vector<int>{1, 1, 1, 1, 1, 1});
    CHECK(train(0.f, 6) == std::vector<int>{0, 0, 0, 0, 0, 0});
    CHECK(train(0.5f, 6) == std::vector<int>{0, 1, 0, 1, 0, 1});

    SpikingNetwork snn(single_neuron(), SimConfig{});
    for (int t = 0; t < 6; ++t) snn.step(Tensor({1}, 0.f));
    CHECK(snn.state("n")->v[0] == 0.0);
}

TEST_CASE("rates match the unrolled recursion") {
    for (double transient : {0.0, 200.0}) {
        SimConfig c;
        c.transient = transient;
        SpikingNetwork snn(single_neuron(), c);
        for (int i = 0; i <= 20; ++i) {
            const float a = float(i) / 20.f;
            RateRecord r = snn.run(Tensor({1}, a));
            const auto ref = unrolled_spikes(double(a), 1.0, 1000);
            int count = 0;
            for (std::size_t t = std::size_t(transient); t < 1000; ++t) count += ref[t];
            CHECK(snn.spike_counts("n")[0] == std::uint32_t(count));
            const double window = 1000.0 - transient;
            CHECK(r.counted_steps == std::size_t(window));
            CHECK(std::abs(r.rates.at("n")[0] - double(a)) <= 1.0 / window);
        }
    }
    SpikingNetwork snn(single_neuron(), SimConfig{});
    CHECK(std::abs(snn.run(Tensor({1}, 0.3f)).rates.at("n")[0] - 0.3) <= 1.0 / 1000);
}

TEST_CASE("zero image with zero biases stays silent") {
    ModelGraph g = graph("z", {6, 6, 1}, {conv("a", "input", 3, 1, 2), conv("b", "a", 3, 2, 2)}, {"b"});
    std::mt19937_64 rng(1);
    randomize(g, rng);
    for (auto& n : g.nodes)
        if (n.bias) std::fill(n.bias->values().begin(), n.bias->values().end(), 0.f);
    SpikingNetwork snn(normalize_model(g, unit_stats(g)), SimConfig{});
    RunOptions o;
    o.record = {"a", "b"};
    RateRecord r = snn.run(Tensor({6, 6, 1}), o);
    for (const auto& [id, t] : r.rates)
        for (float v : t.values()) CHECK(v == 0.f);
}

TEST_CASE("conservation, rate bounds and determinism") {
    ModelGraph n = small_network(3);
    SimConfig c;
    c.duration = 300;
    c.transient = 50;
    SpikingNetwork snn(n, c);
    std::mt19937_64 rng(9);
    Tensor image = random_batch({8, 8, 2}, 1, rng).sample(0);
    RunOptions o;
    o.record = {"c1", "c2", "pool", "up", "flat", "fc"};
    o.keep_raster = true;
    o.sample_every = 100;
    RateRecord a = snn.run(image, o);
    CHECK(a.conservation_error <= 1e-4);
    CHECK(snn.max_conservation_error() <= 1e-4);
    for (const auto& [id, t] : a.rates)
        for (float v : t.values()) {
            CHECK(v >= 0.f);
            CHECK(v <= 1.f);
        }
    REQUIRE(a.series.size() == 3);
    CHECK(a.series.back().step == 300);

    // Upsample and flatten rates are rewired copies of the pool rates.
    const Tensor& pool = a.rates.at("pool");
    const Tensor& flat = a.rates.at("flat");
    CHECK(flat.values()[0] == pool.values()[0]);

    SpikingNetwork other(small_network(3), c);
    RateRecord b = other.run(image, o);
    for (const auto& [id, r] : a.rasters) CHECK(r == b.rasters.at(id));
    for (const auto& [id, t] : a.rates) CHECK(t.bitwise_equal(b.rates.at(id)));
}

TEST_CASE("raster files round trip") {
    SpikeRaster r("layer/x", {3, 3});
    std::mt19937_64 rng(2);
    for (int t = 0; t < 17; ++t) {
        std::vector<float> s(9);
        for (float& v : s) v = float(rng() % 2);
        r.append_step(s);
    }
    TempDir dir("raster");
    r.write(dir / "r.raster");
    SpikeRaster back = SpikeRaster::read(dir / "r.raster");
    CHECK(back == r);
    CHECK(back.node() == "layer/x");
    CHECK(back.steps() == 17);
}

TEST_CASE("step rejects inputs of the wrong shape") {
    SpikingNetwork snn(single_neuron(), SimConfig{});
    try {
        snn.step(Tensor({2}));
        FAIL("expected a shape error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::Shape);
    }
    CHECK_NOTHROW(snn.step(Tensor({1, 1})));
}

TEST_CASE("rate series csv") {
    SimConfig c;
    c.duration = 20;
    SpikingNetwork snn(single_neuron(), c);
    RunOptions o;
    o.sample_every = 10;
    RateRecord r = snn.run(Tensor({1}, 0.5f), o);
    std::ostringstream out;
    write_rate_series_csv(r, out, true, 3);
    CHECK(out.str() == "image,step,node,mean_rate,min_rate,max_rate\n3,10,n,0.5,0.5,0.5\n3,20,n,0.5,0.5,0.5\n");
}
