#pragma once

#include "model.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace snnconv::test {

inline LayerNode input(const Shape& shape, std::string id = "input") {
    LayerNode n;
    n.id = std::move(id);
    n.kind = LayerKind::Input;
    n.output_shape = shape;
    return n;
}

inline LayerNode conv(std::string id, std::string in, std::size_t k, std::size_t in_ch, std::size_t filters,
                      Activation act = Activation::None, Padding pad = Padding::Same, std::size_t stride = 1) {
    LayerNode n;
    n.id = std::move(id);
    n.kind = LayerKind::Conv2D;
    n.activation = act;
    n.inputs = {std::move(in)};
    n.attrs.kernel_h = n.attrs.kernel_w = k;
    n.attrs.filters = filters;
    n.attrs.padding = pad;
    n.attrs.stride = stride;
    n.weights = Tensor({k, k, in_ch, filters});
    n.bias = Tensor({filters});
    return n;
}

inline LayerNode dense(std::string id, std::string in, std::size_t in_units, std::size_t units,
                       Activation act = Activation::None) {
    LayerNode n;
    n.id = std::move(id);
    n.kind = LayerKind::Dense;
    n.activation = act;
    n.inputs = {std::move(in)};
    n.attrs.units = units;
    n.weights = Tensor({in_units, units});
    n.bias = Tensor({units});
    return n;
}

inline LayerNode unary(std::string id, LayerKind kind, std::string in) {
    LayerNode n;
    n.id = std::move(id);
    n.kind = kind;
    n.inputs = {std::move(in)};
    return n;
}

inline LayerNode add(std::string id, std::vector<std::string> ins, Activation act = Activation::None) {
    LayerNode n;
    n.id = std::move(id);
    n.kind = LayerKind::Add;
    n.activation = act;
    n.inputs = std::move(ins);
    return n;
}

inline ModelGraph graph(std::string name, const Shape& in_shape, std::vector<LayerNode> body,
                        std::vector<std::string> outputs) {
    ModelGraph g;
    g.name = std::move(name);
    g.input_shape = in_shape;
    g.nodes.push_back(input(in_shape));
    for (auto& n : body) g.nodes.push_back(std::move(n));
    g.outputs = std::move(outputs);
    return infer_shapes(g, in_shape);
}

inline void fill_uniform(Tensor& t, std::mt19937_64& rng, float lo, float hi) {
    std::uniform_real_distribution<float> d(lo, hi);
    for (float& v : t.values()) v = d(rng);
}

inline void randomize(ModelGraph& g, std::mt19937_64& rng, float scale = 0.5f) {
    for (auto& n : g.nodes) {
        if (n.weights) fill_uniform(*n.weights, rng, -scale, scale);
        if (n.bias) fill_uniform(*n.bias, rng, -0.1f, 0.1f);
    }
}

inline Tensor random_batch(const Shape& sample, std::size_t n, std::mt19937_64& rng, float lo = 0.f,
                           float hi = 1.f) {
    Shape s{n};
    s.insert(s.end(), sample.begin(), sample.end());
    Tensor t(s);
    fill_uniform(t, rng, lo, hi);
    return t;
}

// Fresh per-test directory under the system temp dir.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("snnconv-" + tag + "-" + std::to_string(std::random_device{}()));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

private:
    std::filesystem::path path_;
};

} // namespace snnconv::test
