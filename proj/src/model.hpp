#pragma once

#include "tensor.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace snnconv {

// The first eight kinds form the interchange vocabulary of a parsed model.
// SubNetwork, BatchNorm and ReLU only appear in raw models and are removed by
// the parser.
enum class LayerKind {
    Input,
    Conv2D,
    Dense,
    Add,
    NormAdd,
    UpsampleNearest,
    AvgPool2D,
    Flatten,
    SubNetwork,
    BatchNorm,
    ReLU,
};

enum class Activation { None, Relu };
enum class Padding { Same, Valid };

std::string_view to_string(LayerKind kind);
std::string_view to_string(Activation activation);
std::string_view to_string(Padding padding);
LayerKind parse_layer_kind(std::string_view name);
Activation parse_activation(std::string_view name);
Padding parse_padding(std::string_view name);

bool is_ir_kind(LayerKind kind);
bool is_weighted(LayerKind kind);
bool is_multi_input(LayerKind kind);

/// Kinds that only rearrange or pool their single input. They carry no
/// parameters and keep the per-channel scale of their input.
bool is_pass_through(LayerKind kind);

/// Per-channel (epsilon, lambda) pair for one node: the low and high
/// percentiles of its post-activation values.
struct ChannelRange {
    std::vector<float> epsilon;
    std::vector<float> lambda;

    std::size_t channels() const noexcept { return lambda.size(); }
    float span(std::size_t c) const { return lambda[c] - epsilon[c]; }

    bool operator==(const ChannelRange&) const = default;
};

struct ChannelStats {
    double p_lo = 0.01;
    double p_hi = 99.99;
    std::map<std::string, ChannelRange> nodes;
    std::size_t repaired_channels = 0;

    const ChannelRange& at(const std::string& id) const;
    bool contains(const std::string& id) const { return nodes.count(id) != 0; }

    bool operator==(const ChannelStats&) const = default;
};

struct ModelGraph;

struct LayerAttrs {
    // Conv2D
    std::size_t kernel_h = 1;
    std::size_t kernel_w = 1;
    std::size_t filters = 0;
    // Conv2D, AvgPool2D
    std::size_t stride = 1;
    Padding padding = Padding::Same;
    // Dense
    std::size_t units = 0;
    // AvgPool2D
    std::size_t pool_size = 2;
    // UpsampleNearest
    std::size_t factor = 2;
    // NormAdd: alpha[branch][channel], beta[channel]
    std::vector<std::vector<float>> alpha;
    std::vector<float> beta;
    // BatchNorm
    float bn_epsilon = 1e-3f;

    bool operator==(const LayerAttrs&) const = default;
};

struct BatchNormParams {
    Tensor gamma;
    Tensor beta;
    Tensor mean;
    Tensor variance;
};

struct LayerNode {
    std::string id;
    LayerKind kind = LayerKind::Input;
    Activation activation = Activation::None;
    std::vector<std::string> inputs;
    LayerAttrs attrs;

    // Conv2D kernel is (kh, kw, in, out); Dense kernel is (in, out).
    std::optional<Tensor> weights;
    std::optional<Tensor> bias;

    std::optional<BatchNormParams> batch_norm;
    std::shared_ptr<const ModelGraph> subgraph;

    // Excludes the batch dimension; empty until shapes are inferred.
    Shape output_shape;

    std::size_t out_channels() const noexcept {
        return output_shape.empty() ? 0 : output_shape.back();
    }
};

struct ModelGraph {
    std::string name;
    Shape input_shape;
    std::vector<LayerNode> nodes;
    std::vector<std::string> outputs;
    std::optional<ChannelStats> normalization;

    const LayerNode& node(std::string_view id) const;
    LayerNode& node(std::string_view id);
    const LayerNode* find(std::string_view id) const;
    std::size_t index_of(std::string_view id) const;

    /// Nodes here plus all nodes of nested sub-networks.
    std::size_t total_node_count() const;

    /// The single Input node of a top-level model.
    const LayerNode& input_node() const;
};

/// Checks structural invariants: unique ids, resolvable references, arity
/// and parameter presence per kind, acyclicity. Raw kinds are rejected unless
/// `allow_raw` is set.
void validate(const ModelGraph& model, bool allow_raw = false);

/// Node ids in dependency order, ties broken by manifest order.
std::vector<std::string> topological_order(const ModelGraph& model);

/// Returns a copy with every output_shape populated and kernels reshaped to
/// their full rank.
ModelGraph infer_shapes(const ModelGraph& model, const Shape& input_shape);

/// Output extent and leading zero-padding along one spatial axis. 'same'
/// padding is split floor-before / ceil-after.
struct AxisGeometry {
    std::size_t out = 0;
    std::size_t pad_before = 0;
};
AxisGeometry conv_axis(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding);

/// Index of the node that produces reference `ref`, and which of its outputs.
/// References to sub-network outputs are written `<subnet>/<inner-output>`;
/// a bare `<subnet>` means its first output.
struct OutputRef {
    std::size_t node_index;
    std::size_t output_index;
};
std::optional<OutputRef> resolve_reference(const ModelGraph& model, std::string_view ref);

/// Shape produced by reference `ref`, after inference.
const Shape& reference_shape(const ModelGraph& model, std::string_view ref);

ModelGraph load_model(const std::filesystem::path& manifest_path);
void save_model(const ModelGraph& model, const std::filesystem::path& manifest_path);

/// Path of the float blob that accompanies a manifest for model `name`.
std::filesystem::path blob_path_for(const std::filesystem::path& manifest_path,
                                    const std::string& name);

/// Per-node ranges as a standalone JSON file, in the manifest's
/// `normalization` layout keyed by node id.
void save_stats(const ChannelStats& stats, const std::filesystem::path& path);

/// Same topology, attributes and statistics, weights compared bytewise.
bool identical(const ModelGraph& a, const ModelGraph& b);

} // namespace snnconv
