#include "model.hpp"

#include "error.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <unordered_set>

namespace snnconv {

namespace {

struct KindName {
    LayerKind kind;
    std::string_view name;
};

constexpr std::array<KindName, 11> kKindNames{{
    {LayerKind::Input, "Input"},
    {LayerKind::Conv2D, "Conv2D"},
    {LayerKind::Dense, "Dense"},
    {LayerKind::Add, "Add"},
    {LayerKind::NormAdd, "NormAdd"},
    {LayerKind::UpsampleNearest, "UpsampleNearest"},
    {LayerKind::AvgPool2D, "AvgPool2D"},
    {LayerKind::Flatten, "Flatten"},
    {LayerKind::SubNetwork, "SubNetwork"},
    {LayerKind::BatchNorm, "BatchNorm"},
    {LayerKind::ReLU, "ReLU"},
}};

std::string q(std::string_view s) {
    return "'" + std::string(s) + "'";
}

std::size_t input_node_count(const ModelGraph& g) {
    return static_cast<std::size_t>(std::count_if(g.nodes.begin(), g.nodes.end(), [](const LayerNode& n) {
        return n.kind == LayerKind::Input;
    }));
}

void check_param_length(const LayerNode& node, const char* what, const Tensor& t,
                        std::size_t expected) {
    if (t.size() != expected) {
        fail(ErrorCode::Shape, "node " + q(node.id) + ": " + what + " has " +
                                   std::to_string(t.size()) + " values, expected " +
                                   std::to_string(expected));
    }
}

ModelGraph infer_impl(const ModelGraph& model, const std::vector<Shape>& input_shapes);

Shape infer_node(const ModelGraph& g, LayerNode& node, const std::vector<Shape>& in_shapes,
                 std::size_t& next_input, const std::vector<Shape>& graph_inputs) {
    auto need_rank = [&](const Shape& s, std::size_t rank) {
        if (s.size() != rank) {
            fail(ErrorCode::Shape, "node " + q(node.id) + " (" + std::string(to_string(node.kind)) +
                                       ") expects rank-" + std::to_string(rank) + " input, got " +
                                       shape_string(s));
        }
    };
    switch (node.kind) {
    case LayerKind::Input: {
        if (next_input >= graph_inputs.size()) {
            fail(ErrorCode::Shape, "no input shape supplied for input node " + q(node.id));
        }
        const Shape& s = graph_inputs[next_input++];
        if (s.empty() || element_count(s) == 0) {
            fail(ErrorCode::Shape, "input node " + q(node.id) + " has empty shape");
        }
        if (s.size() != 1 && s.size() != 3) {
            fail(ErrorCode::Shape, "input node " + q(node.id) + " must be rank 1 or 3, got " +
                                       shape_string(s));
        }
        return s;
    }
    case LayerKind::Conv2D: {
        const Shape& in = in_shapes.at(0);
        need_rank(in, 3);
        const auto& a = node.attrs;
        const std::size_t cin = in[2];
        check_param_length(node, "kernel", *node.weights, a.kernel_h * a.kernel_w * cin * a.filters);
        node.weights = node.weights->reshaped({a.kernel_h, a.kernel_w, cin, a.filters});
        if (node.bias) {
            check_param_length(node, "bias", *node.bias, a.filters);
            node.bias = node.bias->reshaped({a.filters});
        }
        if (a.padding == Padding::Valid && (in[0] < a.kernel_h || in[1] < a.kernel_w)) {
            fail(ErrorCode::Shape, "node " + q(node.id) + ": kernel larger than input " +
                                       shape_string(in) + " under 'valid' padding");
        }
        const auto gy = conv_axis(in[0], a.kernel_h, a.stride, a.padding);
        const auto gx = conv_axis(in[1], a.kernel_w, a.stride, a.padding);
        return {gy.out, gx.out, a.filters};
    }
    case LayerKind::Dense: {
        const Shape& in = in_shapes.at(0);
        need_rank(in, 1);
        check_param_length(node, "kernel", *node.weights, in[0] * node.attrs.units);
        node.weights = node.weights->reshaped({in[0], node.attrs.units});
        if (node.bias) {
            check_param_length(node, "bias", *node.bias, node.attrs.units);
            node.bias = node.bias->reshaped({node.attrs.units});
        }
        return {node.attrs.units};
    }
    case LayerKind::Add:
    case LayerKind::NormAdd: {
        for (std::size_t b = 1; b < in_shapes.size(); ++b) {
            if (in_shapes[b] != in_shapes[0]) {
                fail(ErrorCode::Shape, "shape mismatch at " + std::string(to_string(node.kind)) + " node " +
                                           q(node.id) + ": " + shape_string(in_shapes[0]) + " vs " +
                                           shape_string(in_shapes[b]) + " (input " + q(node.inputs[b]) +
                                           ")");
            }
        }
        if (node.kind == LayerKind::NormAdd) {
            const std::size_t c = in_shapes[0].back();
            bool ok = node.attrs.alpha.size() == in_shapes.size() && node.attrs.beta.size() == c;
            for (const auto& row : node.attrs.alpha) ok = ok && row.size() == c;
            if (!ok) {
                fail(ErrorCode::Shape, "NormAdd node " + q(node.id) +
                                           ": alpha must be branches x channels and beta per channel");
            }
        }
        return in_shapes[0];
    }
    case LayerKind::UpsampleNearest: {
        const Shape& in = in_shapes.at(0);
        need_rank(in, 3);
        return {in[0] * node.attrs.factor, in[1] * node.attrs.factor, in[2]};
    }
    case LayerKind::AvgPool2D: {
        const Shape& in = in_shapes.at(0);
        need_rank(in, 3);
        const std::size_t p = node.attrs.pool_size;
        if (node.attrs.padding == Padding::Valid && (in[0] % p != 0 || in[1] % p != 0)) {
            fail(ErrorCode::Shape, "non-divisible pooling at node " + q(node.id) + ": " +
                                       shape_string(in) + " by pool size " + std::to_string(p));
        }
        return {(in[0] + p - 1) / p, (in[1] + p - 1) / p, in[2]};
    }
    case LayerKind::Flatten:
        return {element_count(in_shapes.at(0))};
    case LayerKind::BatchNorm: {
        const Shape& in = in_shapes.at(0);
        const std::size_t c = in.back();
        const auto& bn = *node.batch_norm;
        check_param_length(node, "gamma", bn.gamma, c);
        check_param_length(node, "beta", bn.beta, c);
        check_param_length(node, "mean", bn.mean, c);
        check_param_length(node, "variance", bn.variance, c);
        return in;
    }
    case LayerKind::ReLU:
        return in_shapes.at(0);
    case LayerKind::SubNetwork: {
        auto inner = std::make_shared<ModelGraph>(infer_impl(*node.subgraph, in_shapes));
        node.subgraph = inner;
        return reference_shape(*inner, inner->outputs.front());
    }
    }
    (void)g;
    fail(ErrorCode::Internal, "unhandled layer kind");
}

ModelGraph infer_impl(const ModelGraph& model, const std::vector<Shape>& input_shapes) {
    ModelGraph out = model;
    std::size_t next_input = 0;
    // Input nodes take supplied shapes in manifest order, not in dependency order.
    std::vector<std::size_t> input_order;
    for (std::size_t i = 0; i < out.nodes.size(); ++i) {
        if (out.nodes[i].kind == LayerKind::Input) input_order.push_back(i);
    }
    for (std::size_t k = 0; k < input_order.size(); ++k) {
        std::size_t idx = k;
        out.nodes[input_order[k]].output_shape =
            infer_node(out, out.nodes[input_order[k]], {}, idx, input_shapes);
    }
    next_input = input_order.size();
    for (const std::string& id : topological_order(out)) {
        LayerNode& node = out.node(id);
        if (node.kind == LayerKind::Input) continue;
        std::vector<Shape> in_shapes;
        in_shapes.reserve(node.inputs.size());
        for (const std::string& ref : node.inputs) {
            in_shapes.push_back(reference_shape(out, ref));
        }
        node.output_shape = infer_node(out, node, in_shapes, next_input, input_shapes);
        if (element_count(node.output_shape) == 0) {
            fail(ErrorCode::Shape, "node " + q(node.id) + " has zero-sized output " +
                                       shape_string(node.output_shape));
        }
    }
    return out;
}

} // namespace

std::string_view to_string(LayerKind kind) {
    for (const auto& k : kKindNames) {
        if (k.kind == kind) return k.name;
    }
    return "?";
}

std::string_view to_string(Activation activation) {
    return activation == Activation::Relu ? "relu" : "none";
}

std::string_view to_string(Padding padding) {
    return padding == Padding::Same ? "same" : "valid";
}

LayerKind parse_layer_kind(std::string_view name) {
    for (const auto& k : kKindNames) {
        if (k.name == name) return k.kind;
    }
    fail(ErrorCode::Unsupported, "unsupported layer kind " + q(name));
}

Activation parse_activation(std::string_view name) {
    if (name == "none" || name == "linear") return Activation::None;
    if (name == "relu") return Activation::Relu;
    fail(ErrorCode::Unsupported, "unsupported activation " + q(name) +
                                     " (only relu and none can be converted)");
}

Padding parse_padding(std::string_view name) {
    if (name == "same") return Padding::Same;
    if (name == "valid") return Padding::Valid;
    fail(ErrorCode::Format, "unknown padding mode " + q(name));
}

bool is_ir_kind(LayerKind kind) {
    return kind != LayerKind::SubNetwork && kind != LayerKind::BatchNorm && kind != LayerKind::ReLU;
}

bool is_weighted(LayerKind kind) {
    return kind == LayerKind::Conv2D || kind == LayerKind::Dense;
}

bool is_multi_input(LayerKind kind) {
    return kind == LayerKind::Add || kind == LayerKind::NormAdd;
}

bool is_pass_through(LayerKind kind) {
    return kind == LayerKind::UpsampleNearest || kind == LayerKind::AvgPool2D ||
           kind == LayerKind::Flatten;
}

const ChannelRange& ChannelStats::at(const std::string& id) const {
    auto it = nodes.find(id);
    if (it == nodes.end()) {
        fail(ErrorCode::State, "missing stats for node " + q(id));
    }
    return it->second;
}

const LayerNode* ModelGraph::find(std::string_view id) const {
    for (const auto& n : nodes) {
        if (n.id == id) return &n;
    }
    return nullptr;
}

const LayerNode& ModelGraph::node(std::string_view id) const {
    if (const LayerNode* n = find(id)) return *n;
    fail(ErrorCode::Graph, "unknown node " + q(id));
}

LayerNode& ModelGraph::node(std::string_view id) {
    return const_cast<LayerNode&>(static_cast<const ModelGraph&>(*this).node(id));
}

std::size_t ModelGraph::index_of(std::string_view id) const {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (nodes[i].id == id) return i;
    }
    fail(ErrorCode::Graph, "unknown node " + q(id));
}

std::size_t ModelGraph::total_node_count() const {
    std::size_t n = nodes.size();
    for (const auto& node : nodes) {
        if (node.subgraph) n += node.subgraph->total_node_count();
    }
    return n;
}

const LayerNode& ModelGraph::input_node() const {
    const LayerNode* found = nullptr;
    for (const auto& n : nodes) {
        if (n.kind != LayerKind::Input) continue;
        if (found) {
            fail(ErrorCode::Graph, "model " + q(name) + " has more than one Input node");
        }
        found = &n;
    }
    if (!found) fail(ErrorCode::Graph, "model " + q(name) + " has no Input node");
    return *found;
}

AxisGeometry conv_axis(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding) {
    AxisGeometry g;
    if (padding == Padding::Same) {
        g.out = (in + stride - 1) / stride;
        const std::size_t needed = (g.out - 1) * stride + kernel;
        g.pad_before = needed > in ? (needed - in) / 2 : 0;
    } else {
        g.out = in >= kernel ? (in - kernel) / stride + 1 : 0;
        g.pad_before = 0;
    }
    return g;
}

std::optional<OutputRef> resolve_reference(const ModelGraph& model, std::string_view ref) {
    for (std::size_t i = 0; i < model.nodes.size(); ++i) {
        if (model.nodes[i].id == ref) return OutputRef{i, 0};
    }
    // `<subnet>/<inner-output>`; the subnet id itself may not contain the split point.
    for (std::size_t pos = ref.find('/'); pos != std::string_view::npos; pos = ref.find('/', pos + 1)) {
        const std::string_view head = ref.substr(0, pos);
        const std::string_view tail = ref.substr(pos + 1);
        for (std::size_t i = 0; i < model.nodes.size(); ++i) {
            const LayerNode& n = model.nodes[i];
            if (n.kind != LayerKind::SubNetwork || n.id != head || !n.subgraph) continue;
            const auto& outs = n.subgraph->outputs;
            for (std::size_t k = 0; k < outs.size(); ++k) {
                if (outs[k] == tail) return OutputRef{i, k};
            }
        }
    }
    return std::nullopt;
}

const Shape& reference_shape(const ModelGraph& model, std::string_view ref) {
    auto r = resolve_reference(model, ref);
    if (!r) fail(ErrorCode::Graph, "dangling input reference " + q(ref));
    const LayerNode& n = model.nodes[r->node_index];
    if (n.kind == LayerKind::SubNetwork && n.subgraph) {
        return reference_shape(*n.subgraph, n.subgraph->outputs.at(r->output_index));
    }
    return n.output_shape;
}

std::vector<std::string> topological_order(const ModelGraph& model) {
    const std::size_t n = model.nodes.size();
    std::vector<std::vector<std::size_t>> consumers(n);
    std::vector<std::size_t> pending(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        for (const auto& ref : model.nodes[i].inputs) {
            auto r = resolve_reference(model, ref);
            if (!r) {
                fail(ErrorCode::Graph, "dangling input reference " + q(ref) + " at node " +
                                           q(model.nodes[i].id));
            }
            consumers[r->node_index].push_back(i);
            ++pending[i];
        }
    }
    std::set<std::size_t> ready;
    for (std::size_t i = 0; i < n; ++i) {
        if (pending[i] == 0) ready.insert(i);
    }
    std::vector<std::string> order;
    order.reserve(n);
    while (!ready.empty()) {
        const std::size_t i = *ready.begin();
        ready.erase(ready.begin());
        order.push_back(model.nodes[i].id);
        for (std::size_t c : consumers[i]) {
            if (--pending[c] == 0) ready.insert(c);
        }
    }
    if (order.size() != n) {
        for (std::size_t i = 0; i < n; ++i) {
            if (pending[i] != 0) {
                fail(ErrorCode::Graph, "cycle detected involving node " + q(model.nodes[i].id));
            }
        }
    }
    return order;
}

void validate(const ModelGraph& model, bool allow_raw) {
    std::unordered_set<std::string> ids;
    for (const auto& node : model.nodes) {
        if (node.id.empty()) fail(ErrorCode::Graph, "node with empty id");
        if (!ids.insert(node.id).second) {
            fail(ErrorCode::Graph, "duplicate node id " + q(node.id));
        }
    }
    for (const auto& node : model.nodes) {
        const std::string where = "node " + q(node.id) + " (" + std::string(to_string(node.kind)) + ")";
        if (!allow_raw && !is_ir_kind(node.kind)) {
            fail(ErrorCode::Unsupported, where + ": kind only allowed in raw models");
        }
        const std::size_t arity = node.inputs.size();
        switch (node.kind) {
        case LayerKind::Input:
            if (arity != 0) fail(ErrorCode::Graph, where + " must have no inputs");
            break;
        case LayerKind::Add:
        case LayerKind::NormAdd:
            if (arity < 2) fail(ErrorCode::Graph, where + " needs at least 2 inputs");
            break;
        case LayerKind::SubNetwork:
            if (!node.subgraph) fail(ErrorCode::Graph, where + " has no nested model");
            validate(*node.subgraph, true);
            if (arity != input_node_count(*node.subgraph)) {
                fail(ErrorCode::Graph, "SubNetwork port mismatch at " + where + ": " +
                                           std::to_string(arity) + " inputs for " +
                                           std::to_string(input_node_count(*node.subgraph)) +
                                           " nested Input nodes");
            }
            if (node.subgraph->outputs.empty()) {
                fail(ErrorCode::Graph, "SubNetwork port mismatch at " + where + ": no outputs");
            }
            break;
        default:
            if (arity != 1) fail(ErrorCode::Graph, where + " needs exactly 1 input");
        }
        if (is_weighted(node.kind) != node.weights.has_value()) {
            fail(ErrorCode::Graph, where + (node.weights ? " must not carry weights" : " is missing weights"));
        }
        if (node.bias && !is_weighted(node.kind)) {
            fail(ErrorCode::Graph, where + " must not carry a bias");
        }
        if ((node.kind == LayerKind::BatchNorm) != node.batch_norm.has_value()) {
            fail(ErrorCode::Graph, where + " has misplaced batch-norm parameters");
        }
        if (node.kind == LayerKind::BatchNorm) {
            for (float v : node.batch_norm->variance.values()) {
                if (!(v > 0.0f)) fail(ErrorCode::Numeric, where + ": variance must be strictly positive");
            }
            if (!(node.attrs.bn_epsilon >= 0.0f)) {
                fail(ErrorCode::Numeric, where + ": epsilon must be non-negative");
            }
        }
        if (node.activation == Activation::Relu &&
            !(is_weighted(node.kind) || is_multi_input(node.kind))) {
            fail(ErrorCode::Unsupported, where + ": relu activation only allowed on Conv2D, Dense, Add, NormAdd");
        }
        const auto& a = node.attrs;
        if (node.kind == LayerKind::Conv2D &&
            (a.kernel_h == 0 || a.kernel_w == 0 || a.filters == 0 || a.stride == 0)) {
            fail(ErrorCode::Format, where + ": kernel, filters and stride must be positive");
        }
        if (node.kind == LayerKind::Dense && a.units == 0) fail(ErrorCode::Format, where + ": units must be positive");
        if (node.kind == LayerKind::AvgPool2D && a.pool_size == 0) {
            fail(ErrorCode::Format, where + ": pool size must be positive");
        }
        if (node.kind == LayerKind::UpsampleNearest && a.factor == 0) {
            fail(ErrorCode::Format, where + ": upsample factor must be positive");
        }
        for (const auto* t : {node.weights ? &*node.weights : nullptr, node.bias ? &*node.bias : nullptr}) {
            if (t && !t->all_finite()) fail(ErrorCode::Numeric, where + ": non-finite parameter value");
        }
    }
    for (const auto& out : model.outputs) {
        if (!resolve_reference(model, out)) {
            fail(ErrorCode::Graph, "output " + q(out) + " does not name a node");
        }
    }
    if (model.outputs.empty()) fail(ErrorCode::Graph, "model " + q(model.name) + " has no outputs");
    topological_order(model);
}

ModelGraph infer_shapes(const ModelGraph& model, const Shape& input_shape) {
    if (!model.input_shape.empty() && model.input_shape.size() != input_shape.size()) {
        fail(ErrorCode::Shape, "input shape " + shape_string(input_shape) + " has wrong rank for model " +
                                   q(model.name) + " expecting " + shape_string(model.input_shape));
    }
    model.input_node();
    ModelGraph out = infer_impl(model, {input_shape});
    out.input_shape = input_shape;
    return out;
}

namespace {

bool optional_tensor_equal(const std::optional<Tensor>& a, const std::optional<Tensor>& b) {
    if (a.has_value() != b.has_value()) return false;
    return !a || a->bitwise_equal(*b);
}

} // namespace

bool identical(const ModelGraph& a, const ModelGraph& b) {
    if (a.name != b.name || a.input_shape != b.input_shape || a.outputs != b.outputs ||
        a.normalization != b.normalization || a.nodes.size() != b.nodes.size()) {
        return false;
    }
    for (std::size_t i = 0; i < a.nodes.size(); ++i) {
        const LayerNode& x = a.nodes[i];
        const LayerNode& y = b.nodes[i];
        if (x.id != y.id || x.kind != y.kind || x.activation != y.activation || x.inputs != y.inputs ||
            !(x.attrs == y.attrs) || x.output_shape != y.output_shape ||
            !optional_tensor_equal(x.weights, y.weights) || !optional_tensor_equal(x.bias, y.bias)) {
            return false;
        }
        if (x.batch_norm.has_value() != y.batch_norm.has_value()) return false;
        if (x.batch_norm) {
            const auto& p = *x.batch_norm;
            const auto& q = *y.batch_norm;
            if (!p.gamma.bitwise_equal(q.gamma) || !p.beta.bitwise_equal(q.beta) ||
                !p.mean.bitwise_equal(q.mean) || !p.variance.bitwise_equal(q.variance)) {
                return false;
            }
        }
        if (bool(x.subgraph) != bool(y.subgraph)) return false;
        if (x.subgraph && !identical(*x.subgraph, *y.subgraph)) return false;
    }
    return true;
}

} // namespace snnconv
