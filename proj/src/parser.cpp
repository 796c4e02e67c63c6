#include "parser.hpp"

#include "analog.hpp"
#include "error.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace snnconv {

namespace {

using AliasMap = std::map<std::string, std::string>;

std::string resolve(const AliasMap& alias, std::string ref) {
    for (std::size_t hops = 0; hops <= alias.size(); ++hops) {
        auto it = alias.find(ref);
        if (it == alias.end()) return ref;
        ref = it->second;
    }
    fail(ErrorCode::Graph, "cyclic sub-network port aliasing at '" + ref + "'");
}

void apply_aliases(ModelGraph& g, const AliasMap& alias) {
    for (auto& n : g.nodes) {
        for (auto& ref : n.inputs) ref = resolve(alias, ref);
    }
    for (auto& o : g.outputs) o = resolve(alias, o);
}

// Splices every SubNetwork into its parent; the result contains no
// SubNetwork nodes. Inner Input nodes become aliases of the enclosing edges.
ModelGraph inline_subnetworks(const ModelGraph& g) {
    ModelGraph flat;
    flat.name = g.name;
    flat.input_shape = g.input_shape;
    flat.outputs = g.outputs;
    flat.normalization = g.normalization;
    AliasMap alias;
    for (const LayerNode& node : g.nodes) {
        if (node.kind != LayerKind::SubNetwork) {
            flat.nodes.push_back(node);
            continue;
        }
        const ModelGraph inner = inline_subnetworks(*node.subgraph);
        const std::string prefix = node.id + "/";
        std::size_t port = 0;
        for (const LayerNode& in : inner.nodes) {
            if (in.kind != LayerKind::Input) continue;
            if (port >= node.inputs.size()) {
                fail(ErrorCode::Graph, "SubNetwork port mismatch at '" + node.id + "'");
            }
            alias[prefix + in.id] = node.inputs[port++];
        }
        if (port != node.inputs.size()) {
            fail(ErrorCode::Graph, "SubNetwork port mismatch at '" + node.id + "': " +
                                       std::to_string(node.inputs.size()) + " edges for " +
                                       std::to_string(port) + " nested inputs");
        }
        for (const LayerNode& in : inner.nodes) {
            if (in.kind == LayerKind::Input) continue;
            LayerNode copy = in;
            copy.id = prefix + in.id;
            for (auto& ref : copy.inputs) ref = prefix + ref;
            flat.nodes.push_back(std::move(copy));
        }
        alias[node.id] = prefix + inner.outputs.front();
    }
    apply_aliases(flat, alias);
    return flat;
}

std::size_t consumer_count(const ModelGraph& g, const std::string& id) {
    std::size_t n = 0;
    for (const auto& node : g.nodes) {
        n += static_cast<std::size_t>(std::count(node.inputs.begin(), node.inputs.end(), id));
    }
    n += static_cast<std::size_t>(std::count(g.outputs.begin(), g.outputs.end(), id));
    return n;
}

void fold_batch_norm(LayerNode& producer, const LayerNode& bn_node) {
    const auto& bn = *bn_node.batch_norm;
    Tensor& w = *producer.weights;
    const std::size_t C = w.shape().back();
    if (bn.gamma.size() != C) {
        fail(ErrorCode::Shape, "BatchNorm '" + bn_node.id + "' has " + std::to_string(bn.gamma.size()) +
                                   " channels but its producer '" + producer.id + "' has " + std::to_string(C));
    }
    std::vector<double> scale(C);
    for (std::size_t c = 0; c < C; ++c) {
        scale[c] = bn.gamma[c] / std::sqrt(static_cast<double>(bn.variance[c]) + bn_node.attrs.bn_epsilon);
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = static_cast<float>(w[i] * scale[i % C]);
    }
    Tensor bias = producer.bias ? *producer.bias : Tensor({C}, 0.0f);
    for (std::size_t c = 0; c < C; ++c) {
        bias[c] = static_cast<float>((static_cast<double>(bias[c]) - bn.mean[c]) * scale[c] + bn.beta[c]);
    }
    producer.bias = std::move(bias);
}

void remove_node(ModelGraph& g, const std::string& id, const std::string& replacement) {
    g.nodes.erase(g.nodes.begin() + static_cast<std::ptrdiff_t>(g.index_of(id)));
    apply_aliases(g, AliasMap{{id, replacement}});
}

void fuse(ModelGraph& g) {
    for (const std::string& id : topological_order(g)) {
        const LayerNode* node = g.find(id);
        if (!node || (node->kind != LayerKind::BatchNorm && node->kind != LayerKind::ReLU)) continue;
        const std::string producer_id = node->inputs.at(0);
        LayerNode& producer = g.node(producer_id);
        const bool single_consumer = consumer_count(g, producer_id) == 1;
        if (node->kind == LayerKind::BatchNorm) {
            if (!is_weighted(producer.kind) || producer.activation != Activation::None || !single_consumer) {
                fail(ErrorCode::Graph, "BatchNorm without a fusable producer at '" + id + "' (input '" +
                                           producer_id + "' is " + std::string(to_string(producer.kind)) + ")");
            }
            fold_batch_norm(producer, *node);
        } else {
            const bool can_hold = is_weighted(producer.kind) || is_multi_input(producer.kind);
            if (!can_hold || producer.activation != Activation::None || !single_consumer) {
                fail(ErrorCode::Graph, "ReLU without a fusable producer at '" + id + "' (input '" + producer_id +
                                           "' is " + std::string(to_string(producer.kind)) + ")");
            }
            producer.activation = Activation::Relu;
        }
        remove_node(g, id, producer_id);
    }
}

void drop_unreferenced(ModelGraph& g) {
    std::set<std::string> live(g.outputs.begin(), g.outputs.end());
    const auto order = topological_order(g);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const LayerNode& n = g.node(*it);
        if (!live.count(n.id) && n.kind != LayerKind::Input) continue;
        live.insert(n.id);
        live.insert(n.inputs.begin(), n.inputs.end());
    }
    std::erase_if(g.nodes, [&](const LayerNode& n) { return !live.count(n.id); });
}

} // namespace

ModelGraph parse(const ModelGraph& raw) {
    validate(raw, true);
    ModelGraph g = inline_subnetworks(infer_shapes(raw, raw.input_shape));
    fuse(g);
    drop_unreferenced(g);
    for (const auto& n : g.nodes) {
        if (!is_ir_kind(n.kind)) {
            fail(ErrorCode::Unsupported, "unsupported layer kind '" + std::string(to_string(n.kind)) +
                                             "' left at node '" + n.id + "'");
        }
    }
    validate(g, false);
    return infer_shapes(g, raw.input_shape);
}

ParseFidelity verify_parse(const ModelGraph& raw, const ModelGraph& parsed, const Tensor& probe_batch,
                           double tolerance) {
    const auto a = forward_outputs(raw, probe_batch);
    const auto b = forward_outputs(parsed, probe_batch);
    if (a.size() != b.size()) {
        fail(ErrorCode::Shape, "raw model has " + std::to_string(a.size()) + " outputs, parsed model has " +
                                   std::to_string(b.size()));
    }
    ParseFidelity report;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].shape() != b[i].shape()) {
            fail(ErrorCode::Shape, "output " + std::to_string(i) + " shape " + shape_string(b[i].shape()) +
                                       " differs from raw " + shape_string(a[i].shape()));
        }
        const double d = relative_deviation(b[i], a[i]);
        report.per_output.push_back(d);
        report.max_relative_deviation = std::max(report.max_relative_deviation, d);
    }
    report.ok = report.max_relative_deviation <= tolerance;
    return report;
}

} // namespace snnconv
