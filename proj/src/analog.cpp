#include "analog.hpp"

#include "error.hpp"
#include "kernels.hpp"

#include <cmath>
#include <unordered_map>

namespace snnconv {

namespace {

Shape batched(std::size_t n, const Shape& shape) {
    Shape s{n};
    s.insert(s.end(), shape.begin(), shape.end());
    return s;
}

Tensor eval_node(const LayerNode& node, const std::vector<const Tensor*>& in) {
    const std::size_t N = in.empty() ? 0 : in[0]->shape()[0];
    Tensor out(batched(N, node.output_shape));
    const std::size_t out_n = element_count(node.output_shape);
    const Tensor& x = *in.at(0);
    const Shape in_shape(x.shape().begin() + 1, x.shape().end());
    const std::size_t in_n = element_count(in_shape);

    for (std::size_t s = 0; s < N; ++s) {
        std::span<const float> src = x.values().subspan(s * in_n, in_n);
        std::span<float> dst = out.values().subspan(s * out_n, out_n);
        switch (node.kind) {
        case LayerKind::Conv2D:
            kernels::conv2d_accumulate(src, in_shape, *node.weights, node.attrs, dst);
            break;
        case LayerKind::Dense:
            kernels::dense_accumulate(src, *node.weights, dst);
            break;
        case LayerKind::Add:
            for (const Tensor* t : in) {
                std::span<const float> b = t->values().subspan(s * in_n, in_n);
                for (std::size_t i = 0; i < out_n; ++i) dst[i] += b[i];
            }
            break;
        case LayerKind::NormAdd: {
            const std::size_t C = node.out_channels();
            for (std::size_t b = 0; b < in.size(); ++b) {
                std::span<const float> v = in[b]->values().subspan(s * in_n, in_n);
                const auto& alpha = node.attrs.alpha[b];
                for (std::size_t i = 0; i < out_n; ++i) dst[i] += alpha[i % C] * v[i];
            }
            kernels::add_bias(dst, node.attrs.beta);
            break;
        }
        case LayerKind::UpsampleNearest:
            kernels::upsample_nearest(src, in_shape, node.attrs.factor, dst);
            break;
        case LayerKind::AvgPool2D:
            kernels::avgpool(src, in_shape, node.attrs.pool_size, dst);
            break;
        case LayerKind::Flatten:
        case LayerKind::ReLU:
            std::copy(src.begin(), src.end(), dst.begin());
            break;
        case LayerKind::BatchNorm: {
            const auto& bn = *node.batch_norm;
            const std::size_t C = node.out_channels();
            for (std::size_t i = 0; i < out_n; ++i) {
                const std::size_t c = i % C;
                const double scale = bn.gamma[c] / std::sqrt(static_cast<double>(bn.variance[c]) + node.attrs.bn_epsilon);
                dst[i] = static_cast<float>((src[i] - bn.mean[c]) * scale + bn.beta[c]);
            }
            break;
        }
        case LayerKind::Input:
        case LayerKind::SubNetwork:
            fail(ErrorCode::Internal, "eval_node called on " + std::string(to_string(node.kind)));
        }
    }
    if (node.bias) kernels::add_bias(out.values(), node.bias->values());
    if (node.activation == Activation::Relu || node.kind == LayerKind::ReLU) kernels::relu(out.values());
    if (!out.all_finite()) {
        fail(ErrorCode::Numeric, "non-finite activation at node '" + node.id + "'");
    }
    return out;
}

// Evaluates `g` with `inputs` bound to its Input nodes in manifest order.
// Values are stored in `values` under `prefix + id`. With `keep_all` false,
// values are dropped after their last consumer unless listed in `keep`.
void eval_graph(const ModelGraph& g, const std::vector<Tensor>& inputs, const std::string& prefix,
                std::map<std::string, Tensor>& values, bool keep_all) {
    std::unordered_map<std::string, std::size_t> remaining;
    for (const auto& n : g.nodes) {
        for (const auto& ref : n.inputs) ++remaining[ref];
    }
    for (const auto& o : g.outputs) ++remaining[o];  // never released

    std::size_t next_input = 0;
    std::unordered_map<std::string, std::size_t> input_slot;
    for (const auto& n : g.nodes) {
        if (n.kind == LayerKind::Input) input_slot[n.id] = next_input++;
    }

    auto release = [&](const std::string& ref) {
        if (keep_all) return;
        if (--remaining[ref] == 0) values.erase(prefix + ref);
    };

    for (const std::string& id : topological_order(g)) {
        const LayerNode& node = g.node(id);
        if (node.kind == LayerKind::Input) {
            values[prefix + id] = inputs.at(input_slot.at(id));
            continue;
        }
        std::vector<const Tensor*> in;
        for (const auto& ref : node.inputs) in.push_back(&values.at(prefix + ref));
        if (node.kind == LayerKind::SubNetwork) {
            std::vector<Tensor> sub_inputs;
            for (const Tensor* t : in) sub_inputs.push_back(*t);
            const std::string inner_prefix = prefix + id + "/";
            eval_graph(*node.subgraph, sub_inputs, inner_prefix, values, keep_all);
            // Bare subnet id aliases its first output.
            values[prefix + id] = values.at(inner_prefix + node.subgraph->outputs.front());
            if (!keep_all) {
                for (const auto& o : node.subgraph->outputs) {
                    if (remaining.count(id + "/" + o) == 0) values.erase(inner_prefix + o);
                }
            }
        } else {
            values[prefix + id] = eval_node(node, in);
        }
        for (const auto& ref : node.inputs) release(ref);
        if (!keep_all && remaining[id] == 0) values.erase(prefix + id);
    }
}

void check_batch(const ModelGraph& model, const Tensor& batch) {
    if (batch.rank() != model.input_shape.size() + 1 ||
        !std::equal(model.input_shape.begin(), model.input_shape.end(), batch.shape().begin() + 1)) {
        fail(ErrorCode::Shape, "batch shape " + shape_string(batch.shape()) + " does not match model input " +
                                   shape_string(model.input_shape) + " with a leading batch extent");
    }
}

} // namespace

Tensor as_batch(const ModelGraph& model, const Tensor& sample_or_batch) {
    if (sample_or_batch.shape() == model.input_shape) {
        return sample_or_batch.reshaped(batched(1, model.input_shape));
    }
    return sample_or_batch;
}

ActivationRecord forward(const ModelGraph& model, const Tensor& batch) {
    check_batch(model, batch);
    ActivationRecord record;
    eval_graph(model, {batch}, "", record, true);
    return record;
}

std::vector<Tensor> forward_outputs(const ModelGraph& model, const Tensor& batch) {
    check_batch(model, batch);
    std::map<std::string, Tensor> values;
    eval_graph(model, {batch}, "", values, false);
    std::vector<Tensor> outs;
    outs.reserve(model.outputs.size());
    for (const auto& o : model.outputs) outs.push_back(values.at(o));
    return outs;
}

} // namespace snnconv
