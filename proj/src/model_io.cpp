// Manifest (JSON) + float32 blob serialization of ModelGraph.

#include "model.hpp"

#include "binary_io.hpp"
#include "error.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <sstream>

namespace snnconv {

namespace {

using json = nlohmann::ordered_json;

std::string q(std::string_view s) {
    return "'" + std::string(s) + "'";
}

class BlobReader {
public:
    explicit BlobReader(std::vector<float> values) : values_(std::move(values)) {}

    Tensor take(const json& ref, const std::string& node_id, const char* what) {
        if (!ref.is_object() || !ref.contains("offset") || !ref.contains("length")) {
            fail(ErrorCode::Format, "node " + q(node_id) + ": " + what +
                                        " must be an object with offset and length");
        }
        const auto offset = ref.at("offset").get<std::uint64_t>();
        const auto length = ref.at("length").get<std::uint64_t>();
        const std::uint64_t end = offset + length;
        if (end > values_.size()) {
            fail(ErrorCode::Format, "blob length mismatch: node " + q(node_id) + " " + what +
                                        " spans bytes [" + std::to_string(offset * 4) + ", " +
                                        std::to_string(end * 4) + ") but the blob holds " +
                                        std::to_string(values_.size() * 4) + " bytes");
        }
        max_end_ = std::max(max_end_, end);
        std::vector<float> data(values_.begin() + static_cast<std::ptrdiff_t>(offset),
                                values_.begin() + static_cast<std::ptrdiff_t>(end));
        for (std::size_t i = 0; i < data.size(); ++i) {
            if (!std::isfinite(data[i])) {
                fail(ErrorCode::Numeric, "non-finite weight value in node " + q(node_id) + " " + what +
                                             " at blob byte offset " + std::to_string((offset + i) * 4));
            }
        }
        return Tensor({static_cast<std::size_t>(length)}, std::move(data));
    }

    void check_fully_used() const {
        if (max_end_ != values_.size()) {
            fail(ErrorCode::Format, "blob length mismatch: manifest references " + std::to_string(max_end_ * 4) +
                                        " bytes but the blob holds " + std::to_string(values_.size() * 4));
        }
    }

private:
    std::vector<float> values_;
    std::uint64_t max_end_ = 0;
};

class BlobWriter {
public:
    json put(const Tensor& t) {
        json ref;
        ref["offset"] = values_.size();
        ref["length"] = t.size();
        values_.insert(values_.end(), t.values().begin(), t.values().end());
        return ref;
    }
    const std::vector<float>& values() const { return values_; }

private:
    std::vector<float> values_;
};

Shape read_shape(const json& j) {
    Shape s;
    for (const auto& e : j) {
        const auto v = e.get<std::int64_t>();
        if (v <= 0) fail(ErrorCode::Format, "shape extents must be positive");
        s.push_back(static_cast<std::size_t>(v));
    }
    return s;
}

std::vector<float> read_floats(const json& j) {
    std::vector<float> v;
    v.reserve(j.size());
    for (const auto& e : j) v.push_back(static_cast<float>(e.get<double>()));
    return v;
}

json write_floats(const std::vector<float>& v) {
    json arr = json::array();
    for (float f : v) arr.push_back(static_cast<double>(f));
    return arr;
}

std::size_t read_positive(const json& attrs, const char* key, std::size_t fallback) {
    if (!attrs.contains(key)) return fallback;
    const auto v = attrs.at(key).get<std::int64_t>();
    if (v <= 0) fail(ErrorCode::Format, std::string("attribute ") + key + " must be positive");
    return static_cast<std::size_t>(v);
}

ModelGraph read_graph(const json& j, BlobReader& blob, std::optional<ChannelStats>* stats) {
    ModelGraph g;
    g.name = j.value("name", std::string{});
    if (j.contains("input_shape")) g.input_shape = read_shape(j.at("input_shape"));
    if (j.contains("outputs")) {
        for (const auto& o : j.at("outputs")) g.outputs.push_back(o.get<std::string>());
    }
    if (!j.contains("nodes") || !j.at("nodes").is_array()) {
        fail(ErrorCode::Format, "manifest for " + q(g.name) + " has no nodes array");
    }
    for (const auto& jn : j.at("nodes")) {
        LayerNode node;
        if (!jn.contains("id") || !jn.contains("kind")) {
            fail(ErrorCode::Format, "every node needs an id and a kind");
        }
        node.id = jn.at("id").get<std::string>();
        const std::string kind_name = jn.at("kind").get<std::string>();
        try {
            node.kind = parse_layer_kind(kind_name);
        } catch (const Error& e) {
            fail(e.code(), std::string(e.what()) + " at node " + q(node.id));
        }
        node.activation = parse_activation(jn.value("activation", std::string("none")));
        if (jn.contains("inputs")) {
            for (const auto& in : jn.at("inputs")) node.inputs.push_back(in.get<std::string>());
        }
        const json attrs = jn.value("attrs", json::object());
        auto& a = node.attrs;
        switch (node.kind) {
        case LayerKind::Conv2D:
            if (!attrs.contains("kernel") || attrs.at("kernel").size() != 2) {
                fail(ErrorCode::Format, "Conv2D node " + q(node.id) + " needs a 2-element kernel attribute");
            }
            a.kernel_h = attrs.at("kernel")[0].get<std::size_t>();
            a.kernel_w = attrs.at("kernel")[1].get<std::size_t>();
            a.filters = read_positive(attrs, "filters", 0);
            a.stride = read_positive(attrs, "stride", 1);
            a.padding = parse_padding(attrs.value("padding", std::string("same")));
            break;
        case LayerKind::Dense:
            a.units = read_positive(attrs, "units", 0);
            break;
        case LayerKind::AvgPool2D:
            a.pool_size = read_positive(attrs, "pool_size", 2);
            a.padding = parse_padding(attrs.value("padding", std::string("valid")));
            break;
        case LayerKind::UpsampleNearest:
            a.factor = read_positive(attrs, "factor", 2);
            break;
        case LayerKind::NormAdd:
            for (const auto& row : attrs.at("alpha")) a.alpha.push_back(read_floats(row));
            a.beta = read_floats(attrs.at("beta"));
            break;
        case LayerKind::BatchNorm:
            a.bn_epsilon = static_cast<float>(attrs.value("epsilon", 1e-3));
            break;
        default:
            break;
        }
        if (jn.contains("weights")) node.weights = blob.take(jn.at("weights"), node.id, "weights");
        if (jn.contains("bias")) node.bias = blob.take(jn.at("bias"), node.id, "bias");
        if (node.kind == LayerKind::BatchNorm) {
            BatchNormParams p;
            p.gamma = blob.take(jn.at("gamma"), node.id, "gamma");
            p.beta = blob.take(jn.at("beta"), node.id, "beta");
            p.mean = blob.take(jn.at("mean"), node.id, "mean");
            p.variance = blob.take(jn.at("variance"), node.id, "variance");
            node.batch_norm = std::move(p);
        }
        if (node.kind == LayerKind::SubNetwork) {
            if (!jn.contains("subnetwork")) {
                fail(ErrorCode::Format, "SubNetwork node " + q(node.id) + " has no subnetwork object");
            }
            node.subgraph = std::make_shared<ModelGraph>(read_graph(jn.at("subnetwork"), blob, nullptr));
        }
        if (jn.contains("normalization")) {
            if (!stats) fail(ErrorCode::Format, "normalization only allowed on top-level nodes");
            if (!*stats) *stats = ChannelStats{};
            const auto& jr = jn.at("normalization");
            ChannelRange range{read_floats(jr.at("epsilon")), read_floats(jr.at("lambda"))};
            if (range.epsilon.size() != range.lambda.size()) {
                fail(ErrorCode::Format, "node " + q(node.id) + ": epsilon and lambda lengths differ");
            }
            (*stats)->nodes.emplace(node.id, std::move(range));
        }
        g.nodes.push_back(std::move(node));
    }
    return g;
}

json write_graph(const ModelGraph& g, BlobWriter& blob, bool top_level) {
    json j;
    j["name"] = g.name;
    j["input_shape"] = g.input_shape;
    j["outputs"] = g.outputs;
    if (top_level && g.normalization) {
        j["calibration"] = {{"p_lo", g.normalization->p_lo},
                            {"p_hi", g.normalization->p_hi},
                            {"repaired_channels", g.normalization->repaired_channels}};
    }
    json nodes = json::array();
    for (const LayerNode& n : g.nodes) {
        json jn;
        jn["id"] = n.id;
        jn["kind"] = std::string(to_string(n.kind));
        jn["activation"] = std::string(to_string(n.activation));
        jn["inputs"] = n.inputs;
        json attrs = json::object();
        const auto& a = n.attrs;
        switch (n.kind) {
        case LayerKind::Conv2D:
            attrs["kernel"] = {a.kernel_h, a.kernel_w};
            attrs["filters"] = a.filters;
            attrs["stride"] = a.stride;
            attrs["padding"] = std::string(to_string(a.padding));
            break;
        case LayerKind::Dense:
            attrs["units"] = a.units;
            break;
        case LayerKind::AvgPool2D:
            attrs["pool_size"] = a.pool_size;
            attrs["padding"] = std::string(to_string(a.padding));
            break;
        case LayerKind::UpsampleNearest:
            attrs["factor"] = a.factor;
            break;
        case LayerKind::NormAdd: {
            json alpha = json::array();
            for (const auto& row : a.alpha) alpha.push_back(write_floats(row));
            attrs["alpha"] = std::move(alpha);
            attrs["beta"] = write_floats(a.beta);
            break;
        }
        case LayerKind::BatchNorm:
            attrs["epsilon"] = static_cast<double>(a.bn_epsilon);
            break;
        default:
            break;
        }
        jn["attrs"] = std::move(attrs);
        if (n.weights) jn["weights"] = blob.put(*n.weights);
        if (n.bias) jn["bias"] = blob.put(*n.bias);
        if (n.batch_norm) {
            jn["gamma"] = blob.put(n.batch_norm->gamma);
            jn["beta"] = blob.put(n.batch_norm->beta);
            jn["mean"] = blob.put(n.batch_norm->mean);
            jn["variance"] = blob.put(n.batch_norm->variance);
        }
        if (n.subgraph) jn["subnetwork"] = write_graph(*n.subgraph, blob, false);
        if (top_level && g.normalization && g.normalization->contains(n.id)) {
            const auto& r = g.normalization->at(n.id);
            jn["normalization"] = {{"epsilon", write_floats(r.epsilon)}, {"lambda", write_floats(r.lambda)}};
        }
        nodes.push_back(std::move(jn));
    }
    j["nodes"] = std::move(nodes);
    return j;
}

std::vector<float> read_blob(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) fail(ErrorCode::Io, "cannot open weight blob '" + path.string() + "'");
    const auto bytes = static_cast<std::size_t>(in.tellg());
    if (bytes % 4 != 0) {
        fail(ErrorCode::Format, "blob length mismatch: '" + path.string() + "' has " + std::to_string(bytes) +
                                    " bytes, not a whole number of float32 values");
    }
    in.seekg(0);
    std::vector<float> values(bytes / 4);
    if (!detail::read_floats_le(in, values)) {
        fail(ErrorCode::Io, "failed reading weight blob '" + path.string() + "'");
    }
    return values;
}

} // namespace

std::filesystem::path blob_path_for(const std::filesystem::path& manifest_path, const std::string& name) {
    return manifest_path.parent_path() / (name + ".bin");
}

ModelGraph load_model(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) fail(ErrorCode::Io, "cannot open manifest '" + manifest_path.string() + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        fail(ErrorCode::Format, "malformed manifest '" + manifest_path.string() + "': " + e.what());
    }
    try {
        if (!j.is_object() || !j.contains("name") || !j.at("name").is_string()) {
            fail(ErrorCode::Format, "malformed manifest '" + manifest_path.string() + "': missing name");
        }
        const std::string name = j.at("name").get<std::string>();
        if (name.empty() || name.find_first_of("/\\") != std::string::npos) {
            fail(ErrorCode::Format, "malformed manifest: model name " + q(name) + " is not a file stem");
        }
        if (!j.contains("input_shape")) {
            fail(ErrorCode::Format, "malformed manifest '" + manifest_path.string() + "': missing input_shape");
        }
        BlobReader blob(read_blob(blob_path_for(manifest_path, name)));
        std::optional<ChannelStats> stats;
        ModelGraph g = read_graph(j, blob, &stats);
        blob.check_fully_used();
        if (stats) {
            if (j.contains("calibration")) {
                const auto& c = j.at("calibration");
                stats->p_lo = c.value("p_lo", stats->p_lo);
                stats->p_hi = c.value("p_hi", stats->p_hi);
                stats->repaired_channels = c.value("repaired_channels", std::size_t{0});
            }
            g.normalization = std::move(stats);
        }
        validate(g, true);
        return infer_shapes(g, g.input_shape);
    } catch (const json::exception& e) {
        fail(ErrorCode::Format, "malformed manifest '" + manifest_path.string() + "': " + e.what());
    }
}

void save_model(const ModelGraph& model, const std::filesystem::path& manifest_path) {
    BlobWriter blob;
    const json j = write_graph(model, blob, true);
    const auto blob_path = blob_path_for(manifest_path, model.name);
    {
        std::ofstream out(manifest_path, std::ios::trunc);
        if (!out) fail(ErrorCode::Io, "cannot write manifest '" + manifest_path.string() + "'");
        out << j.dump(2) << '\n';
        if (!out) fail(ErrorCode::Io, "failed writing manifest '" + manifest_path.string() + "'");
    }
    std::ofstream out(blob_path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::Io, "cannot write weight blob '" + blob_path.string() + "'");
    detail::write_floats_le(out, blob.values());
    if (!out) fail(ErrorCode::Io, "failed writing weight blob '" + blob_path.string() + "'");
}

void save_stats(const ChannelStats& stats, const std::filesystem::path& path) {
    json j;
    j["p_lo"] = stats.p_lo;
    j["p_hi"] = stats.p_hi;
    j["repaired_channels"] = stats.repaired_channels;
    json nodes = json::object();
    for (const auto& [id, r] : stats.nodes) {
        nodes[id] = {{"epsilon", write_floats(r.epsilon)}, {"lambda", write_floats(r.lambda)}};
    }
    j["nodes"] = std::move(nodes);
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorCode::Io, "cannot write stats file '" + path.string() + "'");
    out << j.dump(2) << '\n';
    if (!out) fail(ErrorCode::Io, "failed writing stats file '" + path.string() + "'");
}

} // namespace snnconv
