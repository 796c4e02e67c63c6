#include "calibrator.hpp"

#include "analog.hpp"
#include "error.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace snnconv {

namespace {

// Uniform reservoir over a stream of values.
class ValuePool {
public:
    explicit ValuePool(std::size_t cap) : cap_(cap) {}

    void add(float v, std::mt19937_64& rng) {
        ++seen_;
        if (values_.size() < cap_) {
            values_.push_back(v);
            return;
        }
        const std::uint64_t j = rng() % seen_;
        if (j < cap_) values_[j] = v;
    }

    std::vector<float>& values() { return values_; }

private:
    std::size_t cap_;
    std::uint64_t seen_ = 0;
    std::vector<float> values_;
};

ChannelRange unit_range(std::size_t channels) {
    return {std::vector<float>(channels, 0.0f), std::vector<float>(channels, 1.0f)};
}

ChannelRange inherited_range(const LayerNode& node, const ChannelRange& in) {
    if (node.kind != LayerKind::Flatten) return in;
    ChannelRange out;
    const std::size_t n = node.out_channels();
    const std::size_t C = in.channels();
    out.epsilon.resize(n);
    out.lambda.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.epsilon[i] = in.epsilon[i % C];
        out.lambda[i] = in.lambda[i % C];
    }
    return out;
}

bool needs_measurement(LayerKind kind) {
    return is_weighted(kind) || is_multi_input(kind);
}

void check_range(const LayerNode& node, const ChannelRange& r) {
    if (r.epsilon.size() != node.out_channels() || r.lambda.size() != node.out_channels()) {
        fail(ErrorCode::Shape, "stats for node '" + node.id + "' cover " + std::to_string(r.lambda.size()) +
                                   " channels, node has " + std::to_string(node.out_channels()));
    }
    for (std::size_t c = 0; c < r.channels(); ++c) {
        if (!(r.lambda[c] > r.epsilon[c])) {
            fail(ErrorCode::Internal, "degenerate range at node '" + node.id + "' channel " + std::to_string(c));
        }
    }
}

} // namespace

double percentile(std::span<const float> sorted, double p) {
    if (sorted.empty()) fail(ErrorCode::InvalidArgument, "percentile of an empty set");
    const double rank = p / 100.0 * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(rank));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    return static_cast<double>(sorted[lo]) + frac * (static_cast<double>(sorted[hi]) - sorted[lo]);
}

ChannelStats collect_stats(const ModelGraph& parsed, const Tensor& calib, const CalibrationOptions& options) {
    if (!(options.p_lo >= 0.0 && options.p_hi <= 100.0 && options.p_lo <= options.p_hi)) {
        fail(ErrorCode::InvalidArgument, "percentiles must satisfy 0 <= p_lo <= p_hi <= 100");
    }
    if (calib.rank() == 0 || calib.shape()[0] == 0) {
        fail(ErrorCode::InvalidArgument, "empty calibration batch");
    }
    for (const auto& n : parsed.nodes) {
        if (n.out_channels() == 0) fail(ErrorCode::Shape, "node '" + n.id + "' has zero channels");
    }

    std::map<std::string, std::vector<ValuePool>> pools;
    for (const auto& n : parsed.nodes) {
        if (needs_measurement(n.kind)) {
            pools.emplace(n.id, std::vector<ValuePool>(n.out_channels(), ValuePool(options.max_values_per_channel)));
        }
    }
    std::mt19937_64 rng(options.reservoir_seed);
    const std::size_t N = calib.shape()[0];
    const std::size_t chunk = std::max<std::size_t>(1, options.chunk_size);
    for (std::size_t first = 0; first < N; first += chunk) {
        const ActivationRecord record = forward(parsed, calib.samples(first, std::min(chunk, N - first)));
        for (auto& [id, channel_pools] : pools) {
            const Tensor& t = record.at(id);
            const std::size_t C = channel_pools.size();
            for (std::size_t i = 0; i < t.size(); ++i) channel_pools[i % C].add(t[i], rng);
        }
    }

    ChannelStats stats;
    stats.p_lo = options.p_lo;
    stats.p_hi = options.p_hi;
    for (const std::string& id : topological_order(parsed)) {
        const LayerNode& node = parsed.node(id);
        if (node.kind == LayerKind::Input) {
            stats.nodes[id] = unit_range(node.out_channels());
            continue;
        }
        if (is_pass_through(node.kind)) {
            stats.nodes[id] = inherited_range(node, stats.at(node.inputs.at(0)));
            continue;
        }
        ChannelRange range;
        for (ValuePool& pool : pools.at(id)) {
            auto& values = pool.values();
            std::sort(values.begin(), values.end());
            float eps = static_cast<float>(percentile(values, options.p_lo));
            float lam = static_cast<float>(percentile(values, options.p_hi));
            if (node.activation == Activation::Relu) {
                // A positive shift does not commute with relu; keep relu layers unshifted.
                eps = 0.0f;
            }
            if (!(lam - eps >= kDegenerateSpan)) {
                eps = 0.0f;
                lam = 1.0f;
                ++stats.repaired_channels;
            }
            range.epsilon.push_back(eps);
            range.lambda.push_back(lam);
        }
        stats.nodes[id] = std::move(range);
    }
    return stats;
}

LayerNode synthesize_normadd(const LayerNode& add_node, const ChannelStats& stats) {
    if (!is_multi_input(add_node.kind) || add_node.inputs.size() < 2) {
        fail(ErrorCode::InvalidArgument, "node '" + add_node.id + "' is not a multi-input Add");
    }
    const ChannelRange& sum = stats.at(add_node.id);
    const std::size_t C = sum.channels();
    LayerNode out = add_node;
    out.kind = LayerKind::NormAdd;
    out.attrs.alpha.assign(add_node.inputs.size(), std::vector<float>(C));
    out.attrs.beta.assign(C, 0.0f);
    std::vector<double> eps_total(C, 0.0);
    for (std::size_t b = 0; b < add_node.inputs.size(); ++b) {
        const ChannelRange& branch = stats.at(add_node.inputs[b]);
        if (branch.channels() != C) {
            fail(ErrorCode::Shape, "branch '" + add_node.inputs[b] + "' of '" + add_node.id + "' has " +
                                       std::to_string(branch.channels()) + " channels, sum has " + std::to_string(C));
        }
        for (std::size_t c = 0; c < C; ++c) {
            out.attrs.alpha[b][c] = static_cast<float>(
                (static_cast<double>(branch.lambda[c]) - branch.epsilon[c]) /
                (static_cast<double>(sum.lambda[c]) - sum.epsilon[c]));
            eps_total[c] += branch.epsilon[c];
        }
    }
    for (std::size_t c = 0; c < C; ++c) {
        out.attrs.beta[c] = static_cast<float>((eps_total[c] - sum.epsilon[c]) /
                                               (static_cast<double>(sum.lambda[c]) - sum.epsilon[c]));
    }
    return out;
}

ModelGraph normalize_model(const ModelGraph& parsed, const ChannelStats& stats) {
    ModelGraph out = parsed;
    out.name = parsed.name + "-normalized";
    out.normalization = stats;
    for (LayerNode& node : out.nodes) {
        const ChannelRange& own = stats.at(node.id);
        check_range(node, own);
        if (node.kind == LayerKind::NormAdd) {
            fail(ErrorCode::State, "model already contains NormAdd node '" + node.id + "'");
        }
        if (is_multi_input(node.kind)) {
            node = synthesize_normadd(node, stats);
            continue;
        }
        if (!is_weighted(node.kind)) continue;

        const ChannelRange& up = stats.at(node.inputs.at(0));
        Tensor& w = *node.weights;
        const std::size_t cout = w.shape().back();
        const std::size_t cin = w.shape()[w.rank() - 2];
        if (up.channels() != cin) {
            fail(ErrorCode::Shape, "stats for '" + node.inputs[0] + "' do not match the fan-in of '" + node.id + "'");
        }
        std::vector<double> shifted(cout, 0.0);
        if (node.bias) {
            for (std::size_t j = 0; j < cout; ++j) shifted[j] = (*node.bias)[j];
        }
        for (std::size_t idx = 0; idx < w.size(); ++idx) {
            const std::size_t j = idx % cout;
            const std::size_t i = (idx / cout) % cin;
            shifted[j] += static_cast<double>(w[idx]) * up.epsilon[i];
            w[idx] = static_cast<float>(static_cast<double>(w[idx]) * (static_cast<double>(up.lambda[i]) - up.epsilon[i]) /
                                        (static_cast<double>(own.lambda[j]) - own.epsilon[j]));
        }
        Tensor bias({cout});
        for (std::size_t j = 0; j < cout; ++j) {
            bias[j] = static_cast<float>((shifted[j] - own.epsilon[j]) /
                                         (static_cast<double>(own.lambda[j]) - own.epsilon[j]));
        }
        node.bias = std::move(bias);
    }
    return out;
}

Tensor normalize_activation(const Tensor& values, const ChannelRange& range) {
    Tensor out = values;
    const std::size_t C = range.channels();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::size_t c = i % C;
        out[i] = static_cast<float>((static_cast<double>(values[i]) - range.epsilon[c]) /
                                    (static_cast<double>(range.lambda[c]) - range.epsilon[c]));
    }
    return out;
}

Tensor denormalize_activation(const Tensor& values, const ChannelRange& range) {
    Tensor out = values;
    const std::size_t C = range.channels();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::size_t c = i % C;
        out[i] = static_cast<float>(static_cast<double>(values[i]) *
                                        (static_cast<double>(range.lambda[c]) - range.epsilon[c]) +
                                    range.epsilon[c]);
    }
    return out;
}

double NormalizationReport::min_in_range_fraction() const {
    double m = 1.0;
    for (const auto& l : layers) m = std::min(m, l.in_range_fraction);
    return m;
}

double NormalizationReport::max_relative_deviation() const {
    double m = 0.0;
    for (const auto& l : layers) m = std::max(m, l.max_relative_deviation);
    return m;
}

NormalizationReport verify_normalization(const ModelGraph& parsed, const ModelGraph& normalized,
                                         const Tensor& probe) {
    if (!normalized.normalization) {
        fail(ErrorCode::State, "model '" + normalized.name + "' carries no normalization stats");
    }
    const ActivationRecord ref = forward(parsed, probe);
    const ActivationRecord norm = forward(normalized, probe);
    NormalizationReport report;
    report.repaired_channels = normalized.normalization->repaired_channels;
    for (const std::string& id : topological_order(normalized)) {
        const LayerNode& node = normalized.node(id);
        if (node.kind == LayerKind::Input) continue;
        const Tensor& a = norm.at(id);
        LayerCheck check;
        check.id = id;
        check.count = a.size();
        std::size_t inside = 0;
        for (float v : a.values()) inside += (v >= -kRangeSlack && v <= 1.0f + kRangeSlack) ? 1 : 0;
        check.in_range_fraction = a.size() ? static_cast<double>(inside) / static_cast<double>(a.size()) : 1.0;
        const Tensor restored = denormalize_activation(a, normalized.normalization->at(id));
        check.max_abs_deviation = max_abs_difference(restored, ref.at(id));
        check.max_relative_deviation = relative_deviation(restored, ref.at(id));
        report.layers.push_back(std::move(check));
    }
    return report;
}

} // namespace snnconv
