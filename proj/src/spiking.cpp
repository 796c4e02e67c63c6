#include "spiking.hpp"

#include "binary_io.hpp"
#include "error.hpp"
#include "kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <ostream>

namespace snnconv {

namespace {
constexpr char kRasterMagic[8] = {'S', 'N', 'N', 'R', 'A', 'S', 'T', '1'};
}

void SimConfig::validate() const {
    if (!(dt > 0.0)) fail(ErrorCode::InvalidArgument, "dt must be positive");
    if (!(duration >= dt)) fail(ErrorCode::InvalidArgument, "duration must be at least one step");
    if (!(transient >= 0.0 && transient < duration)) {
        fail(ErrorCode::InvalidArgument, "transient must satisfy 0 <= transient < duration");
    }
    if (!(v_th > 0.0)) fail(ErrorCode::InvalidArgument, "v_th must be positive");
    if (transient_steps() >= steps()) {
        fail(ErrorCode::InvalidArgument, "transient leaves no counted steps");
    }
}

std::size_t SimConfig::steps() const {
    return static_cast<std::size_t>(std::llround(duration / dt));
}

std::size_t SimConfig::transient_steps() const {
    return static_cast<std::size_t>(std::llround(transient / dt));
}

SpikeRaster::SpikeRaster(std::string node, Shape shape)
    : node_(std::move(node)), shape_(std::move(shape)), neurons_(element_count(shape_)) {}

void SpikeRaster::append_step(std::span<const float> spikes) {
    const std::size_t base = bits_.size();
    bits_.resize(base + bytes_per_step(), 0);
    for (std::size_t k = 0; k < neurons_; ++k) {
        if (spikes[k] != 0.0f) bits_[base + k / 8] |= static_cast<std::uint8_t>(1u << (k % 8));
    }
    ++steps_;
}

bool SpikeRaster::spike(std::size_t step, std::size_t neuron) const {
    return (bits_.at(step * bytes_per_step() + neuron / 8) >> (neuron % 8)) & 1u;
}

void SpikeRaster::write(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::Io, "cannot write raster '" + path.string() + "'");
    out.write(kRasterMagic, sizeof kRasterMagic);
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(node_.size()));
    out.write(node_.data(), static_cast<std::streamsize>(node_.size()));
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(shape_.size()));
    for (std::size_t e : shape_) detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    detail::write_le<std::uint64_t>(out, steps_);
    out.write(reinterpret_cast<const char*>(bits_.data()), static_cast<std::streamsize>(bits_.size()));
    if (!out) fail(ErrorCode::Io, "failed writing raster '" + path.string() + "'");
}

SpikeRaster SpikeRaster::read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::Io, "cannot open raster '" + path.string() + "'");
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kRasterMagic, 8) != 0) {
        fail(ErrorCode::Format, "'" + path.string() + "' is not a spike raster");
    }
    auto bad = [&] { fail(ErrorCode::Format, "truncated raster '" + path.string() + "'"); };
    std::uint32_t len = 0;
    if (!detail::read_le(in, len)) bad();
    std::string node(len, '\0');
    if (!in.read(node.data(), len)) bad();
    std::uint32_t rank = 0;
    if (!detail::read_le(in, rank)) bad();
    Shape shape(rank);
    for (auto& e : shape) {
        std::uint32_t v = 0;
        if (!detail::read_le(in, v)) bad();
        e = v;
    }
    std::uint64_t steps = 0;
    if (!detail::read_le(in, steps)) bad();
    SpikeRaster r(std::move(node), std::move(shape));
    r.steps_ = steps;
    r.bits_.resize(steps * r.bytes_per_step());
    if (!in.read(reinterpret_cast<char*>(r.bits_.data()), static_cast<std::streamsize>(r.bits_.size()))) bad();
    return r;
}

SpikingNetwork::SpikingNetwork(const ModelGraph& normalized, const SimConfig& config)
    : model_(normalized), config_(config) {
    config_.validate();
    if (!model_.normalization) {
        fail(ErrorCode::State, "model '" + model_.name +
                                   "' is not normalized; unnormalized activations would saturate IF neurons");
    }
    validate(model_, false);
    for (const auto& n : model_.nodes) {
        if (n.kind == LayerKind::Add) {
            fail(ErrorCode::Unsupported, "Add node '" + n.id + "' must be replaced by NormAdd before conversion");
        }
        if (n.output_shape.empty()) {
            fail(ErrorCode::State, "node '" + n.id + "' has no inferred shape");
        }
    }
    const auto order = topological_order(model_);
    for (const auto& id : order) index_.emplace(id, index_.size());
    units_.resize(order.size());
    for (std::size_t u = 0; u < order.size(); ++u) {
        Unit& unit = units_[u];
        unit.node = &model_.node(order[u]);
        for (const auto& ref : unit.node->inputs) unit.inputs.push_back(index_.at(ref));
        if (!unit.inputs.empty()) unit.in_shape = units_[unit.inputs[0]].node->output_shape;
        const std::size_t n = element_count(unit.node->output_shape);
        unit.signal.assign(n, 0.0f);
        const LayerKind kind = unit.node->kind;
        if (kind == LayerKind::Input) {
            input_unit_ = u;
            continue;
        }
        unit.counts.assign(n, 0);
        unit.has_neurons = is_weighted(kind) || kind == LayerKind::NormAdd || kind == LayerKind::AvgPool2D;
        if (unit.has_neurons) {
            unit.drive.assign(n, 0.0f);
            unit.state.v.assign(n, 0.0);
            unit.state.prev_spike.assign(n, 0);
            unit.state.spike_count.assign(n, 0);
            unit.state.total_spikes.assign(n, 0);
            unit.state.input_sum.assign(n, 0.0);
        }
    }
    prepare_biases();
}

void SpikingNetwork::prepare_biases() {
    const float dt = static_cast<float>(config_.dt);
    for (Unit& u : units_) {
        u.bias.clear();
        if (u.node->bias) {
            for (float b : u.node->bias->values()) u.bias.push_back(b * dt);
        } else if (u.node->kind == LayerKind::NormAdd) {
            for (float b : u.node->attrs.beta) u.bias.push_back(b * dt);
        }
    }
}

void SpikingNetwork::set_config(const SimConfig& config) {
    config.validate();
    config_ = config;
    prepare_biases();
}

void SpikingNetwork::reset() {
    step_ = 0;
    for (Unit& u : units_) {
        std::fill(u.signal.begin(), u.signal.end(), 0.0f);
        std::fill(u.counts.begin(), u.counts.end(), 0u);
        auto& s = u.state;
        std::fill(s.v.begin(), s.v.end(), 0.0);
        std::fill(s.prev_spike.begin(), s.prev_spike.end(), std::uint8_t{0});
        std::fill(s.spike_count.begin(), s.spike_count.end(), 0u);
        std::fill(s.total_spikes.begin(), s.total_spikes.end(), 0u);
        std::fill(s.input_sum.begin(), s.input_sum.end(), 0.0);
    }
}

void SpikingNetwork::step(const Tensor& input_current) {
    Unit& in = units_[input_unit_];
    if (input_current.size() != in.signal.size() ||
        (input_current.shape() != model_.input_shape &&
         !(input_current.rank() == model_.input_shape.size() + 1 && input_current.shape()[0] == 1))) {
        fail(ErrorCode::Shape, "input current " + shape_string(input_current.shape()) + " does not match model input " +
                                   shape_string(model_.input_shape));
    }
    std::copy(input_current.values().begin(), input_current.values().end(), in.signal.begin());

    ++step_;
    const bool counting = step_ > config_.transient_steps();
    const double v_th = config_.v_th;

    for (Unit& u : units_) {
        const LayerNode& node = *u.node;
        switch (node.kind) {
        case LayerKind::Input:
            continue;
        case LayerKind::UpsampleNearest:
            kernels::upsample_nearest(units_[u.inputs[0]].signal, u.in_shape, node.attrs.factor, u.signal);
            break;
        case LayerKind::Flatten:
            std::copy(units_[u.inputs[0]].signal.begin(), units_[u.inputs[0]].signal.end(), u.signal.begin());
            break;
        case LayerKind::Conv2D:
            std::fill(u.drive.begin(), u.drive.end(), 0.0f);
            kernels::conv2d_accumulate(units_[u.inputs[0]].signal, u.in_shape, *node.weights, node.attrs, u.drive);
            break;
        case LayerKind::Dense:
            std::fill(u.drive.begin(), u.drive.end(), 0.0f);
            kernels::dense_accumulate(units_[u.inputs[0]].signal, *node.weights, u.drive);
            break;
        case LayerKind::AvgPool2D:
            kernels::avgpool(units_[u.inputs[0]].signal, u.in_shape, node.attrs.pool_size, u.drive);
            break;
        case LayerKind::NormAdd: {
            std::fill(u.drive.begin(), u.drive.end(), 0.0f);
            const std::size_t C = node.out_channels();
            for (std::size_t b = 0; b < u.inputs.size(); ++b) {
                const auto& sig = units_[u.inputs[b]].signal;
                const auto& alpha = node.attrs.alpha[b];
                for (std::size_t i = 0; i < sig.size(); ++i) {
                    if (sig[i] != 0.0f) u.drive[i] += alpha[i % C] * sig[i];
                }
            }
            break;
        }
        default:
            fail(ErrorCode::Internal, "unexpected node kind in spiking network");
        }

        if (u.has_neurons) {
            if (!u.bias.empty()) kernels::add_bias(u.drive, u.bias);
            auto& s = u.state;
            for (std::size_t i = 0; i < u.drive.size(); ++i) {
                const double z = v_th * static_cast<double>(u.drive[i]);
                s.v[i] += z - v_th * s.prev_spike[i];
                s.input_sum[i] += z;
                const std::uint8_t fired = s.v[i] >= v_th ? 1 : 0;
                s.prev_spike[i] = fired;
                s.total_spikes[i] += fired;
                if (counting) s.spike_count[i] += fired;
                u.signal[i] = fired;
            }
        }
        if (counting) {
            for (std::size_t i = 0; i < u.signal.size(); ++i) u.counts[i] += u.signal[i] != 0.0f;
        }
    }
}

const SpikingNetwork::Unit& SpikingNetwork::unit(std::string_view id) const {
    auto it = index_.find(id);
    if (it == index_.end()) fail(ErrorCode::InvalidArgument, "unknown node '" + std::string(id) + "'");
    return units_[it->second];
}

std::span<const float> SpikingNetwork::signal(std::string_view id) const {
    return unit(id).signal;
}

const IFLayerState* SpikingNetwork::state(std::string_view id) const {
    const Unit& u = unit(id);
    return u.has_neurons ? &u.state : nullptr;
}

std::span<const std::uint32_t> SpikingNetwork::spike_counts(std::string_view id) const {
    return unit(id).counts;
}

std::span<const float> SpikingNetwork::scaled_bias(std::string_view id) const {
    return unit(id).bias;
}

std::size_t SpikingNetwork::neuron_layer_count() const {
    return static_cast<std::size_t>(std::count_if(units_.begin(), units_.end(), [](const Unit& u) { return u.has_neurons; }));
}

double SpikingNetwork::max_conservation_error() const {
    double worst = 0.0;
    const double v_th = config_.v_th;
    for (const Unit& u : units_) {
        if (!u.has_neurons) continue;
        const auto& s = u.state;
        for (std::size_t i = 0; i < s.v.size(); ++i) {
            const double resets = static_cast<double>(s.total_spikes[i]) - s.prev_spike[i];
            const double err = std::abs(v_th * resets + s.v[i] - s.input_sum[i]);
            worst = std::max(worst, err);
        }
    }
    return worst;
}

Tensor SpikingNetwork::rates_of(const Unit& u, std::size_t counted) const {
    Tensor t(u.node->output_shape);
    const double inv = counted ? 1.0 / static_cast<double>(counted) : 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(u.counts[i] * inv);
    return t;
}

RateRecord SpikingNetwork::run(const Tensor& image, const RunOptions& options) {
    config_.validate();
    std::vector<std::string> record = options.record.empty() ? model_.outputs : options.record;
    std::vector<const Unit*> recorded;
    for (const auto& id : record) {
        const Unit& u = unit(id);
        if (u.node->kind == LayerKind::Input) {
            fail(ErrorCode::InvalidArgument, "input node '" + id + "' emits no spikes to record");
        }
        recorded.push_back(&u);
    }
    const std::size_t total = config_.steps();
    const std::size_t transient = config_.transient_steps();
    for (std::size_t s : options.snapshot_steps) {
        if (s <= transient || s > total) {
            fail(ErrorCode::InvalidArgument, "snapshot at step " + std::to_string(s) +
                                                 " has no counted steps in (" + std::to_string(transient) + ", " +
                                                 std::to_string(total) + "]");
        }
    }

    reset();
    RateRecord out;
    out.steps = total;
    if (options.keep_raster) {
        for (const Unit* u : recorded) out.rasters.emplace(u->node->id, SpikeRaster(u->node->id, u->node->output_shape));
    }
    auto snapshot_due = [&](std::size_t t) {
        if (t <= transient) return false;
        if (options.sample_every && (t % options.sample_every == 0 || t == total)) return true;
        return std::find(options.snapshot_steps.begin(), options.snapshot_steps.end(), t) != options.snapshot_steps.end();
    };
    for (std::size_t t = 1; t <= total; ++t) {
        step(image);
        if (options.keep_raster) {
            for (const Unit* u : recorded) out.rasters.at(u->node->id).append_step(u->signal);
        }
        if (snapshot_due(t)) {
            RateSnapshot snap;
            snap.step = t;
            for (const Unit* u : recorded) snap.rates.emplace(u->node->id, rates_of(*u, t - transient));
            out.series.push_back(std::move(snap));
        }
    }
    out.counted_steps = total - transient;
    for (const Unit* u : recorded) out.rates.emplace(u->node->id, rates_of(*u, out.counted_steps));
    out.conservation_error = max_conservation_error();
    return out;
}

void write_rate_series_csv(const RateRecord& record, std::ostream& out, bool header, long image_index) {
    if (header) {
        if (image_index >= 0) out << "image,";
        out << "step,node,mean_rate,min_rate,max_rate\n";
    }
    auto emit = [&](std::size_t step, const std::map<std::string, Tensor>& rates) {
        for (const auto& [id, t] : rates) {
            double sum = 0.0;
            float lo = 1.0f, hi = 0.0f;
            for (float r : t.values()) {
                sum += r;
                lo = std::min(lo, r);
                hi = std::max(hi, r);
            }
            if (image_index >= 0) out << image_index << ',';
            out << step << ',' << id << ',' << (t.size() ? sum / static_cast<double>(t.size()) : 0.0) << ','
                << lo << ',' << hi << '\n';
        }
    };
    if (record.series.empty()) {
        emit(record.steps, record.rates);
    } else {
        for (const auto& snap : record.series) emit(snap.step, snap.rates);
    }
}

} // namespace snnconv
