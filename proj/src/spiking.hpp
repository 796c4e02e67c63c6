#pragma once

#include "model.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace snnconv {

/// Times are in milliseconds; one step lasts `dt`.
struct SimConfig {
    double dt = 1.0;
    double duration = 1000.0;
    double v_th = 1.0;
    /// Spikes emitted during the first `transient` ms are not counted in rates.
    double transient = 0.0;

    void validate() const;
    std::size_t steps() const;
    std::size_t transient_steps() const;
};

/// Integrate-and-fire state of one layer. Potentials are kept in double so
/// that long runs of saturated neurons do not lose the charge balance.
struct IFLayerState {
    std::vector<double> v;
    std::vector<std::uint8_t> prev_spike;
    /// Spikes since the end of the transient.
    std::vector<std::uint32_t> spike_count;
    /// Spikes over the whole run.
    std::vector<std::uint32_t> total_spikes;
    /// Accumulated input current z over the whole run.
    std::vector<double> input_sum;
};

/// Step-major packed spike bits of one layer (bit k of step t is neuron k,
/// least significant bit first within each byte).
class SpikeRaster {
public:
    SpikeRaster() = default;
    SpikeRaster(std::string node, Shape shape);

    void append_step(std::span<const float> spikes);
    bool spike(std::size_t step, std::size_t neuron) const;

    const std::string& node() const noexcept { return node_; }
    const Shape& shape() const noexcept { return shape_; }
    std::size_t steps() const noexcept { return steps_; }
    std::size_t neurons() const noexcept { return neurons_; }
    std::size_t bytes_per_step() const noexcept { return (neurons_ + 7) / 8; }
    const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }

    // File layout: "SNNRAST1", u32 id length, id bytes, u32 rank, u32
    // extents[rank], u64 step count, packed bits. Little-endian.
    void write(const std::filesystem::path& path) const;
    static SpikeRaster read(const std::filesystem::path& path);

    bool operator==(const SpikeRaster&) const = default;

private:
    std::string node_;
    Shape shape_;
    std::size_t neurons_ = 0;
    std::size_t steps_ = 0;
    std::vector<std::uint8_t> bits_;
};

struct RateSnapshot {
    std::size_t step = 0;
    std::map<std::string, Tensor> rates;
};

/// Firing rates in spikes per step, each in [0, 1].
struct RateRecord {
    std::size_t steps = 0;
    std::size_t counted_steps = 0;
    std::map<std::string, Tensor> rates;
    std::map<std::string, SpikeRaster> rasters;
    std::vector<RateSnapshot> series;
    /// Worst per-neuron violation of the charge balance after the run.
    double conservation_error = 0.0;
};

struct RunOptions {
    /// Node ids to record; empty means the model outputs.
    std::vector<std::string> record;
    bool keep_raster = false;
    /// Snapshot rates every this many steps (0: none). The last step is
    /// always included when sampling is on.
    std::size_t sample_every = 0;
    /// Additional steps at which to snapshot rates.
    std::vector<std::size_t> snapshot_steps;
};

/// Clock-driven IF network mirroring a normalized model one neuron per
/// analog unit. Conv2D, Dense, NormAdd and AvgPool2D nodes hold neurons;
/// UpsampleNearest and Flatten only rewire their input spikes. The input
/// node feeds its values as a constant current every step.
class SpikingNetwork {
public:
    SpikingNetwork(const ModelGraph& normalized, const SimConfig& config);

    // Units point into model_.nodes, whose storage survives a move but not a copy.
    SpikingNetwork(const SpikingNetwork&) = delete;
    SpikingNetwork& operator=(const SpikingNetwork&) = delete;
    SpikingNetwork(SpikingNetwork&&) = default;
    SpikingNetwork& operator=(SpikingNetwork&&) = default;

    const ModelGraph& model() const noexcept { return model_; }
    const SimConfig& config() const noexcept { return config_; }

    /// Changes dt, v_th, duration or transient; rescales biases to the new dt.
    void set_config(const SimConfig& config);

    /// Zero potentials, spike flags and counters.
    void reset();

    /// One timestep: every node in dependency order, so spikes cross the
    /// whole depth within the step.
    void step(const Tensor& input_current);

    std::size_t step_count() const noexcept { return step_; }

    /// Current output of a node: analog input for the Input node, 0/1 spikes
    /// otherwise.
    std::span<const float> signal(std::string_view id) const;

    /// Neuron state, or nullptr for nodes without neurons.
    const IFLayerState* state(std::string_view id) const;

    /// Spikes counted since the transient, for any non-input node.
    std::span<const std::uint32_t> spike_counts(std::string_view id) const;

    /// Bias injected per step (normalized bias times dt).
    std::span<const float> scaled_bias(std::string_view id) const;

    std::size_t neuron_layer_count() const;

    /// Resets, then drives `image` for config().steps() steps.
    RateRecord run(const Tensor& image, const RunOptions& options = {});

    /// max over neurons of |v_th * applied resets + V - sum z|, where applied
    /// resets are the spikes whose subtraction has already taken effect.
    double max_conservation_error() const;

private:
    struct Unit {
        const LayerNode* node = nullptr;
        std::vector<std::size_t> inputs;
        Shape in_shape;
        bool has_neurons = false;
        std::vector<float> bias;  // scaled by dt
        std::vector<float> signal;
        std::vector<float> drive;
        std::vector<std::uint32_t> counts;
        IFLayerState state;
    };

    const Unit& unit(std::string_view id) const;
    void prepare_biases();
    Tensor rates_of(const Unit& u, std::size_t counted) const;

    ModelGraph model_;
    SimConfig config_;
    std::vector<Unit> units_;
    std::map<std::string, std::size_t, std::less<>> index_;
    std::size_t input_unit_ = 0;
    std::size_t step_ = 0;
};

/// CSV rows `step,node,mean_rate,min_rate,max_rate` for each snapshot (or
/// the final rates when no series was taken). An `image` column is prepended
/// when `image_index` is non-negative.
void write_rate_series_csv(const RateRecord& record, std::ostream& out, bool header,
                           long image_index = -1);

} // namespace snnconv
