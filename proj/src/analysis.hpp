#pragma once

#include "analog.hpp"
#include "model.hpp"
#include "spiking.hpp"

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace snnconv {

/// a = r * (lambda - eps) + eps per channel, for every rate tensor.
std::map<std::string, Tensor> denormalize(const std::map<std::string, Tensor>& rates, const ChannelStats& stats);

/// Pearson coefficient, or nullopt when either side has zero variance.
std::optional<double> pearson(std::span<const float> x, std::span<const float> y);

struct LayerCorrelation {
    std::string id;
    std::optional<double> pearson;
    std::vector<float> analog;  // normalized, clipped to [0, 1]
    std::vector<float> rate;
};

struct CorrelationReport {
    double time_ms = 0.0;
    std::vector<LayerCorrelation> layers;

    const LayerCorrelation& layer(std::string_view id) const;
};

/// Per layer Pearson r between the normalized analog activations of one
/// sample (batch of one, or unbatched) and the spike rates.
CorrelationReport correlate(const ActivationRecord& normalized_analog, const std::map<std::string, Tensor>& rates,
                            const std::vector<std::string>& layers, double time_ms);

/// Rows `layer,neuron,analog,rate`.
void write_correlation_csv(const CorrelationReport& report, std::ostream& out, bool header);

struct Box {
    double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const;
    bool operator==(const Box&) const = default;
};

double iou(const Box& a, const Box& b);

struct Detection {
    Box box;
    std::size_t class_id = 0;
    double score = 0.0;
    /// Flattened (head, y, x, anchor) position; breaks score ties.
    std::size_t index = 0;
};

struct GroundTruth {
    Box box;
    std::size_t class_id = 0;
};

struct AnchorHead {
    std::string cls_output;
    std::string box_output;
    double stride = 1.0;
    /// (width, height) in pixels.
    std::vector<std::pair<double, double>> anchors;
};

struct AnchorConfig {
    std::size_t num_classes = 1;
    double score_threshold = 0.5;
    double nms_iou = 0.5;
    std::vector<AnchorHead> heads;

    void validate() const;
};

AnchorConfig load_anchor_config(const std::filesystem::path& path);
void save_anchor_config(const AnchorConfig& config, const std::filesystem::path& path);

/// `head_outputs` alternates class logits and box deltas per head, each
/// (H, W, anchors*K) and (H, W, anchors*4) with anchor-major channels, or
/// with a leading batch extent of one.
std::vector<Detection> decode_detections(std::span<const Tensor> head_outputs, const AnchorConfig& anchors,
                                         std::size_t image_width, std::size_t image_height);

/// Greedy per-class NMS; `candidates` need not be sorted.
std::vector<Detection> non_max_suppression(std::vector<Detection> candidates, double iou_threshold);

struct MapReport {
    /// Per class; nullopt for classes without ground truth.
    std::vector<std::optional<double>> ap;
    /// nullopt when no class has ground truth.
    std::optional<double> map;
};

MapReport evaluate_map(const std::vector<std::vector<Detection>>& predictions,
                       const std::vector<std::vector<GroundTruth>>& ground_truth, std::size_t num_classes,
                       double iou_threshold = 0.5);

struct Dataset {
    std::size_t num_classes = 1;
    std::vector<std::filesystem::path> files;
    std::vector<Tensor> images;
    std::vector<std::vector<GroundTruth>> annotations;
};

// Manifest: {"num_classes": K, "images": [{"file": "...", "boxes":
// [{"class": c, "box": [x_min, y_min, x_max, y_max]}]}]}. Files are relative
// to the manifest.
Dataset load_dataset(const std::filesystem::path& manifest);
/// Writes the manifest and every image (to the paths in `files`, relative to
/// the manifest directory).
void save_dataset(const Dataset& dataset, const std::filesystem::path& manifest);

struct MapPoint {
    std::string time;  // ms, or "ann" for the analog reference
    MapReport report;
};

struct MapConvergence {
    std::vector<MapPoint> series;
    MapReport ann;
    std::vector<std::vector<Detection>> ann_detections;
    std::vector<std::vector<Detection>> snn_detections;  // at the final step
    double conservation_error = 0.0;
};

/// Runs every image once through `snn`, decoding rates every
/// `sample_every_ms` (and at the end), and evaluates the analog `model` as
/// the reference.
MapConvergence map_convergence(const ModelGraph& model, SpikingNetwork& snn, const Dataset& dataset,
                               const AnchorConfig& anchors, double sample_every_ms, double iou_threshold = 0.5);

/// Rows `time_ms,class,ap,map`; class "all" rows carry the mAP, per-class
/// rows are added when `per_class` is set. Undefined values are empty.
void write_map_csv(const MapConvergence& result, std::ostream& out, bool per_class);

/// One-to-one agreement: equal counts and a pairing with equal classes and
/// IoU >= `min_iou` for every pair.
bool detections_match(const std::vector<Detection>& a, const std::vector<Detection>& b, double min_iou);

} // namespace snnconv
