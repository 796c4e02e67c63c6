#include "analysis.hpp"

#include "calibrator.hpp"
#include "error.hpp"
#include "parser.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <ostream>
#include <sstream>

namespace snnconv {

using nlohmann::json;

std::map<std::string, Tensor> denormalize(const std::map<std::string, Tensor>& rates, const ChannelStats& stats) {
    std::map<std::string, Tensor> out;
    for (const auto& [id, r] : rates) {
        if (!stats.contains(id)) fail(ErrorCode::State, "missing stats for node '" + id + "'");
        out.emplace(id, denormalize_activation(r, stats.at(id)));
    }
    return out;
}

std::optional<double> pearson(std::span<const float> x, std::span<const float> y) {
    if (x.size() != y.size()) {
        fail(ErrorCode::Shape, "pearson: " + std::to_string(x.size()) + " vs " + std::to_string(y.size()) + " values");
    }
    const std::size_t n = x.size();
    if (n < 2) return std::nullopt;
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

const LayerCorrelation& CorrelationReport::layer(std::string_view id) const {
    for (const auto& l : layers) {
        if (l.id == id) return l;
    }
    fail(ErrorCode::InvalidArgument, "no correlation for layer '" + std::string(id) + "'");
}

CorrelationReport correlate(const ActivationRecord& normalized_analog, const std::map<std::string, Tensor>& rates,
                            const std::vector<std::string>& layers, double time_ms) {
    CorrelationReport report;
    report.time_ms = time_ms;
    for (const auto& id : layers) {
        auto a = normalized_analog.find(id);
        auto r = rates.find(id);
        if (a == normalized_analog.end()) fail(ErrorCode::InvalidArgument, "no analog activations for '" + id + "'");
        if (r == rates.end()) fail(ErrorCode::InvalidArgument, "no rates recorded for '" + id + "'");
        if (a->second.size() != r->second.size()) {
            fail(ErrorCode::Shape, "shape mismatch at '" + id + "': analog " + shape_string(a->second.shape()) +
                                       " vs rates " + shape_string(r->second.shape()));
        }
        LayerCorrelation lc;
        lc.id = id;
        lc.analog.reserve(a->second.size());
        for (float v : a->second.values()) lc.analog.push_back(std::clamp(v, 0.0f, 1.0f));
        lc.rate.assign(r->second.values().begin(), r->second.values().end());
        lc.pearson = pearson(lc.analog, lc.rate);
        report.layers.push_back(std::move(lc));
    }
    return report;
}

void write_correlation_csv(const CorrelationReport& report, std::ostream& out, bool header) {
    if (header) out << "layer,neuron,analog,rate\n";
    for (const auto& l : report.layers) {
        for (std::size_t i = 0; i < l.analog.size(); ++i) {
            out << l.id << ',' << i << ',' << l.analog[i] << ',' << l.rate[i] << '\n';
        }
    }
}

double Box::area() const {
    return std::max(0.0, width()) * std::max(0.0, height());
}

double iou(const Box& a, const Box& b) {
    const double ix = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
    const double iy = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
    if (ix <= 0.0 || iy <= 0.0) return 0.0;
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

void AnchorConfig::validate() const {
    if (num_classes == 0) fail(ErrorCode::InvalidArgument, "anchor config needs at least one class");
    if (!(score_threshold > 0.0 && score_threshold < 1.0)) {
        fail(ErrorCode::InvalidArgument, "score threshold must lie in (0, 1)");
    }
    if (!(nms_iou > 0.0 && nms_iou < 1.0)) fail(ErrorCode::InvalidArgument, "NMS IoU threshold must lie in (0, 1)");
    if (heads.empty()) fail(ErrorCode::InvalidArgument, "anchor config has no heads");
    for (const auto& h : heads) {
        if (h.anchors.empty()) fail(ErrorCode::InvalidArgument, "head '" + h.cls_output + "' has no anchors");
        if (!(h.stride > 0.0)) fail(ErrorCode::InvalidArgument, "head '" + h.cls_output + "' has non-positive stride");
        for (const auto& [w, hh] : h.anchors) {
            if (!(w > 0.0 && hh > 0.0)) fail(ErrorCode::InvalidArgument, "anchor sizes must be positive");
        }
    }
}

AnchorConfig load_anchor_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::Io, "cannot open anchor config '" + path.string() + "'");
    AnchorConfig c;
    try {
        const json j = json::parse(in);
        c.num_classes = j.at("num_classes").get<std::size_t>();
        c.score_threshold = j.value("score_threshold", 0.5);
        c.nms_iou = j.value("nms_iou", 0.5);
        for (const auto& h : j.at("heads")) {
            AnchorHead head;
            head.cls_output = h.at("cls").get<std::string>();
            head.box_output = h.at("box").get<std::string>();
            head.stride = h.at("stride").get<double>();
            for (const auto& a : h.at("anchors")) head.anchors.emplace_back(a.at(0).get<double>(), a.at(1).get<double>());
            c.heads.push_back(std::move(head));
        }
    } catch (const json::exception& e) {
        fail(ErrorCode::Format, "malformed anchor config '" + path.string() + "': " + e.what());
    }
    c.validate();
    return c;
}

void save_anchor_config(const AnchorConfig& config, const std::filesystem::path& path) {
    json j;
    j["num_classes"] = config.num_classes;
    j["score_threshold"] = config.score_threshold;
    j["nms_iou"] = config.nms_iou;
    j["heads"] = json::array();
    for (const auto& h : config.heads) {
        json anchors = json::array();
        for (const auto& [w, hh] : h.anchors) anchors.push_back({w, hh});
        j["heads"].push_back({{"cls", h.cls_output}, {"box", h.box_output}, {"stride", h.stride}, {"anchors", anchors}});
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorCode::Io, "cannot write anchor config '" + path.string() + "'");
    out << j.dump(2) << '\n';
}

namespace {

bool ranks_before(const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.index != b.index) return a.index < b.index;
    return a.class_id < b.class_id;
}

Shape spatial_shape(const Tensor& t) {
    Shape s = t.shape();
    if (s.size() == 4 && s[0] == 1) s.erase(s.begin());
    if (s.size() != 3) fail(ErrorCode::Shape, "head output must be (H, W, C), got " + shape_string(t.shape()));
    return s;
}

} // namespace

std::vector<Detection> non_max_suppression(std::vector<Detection> candidates, double iou_threshold) {
    std::sort(candidates.begin(), candidates.end(), ranks_before);
    std::vector<Detection> kept;
    for (const auto& c : candidates) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (k.class_id == c.class_id && iou(k.box, c.box) > iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(c);
    }
    return kept;
}

std::vector<Detection> decode_detections(std::span<const Tensor> head_outputs, const AnchorConfig& anchors,
                                         std::size_t image_width, std::size_t image_height) {
    anchors.validate();
    if (head_outputs.size() != 2 * anchors.heads.size()) {
        fail(ErrorCode::InvalidArgument, "head/anchor count mismatch: " + std::to_string(head_outputs.size()) +
                                             " tensors for " + std::to_string(anchors.heads.size()) + " heads");
    }
    const std::size_t K = anchors.num_classes;
    const double W = static_cast<double>(image_width), H = static_cast<double>(image_height);
    std::vector<Detection> candidates;
    std::size_t base = 0;
    for (std::size_t h = 0; h < anchors.heads.size(); ++h) {
        const AnchorHead& head = anchors.heads[h];
        const Tensor& cls = head_outputs[2 * h];
        const Tensor& box = head_outputs[2 * h + 1];
        const Shape cs = spatial_shape(cls), bs = spatial_shape(box);
        const std::size_t A = head.anchors.size();
        if (cs[2] != A * K || bs[2] != A * 4 || cs[0] != bs[0] || cs[1] != bs[1]) {
            fail(ErrorCode::Shape, "head '" + head.cls_output + "' outputs " + shape_string(cs) + " and " +
                                       shape_string(bs) + " do not fit " + std::to_string(A) + " anchors and " +
                                       std::to_string(K) + " classes");
        }
        for (std::size_t y = 0; y < cs[0]; ++y) {
            for (std::size_t x = 0; x < cs[1]; ++x) {
                const std::size_t cell = y * cs[1] + x;
                for (std::size_t a = 0; a < A; ++a) {
                    const std::size_t index = base + cell * A + a;
                    const auto [wa, ha] = head.anchors[a];
                    const double ax = (static_cast<double>(x) + 0.5) * head.stride;
                    const double ay = (static_cast<double>(y) + 0.5) * head.stride;
                    const float* d = box.data() + cell * A * 4 + a * 4;
                    const double cx = ax + d[0] * wa;
                    const double cy = ay + d[1] * ha;
                    const double w = wa * std::exp(static_cast<double>(d[2]));
                    const double hh = ha * std::exp(static_cast<double>(d[3]));
                    Box b{std::clamp(cx - w / 2, 0.0, W), std::clamp(cy - hh / 2, 0.0, H),
                          std::clamp(cx + w / 2, 0.0, W), std::clamp(cy + hh / 2, 0.0, H)};
                    if (!(b.x_max > b.x_min && b.y_max > b.y_min)) continue;
                    for (std::size_t k = 0; k < K; ++k) {
                        const double logit = cls[cell * A * K + a * K + k];
                        const double score = 1.0 / (1.0 + std::exp(-logit));
                        if (score >= anchors.score_threshold) candidates.push_back({b, k, score, index});
                    }
                }
            }
        }
        base += cs[0] * cs[1] * A;
    }
    return non_max_suppression(std::move(candidates), anchors.nms_iou);
}

MapReport evaluate_map(const std::vector<std::vector<Detection>>& predictions,
                       const std::vector<std::vector<GroundTruth>>& ground_truth, std::size_t num_classes,
                       double iou_threshold) {
    if (predictions.size() != ground_truth.size()) {
        fail(ErrorCode::InvalidArgument, "predictions for " + std::to_string(predictions.size()) +
                                             " images but ground truth for " + std::to_string(ground_truth.size()));
    }
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        for (const auto& d : predictions[i]) {
            if (d.class_id >= num_classes) fail(ErrorCode::InvalidArgument, "detection class out of range");
        }
        for (const auto& g : ground_truth[i]) {
            if (g.class_id >= num_classes) fail(ErrorCode::InvalidArgument, "ground-truth class out of range");
        }
    }

    MapReport report;
    report.ap.assign(num_classes, std::nullopt);
    double sum = 0.0;
    std::size_t defined = 0;
    for (std::size_t k = 0; k < num_classes; ++k) {
        std::size_t n_gt = 0;
        for (const auto& g : ground_truth) {
            n_gt += static_cast<std::size_t>(std::count_if(g.begin(), g.end(), [&](const GroundTruth& b) { return b.class_id == k; }));
        }
        if (n_gt == 0) continue;

        struct Ranked {
            double score;
            std::size_t image;
            std::size_t order;
        };
        std::vector<Ranked> ranked;
        for (std::size_t i = 0; i < predictions.size(); ++i) {
            for (std::size_t j = 0; j < predictions[i].size(); ++j) {
                if (predictions[i][j].class_id == k) ranked.push_back({predictions[i][j].score, i, j});
            }
        }
        std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.image != b.image) return a.image < b.image;
            return a.order < b.order;
        });

        std::vector<std::vector<bool>> used(ground_truth.size());
        for (std::size_t i = 0; i < ground_truth.size(); ++i) used[i].assign(ground_truth[i].size(), false);
        std::vector<double> precision, recall;
        std::size_t tp = 0;
        for (std::size_t n = 0; n < ranked.size(); ++n) {
            const auto& r = ranked[n];
            const Box& box = predictions[r.image][r.order].box;
            double best = -1.0;
            std::size_t best_g = 0;
            const auto& gts = ground_truth[r.image];
            for (std::size_t g = 0; g < gts.size(); ++g) {
                if (gts[g].class_id != k || used[r.image][g]) continue;
                const double v = iou(box, gts[g].box);
                if (v > best) {
                    best = v;
                    best_g = g;
                }
            }
            if (best >= iou_threshold) {
                used[r.image][best_g] = true;
                ++tp;
            }
            precision.push_back(static_cast<double>(tp) / static_cast<double>(n + 1));
            recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
        }
        for (std::size_t n = precision.size(); n-- > 1;) precision[n - 1] = std::max(precision[n - 1], precision[n]);
        double ap = 0.0, prev_recall = 0.0;
        for (std::size_t n = 0; n < precision.size(); ++n) {
            ap += (recall[n] - prev_recall) * precision[n];
            prev_recall = recall[n];
        }
        report.ap[k] = ap;
        sum += ap;
        ++defined;
    }
    if (defined) report.map = sum / static_cast<double>(defined);
    return report;
}

Dataset load_dataset(const std::filesystem::path& manifest) {
    std::ifstream in(manifest);
    if (!in) fail(ErrorCode::Io, "cannot open dataset manifest '" + manifest.string() + "'");
    Dataset d;
    const auto dir = manifest.parent_path();
    try {
        const json j = json::parse(in);
        d.num_classes = j.at("num_classes").get<std::size_t>();
        for (const auto& img : j.at("images")) {
            std::filesystem::path file = img.at("file").get<std::string>();
            std::vector<GroundTruth> boxes;
            for (const auto& b : img.value("boxes", json::array())) {
                const auto& c = b.at("box");
                GroundTruth g{{c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>(), c.at(3).get<double>()},
                              b.at("class").get<std::size_t>()};
                if (g.class_id >= d.num_classes) {
                    fail(ErrorCode::Format, "box class " + std::to_string(g.class_id) + " out of range in '" +
                                                file.string() + "'");
                }
                if (!(g.box.x_max > g.box.x_min && g.box.y_max > g.box.y_min)) {
                    fail(ErrorCode::Format, "degenerate box in '" + file.string() + "'");
                }
                boxes.push_back(g);
            }
            d.images.push_back(load_tensor(file.is_absolute() ? file : dir / file));
            d.files.push_back(std::move(file));
            d.annotations.push_back(std::move(boxes));
        }
    } catch (const json::exception& e) {
        fail(ErrorCode::Format, "malformed dataset manifest '" + manifest.string() + "': " + e.what());
    }
    if (d.images.empty()) fail(ErrorCode::InvalidArgument, "dataset '" + manifest.string() + "' is empty");
    return d;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& manifest) {
    if (dataset.files.size() != dataset.images.size() || dataset.annotations.size() != dataset.images.size()) {
        fail(ErrorCode::InvalidArgument, "dataset files, images and annotations differ in count");
    }
    const auto dir = manifest.parent_path();
    json j;
    j["num_classes"] = dataset.num_classes;
    j["images"] = json::array();
    for (std::size_t i = 0; i < dataset.images.size(); ++i) {
        const auto path = dataset.files[i].is_absolute() ? dataset.files[i] : dir / dataset.files[i];
        std::filesystem::create_directories(path.parent_path());
        save_tensor(dataset.images[i], path);
        json boxes = json::array();
        for (const auto& g : dataset.annotations[i]) {
            boxes.push_back({{"class", g.class_id}, {"box", {g.box.x_min, g.box.y_min, g.box.x_max, g.box.y_max}}});
        }
        j["images"].push_back({{"file", dataset.files[i].generic_string()}, {"boxes", boxes}});
    }
    std::ofstream out(manifest, std::ios::trunc);
    if (!out) fail(ErrorCode::Io, "cannot write dataset manifest '" + manifest.string() + "'");
    out << j.dump(2) << '\n';
}

namespace {

std::vector<std::string> head_ids(const AnchorConfig& anchors) {
    std::vector<std::string> ids;
    for (const auto& h : anchors.heads) {
        ids.push_back(h.cls_output);
        ids.push_back(h.box_output);
    }
    return ids;
}

std::vector<Detection> decode_named(const std::map<std::string, Tensor>& values, const std::vector<std::string>& ids,
                                    const AnchorConfig& anchors, const Shape& image_shape) {
    std::vector<Tensor> heads;
    for (const auto& id : ids) heads.push_back(values.at(id));
    return decode_detections(heads, anchors, image_shape.at(1), image_shape.at(0));
}

} // namespace

MapConvergence map_convergence(const ModelGraph& model, SpikingNetwork& snn, const Dataset& dataset,
                               const AnchorConfig& anchors, double sample_every_ms, double iou_threshold) {
    anchors.validate();
    if (dataset.images.empty()) fail(ErrorCode::InvalidArgument, "empty dataset");
    if (anchors.num_classes != dataset.num_classes) {
        fail(ErrorCode::InvalidArgument, "anchor config has " + std::to_string(anchors.num_classes) +
                                             " classes, dataset has " + std::to_string(dataset.num_classes));
    }
    const SimConfig& config = snn.config();
    if (!(sample_every_ms > 0.0)) fail(ErrorCode::InvalidArgument, "sample interval must be positive");
    const auto every = static_cast<std::size_t>(std::llround(sample_every_ms / config.dt));
    if (every == 0) fail(ErrorCode::InvalidArgument, "sample interval is shorter than one step");

    const ModelGraph parsed = parse(model);
    const auto ids = head_ids(anchors);
    for (const auto& id : ids) {
        if (!parsed.find(id)) fail(ErrorCode::InvalidArgument, "head '" + id + "' is not a node of the analog model");
        if (!snn.model().find(id)) fail(ErrorCode::InvalidArgument, "head '" + id + "' is not a node of the SNN");
    }
    const ChannelStats& stats = *snn.model().normalization;

    MapConvergence result;
    std::vector<std::size_t> steps;
    std::vector<std::vector<std::vector<Detection>>> per_sample;
    for (std::size_t i = 0; i < dataset.images.size(); ++i) {
        const Tensor& image = dataset.images[i];
        const ActivationRecord analog = forward(parsed, as_batch(parsed, image));
        std::map<std::string, Tensor> ann_heads;
        for (const auto& id : ids) ann_heads.emplace(id, analog.at(id));
        result.ann_detections.push_back(decode_named(ann_heads, ids, anchors, parsed.input_shape));

        RunOptions options;
        options.record = ids;
        options.sample_every = every;
        RateRecord rec = snn.run(image, options);
        result.conservation_error = std::max(result.conservation_error, rec.conservation_error);
        if (i == 0) {
            for (const auto& s : rec.series) steps.push_back(s.step);
            per_sample.resize(steps.size());
        }
        for (std::size_t s = 0; s < rec.series.size(); ++s) {
            per_sample[s].push_back(decode_named(denormalize(rec.series[s].rates, stats), ids, anchors, parsed.input_shape));
        }
        result.snn_detections.push_back(decode_named(denormalize(rec.rates, stats), ids, anchors, parsed.input_shape));
    }

    result.ann = evaluate_map(result.ann_detections, dataset.annotations, anchors.num_classes, iou_threshold);
    for (std::size_t s = 0; s < steps.size(); ++s) {
        std::ostringstream t;
        t << static_cast<double>(steps[s]) * config.dt;
        result.series.push_back({t.str(), evaluate_map(per_sample[s], dataset.annotations, anchors.num_classes, iou_threshold)});
    }
    return result;
}

void write_map_csv(const MapConvergence& result, std::ostream& out, bool per_class) {
    out << "time_ms,class,ap,map\n";
    auto opt = [](const std::optional<double>& v) {
        std::ostringstream s;
        if (v) s << *v;
        return s.str();
    };
    auto emit = [&](const std::string& time, const MapReport& r) {
        if (per_class) {
            for (std::size_t k = 0; k < r.ap.size(); ++k) out << time << ',' << k << ',' << opt(r.ap[k]) << ',' << opt(r.map) << '\n';
        }
        out << time << ",all," << opt(r.map) << ',' << opt(r.map) << '\n';
    };
    for (const auto& p : result.series) emit(p.time, p.report);
    emit("ann", result.ann);
}

bool detections_match(const std::vector<Detection>& a, const std::vector<Detection>& b, double min_iou) {
    if (a.size() != b.size()) return false;
    const std::size_t n = a.size();
    std::vector<std::vector<std::size_t>> adj(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (a[i].class_id == b[j].class_id && iou(a[i].box, b[j].box) >= min_iou) adj[i].push_back(j);
        }
    }
    std::vector<std::ptrdiff_t> owner(n, -1);
    std::function<bool(std::size_t, std::vector<bool>&)> augment = [&](std::size_t i, std::vector<bool>& seen) {
        for (std::size_t j : adj[i]) {
            if (seen[j]) continue;
            seen[j] = true;
            if (owner[j] < 0 || augment(static_cast<std::size_t>(owner[j]), seen)) {
                owner[j] = static_cast<std::ptrdiff_t>(i);
                return true;
            }
        }
        return false;
    };
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<bool> seen(n, false);
        if (!augment(i, seen)) return false;
    }
    return true;
}

} // namespace snnconv
