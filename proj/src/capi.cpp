#include "snnconv/snnconv.h"

#include "analysis.hpp"
#include "calibrator.hpp"
#include "error.hpp"
#include "fixtures.hpp"
#include "parser.hpp"
#include "spiking.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <memory>
#include <new>
#include <string>

using namespace snnconv;

struct snnconv_tensor {
    Tensor t;
};

struct snnconv_model {
    ModelGraph g;
};

struct snnconv_norm_report {
    NormalizationReport report;
    double parse_deviation = 0.0;
};

struct snnconv_snn {
    SpikingNetwork net;
};

struct snnconv_rates {
    RateRecord record;
    ChannelStats stats;
    std::vector<std::string> ids;
};

struct snnconv_corr_report {
    std::vector<CorrelationReport> snapshots;
    // (snapshot, layer) pairs in report order
    std::vector<std::pair<std::size_t, std::size_t>> rows;
};

struct snnconv_map_series {
    MapConvergence result;
};

namespace {

thread_local std::string g_last_error;

snnconv_status to_status(ErrorCode code) {
    switch (code) {
    case ErrorCode::InvalidArgument: return SNNCONV_ERR_INVALID_ARGUMENT;
    case ErrorCode::Io: return SNNCONV_ERR_IO;
    case ErrorCode::Format: return SNNCONV_ERR_FORMAT;
    case ErrorCode::Shape: return SNNCONV_ERR_SHAPE;
    case ErrorCode::Graph: return SNNCONV_ERR_GRAPH;
    case ErrorCode::Numeric: return SNNCONV_ERR_NUMERIC;
    case ErrorCode::Unsupported: return SNNCONV_ERR_UNSUPPORTED;
    case ErrorCode::State: return SNNCONV_ERR_STATE;
    case ErrorCode::Internal: return SNNCONV_ERR_INTERNAL;
    }
    return SNNCONV_ERR_INTERNAL;
}

template <class F>
snnconv_status guarded(F&& body) {
    try {
        body();
        return SNNCONV_OK;
    } catch (const Error& e) {
        g_last_error = e.what();
        return to_status(e.code());
    } catch (const std::bad_alloc&) {
        g_last_error = "out of memory";
        return SNNCONV_ERR_INTERNAL;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return SNNCONV_ERR_INTERNAL;
    }
}

void require(const void* p, const char* what) {
    if (!p) fail(ErrorCode::InvalidArgument, std::string(what) + " must not be null");
}

// Prefixes errors with the pipeline stage that raised them.
template <class F>
auto stage(const char* name, F&& body) {
    try {
        return body();
    } catch (const Error& e) {
        throw Error(e.code(), std::string(name) + ": " + e.what());
    }
}

// Writes to stdout for a null path or "-".
class OutFile {
public:
    OutFile(const char* path, bool append) {
        if (path && std::string_view(path) != "-") {
            file_.open(path, append ? std::ios::app : std::ios::trunc);
            if (!file_) fail(ErrorCode::Io, std::string("cannot write '") + path + "'");
            out_ = &file_;
        }
    }
    std::ostream& operator*() { return *out_; }
    void finish() {
        out_->flush();
        if (!*out_) fail(ErrorCode::Io, "write failed");
    }

private:
    std::ofstream file_;
    std::ostream* out_ = &std::cout;
};

SimConfig to_config(const snnconv_sim_config* c) {
    SimConfig s;
    if (c) {
        s.dt = c->dt;
        s.duration = c->duration;
        s.v_th = c->v_th;
        s.transient = c->transient;
    }
    return s;
}

std::string file_safe(std::string id) {
    std::replace(id.begin(), id.end(), '/', '_');
    return id;
}

} // namespace

extern "C" {

const char* snnconv_version(void) {
    return "1.0.0";
}

const char* snnconv_last_error(void) {
    return g_last_error.c_str();
}

const char* snnconv_status_name(snnconv_status status) {
    switch (status) {
    case SNNCONV_OK: return "ok";
    case SNNCONV_ERR_INVALID_ARGUMENT: return "invalid argument";
    case SNNCONV_ERR_IO: return "I/O error";
    case SNNCONV_ERR_FORMAT: return "format error";
    case SNNCONV_ERR_SHAPE: return "shape error";
    case SNNCONV_ERR_GRAPH: return "graph error";
    case SNNCONV_ERR_NUMERIC: return "numeric error";
    case SNNCONV_ERR_UNSUPPORTED: return "unsupported";
    case SNNCONV_ERR_STATE: return "state error";
    case SNNCONV_ERR_INTERNAL: return "internal error";
    }
    return "unknown status";
}

snnconv_status snnconv_tensor_create(const size_t* shape, size_t rank, const float* data, snnconv_tensor** out) {
    return guarded([&] {
        require(out, "out");
        if (rank) require(shape, "shape");
        Shape s(shape, shape + rank);
        auto t = std::make_unique<snnconv_tensor>();
        t->t = Tensor(s);
        if (data) std::copy(data, data + t->t.size(), t->t.data());
        *out = t.release();
    });
}

snnconv_status snnconv_tensor_load(const char* path, snnconv_tensor** out) {
    return guarded([&] {
        require(path, "path");
        require(out, "out");
        *out = new snnconv_tensor{load_tensor(path)};
    });
}

snnconv_status snnconv_tensor_save(const snnconv_tensor* tensor, const char* path) {
    return guarded([&] {
        require(tensor, "tensor");
        require(path, "path");
        save_tensor(tensor->t, path);
    });
}

size_t snnconv_tensor_rank(const snnconv_tensor* tensor) {
    return tensor ? tensor->t.rank() : 0;
}

size_t snnconv_tensor_dim(const snnconv_tensor* tensor, size_t axis) {
    return tensor && axis < tensor->t.rank() ? tensor->t.shape()[axis] : 0;
}

size_t snnconv_tensor_size(const snnconv_tensor* tensor) {
    return tensor ? tensor->t.size() : 0;
}

const float* snnconv_tensor_data(const snnconv_tensor* tensor) {
    return tensor ? tensor->t.data() : nullptr;
}

void snnconv_tensor_free(snnconv_tensor* tensor) {
    delete tensor;
}

snnconv_status snnconv_model_load(const char* manifest_path, snnconv_model** out) {
    return guarded([&] {
        require(manifest_path, "manifest path");
        require(out, "out");
        *out = new snnconv_model{load_model(manifest_path)};
    });
}

snnconv_status snnconv_model_save(const snnconv_model* model, const char* manifest_path) {
    return guarded([&] {
        require(model, "model");
        require(manifest_path, "manifest path");
        save_model(model->g, manifest_path);
    });
}

void snnconv_model_free(snnconv_model* model) {
    delete model;
}

const char* snnconv_model_name(const snnconv_model* model) {
    return model ? model->g.name.c_str() : nullptr;
}

size_t snnconv_model_node_count(const snnconv_model* model) {
    return model ? model->g.nodes.size() : 0;
}

const char* snnconv_model_node_id(const snnconv_model* model, size_t index) {
    return model && index < model->g.nodes.size() ? model->g.nodes[index].id.c_str() : nullptr;
}

const char* snnconv_model_node_kind(const snnconv_model* model, size_t index) {
    return model && index < model->g.nodes.size() ? to_string(model->g.nodes[index].kind).data() : nullptr;
}

size_t snnconv_model_output_count(const snnconv_model* model) {
    return model ? model->g.outputs.size() : 0;
}

const char* snnconv_model_output_id(const snnconv_model* model, size_t index) {
    return model && index < model->g.outputs.size() ? model->g.outputs[index].c_str() : nullptr;
}

int snnconv_model_is_normalized(const snnconv_model* model) {
    return model && model->g.normalization ? 1 : 0;
}

snnconv_status snnconv_model_save_stats(const snnconv_model* model, const char* path) {
    return guarded([&] {
        require(model, "model");
        require(path, "path");
        if (!model->g.normalization) fail(ErrorCode::State, "model '" + model->g.name + "' is not normalized");
        save_stats(*model->g.normalization, path);
    });
}

snnconv_status snnconv_model_forward(const snnconv_model* model, const snnconv_tensor* input, const char* node_id,
                                     snnconv_tensor** out) {
    return guarded([&] {
        require(model, "model");
        require(input, "input");
        require(node_id, "node id");
        require(out, "out");
        ActivationRecord rec = forward(model->g, as_batch(model->g, input->t));
        auto it = rec.find(node_id);
        if (it == rec.end()) fail(ErrorCode::InvalidArgument, std::string("unknown node '") + node_id + "'");
        *out = new snnconv_tensor{std::move(it->second)};
    });
}

snnconv_status snnconv_parse(const snnconv_model* raw, snnconv_model** parsed) {
    return guarded([&] {
        require(raw, "model");
        require(parsed, "out");
        *parsed = new snnconv_model{parse(raw->g)};
    });
}

snnconv_status snnconv_convert(const snnconv_model* raw, const snnconv_tensor* calib, double p_lo, double p_hi,
                               snnconv_model** normalized, snnconv_norm_report** report) {
    return guarded([&] {
        require(raw, "model");
        require(calib, "calibration batch");
        require(normalized, "out");
        const ModelGraph parsed = stage("parse", [&] { return parse(raw->g); });
        const Tensor batch = stage("calibrate", [&] { return as_batch(parsed, calib->t); });
        CalibrationOptions options;
        options.p_lo = p_lo;
        options.p_hi = p_hi;
        const ChannelStats stats = stage("calibrate", [&] { return collect_stats(parsed, batch, options); });
        ModelGraph out = stage("normalize", [&] { return normalize_model(parsed, stats); });
        auto rep = std::make_unique<snnconv_norm_report>();
        stage("verify", [&] {
            rep->report = verify_normalization(parsed, out, batch);
            rep->parse_deviation = verify_parse(raw->g, parsed, batch).max_relative_deviation;
            return 0;
        });
        *normalized = new snnconv_model{std::move(out)};
        if (report) *report = rep.release();
    });
}

size_t snnconv_norm_report_layer_count(const snnconv_norm_report* report) {
    return report ? report->report.layers.size() : 0;
}

const char* snnconv_norm_report_layer_id(const snnconv_norm_report* report, size_t index) {
    return report && index < report->report.layers.size() ? report->report.layers[index].id.c_str() : nullptr;
}

double snnconv_norm_report_in_range(const snnconv_norm_report* report, size_t index) {
    return report && index < report->report.layers.size() ? report->report.layers[index].in_range_fraction : NAN;
}

double snnconv_norm_report_max_deviation(const snnconv_norm_report* report, size_t index) {
    return report && index < report->report.layers.size() ? report->report.layers[index].max_relative_deviation
                                                           : NAN;
}

size_t snnconv_norm_report_repaired_channels(const snnconv_norm_report* report) {
    return report ? report->report.repaired_channels : 0;
}

double snnconv_norm_report_parse_deviation(const snnconv_norm_report* report) {
    return report ? report->parse_deviation : NAN;
}

void snnconv_norm_report_free(snnconv_norm_report* report) {
    delete report;
}

void snnconv_sim_config_init(snnconv_sim_config* config) {
    if (!config) return;
    const SimConfig d;
    config->dt = d.dt;
    config->duration = d.duration;
    config->v_th = d.v_th;
    config->transient = d.transient;
}

snnconv_status snnconv_snn_build(const snnconv_model* normalized, const snnconv_sim_config* config,
                                 snnconv_snn** out) {
    return guarded([&] {
        require(normalized, "model");
        require(out, "out");
        *out = new snnconv_snn{SpikingNetwork(normalized->g, to_config(config))};
    });
}

void snnconv_snn_free(snnconv_snn* snn) {
    delete snn;
}

snnconv_status snnconv_snn_run(snnconv_snn* snn, const snnconv_tensor* image, const snnconv_run_options* options,
                               snnconv_rates** out) {
    return guarded([&] {
        require(snn, "snn");
        require(image, "image");
        require(out, "out");
        RunOptions o;
        if (options) {
            if (options->record_count) require(options->record, "record list");
            for (size_t i = 0; i < options->record_count; ++i) {
                require(options->record[i], "record id");
                o.record.emplace_back(options->record[i]);
            }
            o.keep_raster = options->keep_raster != 0;
            o.sample_every = options->sample_every;
        }
        auto r = std::make_unique<snnconv_rates>();
        r->record = snn->net.run(image->t, o);
        r->stats = *snn->net.model().normalization;
        for (const auto& [id, t] : r->record.rates) r->ids.push_back(id);
        *out = r.release();
    });
}

double snnconv_snn_conservation_error(const snnconv_snn* snn) {
    return snn ? snn->net.max_conservation_error() : NAN;
}

size_t snnconv_rates_node_count(const snnconv_rates* rates) {
    return rates ? rates->ids.size() : 0;
}

const char* snnconv_rates_node_id(const snnconv_rates* rates, size_t index) {
    return rates && index < rates->ids.size() ? rates->ids[index].c_str() : nullptr;
}

snnconv_status snnconv_rates_get(const snnconv_rates* rates, const char* node_id, int denormalized,
                                 snnconv_tensor** out) {
    return guarded([&] {
        require(rates, "rates");
        require(node_id, "node id");
        require(out, "out");
        auto it = rates->record.rates.find(node_id);
        if (it == rates->record.rates.end()) {
            fail(ErrorCode::InvalidArgument, std::string("node '") + node_id + "' was not recorded");
        }
        Tensor t = denormalized ? denormalize_activation(it->second, rates->stats.at(it->first)) : it->second;
        *out = new snnconv_tensor{std::move(t)};
    });
}

double snnconv_rates_conservation_error(const snnconv_rates* rates) {
    return rates ? rates->record.conservation_error : NAN;
}

snnconv_status snnconv_rates_write_csv(const snnconv_rates* rates, const char* path, int header, long image_index) {
    return guarded([&] {
        require(rates, "rates");
        OutFile out(path, header == 0);
        write_rate_series_csv(rates->record, *out, header != 0, image_index);
        out.finish();
    });
}

snnconv_status snnconv_rates_write_rasters(const snnconv_rates* rates, const char* dir, const char* prefix) {
    return guarded([&] {
        require(rates, "rates");
        require(dir, "directory");
        if (rates->record.rasters.empty()) fail(ErrorCode::State, "run did not keep spike rasters");
        std::error_code ec;
        std::filesystem::create_directories(dir, ec);
        if (ec) fail(ErrorCode::Io, std::string("cannot create '") + dir + "': " + ec.message());
        for (const auto& [id, raster] : rates->record.rasters) {
            raster.write(std::filesystem::path(dir) / (std::string(prefix ? prefix : "") + file_safe(id) + ".raster"));
        }
    });
}

void snnconv_rates_free(snnconv_rates* rates) {
    delete rates;
}

snnconv_status snnconv_correlate(const snnconv_model* model, const snnconv_model* normalized,
                                 const snnconv_tensor* image, const snnconv_sim_config* config, const double* at_ms,
                                 size_t at_count, const char* const* layers, size_t layer_count, int self_check,
                                 snnconv_corr_report** out) {
    return guarded([&] {
        require(model, "model");
        require(normalized, "normalized model");
        require(image, "image");
        require(out, "out");
        if (at_count == 0) fail(ErrorCode::InvalidArgument, "no snapshot times given");
        require(at_ms, "snapshot times");
        const ModelGraph& norm = normalized->g;
        if (!norm.normalization) fail(ErrorCode::State, "model '" + norm.name + "' is not normalized");
        std::vector<std::string> ids;
        for (size_t i = 0; i < layer_count; ++i) {
            require(layers[i], "layer id");
            ids.emplace_back(layers[i]);
        }
        if (ids.empty()) ids = norm.outputs;

        // Reference: the analog model's activations mapped into normalized units.
        const ModelGraph parsed = parse(model->g);
        const ActivationRecord raw = forward(parsed, as_batch(parsed, image->t));
        ActivationRecord analog;
        for (const auto& id : ids) {
            auto it = raw.find(id);
            if (it == raw.end()) fail(ErrorCode::InvalidArgument, "layer '" + id + "' is not in the analog model");
            analog.emplace(id, normalize_activation(it->second, norm.normalization->at(id)));
        }

        SimConfig cfg = to_config(config);
        cfg.validate();
        auto report = std::make_unique<snnconv_corr_report>();
        if (self_check) {
            const ActivationRecord own = forward(norm, as_batch(norm, image->t));
            std::map<std::string, Tensor> clipped;
            for (const auto& id : ids) {
                Tensor t = own.at(id);
                for (float& v : t.values()) v = std::clamp(v, 0.0f, 1.0f);
                clipped.emplace(id, std::move(t));
            }
            for (size_t k = 0; k < at_count; ++k) report->snapshots.push_back(correlate(analog, clipped, ids, at_ms[k]));
        } else {
            RunOptions o;
            o.record = ids;
            for (size_t k = 0; k < at_count; ++k) {
                const double steps = at_ms[k] / cfg.dt;
                if (!(steps >= 1.0) || std::abs(steps - std::round(steps)) > 1e-9) {
                    fail(ErrorCode::InvalidArgument, "snapshot time " + std::to_string(at_ms[k]) +
                                                         " ms is not a positive whole number of steps");
                }
                if (at_ms[k] > cfg.duration) {
                    fail(ErrorCode::InvalidArgument, "snapshot time " + std::to_string(at_ms[k]) +
                                                         " ms exceeds the duration");
                }
                o.snapshot_steps.push_back(static_cast<std::size_t>(std::llround(steps)));
            }
            SpikingNetwork snn(norm, cfg);
            const RateRecord rec = snn.run(image->t, o);
            for (size_t k = 0; k < at_count; ++k) {
                const std::size_t step = o.snapshot_steps[k];
                auto snap = std::find_if(rec.series.begin(), rec.series.end(),
                                         [&](const RateSnapshot& s) { return s.step == step; });
                report->snapshots.push_back(correlate(analog, snap->rates, ids, at_ms[k]));
            }
        }
        for (std::size_t s = 0; s < report->snapshots.size(); ++s) {
            for (std::size_t l = 0; l < report->snapshots[s].layers.size(); ++l) report->rows.emplace_back(s, l);
        }
        *out = report.release();
    });
}

size_t snnconv_corr_report_count(const snnconv_corr_report* report) {
    return report ? report->rows.size() : 0;
}

namespace {
const LayerCorrelation* corr_row(const snnconv_corr_report* report, size_t index) {
    if (!report || index >= report->rows.size()) return nullptr;
    const auto [s, l] = report->rows[index];
    return &report->snapshots[s].layers[l];
}
} // namespace

double snnconv_corr_report_time(const snnconv_corr_report* report, size_t index) {
    return corr_row(report, index) ? report->snapshots[report->rows[index].first].time_ms : NAN;
}

const char* snnconv_corr_report_layer(const snnconv_corr_report* report, size_t index) {
    const auto* row = corr_row(report, index);
    return row ? row->id.c_str() : nullptr;
}

size_t snnconv_corr_report_pairs(const snnconv_corr_report* report, size_t index) {
    const auto* row = corr_row(report, index);
    return row ? row->analog.size() : 0;
}

int snnconv_corr_report_pearson(const snnconv_corr_report* report, size_t index, double* r) {
    const auto* row = corr_row(report, index);
    if (!row || !row->pearson) return 0;
    if (r) *r = *row->pearson;
    return 1;
}

snnconv_status snnconv_corr_report_write_summary(const snnconv_corr_report* report, const char* path) {
    return guarded([&] {
        require(report, "report");
        OutFile out(path, false);
        *out << "time_ms,layer,pearson,count\n";
        for (const auto& snap : report->snapshots) {
            for (const auto& l : snap.layers) {
                *out << snap.time_ms << ',' << l.id << ',';
                if (l.pearson) *out << *l.pearson;
                *out << ',' << l.analog.size() << '\n';
            }
        }
        out.finish();
    });
}

snnconv_status snnconv_corr_report_write_scatter(const snnconv_corr_report* report, double time_ms,
                                                 const char* path) {
    return guarded([&] {
        require(report, "report");
        for (const auto& snap : report->snapshots) {
            if (snap.time_ms == time_ms) {
                OutFile out(path, false);
                write_correlation_csv(snap, *out, true);
                out.finish();
                return;
            }
        }
        fail(ErrorCode::InvalidArgument, "no snapshot at " + std::to_string(time_ms) + " ms");
    });
}

void snnconv_corr_report_free(snnconv_corr_report* report) {
    delete report;
}

snnconv_status snnconv_evaluate(const snnconv_model* model, const snnconv_model* normalized,
                                const char* dataset_manifest, const char* anchors_path,
                                const snnconv_sim_config* config, double sample_every_ms,
                                snnconv_map_series** out) {
    return guarded([&] {
        require(model, "model");
        require(normalized, "normalized model");
        require(dataset_manifest, "dataset path");
        require(anchors_path, "anchors path");
        require(out, "out");
        const Dataset dataset = load_dataset(dataset_manifest);
        const AnchorConfig anchors = load_anchor_config(anchors_path);
        SpikingNetwork snn(normalized->g, to_config(config));
        *out = new snnconv_map_series{map_convergence(model->g, snn, dataset, anchors, sample_every_ms)};
    });
}

size_t snnconv_map_series_count(const snnconv_map_series* series) {
    return series ? series->result.series.size() : 0;
}

double snnconv_map_series_time(const snnconv_map_series* series, size_t index) {
    return series && index < series->result.series.size() ? std::stod(series->result.series[index].time) : NAN;
}

int snnconv_map_series_map(const snnconv_map_series* series, size_t index, double* map) {
    if (!series || index >= series->result.series.size()) return 0;
    const auto& m = series->result.series[index].report.map;
    if (!m) return 0;
    if (map) *map = *m;
    return 1;
}

int snnconv_map_series_ann_map(const snnconv_map_series* series, double* map) {
    if (!series || !series->result.ann.map) return 0;
    if (map) *map = *series->result.ann.map;
    return 1;
}

double snnconv_map_series_agreement(const snnconv_map_series* series, double min_iou) {
    if (!series || series->result.ann_detections.empty()) return NAN;
    const auto& a = series->result.ann_detections;
    const auto& s = series->result.snn_detections;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < a.size(); ++i) ok += detections_match(a[i], s[i], min_iou) ? 1 : 0;
    return static_cast<double>(ok) / static_cast<double>(a.size());
}

double snnconv_map_series_conservation_error(const snnconv_map_series* series) {
    return series ? series->result.conservation_error : NAN;
}

snnconv_status snnconv_map_series_write_csv(const snnconv_map_series* series, const char* path, int per_class) {
    return guarded([&] {
        require(series, "series");
        OutFile out(path, false);
        write_map_csv(series->result, *out, per_class != 0);
        out.finish();
    });
}

void snnconv_map_series_free(snnconv_map_series* series) {
    delete series;
}

snnconv_status snnconv_generate_fixture(const char* kind, uint64_t seed, size_t count, const char* out_dir) {
    return guarded([&] {
        require(kind, "kind");
        require(out_dir, "output directory");
        FixtureSpec spec;
        spec.kind = parse_fixture_kind(kind);
        spec.seed = seed;
        spec.count = count;
        write_fixture(make_fixture(spec), out_dir);
    });
}

} // extern "C"
