// snnconv: convert, simulate and evaluate rate-coded spiking versions of
// convolutional networks. Exit codes: 0 success, 1 internal error, 2 usage or
// input error.
#include "snnconv/snnconv.h"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

namespace {

constexpr int kExitInternal = 1;
constexpr int kExitUsage = 2;

struct CallFailed {
    snnconv_status status;
};

void check(snnconv_status status) {
    if (status != SNNCONV_OK) throw CallFailed{status};
}

template <class T, void (*Free)(T*)>
struct Deleter {
    void operator()(T* p) const { Free(p); }
};
using TensorPtr = std::unique_ptr<snnconv_tensor, Deleter<snnconv_tensor, snnconv_tensor_free>>;
using ModelPtr = std::unique_ptr<snnconv_model, Deleter<snnconv_model, snnconv_model_free>>;
using ReportPtr = std::unique_ptr<snnconv_norm_report, Deleter<snnconv_norm_report, snnconv_norm_report_free>>;
using SnnPtr = std::unique_ptr<snnconv_snn, Deleter<snnconv_snn, snnconv_snn_free>>;
using RatesPtr = std::unique_ptr<snnconv_rates, Deleter<snnconv_rates, snnconv_rates_free>>;
using CorrPtr = std::unique_ptr<snnconv_corr_report, Deleter<snnconv_corr_report, snnconv_corr_report_free>>;
using SeriesPtr = std::unique_ptr<snnconv_map_series, Deleter<snnconv_map_series, snnconv_map_series_free>>;

ModelPtr load_model(const std::string& path) {
    snnconv_model* m = nullptr;
    check(snnconv_model_load(path.c_str(), &m));
    return ModelPtr(m);
}

TensorPtr load_tensor(const std::string& path) {
    snnconv_tensor* t = nullptr;
    check(snnconv_tensor_load(path.c_str(), &t));
    return TensorPtr(t);
}

// Output files may name directories that do not exist yet; "-" is stdout.
void make_parent(const std::string& path) {
    if (path.empty() || path == "-") return;
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
}

std::vector<const char*> c_strings(const std::vector<std::string>& v) {
    std::vector<const char*> out;
    for (const auto& s : v) out.push_back(s.c_str());
    return out;
}

struct SimFlags {
    double dt = 1.0;
    double duration = 1000.0;
    double transient = 0.0;
    double v_th = 1.0;

    snnconv_sim_config config() const { return {dt, duration, v_th, transient}; }
};

void add_sim_flags(CLI::App* cmd, SimFlags& f) {
    cmd->add_option("--duration", f.duration, "Simulated time window in ms")->capture_default_str();
    cmd->add_option("--dt", f.dt, "Timestep in ms")->capture_default_str();
    cmd->add_option("--transient", f.transient, "Initial ms excluded from rates")->capture_default_str();
    cmd->add_option("--v-th", f.v_th, "Firing threshold")->capture_default_str();
}

struct ConvertArgs {
    std::string model, calib, out, stats_out;
    double p_lo = 0.01, p_hi = 99.99;
};

void run_convert(const ConvertArgs& a) {
    ModelPtr raw = load_model(a.model);
    TensorPtr calib = load_tensor(a.calib);
    snnconv_model* norm = nullptr;
    snnconv_norm_report* rep = nullptr;
    check(snnconv_convert(raw.get(), calib.get(), a.p_lo, a.p_hi, &norm, &rep));
    ModelPtr normalized(norm);
    ReportPtr report(rep);
    make_parent(a.out);
    check(snnconv_model_save(normalized.get(), a.out.c_str()));
    make_parent(a.stats_out);
    if (!a.stats_out.empty()) check(snnconv_model_save_stats(normalized.get(), a.stats_out.c_str()));

    std::printf("layer,in_range_fraction,max_relative_deviation\n");
    double worst = 1.0;
    for (size_t i = 0; i < snnconv_norm_report_layer_count(report.get()); ++i) {
        const double in_range = snnconv_norm_report_in_range(report.get(), i);
        worst = std::min(worst, in_range);
        std::printf("%s,%.6f,%.3g\n", snnconv_norm_report_layer_id(report.get(), i), in_range,
                    snnconv_norm_report_max_deviation(report.get(), i));
    }
    std::fprintf(stderr, "min in-range fraction %.6f, parse deviation %.3g\n", worst,
                 snnconv_norm_report_parse_deviation(report.get()));
    if (const size_t repaired = snnconv_norm_report_repaired_channels(report.get())) {
        std::fprintf(stderr, "warning: %zu channel(s) had degenerate percentile ranges and were reset to [0, 1]\n",
                     repaired);
    }
}

struct SimulateArgs {
    std::string model;
    std::vector<std::string> images, record;
    std::string raster_out, rates_out = "-";
    double sample_every = 50.0;
    SimFlags sim;
};

void run_simulate(const SimulateArgs& a) {
    ModelPtr model = load_model(a.model);
    const snnconv_sim_config cfg = a.sim.config();
    snnconv_snn* s = nullptr;
    check(snnconv_snn_build(model.get(), &cfg, &s));
    SnnPtr snn(s);

    const auto every = static_cast<size_t>(std::llround(a.sample_every / a.sim.dt));
    if (a.sample_every < 0 || (a.sample_every > 0 && every == 0)) {
        throw CLI::ValidationError("--sample-every", "must be 0 or at least one timestep");
    }
    const auto ids = c_strings(a.record);
    snnconv_run_options opts{ids.data(), ids.size(), a.raster_out.empty() ? 0 : 1, every};
    make_parent(a.rates_out);
    if (!a.raster_out.empty()) std::filesystem::create_directories(a.raster_out);
    double worst = 0.0;
    for (size_t i = 0; i < a.images.size(); ++i) {
        TensorPtr image = load_tensor(a.images[i]);
        snnconv_rates* r = nullptr;
        check(snnconv_snn_run(snn.get(), image.get(), &opts, &r));
        RatesPtr rates(r);
        worst = std::max(worst, snnconv_rates_conservation_error(rates.get()));
        check(snnconv_rates_write_csv(rates.get(), a.rates_out.c_str(), i == 0 ? 1 : 0, static_cast<long>(i)));
        if (!a.raster_out.empty()) {
            const std::string prefix = std::to_string(i) + "_";
            check(snnconv_rates_write_rasters(rates.get(), a.raster_out.c_str(), prefix.c_str()));
        }
    }
    std::fprintf(stderr, "simulated %zu image(s), max conservation error %.3g\n", a.images.size(), worst);
}

struct CorrelateArgs {
    std::string model, normalized, image, out = "-", scatter_dir;
    std::vector<double> at;
    std::vector<std::string> layers;
    bool self_check = false;
    SimFlags sim;
};

void run_correlate(CorrelateArgs a, bool duration_given) {
    if (!duration_given) a.sim.duration = *std::max_element(a.at.begin(), a.at.end());
    for (double t : a.at) {
        if (t <= a.sim.transient) {
            throw CLI::ValidationError("--at", "time " + std::to_string(t) + " ms leaves no post-transient steps");
        }
    }
    ModelPtr model = load_model(a.model);
    ModelPtr normalized = load_model(a.normalized);
    TensorPtr image = load_tensor(a.image);
    const snnconv_sim_config cfg = a.sim.config();
    const auto ids = c_strings(a.layers);
    snnconv_corr_report* r = nullptr;
    check(snnconv_correlate(model.get(), normalized.get(), image.get(), &cfg, a.at.data(), a.at.size(), ids.data(),
                            ids.size(), a.self_check ? 1 : 0, &r));
    CorrPtr report(r);
    make_parent(a.out);
    check(snnconv_corr_report_write_summary(report.get(), a.out.c_str()));
    if (!a.scatter_dir.empty()) {
        std::filesystem::create_directories(a.scatter_dir);
        for (double t : a.at) {
            std::ostringstream name;
            name << "correlation_" << t << "ms.csv";
            const auto path = (std::filesystem::path(a.scatter_dir) / name.str()).string();
            check(snnconv_corr_report_write_scatter(report.get(), t, path.c_str()));
        }
    }
}

struct EvaluateArgs {
    std::string model, normalized, dataset, anchors, out = "-";
    double sample_every = 50.0;
    bool per_class = false;
    SimFlags sim;
};

void run_evaluate(const EvaluateArgs& a) {
    ModelPtr model = load_model(a.model);
    ModelPtr normalized = load_model(a.normalized);
    const snnconv_sim_config cfg = a.sim.config();
    snnconv_map_series* s = nullptr;
    check(snnconv_evaluate(model.get(), normalized.get(), a.dataset.c_str(), a.anchors.c_str(), &cfg, a.sample_every,
                           &s));
    SeriesPtr series(s);
    make_parent(a.out);
    check(snnconv_map_series_write_csv(series.get(), a.out.c_str(), a.per_class ? 1 : 0));
    double ann = 0.0, last = 0.0;
    const size_t n = snnconv_map_series_count(series.get());
    const bool have_ann = snnconv_map_series_ann_map(series.get(), &ann);
    const bool have_last = n && snnconv_map_series_map(series.get(), n - 1, &last);
    if (have_ann && have_last) {
        std::fprintf(stderr, "ANN mAP %.4f, SNN mAP %.4f at %g ms, detection agreement %.2f\n", ann, last,
                     snnconv_map_series_time(series.get(), n - 1), snnconv_map_series_agreement(series.get(), 0.9));
    } else {
        std::fprintf(stderr, "mAP undefined: the dataset has no ground-truth boxes\n");
    }
}

struct FixtureArgs {
    std::string kind, out_dir;
    uint64_t seed = 0;
    size_t count = 50;
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Convert convolutional networks to rate-coded spiking networks and measure their fidelity"};
    app.require_subcommand(1);
    app.set_version_flag("--version", snnconv_version());

    ConvertArgs convert;
    auto* c = app.add_subcommand("convert", "Parse, calibrate and normalize a model");
    c->add_option("--model", convert.model, "Raw model manifest")->required();
    c->add_option("--calib", convert.calib, "Calibration batch tensor")->required();
    c->add_option("--p-lo", convert.p_lo, "Low percentile")->capture_default_str()->check(CLI::Range(0.0, 100.0));
    c->add_option("--p-hi", convert.p_hi, "High percentile")->capture_default_str()->check(CLI::Range(0.0, 100.0));
    c->add_option("--out", convert.out, "Normalized model manifest to write")->required();
    c->add_option("--stats-out", convert.stats_out, "Also write the channel ranges as a standalone JSON file");

    SimulateArgs simulate;
    auto* s = app.add_subcommand("simulate", "Run the spiking network on images");
    s->add_option("--model", simulate.model, "Normalized model manifest")->required();
    s->add_option("--image,--images", simulate.images, "Image tensor file(s)")->required();
    add_sim_flags(s, simulate.sim);
    s->add_option("--record", simulate.record, "Node ids to record (default: model outputs)")->delimiter(',');
    s->add_option("--raster-out", simulate.raster_out, "Directory for spike raster dumps");
    s->add_option("--rates-out", simulate.rates_out, "Rate time-series CSV (default: stdout)");
    s->add_option("--sample-every", simulate.sample_every, "Rate sampling interval in ms (0: final rates only)")
        ->capture_default_str();

    CorrelateArgs correlate;
    auto* r = app.add_subcommand("correlate", "Correlate analog activations with spike rates");
    r->add_option("--model", correlate.model, "Analog model manifest")->required();
    r->add_option("--normalized", correlate.normalized, "Normalized model manifest")->required();
    r->add_option("--image", correlate.image, "Image tensor file")->required();
    add_sim_flags(r, correlate.sim);
    r->add_option("--at", correlate.at, "Snapshot times in ms")->required()->delimiter(',');
    r->add_option("--layers", correlate.layers, "Layer ids (default: model outputs)")->delimiter(',');
    r->add_option("--out", correlate.out, "Summary CSV (default: stdout)");
    r->add_option("--scatter-dir", correlate.scatter_dir, "Directory for per-timestamp scatter CSVs");
    r->add_flag("--self-check", correlate.self_check, "Replace rates by the normalized model's analog values");

    EvaluateArgs evaluate;
    auto* e = app.add_subcommand("evaluate", "mAP of the spiking detector over simulation time");
    e->add_option("--model", evaluate.model, "Analog model manifest")->required();
    e->add_option("--normalized", evaluate.normalized, "Normalized model manifest")->required();
    e->add_option("--dataset", evaluate.dataset, "Dataset manifest")->required();
    e->add_option("--anchors", evaluate.anchors, "Anchor configuration")->required();
    add_sim_flags(e, evaluate.sim);
    e->add_option("--sample-every", evaluate.sample_every, "mAP sampling interval in ms")->capture_default_str();
    e->add_option("--out", evaluate.out, "mAP series CSV (default: stdout)");
    e->add_flag("--per-class", evaluate.per_class, "Add per-class AP rows");

    FixtureArgs fixture;
    auto* g = app.add_subcommand("gen-fixtures", "Write a deterministic fixture model and dataset");
    g->add_option("--kind", fixture.kind, "toy-classifier, mini-fpn-detector or blob-detector")
        ->required()
        ->check(CLI::IsMember({"toy-classifier", "mini-fpn-detector", "blob-detector"}));
    g->add_option("--seed", fixture.seed, "Random seed")->capture_default_str();
    g->add_option("--count", fixture.count, "Dataset size")->capture_default_str();
    g->add_option("--out-dir", fixture.out_dir, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (c->parsed()) run_convert(convert);
        if (s->parsed()) run_simulate(simulate);
        if (r->parsed()) run_correlate(correlate, r->count("--duration") > 0);
        if (e->parsed()) run_evaluate(evaluate);
        if (g->parsed()) check(snnconv_generate_fixture(fixture.kind.c_str(), fixture.seed, fixture.count,
                                                        fixture.out_dir.c_str()));
    } catch (const CallFailed& f) {
        std::fprintf(stderr, "error: %s\n", snnconv_last_error());
        return f.status == SNNCONV_ERR_INTERNAL ? kExitInternal : kExitUsage;
    } catch (const std::filesystem::filesystem_error& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return kExitUsage;
    } catch (const CLI::ValidationError& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return kExitUsage;
    } catch (const std::exception& err) {
        std::fprintf(stderr, "internal error: %s\n", err.what());
        return kExitInternal;
    }
    return 0;
}
