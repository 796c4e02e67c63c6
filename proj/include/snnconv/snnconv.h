#ifndef SNNCONV_SNNCONV_H
#define SNNCONV_SNNCONV_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(SNNCONV_BUILDING)
#    define SNNCONV_API __declspec(dllexport)
#  else
#    define SNNCONV_API __declspec(dllimport)
#  endif
#else
#  define SNNCONV_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Every fallible call returns a status; on failure the message is available
 * from snnconv_last_error() on the same thread until the next failing call. */
typedef enum snnconv_status {
    SNNCONV_OK = 0,
    SNNCONV_ERR_INVALID_ARGUMENT = 1,
    SNNCONV_ERR_IO = 2,
    SNNCONV_ERR_FORMAT = 3,
    SNNCONV_ERR_SHAPE = 4,
    SNNCONV_ERR_GRAPH = 5,
    SNNCONV_ERR_NUMERIC = 6,
    SNNCONV_ERR_UNSUPPORTED = 7,
    SNNCONV_ERR_STATE = 8,
    SNNCONV_ERR_INTERNAL = 9
} snnconv_status;

typedef struct snnconv_tensor snnconv_tensor;
typedef struct snnconv_model snnconv_model;
typedef struct snnconv_norm_report snnconv_norm_report;
typedef struct snnconv_snn snnconv_snn;
typedef struct snnconv_rates snnconv_rates;
typedef struct snnconv_corr_report snnconv_corr_report;
typedef struct snnconv_map_series snnconv_map_series;

SNNCONV_API const char* snnconv_version(void);
SNNCONV_API const char* snnconv_last_error(void);
SNNCONV_API const char* snnconv_status_name(snnconv_status status);

/* Tensors: row-major float32. */
SNNCONV_API snnconv_status snnconv_tensor_create(const size_t* shape, size_t rank, const float* data,
                                                 snnconv_tensor** out);
SNNCONV_API snnconv_status snnconv_tensor_load(const char* path, snnconv_tensor** out);
SNNCONV_API snnconv_status snnconv_tensor_save(const snnconv_tensor* tensor, const char* path);
SNNCONV_API size_t snnconv_tensor_rank(const snnconv_tensor* tensor);
SNNCONV_API size_t snnconv_tensor_dim(const snnconv_tensor* tensor, size_t axis);
SNNCONV_API size_t snnconv_tensor_size(const snnconv_tensor* tensor);
SNNCONV_API const float* snnconv_tensor_data(const snnconv_tensor* tensor);
SNNCONV_API void snnconv_tensor_free(snnconv_tensor* tensor);

/* Models: a JSON manifest plus a float32 blob next to it. */
SNNCONV_API snnconv_status snnconv_model_load(const char* manifest_path, snnconv_model** out);
SNNCONV_API snnconv_status snnconv_model_save(const snnconv_model* model, const char* manifest_path);
SNNCONV_API void snnconv_model_free(snnconv_model* model);
SNNCONV_API const char* snnconv_model_name(const snnconv_model* model);
SNNCONV_API size_t snnconv_model_node_count(const snnconv_model* model);
SNNCONV_API const char* snnconv_model_node_id(const snnconv_model* model, size_t index);
SNNCONV_API const char* snnconv_model_node_kind(const snnconv_model* model, size_t index);
SNNCONV_API size_t snnconv_model_output_count(const snnconv_model* model);
SNNCONV_API const char* snnconv_model_output_id(const snnconv_model* model, size_t index);
SNNCONV_API int snnconv_model_is_normalized(const snnconv_model* model);
/* Writes the attached normalization ranges as a standalone JSON file. */
SNNCONV_API snnconv_status snnconv_model_save_stats(const snnconv_model* model, const char* path);
/* Analog activations of `node_id` for `input` (one sample or a batch); the
 * result always has a leading batch axis. */
SNNCONV_API snnconv_status snnconv_model_forward(const snnconv_model* model, const snnconv_tensor* input,
                                                 const char* node_id, snnconv_tensor** out);

/* Pipeline. */
SNNCONV_API snnconv_status snnconv_parse(const snnconv_model* raw, snnconv_model** parsed);
/* parse -> collect stats over `calib` -> normalize -> verify on `calib`.
 * `report` may be NULL. Error messages name the failing stage. */
SNNCONV_API snnconv_status snnconv_convert(const snnconv_model* raw, const snnconv_tensor* calib, double p_lo,
                                           double p_hi, snnconv_model** normalized, snnconv_norm_report** report);
SNNCONV_API size_t snnconv_norm_report_layer_count(const snnconv_norm_report* report);
SNNCONV_API const char* snnconv_norm_report_layer_id(const snnconv_norm_report* report, size_t index);
SNNCONV_API double snnconv_norm_report_in_range(const snnconv_norm_report* report, size_t index);
SNNCONV_API double snnconv_norm_report_max_deviation(const snnconv_norm_report* report, size_t index);
SNNCONV_API size_t snnconv_norm_report_repaired_channels(const snnconv_norm_report* report);
/* Relative deviation of the parsed model's outputs from the raw model's. */
SNNCONV_API double snnconv_norm_report_parse_deviation(const snnconv_norm_report* report);
SNNCONV_API void snnconv_norm_report_free(snnconv_norm_report* report);

/* Simulation. Times in ms. */
typedef struct snnconv_sim_config {
    double dt;
    double duration;
    double v_th;
    double transient;
} snnconv_sim_config;

SNNCONV_API void snnconv_sim_config_init(snnconv_sim_config* config);

typedef struct snnconv_run_options {
    const char* const* record; /* node ids; NULL or empty means model outputs */
    size_t record_count;
    int keep_raster;
    size_t sample_every; /* steps; 0 disables the rate series */
} snnconv_run_options;

SNNCONV_API snnconv_status snnconv_snn_build(const snnconv_model* normalized, const snnconv_sim_config* config,
                                             snnconv_snn** out);
SNNCONV_API void snnconv_snn_free(snnconv_snn* snn);
SNNCONV_API snnconv_status snnconv_snn_run(snnconv_snn* snn, const snnconv_tensor* image,
                                           const snnconv_run_options* options, snnconv_rates** out);
SNNCONV_API double snnconv_snn_conservation_error(const snnconv_snn* snn);

SNNCONV_API size_t snnconv_rates_node_count(const snnconv_rates* rates);
SNNCONV_API const char* snnconv_rates_node_id(const snnconv_rates* rates, size_t index);
/* Spike rates in [0, 1]; with `denormalized` set, mapped back to analog units. */
SNNCONV_API snnconv_status snnconv_rates_get(const snnconv_rates* rates, const char* node_id, int denormalized,
                                             snnconv_tensor** out);
SNNCONV_API double snnconv_rates_conservation_error(const snnconv_rates* rates);
/* Appends `step,node,mean_rate,min_rate,max_rate` rows (with a leading image
 * column when image_index >= 0); writes the header when `header` is set. */
SNNCONV_API snnconv_status snnconv_rates_write_csv(const snnconv_rates* rates, const char* path, int header,
                                                   long image_index);
/* One raster file per recorded node: `<dir>/<prefix><node>.raster`, with
 * '/' in node ids replaced by '_'. */
SNNCONV_API snnconv_status snnconv_rates_write_rasters(const snnconv_rates* rates, const char* dir,
                                                       const char* prefix);
SNNCONV_API void snnconv_rates_free(snnconv_rates* rates);

/* Correlation between the analog model's normalized activations and SNN
 * rates at each of `at_ms`. With `self_check` set the rates are replaced by
 * the normalized model's own clipped analog activations. */
SNNCONV_API snnconv_status snnconv_correlate(const snnconv_model* model, const snnconv_model* normalized,
                                             const snnconv_tensor* image, const snnconv_sim_config* config,
                                             const double* at_ms, size_t at_count, const char* const* layers,
                                             size_t layer_count, int self_check, snnconv_corr_report** out);
SNNCONV_API size_t snnconv_corr_report_count(const snnconv_corr_report* report);
SNNCONV_API double snnconv_corr_report_time(const snnconv_corr_report* report, size_t index);
SNNCONV_API const char* snnconv_corr_report_layer(const snnconv_corr_report* report, size_t index);
SNNCONV_API size_t snnconv_corr_report_pairs(const snnconv_corr_report* report, size_t index);
/* Returns 1 and stores r when defined, 0 when either side is constant. */
SNNCONV_API int snnconv_corr_report_pearson(const snnconv_corr_report* report, size_t index, double* r);
/* `time_ms,layer,pearson,count` summary rows. */
SNNCONV_API snnconv_status snnconv_corr_report_write_summary(const snnconv_corr_report* report, const char* path);
/* Scatter rows `layer,neuron,analog,rate` for the snapshot at `time_ms`. */
SNNCONV_API snnconv_status snnconv_corr_report_write_scatter(const snnconv_corr_report* report, double time_ms,
                                                             const char* path);
SNNCONV_API void snnconv_corr_report_free(snnconv_corr_report* report);

/* mAP against the dataset annotations, sampled every `sample_every_ms` and
 * at the end, plus the analog model's reference. */
SNNCONV_API snnconv_status snnconv_evaluate(const snnconv_model* model, const snnconv_model* normalized,
                                            const char* dataset_manifest, const char* anchors_path,
                                            const snnconv_sim_config* config, double sample_every_ms,
                                            snnconv_map_series** out);
SNNCONV_API size_t snnconv_map_series_count(const snnconv_map_series* series);
SNNCONV_API double snnconv_map_series_time(const snnconv_map_series* series, size_t index);
/* Returns 1 and stores the value when defined. */
SNNCONV_API int snnconv_map_series_map(const snnconv_map_series* series, size_t index, double* map);
SNNCONV_API int snnconv_map_series_ann_map(const snnconv_map_series* series, double* map);
/* Share of images whose final SNN detections match the analog detections
 * one-to-one with equal classes and IoU >= min_iou. */
SNNCONV_API double snnconv_map_series_agreement(const snnconv_map_series* series, double min_iou);
SNNCONV_API double snnconv_map_series_conservation_error(const snnconv_map_series* series);
SNNCONV_API snnconv_status snnconv_map_series_write_csv(const snnconv_map_series* series, const char* path,
                                                        int per_class);
SNNCONV_API void snnconv_map_series_free(snnconv_map_series* series);

/* kind: "toy-classifier", "mini-fpn-detector" or "blob-detector". */
SNNCONV_API snnconv_status snnconv_generate_fixture(const char* kind, uint64_t seed, size_t count,
                                                    const char* out_dir);

#ifdef __cplusplus
}
#endif

#endif
