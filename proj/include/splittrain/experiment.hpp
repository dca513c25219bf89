#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "splittrain/data.hpp"
#include "splittrain/nn.hpp"
#include "splittrain/train.hpp"

namespace splittrain {

struct DatasetSection {
  std::filesystem::path path;             // dataset directory
  std::optional<GenConfig> generate;      // procedural dataset
  std::optional<std::filesystem::path> ingest_source;  // or external corpus
  IngestConfig ingest;
  bool vary_split = false;  // held-out backgrounds drawn per seed
};

struct ModelSection {
  std::array<std::size_t, 4> channel_widths{16, 32, 64, 128};
  std::size_t hidden_dim = 128;
  std::optional<std::size_t> class_count;
};

struct EvalSection {
  bool random_bg = true;
  std::uint64_t palette_seed = 1234;
  std::size_t runs = 5;
  std::size_t gradcam_samples = 50;
  double iou_quantile = 0.8;
};

struct ExperimentConfig {
  DatasetSection dataset;
  ModelSection model;
  TrainConfig train;
  std::string tap = "last";  // "last", "intermediate" or a layer index
  EvalSection eval;
  std::filesystem::path output;

  // Image size the model sees.
  std::pair<std::size_t, std::size_t> image_size() const;
  ImageMode mode() const;
  std::size_t class_count() const;
};

// Relative paths resolve against the config file's directory. Unknown fields,
// wrong types and cross-section inconsistencies raise ConfigError naming the
// field; malformed JSON reports line and column.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
ExperimentConfig parse_experiment_config(const std::string& text,
                                         const std::filesystem::path& base_dir);

// "last" -> feature_end, "intermediate" -> third block, or a literal index.
std::size_t resolve_tap(const std::string& spec, const Model& model);
std::string method_label(Method method, const std::string& tap_spec);

ModelConfig model_config_for(const ExperimentConfig& config, std::uint64_t seed);

// Backgrounds held out for a given run seed (fixed unless vary_split).
std::vector<int> held_out_for(const ExperimentConfig& config, std::uint64_t seed);

// Train/test manifests for a run; re-splits when vary_split is set.
std::pair<DatasetManifest, DatasetManifest> run_split(const ExperimentConfig& config,
                                                      std::uint64_t seed);

// Random-background variant of a test set built in memory, keyed by index.
std::vector<Sample> random_background_samples(const DatasetManifest& test,
                                              std::uint64_t palette_seed);

// Mean attention-IoU of Grad-CAM (true label, given tap) over `count` test
// images spread evenly through the set.
double mean_attention_iou(Model& model, const PreparedSet& test, std::size_t count,
                          std::size_t tap, double q);
std::vector<std::size_t> spread_indices(std::size_t size, std::size_t count);

struct RunRecord {
  std::string method;
  std::string label;
  std::size_t tap = 0;
  std::uint64_t seed = 0;
  std::string stage3_mode;
  double test_accuracy = 0.0;
  std::size_t test_count = 0;
  std::optional<double> random_bg_accuracy;
  std::optional<double> attention_iou;
  std::size_t iou_samples = 0;
  std::optional<double> match_initial_mse;
  std::optional<double> match_first_epoch_mse;
  std::optional<double> match_final_mse;
  std::vector<std::string> checkpoints;
  std::vector<int> held_out_backgrounds;
  std::size_t configured_runs = 0;
};

std::string to_json(const RunRecord& record);
RunRecord run_record_from_json(const std::string& text);

struct MetricSummary {
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;  // population (divide by n)
};

MetricSummary summarize(const std::vector<double>& values);

struct MethodSummary {
  std::string label;
  std::size_t runs = 0;
  std::size_t configured_runs = 0;
  MetricSummary test_accuracy;
  std::optional<MetricSummary> random_bg_accuracy;
  std::optional<MetricSummary> attention_iou;
  std::size_t test_count = 0;
  std::vector<std::string> run_dirs;
  std::vector<std::string> warnings;
};

struct Report {
  std::vector<MethodSummary> methods;
};

// Collects run.json files below each root. A directory with a log but no
// run.json is an incomplete run and raises std::runtime_error.
Report build_report(const std::vector<std::filesystem::path>& roots);
std::string report_json(const Report& report);
std::string report_table(const Report& report);

}  // namespace splittrain
