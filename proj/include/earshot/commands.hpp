#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "earshot/experiments.hpp"

namespace earshot {

namespace fs = std::filesystem;

/// One manifest row: ids, label and the feature files of each stream.
struct ManifestRecord {
  UtteranceRecord record;
  StreamPaths left, right;
  std::optional<StreamPaths> reference;
};

/// JSON with "manifest_version": 1; relative paths resolve against the
/// manifest's directory.
std::vector<ManifestRecord> read_manifest(const fs::path& path, bool check_files = true);
void write_manifest(const fs::path& path, const std::vector<ManifestRecord>& records);

/// JSON with "listeners_version": 1.
std::vector<ListenerProfile> read_listeners(const fs::path& path);
void write_listeners(const fs::path& path, const std::vector<ListenerProfile>& listeners);

/// Reads every referenced feature file; bundles are pooled on load.
Dataset load_dataset(const fs::path& manifest, const fs::path& listeners, int jobs = 1);

void write_fold_plan(const fs::path& path, const FoldPlan& plan);
FoldPlan read_fold_plan(const fs::path& path);

/// Writes features/, manifest.json and listeners.json under `out_dir`.
std::vector<ManifestRecord> cmd_synth(const SynthSpec& spec, const fs::path& out_dir, int jobs = 1);

struct TrainOptions {
  fs::path manifest, listeners, out_dir;
  ModelConfig model;
  TrainConfig train;
  int folds = 5;
  int jobs = 1;
};

/// Writes fold<k>/ checkpoint directories, folds.json, fold_report.csv and
/// copies of both configs. Returns the checkpoint directories.
std::vector<fs::path> cmd_train(const TrainOptions& opts);

struct PredictOptions {
  fs::path manifest, listeners, out_csv;
  std::vector<fs::path> checkpoints;  // checkpoint dirs, or a cmd_train output dir
  bool per_checkpoint = false;
  int jobs = 1;
};

std::vector<PredictionRecord> cmd_predict(const PredictOptions& opts);

struct EvaluateOptions {
  fs::path predictions, manifest;
  std::optional<fs::path> train_manifest;
  fs::path out_dir;
  double bin_width = 5.0;
  double tail_threshold = 40.0;
};

struct EvaluateReport {
  double rmse = 0.0;
  Index n = 0;
  std::optional<Stratification> strata;
  std::optional<SceneHistogram> scenes;
};

/// Writes metrics.csv, plus stratified.csv and scenes.csv when applicable.
EvaluateReport cmd_evaluate(const EvaluateOptions& opts);

struct SweepOptions {
  fs::path manifest, listeners, out_csv;
  SweepSpec spec;
  int jobs = 1;
};

SweepResult cmd_sweep(const SweepOptions& opts);

}  // namespace earshot
