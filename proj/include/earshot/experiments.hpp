#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "earshot/training.hpp"

namespace earshot {

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthSpec {
  Index n_utterances = 100;
  std::array<int, kSeverityClasses> listeners{9, 13, 4};  // mild, moderate, moderately severe
  int n_systems = 4;
  std::uint64_t seed = 0;
  Backbone backbone = Backbone::synthetic;
  LayerWindow layers{0, 7};   // encoder indices present in every stack
  LayerWindow planted{2, 5};  // layers whose ear tokens carry the reference
  Index min_frames = 8;
  Index max_frames = 24;
  Index feature_dim = kSfmDim;
  double label_noise_sd = 5.0;
  Index utterances_per_scene = 4;
  /// Weight of the clarity cue in the ear log-Mel energies (0 removes it).
  double mel_cue = 0.25;
  /// Speech and noise gains are exp(U(-s, s)); without the reference the
  /// clarity of an ear is confounded with these gains.
  double gain_spread = 0.7;
  /// Per-token deviation from the layer prototypes.
  double token_spread = 0.5;

  void validate() const;
};

std::string format_synth_spec(const SynthSpec& spec);
SynthSpec parse_synth_spec(const std::string& text);
SynthSpec load_synth_spec(const std::filesystem::path& path);

/// Per-utterance latents, kept for analysis and tests.
struct SynthLatent {
  double clarity_left = 0, clarity_right = 0;
  double gain = 1;
  Severity severity = Severity::mild;
  double clean_label = 0;  // before noise, after clamp
};

struct SynthData {
  Dataset data;
  std::vector<SynthLatent> latents;
};

double severity_penalty(Severity s);

/// clamp(100 * max(cL, cR) - penalty(severity), 0, 100).
double synth_clean_label(double clarity_left, double clarity_right, Severity s);

/// Listener profiles with audiograms whose WHO grade matches the severity.
std::vector<ListenerProfile> synth_listeners(const std::array<int, kSeverityClasses>& counts,
                                             std::mt19937_64& rng);

/// Raw (unpooled) features for utterance `i` of the spec's dataset.
FeatureBundle synth_bundle(const SynthSpec& spec, Index i, SynthLatent& latent);

/// Generates the dataset. With `pooled`, bundles are passed through
/// pool_bundle to keep memory low; model inputs are unchanged.
SynthData generate_synthetic(const SynthSpec& spec, bool pooled = true, int jobs = 1);

/// Streaming variant: raw bundles go to `sink` (called concurrently when
/// jobs > 1) and the returned dataset holds no features.
SynthData generate_synthetic(const SynthSpec& spec,
                             const std::function<void(std::size_t, FeatureBundle&&)>& sink,
                             int jobs = 1);

// ---------------------------------------------------------------------------
// Reports

struct GroupStat {
  std::string label;
  double rmse = 0.0;
  Index n = 0;
};

/// sqrt(sum n * rmse^2 / sum n).
double pooled_rmse(std::span<const GroupStat> groups);

struct StratifiedReport {
  std::string name;
  std::vector<GroupStat> groups;  // per system or per listener
  double pooled_rmse = 0.0;       // NaN when empty
  Index n = 0;
};

/// Seen/unseen systems and seen/unseen listeners relative to `train`.
struct Stratification {
  StratifiedReport seen_systems, unseen_systems, seen_listeners, unseen_listeners;
};

/// Pairs predictions with `truth` by utterance id. Every prediction must have
/// a labelled truth record; missing ids are listed in the error.
Stratification stratify(std::span<const PredictionRecord> predictions,
                        std::span<const UtteranceRecord> truth,
                        std::span<const UtteranceRecord> train);

struct SceneHistogram {
  std::vector<GroupStat> scenes;  // per-scene RMSE, sorted by scene id
  double bin_width = 5.0;
  std::vector<Index> counts;      // bin k covers [k * width, (k + 1) * width)
  double tail_threshold = 40.0;
  double tail_share = 0.0;        // share of scenes with RMSE above the threshold
};

SceneHistogram scene_histogram(std::span<const PredictionRecord> predictions,
                               std::span<const UtteranceRecord> truth, double bin_width = 5.0,
                               double tail_threshold = 40.0);

/// Overall RMSE of predictions against labelled truth records.
double overall_rmse(std::span<const PredictionRecord> predictions,
                    std::span<const UtteranceRecord> truth);

// ---------------------------------------------------------------------------
// Layer sweeps

struct SweepSpec {
  int window_size = 4;
  std::vector<LayerWindow> windows;  // empty: tile `layer_range` with window_size blocks
  LayerWindow layer_range{0, 23};
  std::vector<Readout> setups{Readout::severityToken, Readout::meanPool, Readout::clsPool};
  int folds = 1;  // cells average best val RMSE over the first `folds` folds
  ModelConfig model;
  TrainConfig train;

  void validate() const;
  std::vector<LayerWindow> candidates() const;
};

/// Keys: window_size, windows, layer_range, setups, folds; "model." and
/// "train." prefixed keys go to the respective configs.
SweepSpec parse_sweep_spec(const std::string& text);
SweepSpec load_sweep_spec(const std::filesystem::path& path);

struct SweepCell {
  LayerWindow window;
  Readout setup = Readout::severityToken;
  double val_rmse = 0.0;  // NaN when the cell failed
  std::string error;
};

struct SweepResult {
  std::vector<SweepCell> cells;  // window-major, in candidate order
  std::size_t argmin = 0;
};

/// Trains every (window, setup) cell; a failing cell records its error.
SweepResult run_sweep(const SweepSpec& spec, const Dataset& data, int jobs = 1);

// ---------------------------------------------------------------------------
// CSV output (6 decimals)

void write_predictions_csv(const std::filesystem::path& path,
                           std::span<const PredictionRecord> records, bool per_checkpoint = false);
std::vector<PredictionRecord> read_predictions_csv(const std::filesystem::path& path);
void write_sweep_csv(const std::filesystem::path& path, const SweepResult& result);
void write_stratified_csv(const std::filesystem::path& path, const Stratification& s);
void write_histogram_csv(const std::filesystem::path& path, const SceneHistogram& h);

}  // namespace earshot
