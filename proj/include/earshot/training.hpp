#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "earshot/model.hpp"

namespace earshot {

struct TrainConfig {
  double lr = 3e-5;
  double weight_decay = 1e-2;
  Index batch_size = 8;
  int epochs = 9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  std::optional<double> grad_clip;  // global L2 max-norm
  bool cosine_schedule = false;

  void validate() const;
};

std::string format_train_config(const TrainConfig& cfg);
TrainConfig parse_train_config(const std::string& text);
TrainConfig load_train_config(const std::filesystem::path& path);
void save_train_config(const std::filesystem::path& path, const TrainConfig& cfg);

/// sqrt(mean((pred - truth)^2)).
double rmse(std::span<const double> pred, std::span<const double> truth);

/// Adam moments, one pair per parameter in store order.
struct AdamState {
  std::vector<Tensor> m, v;
  long step = 0;
};

/// One AdamW update from the gradients held in `store`. Weight decay is
/// applied to the weights directly, outside the adaptive update. `lr`
/// overrides cfg.lr when a schedule is active.
void adamw_step(ParameterStore& store, AdamState& state, const TrainConfig& cfg,
                std::optional<double> lr = std::nullopt);

struct Fold {
  std::vector<std::string> train;
  std::vector<std::string> val;
};

struct FoldPlan {
  std::vector<Fold> folds;
};

/// Per fold, 2 validation listeners of each severity drawn without
/// replacement; classes with fewer than 2k members are reused across folds.
FoldPlan make_folds(std::span<const ListenerProfile> listeners, int k, std::uint64_t seed);

/// Throws InputError unless every fold is listener-disjoint, covers all
/// listeners and has a (2,2,2) validation split.
void validate_fold_plan(const FoldPlan& plan, std::span<const ListenerProfile> listeners);

struct UtteranceRecord {
  std::string utterance_id;
  std::string scene_id;
  std::string system_id;
  std::string listener_id;
  std::optional<double> label;
};

struct Dataset {
  std::vector<UtteranceRecord> records;
  std::vector<FeatureBundle> features;  // parallel to records
  std::vector<ListenerProfile> listeners;

  std::size_t size() const { return records.size(); }
  const ListenerProfile& listener(const std::string& id) const;
  /// Record positions whose listener is in `ids`, in dataset order.
  std::vector<std::size_t> select(std::span<const std::string> ids) const;
  void validate() const;
};

struct Checkpoint {
  ModelConfig model;
  ParameterStore params;
  ConditioningStats stats;
  int fold = 0;
  int best_epoch = 0;  // 1-based
  double val_rmse = 0.0;
  std::vector<double> train_loss;  // mean batch loss per epoch
  std::vector<double> val_curve;   // val RMSE per epoch
};

/// Directory layout: params.ears, model.cfg, meta.txt.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

struct Example {
  ModelInput input;
  const ListenerProfile* listener = nullptr;  // owned by the dataset
  double label = 0.0;
};

/// Prepared, labelled examples of the listed records under `cfg`.
std::vector<Example> make_examples(const Dataset& data, std::span<const std::size_t> rows,
                                   const ModelConfig& cfg);

/// RMSE between pooled predictions and labels of examples[batch], as a graph node.
Var batch_loss(Graph& g, const Predictor& model, std::span<const Example> examples,
               std::span<const std::size_t> batch);

/// RMSE of the pooled predictions over all examples (inference mode).
double evaluate_rmse(const Predictor& model, std::span<const Example> examples);

/// Trains on the fold's training listeners and keeps the epoch with the
/// lowest validation RMSE (earliest on ties). Throws NumericError naming
/// the epoch and batch when the loss diverges.
Checkpoint train_fold(const Dataset& data, const Fold& fold, const ModelConfig& model_cfg,
                      const TrainConfig& train_cfg, int fold_id = 0);

/// Same as train_fold with explicit record positions; conditioning stats
/// come from the listeners of `train_rows`.
Checkpoint train_rows(const Dataset& data, std::span<const std::size_t> train_rows,
                      std::span<const std::size_t> val_rows, const ModelConfig& model_cfg,
                      const TrainConfig& train_cfg, int fold_id = 0);

/// Trains every fold, up to `jobs` at a time.
std::vector<Checkpoint> train_folds(const Dataset& data, const FoldPlan& plan,
                                    const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                                    int jobs = 1);

struct PredictionRecord {
  std::string utterance_id;
  double left = 0, right = 0, pooled = 0;
  std::vector<double> per_checkpoint;  // pooled score of each checkpoint
};

/// Mean of the checkpoints' per-utterance scores. All checkpoints must share
/// one model config.
std::vector<PredictionRecord> ensemble_predict(std::span<const Checkpoint> checkpoints,
                                               const Dataset& data, int jobs = 1);

/// Arithmetic mean written as x0 + mean(x - x0), exact when all values agree.
double ensemble_mean(std::span<const double> values);

}  // namespace earshot
