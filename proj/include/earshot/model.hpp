#pragma once

#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "earshot/attention.hpp"
#include "earshot/conditioning.hpp"
#include "earshot/dsp.hpp"

namespace earshot {

/// Ear readout: A takes the conditioning token, B averages the layer rows,
/// C takes a learned CLS token.
enum class Readout { severityToken, meanPool, clsPool };
enum class EarPooling { bestEarLSE, averageEarFeature };

std::string to_string(Readout r);
/// Accepts the enum names and the letters A, B, C.
Readout readout_from_string(const std::string& s);
char setup_letter(Readout r);
std::string to_string(EarPooling p);
EarPooling ear_pooling_from_string(const std::string& s);

struct ModelConfig {
  Index d_model = 256;
  Index n_heads = 4;
  std::vector<Backbone> backbones{Backbone::canaryLike};
  std::vector<LayerWindow> layer_windows{{10, 16}};  // one per backbone
  Readout readout = Readout::severityToken;
  ConditioningMode conditioning = ConditioningMode::categorical;
  EarPooling ear_pooling = EarPooling::bestEarLSE;
  double beta = 6.0;
  bool use_reference = true;
  double dropout_p = 0.1;
  Index mscnn_channels = 192;
  Index ffn_mult = 2;
  bool positional_encoding = false;
  /// Reserved for banded cross-reference attention; only 0 (full time) is implemented.
  Index ref_time_window = 0;
  bool logmel_norm = false;

  void validate() const;
  AttentionConfig attention() const { return {d_model, n_heads, dropout_p, ffn_mult}; }
  /// Selected layers summed over backbones.
  Index total_layers() const;
};

/// Flat "key = value" text, one field per line; '#' starts a comment.
std::string format_model_config(const ModelConfig& cfg);
ModelConfig parse_model_config(const std::string& text);
ModelConfig load_model_config(const std::filesystem::path& path);
void save_model_config(const std::filesystem::path& path, const ModelConfig& cfg);

/// Model-ready tensors of one stream.
struct StreamInput {
  Tensor sfm;         // [L, T', 1024] pooled tokens of the selected layers, backbone-major
  Mask token_valid;   // [T']
  Tensor mel;         // [T, 128], rows past the valid frames zeroed
  Mask frame_valid;   // [T]
};

struct ModelInput {
  std::string utterance_id;
  StreamInput left;
  StreamInput right;
  std::optional<StreamInput> reference;
};

/// Pools every SFM stack x8 over its valid frames and pads to ceil(T/8)
/// tokens, so later layer selection needs no further pooling. Stacks must
/// have as many frames as the log-Mel matrix.
StreamFeatures pool_stream(const StreamFeatures& stream);
FeatureBundle pool_bundle(const FeatureBundle& bundle);

/// Selects the configured layer windows and builds masks. Accepts raw
/// bundles and bundles already passed through pool_bundle.
ModelInput prepare_input(const FeatureBundle& bundle, const ModelConfig& cfg);

/// Registers every parameter `cfg` needs, in a fixed order.
void register_model(ParameterStore& store, const ModelConfig& cfg, std::mt19937_64& rng);

/// Trainable scalars outside the conditioning pathway.
Index backbone_parameter_count(const ParameterStore& store);

// Stages. Each takes the graph and the parameter store holding the model.

/// Three dilated branches (K=3/d=1, K=5/d=2, K=9/d=4) with SiLU, concatenated,
/// then projected to d_model. [T,128] -> [T,d_model].
Var mscnn(Graph& g, const ParameterStore& store, const Var& mel, const ModelConfig& cfg);

/// Projects [T',1024] SFM tokens to d_model and lets them attend to the
/// [T,d_model] MSCNN features (keys limited to valid frames).
Var fuse_sfm_mscnn(Graph& g, const ParameterStore& store, const Var& sfm_tokens,
                   const Var& mscnn_feats, const Mask& frame_valid, const ModelConfig& cfg);

/// Fused token sequences of all layers of one stream, [T',d] each.
std::vector<Var> fuse_stream(Graph& g, const ParameterStore& store, const StreamInput& in,
                             const ModelConfig& cfg);

/// Temporal self-encoder per layer. In Setup C a temporal CLS row is appended
/// to each sequence first; the returned mask covers it.
struct EncodedStream {
  std::vector<Var> layers;  // [T'(+1), d]
  Mask valid;
};
EncodedStream temporal_encode(Graph& g, const ParameterStore& store,
                              const std::vector<Var>& fused, const Mask& token_valid,
                              const ModelConfig& cfg);

/// One summary row per layer, [L,d]. With `reference`, each layer first
/// attends to the same layer of the reference (full time).
Var temporal_summarize(Graph& g, const ParameterStore& store, const EncodedStream& stream,
                       const EncodedStream* reference, const ModelConfig& cfg);

struct LayerStageOutput {
  Var left, right;  // [L + extra, d] after cross-ear
  Var readout_left, readout_right;  // [d]
};

/// Appends the conditioning token and/or CLS, self-encodes over the layer
/// axis, attends to the reference, then exchanges information across ears
/// (both directions from the pre-exchange states).
LayerStageOutput layer_stage(Graph& g, const ParameterStore& store, const Var& left,
                             const Var& right, const std::optional<Var>& reference,
                             const Var& cond_token, const ModelConfig& cfg);

/// d -> d, SiLU, -> 1, sigmoid x 100. Returns a rank-0 score.
Var score_head(Graph& g, const ParameterStore& store, const Var& readout);

/// Feature-level mean of the two readouts scored by the shared head.
Var average_ear_pool(Graph& g, const ParameterStore& store, const Var& left_readout,
                     const Var& right_readout);

struct ModelOutput {
  Var left, right, pooled;  // rank-0 scores
  LayerStageOutput layers;
};

struct Prediction {
  double left = 0, right = 0, pooled = 0;
};

class Predictor {
 public:
  Predictor(ModelConfig cfg, std::uint64_t seed);
  /// Adopts trained parameters; names and shapes must match `cfg`.
  Predictor(ModelConfig cfg, ParameterStore params, ConditioningStats stats);

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }
  const ConditioningStats& stats() const { return stats_; }
  void set_stats(const ConditioningStats& stats) { stats_ = stats; }

  /// Errors from a stage are rethrown with the stage name prefixed.
  ModelOutput forward(Graph& g, const ModelInput& in, const ListenerProfile& listener) const;
  Prediction predict(const ModelInput& in, const ListenerProfile& listener) const;

 private:
  ModelConfig cfg_;
  ParameterStore store_;
  ConditioningStats stats_;
};

}  // namespace earshot
